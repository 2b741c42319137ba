//! PubTator corpus ingestion and mention-level instance construction.
//!
//! A PubTator file is a sequence of blank-line separated blocks:
//!
//! ```text
//! 227508|t|Naloxone reverses the antihypertensive effect of clonidine.
//! 227508|a|In unanesthetized, spontaneously hypertensive rats ...
//! 227508	0	8	Naloxone	Chemical	D009270
//! 227508	49	58	clonidine	Chemical	D003000
//! 227508	CID	D008750	D007022
//! ```
//!
//! Mention offsets are character offsets into `title + " " + abstract`.
//! Relations bind MeSH identifiers at the document level; they are moved
//! to the mention level by pairing every chemical mention with every
//! disease mention of the document.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{CharIndex, WordIndex};

/// Default upper bound on the number of tokens in a relation mention.
pub const DEFAULT_MAX_TOKENS: usize = 400;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed {field}: {detail}")]
    Malformed {
        line: usize,
        field: &'static str,
        detail: String,
    },
    #[error("line {line}: PMID {found} inside the block of PMID {expected}")]
    PmidMismatch {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("training set is empty")]
    EmptyTraining,
    #[error("instance construction for PMID {pmid}: {detail}")]
    Internal { pmid: String, detail: String },
}

fn malformed(line: usize, field: &'static str, detail: impl Into<String>) -> CorpusError {
    CorpusError::Malformed {
        line,
        field,
        detail: detail.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityKind {
    Chemical,
    Disease,
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntityKind::Chemical => f.write_str("Chemical"),
            EntityKind::Disease => f.write_str("Disease"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub kind: EntityKind,
    pub mesh_id: String,
}

/// (chemical MeSH id, disease MeSH id)
pub type CidPair = (String, String);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub pmid: String,
    pub title: String,
    pub abstract_text: String,
    pub mentions: Vec<Mention>,
    pub gold_cid: BTreeSet<CidPair>,
}

impl Document {
    /// `title + " " + abstract`, the string mention offsets refer to.
    pub fn text(&self) -> String {
        format!("{} {}", self.title, self.abstract_text)
    }

    pub fn mentions_of(&self, kind: EntityKind) -> impl Iterator<Item = &Mention> {
        self.mentions.iter().filter(move |m| m.kind == kind)
    }

    /// Id pairs with at least one chemical and one disease mention anywhere
    /// in the document.
    pub fn cooccurring_pairs(&self) -> BTreeSet<CidPair> {
        let chems: BTreeSet<&str> = self
            .mentions_of(EntityKind::Chemical)
            .map(|m| m.mesh_id.as_str())
            .collect();
        let dis: BTreeSet<&str> = self
            .mentions_of(EntityKind::Disease)
            .map(|m| m.mesh_id.as_str())
            .collect();
        chems
            .iter()
            .flat_map(|c| dis.iter().map(move |d| (c.to_string(), d.to_string())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedCorpus {
    pub documents: Vec<Document>,
    pub warnings: Vec<ParseWarning>,
}

impl ParsedCorpus {
    /// Length in characters of the longest token over all documents.
    pub fn longest_word(&self) -> usize {
        self.documents
            .iter()
            .flat_map(|d| tokenize(&d.text()))
            .map(|t| t.text.chars().count())
            .max()
            .unwrap_or(0)
    }

    /// Every gold CID pair of the corpus.
    pub fn relations(&self) -> BTreeSet<CidPair> {
        self.documents.iter().flat_map(|d| d.gold_cid.iter().cloned()).collect()
    }
}

#[derive(Default)]
struct BlockBuilder {
    pmid: Option<String>,
    title: Option<String>,
    abstract_text: Option<String>,
    text_chars: Vec<char>,
    mentions: Vec<Mention>,
    relations: Vec<(usize, CidPair)>,
    start_line: usize,
}

impl BlockBuilder {
    fn check_pmid(&mut self, line: usize, pmid: &str) -> Result<(), CorpusError> {
        match &self.pmid {
            Some(p) if p != pmid => Err(CorpusError::PmidMismatch {
                line,
                expected: p.clone(),
                found: pmid.to_string(),
            }),
            Some(_) => Ok(()),
            None => {
                self.pmid = Some(pmid.to_string());
                self.start_line = line;
                Ok(())
            }
        }
    }

    fn text_ready(&mut self, line: usize) -> Result<(), CorpusError> {
        match (&self.title, &self.abstract_text) {
            (Some(t), Some(a)) => {
                if self.text_chars.is_empty() {
                    self.text_chars = format!("{t} {a}").chars().collect();
                }
                Ok(())
            }
            _ => Err(malformed(line, "block", "annotation before title and abstract lines")),
        }
    }

    fn finish(self, warnings: &mut Vec<ParseWarning>) -> Result<Option<Document>, CorpusError> {
        let Some(pmid) = self.pmid else {
            return Ok(None);
        };
        let (Some(title), Some(abstract_text)) = (self.title, self.abstract_text) else {
            return Err(malformed(
                self.start_line,
                "block",
                format!("PMID {pmid} lacks a title or abstract line"),
            ));
        };
        let ids: HashSet<(&str, EntityKind)> = self.mentions.iter().map(|m| (m.mesh_id.as_str(), m.kind)).collect();
        let mut gold_cid = BTreeSet::new();
        for (line, (c, d)) in self.relations {
            if !ids.contains(&(c.as_str(), EntityKind::Chemical)) || !ids.contains(&(d.as_str(), EntityKind::Disease)) {
                warnings.push(ParseWarning {
                    line,
                    message: format!("relation {c}-{d} references an id without a matching mention"),
                });
            }
            gold_cid.insert((c, d));
        }
        Ok(Some(Document {
            pmid,
            title,
            abstract_text,
            mentions: self.mentions,
            gold_cid,
        }))
    }
}

/// Parses a PubTator stream. Malformed lines are errors; recoverable
/// irregularities (text/offset disagreement, unannotated `-1` ids, relations
/// without matching mentions) are collected as warnings.
pub fn parse_pubtator<R: BufRead>(reader: R) -> Result<ParsedCorpus, CorpusError> {
    let mut out = ParsedCorpus::default();
    let mut block = BlockBuilder::default();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some(doc) = std::mem::take(&mut block).finish(&mut out.warnings)? {
                out.documents.push(doc);
            }
            continue;
        }
        if !line.contains('\t') {
            let mut parts = line.splitn(3, '|');
            let (pmid, tag, body) = match (parts.next(), parts.next(), parts.next()) {
                (Some(p), Some(t), Some(b)) => (p, t, b),
                _ => return Err(malformed(lineno, "line", "expected PMID|t|title or PMID|a|abstract")),
            };
            block.check_pmid(lineno, pmid)?;
            match tag {
                "t" => block.title = Some(body.to_string()),
                "a" => block.abstract_text = Some(body.to_string()),
                other => return Err(malformed(lineno, "section tag", format!("unknown tag {other:?}"))),
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        block.check_pmid(lineno, fields[0])?;
        if fields.get(1) == Some(&"CID") {
            if fields.len() < 4 {
                return Err(malformed(
                    lineno,
                    "relation",
                    format!("{} fields, expected 4", fields.len()),
                ));
            }
            block
                .relations
                .push((lineno, (fields[2].to_string(), fields[3].to_string())));
            continue;
        }
        if fields.len() < 6 {
            return Err(malformed(
                lineno,
                "mention",
                format!("{} fields, expected 6", fields.len()),
            ));
        }
        block.text_ready(lineno)?;
        let start: usize = fields[1]
            .parse()
            .map_err(|_| malformed(lineno, "start offset", fields[1]))?;
        let end: usize = fields[2]
            .parse()
            .map_err(|_| malformed(lineno, "end offset", fields[2]))?;
        if end <= start {
            return Err(malformed(lineno, "end offset", format!("end {end} <= start {start}")));
        }
        if end > block.text_chars.len() {
            return Err(malformed(
                lineno,
                "end offset",
                format!("{end} beyond text length {}", block.text_chars.len()),
            ));
        }
        let kind = match fields[4] {
            "Chemical" => EntityKind::Chemical,
            "Disease" => EntityKind::Disease,
            other => return Err(malformed(lineno, "entity type", other)),
        };
        let text = fields[3].to_string();
        let actual: String = block.text_chars[start..end].iter().collect();
        if actual != text {
            out.warnings.push(ParseWarning {
                line: lineno,
                message: format!("mention text {text:?} differs from {actual:?} at [{start}, {end})"),
            });
        }
        for id in fields[5].split('|').map(str::trim) {
            if id == "-1" || id.is_empty() {
                out.warnings.push(ParseWarning {
                    line: lineno,
                    message: format!("mention {text:?} has no usable MeSH id; dropped"),
                });
                continue;
            }
            block.mentions.push(Mention {
                start,
                end,
                text: text.clone(),
                kind,
                mesh_id: id.to_string(),
            });
        }
    }
    if let Some(doc) = block.finish(&mut out.warnings)? {
        out.documents.push(doc);
    }
    for w in &out.warnings {
        log::warn!("line {}: {}", w.line, w.message);
    }
    Ok(out)
}

/// Fraction of mentions whose text equals the substring at their offsets.
pub fn mention_text_agreement(docs: &[Document]) -> f64 {
    let mut total = 0usize;
    let mut ok = 0usize;
    for d in docs {
        let chars: Vec<char> = d.text().chars().collect();
        for m in &d.mentions {
            total += 1;
            if chars.get(m.start..m.end).map(|s| s.iter().collect::<String>()) == Some(m.text.clone()) {
                ok += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        ok as f64 / total as f64
    }
}

/// A token and its `[start, end)` character span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

const DETACHED: &[char] = &[
    '.', ',', ';', ':', '(', ')', '[', ']', '{', '}', '"', '\'', '!', '?', '/',
];

fn is_detached(c: char) -> bool {
    DETACHED.contains(&c)
}

/// Whitespace split, then leading and trailing punctuation characters
/// become tokens of their own. Inner characters (hyphens, digits, inner
/// periods) stay attached.
pub fn tokenize(text: &str) -> Vec<Token> {
    tokenize_with_cuts(text, &BTreeSet::new())
}

/// [`tokenize`], additionally splitting any token that straddles one of the
/// character offsets in `cuts` (used to align tokens with mention bounds).
pub fn tokenize_with_cuts(text: &str, cuts: &BTreeSet<usize>) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let (mut s, mut e) = (start, i);
        let mut tail = Vec::new();
        while s < e && is_detached(chars[s]) {
            push_piece(&chars, s, s + 1, cuts, &mut out);
            s += 1;
        }
        while e > s && is_detached(chars[e - 1]) {
            tail.push(e - 1);
            e -= 1;
        }
        if s < e {
            push_piece(&chars, s, e, cuts, &mut out);
        }
        for &p in tail.iter().rev() {
            push_piece(&chars, p, p + 1, cuts, &mut out);
        }
    }
    out
}

fn push_piece(chars: &[char], start: usize, end: usize, cuts: &BTreeSet<usize>, out: &mut Vec<Token>) {
    let mut s = start;
    for &c in cuts.range(start + 1..end) {
        out.push(Token {
            text: chars[s..c].iter().collect(),
            start: s,
            end: c,
        });
        s = c;
    }
    out.push(Token {
        text: chars[s..end].iter().collect(),
        start: s,
        end,
    });
}

/// Sentence id of every token. A sentence ends at a detached "." followed
/// by whitespace (or the end of text), unless the preceding token is a
/// single letter or "e.g"/"i.e". The title always forms its own sentence.
pub fn sentence_ids(text: &str, tokens: &[Token], title_len: usize) -> Vec<usize> {
    let chars: Vec<char> = text.chars().collect();
    let mut ids = Vec::with_capacity(tokens.len());
    let mut current = 0;
    let mut pending = false;
    for (k, tok) in tokens.iter().enumerate() {
        if k > 0 && (pending || (tok.start > title_len && tokens[k - 1].start < title_len)) {
            current += 1;
            pending = false;
        }
        ids.push(current);
        if tok.text == "." && chars.get(tok.end).is_none_or(|c| c.is_whitespace()) {
            let guarded = k > 0 && {
                let prev = &tokens[k - 1];
                let attached = prev.end == tok.start;
                let lower = prev.text.to_lowercase();
                attached
                    && ((prev.text.chars().count() == 1 && prev.text.chars().all(char::is_alphabetic))
                        || lower == "e.g"
                        || lower == "i.e")
            };
            if !guarded {
                pending = true;
            }
        }
    }
    ids
}

/// One mention-level classification unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationInstance {
    pub pmid: String,
    /// Real tokens only; padding is added when encoding.
    pub tokens: Vec<String>,
    /// Character span of every token in the document text.
    pub spans: Vec<(usize, usize)>,
    /// Last token of the chemical mention.
    pub i1: usize,
    /// Last token of the disease mention.
    pub i2: usize,
    pub chem_id: String,
    pub dis_id: String,
    /// Indices into the document's mention list.
    pub chem_mention: usize,
    pub dis_mention: usize,
    /// 1 for CID, 0 for no relation; `None` when unknown.
    pub label: Option<usize>,
}

impl RelationInstance {
    pub fn pair(&self) -> CidPair {
        (self.chem_id.clone(), self.dis_id.clone())
    }
}

/// Post-construction filter, e.g. a hypernym filter backed by a MeSH hierarchy.
pub trait InstanceFilter {
    fn keep(&self, doc: &Document, instance: &RelationInstance) -> bool;
}

/// Keeps everything.
pub struct KeepAll;

impl InstanceFilter for KeepAll {
    fn keep(&self, _: &Document, _: &RelationInstance) -> bool {
        true
    }
}

/// Builds one instance per (chemical mention, disease mention) pair.
pub fn build_instances(doc: &Document, n_max: usize) -> Result<Vec<RelationInstance>, CorpusError> {
    build_instances_filtered(doc, n_max, &KeepAll)
}

pub fn build_instances_filtered(
    doc: &Document,
    n_max: usize,
    filter: &dyn InstanceFilter,
) -> Result<Vec<RelationInstance>, CorpusError> {
    if n_max < 2 {
        return Err(CorpusError::Internal {
            pmid: doc.pmid.clone(),
            detail: format!("n_max {n_max} cannot hold two entities"),
        });
    }
    let text = doc.text();
    let cuts: BTreeSet<usize> = doc.mentions.iter().flat_map(|m| [m.start, m.end]).collect();
    let tokens = tokenize_with_cuts(&text, &cuts);
    let sentences = sentence_ids(&text, &tokens, doc.title.chars().count());
    let mut sent_bounds: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (k, &s) in sentences.iter().enumerate() {
        let e = sent_bounds.entry(s).or_insert((k, k + 1));
        e.1 = k + 1;
    }

    let token_range = |m: &Mention| -> Option<(usize, usize)> {
        let first = tokens.iter().position(|t| t.end > m.start && t.start < m.end)?;
        let last = tokens.iter().rposition(|t| t.end > m.start && t.start < m.end)?;
        Some((first, last))
    };
    let ranges: Vec<Option<(usize, usize)>> = doc.mentions.iter().map(token_range).collect();
    for (m, r) in doc.mentions.iter().zip(&ranges) {
        if r.is_none() {
            log::warn!("PMID {}: mention {:?} covers no token; skipped", doc.pmid, m.text);
        }
    }

    let mut out = Vec::new();
    for (ci, chem) in doc.mentions.iter().enumerate() {
        if chem.kind != EntityKind::Chemical {
            continue;
        }
        let Some((c_first, c_last)) = ranges[ci] else { continue };
        for (di, dis) in doc.mentions.iter().enumerate() {
            if dis.kind != EntityKind::Disease {
                continue;
            }
            let Some((d_first, d_last)) = ranges[di] else { continue };
            if c_last == d_last {
                log::warn!(
                    "PMID {}: mentions {:?} and {:?} end on the same token; pair skipped",
                    doc.pmid,
                    chem.text,
                    dis.text
                );
                continue;
            }
            let ws = sent_bounds[&sentences[c_first.min(d_first)]].0;
            let we = sent_bounds[&sentences[c_last.max(d_last)]].1;
            let keep = window_tokens(ws, we, c_last, d_last, n_max);
            let pos = |t: usize| keep.iter().position(|&k| k == t);
            let (Some(i1), Some(i2)) = (pos(c_last), pos(d_last)) else {
                return Err(CorpusError::Internal {
                    pmid: doc.pmid.clone(),
                    detail: "window dropped an entity token".into(),
                });
            };
            let inst = RelationInstance {
                pmid: doc.pmid.clone(),
                tokens: keep.iter().map(|&k| tokens[k].text.clone()).collect(),
                spans: keep.iter().map(|&k| (tokens[k].start, tokens[k].end)).collect(),
                i1,
                i2,
                chem_id: chem.mesh_id.clone(),
                dis_id: dis.mesh_id.clone(),
                chem_mention: ci,
                dis_mention: di,
                label: Some(usize::from(
                    doc.gold_cid.contains(&(chem.mesh_id.clone(), dis.mesh_id.clone())),
                )),
            };
            if filter.keep(doc, &inst) {
                out.push(inst);
            }
        }
    }
    Ok(out)
}

/// Token indices of the window `[ws, we)` cut down to at most `n_max`
/// tokens while keeping both entity tokens `a` and `b`. The cut is
/// symmetric around the pair; if the pair itself is farther apart than
/// `n_max`, the middle of the span between them is removed instead.
fn window_tokens(ws: usize, we: usize, a: usize, b: usize, n_max: usize) -> Vec<usize> {
    if we - ws <= n_max {
        return (ws..we).collect();
    }
    let (a, b) = (a.min(b), a.max(b));
    let core = b - a + 1;
    if core > n_max {
        let head = n_max / 2;
        let tail = n_max - head;
        return (a..a + head).chain(b + 1 - tail..=b).collect();
    }
    let extra = n_max - core;
    let (left_avail, right_avail) = (a - ws, we - 1 - b);
    let mut left = (extra / 2).min(left_avail);
    let mut right = (extra - extra / 2).min(right_avail);
    let spare = extra - left - right;
    if spare > 0 {
        let more_right = spare.min(right_avail - right);
        right += more_right;
        left += (spare - more_right).min(left_avail - left);
    }
    (a - left..=b + right).collect()
}

/// [`build_instances`] for every document, in document order.
pub fn build_all_instances(docs: &[Document], n_max: usize) -> Result<Vec<Vec<RelationInstance>>, CorpusError> {
    docs.par_iter().map(|d| build_instances(d, n_max)).collect()
}

/// Training vocabulary, character inventory and fixed sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub words: WordIndex,
    pub chars: CharIndex,
    pub seq_len: usize,
}

/// Word counts over all (lowercased) tokens of the training documents, the
/// characters seen in them, and `n = min(longest instance, n_max)`.
pub fn build_vocab(
    train_docs: &[Document],
    train_instances: &[RelationInstance],
    n_max: usize,
) -> Result<Vocabulary, CorpusError> {
    if train_docs.is_empty() {
        return Err(CorpusError::EmptyTraining);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut chars: BTreeSet<char> = BTreeSet::new();
    for d in train_docs {
        for t in tokenize(&d.text()) {
            chars.extend(t.text.chars());
            *counts.entry(t.text.to_lowercase()).or_default() += 1;
        }
    }
    let longest = train_instances.iter().map(|i| i.tokens.len()).max().unwrap_or(1);
    Ok(Vocabulary {
        words: WordIndex::from_counts(counts),
        chars: CharIndex::new(chars),
        seq_len: longest.min(n_max),
    })
}

/// Writes one instance per line: pmid, chem_id, dis_id, i1, i2, label and
/// the space-joined tokens, tab separated.
pub fn dump_instances<W: Write>(mut w: W, instances: &[RelationInstance]) -> std::io::Result<()> {
    for i in instances {
        let label = i.label.map_or_else(|| "-".to_string(), |l| l.to_string());
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            i.pmid,
            i.chem_id,
            i.dis_id,
            i.i1,
            i.i2,
            label,
            i.tokens.join(" ")
        )?;
    }
    Ok(())
}
