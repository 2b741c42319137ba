//! Constructed corpora for tests and smoke runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::corpus::{Document, EntityKind, Mention};
use crate::rng::Rng;

const CHEMICALS: [&str; 6] = ["aspirin", "cocaine", "lithium", "heparin", "ketamine", "cisplatin"];
const DISEASES: [&str; 6] = ["fever", "nausea", "seizure", "anemia", "hepatitis", "delirium"];

/// `n` single-sentence documents. Even-numbered documents read
/// "X induced Y ..." and carry the gold CID pair; odd ones read
/// "X alleviated Y ..." and carry none. Entity names are drawn at random,
/// so only the verb separates the classes.
pub fn two_pattern_corpus(n: usize, seed: u64) -> Vec<Document> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let c = rng.index(CHEMICALS.len());
            let d = rng.index(DISEASES.len());
            let positive = i % 2 == 0;
            let verb = if positive { "induced" } else { "alleviated" };
            document(
                &format!("{}", 1000 + i),
                &format!("Case {i}"),
                CHEMICALS[c],
                verb,
                DISEASES[d],
                c,
                d,
                positive,
            )
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn document(
    pmid: &str,
    title: &str,
    chem: &str,
    verb: &str,
    dis: &str,
    c: usize,
    d: usize,
    positive: bool,
) -> Document {
    let abstract_text = format!("{chem} {verb} {dis} in patients .");
    let base = title.chars().count() + 1;
    let chem_id = format!("C{c:03}");
    let dis_id = format!("D{d:03}");
    let dis_start = base + chem.len() + 1 + verb.len() + 1;
    let mentions = vec![
        Mention {
            start: base,
            end: base + chem.len(),
            text: chem.to_string(),
            kind: EntityKind::Chemical,
            mesh_id: chem_id.clone(),
        },
        Mention {
            start: dis_start,
            end: dis_start + dis.len(),
            text: dis.to_string(),
            kind: EntityKind::Disease,
            mesh_id: dis_id.clone(),
        },
    ];
    let gold_cid = if positive {
        BTreeSet::from([(chem_id, dis_id)])
    } else {
        BTreeSet::new()
    };
    Document {
        pmid: pmid.to_string(),
        title: title.to_string(),
        abstract_text,
        mentions,
        gold_cid,
    }
}

/// Serializes documents in PubTator format.
pub fn to_pubtator(docs: &[Document], with_relations: bool) -> String {
    let mut out = String::new();
    for doc in docs {
        let _ = writeln!(out, "{}|t|{}", doc.pmid, doc.title);
        let _ = writeln!(out, "{}|a|{}", doc.pmid, doc.abstract_text);
        for m in &doc.mentions {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                doc.pmid, m.start, m.end, m.text, m.kind, m.mesh_id
            );
        }
        if with_relations {
            for (c, d) in &doc.gold_cid {
                let _ = writeln!(out, "{}\tCID\t{c}\t{d}", doc.pmid);
            }
        }
        out.push('\n');
    }
    out
}
