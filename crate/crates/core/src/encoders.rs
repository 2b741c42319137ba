//! Per-token input representation: word embedding, two relative-position
//! embeddings and an optional character-level word embedding, concatenated
//! into one row per token.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RelationInstance;
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, TensorError, Var};

/// Token used for padding positions, both as a word row and as the
/// character sequence fed to the character encoder.
pub const PAD_TOKEN: &str = "PAD";
pub const UNK_TOKEN: &str = "UNK";
pub const PAD_ROW: usize = 0;
pub const UNK_ROW: usize = 1;
pub const PADCHAR_ROW: usize = 0;
pub const UNKCHAR_ROW: usize = 1;

/// Half-width of the uniform initializer for randomly initialized arrays.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("entity index {index} out of range for {len} tokens")]
    EntityOutOfRange { index: usize, len: usize },
    #[error("instance has {len} tokens, more than the sequence length {seq_len}")]
    TooLong { len: usize, seq_len: usize },
    #[error("relative distance {distance} outside the position table for length {seq_len}")]
    PositionOutOfRange { distance: i64, seq_len: usize },
    #[error("cannot encode an empty word")]
    EmptyWord,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Lowercased word vocabulary with training counts. Rows 0 and 1 are
/// reserved for PAD and UNK and are never returned by a lookup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordIndex {
    words: Vec<String>,
    counts: Vec<usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl WordIndex {
    pub fn from_counts(counts: BTreeMap<String, usize>) -> Self {
        let mut words = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut c = vec![0, 0];
        for (w, n) in counts {
            words.push(w);
            c.push(n);
        }
        Self::from_parts(words, c)
    }

    /// Rebuilds an index from stored rows (reserved entries included).
    pub fn from_parts(words: Vec<String>, counts: Vec<usize>) -> Self {
        let index = words.iter().enumerate().skip(2).map(|(i, w)| (w.clone(), i)).collect();
        Self { words, counts, index }
    }

    pub fn rebuild_index(&mut self) {
        *self = Self::from_parts(std::mem::take(&mut self.words), std::mem::take(&mut self.counts));
    }

    /// Row for `token` (lowercased), or [`UNK_ROW`].
    pub fn row(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK_ROW)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&token.to_lowercase())
    }

    pub fn count(&self, row: usize) -> usize {
        self.counts[row]
    }

    pub fn count_of(&self, word: &str) -> usize {
        self.index.get(&word.to_lowercase()).map_or(0, |&r| self.counts[r])
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

/// Case-preserving character inventory. Rows 0 and 1 are PADCHAR and UNKCHAR.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharIndex {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

impl CharIndex {
    pub fn new(chars: BTreeSet<char>) -> Self {
        Self::from_chars(chars.into_iter().collect())
    }

    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 2)).collect();
        Self { chars, index }
    }

    pub fn rebuild_index(&mut self) {
        *self = Self::from_chars(std::mem::take(&mut self.chars));
    }

    pub fn row(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNKCHAR_ROW)
    }

    pub fn rows(&self, word: &str) -> Vec<usize> {
        word.chars().map(|c| self.row(c)).collect()
    }

    /// Table rows, reserved ones included.
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// d1
    pub word: usize,
    /// d2
    pub position: usize,
    /// d4
    pub char_embedding: usize,
    /// Number of char-CNN filters; also d3 for that variant.
    pub char_filters: usize,
    pub char_window: usize,
    /// Units per LSTM direction; d3 is twice this.
    pub lstm_hidden: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            word: 200,
            position: 50,
            char_embedding: 25,
            char_filters: 50,
            char_window: 5,
            lstm_hidden: 25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CharVariant {
    Cnn,
    BiLstm,
}

/// A parameter-backed embedding table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub name: String,
    pub param: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    fn create(name: &str, rows: usize, dim: usize, params: &mut ParamSet, rng: &mut Rng) -> Self {
        let t = Tensor::uniform(vec![rows, dim], -INIT_SCALE, INIT_SCALE, rng);
        Self {
            name: name.to_string(),
            param: params.add(name, t, false),
            rows,
            dim,
        }
    }
}

/// Gate order inside the `4h` axis: input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmParams {
    /// `[d4, 4h]`
    pub input_weights: ParamId,
    /// `[4h, h]`
    pub recurrent_weights: ParamId,
    /// `[4h]`
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    fn create(prefix: &str, input: usize, hidden: usize, params: &mut ParamSet, rng: &mut Rng) -> Self {
        let w = Tensor::uniform(vec![input, 4 * hidden], -INIT_SCALE, INIT_SCALE, rng);
        let u = Tensor::uniform(vec![4 * hidden, hidden], -INIT_SCALE, INIT_SCALE, rng);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        Self {
            input_weights: params.add(format!("{prefix}.w"), w, true),
            recurrent_weights: params.add(format!("{prefix}.u"), u, true),
            bias: params.add(format!("{prefix}.b"), Tensor::vector(b), false),
            hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CharEncoderParams {
    Cnn {
        /// `[filters, window, d4]`
        filters: ParamId,
        bias: ParamId,
        window: usize,
    },
    BiLstm {
        forward: LstmParams,
        reverse: LstmParams,
    },
}

impl CharEncoderParams {
    pub fn create(variant: CharVariant, dims: &EncoderDims, params: &mut ParamSet, rng: &mut Rng) -> Self {
        match variant {
            CharVariant::Cnn => {
                let w = Tensor::uniform(
                    vec![dims.char_filters, dims.char_window, dims.char_embedding],
                    -INIT_SCALE,
                    INIT_SCALE,
                    rng,
                );
                CharEncoderParams::Cnn {
                    filters: params.add("char_cnn.filters", w, true),
                    bias: params.add("char_cnn.bias", Tensor::zeros(vec![dims.char_filters]), false),
                    window: dims.char_window,
                }
            }
            CharVariant::BiLstm => CharEncoderParams::BiLstm {
                forward: LstmParams::create("char_lstm.fwd", dims.char_embedding, dims.lstm_hidden, params, rng),
                reverse: LstmParams::create("char_lstm.rev", dims.char_embedding, dims.lstm_hidden, params, rng),
            },
        }
    }

    pub fn variant(&self) -> CharVariant {
        match self {
            CharEncoderParams::Cnn { .. } => CharVariant::Cnn,
            CharEncoderParams::BiLstm { .. } => CharVariant::BiLstm,
        }
    }

    /// d3
    pub fn output_dim(&self, params: &ParamSet) -> usize {
        match self {
            CharEncoderParams::Cnn { filters, .. } => params.get(*filters).shape()[0],
            CharEncoderParams::BiLstm { forward, reverse } => forward.hidden + reverse.hidden,
        }
    }

    /// Encodes one word given its character rows.
    pub fn encode(&self, g: &mut Graph, table: &EmbeddingTable, char_rows: &[usize]) -> Result<Var, EncodeError> {
        match self {
            CharEncoderParams::Cnn { filters, bias, window } => {
                char_cnn_encode(g, table, *filters, *bias, *window, char_rows)
            }
            CharEncoderParams::BiLstm { forward, reverse } => char_bilstm_encode(g, table, forward, reverse, char_rows),
        }
    }
}

/// Word embedding lookup (lowercased; unknown words use the UNK row).
pub fn embed_word(g: &mut Graph, table: &EmbeddingTable, index: &WordIndex, token: &str) -> Result<Var, EncodeError> {
    let t = g.param(table.param);
    let row = g.gather(t, &[index.row(token)])?;
    Ok(g.reshape(row, &[table.dim])?)
}

/// Row of a position table with `2n-1` rows covering distances `-(n-1)..=(n-1)`.
pub fn position_row(distance: i64, seq_len: usize) -> Result<usize, EncodeError> {
    let n = seq_len as i64;
    if distance.abs() >= n {
        return Err(EncodeError::PositionOutOfRange { distance, seq_len });
    }
    Ok((distance + n - 1) as usize)
}

pub fn embed_position(
    g: &mut Graph,
    table: &EmbeddingTable,
    distance: i64,
    seq_len: usize,
) -> Result<Var, EncodeError> {
    let row = position_row(distance, seq_len)?;
    let t = g.param(table.param);
    let v = g.gather(t, &[row])?;
    Ok(g.reshape(v, &[table.dim])?)
}

/// Convolution over the character matrix followed by ReLU and max-over-time.
/// Words shorter than the window are right-padded with PADCHAR.
pub fn char_cnn_encode(
    g: &mut Graph,
    table: &EmbeddingTable,
    filters: ParamId,
    bias: ParamId,
    window: usize,
    char_rows: &[usize],
) -> Result<Var, EncodeError> {
    if char_rows.is_empty() {
        return Err(EncodeError::EmptyWord);
    }
    let mut rows = char_rows.to_vec();
    rows.resize(rows.len().max(window), PADCHAR_ROW);
    let t = g.param(table.param);
    let x = g.gather(t, &rows)?;
    let (w, b) = (g.param(filters), g.param(bias));
    let conv = g.conv1d_valid(x, w, b)?;
    let act = g.relu(conv)?;
    Ok(g.max_over_time(act)?)
}

fn lstm_run(g: &mut Graph, p: &LstmParams, xw: Var, order: impl Iterator<Item = usize>) -> Result<Var, EncodeError> {
    let h = p.hidden;
    let four = 4 * h;
    let u = g.param(p.recurrent_weights);
    let b = g.param(p.bias);
    let mut state: Option<(Var, Var)> = None;
    for t in order {
        let row = g.gather(xw, &[t])?;
        let mut pre = g.reshape(row, &[four])?;
        if let Some((h_prev, _)) = state {
            let rec = g.matmul(u, h_prev)?;
            pre = g.add(pre, rec)?;
        }
        pre = g.add(pre, b)?;
        let i = g.slice(pre, 0, h)?;
        let i = g.sigmoid(i)?;
        let f = g.slice(pre, h, h)?;
        let f = g.sigmoid(f)?;
        let cand = g.slice(pre, 2 * h, h)?;
        let cand = g.tanh(cand)?;
        let o = g.slice(pre, 3 * h, h)?;
        let o = g.sigmoid(o)?;
        let mut c = g.mul(i, cand)?;
        if let Some((_, c_prev)) = state {
            let keep = g.mul(f, c_prev)?;
            c = g.add(keep, c)?;
        }
        let ct = g.tanh(c)?;
        let h_new = g.mul(o, ct)?;
        state = Some((h_new, c));
    }
    Ok(state.expect("non-empty sequence").0)
}

/// Final hidden state of a forward LSTM over the characters concatenated
/// with that of a reverse LSTM over the reversed characters.
pub fn char_bilstm_encode(
    g: &mut Graph,
    table: &EmbeddingTable,
    forward: &LstmParams,
    reverse: &LstmParams,
    char_rows: &[usize],
) -> Result<Var, EncodeError> {
    if char_rows.is_empty() {
        return Err(EncodeError::EmptyWord);
    }
    let l = char_rows.len();
    let t = g.param(table.param);
    let x = g.gather(t, char_rows)?;
    let wf = g.param(forward.input_weights);
    let xf = g.matmul(x, wf)?;
    let hf = lstm_run(g, forward, xf, 0..l)?;
    let wr = g.param(reverse.input_weights);
    let xr = g.matmul(x, wr)?;
    let hr = lstm_run(g, reverse, xr, (0..l).rev())?;
    Ok(g.concat(&[hf, hr])?)
}

/// An instance mapped to table rows, padded to the sequence length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInstance {
    pub word_rows: Vec<usize>,
    pub pos1_rows: Vec<usize>,
    pub pos2_rows: Vec<usize>,
    /// Character rows of each distinct (case-preserved) word.
    pub char_words: Vec<Vec<usize>>,
    /// For every position, the index into `char_words`.
    pub char_slots: Vec<usize>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharComponent {
    pub table: EmbeddingTable,
    pub encoder: CharEncoderParams,
}

/// Vocabulary plus the tables that turn an instance into its `n x d` matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputLayer {
    pub words: WordIndex,
    pub chars: CharIndex,
    pub seq_len: usize,
    pub word_table: EmbeddingTable,
    pub pos1_table: EmbeddingTable,
    pub pos2_table: EmbeddingTable,
    pub char: Option<CharComponent>,
}

impl InputLayer {
    /// Creates and registers all tables. Word rows found in `pretrained`
    /// take those vectors; everything else is uniform in `±INIT_SCALE`.
    #[allow(clippy::too_many_arguments)]
    pub fn create(
        words: WordIndex,
        chars: CharIndex,
        seq_len: usize,
        dims: &EncoderDims,
        variant: Option<CharVariant>,
        pretrained: Option<&PretrainedVectors>,
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Result<Self, EmbeddingError> {
        let mut word_table = EmbeddingTable::create("emb.word", words.len(), dims.word, params, rng);
        if let Some(pre) = pretrained {
            if pre.dim != dims.word {
                return Err(EmbeddingError::DimMismatch {
                    expected: dims.word,
                    found: pre.dim,
                });
            }
            let t = params.get_mut(word_table.param);
            let mut hits = 0;
            for (row, w) in words.words().iter().enumerate().skip(2) {
                if let Some(v) = pre.get(w) {
                    t.row_mut(row).copy_from_slice(v);
                    hits += 1;
                }
            }
            log::info!("pre-trained vectors cover {hits} of {} words", words.len() - 2);
        }
        word_table.rows = words.len();
        let pos_rows = 2 * seq_len - 1;
        let pos1_table = EmbeddingTable::create("emb.pos1", pos_rows, dims.position, params, rng);
        let pos2_table = EmbeddingTable::create("emb.pos2", pos_rows, dims.position, params, rng);
        let char = variant.map(|v| {
            let table = EmbeddingTable::create("emb.char", chars.len(), dims.char_embedding, params, rng);
            let encoder = CharEncoderParams::create(v, dims, params, rng);
            CharComponent { table, encoder }
        });
        Ok(Self {
            words,
            chars,
            seq_len,
            word_table,
            pos1_table,
            pos2_table,
            char,
        })
    }

    /// Row width `d = d1 + 2·d2 (+ d3)`.
    pub fn width(&self, params: &ParamSet) -> usize {
        self.word_table.dim
            + self.pos1_table.dim
            + self.pos2_table.dim
            + self.char.as_ref().map_or(0, |c| c.encoder.output_dim(params))
    }

    /// Pads `instance` to the sequence length and maps it to table rows.
    pub fn encode(&self, instance: &RelationInstance) -> Result<EncodedInstance, EncodeError> {
        let n = self.seq_len;
        let len = instance.tokens.len();
        if len > n {
            return Err(EncodeError::TooLong { len, seq_len: n });
        }
        for idx in [instance.i1, instance.i2] {
            if idx >= len {
                return Err(EncodeError::EntityOutOfRange { index: idx, len });
            }
        }
        let token = |i: usize| instance.tokens.get(i).map_or(PAD_TOKEN, String::as_str);
        let mut word_rows = Vec::with_capacity(n);
        let mut pos1_rows = Vec::with_capacity(n);
        let mut pos2_rows = Vec::with_capacity(n);
        for i in 0..n {
            word_rows.push(if i < len { self.words.row(token(i)) } else { PAD_ROW });
            pos1_rows.push(position_row(i as i64 - instance.i1 as i64, n)?);
            pos2_rows.push(position_row(i as i64 - instance.i2 as i64, n)?);
        }
        let (mut char_words, mut char_slots) = (Vec::new(), Vec::new());
        if self.char.is_some() {
            let mut seen: HashMap<&str, usize> = HashMap::new();
            for i in 0..n {
                let w = token(i);
                if w.is_empty() {
                    return Err(EncodeError::EmptyWord);
                }
                let slot = *seen.entry(w).or_insert_with(|| {
                    char_words.push(self.chars.rows(w));
                    char_words.len() - 1
                });
                char_slots.push(slot);
            }
        }
        Ok(EncodedInstance {
            word_rows,
            pos1_rows,
            pos2_rows,
            char_words,
            char_slots,
            label: instance.label,
        })
    }

    /// Records the `n x d` input matrix of `enc` on the graph.
    pub fn build(&self, g: &mut Graph, enc: &EncodedInstance) -> Result<Var, EncodeError> {
        self.build_with_words(g, enc, &enc.word_rows)
    }

    /// As [`InputLayer::build`] but with substitute word rows (UNK replacement
    /// only touches the word part).
    pub fn build_with_words(
        &self,
        g: &mut Graph,
        enc: &EncodedInstance,
        word_rows: &[usize],
    ) -> Result<Var, EncodeError> {
        let wt = g.param(self.word_table.param);
        let words = g.gather(wt, word_rows)?;
        let p1 = g.param(self.pos1_table.param);
        let pos1 = g.gather(p1, &enc.pos1_rows)?;
        let p2 = g.param(self.pos2_table.param);
        let pos2 = g.gather(p2, &enc.pos2_rows)?;
        let mut parts = vec![words, pos1, pos2];
        if let Some(c) = &self.char {
            let mut vecs = Vec::with_capacity(enc.char_words.len());
            for rows in &enc.char_words {
                vecs.push(c.encoder.encode(g, &c.table, rows)?);
            }
            let stacked = g.stack(&vecs)?;
            parts.push(g.gather(stacked, &enc.char_slots)?);
        }
        let m = g.concat(&parts)?;
        let d = self.width(g.params());
        debug_assert_eq!(g.shape(m), &[self.seq_len, d]);
        if g.shape(m) != [self.seq_len, d] {
            return Err(TensorError::Shape {
                op: "build_input_matrix",
                detail: format!("{:?}, expected [{}, {d}]", g.shape(m), self.seq_len),
            }
            .into());
        }
        Ok(m)
    }
}

/// Probability `0.25 / (0.25 + n_w)` of replacing a training token by UNK.
pub fn unk_probability(count: usize) -> f64 {
    0.25 / (0.25 + count as f64)
}

/// Replaces each word row by [`UNK_ROW`] with [`unk_probability`] of its
/// training count. Reserved rows are left alone.
pub fn unk_replace(word_rows: &[usize], index: &WordIndex, rng: &mut Rng) -> Vec<usize> {
    word_rows
        .iter()
        .map(|&r| {
            if r == PAD_ROW || r == UNK_ROW {
                return r;
            }
            if rng.bernoulli(unk_probability(index.count(r))) {
                UNK_ROW
            } else {
                r
            }
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("pre-trained vectors have dimension {found}, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("no vectors found")]
    Empty,
}

/// Word vectors read from the plain text format, keys lowercased (first
/// occurrence wins).
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedVectors {
    pub dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl PretrainedVectors {
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Reads `word v1 v2 ... vd` lines. A first line made of exactly two
/// integers is taken as a `ROWS DIM` header.
pub fn load_pretrained<R: BufRead>(reader: R) -> Result<PretrainedVectors, EmbeddingError> {
    let mut dim: Option<usize> = None;
    let mut vectors = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if idx == 0 && fields.len() == 2 {
            if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                dim = Some(d);
                continue;
            }
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| EmbeddingError::Parse {
                line: idx + 1,
                detail: e.to_string(),
            })?;
        let expected = *dim.get_or_insert(values.len());
        if values.len() != expected || expected == 0 {
            return Err(EmbeddingError::Parse {
                line: idx + 1,
                detail: format!("{} values, expected {expected}", values.len()),
            });
        }
        vectors.entry(fields[0].to_lowercase()).or_insert(values);
    }
    match dim {
        Some(dim) if !vectors.is_empty() => Ok(PretrainedVectors { dim, vectors }),
        _ => Err(EmbeddingError::Empty),
    }
}
