//! The relation classifier.
//!
//! Input matrix → valid convolution → ReLU → max-over-time → dropout →
//! fully connected layer → softmax over `[no-relation, CID]`.

use std::borrow::Borrow;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::encoders::{
    CharEncoderParams, CharIndex, CharVariant, EmbeddingError, EncodeError, EncodedInstance, EncoderDims, InputLayer,
    PretrainedVectors, WordIndex, INIT_SCALE,
};
use crate::rng::Rng;
use crate::tensor::{Gradients, Graph, Objective, ParamId, ParamSet, Tensor, TensorError, Var};

/// Class order used for labels, outputs and serialization.
pub const CLASS_ORDER: [&str; 2] = ["no-relation", "CID"];
pub const NO_RELATION: usize = 0;
pub const CID: usize = 1;

pub const MAGIC: &[u8; 8] = b"CDREXM1\0";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a model file")]
    BadMagic,
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("tensor {name}: stored shape {found:?} does not match hyperparameters ({expected:?})")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("instance has no gold label")]
    MissingLabel,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ModelError {
    /// Distinct numeric code per failure class of model files.
    pub fn code(&self) -> u8 {
        match self {
            ModelError::Io(_) => 10,
            ModelError::BadMagic => 11,
            ModelError::TruncatedPayload => 12,
            ModelError::Metadata(_) => 13,
            ModelError::ShapeMismatch { .. } => 14,
            _ => 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "cnn")]
    Cnn,
    #[serde(rename = "cnn+cnnchar")]
    CnnCharCnn,
    #[serde(rename = "cnn+lstmchar")]
    CnnCharLstm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cnn, Variant::CnnCharCnn, Variant::CnnCharLstm];

    pub fn char_variant(self) -> Option<CharVariant> {
        match self {
            Variant::Cnn => None,
            Variant::CnnCharCnn => Some(CharVariant::Cnn),
            Variant::CnnCharLstm => Some(CharVariant::BiLstm),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cnn => "cnn",
            Variant::CnnCharCnn => "cnn+cnnchar",
            Variant::CnnCharLstm => "cnn+lstmchar",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown variant {s:?} (expected cnn, cnn+cnnchar or cnn+lstmchar)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Fixed sequence length n.
    pub seq_len: usize,
    /// Convolution window k.
    pub window: usize,
    /// Number of filters m.
    pub filters: usize,
    /// Dropout probability ρ.
    pub dropout: f64,
    pub l2: f64,
    pub classes: usize,
    pub dims: EncoderDims,
}

impl Hyper {
    pub fn new(seq_len: usize, filters: usize, dropout: f64) -> Self {
        Self {
            seq_len,
            window: 5,
            filters,
            dropout,
            l2: 0.001,
            classes: CLASS_ORDER.len(),
            dims: EncoderDims::default(),
        }
    }
}

/// Architecture and parameter handles; the arrays live in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub hyper: Hyper,
    pub input: InputLayer,
    pub conv_filters: ParamId,
    pub conv_bias: ParamId,
    pub out_weights: ParamId,
    pub out_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub instance: usize,
    pub probabilities: Vec<f64>,
    pub label: usize,
}

/// Outputs of one forward pass recorded on a graph.
pub struct Forward {
    pub features: Var,
    pub probabilities: Var,
}

impl Model {
    /// Forward pass. `word_rows` overrides the instance's word rows (used for
    /// UNK replacement during training).
    pub fn forward(
        &self,
        g: &mut Graph,
        enc: &EncodedInstance,
        word_rows: Option<&[usize]>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Forward, ModelError> {
        let x = self
            .input
            .build_with_words(g, enc, word_rows.unwrap_or(&enc.word_rows))?;
        let (w, b) = (g.param(self.conv_filters), g.param(self.conv_bias));
        let conv = g.conv1d_valid(x, w, b)?;
        let act = g.relu(conv)?;
        let features = g.max_over_time(act)?;
        let dropped = g.dropout(features, self.hyper.dropout, rng, training)?;
        let (w1, b1) = (g.param(self.out_weights), g.param(self.out_bias));
        let logits = g.matmul(w1, dropped)?;
        let logits = g.add(logits, b1)?;
        let probabilities = g.softmax(logits)?;
        Ok(Forward {
            features,
            probabilities,
        })
    }

    /// Inference-mode prediction; a pure function of the instance and parameters.
    pub fn predict(&self, params: &ParamSet, enc: &EncodedInstance, id: usize) -> Result<Prediction, ModelError> {
        let mut g = Graph::new(params);
        let mut rng = Rng::new(0);
        let out = self.forward(&mut g, enc, None, &mut rng, false)?;
        let probabilities = g.value(out.probabilities).to_vec();
        Ok(Prediction {
            instance: id,
            label: argmax(&probabilities),
            probabilities,
        })
    }

    /// Predictions for many instances, evaluated in parallel, returned in input order.
    pub fn predict_all(&self, params: &ParamSet, encs: &[EncodedInstance]) -> Result<Vec<Prediction>, ModelError> {
        encs.par_iter()
            .enumerate()
            .map(|(i, e)| self.predict(params, e, i))
            .collect()
    }

    /// Mean negative log-likelihood over `batch` plus `l2·Σ||W||²` (added once).
    /// When `grads` is given, the gradient of that quantity is accumulated into
    /// it, instance by instance in batch order.
    pub fn batch_loss<B: Borrow<EncodedInstance>>(
        &self,
        params: &ParamSet,
        batch: &[B],
        word_rows: Option<&[Vec<usize>]>,
        rng: &mut Rng,
        training: bool,
        mut grads: Option<&mut Gradients>,
    ) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (i, enc) in batch.iter().enumerate() {
            let enc = enc.borrow();
            let gold = enc.label.ok_or(ModelError::MissingLabel)?;
            let mut g = Graph::new(params);
            let words = word_rows.map(|w| w[i].as_slice());
            let out = self.forward(&mut g, enc, words, rng, training)?;
            let nll = g.nll(out.probabilities, gold)?;
            total += g.scalar(nll);
            if let Some(gr) = grads.as_deref_mut() {
                g.backward(nll, scale, gr)?;
            }
        }
        if let Some(gr) = grads {
            gr.add_l2(params, self.hyper.l2);
        }
        Ok(total * scale + self.hyper.l2 * params.l2_norm_sq())
    }

    /// Number of scalar parameters implied by the hyperparameters and vocabulary.
    pub fn expected_param_count(&self) -> usize {
        let h = &self.hyper;
        let dims = &h.dims;
        let v = self.input.words.len();
        let n = h.seq_len;
        let mut count = v * dims.word + 2 * (2 * n - 1) * dims.position;
        let d3 = match self.variant.char_variant() {
            None => 0,
            Some(CharVariant::Cnn) => {
                count += self.input.chars.len() * dims.char_embedding
                    + dims.char_filters * dims.char_window * dims.char_embedding
                    + dims.char_filters;
                dims.char_filters
            }
            Some(CharVariant::BiLstm) => {
                let four = 4 * dims.lstm_hidden;
                count += self.input.chars.len() * dims.char_embedding
                    + 2 * (dims.char_embedding * four + four * dims.lstm_hidden + four);
                2 * dims.lstm_hidden
            }
        };
        let d = dims.word + 2 * dims.position + d3;
        count + h.filters * h.window * d + h.filters + h.classes * h.filters + h.classes
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Architecture plus parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub model: Model,
    pub params: ParamSet,
}

impl ModelParams {
    /// Fresh parameters for `variant`. The sequence length is raised to the
    /// convolution window when the vocabulary's is shorter.
    pub fn init(
        variant: Variant,
        mut hyper: Hyper,
        vocab: Vocabulary,
        pretrained: Option<&PretrainedVectors>,
        rng: &mut Rng,
    ) -> Result<Self, ModelError> {
        hyper.seq_len = vocab.seq_len.max(hyper.window).max(hyper.seq_len);
        Self::build(variant, hyper, vocab.words, vocab.chars, pretrained, rng)
    }

    fn build(
        variant: Variant,
        hyper: Hyper,
        words: WordIndex,
        chars: CharIndex,
        pretrained: Option<&PretrainedVectors>,
        rng: &mut Rng,
    ) -> Result<Self, ModelError> {
        if !(0.0..1.0).contains(&hyper.dropout) || hyper.filters == 0 || hyper.window == 0 {
            return Err(ModelError::Metadata(format!("invalid hyperparameters {hyper:?}")));
        }
        let mut params = ParamSet::new();
        let input = InputLayer::create(
            words,
            chars,
            hyper.seq_len,
            &hyper.dims,
            variant.char_variant(),
            pretrained,
            &mut params,
            rng,
        )?;
        let d = input.width(&params);
        let conv_filters = params.add(
            "conv.filters",
            Tensor::uniform(vec![hyper.filters, hyper.window, d], -INIT_SCALE, INIT_SCALE, rng),
            true,
        );
        let conv_bias = params.add("conv.bias", Tensor::zeros(vec![hyper.filters]), false);
        let out_weights = params.add(
            "out.weights",
            Tensor::uniform(vec![hyper.classes, hyper.filters], -INIT_SCALE, INIT_SCALE, rng),
            true,
        );
        let out_bias = params.add("out.bias", Tensor::zeros(vec![hyper.classes]), false);
        Ok(Self {
            model: Model {
                variant,
                hyper,
                input,
                conv_filters,
                conv_bias,
                out_weights,
                out_bias,
            },
            params,
        })
    }

    pub fn variant(&self) -> Variant {
        self.model.variant
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn char_encoder(&self) -> Option<&CharEncoderParams> {
        self.model.input.char.as_ref().map(|c| &c.encoder)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Magic, length-prefixed JSON metadata, then every tensor as
    /// name, rank, dims and payload (all integers u64 LE, reals f64 LE).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        let meta = Metadata {
            format: 1,
            variant: self.model.variant,
            hyper: self.model.hyper,
            class_order: CLASS_ORDER.iter().map(|s| s.to_string()).collect(),
            words: self.model.input.words.words().to_vec(),
            word_counts: self.model.input.words.counts().to_vec(),
            chars: self.model.input.chars.chars().iter().map(|c| c.to_string()).collect(),
            tensors: self.params.ids().map(|id| self.params.name(id).to_string()).collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| ModelError::Metadata(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for id in self.params.ids() {
            let name = self.params.name(id).as_bytes();
            let t = self.params.get(id);
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        r.pos = MAGIC.len();
        let meta_len = r.u64()? as usize;
        let meta: Metadata =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| ModelError::Metadata(e.to_string()))?;
        if meta.class_order != CLASS_ORDER {
            return Err(ModelError::Metadata(format!(
                "unsupported class order {:?}",
                meta.class_order
            )));
        }
        if meta.words.len() != meta.word_counts.len() || meta.words.len() < 2 {
            return Err(ModelError::Metadata("inconsistent vocabulary".into()));
        }
        let chars = meta
            .chars
            .iter()
            .map(|s| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(ModelError::Metadata(format!("bad character entry {s:?}"))),
                }
            })
            .collect::<Result<Vec<char>, _>>()?;
        let words = WordIndex::from_parts(meta.words, meta.word_counts);
        let mut mp = Self::build(
            meta.variant,
            meta.hyper,
            words,
            CharIndex::from_chars(chars),
            None,
            &mut Rng::new(0),
        )?;
        if meta.tensors.len() != mp.params.len() {
            return Err(ModelError::Metadata(format!(
                "{} tensors listed, architecture has {}",
                meta.tensors.len(),
                mp.params.len()
            )));
        }
        for listed in &meta.tensors {
            let name_len = r.u64()? as usize;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| ModelError::Metadata(e.to_string()))?;
            if &name != listed {
                return Err(ModelError::Metadata(format!(
                    "tensor {name} where {listed} was expected"
                )));
            }
            let rank = r.u64()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let id = mp
                .params
                .find(&name)
                .ok_or_else(|| ModelError::Metadata(format!("unknown tensor {name}")))?;
            let expected = mp.params.get(id).shape().to_vec();
            if shape != expected {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected,
                    found: shape,
                });
            }
            let len: usize = shape.iter().product();
            let payload = r.take(len.checked_mul(8).ok_or(ModelError::TruncatedPayload)?)?;
            for (dst, chunk) in mp.params.get_mut(id).data_mut().iter_mut().zip(payload.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Metadata(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(mp)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    format: u32,
    variant: Variant,
    hyper: Hyper,
    class_order: Vec<String>,
    words: Vec<String>,
    word_counts: Vec<usize>,
    chars: Vec<String>,
    tensors: Vec<String>,
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).ok_or(ModelError::TruncatedPayload)?;
        let s = self.bytes.get(self.pos..end).ok_or(ModelError::TruncatedPayload)?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Inference-mode batch loss as an [`Objective`] over the model's parameters.
pub struct LossObjective<'a> {
    pub model: &'a Model,
    pub batch: &'a [EncodedInstance],
}

impl Objective for LossObjective<'_> {
    fn value(&mut self, params: &ParamSet) -> Result<f64, TensorError> {
        self.model
            .batch_loss(params, self.batch, None, &mut Rng::new(0), false, None)
            .map_err(into_tensor_error)
    }

    fn value_and_grad(&mut self, params: &ParamSet) -> Result<(f64, Gradients), TensorError> {
        let mut grads = Gradients::new(params);
        let v = self
            .model
            .batch_loss(params, self.batch, None, &mut Rng::new(0), false, Some(&mut grads))
            .map_err(into_tensor_error)?;
        Ok((v, grads))
    }
}

fn into_tensor_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) | ModelError::Encode(EncodeError::Tensor(t)) => t,
        other => TensorError::Invalid {
            op: "loss",
            detail: other.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RelationInstance;
    use std::collections::{BTreeMap, BTreeSet};

    pub(crate) fn tiny_vocab() -> Vocabulary {
        let counts = BTreeMap::from([
            ("aspirin".to_string(), 2),
            ("causes".to_string(), 1),
            ("fever".to_string(), 3),
            ("no".to_string(), 1),
        ]);
        Vocabulary {
            words: WordIndex::from_counts(counts),
            chars: CharIndex::new("aspirincausefevrno".chars().collect::<BTreeSet<_>>()),
            seq_len: 6,
        }
    }

    fn small_hyper() -> Hyper {
        let mut h = Hyper::new(6, 4, 0.25);
        h.dims = EncoderDims {
            word: 6,
            position: 3,
            char_embedding: 4,
            char_filters: 5,
            char_window: 3,
            lstm_hidden: 3,
        };
        h
    }

    fn instance(label: usize) -> RelationInstance {
        let tokens = ["Aspirin", "causes", "fever", "."];
        RelationInstance {
            pmid: "1".into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            spans: vec![(0, 0); 4],
            i1: 0,
            i2: 2,
            chem_id: "C".into(),
            dis_id: "D".into(),
            chem_mention: 0,
            dis_mention: 1,
            label: Some(label),
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("lstm".parse::<Variant>().is_err());
    }

    #[test]
    fn forward_is_deterministic_in_inference() {
        for v in Variant::ALL {
            let mp = ModelParams::init(v, small_hyper(), tiny_vocab(), None, &mut Rng::new(1)).unwrap();
            let enc = mp.model.input.encode(&instance(1)).unwrap();
            let a = mp.model.predict(&mp.params, &enc, 0).unwrap();
            let b = mp.model.predict(&mp.params, &enc, 0).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.probabilities.len(), 2);
            assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut g = Graph::new(&mp.params);
            let out = mp.model.forward(&mut g, &enc, None, &mut Rng::new(0), true).unwrap();
            assert_eq!(g.shape(out.features), &[4]);
        }
    }

    #[test]
    fn zero_output_layer_gives_uniform() {
        let mut mp =
            ModelParams::init(Variant::CnnCharCnn, small_hyper(), tiny_vocab(), None, &mut Rng::new(2)).unwrap();
        mp.params.get_mut(mp.model.out_weights).data_mut().fill(0.0);
        let enc = mp.model.input.encode(&instance(0)).unwrap();
        let p = mp.model.predict(&mp.params, &enc, 0).unwrap();
        assert_eq!(p.probabilities, [0.5, 0.5]);
        let loss = mp
            .model
            .batch_loss(&mp.params, &[enc.clone(), enc], None, &mut Rng::new(0), false, None)
            .unwrap();
        let l2 = mp.model.hyper.l2 * mp.params.l2_norm_sq();
        assert!((loss - l2 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_errors() {
        let mp = ModelParams::init(Variant::Cnn, small_hyper(), tiny_vocab(), None, &mut Rng::new(2)).unwrap();
        assert!(matches!(
            mp.model
                .batch_loss::<EncodedInstance>(&mp.params, &[], None, &mut Rng::new(0), false, None),
            Err(ModelError::EmptyBatch)
        ));
        let mut enc = mp.model.input.encode(&instance(0)).unwrap();
        enc.label = None;
        assert!(matches!(
            mp.model
                .batch_loss(&mp.params, &[enc], None, &mut Rng::new(0), false, None),
            Err(ModelError::MissingLabel)
        ));
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        let mut counts = Vec::new();
        for v in Variant::ALL {
            let mp = ModelParams::init(v, Hyper::new(6, 100, 0.5), tiny_vocab(), None, &mut Rng::new(3)).unwrap();
            assert_eq!(mp.param_count(), mp.model.expected_param_count(), "{v}");
            counts.push(mp.param_count());
        }
        assert!(counts[0] < counts[1] && counts[0] < counts[2]);
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let mp = ModelParams::init(
            Variant::CnnCharLstm,
            small_hyper(),
            tiny_vocab(),
            None,
            &mut Rng::new(4),
        )
        .unwrap();
        let bytes = mp.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = ModelParams::from_bytes(&bytes).unwrap();
        for id in mp.params.ids() {
            let (a, b) = (mp.params.get(id).data(), back.params.get(id).data());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.model, mp.model);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        assert!(matches!(
            ModelParams::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ModelError::TruncatedPayload)
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelParams::from_bytes(&bad), Err(ModelError::BadMagic)));
        assert_ne!(ModelError::BadMagic.code(), ModelError::TruncatedPayload.code());
    }

    #[test]
    fn shape_mismatch_detected() {
        let mp = ModelParams::init(Variant::Cnn, small_hyper(), tiny_vocab(), None, &mut Rng::new(4)).unwrap();
        let mut other = mp.clone();
        other.model.hyper.filters = 3;
        // metadata claims 3 filters while the payload has 4
        let mut buf = Vec::new();
        other.write_to(&mut buf).unwrap();
        assert!(matches!(
            ModelParams::from_bytes(&buf),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn certain_correct_prediction_has_zero_loss() {
        let mut h = small_hyper();
        h.l2 = 0.0;
        let mut mp = ModelParams::init(Variant::Cnn, h, tiny_vocab(), None, &mut Rng::new(5)).unwrap();
        mp.params.get_mut(mp.model.out_weights).data_mut().fill(0.0);
        mp.params
            .get_mut(mp.model.out_bias)
            .data_mut()
            .copy_from_slice(&[-1000.0, 1000.0]);
        let enc = mp.model.input.encode(&instance(1)).unwrap();
        let loss = mp
            .model
            .batch_loss(&mp.params, &[enc], None, &mut Rng::new(0), false, None)
            .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn batch_loss_gradient_checks() {
        for v in Variant::ALL {
            let mut mp = ModelParams::init(v, small_hyper(), tiny_vocab(), None, &mut Rng::new(6)).unwrap();
            let mut rng = Rng::new(7);
            for id in mp.params.ids().collect::<Vec<_>>() {
                for x in mp.params.get_mut(id).data_mut() {
                    *x = rng.uniform_range(-0.5, 0.5);
                }
            }
            let a = mp.model.input.encode(&instance(1)).unwrap();
            let mut other = instance(0);
            other.tokens[1] = "no".into();
            let b = mp.model.input.encode(&other).unwrap();
            let batch = [a, b];
            let mut obj = LossObjective {
                model: &mp.model,
                batch: &batch,
            };
            let report = crate::tensor::grad_check(&mp.params, 1e-4, &mut obj).unwrap();
            assert!(report.max_rel_error < 1e-4, "{v}: {report:?}");
            assert_eq!(report.coordinates, mp.param_count());
        }
    }

    proptest::proptest! {
        #[test]
        fn argmax_is_softmax_invariant(v in proptest::collection::vec(-50.0f64..50.0, 2..8)) {
            proptest::prop_assert_eq!(argmax(&crate::tensor::softmax(&v)), argmax(&v));
        }
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.8]), 1);
    }
}
