//! Finite-difference checks of every differentiable operation and of the
//! composed training loss.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{RelationInstance, Vocabulary};
use crate::encoders::{CharIndex, EncoderDims, WordIndex};
use crate::model::{Hyper, LossObjective, ModelError, ModelParams, Variant};
use crate::rng::Rng;
use crate::tensor::{grad_check, GradCheckReport, Graph, GraphObjective, ParamSet, Tensor, TensorError, Var};

pub const EPS: f64 = 1e-4;
pub const SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

pub fn max_error(entries: &[SuiteEntry]) -> f64 {
    entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max)
}

fn random(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Reduces `v` to a scalar through a fixed random projection so that every
/// output coordinate receives a distinct upstream gradient.
fn project(g: &mut Graph, v: Var) -> Result<Var, TensorError> {
    let w = random(g.shape(v).to_vec(), &mut Rng::new(0x5eed));
    let w = g.input(&w)?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn check<F>(name: &str, params: &ParamSet, f: F) -> Result<SuiteEntry, TensorError>
where
    F: FnMut(&mut Graph) -> Result<Var, TensorError>,
{
    let report = grad_check(params, EPS, &mut GraphObjective(f))?;
    Ok(SuiteEntry {
        name: name.to_string(),
        report,
    })
}

/// One check per operation, inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteEntry>, TensorError> {
    let mut rng = Rng::new(seed);
    let mut ps = ParamSet::new();
    let a = ps.add("a", random(vec![3, 4], &mut rng), true);
    let b = ps.add("b", random(vec![4, 2], &mut rng), true);
    let x = ps.add("x", random(vec![4], &mut rng), false);
    let y = ps.add("y", random(vec![4], &mut rng), false);
    let c = ps.add("c", random(vec![3, 2], &mut rng), false);
    let seq = ps.add("seq", random(vec![7, 3], &mut rng), false);
    let filt = ps.add("filters", random(vec![2, 3, 3], &mut rng), false);
    let bias = ps.add("bias", random(vec![2], &mut rng), false);
    let logits = ps.add("logits", random(vec![3], &mut rng), false);
    let ps = &ps;

    type Case<'a> = (&'a str, Box<dyn FnMut(&mut Graph) -> Result<Var, TensorError>>);
    let cases: Vec<Case> = vec![
        (
            "gather",
            Box::new(move |g: &mut Graph| {
                let t = g.param(a);
                let r = g.gather(t, &[2, 0, 2])?;
                project(g, r)
            }),
        ),
        (
            "matmul",
            Box::new(move |g: &mut Graph| {
                let (p, q) = (g.param(a), g.param(b));
                let r = g.matmul(p, q)?;
                project(g, r)
            }),
        ),
        (
            "matvec",
            Box::new(move |g: &mut Graph| {
                let (p, q) = (g.param(a), g.param(x));
                let r = g.matmul(p, q)?;
                project(g, r)
            }),
        ),
        (
            "add",
            Box::new(move |g: &mut Graph| {
                let (p, q) = (g.param(x), g.param(y));
                let r = g.add(p, q)?;
                project(g, r)
            }),
        ),
        (
            "mul",
            Box::new(move |g: &mut Graph| {
                let (p, q) = (g.param(x), g.param(y));
                let r = g.mul(p, q)?;
                project(g, r)
            }),
        ),
        (
            "scale",
            Box::new(move |g: &mut Graph| {
                let p = g.param(x);
                let r = g.scale(p, -2.5)?;
                project(g, r)
            }),
        ),
        (
            "sum",
            Box::new(move |g: &mut Graph| {
                let p = g.param(a);
                let r = g.sum(p)?;
                g.scale(r, 0.7)
            }),
        ),
        (
            "sum_squares",
            Box::new(move |g: &mut Graph| {
                let p = g.param(a);
                g.sum_squares(p)
            }),
        ),
        (
            "concat",
            Box::new(move |g: &mut Graph| {
                let (p, q) = (g.param(a), g.param(c));
                let r = g.concat(&[p, q])?;
                project(g, r)
            }),
        ),
        (
            "stack",
            Box::new(move |g: &mut Graph| {
                let (p, q) = (g.param(x), g.param(y));
                let r = g.stack(&[p, q, p])?;
                project(g, r)
            }),
        ),
        (
            "slice",
            Box::new(move |g: &mut Graph| {
                let p = g.param(x);
                let r = g.slice(p, 1, 2)?;
                project(g, r)
            }),
        ),
        (
            "reshape",
            Box::new(move |g: &mut Graph| {
                let p = g.param(a);
                let r = g.reshape(p, &[2, 6])?;
                project(g, r)
            }),
        ),
        (
            "relu",
            Box::new(move |g: &mut Graph| {
                let p = g.param(a);
                let r = g.relu(p)?;
                project(g, r)
            }),
        ),
        (
            "tanh",
            Box::new(move |g: &mut Graph| {
                let p = g.param(a);
                let r = g.tanh(p)?;
                project(g, r)
            }),
        ),
        (
            "sigmoid",
            Box::new(move |g: &mut Graph| {
                let p = g.param(a);
                let r = g.sigmoid(p)?;
                project(g, r)
            }),
        ),
        (
            "softmax",
            Box::new(move |g: &mut Graph| {
                let p = g.param(logits);
                let r = g.softmax(p)?;
                project(g, r)
            }),
        ),
        (
            "conv1d_valid",
            Box::new(move |g: &mut Graph| {
                let (s, f, bb) = (g.param(seq), g.param(filt), g.param(bias));
                let r = g.conv1d_valid(s, f, bb)?;
                project(g, r)
            }),
        ),
        (
            "max_over_time",
            Box::new(move |g: &mut Graph| {
                let s = g.param(seq);
                let r = g.max_over_time(s)?;
                project(g, r)
            }),
        ),
        (
            "dropout",
            Box::new(move |g: &mut Graph| {
                let p = g.param(seq);
                let r = g.dropout(p, 0.5, &mut Rng::new(17), true)?;
                project(g, r)
            }),
        ),
        (
            "nll",
            Box::new(move |g: &mut Graph| {
                let p = g.param(logits);
                let s = g.softmax(p)?;
                g.nll(s, 1)
            }),
        ),
        (
            "nll_loss",
            Box::new(move |g: &mut Graph| {
                let p = g.param(logits);
                let s = g.softmax(p)?;
                let w = g.param(a);
                g.nll_loss(s, 2, &[w], 0.001)
            }),
        ),
    ];
    cases.into_iter().map(|(name, f)| check(name, ps, f)).collect()
}

/// Reduced dimensions that keep a full check of the composed loss fast.
pub fn small_dims() -> EncoderDims {
    EncoderDims {
        word: 6,
        position: 3,
        char_embedding: 4,
        char_filters: 5,
        char_window: 3,
        lstm_hidden: 3,
    }
}

fn random_word(rng: &mut Rng) -> String {
    let len = 1 + rng.index(7);
    (0..len).map(|_| (b'a' + rng.index(6) as u8) as char).collect()
}

/// Gradient check of the mean batch loss (with L2) on two random 5-token
/// instances. Parameters are redrawn uniformly from ±0.5 so that no
/// coordinate sits near zero by construction.
pub fn loss_check(variant: Variant, seed: u64) -> Result<SuiteEntry, ModelError> {
    let mut rng = Rng::new(seed);
    let instances: Vec<RelationInstance> = (0..2)
        .map(|k| {
            let tokens: Vec<String> = (0..5).map(|_| random_word(&mut rng)).collect();
            let i1 = rng.index(5);
            let i2 = (i1 + 1 + rng.index(4)) % 5;
            RelationInstance {
                pmid: format!("{k}"),
                spans: vec![(0, 0); 5],
                tokens,
                i1,
                i2,
                chem_id: "C".into(),
                dis_id: "D".into(),
                chem_mention: 0,
                dis_mention: 1,
                label: Some(k % 2),
            }
        })
        .collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut chars = BTreeSet::new();
    for inst in &instances {
        for t in &inst.tokens {
            *counts.entry(t.to_lowercase()).or_default() += 1;
            chars.extend(t.chars());
        }
    }
    let vocab = Vocabulary {
        words: WordIndex::from_counts(counts),
        chars: CharIndex::new(chars),
        seq_len: 5,
    };
    let mut hyper = Hyper::new(5, 4, 0.25);
    hyper.dims = small_dims();
    let mut mp = ModelParams::init(variant, hyper, vocab, None, &mut rng)?;
    for id in mp.params.ids().collect::<Vec<_>>() {
        for v in mp.params.get_mut(id).data_mut() {
            *v = rng.uniform_range(-0.5, 0.5);
        }
    }
    let batch = instances
        .iter()
        .map(|i| mp.model.input.encode(i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut obj = LossObjective {
        model: &mp.model,
        batch: &batch,
    };
    let report = grad_check(&mp.params, EPS, &mut obj)?;
    Ok(SuiteEntry {
        name: format!("loss[{variant}, seed {seed}]"),
        report,
    })
}

/// Every operation and the composed loss of every variant, for each seed.
pub fn full_suite(seeds: &[u64]) -> Result<Vec<SuiteEntry>, ModelError> {
    let mut out = Vec::new();
    for &seed in seeds {
        for mut e in op_suite(seed)? {
            e.name = format!("{}[seed {seed}]", e.name);
            out.push(e);
        }
        for v in Variant::ALL {
            out.push(loss_check(v, seed)?);
        }
    }
    Ok(out)
}
