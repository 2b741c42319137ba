//! Document-level CID scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{build_instances, CidPair, CorpusError, Document, RelationInstance};
use crate::encoders::EncodeError;
use crate::model::{ModelError, ModelParams, Prediction, CID};
use crate::rng::Rng;

/// Predicted or gold CID pairs keyed by PMID.
pub type DocPairs = BTreeMap<String, BTreeSet<CidPair>>;

pub const MIN_BOOTSTRAP_ITERATIONS: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("PMID {pmid}: prediction for unknown instance {instance}")]
    UnknownInstance { pmid: String, instance: usize },
    #[error("PMID {pmid}: no prediction for instance {instance}")]
    MissingPrediction { pmid: String, instance: usize },
    #[error("PMID {pmid}: instance belongs to document {found}")]
    ForeignInstance { pmid: String, found: String },
    #[error("bootstrap needs at least {MIN_BOOTSTRAP_ITERATIONS} iterations, got {0}")]
    TooFewIterations(usize),
    #[error("bootstrap over an empty document set")]
    NoDocuments,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Pairs predicted for `doc`: a pair is in the output iff one of its
/// instances is classified CID, or it co-occurs in `doc` and is a training
/// relation.
pub fn aggregate_document(
    doc: &Document,
    instances: &[RelationInstance],
    predictions: &[Prediction],
    train_relations: &BTreeSet<CidPair>,
) -> Result<BTreeSet<CidPair>, EvalError> {
    let mut covered = vec![false; instances.len()];
    let mut out = BTreeSet::new();
    for p in predictions {
        let inst = instances.get(p.instance).ok_or_else(|| EvalError::UnknownInstance {
            pmid: doc.pmid.clone(),
            instance: p.instance,
        })?;
        if inst.pmid != doc.pmid {
            return Err(EvalError::ForeignInstance {
                pmid: doc.pmid.clone(),
                found: inst.pmid.clone(),
            });
        }
        covered[p.instance] = true;
        if p.label == CID {
            out.insert(inst.pair());
        }
    }
    if let Some(i) = covered.iter().position(|c| !c) {
        return Err(EvalError::MissingPrediction {
            pmid: doc.pmid.clone(),
            instance: i,
        });
    }
    out.extend(
        doc.cooccurring_pairs()
            .into_iter()
            .filter(|pair| train_relations.contains(pair)),
    );
    Ok(out)
}

/// [`aggregate_document`] over a corpus, one document per worker task.
pub fn aggregate_corpus(
    docs: &[Document],
    instances: &[Vec<RelationInstance>],
    predictions: &[Vec<Prediction>],
    train_relations: &BTreeSet<CidPair>,
) -> Result<DocPairs, EvalError> {
    docs.par_iter()
        .zip(instances.par_iter())
        .zip(predictions.par_iter())
        .map(|((d, i), p)| aggregate_document(d, i, p, train_relations).map(|s| (d.pmid.clone(), s)))
        .collect()
}

/// Builds, classifies and aggregates the instances of every document. Windows
/// are truncated to the model's sequence length.
pub fn predict_documents(
    mp: &ModelParams,
    docs: &[Document],
    train_relations: &BTreeSet<CidPair>,
) -> Result<DocPairs, EvalError> {
    let model = &mp.model;
    docs.par_iter()
        .map(|doc| {
            let instances = build_instances(doc, model.hyper.seq_len)?;
            let mut preds = Vec::with_capacity(instances.len());
            for (i, inst) in instances.iter().enumerate() {
                preds.push(model.predict(&mp.params, &model.input.encode(inst)?, i)?);
            }
            Ok((
                doc.pmid.clone(),
                aggregate_document(doc, &instances, &preds, train_relations)?,
            ))
        })
        .collect()
}

/// Gold pairs of every document, including documents without relations.
pub fn gold_pairs(docs: &[Document]) -> DocPairs {
    docs.iter().map(|d| (d.pmid.clone(), d.gold_cid.clone())).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn of(gold: &BTreeSet<CidPair>, pred: &BTreeSet<CidPair>) -> Self {
        let tp = pred.intersection(gold).count();
        Self {
            tp,
            fp: pred.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// P, R and F1 in percent.
    pub fn scores(&self) -> Scores {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Scores {
            counts: *self,
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of P and R on any common scale; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Micro-averaged scores, matching exactly on (pmid, chemical, disease).
pub fn prf1(gold: &DocPairs, predicted: &DocPairs) -> Scores {
    let empty = BTreeSet::new();
    let mut total = Counts::default();
    let pmids: BTreeSet<&String> = gold.keys().chain(predicted.keys()).collect();
    for pmid in pmids {
        total.add(Counts::of(
            gold.get(pmid).unwrap_or(&empty),
            predicted.get(pmid).unwrap_or(&empty),
        ));
    }
    total.scores()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapResult {
    pub p_value: f64,
    /// F1(a) − F1(b) on the full document set.
    pub observed_diff: f64,
    pub iterations: usize,
    pub seed: u64,
}

/// Paired bootstrap over the documents of `gold`. The p-value is the
/// fraction of replicates in which the observed winner (a on ties) fails
/// to score strictly higher F1.
pub fn bootstrap_test(
    a: &DocPairs,
    b: &DocPairs,
    gold: &DocPairs,
    iterations: usize,
    rng: &mut Rng,
) -> Result<BootstrapResult, EvalError> {
    if iterations < MIN_BOOTSTRAP_ITERATIONS {
        return Err(EvalError::TooFewIterations(iterations));
    }
    if gold.is_empty() {
        return Err(EvalError::NoDocuments);
    }
    let empty = BTreeSet::new();
    let per_doc: Vec<(Counts, Counts)> = gold
        .iter()
        .map(|(pmid, g)| {
            (
                Counts::of(g, a.get(pmid).unwrap_or(&empty)),
                Counts::of(g, b.get(pmid).unwrap_or(&empty)),
            )
        })
        .collect();
    let diff_of = |docs: &mut dyn Iterator<Item = usize>| {
        let (mut ca, mut cb) = (Counts::default(), Counts::default());
        for i in docs {
            ca.add(per_doc[i].0);
            cb.add(per_doc[i].1);
        }
        ca.scores().f1 - cb.scores().f1
    };
    let n = per_doc.len();
    let observed_diff = diff_of(&mut (0..n));
    let sign = if observed_diff >= 0.0 { 1.0 } else { -1.0 };
    let mut losses = 0usize;
    for _ in 0..iterations {
        let d = diff_of(&mut (0..n).map(|_| rng.index(n)));
        if sign * d <= 0.0 {
            losses += 1;
        }
    }
    Ok(BootstrapResult {
        p_value: losses as f64 / iterations as f64,
        observed_diff,
        iterations,
        seed: rng.seed(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub predicted: DocPairs,
    pub scores: Scores,
    pub bootstrap: Option<BootstrapResult>,
}

impl EvalReport {
    pub fn new(gold: &DocPairs, predicted: DocPairs) -> Self {
        let scores = prf1(gold, &predicted);
        Self {
            predicted,
            scores,
            bootstrap: None,
        }
    }

    /// `P R F1` to one decimal.
    pub fn summary_line(&self) -> String {
        format!(
            "{:.1} {:.1} {:.1}",
            self.scores.precision, self.scores.recall, self.scores.f1
        )
    }

    pub fn to_text(&self) -> String {
        let s = &self.scores;
        let mut out = String::new();
        let _ = writeln!(out, "precision\t{:.1}", s.precision);
        let _ = writeln!(out, "recall\t{:.1}", s.recall);
        let _ = writeln!(out, "f1\t{:.1}", s.f1);
        let _ = writeln!(out, "tp\t{}\nfp\t{}\nfn\t{}", s.counts.tp, s.counts.fp, s.counts.fn_);
        let _ = writeln!(out, "[predictions]");
        for (pmid, pairs) in &self.predicted {
            if pairs.is_empty() {
                let _ = writeln!(out, "{pmid}");
            }
            for (c, d) in pairs {
                let _ = writeln!(out, "{pmid}\t{c}\t{d}");
            }
        }
        if let Some(b) = &self.bootstrap {
            let _ = writeln!(out, "[bootstrap]");
            let _ = writeln!(out, "p_value\t{:.4}", b.p_value);
            let _ = writeln!(out, "f1_diff\t{:.4}", b.observed_diff);
            let _ = writeln!(out, "iterations\t{}", b.iterations);
            let _ = writeln!(out, "seed\t{}", b.seed);
        }
        out
    }
}
