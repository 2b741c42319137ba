//! Nadam, the epoch loop with dev-set model selection, and grid search.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_all_instances, build_vocab, CidPair, CorpusError, Document, DEFAULT_MAX_TOKENS};
use crate::encoders::{unk_replace, EncodedInstance, EncoderDims, PretrainedVectors};
use crate::evaluation::{gold_pairs, predict_documents, prf1, EvalError, Scores};
use crate::model::{Hyper, ModelError, ModelParams, Variant};
use crate::rng::{streams, Rng};
use crate::tensor::{Gradients, ParamSet, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite training loss")]
    NonFiniteLoss,
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training instances")]
    NoInstances,
    #[error("all {0} grid configurations failed")]
    AllConfigsFailed(usize),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("epoch {epoch}: {source}")]
    Aborted {
        epoch: usize,
        source: Box<TrainError>,
        report: Box<TrainReport>,
    },
}

impl TrainError {
    /// True for NaN/infinity failures.
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss => true,
            TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
            | TrainError::Eval(EvalError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))) => true,
            TrainError::Model(ModelError::Encode(crate::encoders::EncodeError::Tensor(TensorError::NonFinite {
                ..
            }))) => true,
            TrainError::Aborted { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

/// Nadam with a constant β1.
#[derive(Clone, Debug, PartialEq)]
pub struct NadamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl NadamState {
    pub fn new(params: &ParamSet, lambda: f64) -> Self {
        Self::with_constants(params, lambda, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(params: &ParamSet, lambda: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            step: 0,
            beta1,
            beta2,
            eps,
            lambda,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }
}

/// One Nadam update of every parameter. Parameters without a gradient slot
/// are updated with a zero gradient. A non-finite gradient aborts before
/// anything is modified.
pub fn nadam_step(params: &mut ParamSet, grads: &Gradients, state: &mut NadamState) -> Result<(), TrainError> {
    if state.m.len() != params.len() {
        return Err(TrainError::StateMismatch(format!(
            "{} moment arrays for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        let len = params.get(id).len();
        if state.m[id.0].len() != len || state.v[id.0].len() != len {
            return Err(TrainError::StateMismatch(format!("shape of {}", params.name(id))));
        }
        if let Some(g) = grads.get(id) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    param: params.name(id).to_string(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for id in params.ids() {
        let g = grads.get(id);
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for (j, w) in params.get_mut(id).data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            let look_ahead = b1 * m_hat + (1.0 - b1) * gj / c1;
            *w -= state.lambda * look_ahead / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub filters: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub n_max: usize,
    pub dims: EncoderDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CnnCharCnn,
            lambda: 1e-4,
            filters: 300,
            dropout: 0.5,
            epochs: 50,
            batch_size: 32,
            seed: 1,
            n_max: DEFAULT_MAX_TOKENS,
            dims: EncoderDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad(format!("learning rate {} must be finite and non-negative", self.lambda));
        }
        if self.filters == 0 {
            return bad("filter count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.n_max < 2 {
            return bad(format!("n_max {} below 2", self.n_max));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStatus {
    Trained,
    Untrained,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub status: TrainStatus,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_f1: Option<f64>,
    pub model_path: Option<PathBuf>,
}

impl TrainReport {
    fn new(config: TrainConfig) -> Self {
        Self {
            config,
            status: TrainStatus::Untrained,
            epochs: Vec::new(),
            best_epoch: None,
            best_f1: None,
            model_path: None,
        }
    }

    /// Checks that the recorded best F1 is the maximum of the epoch list,
    /// reached first at the recorded epoch.
    pub fn is_consistent(&self) -> bool {
        let first_max = self.epochs.iter().fold(None::<&EpochRecord>, |best, r| match best {
            Some(b) if b.f1 >= r.f1 => Some(b),
            _ => Some(r),
        });
        match first_max {
            None => self.best_epoch.is_none() && self.best_f1.is_none(),
            Some(r) => self.best_epoch == Some(r.epoch) && self.best_f1 == Some(r.f1),
        }
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "variant\t{}", c.variant);
        let _ = writeln!(out, "lambda\t{:e}", c.lambda);
        let _ = writeln!(out, "filters\t{}", c.filters);
        let _ = writeln!(out, "dropout\t{}", c.dropout);
        let _ = writeln!(out, "epochs\t{}", c.epochs);
        let _ = writeln!(out, "batch_size\t{}", c.batch_size);
        let _ = writeln!(out, "seed\t{}", c.seed);
        let status = match self.status {
            TrainStatus::Trained => "trained",
            TrainStatus::Untrained => "untrained",
        };
        let _ = writeln!(out, "status\t{status}");
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let _ = writeln!(out, "best_epoch\t{}", opt(self.best_epoch.map(|e| e.to_string())));
        let _ = writeln!(out, "best_f1\t{}", opt(self.best_f1.map(|f| format!("{f:.4}"))));
        let _ = writeln!(
            out,
            "model\t{}",
            opt(self.model_path.as_ref().map(|p| p.display().to_string()))
        );
        let _ = writeln!(out, "[epochs]");
        let _ = writeln!(out, "epoch\tloss\tP\tR\tF1");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                r.epoch, r.loss, r.precision, r.recall, r.f1
            );
        }
        out
    }
}

/// Mutable training state for one configuration.
pub struct Trainer {
    config: TrainConfig,
    mp: ModelParams,
    state: NadamState,
    train: Vec<EncodedInstance>,
    train_relations: BTreeSet<CidPair>,
    shuffle_rng: Rng,
    unk_rng: Rng,
    dropout_rng: Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(
        config: &TrainConfig,
        train_docs: &[Document],
        pretrained: Option<&PretrainedVectors>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let per_doc = build_all_instances(train_docs, config.n_max)?;
        let instances: Vec<_> = per_doc.into_iter().flatten().collect();
        if instances.is_empty() {
            return Err(TrainError::NoInstances);
        }
        let vocab = build_vocab(train_docs, &instances, config.n_max)?;
        let mut hyper = Hyper::new(vocab.seq_len, config.filters, config.dropout);
        hyper.dims = config.dims;
        let root = Rng::new(config.seed);
        let mp = ModelParams::init(
            config.variant,
            hyper,
            vocab,
            pretrained,
            &mut root.derive(streams::INIT),
        )?;
        let train = instances
            .iter()
            .map(|i| mp.model.input.encode(i))
            .collect::<Result<Vec<_>, _>>()
            .map_err(ModelError::from)?;
        let state = NadamState::new(&mp.params, config.lambda);
        Ok(Self {
            config: config.clone(),
            state,
            train,
            train_relations: train_docs.iter().flat_map(|d| d.gold_cid.iter().cloned()).collect(),
            shuffle_rng: root.derive(streams::SHUFFLE),
            unk_rng: root.derive(streams::UNK),
            dropout_rng: root.derive(streams::DROPOUT),
            epoch: 0,
            mp,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn model(&self) -> &ModelParams {
        &self.mp
    }

    pub fn into_model(self) -> ModelParams {
        self.mp
    }

    pub fn optimizer(&self) -> &NadamState {
        &self.state
    }

    pub fn train_relations(&self) -> &BTreeSet<CidPair> {
        &self.train_relations
    }

    pub fn instance_count(&self) -> usize {
        self.train.len()
    }

    /// Shuffles, applies fresh UNK replacement and runs one pass of minibatch
    /// updates. Returns the mean minibatch loss.
    pub fn run_epoch(&mut self) -> Result<f64, TrainError> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        self.shuffle_rng.shuffle(&mut order);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&EncodedInstance> = chunk.iter().map(|&i| &self.train[i]).collect();
            let words: Vec<Vec<usize>> = batch
                .iter()
                .map(|e| unk_replace(&e.word_rows, &self.mp.model.input.words, &mut self.unk_rng))
                .collect();
            let mut grads = Gradients::new(&self.mp.params);
            let loss = self.mp.model.batch_loss(
                &self.mp.params,
                &batch,
                Some(&words),
                &mut self.dropout_rng,
                true,
                Some(&mut grads),
            )?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss);
            }
            nadam_step(&mut self.mp.params, &grads, &mut self.state)?;
            total += loss;
            batches += 1;
        }
        self.epoch += 1;
        log::debug!("epoch {}: loss {}", self.epoch, total / batches as f64);
        Ok(total / batches as f64)
    }

    /// Fraction of training instances classified correctly in inference mode.
    pub fn training_accuracy(&self) -> Result<f64, TrainError> {
        let preds = self.mp.model.predict_all(&self.mp.params, &self.train)?;
        let correct = preds
            .iter()
            .zip(&self.train)
            .filter(|(p, e)| Some(p.label) == e.label)
            .count();
        Ok(correct as f64 / self.train.len() as f64)
    }

    /// Document-level scores on `docs`.
    pub fn evaluate(&self, docs: &[Document]) -> Result<Scores, TrainError> {
        let predicted = predict_documents(&self.mp, docs, &self.train_relations)?;
        Ok(prf1(&gold_pairs(docs), &predicted))
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters of the best dev epoch; `None` when untrained.
    pub model: Option<ModelParams>,
}

/// Trains for `config.epochs` epochs and keeps the parameters of the epoch
/// with the highest dev F1 (earliest on ties).
pub fn train(
    config: &TrainConfig,
    train_docs: &[Document],
    dev_docs: &[Document],
    pretrained: Option<&PretrainedVectors>,
) -> Result<TrainOutcome, TrainError> {
    if dev_docs.is_empty() {
        return Err(TrainError::Config("empty development set".into()));
    }
    let mut trainer = Trainer::new(config, train_docs, pretrained)?;
    let mut report = TrainReport::new(config.clone());
    let mut best = None;
    for epoch in 1..=config.epochs {
        let step = trainer
            .run_epoch()
            .and_then(|loss| Ok((loss, trainer.evaluate(dev_docs)?)));
        let (loss, scores) = match step {
            Ok(v) => v,
            Err(source) => {
                return Err(TrainError::Aborted {
                    epoch,
                    source: Box::new(source),
                    report: Box::new(report),
                })
            }
        };
        log::info!(
            "{} epoch {epoch}: loss {loss:.6} dev P {:.1} R {:.1} F1 {:.1}",
            config.variant,
            scores.precision,
            scores.recall,
            scores.f1
        );
        report.epochs.push(EpochRecord {
            epoch,
            loss,
            precision: scores.precision,
            recall: scores.recall,
            f1: scores.f1,
        });
        if report.best_f1.is_none_or(|b| scores.f1 > b) {
            report.best_f1 = Some(scores.f1);
            report.best_epoch = Some(epoch);
            best = Some(trainer.model().clone());
        }
        report.status = TrainStatus::Trained;
    }
    Ok(TrainOutcome { report, model: best })
}

/// Hyperparameter sets searched by [`grid_search`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub lambdas: Vec<f64>,
    pub filters: Vec<usize>,
    pub dropouts: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lambdas: vec![5e-6, 1e-5, 5e-5, 1e-4, 5e-4],
            filters: vec![100, 200, 300, 400, 500],
            dropouts: vec![0.25, 0.5],
        }
    }
}

impl Grid {
    /// One config per grid point, λ outermost; the i-th gets seed `base.seed + i`.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &lambda in &self.lambdas {
            for &filters in &self.filters {
                for &dropout in &self.dropouts {
                    out.push(TrainConfig {
                        lambda,
                        filters,
                        dropout,
                        seed: base.seed.wrapping_add(out.len() as u64),
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

pub struct GridRun {
    pub config: TrainConfig,
    pub result: Result<TrainReport, String>,
}

pub struct GridOutcome {
    pub best: usize,
    pub runs: Vec<GridRun>,
    pub model: Option<ModelParams>,
}

impl GridOutcome {
    pub fn best_config(&self) -> &TrainConfig {
        &self.runs[self.best].config
    }

    pub fn best_report(&self) -> &TrainReport {
        self.runs[self.best].result.as_ref().expect("winner succeeded")
    }
}

/// True when run `a` beats run `b`: higher dev F1, then smaller (λ, m, ρ),
/// then smaller index.
fn better(a: (usize, &TrainConfig, Option<f64>), b: (usize, &TrainConfig, Option<f64>)) -> bool {
    let f = |x: Option<f64>| x.unwrap_or(f64::NEG_INFINITY);
    let key = |c: &TrainConfig| (c.lambda, c.filters, c.dropout);
    match f(a.2).partial_cmp(&f(b.2)) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Less) => false,
        _ => {
            let (ka, kb) = (key(a.1), key(b.1));
            match ka.partial_cmp(&kb) {
                Some(std::cmp::Ordering::Less) => true,
                Some(std::cmp::Ordering::Greater) => false,
                _ => a.0 < b.0,
            }
        }
    }
}

/// Trains every configuration concurrently and picks the best on dev F1.
/// Failed configurations are logged and skipped.
pub fn grid_search(
    configs: &[TrainConfig],
    train_docs: &[Document],
    dev_docs: &[Document],
    pretrained: Option<&PretrainedVectors>,
) -> Result<GridOutcome, TrainError> {
    if configs.is_empty() {
        return Err(TrainError::Config("empty grid".into()));
    }
    let winner: Mutex<Option<(usize, Option<f64>, Option<ModelParams>)>> = Mutex::new(None);
    let results: Vec<Result<TrainReport, String>> = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| match train(cfg, train_docs, dev_docs, pretrained) {
            Ok(outcome) => {
                let f1 = outcome.report.best_f1;
                let mut w = winner.lock().expect("grid winner lock");
                let replace = match &*w {
                    None => true,
                    Some((j, g, _)) => better((i, cfg, f1), (*j, &configs[*j], *g)),
                };
                if replace {
                    *w = Some((i, f1, outcome.model));
                }
                Ok(outcome.report)
            }
            Err(e) => {
                log::warn!(
                    "grid point lambda={} m={} rho={} failed: {e}",
                    cfg.lambda,
                    cfg.filters,
                    cfg.dropout
                );
                Err(e.to_string())
            }
        })
        .collect();
    let Some((best, _, model)) = winner.into_inner().expect("grid winner lock") else {
        return Err(TrainError::AllConfigsFailed(configs.len()));
    };
    let runs = configs
        .iter()
        .cloned()
        .zip(results)
        .map(|(config, result)| GridRun { config, result })
        .collect();
    Ok(GridOutcome { best, runs, model })
}
