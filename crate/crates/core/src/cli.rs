//! Command-line front end.
//!
//! Exit codes: 0 success, 1 parse or I/O failure, 2 configuration error,
//! 3 numeric failure, 4 model/corpus vocabulary mismatch.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::corpus::{parse_pubtator, tokenize, CidPair, Document, DEFAULT_MAX_TOKENS};
use crate::encoders::{load_pretrained, EmbeddingError, PretrainedVectors, PAD_ROW, UNK_ROW};
use crate::evaluation::{bootstrap_test, gold_pairs, predict_documents, DocPairs, EvalReport};
use crate::gradcheck;
use crate::model::{ModelError, ModelParams, Variant};
use crate::optim::{grid_search, train, Grid, TrainConfig, TrainError, TrainReport};
use crate::rng::{streams, Rng};
use crate::tensor::set_debug_numerics;

pub const BOOTSTRAP_ITERATIONS: usize = 10_000;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "cdrex",
    version,
    about = "Chemical-induced disease relation extraction with CNNs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one configuration and keep the best dev epoch
    Train(Options),
    /// Score a model on a test corpus
    Eval(Options),
    /// Train every grid point and keep the best on dev F1
    Gridsearch(Options),
    /// Print predicted CID pairs for a corpus
    Predict(Options),
    /// Check analytic gradients against finite differences
    Gradcheck(Options),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Options {
    /// Flat TOML file with the same keys as the flags (underscored); flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus (PubTator)
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Development corpus (PubTator)
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Test or input corpus (PubTator)
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Pre-trained word vectors (word2vec text format)
    #[arg(long)]
    pub emb: Option<PathBuf>,
    /// Model file to load
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    /// Model file to write
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Report file to write
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// cnn, cnn+cnnchar or cnn+lstmchar
    #[arg(long)]
    pub variant: Option<String>,
    /// Nadam learning rate (comma-separated list for gridsearch)
    #[arg(long)]
    pub lambda: Option<String>,
    /// Number of convolution filters (comma-separated list for gridsearch)
    #[arg(long)]
    pub filters: Option<String>,
    /// Dropout probability (comma-separated list for gridsearch)
    #[arg(long)]
    pub dropout: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Check every tensor operation's output for NaN or infinity
    #[arg(long)]
    pub debug_numerics: bool,
    /// Second model compared against --model-in with a paired bootstrap test
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Testing aid: use the gold pairs as predictions
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    VocabMismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::VocabMismatch(_) => 4,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Model(ModelError::Embedding(EmbeddingError::DimMismatch { .. })) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Parse(e.to_string()),
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    train: Option<PathBuf>,
    dev: Option<PathBuf>,
    test: Option<PathBuf>,
    emb: Option<PathBuf>,
    model_in: Option<PathBuf>,
    model_out: Option<PathBuf>,
    report: Option<PathBuf>,
    compare: Option<PathBuf>,
    variant: Option<String>,
    lambda: Option<OneOrMany<f64>>,
    filters: Option<OneOrMany<usize>>,
    dropout: Option<OneOrMany<f64>>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    n_max: Option<usize>,
    bootstrap_iterations: Option<usize>,
    debug_numerics: Option<bool>,
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub emb: Option<PathBuf>,
    pub model_in: Option<PathBuf>,
    pub model_out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub compare: Option<PathBuf>,
    pub variant: Variant,
    pub lambdas: Vec<f64>,
    pub filters: Vec<usize>,
    pub dropouts: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub n_max: usize,
    pub bootstrap_iterations: usize,
    pub debug_numerics: bool,
    pub oracle: bool,
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("--{flag}: cannot parse {p:?}")))
        })
        .collect()
}

impl RunConfig {
    /// Merges the config file (if any) with the flags; flags win.
    pub fn resolve(opts: &Options) -> Result<Self, CliError> {
        let file = match &opts.config {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?;
                toml::from_str::<FileConfig>(&text)
                    .map_err(|e| CliError::Config(format!("config {}: {}", p.display(), e.message())))?
            }
            None => FileConfig::default(),
        };
        let base = TrainConfig::default();
        let variant = match opts.variant.as_ref().or(file.variant.as_ref()) {
            Some(v) => v.parse::<Variant>().map_err(CliError::Config)?,
            None => base.variant,
        };
        let lambdas = match &opts.lambda {
            Some(s) => parse_list("lambda", s)?,
            None => file.lambda.map(OneOrMany::into_vec).unwrap_or_default(),
        };
        let filters = match &opts.filters {
            Some(s) => parse_list("filters", s)?,
            None => file.filters.map(OneOrMany::into_vec).unwrap_or_default(),
        };
        let dropouts = match &opts.dropout {
            Some(s) => parse_list("dropout", s)?,
            None => file.dropout.map(OneOrMany::into_vec).unwrap_or_default(),
        };
        let cfg = Self {
            train: opts.train.clone().or(file.train),
            dev: opts.dev.clone().or(file.dev),
            test: opts.test.clone().or(file.test),
            emb: opts.emb.clone().or(file.emb),
            model_in: opts.model_in.clone().or(file.model_in),
            model_out: opts.model_out.clone().or(file.model_out),
            report: opts.report.clone().or(file.report),
            compare: opts.compare.clone().or(file.compare),
            variant,
            lambdas,
            filters,
            dropouts,
            epochs: opts.epochs.or(file.epochs).unwrap_or(base.epochs),
            batch_size: opts.batch_size.or(file.batch_size).unwrap_or(base.batch_size),
            seed: opts.seed.or(file.seed).unwrap_or(base.seed),
            n_max: file.n_max.unwrap_or(DEFAULT_MAX_TOKENS),
            bootstrap_iterations: file.bootstrap_iterations.unwrap_or(BOOTSTRAP_ITERATIONS),
            debug_numerics: opts.debug_numerics || file.debug_numerics.unwrap_or(false),
            oracle: opts.oracle,
        };
        for (flag, path) in [
            ("train", &cfg.train),
            ("dev", &cfg.dev),
            ("test", &cfg.test),
            ("emb", &cfg.emb),
            ("model-in", &cfg.model_in),
            ("compare", &cfg.compare),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(CliError::Config(format!("--{flag}: {} does not exist", p.display())));
                }
            }
        }
        Ok(cfg)
    }

    /// The single configuration trained by `train`.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let single = |name: &str, n: usize| {
            if n > 1 {
                Err(CliError::Config(format!(
                    "--{name} takes one value for train; use gridsearch"
                )))
            } else {
                Ok(())
            }
        };
        single("lambda", self.lambdas.len())?;
        single("filters", self.filters.len())?;
        single("dropout", self.dropouts.len())?;
        let base = self.base_config();
        let cfg = TrainConfig {
            lambda: self.lambdas.first().copied().unwrap_or(base.lambda),
            filters: self.filters.first().copied().unwrap_or(base.filters),
            dropout: self.dropouts.first().copied().unwrap_or(base.dropout),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn base_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            n_max: self.n_max,
            ..TrainConfig::default()
        }
    }

    /// The grid searched by `gridsearch`; unspecified axes take the default sets.
    pub fn grid(&self) -> Grid {
        let d = Grid::default();
        let pick = |given: &[f64], default: Vec<f64>| if given.is_empty() { default } else { given.to_vec() };
        Grid {
            lambdas: pick(&self.lambdas, d.lambdas),
            filters: if self.filters.is_empty() {
                d.filters
            } else {
                self.filters.clone()
            },
            dropouts: pick(&self.dropouts, d.dropouts),
        }
    }
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("--{flag} is required for this command")))
}

fn read_corpus(path: &Path) -> Result<Vec<Document>, CliError> {
    let f = File::open(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    let parsed = parse_pubtator(BufReader::new(f)).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    if !parsed.warnings.is_empty() {
        log::warn!("{}: {} warnings", path.display(), parsed.warnings.len());
        for w in &parsed.warnings {
            log::debug!("{}:{}: {}", path.display(), w.line, w.message);
        }
    }
    log::info!("{}: {} documents", path.display(), parsed.documents.len());
    Ok(parsed.documents)
}

fn read_embeddings(path: Option<&Path>) -> Result<Option<PretrainedVectors>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let f = File::open(path).map_err(|e| CliError::Config(format!("--emb {}: {e}", path.display())))?;
    load_pretrained(BufReader::new(f))
        .map(Some)
        .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    ModelParams::load(path).map_err(|e| CliError::Parse(format!("{}: {e} (error code {})", path.display(), e.code())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn train_relations(docs: &[Document]) -> BTreeSet<CidPair> {
    docs.iter().flat_map(|d| d.gold_cid.iter().cloned()).collect()
}

/// Rejects corpora that share no word with the model's vocabulary.
fn check_vocabulary(mp: &ModelParams, docs: &[Document]) -> Result<(), CliError> {
    let words = &mp.model.input.words;
    let mut total = 0usize;
    for d in docs {
        for t in tokenize(&d.text()) {
            total += 1;
            let row = words.row(&t.text);
            if row != UNK_ROW && row != PAD_ROW {
                return Ok(());
            }
        }
    }
    if total == 0 {
        return Ok(());
    }
    Err(CliError::VocabMismatch(format!(
        "none of the corpus's {total} tokens is in the model vocabulary of {} words; wrong model or corpus?",
        words.len()
    )))
}

fn predict_pairs(mp: &ModelParams, docs: &[Document], rel: &BTreeSet<CidPair>) -> Result<DocPairs, CliError> {
    predict_documents(mp, docs, rel).map_err(|e| CliError::from(TrainError::from(e)))
}

fn report_path(cfg: &RunConfig, model_out: &Path) -> PathBuf {
    cfg.report.clone().unwrap_or_else(|| {
        let mut p = model_out.as_os_str().to_owned();
        p.push(".report.txt");
        PathBuf::from(p)
    })
}

fn save_outcome(model: Option<&ModelParams>, report: &mut TrainReport, model_out: &Path) -> Result<(), CliError> {
    match model {
        Some(mp) => {
            mp.save(model_out)
                .map_err(|e| CliError::Parse(format!("{}: {e}", model_out.display())))?;
            report.model_path = Some(model_out.to_path_buf());
        }
        None => log::warn!("no epochs run; no model written"),
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let model_out = require(&cfg.model_out, "model-out")?;
    let tc = cfg.train_config()?;
    let train_docs = read_corpus(require(&cfg.train, "train")?)?;
    let dev_docs = read_corpus(require(&cfg.dev, "dev")?)?;
    let emb = read_embeddings(cfg.emb.as_deref())?;
    let outcome = train(&tc, &train_docs, &dev_docs, emb.as_ref())?;
    let mut report = outcome.report;
    save_outcome(outcome.model.as_ref(), &mut report, model_out)?;
    write_file(&report_path(cfg, model_out), &report.to_text())?;
    match (report.best_epoch, report.best_f1) {
        (Some(e), Some(f)) => println!("best epoch {e} dev F1 {f:.1}"),
        _ => println!("untrained"),
    }
    Ok(())
}

fn cmd_gridsearch(cfg: &RunConfig) -> Result<(), CliError> {
    let model_out = require(&cfg.model_out, "model-out")?;
    let train_docs = read_corpus(require(&cfg.train, "train")?)?;
    let dev_docs = read_corpus(require(&cfg.dev, "dev")?)?;
    let emb = read_embeddings(cfg.emb.as_deref())?;
    let configs = cfg.grid().configs(&cfg.base_config());
    for c in &configs {
        c.validate()?;
    }
    let outcome = grid_search(&configs, &train_docs, &dev_docs, emb.as_ref())?;
    let mut text = String::new();
    for (i, run) in outcome.runs.iter().enumerate() {
        text.push_str(&format!("[run {i}]\n"));
        match &run.result {
            Ok(r) => {
                let mut r = r.clone();
                if i == outcome.best && outcome.model.is_some() {
                    r.model_path = Some(model_out.to_path_buf());
                }
                text.push_str(&r.to_text());
            }
            Err(e) => text.push_str(&format!("failed\t{e}\n")),
        }
    }
    let best = outcome.best_config();
    text.push_str(&format!(
        "[winner]\nrun\t{}\nlambda\t{:e}\nfilters\t{}\ndropout\t{}\n",
        outcome.best, best.lambda, best.filters, best.dropout
    ));
    let mut best_report = outcome.best_report().clone();
    save_outcome(outcome.model.as_ref(), &mut best_report, model_out)?;
    write_file(&report_path(cfg, model_out), &text)?;
    println!(
        "best lambda {:e} filters {} dropout {} dev F1 {}",
        best.lambda,
        best.filters,
        best.dropout,
        best_report.best_f1.map_or("none".into(), |f| format!("{f:.1}"))
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let test_docs = read_corpus(require(&cfg.test, "test")?)?;
    let gold = gold_pairs(&test_docs);
    let mut report = if cfg.oracle {
        EvalReport::new(&gold, gold.clone())
    } else {
        let mp = load_model(require(&cfg.model_in, "model-in")?)?;
        let rel = train_relations(&read_corpus(require(&cfg.train, "train")?)?);
        check_vocabulary(&mp, &test_docs)?;
        let predicted = predict_pairs(&mp, &test_docs, &rel)?;
        let mut report = EvalReport::new(&gold, predicted);
        if let Some(other) = &cfg.compare {
            let mp_b = load_model(other)?;
            check_vocabulary(&mp_b, &test_docs)?;
            let pred_b = predict_pairs(&mp_b, &test_docs, &rel)?;
            let mut rng = Rng::new(cfg.seed).derive(streams::BOOTSTRAP);
            let b = bootstrap_test(&report.predicted, &pred_b, &gold, cfg.bootstrap_iterations, &mut rng)
                .map_err(|e| CliError::Config(e.to_string()))?;
            report.bootstrap = Some(b);
        }
        report
    };
    if let Some(p) = &cfg.report {
        write_file(p, &report.to_text())?;
    }
    println!("{}", report.summary_line());
    if let Some(b) = report.bootstrap.take() {
        println!(
            "p-value {:.4} ({} iterations, seed {})",
            b.p_value, b.iterations, cfg.seed
        );
    }
    Ok(())
}

fn cmd_predict(cfg: &RunConfig) -> Result<(), CliError> {
    let docs = read_corpus(require(&cfg.test, "test")?)?;
    let mp = load_model(require(&cfg.model_in, "model-in")?)?;
    let rel = match &cfg.train {
        Some(p) => train_relations(&read_corpus(p)?),
        None => BTreeSet::new(),
    };
    check_vocabulary(&mp, &docs)?;
    let predicted = predict_pairs(&mp, &docs, &rel)?;
    let mut text = String::new();
    for (pmid, pairs) in &predicted {
        for (c, d) in pairs {
            text.push_str(&format!("{pmid}\tCID\t{c}\t{d}\n"));
        }
    }
    match &cfg.report {
        Some(p) => write_file(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let seeds: Vec<u64> = (0..gradcheck::SEEDS.len() as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect();
    let entries = gradcheck::full_suite(&seeds).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut text = String::new();
    for e in &entries {
        text.push_str(&format!(
            "{}\t{:.3e}\t{} coordinates\n",
            e.name, e.report.max_rel_error, e.report.coordinates
        ));
    }
    if let Some(p) = &cfg.report {
        write_file(p, &text)?;
    }
    let max = gradcheck::max_error(&entries);
    println!("max relative error {max:.3e} over {} checks", entries.len());
    if max < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {max:.3e} >= {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("CDREX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("CDREX_THREADS={v:?} is not a positive integer")))?;
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::debug!("thread pool already configured: {e}");
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (opts, f): (&Options, fn(&RunConfig) -> Result<(), CliError>) = match &cli.command {
        Command::Train(o) => (o, cmd_train),
        Command::Eval(o) => (o, cmd_eval),
        Command::Gridsearch(o) => (o, cmd_gridsearch),
        Command::Predict(o) => (o, cmd_predict),
        Command::Gradcheck(o) => (o, cmd_gradcheck),
    };
    let result = configure_threads()
        .and_then(|_| RunConfig::resolve(opts))
        .and_then(|cfg| {
            set_debug_numerics(cfg.debug_numerics);
            f(&cfg)
        });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
