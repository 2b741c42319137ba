//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Criteria that are known to be unattainable are still computed; their
//! failure is reported with the reason but does not fail the run. Any other
//! failure exits non-zero.
//!
//! Optional inputs:
//! - `CDREX_BC5CDR_DIR`: directory holding the three BC5CDR PubTator files.
//! - `CDREX_FULL_REPRO=1` with `CDREX_EMB=<vectors>`: full grid search on BC5CDR.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cdrex::corpus::{parse_pubtator, CidPair, Document, EntityKind, Mention, RelationInstance};
use cdrex::encoders::{load_pretrained, CharIndex, CharVariant, EncoderDims, InputLayer, WordIndex};
use cdrex::evaluation::{aggregate_document, f1, gold_pairs, predict_documents, prf1};
use cdrex::gradcheck;
use cdrex::model::{Prediction, Variant};
use cdrex::optim::{grid_search, nadam_step, train, Grid, NadamState, TrainConfig, Trainer};
use cdrex::rng::Rng;
use cdrex::synthetic::two_pattern_corpus;
use cdrex::tensor::{Gradients, Graph, ParamSet, Tensor};

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
    /// Why a failure is expected, if it is.
    known: Option<&'static str>,
}

fn check(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
        known: None,
    }
}

fn skip(detail: &str) -> Outcome {
    Outcome {
        status: Status::Skip,
        detail: detail.to_string(),
        known: None,
    }
}

fn timed(limit: Duration, start: Instant, ok: bool, detail: String) -> Outcome {
    let elapsed = start.elapsed();
    check(
        ok && elapsed < limit,
        format!("{detail}; {:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()),
    )
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let entries = gradcheck::full_suite(&gradcheck::SEEDS).expect("gradient suite");
    let max = gradcheck::max_error(&entries);
    let variants: BTreeSet<&str> = entries
        .iter()
        .filter_map(|e| e.name.strip_prefix("loss["))
        .map(|n| n.split(',').next().unwrap())
        .collect();
    let worst = entries
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    timed(
        Duration::from_secs(120),
        start,
        max < 1e-4 && variants.contains("cnn+cnnchar") && variants.contains("cnn+lstmchar"),
        format!(
            "gradient integrity: {} checks, max relative error {max:.2e} (worst {}) < 1e-4",
            entries.len(),
            worst.name
        ),
    )
}

const PUBLISHED_ROWS: [(&str, f64, f64, f64); 11] = [
    ("MaxEnt", 62.0, 55.1, 58.3),
    ("Pattern rule-based", 59.3, 62.3, 60.8),
    ("LSTM-based", 64.9, 49.3, 56.0),
    ("LSTM-based & PP", 55.6, 68.4, 61.3),
    ("CNN-based", 60.9, 59.5, 60.2),
    ("CNN-based & PP", 55.7, 68.1, 61.3),
    ("BRAN", 55.6, 70.8, 62.1),
    ("SVM+APG", 53.2, 69.7, 60.3),
    ("CNN", 54.8, 69.0, 61.1),
    ("CNN+CNNchar", 57.0, 68.6, 62.3),
    ("CNN+LSTMchar", 56.8, 68.8, 62.2),
];

fn criterion_2() -> Outcome {
    let mut bad = Vec::new();
    for (name, p, r, published) in PUBLISHED_ROWS {
        let got = f1(p, r);
        if (got - published).abs() > 0.05 {
            bad.push(format!("{name}: F1({p}, {r}) = {got:.2} vs published {published}"));
        }
    }
    let ok = bad.is_empty();
    let mut out = check(
        ok,
        format!(
            "metric arithmetic: {}/{} published rows within 0.05{}",
            PUBLISHED_ROWS.len() - bad.len(),
            PUBLISHED_ROWS.len(),
            if ok {
                String::new()
            } else {
                format!("; mismatches: {}", bad.join("; "))
            }
        ),
    );
    if !ok && bad.len() == 1 && bad[0].starts_with("BRAN") {
        out.known = Some("the published BRAN row is internally inconsistent: 2PR/(P+R) for P 55.6, R 70.8 is 62.29, not 62.1; every other row reproduces");
    }
    out
}

fn random_document(rng: &mut Rng, k: usize) -> (Document, Vec<RelationInstance>, Vec<Prediction>, BTreeSet<CidPair>) {
    let pmid = format!("{k}");
    let n_chem = rng.index(5);
    let n_dis = rng.index(5);
    let mut mentions = Vec::new();
    for _ in 0..n_chem {
        let id = format!("C{}", rng.index(4));
        mentions.push(Mention {
            start: 0,
            end: 1,
            text: id.clone(),
            kind: EntityKind::Chemical,
            mesh_id: id,
        });
    }
    for _ in 0..n_dis {
        let id = format!("D{}", rng.index(4));
        mentions.push(Mention {
            start: 0,
            end: 1,
            text: id.clone(),
            kind: EntityKind::Disease,
            mesh_id: id,
        });
    }
    let mut instances = Vec::new();
    for (ci, c) in mentions
        .iter()
        .enumerate()
        .filter(|(_, m)| m.kind == EntityKind::Chemical)
    {
        for (di, d) in mentions
            .iter()
            .enumerate()
            .filter(|(_, m)| m.kind == EntityKind::Disease)
        {
            instances.push(RelationInstance {
                pmid: pmid.clone(),
                tokens: vec!["a".into(), "b".into()],
                spans: vec![(0, 1), (2, 3)],
                i1: 0,
                i2: 1,
                chem_id: c.mesh_id.clone(),
                dis_id: d.mesh_id.clone(),
                chem_mention: ci,
                dis_mention: di,
                label: None,
            });
        }
    }
    let positive_rate = rng.uniform();
    let predictions = (0..instances.len())
        .map(|i| {
            let label = usize::from(rng.bernoulli(positive_rate * 0.5));
            Prediction {
                instance: i,
                probabilities: vec![1.0 - label as f64, label as f64],
                label,
            }
        })
        .collect();
    let mut train = BTreeSet::new();
    for c in 0..4 {
        for d in 0..4 {
            if rng.bernoulli(0.2) {
                train.insert((format!("C{c}"), format!("D{d}")));
            }
        }
    }
    let doc = Document {
        pmid,
        title: "t".into(),
        abstract_text: "a".into(),
        mentions,
        gold_cid: BTreeSet::new(),
    };
    (doc, instances, predictions, train)
}

/// Rules (i) and (ii) applied literally over the whole id universe.
fn brute_force(
    doc: &Document,
    instances: &[RelationInstance],
    predictions: &[Prediction],
    train: &BTreeSet<CidPair>,
) -> BTreeSet<CidPair> {
    let mut out = BTreeSet::new();
    for c in 0..4 {
        for d in 0..4 {
            let (cid, did) = (format!("C{c}"), format!("D{d}"));
            let rule_i = predictions.iter().any(|p| {
                let inst = &instances[p.instance];
                p.label == 1 && inst.chem_id == cid && inst.dis_id == did
            });
            let has = |kind, id: &str| doc.mentions.iter().any(|m| m.kind == kind && m.mesh_id == id);
            let rule_ii = has(EntityKind::Chemical, &cid)
                && has(EntityKind::Disease, &did)
                && train.contains(&(cid.clone(), did.clone()));
            if rule_i || rule_ii {
                out.insert((cid, did));
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut mismatches = 0;
    let mut nonempty = 0;
    for k in 0..1000 {
        let (doc, inst, preds, train) = random_document(&mut rng, k);
        let got = aggregate_document(&doc, &inst, &preds, &train).expect("aggregation");
        let want = brute_force(&doc, &inst, &preds, &train);
        nonempty += usize::from(!want.is_empty());
        if got != want {
            mismatches += 1;
        }
    }
    timed(
        Duration::from_secs(30),
        start,
        mismatches == 0 && nonempty > 100,
        format!("aggregation oracle: {mismatches} mismatches over 1000 documents ({nonempty} with pairs)"),
    )
}

fn criterion_4() -> Outcome {
    let docs = two_pattern_corpus(100, 77);
    let mut lines = Vec::new();
    let mut ok = true;
    for variant in Variant::ALL {
        let start = Instant::now();
        let cfg = TrainConfig {
            variant,
            lambda: 5e-4,
            filters: 100,
            dropout: 0.25,
            epochs: 200,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&cfg, &docs, None).expect("trainer");
        assert_eq!(trainer.instance_count(), 100);
        let initial = trainer.training_accuracy().expect("accuracy");
        let mut reached = None;
        let mut acc = 0.0;
        while trainer.epoch() < cfg.epochs {
            trainer.run_epoch().expect("epoch");
            acc = trainer.training_accuracy().expect("accuracy");
            if acc >= 0.99 {
                reached = Some(trainer.epoch());
                break;
            }
        }
        let elapsed = start.elapsed();
        let this_ok = reached.is_some() && elapsed < Duration::from_secs(300);
        ok &= this_ok;
        lines.push(format!(
            "{variant}: {:.0}% untrained, {} ({:.1}s)",
            initial * 100.0,
            match reached {
                Some(e) => format!("{:.0}% at epoch {e}", acc * 100.0),
                None => format!("{:.0}% after {} epochs", acc * 100.0, cfg.epochs),
            },
            elapsed.as_secs_f64()
        ));
    }
    check(ok, format!("overfitting: {}", lines.join(", ")))
}

fn criterion_5() -> Outcome {
    let docs = two_pattern_corpus(40, 8);
    let cfg = TrainConfig {
        variant: Variant::CnnCharLstm,
        lambda: 5e-4,
        filters: 50,
        epochs: 3,
        batch_size: 8,
        seed: 99,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &docs, &docs, None).expect("first run");
    let b = train(&cfg, &docs, &docs, None).expect("second run");
    let bytes = |o: &cdrex::optim::TrainOutcome| o.model.as_ref().unwrap().to_bytes().unwrap();
    let losses = |o: &cdrex::optim::TrainOutcome| o.report.epochs.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    let same_model = bytes(&a) == bytes(&b);
    let same_loss = losses(&a) == losses(&b);
    check(
        same_model && same_loss && a.report.to_text() == b.report.to_text(),
        format!(
            "determinism: model files identical = {same_model}, loss sequences identical = {same_loss} ({} bytes)",
            bytes(&a).len()
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut ps = ParamSet::new();
    let id = ps.add("x", Tensor::vector(vec![1.0]), false);
    let mut st = NadamState::new(&ps, 0.05);
    let mut reached = None;
    for step in 1..=500 {
        let mut g = Gradients::new(&ps);
        g.slot_mut(id)[0] = 2.0 * ps.get(id).data()[0];
        nadam_step(&mut ps, &g, &mut st).expect("step");
        if reached.is_none() && ps.get(id).data()[0].abs() < 1e-3 {
            reached = Some(step);
        }
    }
    let mut fixed = ParamSet::new();
    let fid = fixed.add("w", Tensor::vector(vec![0.25, -0.5]), false);
    let mut st = NadamState::new(&fixed, 0.05);
    let zero = Gradients::new(&fixed);
    for _ in 0..100 {
        nadam_step(&mut fixed, &zero, &mut st).expect("step");
    }
    let unchanged = fixed.get(fid).data() == [0.25, -0.5];
    check(
        reached.is_some() && unchanged,
        format!(
            "optimizer: |x| < 1e-3 first at step {}, zero gradient fixed point = {unchanged}",
            reached.map_or("never".into(), |s| s.to_string())
        ),
    )
}

fn criterion_7() -> (Outcome, Outcome) {
    let dims = EncoderDims::default();
    let expected = dims.word + 2 * dims.position + dims.char_filters;
    let chars: BTreeSet<char> = ('a'..='z').collect();
    let words = WordIndex::from_counts(BTreeMap::from([("aspirin".to_string(), 1)]));
    let mut widths = Vec::new();
    let mut emit_ok = true;
    for variant in [CharVariant::Cnn, CharVariant::BiLstm] {
        let mut ps = ParamSet::new();
        let layer = InputLayer::create(
            words.clone(),
            CharIndex::new(chars.clone()),
            6,
            &dims,
            Some(variant),
            None,
            &mut ps,
            &mut Rng::new(3),
        )
        .expect("input layer");
        widths.push(layer.width(&ps));
        let c = layer.char.as_ref().unwrap();
        for len in 1..=40 {
            let word: String = (0..len).map(|i| (b'a' + (i % 26) as u8) as char).collect();
            let mut g = Graph::new(&ps);
            let v = c
                .encoder
                .encode(&mut g, &c.table, &layer.chars.rows(&word))
                .expect("char encode");
            emit_ok &= g.shape(v) == [dims.char_filters];
        }
        let inst = RelationInstance {
            pmid: "1".into(),
            tokens: vec!["Aspirin".into(), "x".into(), "fever".into()],
            spans: vec![(0, 0); 3],
            i1: 0,
            i2: 2,
            chem_id: "C".into(),
            dis_id: "D".into(),
            chem_mention: 0,
            dis_mention: 1,
            label: Some(0),
        };
        let mut g = Graph::new(&ps);
        let m = layer.build(&mut g, &layer.encode(&inst).unwrap()).unwrap();
        emit_ok &= g.shape(m) == [6, expected];
    }
    let sum_ok = emit_ok && widths.iter().all(|&w| w == expected) && expected == 350;
    let contract = check(
        sum_ok,
        format!(
            "dimensions: input rows d = d1 + 2*d2 + d3 = {} for both char variants, d3 = 50 for word lengths 1..40",
            widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("/")
        ),
    );
    let mut literal = check(
        widths.iter().all(|&w| w == 400),
        format!(
            "dimensions (literal): criterion states d = 400; measured d = {}",
            widths[0]
        ),
    );
    literal.known = Some("200 + 2*50 + 50 = 350, so the stated 400 contradicts the dimensions it is defined from");
    (contract, literal)
}

fn bc5cdr_files() -> Option<[PathBuf; 3]> {
    let dir = PathBuf::from(std::env::var_os("CDREX_BC5CDR_DIR")?);
    let files = [
        "CDR_TrainingSet.PubTator.txt",
        "CDR_DevelopmentSet.PubTator.txt",
        "CDR_TestSet.PubTator.txt",
    ]
    .map(|f| dir.join(f));
    files.iter().all(|f| f.is_file()).then_some(files)
}

fn read(path: &Path) -> cdrex::corpus::ParsedCorpus {
    parse_pubtator(std::io::BufReader::new(std::fs::File::open(path).expect("open"))).expect("parse")
}

fn criterion_8() -> Outcome {
    let Some(files) = bc5cdr_files() else {
        return skip("corpus parsing: set CDREX_BC5CDR_DIR to the BC5CDR PubTator directory");
    };
    let parsed: Vec<_> = files.iter().map(|f| read(f)).collect();
    let counts: Vec<usize> = parsed.iter().map(|p| p.documents.len()).collect();
    let longest = parsed.iter().map(|p| p.longest_word()).max().unwrap_or(0);
    check(
        counts.iter().all(|&c| c == 500) && longest == 37,
        format!("corpus parsing: documents per split {counts:?}, longest word {longest} characters"),
    )
}

fn criterion_9() -> Outcome {
    let (Some(files), Ok("1"), Some(emb)) = (
        bc5cdr_files(),
        std::env::var("CDREX_FULL_REPRO").as_deref(),
        std::env::var_os("CDREX_EMB"),
    ) else {
        return skip("full reproduction (optional): set CDREX_FULL_REPRO=1, CDREX_BC5CDR_DIR and CDREX_EMB");
    };
    let [train_p, dev_p, test_p] = files;
    let (train_docs, dev_docs, test_docs) = (
        read(&train_p).documents,
        read(&dev_p).documents,
        read(&test_p).documents,
    );
    let vectors = load_pretrained(std::io::BufReader::new(std::fs::File::open(emb).expect("emb"))).expect("emb parse");
    let base = TrainConfig {
        variant: Variant::CnnCharCnn,
        ..TrainConfig::default()
    };
    let grid = grid_search(&Grid::default().configs(&base), &train_docs, &dev_docs, Some(&vectors)).expect("grid");
    let mp = grid.model.expect("winner model");
    let rel: BTreeSet<CidPair> = train_docs.iter().flat_map(|d| d.gold_cid.iter().cloned()).collect();
    let scores = prf1(
        &gold_pairs(&test_docs),
        &predict_documents(&mp, &test_docs, &rel).expect("predict"),
    );
    check(
        (scores.f1 - 62.3).abs() <= 2.0,
        format!(
            "full reproduction: CNN+CNNchar test F1 {:.1} (target 62.3 +/- 2.0)",
            scores.f1
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome {
            status: Status::Fail,
            detail: format!("panicked: {msg}"),
            known: None,
        }
    })
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this target
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1", guarded(criterion_1)),
        ("2", guarded(criterion_2)),
        ("3", guarded(criterion_3)),
        ("4", guarded(criterion_4)),
        ("5", guarded(criterion_5)),
        ("6", guarded(criterion_6)),
    ];
    match catch_unwind(criterion_7) {
        Ok((contract, literal)) => {
            results.push(("7", contract));
            results.push(("7-literal", literal));
        }
        Err(_) => results.push(("7", guarded(|| panic!("dimension check panicked")))),
    }
    results.push(("8", guarded(criterion_8)));
    results.push(("9", guarded(criterion_9)));

    let mut unexpected = 0;
    for (id, o) in &results {
        let tag = match (&o.status, o.known) {
            (Status::Pass, _) => "PASS",
            (Status::Skip, _) => "SKIP",
            (Status::Fail, Some(_)) => "FAIL (known)",
            (Status::Fail, None) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("{tag} criterion {id}: {}", o.detail);
        if let (Status::Fail, Some(why)) = (&o.status, o.known) {
            println!("    reason: {why}");
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} acceptance criteria failed");
        std::process::exit(1);
    }
}
