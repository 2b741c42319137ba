use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdrex::model::{ModelParams, MAGIC};
use cdrex::synthetic::{to_pubtator, two_pattern_corpus};
use tempfile::TempDir;

fn cdrex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdrex"))
        .args(args)
        .env("CDREX_THREADS", "2")
        .output()
        .expect("run cdrex")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let docs = two_pattern_corpus(24, 4);
        std::fs::write(dir.path().join("train.txt"), to_pubtator(&docs[..16], true)).unwrap();
        std::fs::write(dir.path().join("dev.txt"), to_pubtator(&docs[16..], true)).unwrap();
        std::fs::write(dir.path().join("test.txt"), to_pubtator(&docs[16..], true)).unwrap();
        std::fs::write(dir.path().join("unlabeled.txt"), to_pubtator(&docs[16..], false)).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn train(&self, model: &str, extra: &[&str]) -> Output {
        let (train, dev, out) = (self.p("train.txt"), self.p("dev.txt"), self.p(model));
        let defaults = [
            ("--train", train.as_str()),
            ("--dev", &dev),
            ("--model-out", &out),
            ("--epochs", "2"),
            ("--filters", "10"),
            ("--batch-size", "4"),
            ("--seed", "3"),
        ];
        let mut args = vec!["train"];
        for (flag, value) in defaults {
            if !extra.contains(&flag) {
                args.extend([flag, value]);
            }
        }
        args.extend_from_slice(extra);
        cdrex(&args)
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn train_writes_model_and_report() {
    let fx = Fixture::new();
    let out = fx.train("m.bin", &["--variant", "cnn+cnnchar"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("best epoch"));
    let bytes = read(&fx.path("m.bin"));
    assert_eq!(&bytes[..8], MAGIC);
    let mp = ModelParams::load(&fx.path("m.bin")).unwrap();
    assert_eq!(mp.variant().as_str(), "cnn+cnnchar");
    let report = std::fs::read_to_string(fx.path("m.bin.report.txt")).unwrap();
    assert!(report.contains("status\ttrained"));
    assert!(report.contains("variant\tcnn+cnnchar"));
}

#[test]
fn identical_runs_are_byte_identical() {
    let fx = Fixture::new();
    assert!(fx.train("a.bin", &["--report", &fx.p("r.txt")]).status.success());
    let (m1, r1) = (read(&fx.path("a.bin")), read(&fx.path("r.txt")));
    assert!(fx.train("a.bin", &["--report", &fx.p("r.txt")]).status.success());
    assert_eq!(m1, read(&fx.path("a.bin")));
    assert_eq!(r1, read(&fx.path("r.txt")));
}

#[test]
fn one_point_grid_equals_train() {
    let fx = Fixture::new();
    assert!(fx
        .train("t.bin", &["--lambda", "5e-4", "--dropout", "0.25"])
        .status
        .success());
    let (train, dev, out) = (fx.p("train.txt"), fx.p("dev.txt"), fx.p("g.bin"));
    let g = cdrex(&[
        "gridsearch",
        "--train",
        &train,
        "--dev",
        &dev,
        "--model-out",
        &out,
        "--epochs",
        "2",
        "--filters",
        "10",
        "--batch-size",
        "4",
        "--seed",
        "3",
        "--lambda",
        "5e-4",
        "--dropout",
        "0.25",
    ]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    assert_eq!(read(&fx.path("t.bin")), read(&fx.path("g.bin")));
    let report = std::fs::read_to_string(fx.path("g.bin.report.txt")).unwrap();
    assert!(report.contains("[winner]\nrun\t0"));
}

#[test]
fn eval_oracle_and_compare() {
    let fx = Fixture::new();
    let test = fx.p("test.txt");
    let o = cdrex(&["eval", "--test", &test, "--oracle"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "100.0 100.0 100.0");

    assert!(fx.train("a.bin", &[]).status.success());
    let b_run = fx.train("b.bin", &["--variant", "cnn", "--seed", "8"]);
    assert!(b_run.status.success(), "{}", String::from_utf8_lossy(&b_run.stderr));
    let (train, a, b, rep) = (fx.p("train.txt"), fx.p("a.bin"), fx.p("b.bin"), fx.p("eval.txt"));
    let o = cdrex(&[
        "eval",
        "--test",
        &test,
        "--train",
        &train,
        "--model-in",
        &a,
        "--compare",
        &b,
        "--report",
        &rep,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split(' ').count(), 3);
    assert!(lines[1].starts_with("p-value "));
    let report = std::fs::read_to_string(&rep).unwrap();
    assert!(report.contains("[bootstrap]"));
}

#[test]
fn eval_empty_predictions_score_zero() {
    let fx = Fixture::new();
    assert!(fx.train("m.bin", &[]).status.success());
    let mut mp = ModelParams::load(&fx.path("m.bin")).unwrap();
    mp.params.get_mut(mp.model.out_weights).data_mut().fill(0.0);
    mp.params
        .get_mut(mp.model.out_bias)
        .data_mut()
        .copy_from_slice(&[50.0, -50.0]);
    mp.save(&fx.path("never.bin")).unwrap();
    let docs = two_pattern_corpus(4, 1);
    let no_relations: Vec<_> = docs
        .into_iter()
        .map(|mut d| {
            d.gold_cid.clear();
            d
        })
        .collect();
    std::fs::write(fx.path("norel.txt"), to_pubtator(&no_relations, true)).unwrap();
    let (test, train, model) = (fx.p("test.txt"), fx.p("norel.txt"), fx.p("never.bin"));
    let o = cdrex(&["eval", "--test", &test, "--train", &train, "--model-in", &model]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "0.0 0.0 0.0");
}

#[test]
fn predict_on_unlabeled_corpus() {
    let fx = Fixture::new();
    assert!(fx.train("m.bin", &[]).status.success());
    let (test, model) = (fx.p("unlabeled.txt"), fx.p("m.bin"));
    let o = cdrex(&["predict", "--test", &test, "--model-in", &model]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for line in stdout(&o).lines() {
        assert_eq!(line.split('\t').nth(1), Some("CID"));
    }
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    let missing_emb = fx.train("m.bin", &["--emb", "/nonexistent/vectors.txt"]);
    assert_eq!(missing_emb.status.code(), Some(2));

    assert_eq!(cdrex(&["train", "--no-such-flag"]).status.code(), Some(2));

    std::fs::write(fx.path("bad.toml"), "learning_rate = 3\n").unwrap();
    let cfg = fx.p("bad.toml");
    assert_eq!(cdrex(&["train", "--config", &cfg]).status.code(), Some(2));

    std::fs::write(
        fx.path("broken.txt"),
        "123|t|Title\n123|a|Text\n123\t5\t2\tx\tChemical\tC1\n\n",
    )
    .unwrap();
    let broken = fx.train("m.bin", &["--dev", &fx.p("broken.txt")]);
    assert_eq!(
        broken.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&broken.stderr)
    );

    std::fs::write(fx.path("junk.bin"), b"NOTAMODEL").unwrap();
    let (test, train, junk) = (fx.p("test.txt"), fx.p("train.txt"), fx.p("junk.bin"));
    let o = cdrex(&["eval", "--test", &test, "--train", &train, "--model-in", &junk]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));

    assert!(fx.train("m.bin", &[]).status.success());
    std::fs::write(
        fx.path("foreign.txt"),
        "9|t|Zzz qqq\n9|a|Xyl wvb kkj\n9\t8\t11\tXyl\tChemical\tC9\n9\t16\t19\tkkj\tDisease\tD9\n\n",
    )
    .unwrap();
    let (foreign, model) = (fx.p("foreign.txt"), fx.p("m.bin"));
    let o = cdrex(&["eval", "--test", &foreign, "--train", &train, "--model-in", &model]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_every_flag() {
    let o = cdrex(&["train", "--help"]);
    assert!(o.status.success());
    let help = stdout(&o);
    for flag in [
        "--config",
        "--train",
        "--dev",
        "--test",
        "--emb",
        "--model-in",
        "--model-out",
        "--report",
        "--variant",
        "--lambda",
        "--filters",
        "--dropout",
        "--epochs",
        "--batch-size",
        "--seed",
        "--debug-numerics",
        "--compare",
        "--oracle",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn gradcheck_command() {
    let o = cdrex(&["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    let value: f64 = line
        .strip_prefix("max relative error ")
        .and_then(|s| s.split(' ').next())
        .and_then(|s| s.parse().ok())
        .expect("max error line");
    assert!(value < 1e-4);
}
