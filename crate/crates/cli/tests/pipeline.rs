use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use volseg::data::{DatasetIndex, SynthSpec};
use volseg::optim::poly_lr;
use volseg_cli::config::{DatasetConfig, TrainConfig};
use volseg_cli::evaluate::evaluate_dirs;
use volseg_cli::io::read_label;
use volseg_cli::synth::cmd_synth;
use volseg_cli::train::{cmd_train, TrainReport};

fn volseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = volseg(args);
    assert!(out.status.success(), "volseg {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path to contents, recursively.
fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

struct Trained {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    report: TrainReport,
}

/// One small training run shared by the tests below.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let spec = SynthSpec { extents: [20, 24, 16], ..SynthSpec::default() };
        cmd_synth(&data, 6, &spec, 4).unwrap();
        let run = tmp.path().join("run");
        let mut cfg = TrainConfig {
            seed: 5,
            checkpoint_every: 2,
            run_dir: run.clone(),
            dataset: DatasetConfig { path: data.clone(), format: Default::default() },
            ..TrainConfig::default()
        };
        cfg.model.init_filters = 8;
        cfg.model.input_crop = [16, 16, 16];
        cfg.schedule.total_epochs = 3;
        cfg.schedule.alpha0 = 1e-3;
        let report = cmd_train(cfg, None).unwrap();
        Trained { _tmp: tmp, data, run, report }
    })
}

#[test]
fn synth_is_deterministic_and_indexed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["--seed", "9", "synth", "--out", s(dir), "--cases", "3", "--size", "16x20x18"]);
    }
    assert_eq!(files(&a), files(&b));
    let index = DatasetIndex::read(&a).unwrap();
    assert_eq!(index.cases, ["case_0000", "case_0001", "case_0002"]);
    ok(&["--seed", "10", "synth", "--out", s(&b), "--cases", "3", "--size", "16x20x18"]);
    assert_ne!(files(&a), files(&b));
}

#[test]
fn run_directory_layout() {
    let t = trained();
    for f in ["config.toml", "train.log", "report.json", "checkpoints/final.ckpt", "checkpoints/epoch_0002.ckpt"] {
        assert!(t.run.join(f).exists(), "{f}");
    }
    assert!(!t.run.join("checkpoints/epoch_0003.ckpt").exists());
    let echoed = TrainConfig::parse(&fs::read_to_string(t.run.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.schedule.total_epochs, 3);
    assert_eq!(t.report.epochs.len(), 3);
}

fn fields(line: &str) -> BTreeMap<&str, &str> {
    line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect()
}

#[test]
fn logged_learning_rate_follows_the_schedule() {
    let t = trained();
    let log = fs::read_to_string(t.run.join("train.log")).unwrap();
    let cfg = TrainConfig::parse(&fs::read_to_string(t.run.join("config.toml")).unwrap()).unwrap();
    let epochs: Vec<_> = log.lines().map(fields).filter(|f| f.get("event") == Some(&"epoch")).collect();
    assert_eq!(epochs.len(), 3);
    for (e, f) in epochs.iter().enumerate() {
        let lr: f64 = f["lr"].parse().unwrap();
        assert_eq!(lr, poly_lr(e, &cfg.schedule).unwrap());
        assert_eq!(f["epoch"], e.to_string());
    }
}

#[test]
fn every_training_case_is_sampled_once_per_epoch() {
    let t = trained();
    let log = fs::read_to_string(t.run.join("train.log")).unwrap();
    let mut seen: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for f in log.lines().map(fields).filter(|f| f.get("event") == Some(&"sample")) {
        seen.entry(f["epoch"].parse().unwrap()).or_default().push(f["case"].to_string());
    }
    let mut train = t.report.split.train.clone();
    train.sort();
    assert_eq!(seen.len(), 3);
    for (_, mut ids) in seen {
        ids.sort();
        assert_eq!(ids, train);
    }
    let mut all: Vec<_> = t.report.split.train.iter().chain(&t.report.split.validation).cloned().collect();
    all.sort();
    assert_eq!(all, DatasetIndex::read(&t.data).unwrap().cases);
}

#[test]
fn infer_then_evaluate() {
    let t = trained();
    let ckpt = t.report.final_checkpoint.clone();
    let tmp = tempfile::tempdir().unwrap();
    let (one, two) = (tmp.path().join("one"), tmp.path().join("two"));
    ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&t.data), "--out", s(&one)]);
    ok(&["infer", "--checkpoint", s(&ckpt), "--checkpoint", s(&ckpt), "--input", s(&t.data), "--out", s(&two), "--format", "nifti"]);
    let ids = DatasetIndex::read(&t.data).unwrap().cases;
    assert_eq!(DatasetIndex::read(&one).unwrap().cases, ids);
    for id in &ids {
        let (a, b) = (read_label(&one, id).unwrap(), read_label(&two, id).unwrap());
        assert_eq!(a.data, b.data, "self-ensemble changed {id}");
        assert_eq!(a.extents, [20, 24, 16]);
    }

    let csv = tmp.path().join("eval.csv");
    ok(&["evaluate", "--pred", s(&one), "--truth", s(&t.data), "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * ids.len() + 2 * 3);
    assert!(text.lines().any(|l| l.starts_with("<mean>,WT")));

    let json = tmp.path().join("eval.json");
    ok(&["evaluate", "--pred", s(&t.data), "--truth", s(&t.data), "--out", s(&json)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    for row in report["rows"].as_array().unwrap() {
        assert_eq!(row["dice"], 1.0);
        assert_eq!(row["hausdorff95_mm"], 0.0);
        assert_eq!(row["sensitivity"], 1.0);
    }
}

#[test]
fn evaluate_reports_unmatched_ids() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let pred = tmp.path().join("pred");
    let ckpt = t.report.final_checkpoint.clone();
    ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&t.data.join("case_0001")), "--out", s(&pred)]);
    let err = evaluate_dirs(&pred, &t.data).unwrap_err();
    assert_eq!(err.category(), "argument");
    assert!(err.to_string().contains("case_0000"), "{err}");
}

#[test]
fn export_slices_writes_ppm() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("axial.ppm");
    let case = t.data.join("case_0002");
    ok(&["export-slices", "--case", s(&case), "--pred", s(&case.join("label.json")), "--axis", "axial", "--index", "8", "--out", s(&out)]);
    let bytes = fs::read(&out).unwrap();
    let header = b"P6\n24 20\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 24 * 20 * 3);
}

#[test]
fn errors_are_json_with_category_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nbogus = 2\n").unwrap();
    let out = volseg(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    let line: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"]["category"], "config");

    let out = volseg(&["evaluate", "--pred", s(&tmp.path().join("none")), "--truth", s(tmp.path()), "--out", "x.csv"]);
    assert!(!out.status.success());
    let out = volseg(&["synth", "--out", s(tmp.path()), "--size", "4x4"]);
    assert_eq!(out.status.code(), Some(2));
}
