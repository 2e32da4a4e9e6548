use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fakescope_core::data::{DatasetIndex, Label, SampleRecord, Split};
use fakescope_core::toy::write_toy_corpus;
use image::{GrayImage, Rgb, RgbImage};
use tempfile::TempDir;

fn fakescope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fakescope"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY_CONFIG: &str = r#"
[data.split]
kind = "stratified"
val_fraction = 0.15
test_fraction = 0.25
seed = 0

[epoch]
images_per_epoch = 32
batch_size = 8

[preprocess]
target_size = 32

[model]
backbone = "tiny_test"

[train]
epochs = 4
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// A toy corpus, a config file and an index under `out/`.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_toy_corpus(&dir.path().join("corpus"), 24, 24, 1).unwrap();
        fs::write(dir.path().join("run.toml"), TOY_CONFIG).unwrap();
        let ws = Self { dir };
        let o = fakescope(&["--config", s(&ws.config()), "--out", s(&ws.out()), "index", s(&ws.corpus())]);
        assert!(o.status.success(), "{}", stderr(&o));
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn corpus(&self) -> PathBuf {
        self.path("corpus")
    }

    fn config(&self) -> PathBuf {
        self.path("run.toml")
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    fn index(&self) -> PathBuf {
        self.out().join("index.txt")
    }

    fn train(&self, out: &Path, extra: &[&str]) -> Output {
        let (config, index) = (self.config(), self.index());
        let mut args = vec![
            "--config",
            s(&config),
            "--out",
            s(out),
            "train",
            "--index",
            s(&index),
            "--model",
            "plain",
            "--backbone",
            "tiny_test",
        ];
        args.extend_from_slice(extra);
        fakescope(&args)
    }

    fn trained(&self) -> PathBuf {
        let out = self.path("trained");
        let o = self.train(&out, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
        out.join("checkpoints/best.ckpt")
    }
}

#[test]
fn index_prints_counts_and_lists_undecodable_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    write_toy_corpus(&corpus, 10, 16, 0).unwrap();
    for i in 0..5 {
        fs::write(corpus.join(format!("fake/broken{i}.png")), b"garbage").unwrap();
    }
    let out = dir.path().join("out");
    let o = fakescope(&["--out", s(&out), "index", s(&corpus)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("train") && text.contains("excluded 5"), "{text}");

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("reports/index_report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["exclusions"].as_array().unwrap().len(), 5);
    assert_eq!(report["format_version"], 1);
    let index = DatasetIndex::load(&out.join("index.txt")).unwrap();
    assert_eq!(index.len(), 20);
    assert!(out.join("config.index.toml").exists());
}

#[test]
fn missing_root_fails_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = fakescope(&["--out", s(&dir.path().join("out")), "index", s(&missing)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn train_writes_checkpoints_history_and_config() {
    let ws = Workspace::new();
    let out = ws.path("run");
    let o = ws.train(&out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("checkpoints/best.ckpt").exists());
    assert!(out.join("checkpoints/last.ckpt").exists());

    let snapshot = fs::read_to_string(out.join("config.train.toml")).unwrap();
    assert!(snapshot.contains("tiny_test") && snapshot.contains("format_version = 1"));

    let history: Vec<serde_json::Value> = fs::read_to_string(out.join("history.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(history.len(), 4);
    assert!(history.iter().all(|h| h["format_version"] == 1));
    let first = history[0]["train_loss"].as_f64().unwrap();
    let last = history[3]["train_loss"].as_f64().unwrap();
    assert!(last < first, "train loss {first} -> {last}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ws = Workspace::new();
    let full = ws.path("full");
    assert!(ws.train(&full, &[]).status.success());

    let part = ws.path("part");
    assert!(ws.train(&part, &["--epochs", "2"]).status.success());
    let resumed = ws.path("resumed");
    let ckpt = part.join("checkpoints/last.ckpt");
    let o = ws.train(&resumed, &["--resume", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let a = fs::read(full.join("checkpoints/last.ckpt")).unwrap();
    let b = fs::read(resumed.join("checkpoints/last.ckpt")).unwrap();
    assert!(a == b, "final checkpoints differ");
    let history = fs::read_to_string(resumed.join("history.jsonl")).unwrap();
    assert_eq!(history, fs::read_to_string(full.join("history.jsonl")).unwrap());
}

#[test]
fn same_seed_same_artifacts() {
    let ws = Workspace::new();
    let run = |name: &str, seed: &str| {
        let out = ws.path(name);
        assert!(ws.train(&out, &["--epochs", "1", "--seed", seed]).status.success());
        fs::read(out.join("checkpoints/last.ckpt")).unwrap()
    };
    assert!(run("a", "7") == run("b", "7"));
    assert!(run("c", "7") != run("d", "8"));
}

#[test]
fn unknown_backbone_is_a_usage_error() {
    let o = fakescope(&["train", "--backbone", "b7"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("b6, b3, b0, tiny_test"), "{err}");
}

#[test]
fn resume_checks_the_architecture() {
    let ws = Workspace::new();
    let ckpt = ws.trained();
    let resume = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "--config".to_string(),
            s(&ws.config()).into(),
            "--out".into(),
            s(&ws.path(out)).into(),
            "train".into(),
            "--index".into(),
            s(&ws.index()).into(),
            "--resume".into(),
            s(&ckpt).into(),
        ];
        args.extend(extra.iter().map(|x| x.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        fakescope(&refs)
    };
    let o = resume("adopt", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = resume("clash", &["--model", "hybrid"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("checkpoint has"), "{}", stderr(&o));
}

fn read_roc(path: &Path) -> Vec<(f64, f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[1], v[2])
        })
        .collect()
}

fn metrics(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("reports/metrics.json")).unwrap()).unwrap()
}

#[test]
fn evaluate_reports_all_metrics_and_thresholds_recount() {
    let ws = Workspace::new();
    let ckpt = ws.trained();
    let eval = |out: &str, threshold: &str| {
        let out = ws.path(out);
        let o = fakescope(&[
            "--config",
            s(&ws.config()),
            "--out",
            s(&out),
            "evaluate",
            "--checkpoint",
            s(&ckpt),
            "--index",
            s(&ws.index()),
            "--threshold",
            threshold,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).lines().next().unwrap().split_whitespace().eq(["Model", "AUC", "ACC", "F1", "P", "R"]));
        out
    };
    for (name, t) in [("e5", 0.5), ("e7", 0.7)] {
        let out = eval(name, &t.to_string());
        let m = metrics(&out);
        assert_eq!(m["format_version"], 1);
        let r = &m["report"];
        for key in ["auc", "accuracy", "f1", "precision", "recall"] {
            assert!(r[key].is_f64(), "{key} missing");
        }
        assert_eq!(r["threshold"].as_f64().unwrap(), t);

        // Counts at t, read independently off the ROC curve: the last point
        // whose threshold is still >= t.
        let c = &r["counts"];
        let count = |k: &str| c[k].as_u64().unwrap() as f64;
        let (pos, neg) = (count("tp") + count("fn"), count("fp") + count("tn"));
        let roc = read_roc(&out.join("reports/roc.csv"));
        let (fpr, tpr, _) = roc.iter().copied().rfind(|p| p.2 >= t).unwrap();
        assert_eq!((tpr * pos).round(), count("tp"));
        assert_eq!((fpr * neg).round(), count("fp"));
    }
}

#[test]
fn single_class_split_has_undefined_auc() {
    let ws = Workspace::new();
    let ckpt = ws.trained();
    let index = DatasetIndex::load(&ws.index()).unwrap();
    let only_real: Vec<SampleRecord> = index
        .records()
        .iter()
        .filter(|r| r.label == Label::Real)
        .map(|r| SampleRecord { split: Split::Test, ..r.clone() })
        .collect();
    let path = ws.path("real_only.txt");
    DatasetIndex::new(only_real).unwrap().save(&path).unwrap();
    let o = fakescope(&[
        "--config",
        s(&ws.config()),
        "--out",
        s(&ws.path("ev")),
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--index",
        s(&path),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("AUC undefined"), "{}", stderr(&o));
}

#[test]
fn bench_compares_two_models_side_by_side() {
    let ws = Workspace::new();
    let plain = ws.trained();
    let hybrid_out = ws.path("hybrid");
    let o = fakescope(&[
        "--config",
        s(&ws.config()),
        "--out",
        s(&hybrid_out),
        "train",
        "--index",
        s(&ws.index()),
        "--model",
        "hybrid",
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = ws.path("bench");
    let o = fakescope(&[
        "--config",
        s(&ws.config()),
        "--out",
        s(&out),
        "bench",
        "--checkpoint",
        s(&plain),
        "--checkpoint",
        s(&hybrid_out.join("checkpoints/last.ckpt")),
        "--index",
        s(&ws.index()),
        "--n-files",
        "48",
        "--batch-size",
        "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.contains("plain") && table.contains("hybrid"));
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("reports/timing.json")).unwrap()).unwrap();
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["timing"]["n_files"], 48);
        assert_eq!(r["timing"]["warmup_batches"], 2);
    }
}

#[test]
fn infer_scores_each_image_and_flags_failures() {
    let ws = Workspace::new();
    let ckpt = ws.trained();
    let img = ws.corpus().join("real/00000.png");
    let bad = ws.path("bad.png");
    fs::write(&bad, b"not an image").unwrap();
    let (config, out) = (ws.config(), ws.path("inf"));
    let base = ["--config", s(&config), "--out", s(&out)];

    let mut args = base.to_vec();
    args.extend(["infer", "--checkpoint", s(&ckpt), s(&img)]);
    let o = fakescope(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 1);
    let p: f64 = lines[0].split('\t').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let mut args = base.to_vec();
    args.extend(["--format", "records", "infer", "--checkpoint", s(&ckpt), s(&img), s(&bad), s(&img)]);
    let o = fakescope(&args);
    assert!(!o.status.success());
    let recs: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 3);
    assert!(recs[1]["error"].is_string());
    assert_eq!(recs[0]["probability_real"], recs[2]["probability_real"]);
    assert!(["real", "fake"].contains(&recs[0]["verdict"].as_str().unwrap()));
}

fn gray(path: &Path) -> GrayImage {
    image::open(path).unwrap().to_luma8()
}

#[test]
fn spectra_are_written_at_native_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (20u32, 12u32);
    let textured = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 13 % 256) as u8, (y * 29 % 256) as u8, ((x * y) % 256) as u8]));
    let shifted = RgbImage::from_fn(w, h, |x, y| *textured.get_pixel((x + 7) % w, (y + 3) % h));
    let flat = RgbImage::from_pixel(w, h, Rgb([120, 120, 120]));
    for (name, img) in [("textured", &textured), ("shifted", &shifted), ("flat", &flat)] {
        img.save(dir.path().join(format!("{name}.png"))).unwrap();
    }
    let out = dir.path().join("out");
    let p = |n: &str| dir.path().join(format!("{n}.png"));
    let o = fakescope(&["--out", s(&out), "extract-spectra", s(&p("textured")), s(&p("shifted")), s(&p("flat"))]);
    assert!(o.status.success(), "{}", stderr(&o));

    let spectra = out.join("spectra");
    let amp = gray(&spectra.join("textured_log_amplitude.png"));
    assert_eq!(amp.dimensions(), (w, h));
    assert_eq!(gray(&spectra.join("textured_phase.png")).dimensions(), (w, h));
    assert_eq!(amp, gray(&spectra.join("shifted_log_amplitude.png")));

    let flat_amp = gray(&spectra.join("flat_log_amplitude.png"));
    for (x, y, px) in flat_amp.enumerate_pixels() {
        let expected = if (x, y) == (w / 2, h / 2) { 255 } else { 0 };
        assert_eq!(px.0[0], expected, "pixel ({x}, {y})");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(spectra.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 3);
}
