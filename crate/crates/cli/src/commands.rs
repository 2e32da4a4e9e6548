use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fakescope_core::batch::assemble_batch;
use fakescope_core::data::{build_index, DatasetIndex, FileStore, Label, LabeledRoot, SampleRecord, Split};
use fakescope_core::evalbench::{self, render_report, render_timing, BenchConfig, TimingReport, REPORT_FORMAT_VERSION};
use fakescope_core::metrics::{metrics_report, roc_curve};
use fakescope_core::spectral::{amplitude_phase, fft2, to_gray8, RealGrid, LUMA_WEIGHTS};
use fakescope_core::training::{
    checkpoint_model_config, fit, load_checkpoint, save_checkpoint, DataContext, EpochRecord, TrainHooks,
    TrainingState,
};
use fakescope_core::{ModelConfig, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::{ModelKind, RunConfig};
use crate::{BenchArgs, Cli, Command, EvaluateArgs, Format, IndexArgs, InferArgs, SpectraArgs, TrainArgs};

/// Runs the command; `Ok(false)` means some items failed.
pub fn run(cli: &Cli) -> Result<bool> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Train(a) => {
            if let Some(k) = a.model {
                cfg.model.kind = k;
            }
            if let Some(b) = a.backbone {
                cfg.model.backbone = b;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if a.no_pretrained {
                cfg.model.pretrained = Some(false);
            }
            // Without explicit architecture flags a resumed run takes the
            // checkpoint's; explicit flags must then match it.
            if let (Some(r), None, None) = (&a.resume, a.model, a.backbone) {
                adopt_checkpoint_model(&mut cfg, r)?;
            }
        }
        Command::Evaluate(EvaluateArgs { checkpoint, threshold, .. }) | Command::Infer(InferArgs { checkpoint, threshold, .. }) => {
            adopt_checkpoint_model(&mut cfg, checkpoint)?;
            if let Some(t) = threshold {
                cfg.train.threshold = *t;
            }
        }
        Command::Bench(a) => {
            adopt_checkpoint_model(&mut cfg, &a.checkpoint[0])?;
            if let Some(n) = a.n_files {
                cfg.bench.n_files = n;
            }
            if let Some(b) = a.batch_size {
                cfg.bench.batch_size = b;
            }
            if let Some(w) = a.warmup {
                cfg.bench.warmup_batches = w;
            }
        }
        Command::Index(_) | Command::ExtractSpectra(_) => {}
    }
    cfg.resolve();

    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let snapshot = cli.out.join(format!("config.{}.toml", command_name(&cli.command)));
    fs::write(&snapshot, cfg.to_toml()?).with_context(|| format!("writing {}", snapshot.display()))?;

    match &cli.command {
        Command::Index(a) => cmd_index(cli, &cfg, a),
        Command::Train(a) => cmd_train(cli, &cfg, a),
        Command::Evaluate(a) => cmd_evaluate(cli, &cfg, a),
        Command::Bench(a) => cmd_bench(cli, &cfg, a),
        Command::Infer(a) => cmd_infer(cli, &cfg, a),
        Command::ExtractSpectra(a) => cmd_extract_spectra(cli, a),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Index(_) => "index",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Bench(_) => "bench",
        Command::Infer(_) => "infer",
        Command::ExtractSpectra(_) => "extract-spectra",
    }
}

/// Makes the config describe the checkpoint's architecture so derived
/// settings (input size) follow the trained model.
fn adopt_checkpoint_model(cfg: &mut RunConfig, path: &Path) -> Result<()> {
    let m = checkpoint_model_config(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    cfg.model.backbone = m.backbone;
    cfg.model.kind = if m.is_hybrid() { ModelKind::Hybrid } else { ModelKind::Plain };
    cfg.model.dropout_rate = Some(m.dropout_rate);
    if let Some(fb) = m.freq_branch {
        cfg.model.freq_feature_dim = fb.feature_dim;
    }
    Ok(())
}

fn subdir(out: &Path, name: &str) -> Result<PathBuf> {
    let dir = out.join(name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn index_path(cli: &Cli, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cli.out.join("index.txt"))
}

fn load_index(path: &Path) -> Result<DatasetIndex> {
    DatasetIndex::load(path).with_context(|| format!("loading index {}", path.display()))
}

fn cmd_index(cli: &Cli, cfg: &RunConfig, a: &IndexArgs) -> Result<bool> {
    let mut roots: Vec<LabeledRoot> = a.roots.iter().flat_map(LabeledRoot::corpus).collect();
    roots.extend(a.real.iter().map(|p| LabeledRoot { path: p.clone(), label: Label::Real }));
    roots.extend(a.fake.iter().map(|p| LabeledRoot { path: p.clone(), label: Label::Fake }));
    if roots.is_empty() {
        bail!("no roots given (pass corpus roots or --real/--fake folders)");
    }
    let (index, report) = build_index(&roots, &cfg.data.split)?;
    let path = cli.out.join("index.txt");
    index.save(&path)?;
    let report_path = subdir(&cli.out, "reports")?.join("index_report.json");
    write_json(&report_path, &json!({ "format_version": REPORT_FORMAT_VERSION, "report": report }))?;

    match cli.format {
        Format::Text => {
            println!("{:<6} {:>8} {:>8}", "split", "real", "fake");
            for (name, c) in [("train", report.train), ("val", report.val), ("test", report.test)] {
                println!("{name:<6} {:>8} {:>8}", c.real, c.fake);
            }
            println!("excluded {} undecodable file(s); index written to {}", report.exclusions.len(), path.display());
            for e in &report.exclusions {
                println!("  excluded {}: {}", e.path.display(), e.reason);
            }
        }
        _ => println!("{}", serde_json::to_string(&report)?),
    }
    Ok(true)
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    format_version: u32,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

fn write_history(path: &Path, records: &[EpochRecord], append: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for r in records {
        let line = serde_json::to_string(&HistoryLine { format_version: REPORT_FORMAT_VERSION, record: r })?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn cmd_train(cli: &Cli, cfg: &RunConfig, a: &TrainArgs) -> Result<bool> {
    let index = load_index(&index_path(cli, &a.index))?;
    let model_cfg = cfg.model();
    let train_cfg: TrainConfig = cfg.train();
    let mut state = match &a.resume {
        Some(path) => {
            let st = load_checkpoint(path, Some(&model_cfg))
                .with_context(|| format!("resuming from {}", path.display()))?;
            log::info!("resumed at epoch {} (step {})", st.epoch, st.global_step);
            st
        }
        None => TrainingState::new(&model_cfg, &train_cfg)?,
    };
    let checkpoints = subdir(&cli.out, "checkpoints")?;
    let history = cli.out.join("history.jsonl");
    write_history(&history, &state.history, false)?;

    let preprocess = cfg.preprocess();
    let data = DataContext {
        index: &index,
        store: &FileStore,
        preprocess: &preprocess,
        epoch_spec: &cfg.epoch,
        threshold: cfg.train.threshold,
    };
    let mut best = state
        .history
        .iter()
        .map(|h| h.val_loss.unwrap_or(h.train_loss))
        .min_by(f64::total_cmp);
    fit(&mut state, &data, cfg.train.epochs, &TrainHooks::default(), |st, rec| {
        save_checkpoint(st, &checkpoints.join("last.ckpt"))?;
        let monitored = rec.val_loss.unwrap_or(rec.train_loss);
        if best.is_none_or(|b| monitored < b) {
            best = Some(monitored);
            save_checkpoint(st, &checkpoints.join("best.ckpt"))?;
        }
        write_history(&history, std::slice::from_ref(rec), true).map_err(|e| {
            fakescope_core::Error::Config(format!("history: {e:#}"))
        })?;
        match cli.format {
            Format::Text => println!(
                "epoch {:>3}  train_loss {:.5}  val_loss {}  lr {:.2e}",
                rec.epoch,
                rec.train_loss,
                rec.val_loss.map_or("-".to_string(), |v| format!("{v:.5}")),
                rec.lr
            ),
            _ => println!("{}", serde_json::to_string(rec).unwrap_or_default()),
        }
        Ok(())
    })?;
    if state.history.is_empty() {
        save_checkpoint(&state, &checkpoints.join("last.ckpt"))?;
    }
    Ok(true)
}

fn split_or_all(index: &DatasetIndex, split: Split) -> Vec<&SampleRecord> {
    let recs = index.split_records(split);
    if recs.is_empty() {
        log::warn!("split '{split}' is empty; using every indexed record");
        index.records().iter().collect()
    } else {
        recs
    }
}

fn cmd_evaluate(cli: &Cli, cfg: &RunConfig, a: &EvaluateArgs) -> Result<bool> {
    let state = load_checkpoint(&a.checkpoint, None)?;
    let index = load_index(&index_path(cli, &a.index))?;
    let records = index.split_records(a.split);
    if records.is_empty() {
        bail!("split '{}' of the index is empty", a.split);
    }
    let preprocess = cfg.preprocess();
    let (scores, labels) =
        evalbench::evaluate(&state.model, &records, &FileStore, &preprocess, cfg.train.eval_batch_size)?;
    let report = metrics_report(&scores, &labels, cfg.train.threshold)?;
    let roc = roc_curve(&scores, &labels)?;

    let reports = subdir(&cli.out, "reports")?;
    fs::write(reports.join("roc.csv"), roc.to_csv()).context("writing roc.csv")?;
    let name = model_name(&a.checkpoint, state.model.config());
    let rendered = render_report(&[(name, report.clone())])?;
    write_json(
        &reports.join("metrics.json"),
        &json!({
            "format_version": REPORT_FORMAT_VERSION,
            "checkpoint": a.checkpoint,
            "split": a.split,
            "report": report,
            "table": rendered.document,
        }),
    )?;
    match cli.format {
        Format::Text => print!("{}", rendered.table),
        _ => println!("{}", serde_json::to_string(&report)?),
    }
    Ok(true)
}

fn model_name(path: &Path, cfg: &ModelConfig) -> String {
    let stem = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let kind = if cfg.is_hybrid() { "hybrid" } else { "plain" };
    format!("{stem} ({} {kind})", cfg.backbone)
}

fn cmd_bench(cli: &Cli, cfg: &RunConfig, a: &BenchArgs) -> Result<bool> {
    let index = load_index(&index_path(cli, &a.index))?;
    let records = split_or_all(&index, a.split);
    if records.is_empty() {
        bail!("index has no records");
    }
    let runs = a.runs.max(1);
    let mut rows: Vec<(String, TimingReport)> = Vec::new();
    for path in &a.checkpoint {
        let state = load_checkpoint(path, None)?;
        let model_cfg = state.model.config();
        let mut preprocess = cfg.preprocess();
        if cfg.preprocess.target_size.is_none() || model_cfg.backbone != cfg.model.backbone {
            preprocess.target_size = model_cfg.backbone.resolution();
        }
        let bench = BenchConfig {
            n_files: cfg.bench.n_files,
            batch_size: cfg.bench.batch_size,
            warmup_batches: cfg.bench.warmup_batches,
            preprocess,
        };
        let mut reports: Vec<TimingReport> = (0..runs)
            .map(|_| evalbench::bench_timing(&state.model, &records, &FileStore, &bench))
            .collect::<fakescope_core::Result<_>>()?;
        reports.sort_by(|x, y| x.total_seconds.total_cmp(&y.total_seconds));
        rows.push((model_name(path, model_cfg), reports.swap_remove(runs / 2)));
    }
    let doc = json!({
        "format_version": REPORT_FORMAT_VERSION,
        "runs_per_model": runs,
        "rows": rows.iter().map(|(n, t)| json!({ "name": n, "timing": t })).collect::<Vec<_>>(),
    });
    write_json(&subdir(&cli.out, "reports")?.join("timing.json"), &doc)?;
    match cli.format {
        Format::Text => print!("{}", render_timing(&rows)),
        _ => println!("{}", serde_json::to_string(&doc)?),
    }
    Ok(true)
}

fn cmd_infer(cli: &Cli, cfg: &RunConfig, a: &InferArgs) -> Result<bool> {
    let state = load_checkpoint(&a.checkpoint, None)?;
    let preprocess = cfg.preprocess();
    let threshold = cfg.train.threshold;
    let mut all_ok = true;
    for path in &a.images {
        let record = SampleRecord {
            id: path.display().to_string(),
            path: path.clone(),
            label: Label::Real,
            split: Split::Test,
        };
        let prob = assemble_batch(&[&record], &FileStore, &preprocess, false, |_| 0, state.model.is_hybrid())
            .and_then(|b| state.model.predict_proba(&b.input))
            .map(|p| p[0]);
        match (prob, cli.format) {
            (Ok(p), Format::Text) => {
                let verdict = if p >= threshold { "real" } else { "fake" };
                println!("{}\t{p:.6}\t{verdict}", path.display());
            }
            (Ok(p), _) => {
                let verdict = if p >= threshold { "real" } else { "fake" };
                println!(
                    "{}",
                    json!({ "path": path, "probability_real": p, "verdict": verdict, "threshold": threshold })
                );
            }
            (Err(e), Format::Text) => {
                all_ok = false;
                println!("{}\terror\t{e}", path.display());
            }
            (Err(e), _) => {
                all_ok = false;
                println!("{}", json!({ "path": path, "error": e.to_string() }));
            }
        }
    }
    Ok(all_ok)
}

fn native_luminance(img: &image::DynamicImage) -> RealGrid {
    let rgb = img.to_rgb8();
    RealGrid::from_fn(rgb.height() as usize, rgb.width() as usize, |r, c| {
        let px = rgb.get_pixel(c as u32, r as u32).0;
        (0..3).map(|k| LUMA_WEIGHTS[k] * px[k] as f64 / 255.0).sum()
    })
}

fn cmd_extract_spectra(cli: &Cli, a: &SpectraArgs) -> Result<bool> {
    let dir = subdir(&cli.out, "spectra")?;
    let mut used = BTreeSet::new();
    let mut entries = Vec::new();
    let mut all_ok = true;
    for path in &a.images {
        let result = (|| -> Result<(PathBuf, PathBuf)> {
            let img = image::open(path).with_context(|| format!("decoding {}", path.display()))?;
            let feats = amplitude_phase(&fft2(&native_luminance(&img))?)?;
            let base = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let mut stem = base.clone();
            let mut n = 1;
            while !used.insert(stem.clone()) {
                stem = format!("{base}_{n}");
                n += 1;
            }
            let amp = dir.join(format!("{stem}_log_amplitude.png"));
            let phase = dir.join(format!("{stem}_phase.png"));
            to_gray8(&feats.log_amplitude).save(&amp)?;
            to_gray8(&feats.phase).save(&phase)?;
            Ok((amp, phase))
        })();
        match result {
            Ok((amp, phase)) => {
                match cli.format {
                    Format::Text => println!("{}\t{}\t{}", path.display(), amp.display(), phase.display()),
                    _ => println!("{}", json!({ "path": path, "log_amplitude": amp, "phase": phase })),
                }
                entries.push(json!({ "source": path, "log_amplitude": amp, "phase": phase }));
            }
            Err(e) => {
                all_ok = false;
                match cli.format {
                    Format::Text => println!("{}\terror\t{e:#}", path.display()),
                    _ => println!("{}", json!({ "path": path, "error": format!("{e:#}") })),
                }
            }
        }
    }
    write_json(
        &dir.join("manifest.json"),
        &json!({ "format_version": REPORT_FORMAT_VERSION, "layout": "centered (DC at H/2, W/2)", "entries": entries }),
    )?;
    Ok(all_ok)
}
