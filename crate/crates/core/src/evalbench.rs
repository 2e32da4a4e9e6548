//! Test-split evaluation, inference timing and report rendering.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::batch::{assemble_batch, infer_logits, sigmoid};
use crate::data::{ImageStore, PreprocessConfig, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::models::{ForwardMode, Model};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Sigmoid scores and labels for `records`, without augmentation.
pub fn evaluate(
    model: &Model,
    records: &[&SampleRecord],
    store: &dyn ImageStore,
    cfg: &PreprocessConfig,
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let logits = infer_logits(model, records, store, cfg, batch_size)?;
    let scores = logits.into_iter().map(sigmoid).collect();
    let labels = records.iter().map(|r| r.label.as_u8()).collect();
    Ok((scores, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub n_files: usize,
    /// Preprocessing plus forward time over the timed batches.
    pub total_seconds: f64,
    pub seconds_per_file: f64,
    pub preprocess_seconds: f64,
    pub forward_seconds: f64,
    pub batch_size: usize,
    pub warmup_batches: usize,
    pub hardware_descriptor: String,
}

/// Source of timestamps, in seconds.
pub trait Clock {
    fn now(&mut self) -> f64;
}

pub struct WallClock(Instant);

impl Default for WallClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn now(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n_files: usize,
    pub batch_size: usize,
    pub warmup_batches: usize,
    pub preprocess: PreprocessConfig,
}

impl BenchConfig {
    pub fn new(n_files: usize, batch_size: usize, preprocess: PreprocessConfig) -> Self {
        Self {
            n_files,
            batch_size,
            warmup_batches: 2,
            preprocess,
        }
    }
}

pub fn hardware_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{} cpu, {threads} threads, candle {} backend",
        std::env::consts::OS,
        std::env::consts::ARCH,
        if candle_core::utils::with_avx() { "avx" } else { "generic" }
    )
}

pub fn bench_timing(
    model: &Model,
    source: &[&SampleRecord],
    store: &dyn ImageStore,
    cfg: &BenchConfig,
) -> Result<TimingReport> {
    bench_timing_with_clock(model, source, store, cfg, &mut WallClock::default())
}

/// Times `cfg.n_files` files, cycling through `source`, after
/// `cfg.warmup_batches` untimed batches.
pub fn bench_timing_with_clock(
    model: &Model,
    source: &[&SampleRecord],
    store: &dyn ImageStore,
    cfg: &BenchConfig,
    clock: &mut dyn Clock,
) -> Result<TimingReport> {
    if source.is_empty() {
        return Err(Error::EmptyInput);
    }
    if cfg.batch_size == 0 || cfg.n_files < cfg.batch_size {
        return Err(Error::Config(format!(
            "n_files ({}) must be at least batch_size ({}) and batch_size positive",
            cfg.n_files, cfg.batch_size
        )));
    }
    let mode = ForwardMode::eval();
    let pick = |start: usize, len: usize| -> Vec<&SampleRecord> {
        (start..start + len).map(|i| source[i % source.len()]).collect()
    };
    let run = |records: &[&SampleRecord], clock: &mut dyn Clock| -> Result<(f64, f64)> {
        let t0 = clock.now();
        let batch = assemble_batch(records, store, &cfg.preprocess, false, |_| 0, model.is_hybrid())?;
        let t1 = clock.now();
        let logits = model.forward(&batch.input, &mode)?;
        logits.flatten_all()?.to_vec1::<f32>()?;
        let t2 = clock.now();
        Ok((t1 - t0, t2 - t1))
    };
    for w in 0..cfg.warmup_batches {
        run(&pick(w * cfg.batch_size, cfg.batch_size), clock)?;
    }
    let (mut pre, mut fwd) = (0.0, 0.0);
    let mut done = 0;
    while done < cfg.n_files {
        let len = cfg.batch_size.min(cfg.n_files - done);
        let (p, f) = run(&pick(done, len), clock)?;
        pre += p;
        fwd += f;
        done += len;
    }
    let total = pre + fwd;
    Ok(TimingReport {
        n_files: cfg.n_files,
        total_seconds: total,
        seconds_per_file: total / cfg.n_files as f64,
        preprocess_seconds: pre,
        forward_seconds: fwd,
        batch_size: cfg.batch_size,
        warmup_batches: cfg.warmup_batches,
        hardware_descriptor: hardware_descriptor(),
    })
}

/// Side-by-side timing table in the layout of an evaluation-time comparison.
pub fn render_timing(rows: &[(String, TimingReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>12}  {:>12}  {:>12}  {:>12}\n",
        "Model", "Files", "Total (s)", "Per file (s)", "Preproc (s)", "Forward (s)"
    );
    for (name, t) in rows {
        out += &format!(
            "{:<width$}  {:>8}  {:>12.4}  {:>12.6}  {:>12.4}  {:>12.4}\n",
            name, t.n_files, t.total_seconds, t.seconds_per_file, t.preprocess_seconds, t.forward_seconds
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub format_version: u32,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Column name to the names of the rows holding its best value.
    pub best: Vec<(String, Vec<String>)>,
    pub footnotes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub table: String,
    pub document: ReportDocument,
}

const COLUMNS: [&str; 5] = ["AUC", "ACC", "F1", "P", "R"];

fn column_values(m: &MetricsReport) -> [f64; 5] {
    [m.auc, m.accuracy, m.f1, m.precision, m.recall]
}

/// A plain-text table (columns AUC, ACC, F1, P, R) plus its structured form.
/// With two or more rows the best value in each column is starred.
pub fn render_report(reports: &[(String, MetricsReport)]) -> Result<RenderedReport> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mark = reports.len() > 1;
    let mut best_rows: Vec<(String, Vec<String>)> = Vec::new();
    let mut best_val = [f64::NEG_INFINITY; 5];
    for (_, m) in reports {
        for (b, v) in best_val.iter_mut().zip(column_values(m)) {
            *b = b.max(v);
        }
    }
    if mark {
        for (ci, col) in COLUMNS.iter().enumerate() {
            let names = reports
                .iter()
                .filter(|(_, m)| column_values(m)[ci] == best_val[ci])
                .map(|(n, _)| n.clone())
                .collect();
            best_rows.push((col.to_string(), names));
        }
    }

    let mut footnotes = Vec::new();
    for (name, m) in reports {
        if !m.degenerate.is_empty() {
            footnotes.push(format!(
                "{name}: zero denominator for {} (reported as 0)",
                m.degenerate.join(", ")
            ));
        }
    }

    let width = reports.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut table = format!("{:<width$}", "Model");
    for c in COLUMNS {
        table += &format!("  {c:>7}");
    }
    table.push('\n');
    for (ri, (name, m)) in reports.iter().enumerate() {
        table += &format!("{name:<width$}");
        for (ci, v) in column_values(m).into_iter().enumerate() {
            let star = if mark && v == best_val[ci] { "*" } else { " " };
            table += &format!("  {v:>6.4}{star}");
        }
        if !m.degenerate.is_empty() {
            table += &format!("  [{}]", ri + 1);
        }
        table.push('\n');
    }
    if mark {
        table += "* best in column\n";
    }
    for (i, f) in footnotes.iter().enumerate() {
        table += &format!("[{}] {f}\n", i + 1);
    }

    Ok(RenderedReport {
        table,
        document: ReportDocument {
            format_version: REPORT_FORMAT_VERSION,
            columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
            rows: reports
                .iter()
                .map(|(name, m)| ReportRow {
                    name: name.clone(),
                    metrics: m.clone(),
                })
                .collect(),
            best: best_rows,
            footnotes,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::metrics::metrics_report;
    use crate::models::{build_model, ModelConfig};
    use crate::toy::{toy_corpus, ToySpec};

    fn report(p_scores: &[f64], labels: &[u8]) -> MetricsReport {
        metrics_report(p_scores, labels, 0.5).unwrap()
    }

    struct Scripted {
        calls: usize,
        warmup_calls: usize,
    }

    // Warmup batches each take 100 s; timed batches take 1 s per phase.
    impl Clock for Scripted {
        fn now(&mut self) -> f64 {
            let i = self.calls;
            self.calls += 1;
            let warm = self.warmup_calls;
            if i < warm {
                (i as f64) * 100.0
            } else {
                (warm as f64) * 100.0 + (i - warm) as f64
            }
        }
    }

    #[test]
    fn warmup_batches_are_not_timed() {
        let (index, store) = toy_corpus(&ToySpec { train_per_class: 4, ..Default::default() }).unwrap();
        let recs = index.split_records(Split::Train);
        let model = build_model(&ModelConfig::tiny()).unwrap();
        let cfg = BenchConfig::new(8, 4, PreprocessConfig::with_size(32));
        let mut clock = Scripted { calls: 0, warmup_calls: 2 * 3 };
        let t = bench_timing_with_clock(&model, &recs, &store, &cfg, &mut clock).unwrap();
        // Two timed batches, three timestamps each: 2 s apiece.
        assert_eq!(t.total_seconds, 4.0);
        assert_eq!(t.preprocess_seconds, 2.0);
        assert_eq!(t.forward_seconds, 2.0);
        assert_eq!(t.seconds_per_file * t.n_files as f64, t.total_seconds);
    }

    #[test]
    fn file_count_3072_is_reported_verbatim() {
        let (index, store) = toy_corpus(&ToySpec { train_per_class: 2, ..Default::default() }).unwrap();
        let recs = index.split_records(Split::Train);
        let model = build_model(&ModelConfig::tiny()).unwrap();
        let mut cfg = BenchConfig::new(3072, 512, PreprocessConfig::with_size(32));
        cfg.warmup_batches = 0;
        let t = bench_timing(&model, &recs, &store, &cfg).unwrap();
        assert_eq!(t.n_files, 3072);
        assert!((t.seconds_per_file * 3072.0 - t.total_seconds).abs() < 1e-12);
    }

    #[test]
    fn bench_requires_enough_files() {
        let (index, store) = toy_corpus(&ToySpec { train_per_class: 2, ..Default::default() }).unwrap();
        let recs = index.split_records(Split::Train);
        let model = build_model(&ModelConfig::tiny()).unwrap();
        let cfg = BenchConfig::new(2, 4, PreprocessConfig::with_size(32));
        assert!(matches!(bench_timing(&model, &recs, &store, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_is_deterministic_and_leaves_weights_alone() {
        let (index, store) = toy_corpus(&ToySpec::default()).unwrap();
        let recs = index.split_records(Split::Test);
        let model = build_model(&ModelConfig::tiny().with_freq_branch(16)).unwrap();
        let before = model.weights_digest().unwrap();
        let cfg = PreprocessConfig::with_size(32);
        let a = evaluate(&model, &recs, &store, &cfg, 7).unwrap();
        let b = evaluate(&model, &recs, &store, &cfg, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, model.weights_digest().unwrap());
        assert!(a.0.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn empty_split_is_rejected() {
        let model = build_model(&ModelConfig::tiny()).unwrap();
        let store = crate::data::MemoryStore::new();
        let r = evaluate(&model, &[], &store, &PreprocessConfig::with_size(32), 4);
        assert!(matches!(r, Err(Error::EmptyInput)));
    }

    #[test]
    fn two_rows_mark_the_best_per_column() {
        let labels = [1, 1, 0, 0];
        let a = report(&[0.9, 0.4, 0.3, 0.6], &labels);
        let b = report(&[0.9, 0.4, 0.2, 0.1], &labels);
        let r = render_report(&[("plain".into(), a), ("hybrid".into(), b)]).unwrap();
        let lines: Vec<&str> = r.table.lines().collect();
        assert!(lines[0].split_whitespace().eq(["Model", "AUC", "ACC", "F1", "P", "R"]));
        assert_eq!(r.document.rows.len(), 2);
        assert_eq!(r.document.columns.len(), 5);
        // b has the perfect AUC and precision.
        assert_eq!(r.document.best[0], ("AUC".into(), vec!["hybrid".into()]));
        assert_eq!(r.document.best[3], ("P".into(), vec!["hybrid".into()]));
        assert!(lines[2].contains("1.0000*"));
    }

    #[test]
    fn single_row_has_no_marks() {
        let r = render_report(&[("solo".into(), report(&[0.9, 0.1], &[1, 0]))]).unwrap();
        assert!(!r.table.contains('*'));
        assert!(r.document.best.is_empty());
    }

    #[test]
    fn degenerate_rows_get_footnotes() {
        // Nothing predicted positive: precision has a zero denominator.
        let m = report(&[0.1, 0.2, 0.3], &[1, 0, 0]);
        let r = render_report(&[("cold".into(), m)]).unwrap();
        assert_eq!(r.document.footnotes.len(), 1);
        assert!(r.document.footnotes[0].contains("precision"));
        assert!(r.table.contains("[1]"));
    }

    #[test]
    fn document_keeps_full_precision() {
        let m = report(&[0.91, 0.37, 0.52, 0.13, 0.77], &[1, 0, 1, 0, 0]);
        let r = render_report(&[("x".into(), m.clone())]).unwrap();
        let json = serde_json::to_string(&r.document).unwrap();
        let back: ReportDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows[0].metrics, m);
        assert_eq!(back.format_version, REPORT_FORMAT_VERSION);
    }
}
