//! Benchmark harness: background recovery by the trained model, the
//! analytic inverse given the true foreground, and the identity baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::image::LayerImage;
use crate::inverse::{invert_background, DEFAULT_EPS};
use crate::metrics::{rmse, ssim};
use crate::model::ModelState;
use crate::sampler::{sample, SamplerConfig};
use crate::seed;
use crate::synth::{load_manifest, split_records, Split, Subtask, Triplet, TripletRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Model,
    AnalyticOracle,
    Identity,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Model, Method::AnalyticOracle, Method::Identity];

    pub fn name(self) -> &'static str {
        match self {
            Self::Model => "model",
            Self::AnalyticOracle => "analytic-oracle",
            Self::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordScore {
    pub id: String,
    pub subtask: Subtask,
    pub method: Method,
    pub rmse: f64,
    pub ssim: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub subtask: Subtask,
    pub method: Method,
    pub n: usize,
    pub rmse: f64,
    pub ssim: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<RecordScore>,
    pub summary: Vec<SummaryRow>,
}

impl EvalReport {
    pub fn row(&self, subtask: Subtask, method: Method) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.subtask == subtask && r.method == method)
    }

    /// Mean background RMSE of one method over every record.
    pub fn mean_rmse(&self, method: Method) -> f64 {
        let rows: Vec<_> = self.records.iter().filter(|r| r.method == method).collect();
        rows.iter().map(|r| r.rmse).sum::<f64>() / rows.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub methods: Vec<Method>,
    /// Record wall-clock times in the CSV outputs. Off for byte-reproducible
    /// reports; the text table always shows the measured times.
    pub timing_in_csv: bool,
    pub oracle_eps: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            timing_in_csv: true,
            oracle_eps: DEFAULT_EPS,
        }
    }
}

fn check_compatible(state: &ModelState, tri: &Triplet) -> Result<()> {
    let cfg = &state.config;
    if !cfg.predict_background {
        return Err(Error::Checkpoint("checkpoint does not predict backgrounds".into()));
    }
    if (tri.comp.width(), tri.comp.height()) != (cfg.width, cfg.height) {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {}x{} images, record {} is {}x{}",
            cfg.width,
            cfg.height,
            tri.record.id,
            tri.comp.width(),
            tri.comp.height()
        )));
    }
    Ok(())
}

/// Background estimate of one method for one triplet.
pub fn estimate(
    method: Method,
    tri: &Triplet,
    state: Option<&ModelState>,
    sampler: &SamplerConfig,
    oracle_eps: f64,
) -> Result<LayerImage> {
    match method {
        Method::Identity => Ok(tri.comp.clone()),
        Method::AnalyticOracle => {
            // Invalid pixels fall back to the composite value.
            Ok(invert_background(&tri.comp, &tri.fg, tri.record.mode, oracle_eps)?.recovered)
        }
        Method::Model => {
            let state = state.ok_or_else(|| Error::InvalidInput("model method needs a checkpoint".into()))?;
            check_compatible(state, tri)?;
            let cfg = SamplerConfig {
                seed: seed::derive(sampler.seed, &tri.record.id),
                ..sampler.clone()
            };
            sample(state, &tri.comp, tri.record.subtask, &cfg)?
                .background
                .ok_or_else(|| Error::Checkpoint("checkpoint does not predict backgrounds".into()))
        }
    }
}

fn with_record<T>(rec: &TripletRecord, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Record { .. } => e,
        other => Error::Record {
            id: rec.id.clone(),
            reason: other.to_string(),
        },
    })
}

/// Scores every test record of `manifest` with each method. Writes the
/// summary CSV to `out`, per-record scores next to it as
/// `<stem>_records.csv`, and a text table as `<stem>.txt`.
pub fn benchmark(
    manifest: &Path,
    state: Option<&ModelState>,
    sampler: &SamplerConfig,
    out: &Path,
    opts: &BenchOptions,
) -> Result<EvalReport> {
    sampler.validate()?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let tests = split_records(&load_manifest(manifest)?, Split::Test);
    if tests.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no test records", manifest.display())));
    }
    let mut records = Vec::with_capacity(tests.len() * opts.methods.len());
    for rec in &tests {
        let tri = rec.load(base)?;
        for &method in &opts.methods {
            let start = Instant::now();
            let est = with_record(rec, estimate(method, &tri, state, sampler, opts.oracle_eps))?;
            let seconds = start.elapsed().as_secs_f64();
            records.push(RecordScore {
                id: rec.id.clone(),
                subtask: rec.subtask,
                method,
                rmse: with_record(rec, rmse(&est, &tri.bg))?,
                ssim: with_record(rec, ssim(&est, &tri.bg))?,
                seconds,
            });
        }
    }
    let report = EvalReport {
        summary: summarize(&records),
        records,
    };
    write_report(&report, out, opts.timing_in_csv)?;
    Ok(report)
}

pub fn summarize(records: &[RecordScore]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Subtask, Method)> = records.iter().map(|r| (r.subtask, r.method)).collect();
    keys.sort_by_key(|&(s, m)| (s.index(), m));
    keys.dedup();
    keys.into_iter()
        .map(|(subtask, method)| {
            let rows: Vec<_> = records
                .iter()
                .filter(|r| r.subtask == subtask && r.method == method)
                .collect();
            let n = rows.len();
            SummaryRow {
                subtask,
                method,
                n,
                rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / n as f64,
                ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n as f64,
                seconds: rows.iter().map(|r| r.seconds).sum(),
            }
        })
        .collect()
}

pub const REPORT_HEADER: &str = "subtask,method,n,rmse,ssim,seconds";
pub const RECORDS_HEADER: &str = "id,subtask,method,rmse,ssim,seconds";

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    out.with_file_name(format!("{stem}{suffix}"))
}

pub fn records_path(out: &Path) -> PathBuf {
    sibling(out, "_records.csv")
}

pub fn table_path(out: &Path) -> PathBuf {
    sibling(out, ".txt")
}

pub fn render_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:<16} {:>4} {:>10} {:>8} {:>10}",
        "subtask", "method", "n", "rmse", "ssim", "seconds"
    );
    for r in &report.summary {
        let _ = writeln!(
            s,
            "{:<10} {:<16} {:>4} {:>10.4} {:>8.4} {:>10.3}",
            r.subtask.name(),
            r.method.name(),
            r.n,
            r.rmse,
            r.ssim,
            r.seconds
        );
    }
    s
}

fn write_report(report: &EvalReport, out: &Path, timing: bool) -> Result<()> {
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let secs = |v: f64| if timing { format!("{v}") } else { "0".to_string() };
    let mut csv = format!("{REPORT_HEADER}\n");
    for r in &report.summary {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.subtask.name(),
            r.method.name(),
            r.n,
            r.rmse,
            r.ssim,
            secs(r.seconds)
        );
    }
    fs::write(out, csv).map_err(|e| Error::io(out, e))?;

    let mut rows = format!("{RECORDS_HEADER}\n");
    for r in &report.records {
        let _ = writeln!(
            rows,
            "{},{},{},{},{},{}",
            r.id,
            r.subtask.name(),
            r.method.name(),
            r.rmse,
            r.ssim,
            secs(r.seconds)
        );
    }
    let path = records_path(out);
    fs::write(&path, rows).map_err(|e| Error::io(&path, e))?;
    let path = table_path(out);
    fs::write(&path, render_table(report)).map_err(|e| Error::io(&path, e))
}
