//! Output locations, atomic writes and the metrics CSV.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use iodkit::fsutil::write_atomic;
use iodkit::trainer::PhaseMetrics;
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "IODKIT_OUT";

fn env_out() -> Option<PathBuf> {
    std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Output directory, replaced by `IODKIT_OUT` when set.
pub fn out_dir(flag: &Path) -> PathBuf {
    env_out().unwrap_or_else(|| flag.to_path_buf())
}

/// Output file; with `IODKIT_OUT` set it keeps its name but moves into that directory.
pub fn out_file(flag: &Path) -> PathBuf {
    match (env_out(), flag.file_name()) {
        (Some(dir), Some(name)) => dir.join(name),
        _ => flag.to_path_buf(),
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text.as_bytes())
}

pub const CSV_HEADER: [&str; 11] = [
    "method", "seed", "phase", "ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l", "ap_old", "fpp",
];

/// One line of the run-level CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub phase: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ap_old: Option<f64>,
    pub fpp: Option<f64>,
}

impl MetricsRow {
    pub fn new(method: &str, seed: u64, m: &PhaseMetrics) -> Self {
        MetricsRow {
            method: method.to_string(),
            seed,
            phase: m.phase,
            ap: m.ap,
            ap50: m.ap50,
            ap75: m.ap75,
            ap_s: m.ap_s,
            ap_m: m.ap_m,
            ap_l: m.ap_l,
            ap_old: m.ap_old,
            fpp: m.fpp,
        }
    }

    /// Metric by CSV column name.
    pub fn get(&self, column: &str) -> Option<f64> {
        match column {
            "ap" => self.ap,
            "ap50" => self.ap50,
            "ap75" => self.ap75,
            "ap_s" => self.ap_s,
            "ap_m" => self.ap_m,
            "ap_l" => self.ap_l,
            "ap_old" => self.ap_old,
            "fpp" => self.fpp,
            _ => None,
        }
    }
}

/// Fixed six-decimal rendering keeps files stable and diffable.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let mut rec = vec![r.method.clone(), r.seed.to_string(), r.phase.to_string()];
        rec.extend(
            [r.ap, r.ap50, r.ap75, r.ap_s, r.ap_m, r.ap_l, r.ap_old, r.fpp]
                .into_iter()
                .map(fmt_opt),
        );
        w.write_record(&rec)?;
    }
    Ok(w.into_inner()?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_metrics_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        anyhow::bail!("expected header {}, found {}", CSV_HEADER.join(","), header.join(","));
    }
    r.deserialize()
        .enumerate()
        .map(|(k, row)| row.with_context(|| format!("record {}", k + 1)))
        .collect()
}
