//! Every mode × seed, with a job ledger so an interrupted sweep resumes.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use iodkit::trainer::Mode;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::Statistics;

use crate::config::{LoadedConfig, RunConfig};
use crate::output::{fmt_opt, metrics_csv, out_dir, read_metrics_csv, write, write_json, MetricsRow};
use crate::train::{execute, rows};

pub struct AblateArgs {
    pub config: PathBuf,
    pub modes: String,
    pub seeds: usize,
    pub jobs: Option<usize>,
    pub restart: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
struct Job {
    mode: Mode,
    seed: u64,
}

impl Job {
    fn dir(&self, out: &Path) -> PathBuf {
        out.join("jobs").join(format!("{}_seed{}", self.mode.name(), self.seed))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Ledger {
    config_hash: String,
    completed: Vec<Job>,
}

const LEDGER: &str = "ledger.json";

pub fn parse_modes(spec: &str) -> Result<Vec<Mode>> {
    if spec.trim() == "all" {
        return Ok(Mode::ALL.to_vec());
    }
    let mut modes = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let Some(m) = Mode::from_name(name) else {
            let known: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
            bail!("unknown mode {name:?}; expected \"all\" or some of {}", known.join(", "));
        };
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    if modes.is_empty() {
        bail!("no modes given");
    }
    modes.sort();
    Ok(modes)
}

fn job_config(base: &LoadedConfig, job: Job) -> LoadedConfig {
    let mut c = base.clone();
    c.config.train.mode = job.mode;
    c.config.train.seed = job.seed;
    c
}

fn load_ledger(path: &Path) -> Result<Option<Ledger>> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(Some(
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

/// Mean and half-width of a two-sided 95% Student-t interval; no half-width below two samples.
pub fn mean_half_width(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().mean();
    if values.len() < 2 {
        return Some((mean, None));
    }
    let n = values.len() as f64;
    let t = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive degrees of freedom");
    let hw = t.inverse_cdf(0.975) * values.iter().std_dev() / n.sqrt();
    Some((mean, Some(hw)))
}

fn summary_csv(modes: &[Mode], rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let columns = ["ap", "ap_old", "fpp"];
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "n".to_string()];
    for c in columns {
        header.push(c.to_string());
        header.push(format!("{c}_hw"));
    }
    w.write_record(&header)?;
    for m in modes {
        // Final-phase row of each seed.
        let mut finals: Vec<&MetricsRow> = Vec::new();
        for r in rows.iter().filter(|r| r.method == m.name()) {
            match finals.iter_mut().find(|f| f.seed == r.seed) {
                Some(f) if f.phase < r.phase => *f = r,
                Some(_) => {}
                None => finals.push(r),
            }
        }
        let mut rec = vec![m.name().to_string(), finals.len().to_string()];
        for c in columns {
            let values: Vec<f64> = finals.iter().filter_map(|r| r.get(c)).collect();
            match mean_half_width(&values) {
                Some((mean, hw)) => {
                    rec.push(fmt_opt(Some(mean)));
                    rec.push(fmt_opt(hw));
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    Ok(w.into_inner()?)
}

pub fn run(args: &AblateArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be positive");
    }
    let modes = parse_modes(&args.modes)?;
    let base = RunConfig::load(&args.config)?;
    let out = out_dir(&args.out);
    let ledger_path = out.join(LEDGER);

    // The ledger is keyed by the config with mode and seed neutralized.
    let mut neutral = base.config.clone();
    neutral.train.mode = Mode::Finetune;
    neutral.train.seed = 0;
    let hash = neutral.hash();
    let ledger = match load_ledger(&ledger_path)? {
        Some(l) if !args.restart => {
            if l.config_hash != hash {
                bail!(
                    "{} belongs to a different configuration; use another --out or pass --restart",
                    ledger_path.display()
                );
            }
            l
        }
        _ => Ledger {
            config_hash: hash,
            completed: Vec::new(),
        },
    };
    write_json(&ledger_path, &ledger)?;

    let first_seed = base.config.train.seed;
    let jobs: Vec<Job> = modes
        .iter()
        .flat_map(|&mode| (0..args.seeds as u64).map(move |k| Job { mode, seed: first_seed + k }))
        .collect();
    let ledger = Mutex::new(ledger);
    let pending: Vec<Job> = {
        let l = ledger.lock().expect("ledger lock");
        jobs.iter()
            .copied()
            .filter(|j| !(l.completed.contains(j) && j.dir(&out).join("metrics.csv").exists()))
            .collect()
    };
    info!("{} of {} jobs to run", pending.len(), jobs.len());

    let threads = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
    pool.install(|| {
        pending.par_iter().try_for_each(|&job| -> Result<()> {
            let cfg = job_config(&base, job);
            let (_, result) = execute(&cfg).with_context(|| format!("{} seed {}", job.mode.name(), job.seed))?;
            let dir = job.dir(&out);
            write(&dir.join("config.json"), cfg.config.to_json().as_bytes())?;
            for p in &result.phases {
                write_json(&dir.join(format!("phase_{}_metrics.json", p.metrics.phase)), &p.metrics)?;
            }
            write(&dir.join("metrics.csv"), &metrics_csv(&rows(&cfg.config, &result))?)?;
            let mut l = ledger.lock().expect("ledger lock");
            l.completed.push(job);
            l.completed.sort();
            write_json(&ledger_path, &*l)?;
            info!("finished {} seed {}", job.mode.name(), job.seed);
            Ok(())
        })
    })?;

    let mut all = Vec::new();
    for job in &jobs {
        all.extend(read_metrics_csv(&job.dir(&out).join("metrics.csv"))?);
    }
    write(&out.join("metrics.csv"), &metrics_csv(&all)?)?;
    let summary = summary_csv(&modes, &all)?;
    write(&out.join("summary.csv"), &summary)?;
    print!("{}", String::from_utf8_lossy(&summary));
    Ok(())
}
