use std::path::{Path, PathBuf};

use anyhow::Result;
use iodkit::detector::Checkpoint;
use iodkit::exemplar::ExemplarMemory;
use iodkit::ingestion::{detection_dump_json, detections_to_coco};
use iodkit::trainer::{run_benchmark, BenchmarkResult, EpochLog, Stage};
use log::info;

use crate::config::{LoadedConfig, Prepared, RunConfig};
use crate::output::{metrics_csv, out_dir, write, write_json, MetricsRow};

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub dry_run: bool,
}

pub fn execute(loaded: &LoadedConfig) -> Result<(Prepared, BenchmarkResult)> {
    let prepared = loaded.prepare()?;
    let result = run_benchmark(
        &loaded.config.train,
        &prepared.phases,
        &prepared.features,
        &prepared.test,
        &prepared.test_features,
    )?;
    Ok((prepared, result))
}

pub fn rows(config: &RunConfig, result: &BenchmarkResult) -> Vec<MetricsRow> {
    result
        .phases
        .iter()
        .map(|p| MetricsRow::new(config.train.mode.name(), config.train.seed, &p.metrics))
        .collect()
}

fn epochs_csv(log: &[EpochLog]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["phase", "stage", "epoch", "mean_loss", "mean_pseudo", "truncated", "clamped"])?;
    for e in log {
        let stage = match e.stage {
            Stage::Main => "main",
            Stage::Calibration => "calibration",
        };
        w.write_record([
            e.phase.to_string(),
            stage.to_string(),
            e.epoch.to_string(),
            format!("{:.6}", e.mean_loss),
            format!("{:.6}", e.mean_pseudo),
            e.truncated.to_string(),
            e.clamped.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

pub fn phase_dir(out: &Path, phase: usize) -> PathBuf {
    out.join(format!("phase_{phase}"))
}

/// Writes every artifact of a finished run under `out`.
pub fn write_run(out: &Path, loaded: &LoadedConfig, prepared: &Prepared, result: &BenchmarkResult) -> Result<()> {
    let config = &loaded.config;
    let hash = config.hash();
    write(&out.join("config.json"), config.to_json().as_bytes())?;
    write(&out.join("manifest.json"), (prepared.manifest.to_json() + "\n").as_bytes())?;
    let mut memory = ExemplarMemory::new(result.memory.budget_fraction);
    let mut log = Vec::new();
    for (k, p) in result.phases.iter().enumerate() {
        let dir = phase_dir(out, k + 1);
        Checkpoint::new(p.outcome.model.clone(), k + 1, hash.clone()).save(&dir.join("checkpoint.json"))?;
        memory.push_phase(result.memory.phases[k].clone())?;
        write(&dir.join("exemplars.json"), (memory.to_json() + "\n").as_bytes())?;
        write_json(&dir.join("metrics.json"), &p.metrics)?;
        let dump = detections_to_coco(&p.detections, &prepared.test)?;
        write(&dir.join("detections.json"), detection_dump_json(&dump).as_bytes())?;
        log.extend(p.outcome.log.iter().cloned());
    }
    write(&out.join("epochs.csv"), &epochs_csv(&log)?)?;
    write(&out.join("metrics.csv"), &metrics_csv(&rows(config, result))?)?;
    Ok(())
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let loaded = RunConfig::load(&args.config)?;
    if args.dry_run {
        print!("{}", loaded.config.to_json());
        return Ok(());
    }
    let out = out_dir(&args.out);
    let (prepared, result) = execute(&loaded)?;
    write_run(&out, &loaded, &prepared, &result)?;
    for p in &result.phases {
        let m = &p.metrics;
        println!(
            "phase {}: ap {} ap50 {} ap_old {} fpp {}",
            m.phase,
            crate::output::fmt_opt(m.ap),
            crate::output::fmt_opt(m.ap50),
            crate::output::fmt_opt(m.ap_old),
            crate::output::fmt_opt(m.fpp)
        );
    }
    info!("wrote {}", out.display());
    Ok(())
}
