use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use iodkit::dataset::Dataset;
use iodkit::ingestion::{load_coco, to_coco_json};
use iodkit::protocol::{multi_phase_plan, split, ProtocolMode, SplitManifest};
use log::info;

use crate::output::{out_dir, write};

pub struct SplitArgs {
    pub data: PathBuf,
    pub setup: String,
    pub mode: ProtocolMode,
    pub seed: u64,
    pub sample_fractions: Option<Vec<f64>>,
    pub out: PathBuf,
}

/// Writes `manifest.json` and one filtered annotation file per phase.
pub fn run(args: &SplitArgs) -> Result<()> {
    let dataset = load_coco(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let mut plan = multi_phase_plan(&args.setup, dataset.num_classes(), args.seed, args.mode)?;
    if let Some(f) = &args.sample_fractions {
        plan = plan.with_sample_fractions(f.clone())?;
    }
    let phases = split(&dataset, &plan)?;
    let manifest = SplitManifest::from_phases(&plan, &phases, &dataset);

    let out = out_dir(&args.out);
    write(&out.join("manifest.json"), (manifest.to_json() + "\n").as_bytes())?;
    for p in &phases {
        let subset = Dataset {
            categories: dataset.categories.clone(),
            images: p.images.clone(),
        };
        let path = phase_file(&out, p.index);
        write(&path, to_coco_json(&subset).as_bytes())?;
        info!("phase {}: {} images", p.index + 1, p.images.len());
    }
    for (p, m) in phases.iter().zip(&manifest.phases) {
        println!(
            "phase {}: {} categories, {} images, {} annotations",
            p.index + 1,
            m.categories.len(),
            p.images.len(),
            p.images.iter().map(|i| i.annotations.len()).sum::<usize>()
        );
    }
    Ok(())
}

pub fn phase_file(out: &Path, index: usize) -> PathBuf {
    out.join(format!("phase_{}.json", index + 1))
}
