use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use iodkit::dataset::{Dataset, FeatureStore};
use iodkit::detector::Checkpoint;
use iodkit::ingestion::{detection_dump_json, detections_from_coco, detections_to_coco, load_coco, parse_detection_dump};
use iodkit::metrics::{evaluate, ApSummary, Detection};
use iodkit::synth::{SynthConfig, SyntheticWorld};
use iodkit::trainer::predict;
use log::warn;
use serde::Serialize;

use crate::config::{coco_world, DataConfig, LoadedConfig, RunConfig, TEST_FEATURE_SEED};
use crate::output::{fmt_opt, out_file, write, write_json};

pub struct EvalArgs {
    pub gt: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub config: Option<PathBuf>,
    /// Source category ids to score; all categories when empty.
    pub categories: Vec<u64>,
    pub max_dets: Option<usize>,
    pub dump: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    images: usize,
    detections: usize,
    categories: Vec<u64>,
    #[serde(flatten)]
    summary: ApSummary,
}

/// The evaluation set and its features for a checkpoint run.
fn eval_set(loaded: &LoadedConfig, gt: Option<&PathBuf>) -> Result<(Dataset, FeatureStore)> {
    let seed = loaded.config.train.seed;
    let Some(path) = gt else {
        let (_, _, test, test_features) = loaded.datasets()?;
        return Ok((test, test_features));
    };
    let dataset = load_coco(path).with_context(|| format!("loading {}", path.display()))?;
    let world = match &loaded.config.data {
        DataConfig::Coco(c) => coco_world(c, dataset.num_classes(), seed)?,
        DataConfig::Synthetic(s) => SyntheticWorld::new(SynthConfig { seed, ..s.synth })?,
    };
    let features = world.features_for(&dataset, seed.wrapping_add(TEST_FEATURE_SEED))?;
    Ok((dataset, features))
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let (dataset, detections, max_dets): (Dataset, Vec<Detection>, usize) =
        match (&args.detections, &args.checkpoint, &args.config) {
            (Some(dump), None, _) => {
                let Some(gt) = &args.gt else {
                    bail!("--detections needs --gt");
                };
                let dataset = load_coco(gt).with_context(|| format!("loading {}", gt.display()))?;
                let text = std::fs::read_to_string(dump).with_context(|| format!("reading {}", dump.display()))?;
                let records = parse_detection_dump(&text).with_context(|| format!("parsing {}", dump.display()))?;
                let dets = detections_from_coco(&records, &dataset)?;
                (dataset, dets, args.max_dets.unwrap_or(100))
            }
            (None, Some(ckpt), Some(config)) => {
                let loaded = RunConfig::load(config)?;
                let checkpoint = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
                if checkpoint.config_hash != loaded.config.hash() {
                    warn!("checkpoint was trained with a different configuration");
                }
                let (dataset, features) = eval_set(&loaded, args.gt.as_ref())?;
                if checkpoint.params.num_classes != dataset.num_classes() {
                    bail!(
                        "checkpoint predicts {} categories, evaluation set has {}",
                        checkpoint.params.num_classes,
                        dataset.num_classes()
                    );
                }
                let max_dets = args.max_dets.unwrap_or(loaded.config.train.eval.max_dets);
                let dets = predict(&checkpoint.params, &dataset, &features, max_dets)?;
                (dataset, dets, max_dets)
            }
            _ => bail!("give either --detections with --gt, or --checkpoint with --config"),
        };

    let categories: Vec<usize> = if args.categories.is_empty() {
        (0..dataset.num_classes()).collect()
    } else {
        args.categories
            .iter()
            .map(|id| {
                dataset
                    .category_index(*id)
                    .with_context(|| format!("category {id} is not in the ground truth"))
            })
            .collect::<Result<_>>()?
    };
    let params = iodkit::metrics::EvalParams {
        max_dets,
        ..Default::default()
    };
    let summary = evaluate(&detections, &dataset.images, &categories, &params)?;
    if let Some(dump) = &args.dump {
        let records = detections_to_coco(&detections, &dataset)?;
        write(&out_file(dump), detection_dump_json(&records).as_bytes())?;
    }
    println!(
        "ap {} ap50 {} ap75 {} ap_s {} ap_m {} ap_l {}",
        fmt_opt(summary.ap),
        fmt_opt(summary.ap50),
        fmt_opt(summary.ap75),
        fmt_opt(summary.ap_s),
        fmt_opt(summary.ap_m),
        fmt_opt(summary.ap_l)
    );
    let report = EvalReport {
        images: dataset.images.len(),
        detections: detections.len(),
        categories: categories.iter().map(|&c| dataset.categories[c].source_id).collect(),
        summary,
    };
    write_json(&out_file(&args.out), &report)
}
