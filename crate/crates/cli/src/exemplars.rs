use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use iodkit::exemplar::{greedy_select, kl_divergence, marginal, phase_budget, random_select, MarginalUnit, DEFAULT_EPSILON};
use iodkit::ingestion::load_coco;
use iodkit::protocol::{PhaseDataset, SplitManifest};
use serde::Serialize;

use crate::output::{out_file, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    Random,
}

pub struct ExemplarArgs {
    pub data: PathBuf,
    pub manifest: Option<PathBuf>,
    /// One-based phase of the manifest.
    pub phase: usize,
    pub budget_fraction: f64,
    pub method: Method,
    pub unit: MarginalUnit,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct ExemplarReport {
    phase: usize,
    method: Method,
    pool: usize,
    budget: usize,
    /// In selection order.
    ids: Vec<u64>,
    kl: f64,
    /// Category marginals keyed by source id.
    target: BTreeMap<u64, f64>,
    selected: BTreeMap<u64, f64>,
}

pub fn run(args: &ExemplarArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.budget_fraction) {
        bail!("--budget-fraction must lie in [0, 1]");
    }
    let dataset = load_coco(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let phase = match &args.manifest {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let phases = SplitManifest::from_json(&text)?.to_phases(&dataset)?;
            if args.phase == 0 || args.phase > phases.len() {
                bail!("--phase must lie in 1..={}", phases.len());
            }
            phases.into_iter().nth(args.phase - 1).expect("checked index")
        }
        None => PhaseDataset {
            index: 0,
            categories: (0..dataset.num_classes()).collect(),
            images: dataset.images.clone(),
        },
    };
    let r = phase_budget(args.budget_fraction, phase.images.len());
    let ids = match args.method {
        Method::Greedy => greedy_select(&phase.images, r, &phase.categories, DEFAULT_EPSILON, args.unit)?,
        Method::Random => random_select(&phase.images, r, args.seed)?,
    };
    let target = marginal(&phase.images, &phase.categories, DEFAULT_EPSILON, args.unit)?;
    let chosen: Vec<_> = phase
        .images
        .iter()
        .filter(|i| ids.contains(&i.id))
        .cloned()
        .collect();
    let selected = marginal(&chosen, &phase.categories, DEFAULT_EPSILON, args.unit)?;
    let kl = kl_divergence(&target, &selected);
    let keyed = |probs: &[f64]| -> BTreeMap<u64, f64> {
        phase
            .categories
            .iter()
            .zip(probs)
            .map(|(&c, &p)| (dataset.categories[c].source_id, p))
            .collect()
    };
    println!("selected {} of {} images, KL {kl:.6}", ids.len(), phase.images.len());
    let report = ExemplarReport {
        phase: phase.index + 1,
        method: args.method,
        pool: phase.images.len(),
        budget: r,
        ids,
        kl,
        target: keyed(&target.probs),
        selected: keyed(&selected.probs),
    };
    write_json(&out_file(&args.out), &report)
}
