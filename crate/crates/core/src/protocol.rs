//! Incremental phase splits.
//!
//! Strict splits give every phase a disjoint image subset whose annotations
//! are filtered to that phase's categories. Traditional splits give each
//! phase every image containing at least one of its categories.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    Strict,
    Traditional,
}

/// Category blocks, sample fractions and the seed for one benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub mode: ProtocolMode,
    pub seed: u64,
    pub category_partition: Vec<Vec<usize>>,
    pub sample_fractions: Vec<f64>,
}

impl PhasePlan {
    pub fn num_phases(&self) -> usize {
        self.category_partition.len()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.category_partition.is_empty() {
            return Err(Error::InvalidPlan("no phases".into()));
        }
        let mut seen = vec![false; num_classes];
        for block in &self.category_partition {
            if block.is_empty() {
                return Err(Error::InvalidPlan("empty category block".into()));
            }
            for &c in block {
                if c >= num_classes {
                    return Err(Error::CategoryOutOfRange {
                        index: c,
                        num_classes,
                    });
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(Error::InvalidPlan(format!("category {c} in two phases")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidPlan("category partition does not cover all categories".into()));
        }
        self.check_fractions()
    }

    fn check_fractions(&self) -> Result<()> {
        if self.sample_fractions.len() != self.num_phases() {
            return Err(Error::InvalidPlan("one sample fraction per phase required".into()));
        }
        let total: f64 = self.sample_fractions.iter().sum();
        if self.sample_fractions.iter().any(|f| *f <= 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPlan(format!(
                "sample fractions must be positive and sum to 1, got {:?}",
                self.sample_fractions
            )));
        }
        Ok(())
    }

    /// Categories of phases `0..=phase`.
    pub fn seen_categories(&self, phase: usize) -> Vec<usize> {
        let mut cats: Vec<usize> = self.category_partition[..=phase].concat();
        cats.sort_unstable();
        cats
    }

    /// Replaces the default per-phase sample fractions.
    pub fn with_sample_fractions(mut self, fractions: Vec<f64>) -> Result<Self> {
        self.sample_fractions = fractions;
        self.check_fractions()?;
        Ok(self)
    }
}

/// Block sizes of a setup string such as `"70+10"`, `"40+20+20"` or `"40+10x4"`.
pub fn parse_setup(setup: &str) -> Result<Vec<usize>> {
    let bad = |reason: &str| Error::MalformedSetup {
        setup: setup.to_string(),
        reason: reason.to_string(),
    };
    let number = |s: &str| -> Result<usize> {
        match s.trim().parse::<usize>() {
            Ok(0) => Err(bad("block sizes must be positive")),
            Ok(v) => Ok(v),
            Err(_) => Err(bad("expected a positive integer")),
        }
    };
    let mut blocks = Vec::new();
    for token in setup.split('+') {
        let token = token.trim();
        if token.is_empty() {
            return Err(bad("empty block"));
        }
        match token.split_once(['x', 'X', '×']) {
            Some((size, times)) => {
                let size = number(size)?;
                let times = number(times)?;
                blocks.extend(std::iter::repeat_n(size, times));
            }
            None => blocks.push(number(token)?),
        }
    }
    Ok(blocks)
}

/// Builds a plan from a setup string; categories are assigned to blocks in a seeded random order.
///
/// The sample fraction of phase `i` is `|C_i| / C`, which gives `A/(A+B)` for
/// two-phase setups and one half followed by `1/(2Y)` for `A+X×Y` with `A = C/2`.
pub fn multi_phase_plan(
    setup: &str,
    num_classes: usize,
    seed: u64,
    mode: ProtocolMode,
) -> Result<PhasePlan> {
    let blocks = parse_setup(setup)?;
    let total: usize = blocks.iter().sum();
    if total != num_classes {
        return Err(Error::MalformedSetup {
            setup: setup.to_string(),
            reason: format!("blocks sum to {total} but the dataset has {num_classes} categories"),
        });
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut partition = Vec::with_capacity(blocks.len());
    let mut start = 0;
    for &size in &blocks {
        let mut block = order[start..start + size].to_vec();
        block.sort_unstable();
        partition.push(block);
        start += size;
    }
    let sample_fractions = blocks
        .iter()
        .map(|&b| b as f64 / num_classes as f64)
        .collect();
    let plan = PhasePlan {
        mode,
        seed,
        category_partition: partition,
        sample_fractions,
    };
    plan.validate(num_classes)?;
    Ok(plan)
}

/// Images of one phase with annotations filtered to that phase's categories.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDataset {
    /// Zero-based phase index.
    pub index: usize,
    pub categories: Vec<usize>,
    pub images: Vec<Image>,
}

impl PhaseDataset {
    pub fn image_ids(&self) -> Vec<u64> {
        self.images.iter().map(|i| i.id).collect()
    }
}

/// Stream of the image shuffle, separate from the category shuffle.
const IMAGE_STREAM: u64 = 1;

pub fn strict_split(dataset: &Dataset, plan: &PhasePlan) -> Result<Vec<PhaseDataset>> {
    if dataset.images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    plan.validate(dataset.num_classes())?;
    let mut order: Vec<usize> = (0..dataset.images.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(IMAGE_STREAM);
    order.shuffle(&mut rng);

    let n = order.len();
    let m = plan.num_phases();
    let mut sizes: Vec<usize> = plan
        .sample_fractions
        .iter()
        .map(|f| (f * n as f64 + 1e-9).floor() as usize)
        .collect();
    let assigned: usize = sizes[..m - 1].iter().sum();
    sizes[m - 1] = n - assigned.min(n);

    let mut phases = Vec::with_capacity(m);
    let mut start = 0;
    for (i, size) in sizes.into_iter().enumerate() {
        let end = (start + size).min(n);
        let cats = &plan.category_partition[i];
        phases.push(PhaseDataset {
            index: i,
            categories: cats.clone(),
            images: order[start..end]
                .iter()
                .map(|&k| dataset.images[k].restricted_to(cats))
                .collect(),
        });
        start = end;
    }
    Ok(phases)
}

pub fn traditional_split(dataset: &Dataset, plan: &PhasePlan) -> Result<Vec<PhaseDataset>> {
    plan.validate(dataset.num_classes())?;
    Ok(plan
        .category_partition
        .iter()
        .enumerate()
        .map(|(i, cats)| PhaseDataset {
            index: i,
            categories: cats.clone(),
            images: dataset
                .images
                .iter()
                .filter(|img| img.has_category_in(cats))
                .map(|img| img.restricted_to(cats))
                .collect(),
        })
        .collect())
}

pub fn split(dataset: &Dataset, plan: &PhasePlan) -> Result<Vec<PhaseDataset>> {
    match plan.mode {
        ProtocolMode::Strict => strict_split(dataset, plan),
        ProtocolMode::Traditional => traditional_split(dataset, plan),
    }
}

/// Serialized split: source category ids and image ids per phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub mode: ProtocolMode,
    pub seed: u64,
    pub phases: Vec<ManifestPhase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPhase {
    pub categories: Vec<u64>,
    pub images: Vec<u64>,
}

impl SplitManifest {
    pub fn from_phases(plan: &PhasePlan, phases: &[PhaseDataset], dataset: &Dataset) -> Self {
        SplitManifest {
            mode: plan.mode,
            seed: plan.seed,
            phases: phases
                .iter()
                .map(|p| ManifestPhase {
                    categories: p
                        .categories
                        .iter()
                        .map(|&c| dataset.categories[c].source_id)
                        .collect(),
                    images: p.image_ids(),
                })
                .collect(),
        }
    }

    /// Rebuilds the phase datasets from `dataset`.
    pub fn to_phases(&self, dataset: &Dataset) -> Result<Vec<PhaseDataset>> {
        let by_id = dataset.index_by_id();
        self.phases
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let cats = p
                    .categories
                    .iter()
                    .map(|&id| {
                        dataset.category_index(id).ok_or_else(|| {
                            Error::InvalidPlan(format!("manifest category {id} not in dataset"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let images = p
                    .images
                    .iter()
                    .map(|id| {
                        by_id
                            .get(id)
                            .map(|&k| dataset.images[k].restricted_to(&cats))
                            .ok_or_else(|| Error::InvalidPlan(format!("manifest image {id} not in dataset")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PhaseDataset {
                    index: i,
                    categories: cats,
                    images,
                })
            })
            .collect()
    }

    /// The category partition as dense indices.
    pub fn category_partition(&self, dataset: &Dataset) -> Result<Vec<Vec<usize>>> {
        Ok(self.to_phases(dataset)?.into_iter().map(|p| p.categories).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
