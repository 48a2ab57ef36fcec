//! Exemplar selection for replay and the exemplar memory.
//!
//! The greedy selector adds, one image at a time, the candidate whose
//! inclusion brings the exemplar category marginal closest (in KL) to the
//! marginal of the full phase dataset.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// What a marginal counts per category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalUnit {
    /// One count per annotation.
    #[default]
    Annotations,
    /// One count per image containing the category.
    Images,
}

/// Smoothed category frequencies over a fixed category subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMarginal {
    pub categories: Vec<usize>,
    pub counts: Vec<u64>,
    pub probs: Vec<f64>,
    pub epsilon: f64,
}

impl CategoryMarginal {
    pub fn from_counts(categories: Vec<usize>, counts: Vec<u64>, epsilon: f64) -> Self {
        let total: f64 = counts.iter().map(|&c| c as f64 + epsilon).sum();
        let probs = counts.iter().map(|&c| (c as f64 + epsilon) / total).collect();
        CategoryMarginal {
            categories,
            counts,
            probs,
            epsilon,
        }
    }
}

/// Per-category counts contributed by one image.
fn image_counts(image: &Image, categories: &[usize], unit: MarginalUnit) -> Vec<u64> {
    categories
        .iter()
        .map(|c| {
            let n = image.annotations.iter().filter(|a| a.category == *c).count() as u64;
            match unit {
                MarginalUnit::Annotations => n,
                MarginalUnit::Images => u64::from(n > 0),
            }
        })
        .collect()
}

pub fn marginal<'a>(
    images: impl IntoIterator<Item = &'a Image>,
    categories: &[usize],
    epsilon: f64,
    unit: MarginalUnit,
) -> Result<CategoryMarginal> {
    if categories.is_empty() {
        return Err(Error::InvalidConfig("marginal over an empty category set".into()));
    }
    let mut counts = vec![0u64; categories.len()];
    for img in images {
        for (c, n) in counts.iter_mut().zip(image_counts(img, categories, unit)) {
            *c += n;
        }
    }
    Ok(CategoryMarginal::from_counts(categories.to_vec(), counts, epsilon))
}

/// `KL(target ‖ other)` over the shared category subset.
pub fn kl_divergence(target: &CategoryMarginal, other: &CategoryMarginal) -> f64 {
    target
        .probs
        .iter()
        .zip(&other.probs)
        .map(|(p, q)| if *p > 0.0 { p * (p / q).ln() } else { 0.0 })
        .sum()
}

/// `R_i = ceil(fraction · n)`.
pub fn phase_budget(fraction: f64, n: usize) -> usize {
    // The small offset keeps exact products such as 0.1 · 200 from rounding up.
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn check_budget(r: usize, available: usize) -> Result<()> {
    if r > available {
        return Err(Error::NotEnoughCandidates {
            requested: r,
            available,
        });
    }
    Ok(())
}

/// Greedy KL-matching selection; returns ids in the order they were chosen.
///
/// Candidates are scanned in ascending id order and only a strictly better
/// objective replaces the incumbent, so ties go to the smallest id.
pub fn greedy_select(
    pool: &[Image],
    r: usize,
    categories: &[usize],
    epsilon: f64,
    unit: MarginalUnit,
) -> Result<Vec<u64>> {
    check_budget(r, pool.len())?;
    let target = marginal(pool, categories, epsilon, unit)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by_key(|&k| pool[k].id);
    let contributions: Vec<Vec<u64>> = pool
        .iter()
        .map(|img| image_counts(img, categories, unit))
        .collect();

    let mut counts = vec![0u64; categories.len()];
    let mut taken = vec![false; pool.len()];
    let mut chosen = Vec::with_capacity(r);
    for _ in 0..r {
        let mut best: Option<(usize, f64)> = None;
        for &k in &order {
            if taken[k] {
                continue;
            }
            let score = objective(&target.probs, &counts, &contributions[k], epsilon);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((k, score));
            }
        }
        let (k, _) = best.expect("budget checked against pool size");
        taken[k] = true;
        for (c, n) in counts.iter_mut().zip(&contributions[k]) {
            *c += n;
        }
        chosen.push(pool[k].id);
    }
    Ok(chosen)
}

/// `Σ_c p_D(c) · log p_{E∪{e}}(c)`.
fn objective(target: &[f64], counts: &[u64], extra: &[u64], epsilon: f64) -> f64 {
    let smoothed: Vec<f64> = counts
        .iter()
        .zip(extra)
        .map(|(a, b)| (a + b) as f64 + epsilon)
        .collect();
    let total: f64 = smoothed.iter().sum();
    target
        .iter()
        .zip(&smoothed)
        .map(|(p, s)| p * (s / total).ln())
        .sum()
}

/// Uniform sampling without replacement; ids returned in ascending order.
pub fn random_select(pool: &[Image], r: usize, seed: u64) -> Result<Vec<u64>> {
    check_budget(r, pool.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u64> = rand::seq::index::sample(&mut rng, pool.len(), r)
        .into_iter()
        .map(|k| pool[k].id)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Exemplar ids per phase, `E_1 .. E_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    pub phases: Vec<Vec<u64>>,
    pub budget_fraction: f64,
}

impl ExemplarMemory {
    pub fn new(budget_fraction: f64) -> Self {
        ExemplarMemory {
            phases: Vec::new(),
            budget_fraction,
        }
    }

    /// Appends `E_i`; fails if any id is already stored.
    pub fn push_phase(&mut self, ids: Vec<u64>) -> Result<()> {
        let seen = self.all_ids();
        let mut fresh = BTreeSet::new();
        for id in &ids {
            if seen.contains(id) || !fresh.insert(*id) {
                return Err(Error::InvalidPlan(format!(
                    "exemplar {id} stored twice"
                )));
            }
        }
        self.phases.push(ids);
        Ok(())
    }

    pub fn all_ids(&self) -> BTreeSet<u64> {
        self.phases.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.phases.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("memory always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mem: ExemplarMemory = serde_json::from_str(text)?;
        let mut check = ExemplarMemory::new(mem.budget_fraction);
        for p in &mem.phases {
            check.push_phase(p.clone())?;
        }
        Ok(mem)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
