//! Structured pseudo labels from a frozen old model, merged with the
//! current ground truth into a single padded target set.
//!
//! The pipeline has four stages: keep the old model's foreground queries,
//! select the confident ones, drop those overlapping a ground-truth box by
//! more than `lambda`, then concatenate ground truth, pseudo labels and
//! background padding. Pseudo labels keep the old model's full soft
//! distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::labels::{pad_to_n, LabeledSet, Origin, Target};

/// How confident old-model predictions are selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoStrategy {
    /// The `K` most confident foreground predictions.
    TopK(usize),
    /// Foreground predictions with confidence at least `p`.
    Threshold(f64),
    /// A threshold moving linearly from `p_start` to `p_end` over training.
    Curriculum { p_start: f64, p_end: f64 },
    /// Every foreground prediction, no selection.
    AllForeground,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub strategy: PseudoStrategy,
    /// Maximum IoU a pseudo box may have with any ground-truth box.
    pub lambda: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            strategy: PseudoStrategy::TopK(10),
            lambda: 0.7,
        }
    }
}

impl PseudoConfig {
    /// No pseudo labels at all; distillation reduces to plain training.
    pub fn disabled() -> Self {
        PseudoConfig {
            strategy: PseudoStrategy::TopK(0),
            lambda: 0.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |p: f64| p > 0.0 && p < 1.0;
        let ok_strategy = match self.strategy {
            PseudoStrategy::TopK(_) | PseudoStrategy::AllForeground => true,
            PseudoStrategy::Threshold(p) => open_unit(p),
            PseudoStrategy::Curriculum { p_start, p_end } => open_unit(p_start) && open_unit(p_end),
        };
        if !ok_strategy {
            return Err(Error::InvalidConfig(format!(
                "pseudo-label threshold must lie in (0, 1): {:?}",
                self.strategy
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Queries whose best object category strictly beats background.
pub fn foreground_indices(old_preds: &LabeledSet) -> Vec<usize> {
    old_preds
        .iter()
        .enumerate()
        .filter(|(_, t)| t.dist.is_foreground())
        .map(|(j, _)| j)
        .collect()
}

/// Applies the selection strategy to `foreground`; returns indices in ascending order.
pub fn select_confident(
    foreground: &[usize],
    old_preds: &LabeledSet,
    strategy: PseudoStrategy,
    epoch_fraction: f64,
) -> Vec<usize> {
    let conf = |j: usize| old_preds.get(j).dist.confidence();
    let threshold = |p: f64| -> Vec<usize> {
        foreground.iter().copied().filter(|&j| conf(j) >= p).collect()
    };
    let mut selected = match strategy {
        PseudoStrategy::TopK(k) => {
            let mut ranked = foreground.to_vec();
            // Descending confidence, lower index first on ties.
            ranked.sort_by(|&a, &b| conf(b).total_cmp(&conf(a)).then(a.cmp(&b)));
            ranked.truncate(k);
            ranked
        }
        PseudoStrategy::Threshold(p) => threshold(p),
        PseudoStrategy::Curriculum { p_start, p_end } => {
            let t = epoch_fraction.clamp(0.0, 1.0);
            threshold(p_start + (p_end - p_start) * t)
        }
        PseudoStrategy::AllForeground => foreground.to_vec(),
    };
    selected.sort_unstable();
    selected
}

/// Keeps `j` iff its box has IoU at most `lambda` with every foreground ground-truth box.
pub fn suppress_overlap(
    selected: &[usize],
    old_preds: &LabeledSet,
    gt: &LabeledSet,
    lambda: f64,
) -> Vec<usize> {
    selected
        .iter()
        .copied()
        .filter(|&j| {
            let b = &old_preds.get(j).bbox;
            gt.foreground().all(|t| iou(b, &t.bbox) <= lambda)
        })
        .collect()
}

/// A merged target set and the bookkeeping of how it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct Distilled {
    pub targets: LabeledSet,
    /// Query indices of the old model that became pseudo labels, ascending.
    pub pseudo_queries: Vec<usize>,
    /// Set when pseudo labels had to be dropped to fit into `N` slots.
    pub truncated: bool,
}

/// Ground truth ⊕ pseudo labels ⊕ background padding, `N` entries in total.
pub fn build_distilled(
    gt: &LabeledSet,
    old_preds: &LabeledSet,
    cfg: &PseudoConfig,
    epoch_fraction: f64,
) -> Result<Distilled> {
    let n = gt.len();
    if old_preds.len() != n {
        return Err(Error::LengthMismatch {
            what: "ground truth vs old predictions",
            left: n,
            right: old_preds.len(),
        });
    }
    let num_classes = gt
        .num_classes()
        .or(old_preds.num_classes())
        .ok_or_else(|| Error::Malformed("empty label set".into()))?;
    let foreground = foreground_indices(old_preds);
    let selected = select_confident(&foreground, old_preds, cfg.strategy, epoch_fraction);
    let mut kept = suppress_overlap(&selected, old_preds, gt, cfg.lambda);

    let mut items: Vec<Target> = gt
        .iter()
        .filter(|t| t.is_foreground())
        .cloned()
        .collect();
    if items.len() > n {
        return Err(Error::CapacityExceeded {
            len: items.len(),
            capacity: n,
        });
    }

    // A pseudo label identical to a target already present carries no new label.
    kept.retain(|&j| {
        let p = old_preds.get(j);
        !items
            .iter()
            .any(|t| t.category() == p.category() && t.bbox == p.bbox)
    });
    let mut unique: Vec<usize> = Vec::with_capacity(kept.len());
    for &j in &kept {
        let p = old_preds.get(j);
        let dup = unique.iter().any(|&k| {
            let q = old_preds.get(k);
            q.category() == p.category() && q.bbox == p.bbox
        });
        if !dup {
            unique.push(j);
        }
    }
    let mut kept = unique;

    let room = n - items.len();
    let truncated = kept.len() > room;
    if truncated {
        let conf = |j: usize| old_preds.get(j).dist.confidence();
        let mut ranked = kept.clone();
        ranked.sort_by(|&a, &b| conf(b).total_cmp(&conf(a)).then(a.cmp(&b)));
        ranked.truncate(room);
        ranked.sort_unstable();
        kept = ranked;
    }

    items.extend(kept.iter().map(|&j| {
        let old = old_preds.get(j);
        Target {
            dist: old.dist.clone(),
            bbox: old.bbox,
            origin: Origin::Pseudo,
        }
    }));
    let targets = pad_to_n(items, n, num_classes)?;
    Ok(Distilled {
        targets,
        pseudo_queries: kept,
        truncated,
    })
}
