//! Set-prediction loss, the classical token-wise distillation loss and the
//! detector distillation loss, each with analytic gradients.
//!
//! Gradients are taken with respect to the detector's pre-softmax logits and
//! pre-sigmoid box parameters, so any head that produces [`Predictions`] can
//! back-propagate through them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_loss_with_grad, DEFAULT_GAMMA_IOU, DEFAULT_GAMMA_L1};
use crate::labels::LabeledSet;
use crate::matching::{build_cost, hungarian, Assignment};
use crate::prediction::Predictions;

/// Probability floor applied inside `log` for targets with positive mass.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma_iou: f64,
    pub gamma_l1: f64,
    /// Weight of the cross-entropy term for background targets.
    pub background_class_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma_iou: DEFAULT_GAMMA_IOU,
            gamma_l1: DEFAULT_GAMMA_L1,
            background_class_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn with_gammas(gamma_iou: f64, gamma_l1: f64) -> Self {
        LossConfig {
            gamma_iou,
            gamma_l1,
            ..Default::default()
        }
    }
}

/// Loss value split into its class and box terms, with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub class_term: f64,
    pub box_term: f64,
    /// `N × (C + 1)`, w.r.t. pre-softmax logits.
    pub grad_logits: Vec<Vec<f64>>,
    /// `N × 4`, w.r.t. pre-sigmoid box parameters.
    pub grad_box_raw: Vec<[f64; 4]>,
    /// Set when a log-probability was floored at [`PROB_FLOOR`].
    pub clamped: bool,
}

impl LossReport {
    pub fn zeros(n: usize, width: usize) -> Self {
        LossReport {
            total: 0.0,
            class_term: 0.0,
            box_term: 0.0,
            grad_logits: vec![vec![0.0; width]; n],
            grad_box_raw: vec![[0.0; 4]; n],
            clamped: false,
        }
    }

    /// Accumulates another report computed on the same predictions.
    pub fn add(&mut self, other: &LossReport) {
        self.class_term += other.class_term;
        self.box_term += other.box_term;
        self.total = self.class_term + self.box_term;
        self.clamped |= other.clamped;
        for (a, b) in self.grad_logits.iter_mut().zip(&other.grad_logits) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.grad_box_raw.iter_mut().zip(&other.grad_box_raw) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.class_term *= k;
        self.box_term *= k;
        self.total = self.class_term + self.box_term;
        self.grad_logits.iter_mut().flatten().for_each(|g| *g *= k);
        self.grad_box_raw.iter_mut().flatten().for_each(|g| *g *= k);
    }
}

/// Adds `weight · Σ_{c∈support} −q(c) log p̂(c)` for query `j` to the report.
fn soft_cross_entropy(
    preds: &Predictions,
    j: usize,
    target: &[f64],
    support: usize,
    weight: f64,
    report: &mut LossReport,
) {
    let log_p = preds.log_probs(j);
    let p = preds.dist(j).probs();
    let floor = PROB_FLOOR.ln();
    let mut mass = 0.0;
    let mut active = vec![false; target.len()];
    for c in 0..support {
        let q = target[c];
        if q <= 0.0 {
            continue;
        }
        if log_p[c] < floor {
            report.class_term -= weight * q * floor;
            report.clamped = true;
        } else {
            report.class_term -= weight * q * log_p[c];
            mass += q;
            active[c] = true;
        }
    }
    let g = &mut report.grad_logits[j];
    for k in 0..target.len() {
        let own = if active[k] { target[k] } else { 0.0 };
        g[k] += weight * (p[k] * mass - own);
    }
}

fn add_box_term(
    preds: &Predictions,
    j: usize,
    target: &crate::geometry::BoundingBox,
    cfg: &LossConfig,
    report: &mut LossReport,
) -> Result<()> {
    let pred_box = preds.bbox(j);
    let (value, grad) = box_loss_with_grad(pred_box, target, cfg.gamma_iou, cfg.gamma_l1)?;
    report.box_term += value;
    let b = pred_box.as_array();
    for k in 0..4 {
        report.grad_box_raw[j][k] += grad[k] * b[k] * (1.0 - b[k]);
    }
    Ok(())
}

fn check_lengths(preds: &Predictions, targets: &LabeledSet) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs targets",
            left: preds.len(),
            right: targets.len(),
        });
    }
    if let Some(c) = targets.num_classes() {
        if c != preds.num_classes() {
            return Err(Error::LengthMismatch {
                what: "class count",
                left: preds.num_classes(),
                right: c,
            });
        }
    }
    Ok(())
}

/// `Σ_i ⟨−log p̂_{σ_i}, p_i⟩ + 1{c(p_i) ≠ φ} · box_loss(b̂_{σ_i}, b_i)`.
pub fn detr_loss(
    preds: &Predictions,
    targets: &LabeledSet,
    sigma: &Assignment,
    cfg: &LossConfig,
) -> Result<LossReport> {
    check_lengths(preds, targets)?;
    sigma.validate(targets.len())?;
    let width = preds.num_classes() + 1;
    let mut report = LossReport::zeros(preds.len(), width);
    for (i, t) in targets.iter().enumerate() {
        let j = sigma.sigma[i];
        let foreground = t.is_foreground();
        let weight = if foreground {
            1.0
        } else {
            cfg.background_class_weight
        };
        soft_cross_entropy(preds, j, t.dist.probs(), width, weight, &mut report);
        if foreground {
            add_box_term(preds, j, &t.bbox, cfg, &mut report)?;
        }
    }
    report.total = report.class_term + report.box_term;
    Ok(report)
}

/// Token-wise distillation against the old model's outputs for the same queries.
///
/// The class term is `Σ_j Σ_c −p̂^old_j(c) log p̂_j(c)`, summed over object
/// categories only unless `include_background` is set; every token also
/// regresses onto the old model's box.
pub fn classical_kd_loss(
    preds: &Predictions,
    old_preds: &LabeledSet,
    cfg: &LossConfig,
    include_background: bool,
) -> Result<LossReport> {
    check_lengths(preds, old_preds)?;
    let width = preds.num_classes() + 1;
    let support = if include_background { width } else { width - 1 };
    let mut report = LossReport::zeros(preds.len(), width);
    for (j, old) in old_preds.iter().enumerate() {
        soft_cross_entropy(preds, j, old.dist.probs(), support, 1.0, &mut report);
        add_box_term(preds, j, &old.bbox, cfg, &mut report)?;
    }
    report.total = report.class_term + report.box_term;
    Ok(report)
}

/// Matches the distilled label set to the predictions and applies [`detr_loss`].
pub fn dkd_loss(
    preds: &Predictions,
    distilled: &LabeledSet,
    cfg: &LossConfig,
) -> Result<(Assignment, LossReport)> {
    check_lengths(preds, distilled)?;
    let cost = build_cost(distilled, &preds.to_labeled(), cfg.gamma_iou, cfg.gamma_l1)?;
    let sigma = hungarian(&cost)?;
    let report = detr_loss(preds, distilled, &sigma, cfg)?;
    Ok((sigma, report))
}
