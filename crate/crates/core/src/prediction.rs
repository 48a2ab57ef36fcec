//! Raw detector outputs: per-query class logits and pre-sigmoid box parameters.

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::labels::{ClassDistribution, LabeledSet, Origin, Target};

/// Predictions of a query-based detector before and after its output heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    logits: Vec<Vec<f64>>,
    box_raw: Vec<[f64; 4]>,
    probs: Vec<ClassDistribution>,
    boxes: Vec<BoundingBox>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Predictions {
    pub fn new(logits: Vec<Vec<f64>>, box_raw: Vec<[f64; 4]>) -> Result<Self> {
        if logits.len() != box_raw.len() {
            return Err(Error::LengthMismatch {
                what: "logit rows vs box rows",
                left: logits.len(),
                right: box_raw.len(),
            });
        }
        let width = logits.first().map_or(0, Vec::len);
        if logits.iter().any(|l| l.len() != width || l.len() < 2) {
            return Err(Error::ShapeMismatch("ragged or too narrow logit rows".into()));
        }
        if logits.iter().flatten().chain(box_raw.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite raw output".into()));
        }
        let probs = logits
            .iter()
            .map(|l| ClassDistribution::from_softmax(softmax(l)))
            .collect();
        let boxes = box_raw
            .iter()
            .map(|r| BoundingBox {
                cx: sigmoid(r[0]),
                cy: sigmoid(r[1]),
                w: sigmoid(r[2]),
                h: sigmoid(r[3]),
            })
            .collect();
        Ok(Predictions {
            logits,
            box_raw,
            probs,
            boxes,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.first().map_or(0, |l| l.len() - 1)
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn box_raw(&self) -> &[[f64; 4]] {
        &self.box_raw
    }

    pub fn dist(&self, j: usize) -> &ClassDistribution {
        &self.probs[j]
    }

    pub fn bbox(&self, j: usize) -> &BoundingBox {
        &self.boxes[j]
    }

    pub fn log_probs(&self, j: usize) -> Vec<f64> {
        log_softmax(&self.logits[j])
    }

    /// The predictions as a label set (`origin = Prediction`).
    pub fn to_labeled(&self) -> LabeledSet {
        LabeledSet::from_items_unchecked(
            self.probs
                .iter()
                .zip(&self.boxes)
                .map(|(p, b)| Target {
                    dist: p.clone(),
                    bbox: *b,
                    origin: Origin::Prediction,
                })
                .collect(),
        )
    }

    /// Reorders queries so that query `j` of the result is query `perm[j]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Predictions {
        Predictions {
            logits: perm.iter().map(|&j| self.logits[j].clone()).collect(),
            box_raw: perm.iter().map(|&j| self.box_raw[j]).collect(),
            probs: perm.iter().map(|&j| self.probs[j].clone()).collect(),
            boxes: perm.iter().map(|&j| self.boxes[j]).collect(),
        }
    }
}
