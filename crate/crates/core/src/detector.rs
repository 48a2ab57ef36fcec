//! A query-based toy detector: one linear class head and one linear box head
//! per query over a fixed-size image feature.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::LabeledSet;
use crate::losses::{dkd_loss, LossConfig, LossReport};
use crate::prediction::Predictions;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub n_queries: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Standard deviation of the initial weights.
    pub init_scale: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            n_queries: 25,
            num_classes: 8,
            feature_dim: 64,
            init_scale: 0.01,
        }
    }
}

/// Weights laid out query-major; the last column of every row is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub n_queries: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// `N × (C + 1) × (d + 1)`.
    pub cls: Vec<f64>,
    /// `N × 4 × (d + 1)`.
    pub bbox: Vec<f64>,
}

impl DetectorParams {
    pub fn zeros(n_queries: usize, num_classes: usize, feature_dim: usize) -> Self {
        let row = feature_dim + 1;
        DetectorParams {
            n_queries,
            num_classes,
            feature_dim,
            cls: vec![0.0; n_queries * (num_classes + 1) * row],
            bbox: vec![0.0; n_queries * 4 * row],
        }
    }

    /// Small random weights; box biases spread the initial query boxes over the image.
    pub fn init(cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        if cfg.n_queries == 0 || cfg.num_classes == 0 || cfg.feature_dim == 0 {
            return Err(Error::InvalidConfig("detector dimensions must be positive".into()));
        }
        if !(cfg.init_scale >= 0.0 && cfg.init_scale.is_finite()) {
            return Err(Error::InvalidConfig("init_scale must be a finite non-negative number".into()));
        }
        let mut p = Self::zeros(cfg.n_queries, cfg.num_classes, cfg.feature_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Normal::new(0.0, cfg.init_scale).expect("checked scale");
        let spread = Normal::new(0.0, 1.0).expect("unit normal");
        let row = cfg.feature_dim + 1;
        for v in p.cls.iter_mut() {
            *v = w.sample(&mut rng);
        }
        for q in 0..cfg.n_queries {
            for k in 0..4 {
                let base = (q * 4 + k) * row;
                for i in 0..cfg.feature_dim {
                    p.bbox[base + i] = w.sample(&mut rng);
                }
                // Centers spread around the image, sizes around 0.2.
                p.bbox[base + cfg.feature_dim] = if k < 2 {
                    spread.sample(&mut rng)
                } else {
                    -1.4 + 0.3 * spread.sample(&mut rng)
                };
            }
        }
        Ok(p)
    }

    fn row(&self) -> usize {
        self.feature_dim + 1
    }

    fn check_feature(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "feature has {} entries, detector expects {}",
                feature.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn check_shape(&self) -> Result<()> {
        let row = self.row();
        if self.cls.len() != self.n_queries * (self.num_classes + 1) * row
            || self.bbox.len() != self.n_queries * 4 * row
        {
            return Err(Error::ShapeMismatch("parameter vectors do not match declared dimensions".into()));
        }
        if self.cls.iter().chain(&self.bbox).any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn forward(&self, feature: &[f64]) -> Result<Predictions> {
        self.check_feature(feature)?;
        let row = self.row();
        let width = self.num_classes + 1;
        let affine = |w: &[f64]| -> f64 {
            let mut s = w[self.feature_dim];
            for (a, b) in w[..self.feature_dim].iter().zip(feature) {
                s += a * b;
            }
            s
        };
        let mut logits = Vec::with_capacity(self.n_queries);
        let mut boxes = Vec::with_capacity(self.n_queries);
        for q in 0..self.n_queries {
            logits.push(
                (0..width)
                    .map(|k| affine(&self.cls[(q * width + k) * row..][..row]))
                    .collect(),
            );
            let mut b = [0.0; 4];
            for (k, v) in b.iter_mut().enumerate() {
                *v = affine(&self.bbox[(q * 4 + k) * row..][..row]);
            }
            boxes.push(b);
        }
        Predictions::new(logits, boxes)
    }

    /// Chains output gradients through the linear heads.
    pub fn backward(&self, feature: &[f64], report: &LossReport) -> Result<DetectorParams> {
        let mut g = Self::zeros(self.n_queries, self.num_classes, self.feature_dim);
        self.accumulate_gradient(feature, report, 1.0, &mut g)?;
        Ok(g)
    }

    /// Adds `scale ×` the parameter gradient of `report` into `acc`.
    pub fn accumulate_gradient(
        &self,
        feature: &[f64],
        report: &LossReport,
        scale: f64,
        acc: &mut DetectorParams,
    ) -> Result<()> {
        self.check_feature(feature)?;
        if report.grad_logits.len() != self.n_queries {
            return Err(Error::LengthMismatch {
                what: "gradient rows vs queries",
                left: report.grad_logits.len(),
                right: self.n_queries,
            });
        }
        let row = self.row();
        let width = self.num_classes + 1;
        let d = self.feature_dim;
        let outer = |dst: &mut [f64], g: f64| {
            if g == 0.0 {
                return;
            }
            let g = g * scale;
            for (t, x) in dst[..d].iter_mut().zip(feature) {
                *t += g * x;
            }
            dst[d] += g;
        };
        for q in 0..self.n_queries {
            for k in 0..width {
                outer(&mut acc.cls[(q * width + k) * row..][..row], report.grad_logits[q][k]);
            }
            for k in 0..4 {
                outer(&mut acc.bbox[(q * 4 + k) * row..][..row], report.grad_box_raw[q][k]);
            }
        }
        Ok(())
    }

    /// Matching, loss and parameter gradient for one image.
    pub fn dkd_gradient(
        &self,
        feature: &[f64],
        targets: &LabeledSet,
        cfg: &LossConfig,
    ) -> Result<(LossReport, DetectorParams)> {
        let preds = self.forward(feature)?;
        let (_, report) = dkd_loss(&preds, targets, cfg)?;
        let grad = self.backward(feature, &report)?;
        Ok((report, grad))
    }

    pub fn add_scaled(&mut self, other: &DetectorParams, k: f64) {
        for (a, b) in self.cls.iter_mut().zip(&other.cls) {
            *a += k * b;
        }
        for (a, b) in self.bbox.iter_mut().zip(&other.bbox) {
            *a += k * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.cls.iter_mut().chain(self.bbox.iter_mut()).for_each(|v| *v *= k);
    }

    pub fn num_params(&self) -> usize {
        self.cls.len() + self.bbox.len()
    }

    /// SHA-256 over the dimensions and the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for dim in [self.n_queries, self.num_classes, self.feature_dim] {
            h.update((dim as u64).to_le_bytes());
        }
        for v in self.cls.iter().chain(&self.bbox) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Heavy-ball momentum state.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    velocity: DetectorParams,
}

impl Momentum {
    pub fn new(like: &DetectorParams) -> Self {
        Momentum {
            velocity: DetectorParams::zeros(like.n_queries, like.num_classes, like.feature_dim),
        }
    }
}

/// `v ← μ·v + g; θ ← θ − lr·v`.
pub fn sgd_step(params: &mut DetectorParams, grads: &DetectorParams, lr: f64, state: &mut Momentum, mu: f64) {
    let v = &mut state.velocity;
    v.scale(mu);
    v.add_scaled(grads, 1.0);
    params.add_scaled(v, -lr);
}

pub const CHECKPOINT_FORMAT: &str = "iodkit-detector";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A saved detector with the hash of the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub phase: usize,
    pub checksum: String,
    pub params: DetectorParams,
}

impl Checkpoint {
    pub fn new(params: DetectorParams, phase: usize, config_hash: String) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash,
            phase,
            checksum: params.checksum(),
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoints always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Malformed(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        c.params.check_shape()?;
        if c.params.checksum() != c.checksum {
            return Err(Error::Malformed("checkpoint checksum mismatch".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
