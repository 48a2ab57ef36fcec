//! The incremental training loop.
//!
//! Each phase starts from the previous model, trains on the phase data plus
//! the stored exemplars, selects new exemplars and, in the calibrated mode,
//! fine-tunes on the exemplar memory alone. The previous model stays frozen
//! and only supplies predictions for distillation.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureStore, Image};
use crate::detector::{sgd_step, DetectorConfig, DetectorParams, Momentum};
use crate::distillation::{build_distilled, PseudoConfig, PseudoStrategy};
use crate::error::{Error, Result};
use crate::exemplar::{greedy_select, phase_budget, random_select, ExemplarMemory, MarginalUnit, DEFAULT_EPSILON};
use crate::labels::LabeledSet;
use crate::losses::{classical_kd_loss, dkd_loss, LossConfig, LossReport};
use crate::metrics::{detections_from_predictions, evaluate, fpp, Detection, EvalParams};
use crate::protocol::PhaseDataset;

/// Training recipe, from plain finetuning to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Ground truth only.
    Finetune,
    /// Ground truth plus token-wise distillation from the old model.
    ClassicalKd,
    /// Merged targets using every old foreground prediction, no selection or overlap filter.
    DkdNoSelection,
    /// Merged targets with selected pseudo labels.
    DkdNoEr,
    /// As above plus random exemplar replay.
    DkdEr,
    /// As above with KL-matched exemplars and a calibration stage.
    DkdErCalibrated,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Finetune,
        Mode::ClassicalKd,
        Mode::DkdNoSelection,
        Mode::DkdNoEr,
        Mode::DkdEr,
        Mode::DkdErCalibrated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Finetune => "finetune",
            Mode::ClassicalKd => "classical_kd",
            Mode::DkdNoSelection => "dkd_no_selection",
            Mode::DkdNoEr => "dkd_no_er",
            Mode::DkdEr => "dkd_er",
            Mode::DkdErCalibrated => "dkd_er_calibrated",
        }
    }

    pub fn from_name(name: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == name)
    }

    fn uses_replay(self) -> bool {
        matches!(self, Mode::DkdEr | Mode::DkdErCalibrated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationScope {
    /// Fine-tune every parameter.
    #[default]
    All,
    /// Fine-tune the class heads only.
    ClassHead,
}

/// The optimized objective is the per-image loss divided by the number of
/// queries, averaged over the mini-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Total epochs per phase, split between main training and calibration.
    pub epochs: usize,
    /// Share of `epochs` spent on calibration in the calibrated mode.
    pub calibration_fraction: f64,
    pub calibration_scope: CalibrationScope,
    /// Calibration learning rate as a multiple of `lr`.
    pub calibration_lr_scale: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub budget_fraction: f64,
    pub marginal_unit: MarginalUnit,
    pub marginal_epsilon: f64,
    pub pseudo: PseudoConfig,
    pub loss: LossConfig,
    /// Whether the classical distillation term also covers the background class.
    pub kd_include_background: bool,
    pub n_queries: usize,
    pub init_scale: f64,
    pub eval: EvalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::DkdErCalibrated,
            seed: 0,
            epochs: 200,
            calibration_fraction: 0.2,
            calibration_scope: CalibrationScope::All,
            calibration_lr_scale: 0.1,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            budget_fraction: 0.1,
            marginal_unit: MarginalUnit::Annotations,
            marginal_epsilon: DEFAULT_EPSILON,
            pseudo: PseudoConfig::default(),
            loss: LossConfig::default(),
            kd_include_background: false,
            n_queries: 25,
            init_scale: 0.01,
            eval: EvalParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 || self.n_queries == 0 {
            return bad("epochs, batch_size and n_queries must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.budget_fraction) {
            return bad(format!("budget_fraction must lie in [0, 1], got {}", self.budget_fraction));
        }
        if !(0.0..1.0).contains(&self.calibration_fraction) {
            return bad(format!(
                "calibration_fraction must lie in [0, 1), got {}",
                self.calibration_fraction
            ));
        }
        if !(self.calibration_lr_scale > 0.0 && self.calibration_lr_scale.is_finite()) {
            return bad("calibration_lr_scale must be positive".into());
        }
        if !(self.marginal_epsilon > 0.0) {
            return bad("marginal_epsilon must be positive".into());
        }
        self.pseudo.validate()
    }

    /// `(main, calibration)` epochs per phase.
    pub fn epoch_split(&self) -> (usize, usize) {
        if self.mode == Mode::DkdErCalibrated {
            let calib = (self.epochs as f64 * self.calibration_fraction).round() as usize;
            let calib = calib.min(self.epochs - 1);
            (self.epochs - calib, calib)
        } else {
            (self.epochs, 0)
        }
    }

    /// Pseudo-label settings actually used by the mode.
    pub fn effective_pseudo(&self) -> PseudoConfig {
        match self.mode {
            Mode::DkdNoSelection => PseudoConfig {
                strategy: PseudoStrategy::AllForeground,
                lambda: 1.0,
            },
            _ => self.pseudo,
        }
    }

    pub fn effective_budget(&self) -> f64 {
        if self.mode.uses_replay() {
            self.budget_fraction
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Main,
    Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub mean_loss: f64,
    /// Pseudo labels per image, averaged over the epoch.
    pub mean_pseudo: f64,
    /// Images whose pseudo labels had to be cut to fit the query budget.
    pub truncated: usize,
    /// Images where a log-probability hit the floor.
    pub clamped: usize,
}

/// One training image: its feature and its (phase-filtered) ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub id: u64,
    pub feature: Vec<f64>,
    pub targets: LabeledSet,
}

impl TrainItem {
    pub fn new(image: &Image, features: &FeatureStore, n_queries: usize, num_classes: usize) -> Result<Self> {
        let feature = features
            .get(&image.id)
            .ok_or_else(|| Error::Malformed(format!("no feature for image {}", image.id)))?
            .clone();
        let targets = image.targets(n_queries, num_classes).map_err(|e| match e {
            Error::CapacityExceeded { len, capacity } => Error::InvalidConfig(format!(
                "image {} has {len} annotations but only {capacity} queries",
                image.id
            )),
            other => other,
        })?;
        Ok(TrainItem {
            id: image.id,
            feature,
            targets,
        })
    }
}

/// Stored exemplars with the annotations of their origin phase.
#[derive(Debug, Clone, Default)]
pub struct ExemplarStore {
    pub items: Vec<TrainItem>,
    pub images: Vec<Image>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub phase: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    /// AP on the first phase's categories.
    pub ap_old: Option<f64>,
    pub fpp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub model: DetectorParams,
    pub exemplars: Vec<u64>,
    pub log: Vec<EpochLog>,
    /// Checksum of the frozen model before and after the phase.
    pub old_checksums: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseResult {
    pub outcome: PhaseOutcome,
    pub metrics: PhaseMetrics,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub phases: Vec<PhaseResult>,
    pub memory: ExemplarMemory,
}

impl BenchmarkResult {
    pub fn final_metrics(&self) -> &PhaseMetrics {
        &self.phases.last().expect("at least one phase").metrics
    }
}

fn derived_seed(seed: u64, phase: usize, salt: u64) -> u64 {
    seed ^ (phase as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

const SHUFFLE_SALT: u64 = 1;
const EXEMPLAR_SALT: u64 = 2;
const CALIBRATION_SALT: u64 = 3;

/// Targets and loss for one image in the main loop.
fn main_loss(
    cfg: &TrainConfig,
    pseudo: &PseudoConfig,
    model: &DetectorParams,
    item: &TrainItem,
    old: Option<&LabeledSet>,
    epoch_fraction: f64,
) -> Result<(LossReport, usize, bool)> {
    let preds = model.forward(&item.feature)?;
    match (cfg.mode, old) {
        (Mode::Finetune, _) | (_, None) => {
            let (_, r) = dkd_loss(&preds, &item.targets, &cfg.loss)?;
            Ok((r, 0, false))
        }
        (Mode::ClassicalKd, Some(old)) => {
            let (_, mut r) = dkd_loss(&preds, &item.targets, &cfg.loss)?;
            r.add(&classical_kd_loss(&preds, old, &cfg.loss, cfg.kd_include_background)?);
            Ok((r, 0, false))
        }
        (_, Some(old)) => {
            let d = build_distilled(&item.targets, old, pseudo, epoch_fraction)?;
            let (_, r) = dkd_loss(&preds, &d.targets, &cfg.loss)?;
            Ok((r, d.pseudo_queries.len(), d.truncated))
        }
    }
}

/// Mini-batch SGD over `items`; `loss` returns the per-image report and pseudo statistics.
#[allow(clippy::too_many_arguments)]
fn run_epochs<F>(
    model: &mut DetectorParams,
    items: &[&TrainItem],
    epochs: usize,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    phase: usize,
    stage: Stage,
    class_head_only: bool,
    mut loss: F,
    log: &mut Vec<EpochLog>,
) -> Result<()>
where
    F: FnMut(&DetectorParams, &TrainItem, f64) -> Result<(LossReport, usize, bool)>,
{
    if items.is_empty() || epochs == 0 {
        return Ok(());
    }
    let mut momentum = Momentum::new(model);
    let mut grad = DetectorParams::zeros(model.n_queries, model.num_classes, model.feature_dim);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let fraction = if epochs > 1 {
            epoch as f64 / (epochs - 1) as f64
        } else {
            0.0
        };
        let (mut total, mut pseudo, mut truncated, mut clamped) = (0.0, 0usize, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            grad.scale(0.0);
            // Batch mean of the per-query mean loss.
            let scale = 1.0 / (batch.len() * model.n_queries) as f64;
            for &k in batch {
                let item = items[k];
                let (report, n_pseudo, cut) = loss(model, item, fraction)?;
                total += report.total;
                pseudo += n_pseudo;
                truncated += usize::from(cut);
                clamped += usize::from(report.clamped);
                model.accumulate_gradient(&item.feature, &report, scale, &mut grad)?;
            }
            if class_head_only {
                grad.bbox.iter_mut().for_each(|g| *g = 0.0);
            }
            sgd_step(model, &grad, lr, &mut momentum, cfg.momentum);
        }
        let n = items.len() as f64;
        let entry = EpochLog {
            phase: phase + 1,
            stage,
            epoch,
            mean_loss: total / n,
            mean_pseudo: pseudo as f64 / n,
            truncated,
            clamped,
        };
        debug!("phase {} {:?} epoch {epoch}: loss {:.4}", phase + 1, stage, entry.mean_loss);
        log.push(entry);
    }
    if model.cls.iter().chain(&model.bbox).any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "training diverged in phase {} (non-finite parameters); lower lr",
            phase + 1
        )));
    }
    Ok(())
}

/// One phase: main training, exemplar selection and, if configured, calibration.
pub fn run_phase(
    cfg: &TrainConfig,
    phase: &PhaseDataset,
    features: &FeatureStore,
    memory: &mut ExemplarStore,
    old: Option<&DetectorParams>,
    init: Option<DetectorParams>,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    let i = phase.index;
    if i > 0 && old.is_none() {
        return Err(Error::MissingOldModel { phase: i + 1 });
    }
    if phase.images.is_empty() {
        return Err(Error::EmptyPhase { phase: i + 1 });
    }
    let mut model = match (old, init) {
        (Some(o), _) => o.clone(),
        (None, Some(m)) => m,
        (None, None) => {
            return Err(Error::InvalidConfig("phase 1 needs an initial model".into()));
        }
    };
    let old_checksum = old.map(DetectorParams::checksum);
    let (n, c) = (model.n_queries, model.num_classes);

    let current: Vec<TrainItem> = phase
        .images
        .iter()
        .map(|img| TrainItem::new(img, features, n, c))
        .collect::<Result<_>>()?;
    let items: Vec<&TrainItem> = current.iter().chain(memory.items.iter()).collect();

    // The old model is frozen, so its predictions are computed once per phase.
    let old_preds: BTreeMap<u64, LabeledSet> = match old {
        Some(o) if cfg.mode != Mode::Finetune => items
            .iter()
            .map(|it| Ok((it.id, o.forward(&it.feature)?.to_labeled())))
            .collect::<Result<_>>()?,
        _ => BTreeMap::new(),
    };

    // The first phase is plain training, shared by every mode.
    let (main_epochs, calib_epochs) = if i == 0 { (cfg.epochs, 0) } else { cfg.epoch_split() };
    let pseudo = cfg.effective_pseudo();
    let mut log = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, i, SHUFFLE_SALT));
    run_epochs(
        &mut model,
        &items,
        main_epochs,
        cfg.lr,
        cfg,
        &mut rng,
        i,
        Stage::Main,
        false,
        |m, item, ef| main_loss(cfg, &pseudo, m, item, old_preds.get(&item.id), ef),
        &mut log,
    )?;

    let budget = phase_budget(cfg.effective_budget(), phase.images.len());
    let exemplars = match cfg.mode {
        Mode::DkdErCalibrated => greedy_select(
            &phase.images,
            budget,
            &phase.categories,
            cfg.marginal_epsilon,
            cfg.marginal_unit,
        )?,
        Mode::DkdEr => random_select(&phase.images, budget, derived_seed(cfg.seed, i, EXEMPLAR_SALT))?,
        _ => Vec::new(),
    };
    for id in &exemplars {
        let k = phase
            .images
            .iter()
            .position(|img| img.id == *id)
            .expect("exemplars come from the phase images");
        memory.items.push(current[k].clone());
        memory.images.push(phase.images[k].clone());
    }

    if calib_epochs > 0 && !memory.items.is_empty() {
        let calib_items: Vec<&TrainItem> = memory.items.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, i, CALIBRATION_SALT));
        run_epochs(
            &mut model,
            &calib_items,
            calib_epochs,
            cfg.lr * cfg.calibration_lr_scale,
            cfg,
            &mut rng,
            i,
            Stage::Calibration,
            cfg.calibration_scope == CalibrationScope::ClassHead,
            |m, item, _| {
                let (_, r) = dkd_loss(&m.forward(&item.feature)?, &item.targets, &cfg.loss)?;
                Ok((r, 0, false))
            },
            &mut log,
        )?;
    }

    let old_checksums = match (old, old_checksum) {
        (Some(o), Some(before)) => {
            let after = o.checksum();
            if after != before {
                return Err(Error::InvalidPlan("old model changed during the phase".into()));
            }
            Some((before, after))
        }
        _ => None,
    };
    info!(
        "phase {} done: {} images, {} exemplars stored",
        i + 1,
        phase.images.len(),
        memory.items.len()
    );
    Ok(PhaseOutcome {
        model,
        exemplars,
        log,
        old_checksums,
    })
}

/// Detections of `model` on every image of `dataset`.
pub fn predict(model: &DetectorParams, dataset: &Dataset, features: &FeatureStore, max_dets: usize) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for img in &dataset.images {
        let f = features
            .get(&img.id)
            .ok_or_else(|| Error::Malformed(format!("no feature for image {}", img.id)))?;
        out.extend(detections_from_predictions(img.id, &model.forward(f)?, max_dets));
    }
    Ok(out)
}

/// Runs every phase in order and evaluates after each one on `test`.
pub fn run_benchmark(
    cfg: &TrainConfig,
    phases: &[PhaseDataset],
    features: &FeatureStore,
    test: &Dataset,
    test_features: &FeatureStore,
) -> Result<BenchmarkResult> {
    cfg.validate()?;
    let first = phases.first().ok_or(Error::EmptyDataset)?;
    let num_classes = test.num_classes();
    let feature_dim = features
        .values()
        .next()
        .map(Vec::len)
        .ok_or(Error::EmptyDataset)?;
    let det_cfg = DetectorConfig {
        n_queries: cfg.n_queries,
        num_classes,
        feature_dim,
        init_scale: cfg.init_scale,
    };
    let init = DetectorParams::init(&det_cfg, cfg.seed)?;
    let mut store = ExemplarStore::default();
    let mut memory = ExemplarMemory::new(cfg.effective_budget());
    let mut results: Vec<PhaseResult> = Vec::with_capacity(phases.len());
    let mut seen: Vec<usize> = Vec::new();
    let mut ap_old_first: Option<f64> = None;
    for phase in phases {
        let old = results.last().map(|r| &r.outcome.model);
        let outcome = run_phase(
            cfg,
            phase,
            features,
            &mut store,
            old,
            if old.is_none() { Some(init.clone()) } else { None },
        )?;
        memory.push_phase(outcome.exemplars.clone())?;
        seen.extend(&phase.categories);
        seen.sort_unstable();

        let detections = predict(&outcome.model, test, test_features, cfg.eval.max_dets)?;
        let all = evaluate(&detections, &test.images, &seen, &cfg.eval)?;
        let old_ap = evaluate(&detections, &test.images, &first.categories, &cfg.eval)?.ap;
        if phase.index == 0 {
            ap_old_first = old_ap;
        }
        let metrics = PhaseMetrics {
            phase: phase.index + 1,
            ap: all.ap,
            ap50: all.ap50,
            ap75: all.ap75,
            ap_s: all.ap_s,
            ap_m: all.ap_m,
            ap_l: all.ap_l,
            ap_old: old_ap,
            fpp: match (ap_old_first, old_ap) {
                (Some(a), Some(b)) => Some(fpp(a, b)),
                _ => None,
            },
        };
        info!("phase {} metrics: {:?}", phase.index + 1, metrics);
        results.push(PhaseResult {
            outcome,
            metrics,
            detections,
        });
    }
    Ok(BenchmarkResult {
        phases: results,
        memory,
    })
}
