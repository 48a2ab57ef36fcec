//! The run configuration: one JSON document describing data, split and training.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use iodkit::dataset::{Dataset, FeatureStore};
use iodkit::ingestion::load_coco;
use iodkit::protocol::{multi_phase_plan, split, PhaseDataset, PhasePlan, ProtocolMode, SplitManifest};
use iodkit::synth::{SynthBenchmark, SynthConfig, SyntheticWorld};
use iodkit::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_path_to_error::Segment;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SynthBenchmark),
    Coco(CocoData),
}

/// COCO annotation files; image features are rendered from each image's categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoData {
    pub train: PathBuf,
    /// Defaults to the training file.
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_feature_dim() -> usize {
    64
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub setup: String,
    pub mode: ProtocolMode,
    /// Defaults to the training seed.
    pub seed: Option<u64>,
    pub sample_fractions: Option<Vec<f64>>,
    /// A manifest written by `iodkit split`; overrides every other field.
    pub manifest: Option<PathBuf>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            setup: "6+2".into(),
            mode: ProtocolMode::Strict,
            seed: None,
            sample_fractions: None,
            manifest: None,
        }
    }
}

/// JSON pointer for a serde path, e.g. `/train/pseudo/lambda`.
fn pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// A loaded configuration plus the directory its relative paths are resolved against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| anyhow!("config error at {}: {}", pointer(e.path()), e.inner()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config = RunConfig::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig { config, base_dir })
    }

    /// Checks that serde cannot express, reported with the offending pointer.
    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| anyhow!("config error at /train: {e}"))?;
        match &self.data {
            DataConfig::Synthetic(s) => {
                s.synth
                    .validate()
                    .map_err(|e| anyhow!("config error at /data/synthetic/synth: {e}"))?;
                if s.train_images == 0 || s.test_images == 0 {
                    bail!("config error at /data/synthetic: train_images and test_images must be positive");
                }
            }
            DataConfig::Coco(c) => {
                if c.feature_dim == 0 {
                    bail!("config error at /data/coco/feature_dim: must be positive");
                }
                if !(c.noise >= 0.0 && c.noise.is_finite()) {
                    bail!("config error at /data/coco/noise: must be a finite value >= 0");
                }
            }
        }
        if self.protocol.manifest.is_none() {
            iodkit::protocol::parse_setup(&self.protocol.setup)
                .map_err(|e| anyhow!("config error at /protocol/setup: {e}"))?;
        }
        if let Some(f) = &self.protocol.sample_fractions {
            let total: f64 = f.iter().sum();
            if f.iter().any(|v| !(*v > 0.0)) || (total - 1.0).abs() > 1e-9 {
                bail!("config error at /protocol/sample_fractions: entries must be positive and sum to 1");
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes") + "\n"
    }

    /// sha256 of the canonical serialization; stored in checkpoints.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config always serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn protocol_seed(&self) -> u64 {
        self.protocol.seed.unwrap_or(self.train.seed)
    }
}

/// Everything a run needs: phase datasets, features and the evaluation set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub phases: Vec<PhaseDataset>,
    pub manifest: SplitManifest,
    pub features: FeatureStore,
    pub test: Dataset,
    pub test_features: FeatureStore,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Feature renderer for a COCO dataset.
pub fn coco_world(c: &CocoData, num_classes: usize, seed: u64) -> Result<SyntheticWorld> {
    let synth = SynthConfig {
        feature_dim: c.feature_dim,
        num_classes,
        max_objects: SynthConfig::default().max_objects.min(num_classes),
        noise: c.noise,
        seed,
        ..Default::default()
    };
    Ok(SyntheticWorld::new(synth)?)
}

/// Seed offsets of training and test features, shared with the synthetic benchmark.
pub const TRAIN_FEATURE_SEED: u64 = 100;
pub const TEST_FEATURE_SEED: u64 = 200;

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        resolve(&self.base_dir, p)
    }

    /// Training set, test set and their features.
    pub fn datasets(&self) -> Result<(Dataset, FeatureStore, Dataset, FeatureStore)> {
        let cfg = &self.config;
        let seed = cfg.train.seed;
        match &cfg.data {
            DataConfig::Synthetic(s) => Ok(s.generate(seed)?),
            DataConfig::Coco(c) => {
                let train_path = self.resolve(&c.train);
                let train = load_coco(&train_path).with_context(|| format!("loading {}", train_path.display()))?;
                let test = match &c.test {
                    Some(p) => {
                        let p = self.resolve(p);
                        load_coco(&p).with_context(|| format!("loading {}", p.display()))?
                    }
                    None => train.clone(),
                };
                if test.categories != train.categories {
                    bail!("train and test files must list the same categories");
                }
                let world = coco_world(c, train.num_classes(), seed)?;
                let features = world.features_for(&train, seed.wrapping_add(TRAIN_FEATURE_SEED))?;
                let test_features = world.features_for(&test, seed.wrapping_add(TEST_FEATURE_SEED))?;
                Ok((train, features, test, test_features))
            }
        }
    }

    pub fn plan(&self, num_classes: usize) -> Result<PhasePlan> {
        let p = &self.config.protocol;
        let plan = multi_phase_plan(&p.setup, num_classes, self.config.protocol_seed(), p.mode)
            .map_err(|e| anyhow!("config error at /protocol/setup: {e}"))?;
        Ok(match &p.sample_fractions {
            Some(f) => plan
                .with_sample_fractions(f.clone())
                .map_err(|e| anyhow!("config error at /protocol/sample_fractions: {e}"))?,
            None => plan,
        })
    }

    pub fn prepare(&self) -> Result<Prepared> {
        let (train, features, test, test_features) = self.datasets()?;
        let (phases, manifest) = match &self.config.protocol.manifest {
            Some(m) => {
                let path = self.resolve(m);
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let manifest = SplitManifest::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
                (manifest.to_phases(&train)?, manifest)
            }
            None => {
                let plan = self.plan(train.num_classes())?;
                let phases = split(&train, &plan)?;
                let manifest = SplitManifest::from_phases(&plan, &phases, &train);
                (phases, manifest)
            }
        };
        Ok(Prepared {
            phases,
            manifest,
            features,
            test,
            test_features,
        })
    }
}
