//! Synthetic detection data for the toy detector.
//!
//! Each category owns a unit prototype vector and a template box. An image
//! holds a few distinct categories; its feature is the scaled sum of their
//! prototypes plus Gaussian noise, and each object's box is a jittered copy
//! of its category template.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, CategoryInfo, Dataset, FeatureStore, Image};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Standard deviation of the per-coordinate feature noise.
    pub noise: f64,
    /// Template box side lengths are drawn from `[size_min, size_max]`.
    pub size_min: f64,
    pub size_max: f64,
    /// Relative jitter applied to template centers and sizes.
    pub jitter: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            feature_dim: 64,
            num_classes: 8,
            min_objects: 1,
            max_objects: 3,
            noise: 0.1,
            size_min: 0.04,
            size_max: 0.4,
            jitter: 0.05,
            image_width: 640,
            image_height: 640,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.feature_dim == 0 || self.num_classes == 0 {
            return bad("feature_dim and num_classes must be positive");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > self.num_classes {
            return bad("need 1 <= min_objects <= max_objects <= num_classes");
        }
        if !(self.noise >= 0.0) || !(self.jitter >= 0.0 && self.jitter < 0.5) {
            return bad("noise must be >= 0 and jitter in [0, 0.5)");
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max < 1.0) {
            return bad("need 0 < size_min <= size_max < 1");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive");
        }
        Ok(())
    }
}

/// Prototypes and template boxes shared by every image drawn from one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: SynthConfig,
    pub prototypes: Vec<Vec<f64>>,
    pub templates: Vec<BoundingBox>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl SyntheticWorld {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let d = config.feature_dim;
        // Gram-Schmidt while the dimension allows it, plain unit vectors after.
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(config.num_classes);
        for c in 0..config.num_classes {
            let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            if c < d {
                for p in &prototypes {
                    let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
                }
            }
            normalize(&mut v);
            prototypes.push(v);
        }
        let templates = (0..config.num_classes)
            .map(|_| {
                let w = rng.random_range(config.size_min..=config.size_max);
                let h = rng.random_range(config.size_min..=config.size_max);
                let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
                let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
                BoundingBox { cx, cy, w, h }
            })
            .collect();
        Ok(SyntheticWorld {
            config,
            prototypes,
            templates,
        })
    }

    /// `Σ_c prototype_c / sqrt(k)` plus isotropic noise.
    pub fn render_feature(&self, categories: &[usize], rng: &mut impl Rng) -> Vec<f64> {
        let d = self.config.feature_dim;
        let mut f = vec![0.0; d];
        for &c in categories {
            f.iter_mut().zip(&self.prototypes[c]).for_each(|(a, b)| *a += b);
        }
        if categories.len() > 1 {
            let s = (categories.len() as f64).sqrt();
            f.iter_mut().for_each(|x| *x /= s);
        }
        if self.config.noise > 0.0 {
            let noise = Normal::new(0.0, self.config.noise).expect("checked noise");
            f.iter_mut().for_each(|x| *x += noise.sample(rng));
        }
        f
    }

    fn jittered_box(&self, c: usize, rng: &mut impl Rng) -> BoundingBox {
        let t = self.templates[c];
        let j = self.config.jitter;
        let w = (t.w * (1.0 + rng.random_range(-j..=j))).clamp(1e-3, 1.0);
        let h = (t.h * (1.0 + rng.random_range(-j..=j))).clamp(1e-3, 1.0);
        let cx = (t.cx + t.w * rng.random_range(-j..=j)).clamp(w / 2.0, 1.0 - w / 2.0);
        let cy = (t.cy + t.h * rng.random_range(-j..=j)).clamp(h / 2.0, 1.0 - h / 2.0);
        BoundingBox { cx, cy, w, h }
    }

    /// Draws `n` images with ids `first_id..first_id + n`.
    pub fn generate(&self, n: usize, first_id: u64, seed: u64) -> (Dataset, FeatureStore) {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pw, ph) = (cfg.image_width as f64, cfg.image_height as f64);
        let mut images = Vec::with_capacity(n);
        let mut features = FeatureStore::new();
        let mut next_ann = first_id * 16;
        for k in 0..n as u64 {
            let id = first_id + k;
            let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
            let mut cats: Vec<usize> = sample(&mut rng, cfg.num_classes, count).into_vec();
            cats.sort_unstable();
            let annotations = cats
                .iter()
                .map(|&c| {
                    let bbox = self.jittered_box(c, &mut rng);
                    next_ann += 1;
                    Annotation {
                        id: next_ann,
                        category: c,
                        bbox,
                        area: bbox.w * pw * bbox.h * ph,
                    }
                })
                .collect();
            features.insert(id, self.render_feature(&cats, &mut rng));
            images.push(Image {
                id,
                width: cfg.image_width,
                height: cfg.image_height,
                annotations,
            });
        }
        (
            Dataset {
                categories: self.category_infos(),
                images,
            },
            features,
        )
    }

    pub fn category_infos(&self) -> Vec<CategoryInfo> {
        (0..self.config.num_classes)
            .map(|c| CategoryInfo {
                source_id: c as u64 + 1,
                name: format!("class_{c}"),
            })
            .collect()
    }

    /// Features for an existing dataset, rendered from each image's annotated categories.
    pub fn features_for(&self, dataset: &Dataset, seed: u64) -> Result<FeatureStore> {
        if dataset.num_classes() > self.config.num_classes {
            return Err(Error::InvalidConfig(format!(
                "feature renderer covers {} categories, dataset has {}",
                self.config.num_classes,
                dataset.num_classes()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(dataset
            .images
            .iter()
            .map(|img| {
                let mut cats: Vec<usize> = img.annotations.iter().map(|a| a.category).collect();
                cats.sort_unstable();
                cats.dedup();
                (img.id, self.render_feature(&cats, &mut rng))
            })
            .collect())
    }
}

/// Generates `n_images` training images from `config`.
pub fn synth_generate(config: SynthConfig, n_images: usize) -> Result<(Dataset, FeatureStore)> {
    let world = SyntheticWorld::new(config)?;
    Ok(world.generate(n_images, 0, config.seed.wrapping_add(1)))
}

/// Train and test sets drawn from one synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthBenchmark {
    /// Generator settings; `seed` is replaced by the run seed.
    pub synth: SynthConfig,
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for SynthBenchmark {
    fn default() -> Self {
        SynthBenchmark {
            synth: SynthConfig::default(),
            train_images: 400,
            test_images: 200,
        }
    }
}

/// Test image ids start here so they never collide with training ids.
pub const TEST_ID_OFFSET: u64 = 100_000;

impl SynthBenchmark {
    /// `(train, train_features, test, test_features)` for one seed.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, FeatureStore, Dataset, FeatureStore)> {
        if self.train_images == 0 || self.test_images == 0 {
            return Err(Error::InvalidConfig("train_images and test_images must be positive".into()));
        }
        if self.train_images as u64 > TEST_ID_OFFSET {
            return Err(Error::InvalidConfig(format!(
                "at most {TEST_ID_OFFSET} training images"
            )));
        }
        let world = SyntheticWorld::new(SynthConfig { seed, ..self.synth })?;
        let (train, train_f) = world.generate(self.train_images, 0, seed.wrapping_add(100));
        let (test, test_f) = world.generate(self.test_images, TEST_ID_OFFSET, seed.wrapping_add(200));
        Ok((train, train_f, test, test_f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_object_without_noise_is_its_prototype() {
        let cfg = SynthConfig {
            noise: 0.0,
            min_objects: 1,
            max_objects: 1,
            ..Default::default()
        };
        let world = SyntheticWorld::new(cfg).unwrap();
        let (data, feats) = world.generate(20, 0, 3);
        for img in &data.images {
            let c = img.annotations[0].category;
            assert_eq!(feats[&img.id], world.prototypes[c]);
        }
    }

    #[test]
    fn prototypes_are_orthonormal() {
        let world = SyntheticWorld::new(SynthConfig::default()).unwrap();
        for (a, pa) in world.prototypes.iter().enumerate() {
            for (b, pb) in world.prototypes.iter().enumerate() {
                let dot: f64 = pa.iter().zip(pb).map(|(x, y)| x * y).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_seeded_and_valid() {
        let cfg = SynthConfig::default();
        let a = synth_generate(cfg, 50).unwrap();
        let b = synth_generate(cfg, 50).unwrap();
        assert_eq!(a, b);
        let other = synth_generate(SynthConfig { seed: 1, ..cfg }, 50).unwrap();
        assert_ne!(a.0, other.0);
        a.0.check().unwrap();
        for img in &a.0.images {
            assert!((1..=3).contains(&img.annotations.len()));
            let mut cats: Vec<usize> = img.annotations.iter().map(|x| x.category).collect();
            cats.dedup();
            assert_eq!(cats.len(), img.annotations.len());
            for ann in &img.annotations {
                let c = ann.bbox.to_corners();
                assert!(c.x0 >= -1e-12 && c.x1 <= 1.0 + 1e-12 && c.y0 >= -1e-12 && c.y1 <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn benchmark_sets_do_not_share_ids() {
        let b = SynthBenchmark {
            train_images: 30,
            test_images: 10,
            ..Default::default()
        };
        let (train, tf, test, sf) = b.generate(5).unwrap();
        assert_eq!((train.images.len(), test.images.len()), (30, 10));
        assert!(tf.keys().all(|id| !sf.contains_key(id)));
        assert_eq!(b.generate(5).unwrap().0, train);
        assert_ne!(b.generate(6).unwrap().0, train);
    }

    #[test]
    fn linear_probe_recovers_present_categories() {
        let cfg = SynthConfig::default();
        let world = SyntheticWorld::new(cfg).unwrap();
        let (train, train_f) = world.generate(400, 0, 10);
        let (test, test_f) = world.generate(200, 1000, 11);
        let d = cfg.feature_dim;
        for c in 0..cfg.num_classes {
            // Logistic regression by full-batch gradient descent.
            let mut w = vec![0.0; d + 1];
            let label = |img: &Image| img.annotations.iter().any(|a| a.category == c) as u8 as f64;
            for _ in 0..300 {
                let mut g = vec![0.0; d + 1];
                for img in &train.images {
                    let x = &train_f[&img.id];
                    let z = w[d] + w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    let err = crate::prediction::sigmoid(z) - label(img);
                    g[..d].iter_mut().zip(x).for_each(|(gi, xi)| *gi += err * xi);
                    g[d] += err;
                }
                w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= 2.0 * gi / train.images.len() as f64);
            }
            let correct = test
                .images
                .iter()
                .filter(|img| {
                    let x = &test_f[&img.id];
                    let z = w[d] + w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    (z > 0.0) == (label(img) > 0.5)
                })
                .count();
            assert!(correct as f64 / test.images.len() as f64 >= 0.95, "category {c}: {correct}");
        }
    }
}
