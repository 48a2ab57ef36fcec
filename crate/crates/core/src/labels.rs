//! Class distributions, padded label sets and the background class.
//!
//! A [`ClassDistribution`] over `C` object categories has `C + 1` entries;
//! the last one is the background class. Every label set, whether it holds
//! ground truth, distilled targets or model predictions, has exactly one
//! entry per query.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// A category slot: an object category index or the background class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Object(usize),
    Background,
}

impl Category {
    pub fn is_foreground(self) -> bool {
        matches!(self, Category::Object(_))
    }

    pub fn object(self) -> Option<usize> {
        match self {
            Category::Object(c) => Some(c),
            Category::Background => None,
        }
    }
}

/// Probability vector over `C` categories plus background at index `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

const SUM_TOLERANCE: f64 = 1e-9;

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Malformed(format!(
                "class distribution needs at least 2 entries, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Malformed("negative or non-finite probability".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Malformed(format!("probabilities sum to {sum}")));
        }
        Ok(ClassDistribution { probs })
    }

    /// Builds a distribution from softmax output without re-validating.
    pub(crate) fn from_softmax(probs: Vec<f64>) -> Self {
        ClassDistribution { probs }
    }

    pub fn one_hot(category: Category, num_classes: usize) -> Result<Self> {
        let mut probs = vec![0.0; num_classes + 1];
        match category {
            Category::Object(c) if c < num_classes => probs[c] = 1.0,
            Category::Object(c) => {
                return Err(Error::CategoryOutOfRange {
                    index: c,
                    num_classes,
                })
            }
            Category::Background => probs[num_classes] = 1.0,
        }
        Ok(ClassDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Number of object categories `C` (the vector has `C + 1` entries).
    pub fn num_classes(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn background(&self) -> f64 {
        self.probs[self.num_classes()]
    }

    /// Highest-probability object category and its probability, lowest index on ties.
    pub fn best_object(&self) -> (usize, f64) {
        let mut best = (0, self.probs[0]);
        for (c, &p) in self.probs[..self.num_classes()].iter().enumerate().skip(1) {
            if p > best.1 {
                best = (c, p);
            }
        }
        best
    }

    /// Confidence of a foreground prediction: the largest object-category probability.
    pub fn confidence(&self) -> f64 {
        self.best_object().1
    }

    /// The encoded class: the best object category when it strictly beats
    /// background, otherwise background. This is the single foreground
    /// predicate shared by matching, distillation and evaluation.
    pub fn category(&self) -> Category {
        let (c, p) = self.best_object();
        if p > self.background() {
            Category::Object(c)
        } else {
            Category::Background
        }
    }

    pub fn is_foreground(&self) -> bool {
        self.category().is_foreground()
    }

    pub fn dot(&self, other: &ClassDistribution) -> f64 {
        self.probs.iter().zip(&other.probs).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    GroundTruth,
    Pseudo,
    BackgroundPad,
    /// Model output; only used for prediction sets.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    #[serde(rename = "p")]
    pub dist: ClassDistribution,
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BoundingBox,
    pub origin: Origin,
}

mod box_array {
    use super::BoundingBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BoundingBox, s: S) -> Result<S::Ok, S::Error> {
        b.as_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BoundingBox, D::Error> {
        let v = <[f64; 4]>::deserialize(d)?;
        BoundingBox::from_array(v).map_err(serde::de::Error::custom)
    }
}

impl Target {
    pub fn background(num_classes: usize) -> Self {
        Target {
            dist: ClassDistribution::one_hot(Category::Background, num_classes)
                .expect("background is always in range"),
            bbox: BoundingBox::ZERO,
            origin: Origin::BackgroundPad,
        }
    }

    pub fn category(&self) -> Category {
        self.dist.category()
    }

    pub fn is_foreground(&self) -> bool {
        self.dist.is_foreground()
    }

    fn check_origin(&self) -> Result<()> {
        let ok = match self.origin {
            Origin::GroundTruth => {
                self.is_foreground() && self.dist.probs().iter().all(|p| *p == 0.0 || *p == 1.0)
            }
            Origin::BackgroundPad => !self.is_foreground() && self.dist.background() == 1.0 && self.bbox == BoundingBox::ZERO,
            Origin::Pseudo => self.is_foreground(),
            Origin::Prediction => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Malformed(format!(
                "target with origin {:?} violates its invariant",
                self.origin
            )))
        }
    }
}

/// A one-hot target. Background yields a padding target with the zero box.
pub fn one_hot(category: Category, bbox: BoundingBox, num_classes: usize) -> Result<Target> {
    let dist = ClassDistribution::one_hot(category, num_classes)?;
    Ok(match category {
        Category::Background => Target {
            dist,
            bbox: BoundingBox::ZERO,
            origin: Origin::BackgroundPad,
        },
        Category::Object(_) => Target {
            dist,
            bbox,
            origin: Origin::GroundTruth,
        },
    })
}

/// A length-`N` sequence of targets or predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    items: Vec<Target>,
}

impl LabeledSet {
    /// Wraps items without padding; checks the per-origin invariants.
    pub fn new(items: Vec<Target>) -> Result<Self> {
        let set = LabeledSet { items };
        set.validate()?;
        Ok(set)
    }

    pub(crate) fn from_items_unchecked(items: Vec<Target>) -> Self {
        LabeledSet { items }
    }

    pub fn validate(&self) -> Result<()> {
        let num_classes = self.items.first().map(|t| t.dist.num_classes());
        for t in &self.items {
            if Some(t.dist.num_classes()) != num_classes {
                return Err(Error::LengthMismatch {
                    what: "class distribution width",
                    left: t.dist.num_classes(),
                    right: num_classes.unwrap_or(0),
                });
            }
            t.check_origin()?;
        }
        let fg: Vec<(usize, &Target)> = self
            .items
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t.origin, Origin::GroundTruth | Origin::Pseudo))
            .collect();
        for (a, (i, ti)) in fg.iter().enumerate() {
            for (j, tj) in &fg[a + 1..] {
                if ti.category() == tj.category() && ti.bbox == tj.bbox {
                    return Err(Error::DuplicateTarget {
                        first: *i,
                        second: *j,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_queries(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Target] {
        &self.items
    }

    pub fn get(&self, i: usize) -> &Target {
        &self.items[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Target> {
        self.items.iter()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.items.first().map(|t| t.dist.num_classes())
    }

    /// Targets whose encoded class is not background, in order.
    pub fn foreground(&self) -> impl Iterator<Item = &Target> {
        self.items.iter().filter(|t| t.is_foreground())
    }

    pub fn count_origin(&self, origin: Origin) -> usize {
        self.items.iter().filter(|t| t.origin == origin).count()
    }

    /// One JSON object per line: `{"p": [...], "box": [cx,cy,w,h], "origin": "..."}`.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for t in &self.items {
            out.push_str(&serde_json::to_string(t).expect("targets always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let items = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let t: Target = serde_json::from_str(l)?;
                ClassDistribution::new(t.dist.probs.clone())?;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledSet::new(items)
    }
}

impl<'a> IntoIterator for &'a LabeledSet {
    type Item = &'a Target;
    type IntoIter = std::slice::Iter<'a, Target>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

/// Appends background padding so the set holds exactly `n` targets.
pub fn pad_to_n(foreground: Vec<Target>, n: usize, num_classes: usize) -> Result<LabeledSet> {
    if foreground.len() > n {
        return Err(Error::CapacityExceeded {
            len: foreground.len(),
            capacity: n,
        });
    }
    let mut items = foreground;
    items.resize_with(n, || Target::background(num_classes));
    LabeledSet::new(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64) -> BoundingBox {
        BoundingBox::new(cx, 0.5, 0.2, 0.2).unwrap()
    }

    #[test]
    fn one_hot_examples() {
        let bg = one_hot(Category::Background, b(0.3), 10).unwrap();
        assert_eq!(bg.origin, Origin::BackgroundPad);
        assert_eq!(bg.bbox, BoundingBox::ZERO);
        assert_eq!(bg.dist.background(), 1.0);

        let t = one_hot(Category::Object(3), b(0.3), 10).unwrap();
        assert_eq!(t.dist.probs()[3], 1.0);
        assert_eq!(t.dist.probs().len(), 11);
        assert_eq!(t.dist.probs().iter().sum::<f64>(), 1.0);
        assert_eq!(t.category(), Category::Object(3));

        assert!(matches!(
            one_hot(Category::Object(10), b(0.3), 10),
            Err(Error::CategoryOutOfRange { index: 10, .. })
        ));
    }

    #[test]
    fn pad_examples() {
        let empty = pad_to_n(vec![], 5, 3).unwrap();
        assert_eq!(empty.len(), 5);
        assert_eq!(empty.count_origin(Origin::BackgroundPad), 5);

        let t1 = one_hot(Category::Object(0), b(0.3), 3).unwrap();
        let t2 = one_hot(Category::Object(1), b(0.6), 3).unwrap();
        let set = pad_to_n(vec![t1.clone(), t2.clone()], 4, 3).unwrap();
        assert_eq!(set.get(0), &t1);
        assert_eq!(set.get(1), &t2);
        assert_eq!(set.get(2).origin, Origin::BackgroundPad);
        assert_eq!(set.get(3).origin, Origin::BackgroundPad);

        let many: Vec<Target> = (0..6)
            .map(|i| one_hot(Category::Object(0), b(0.1 + 0.1 * i as f64), 3).unwrap())
            .collect();
        assert!(matches!(
            pad_to_n(many, 5, 3),
            Err(Error::CapacityExceeded { len: 6, capacity: 5 })
        ));
    }

    #[test]
    fn duplicate_foreground_rejected() {
        let t = one_hot(Category::Object(1), b(0.3), 3).unwrap();
        assert!(matches!(
            pad_to_n(vec![t.clone(), t], 4, 3),
            Err(Error::DuplicateTarget { first: 0, second: 1 })
        ));
    }

    #[test]
    fn foreground_predicate() {
        let d = ClassDistribution::new(vec![0.6, 0.1, 0.3]).unwrap();
        assert_eq!(d.category(), Category::Object(0));
        let d = ClassDistribution::new(vec![0.3, 0.3, 0.4]).unwrap();
        assert_eq!(d.category(), Category::Background);
        // A tie with background is not foreground.
        let d = ClassDistribution::new(vec![0.5, 0.0, 0.5]).unwrap();
        assert_eq!(d.category(), Category::Background);
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn origin_counts_sum_to_n() {
        let gt = one_hot(Category::Object(0), b(0.3), 2).unwrap();
        let pseudo = Target {
            dist: ClassDistribution::new(vec![0.1, 0.7, 0.2]).unwrap(),
            bbox: b(0.7),
            origin: Origin::Pseudo,
        };
        let set = pad_to_n(vec![gt, pseudo], 6, 2).unwrap();
        let total = set.count_origin(Origin::GroundTruth)
            + set.count_origin(Origin::Pseudo)
            + set.count_origin(Origin::BackgroundPad);
        assert_eq!(total, set.n_queries());
    }

    #[test]
    fn json_lines_roundtrip() {
        let gt = one_hot(Category::Object(1), b(0.3), 2).unwrap();
        let pseudo = Target {
            dist: ClassDistribution::new(vec![0.7, 0.0, 0.3]).unwrap(),
            bbox: b(0.7),
            origin: Origin::Pseudo,
        };
        let set = pad_to_n(vec![gt, pseudo], 3, 2).unwrap();
        let text = set.to_json_lines();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().starts_with(r#"{"p":[0.0,1.0,0.0],"box":[0.3,0.5,0.2,0.2],"origin":"ground_truth"}"#));
        assert_eq!(LabeledSet::from_json_lines(&text).unwrap(), set);
        assert!(LabeledSet::from_json_lines(r#"{"p":[0.2,0.2],"box":[0,0,0,0],"origin":"pseudo"}"#).is_err());
    }
}
