//! COCO-style average precision and forgetting percentage points.

use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::prediction::Predictions;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category: usize,
    pub score: f64,
    pub bbox: BoundingBox,
}

/// Keeps queries whose best object category beats background, best score first.
pub fn detections_from_predictions(image_id: u64, preds: &Predictions, max_dets: usize) -> Vec<Detection> {
    let mut dets: Vec<Detection> = (0..preds.len())
        .filter(|&j| preds.dist(j).is_foreground())
        .map(|j| {
            let (category, score) = preds.dist(j).best_object();
            Detection {
                image_id,
                category,
                score,
                bbox: *preds.bbox(j),
            }
        })
        .collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(max_dets);
    dets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub max_dets: usize,
    /// Pixel-area bands `[lo, hi]` for small, medium and large objects.
    pub area_small: (f64, f64),
    pub area_medium: (f64, f64),
    pub area_large: (f64, f64),
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            iou_thresholds: (0..10).map(|i| 0.5 + i as f64 * 0.05).collect(),
            recall_points: 101,
            max_dets: 100,
            area_small: (0.0, 32.0 * 32.0),
            area_medium: (32.0 * 32.0, 96.0 * 96.0),
            area_large: (96.0 * 96.0, 1e10),
        }
    }
}

const AREA_ALL: (f64, f64) = (0.0, 1e10);

/// The AP family; fields are `None` when no category has ground truth in the band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    /// AP at each configured IoU threshold, all areas.
    pub per_threshold: Vec<Option<f64>>,
}

/// Per-image ground truth and detections of one category with their IoU matrix.
struct Cell {
    gt_area: Vec<f64>,
    det_area: Vec<f64>,
    det_score: Vec<f64>,
    /// `ious[d][g]`.
    ious: Vec<Vec<f64>>,
}

/// Detection ranks of one (category, area band, threshold) after matching.
struct Matched {
    scores: Vec<f64>,
    tp: Vec<bool>,
    ignore: Vec<bool>,
    n_gt: usize,
}

fn outside(area: f64, band: (f64, f64)) -> bool {
    area < band.0 || area > band.1
}

fn match_category(cells: &[Cell], band: (f64, f64), threshold: f64) -> Matched {
    let mut out = Matched {
        scores: Vec::new(),
        tp: Vec::new(),
        ignore: Vec::new(),
        n_gt: 0,
    };
    for cell in cells {
        let gt_ignore: Vec<bool> = cell.gt_area.iter().map(|&a| outside(a, band)).collect();
        // Ground truth in the band first; a stable sort keeps the original order otherwise.
        let mut order: Vec<usize> = (0..gt_ignore.len()).collect();
        order.sort_by_key(|&g| gt_ignore[g]);
        out.n_gt += gt_ignore.iter().filter(|i| !**i).count();
        let mut taken = vec![false; gt_ignore.len()];
        for d in 0..cell.det_score.len() {
            let mut best = threshold.min(1.0 - 1e-10);
            let mut hit: Option<usize> = None;
            for &g in &order {
                if taken[g] {
                    continue;
                }
                if let Some(m) = hit {
                    if !gt_ignore[m] && gt_ignore[g] {
                        break;
                    }
                }
                if cell.ious[d][g] < best {
                    continue;
                }
                best = cell.ious[d][g];
                hit = Some(g);
            }
            let (tp, ignore) = match hit {
                Some(g) => {
                    taken[g] = true;
                    (true, gt_ignore[g])
                }
                None => (false, outside(cell.det_area[d], band)),
            };
            out.scores.push(cell.det_score[d]);
            out.tp.push(tp);
            out.ignore.push(ignore);
        }
    }
    out
}

/// Interpolated precision averaged over the recall grid; `None` without ground truth.
fn precision_average(m: &Matched, recall_points: usize) -> Option<f64> {
    if m.n_gt == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..m.scores.len()).collect();
    idx.sort_by(|&a, &b| m.scores[b].total_cmp(&m.scores[a]));
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &k in &idx {
        if m.ignore[k] {
            continue;
        }
        if m.tp[k] {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / m.n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let step = 1.0 / (recall_points.max(2) - 1) as f64;
    let total: f64 = (0..recall_points)
        .map(|r| {
            let level = r as f64 * step;
            let pos = recall.partition_point(|&x| x < level);
            precision.get(pos).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / recall_points as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let kept: Vec<f64> = values.flatten().collect();
    if kept.is_empty() {
        None
    } else {
        Some(kept.iter().sum::<f64>() / kept.len() as f64)
    }
}

fn build_cells(
    detections: &[Detection],
    images: &[Image],
    categories: &[usize],
    max_dets: usize,
) -> Result<Vec<Vec<Cell>>> {
    let index: std::collections::HashMap<u64, usize> =
        images.iter().enumerate().map(|(k, i)| (i.id, k)).collect();
    let mut per_image: Vec<Vec<&Detection>> = vec![Vec::new(); images.len()];
    for d in detections {
        let k = *index.get(&d.image_id).ok_or_else(|| {
            Error::Malformed(format!("detection refers to unknown image {}", d.image_id))
        })?;
        if !(d.score.is_finite()) {
            return Err(Error::Malformed(format!("non-finite score on image {}", d.image_id)));
        }
        per_image[k].push(d);
    }
    for dets in per_image.iter_mut() {
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(max_dets);
    }
    Ok(categories
        .iter()
        .map(|&c| {
            images
                .iter()
                .zip(&per_image)
                .map(|(img, dets)| {
                    let (w, h) = (img.width as f64, img.height as f64);
                    let gts: Vec<_> = img.annotations.iter().filter(|a| a.category == c).collect();
                    let ds: Vec<_> = dets.iter().filter(|d| d.category == c).collect();
                    Cell {
                        gt_area: gts.iter().map(|a| a.area).collect(),
                        det_area: ds.iter().map(|d| d.bbox.w * w * d.bbox.h * h).collect(),
                        det_score: ds.iter().map(|d| d.score).collect(),
                        ious: ds
                            .iter()
                            .map(|d| gts.iter().map(|a| iou(&d.bbox, &a.bbox)).collect())
                            .collect(),
                    }
                })
                .collect()
        })
        .collect())
}

/// AP of `detections` against the annotations of `images`, averaged over `categories`.
pub fn evaluate(
    detections: &[Detection],
    images: &[Image],
    categories: &[usize],
    params: &EvalParams,
) -> Result<ApSummary> {
    let cells = build_cells(detections, images, categories, params.max_dets)?;
    let band_grid = |band: (f64, f64)| -> Vec<Option<f64>> {
        params
            .iou_thresholds
            .iter()
            .map(|&t| {
                mean(
                    cells
                        .iter()
                        .map(|cat| precision_average(&match_category(cat, band, t), params.recall_points)),
                )
            })
            .collect()
    };
    let at = |grid: &[Option<f64>], t: f64| -> Option<f64> {
        params
            .iou_thresholds
            .iter()
            .position(|x| (x - t).abs() < 1e-9)
            .and_then(|k| grid[k])
    };
    let band_mean = |band| mean(band_grid(band).into_iter());
    let all = band_grid(AREA_ALL);
    Ok(ApSummary {
        ap: mean(all.iter().copied()),
        ap50: at(&all, 0.5),
        ap75: at(&all, 0.75),
        ap_s: band_mean(params.area_small),
        ap_m: band_mean(params.area_medium),
        ap_l: band_mean(params.area_large),
        per_threshold: all,
    })
}

/// AP at a single IoU threshold over all areas.
pub fn ap_at(
    detections: &[Detection],
    images: &[Image],
    categories: &[usize],
    threshold: f64,
    params: &EvalParams,
) -> Result<Option<f64>> {
    let cells = build_cells(detections, images, categories, params.max_dets)?;
    Ok(mean(cells.iter().map(|cat| {
        precision_average(&match_category(cat, AREA_ALL, threshold), params.recall_points)
    })))
}

/// Forgetting percentage points: AP of the phase-1 model minus AP of the final model on `C_1`.
pub fn fpp(ap_phase1: f64, ap_final: f64) -> f64 {
    ap_phase1 - ap_final
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Annotation;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h).unwrap()
    }

    fn image(id: u64, boxes: &[(usize, BoundingBox)]) -> Image {
        Image {
            id,
            width: 100,
            height: 100,
            annotations: boxes
                .iter()
                .enumerate()
                .map(|(k, (c, b))| Annotation {
                    id: id * 10 + k as u64,
                    category: *c,
                    bbox: *b,
                    area: b.w * b.h * 10_000.0,
                })
                .collect(),
        }
    }

    fn det(image_id: u64, category: usize, score: f64, bbox: BoundingBox) -> Detection {
        Detection {
            image_id,
            category,
            score,
            bbox,
        }
    }

    #[test]
    fn perfect_and_empty() {
        let imgs = vec![
            image(1, &[(0, bx(0.3, 0.3, 0.2, 0.2)), (1, bx(0.7, 0.7, 0.5, 0.5))]),
            image(2, &[(0, bx(0.5, 0.5, 0.1, 0.1))]),
        ];
        let dets: Vec<Detection> = imgs
            .iter()
            .flat_map(|i| i.annotations.iter().map(move |a| det(i.id, a.category, 1.0, a.bbox)))
            .collect();
        let s = evaluate(&dets, &imgs, &[0, 1], &EvalParams::default()).unwrap();
        assert_eq!(s.ap, Some(1.0));
        assert!(s.per_threshold.iter().all(|v| *v == Some(1.0)));
        assert_eq!(s.ap_m, Some(1.0));
        assert_eq!(s.ap_l, None);
        let s = evaluate(&[], &imgs, &[0, 1], &EvalParams::default()).unwrap();
        assert_eq!(s.ap, Some(0.0));
        // A category without ground truth is skipped.
        let s = evaluate(&dets, &imgs, &[0, 1, 2], &EvalParams::default()).unwrap();
        assert_eq!(s.ap, Some(1.0));
        assert_eq!(evaluate(&dets, &imgs, &[2], &EvalParams::default()).unwrap().ap, None);
    }

    #[test]
    fn tp_then_fp() {
        let g = bx(0.5, 0.5, 0.4, 0.4);
        let imgs = vec![image(1, &[(0, g)])];
        // IoU 0.9 against the ground truth: width shrunk to 0.36.
        let tp = bx(0.5, 0.5, 0.36, 0.4);
        assert!((iou(&tp, &g) - 0.9).abs() < 1e-12);
        let dets = vec![det(1, 0, 0.9, tp), det(1, 0, 0.8, bx(0.1, 0.1, 0.1, 0.1))];
        let v = ap_at(&dets, &imgs, &[0], 0.5, &EvalParams::default()).unwrap();
        assert_eq!(v, Some(1.0));
        // Swapping the scores puts the false positive first: precision 1/2 everywhere.
        let dets = vec![det(1, 0, 0.8, tp), det(1, 0, 0.9, bx(0.1, 0.1, 0.1, 0.1))];
        let v = ap_at(&dets, &imgs, &[0], 0.5, &EvalParams::default()).unwrap();
        assert_eq!(v, Some(0.5));
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = bx(0.5, 0.5, 0.4, 0.4);
        let imgs = vec![image(1, &[(0, g)]), image(2, &[(0, g)])];
        let dets = vec![det(1, 0, 0.9, g), det(1, 0, 0.8, g)];
        // Recall reaches one half at precision 1, never beyond.
        let v = ap_at(&dets, &imgs, &[0], 0.5, &EvalParams::default()).unwrap().unwrap();
        assert!((v - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn size_bands() {
        // 100 × 100 px image: 0.2 side → 400 px² (small), 0.5 side → 2500 px² (medium).
        let imgs = vec![image(1, &[(0, bx(0.3, 0.3, 0.2, 0.2)), (0, bx(0.6, 0.6, 0.5, 0.5))])];
        let dets = vec![det(1, 0, 0.9, bx(0.3, 0.3, 0.2, 0.2))];
        let s = evaluate(&dets, &imgs, &[0], &EvalParams::default()).unwrap();
        assert_eq!(s.ap_s, Some(1.0));
        assert_eq!(s.ap_m, Some(0.0));
        assert_eq!(s.ap_l, None);
    }

    #[test]
    fn fpp_examples() {
        assert_eq!(fpp(0.5, 0.5), 0.0);
        assert!((fpp(0.6, 0.174) - 0.426).abs() < 1e-12);
    }
}
