//! Normalized bounding boxes, overlap measures and the box regression loss.
//!
//! Boxes are stored in center-size form with every field expressed as a
//! fraction of the image size. Overlap measures work on the corner form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default weight of the GIoU term in [`box_loss`].
pub const DEFAULT_GAMMA_IOU: f64 = 2.0;
/// Default weight of the L1 term in [`box_loss`].
pub const DEFAULT_GAMMA_L1: f64 = 5.0;

/// A box in normalized `(cx, cy, w, h)` form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// A box in corner form `(x0, y0, x1, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    /// The canonical box carried by background padding targets.
    pub const ZERO: BoundingBox = BoundingBox {
        cx: 0.0,
        cy: 0.0,
        w: 0.0,
        h: 0.0,
    };

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.cx, self.cy, self.w, self.h];
        let reason = if fields.iter().any(|v| !v.is_finite()) {
            Some("non-finite field")
        } else if fields.iter().any(|v| !(0.0..=1.0).contains(v)) {
            Some("field outside [0, 1]")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox {
                cx: self.cx,
                cy: self.cy,
                w: self.w,
                h: self.h,
                reason,
            }),
            None => Ok(()),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_degenerate(&self) -> bool {
        self.to_corners().area() == 0.0
    }

    pub fn to_corners(&self) -> CornerBox {
        CornerBox {
            x0: self.cx - self.w / 2.0,
            y0: self.cy - self.h / 2.0,
            x1: self.cx + self.w / 2.0,
            y1: self.cy + self.h / 2.0,
        }
    }
}

impl CornerBox {
    pub fn to_center(&self) -> BoundingBox {
        BoundingBox {
            cx: (self.x0 + self.x1) / 2.0,
            cy: (self.y0 + self.y1) / 2.0,
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

pub fn to_corners(b: &BoundingBox) -> CornerBox {
    b.to_corners()
}

fn intersection(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    iw * ih
}

fn hull(a: &CornerBox, b: &CornerBox) -> f64 {
    (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0))
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = intersection(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalized IoU: `iou - (hull - union) / hull`.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    if a.is_degenerate() && b.is_degenerate() {
        return Err(Error::DegeneratePair);
    }
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = intersection(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    let hull = hull(&ca, &cb);
    Ok(inter / union - (hull - union) / hull)
}

/// GIoU together with its gradient with respect to `pred = (cx, cy, w, h)`.
///
/// The gradient is one-sided at the kinks of the min/max terms.
pub fn giou_with_grad(pred: &BoundingBox, target: &BoundingBox) -> Result<(f64, [f64; 4])> {
    if pred.is_degenerate() && target.is_degenerate() {
        return Err(Error::DegeneratePair);
    }
    let p = pred.to_corners();
    let t = target.to_corners();

    // Intersection extents and their derivatives w.r.t. pred corners
    // laid out as [x0, y0, x1, y1].
    let mut d_inter = [0.0; 4];
    let iw_raw = p.x1.min(t.x1) - p.x0.max(t.x0);
    let ih_raw = p.y1.min(t.y1) - p.y0.max(t.y0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let diw = [
            if p.x0 > t.x0 { -1.0 } else { 0.0 },
            0.0,
            if p.x1 < t.x1 { 1.0 } else { 0.0 },
            0.0,
        ];
        let dih = [
            0.0,
            if p.y0 > t.y0 { -1.0 } else { 0.0 },
            0.0,
            if p.y1 < t.y1 { 1.0 } else { 0.0 },
        ];
        for k in 0..4 {
            d_inter[k] = diw[k] * ih + dih[k] * iw;
        }
    }

    let hw = p.x1.max(t.x1) - p.x0.min(t.x0);
    let hh = p.y1.max(t.y1) - p.y0.min(t.y0);
    let hull = hw * hh;
    let dhw = [
        if p.x0 < t.x0 { -1.0 } else { 0.0 },
        0.0,
        if p.x1 > t.x1 { 1.0 } else { 0.0 },
        0.0,
    ];
    let dhh = [
        0.0,
        if p.y0 < t.y0 { -1.0 } else { 0.0 },
        0.0,
        if p.y1 > t.y1 { 1.0 } else { 0.0 },
    ];
    let mut d_hull = [0.0; 4];
    for k in 0..4 {
        d_hull[k] = dhw[k] * hh + dhh[k] * hw;
    }

    let union = p.area() + t.area() - inter;
    let value = inter / union - (hull - union) / hull;

    // Chain corners -> (cx, cy, w, h).
    let to_center = |d: [f64; 4]| -> [f64; 4] {
        [
            d[0] + d[2],
            d[1] + d[3],
            (d[2] - d[0]) / 2.0,
            (d[3] - d[1]) / 2.0,
        ]
    };
    let d_inter_c = to_center(d_inter);
    let d_hull_c = to_center(d_hull);
    let d_area = [0.0, 0.0, p.y1 - p.y0, p.x1 - p.x0];

    // giou = I/U - 1 + U/H
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter_c[k];
        grad[k] = (d_inter_c[k] * union - inter * d_union) / (union * union)
            + (d_union * hull - union * d_hull_c[k]) / (hull * hull);
    }
    Ok((value, grad))
}

/// `γ_iou · (1 − giou) + γ_l1 · ‖pred − target‖₁`.
pub fn box_loss(
    pred: &BoundingBox,
    target: &BoundingBox,
    gamma_iou: f64,
    gamma_l1: f64,
) -> Result<f64> {
    let g = giou(pred, target)?;
    let l1: f64 = pred
        .as_array()
        .iter()
        .zip(target.as_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(gamma_iou * (1.0 - g) + gamma_l1 * l1)
}

/// [`box_loss`] and its gradient with respect to `pred = (cx, cy, w, h)`.
pub fn box_loss_with_grad(
    pred: &BoundingBox,
    target: &BoundingBox,
    gamma_iou: f64,
    gamma_l1: f64,
) -> Result<(f64, [f64; 4])> {
    let (g, dg) = giou_with_grad(pred, target)?;
    let p = pred.as_array();
    let t = target.as_array();
    let mut l1 = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let diff = p[k] - t[k];
        l1 += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[k] = -gamma_iou * dg[k] + gamma_l1 * sign;
    }
    Ok((gamma_iou * (1.0 - g) + gamma_l1 * l1, grad))
}
