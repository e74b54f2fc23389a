//! Axis-aligned boxes in continuous scene coordinates.
//!
//! Boxes are corner-form `(x1, y1, x2, y2)` with area `(x2 - x1) * (y2 - y1)`;
//! there is no `+1` pixel convention.

use crate::error::{Error, Result};

/// Default magnitude bound for `dw`/`dh` before exponentiation.
pub const DEFAULT_DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Decoded boxes with area at or below this are reported as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, checking that coordinates are finite and the area positive.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Argument(format!("invalid box {b:?}")))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to `[0, width] x [0, height]`. The result may be degenerate.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn is_within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union. Both boxes must have positive area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression.
///
/// Visits boxes by descending score (ties: lower index first) and keeps a box
/// unless its IoU with an already kept box exceeds `iou_thresh`. Returns the
/// kept indices in selection order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Argument(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Argument(format!("nms: score {i} is not finite")));
    }
    let order = descending_order(scores);
    let mut keep: Vec<usize> = Vec::new();
    for idx in order {
        let b = &boxes[idx];
        if keep.iter().all(|&k| iou(&boxes[k], b) <= iou_thresh) {
            keep.push(idx);
        }
    }
    Ok(keep)
}

/// Indices sorted by descending value, ties broken by lower index.
pub fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Regression target relating a proposal to a box, R-CNN parameterisation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode_delta(proposal: &BBox, target: &BBox) -> BoxDelta {
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    BoxDelta {
        dx: (tcx - pcx) / pw,
        dy: (tcy - pcy) / ph,
        dw: (target.width() / pw).ln(),
        dh: (target.height() / ph).ln(),
    }
}

/// Applies a delta to a proposal. `dw`/`dh` are clamped to `[-clamp, clamp]`
/// before exponentiation so the result is always finite.
pub fn decode_delta(proposal: &BBox, delta: &BoxDelta, clamp: f64) -> BBox {
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = pcx + delta.dx * pw;
    let cy = pcy + delta.dy * ph;
    let w = pw * delta.dw.clamp(-clamp, clamp).exp();
    let h = ph * delta.dh.clamp(-clamp, clamp).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Decodes, clips to the scene extent and rejects boxes whose area collapsed.
pub fn decode_clipped(
    proposal: &BBox,
    delta: &BoxDelta,
    clamp: f64,
    extent: (f64, f64),
) -> Option<BBox> {
    let b = decode_delta(proposal, delta, clamp).clip(extent.0, extent.1);
    (b.is_valid() && b.area() > DEGENERATE_AREA).then_some(b)
}

/// Optional per-coordinate standardisation of regression targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaNormalizer {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl DeltaNormalizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 4],
            std: [1.0; 4],
        }
    }

    /// Fits mean and standard deviation on a set of targets. Coordinates with
    /// (near) zero spread keep unit scale.
    pub fn fit<'a>(deltas: impl IntoIterator<Item = &'a BoxDelta>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for d in deltas {
            n += 1;
            for (k, v) in d.as_array().into_iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let mut out = Self::identity();
        for k in 0..4 {
            let mean = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - mean * mean).max(0.0);
            out.mean[k] = mean;
            out.std[k] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn normalize(&self, d: &BoxDelta) -> BoxDelta {
        let a = d.as_array();
        BoxDelta::from_slice(&std::array::from_fn::<f64, 4, _>(|k| {
            (a[k] - self.mean[k]) / self.std[k]
        }))
    }

    pub fn denormalize(&self, d: &BoxDelta) -> BoxDelta {
        let a = d.as_array();
        BoxDelta::from_slice(&std::array::from_fn::<f64, 4, _>(|k| {
            a[k] * self.std[k] + self.mean[k]
        }))
    }
}
