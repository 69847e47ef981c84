//! Axis-aligned box arithmetic: IoU, area buckets, offset encoding and NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite box coordinate in ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("degenerate box ({0}, {1}, {2}, {3}): need x1 < x2 and y1 < y2")]
    Degenerate(f64, f64, f64, f64),
}

/// Upper clamp on decoded log-size ratios, avoids overflow in `exp`.
pub const DELTA_CLIP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Axis-aligned rectangle in pixel coordinates, `(x1, y1)` top-left and
/// `(x2, y2)` bottom-right. Construction enforces `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite(x1, y1, x2, y2));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(GeometryError::Degenerate(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn long_side(&self) -> f64 {
        self.width().max(self.height())
    }

    /// True when the box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clip to `[0, width] x [0, height]`; `None` if nothing with positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
        .ok()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Axis gap between two boxes: 0 if they touch or overlap, otherwise the
    /// larger of the horizontal and vertical separations.
    pub fn gap(&self, other: &BBox) -> f64 {
        let dx = (other.x1 - self.x2).max(self.x1 - other.x2);
        let dy = (other.y1 - self.y2).max(self.y1 - other.y2);
        dx.max(dy).max(0.0)
    }

    /// Lexicographic `(x1, y1, x2, y2)` order.
    pub fn lex_cmp(&self, other: &BBox) -> Ordering {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

/// Intersection over union. Valid boxes have positive area, so the union is never zero.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Object-size strata: small `[0, 32²)`, medium `[32², 96²)`, large `[96², ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn name(&self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;

pub fn size_bucket(b: &BBox) -> SizeBucket {
    let area = b.area();
    if area < SMALL_AREA {
        SizeBucket::Small
    } else if area < LARGE_AREA {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// Regression offsets of a box relative to a proposal: center shift
/// normalised by proposal size, and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
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

    /// Caps the log-size terms at [`DELTA_CLIP`] so a wild prediction
    /// cannot overflow `exp`.
    pub fn clamped(self) -> Self {
        Self { dw: self.dw.min(DELTA_CLIP), dh: self.dh.min(DELTA_CLIP), ..self }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

pub fn encode_offsets(proposal: &BBox, gt: &BBox) -> BoxDelta {
    let (pcx, pcy) = proposal.center();
    let (gcx, gcy) = gt.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    BoxDelta {
        dx: (gcx - pcx) / pw,
        dy: (gcy - pcy) / ph,
        dw: (gt.width() / pw).ln(),
        dh: (gt.height() / ph).ln(),
    }
}

/// Inverse of [`encode_offsets`]. A result that collapses numerically is
/// rejected. Predicted deltas should go through [`BoxDelta::clamped`] first.
pub fn decode_offsets(delta: &BoxDelta, proposal: &BBox) -> Result<BBox, GeometryError> {
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = pcx + delta.dx * pw;
    let cy = pcy + delta.dy * ph;
    let w = delta.dw.exp() * pw;
    let h = delta.dh.exp() * ph;
    BBox::from_center(cx, cy, w, h)
}

/// Descending score, ties broken by ascending lexicographic box order.
pub fn score_order(a: &(BBox, f64), b: &(BBox, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.lex_cmp(&b.0))
}

/// Greedy non-maximum suppression. Returns indices of kept detections in
/// [`score_order`]; a detection is suppressed when its IoU with an already
/// kept one exceeds `iou_threshold`.
pub fn nms_indices(detections: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| score_order(&detections[i], &detections[j]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &detections[i].0;
        if kept.iter().all(|&k| iou(&detections[k].0, b) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(detections: &[(BBox, f64)], iou_threshold: f64) -> Vec<(BBox, f64)> {
    nms_indices(detections, iou_threshold)
        .into_iter()
        .map(|i| detections[i])
        .collect()
}

pub const DEFAULT_NMS_IOU: f64 = 0.5;
