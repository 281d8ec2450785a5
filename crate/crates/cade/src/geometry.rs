//! 3D axis-aligned boxes, overlap computation, non-maximum suppression and
//! the anchor/box offset codec.
//!
//! Axis order is `(z, y, x)` = (slice, row, column) everywhere in this crate.
//! Boxes are continuous half-open regions: voxel `(i, j, k)` occupies
//! `[i, i+1) x [j, j+1) x [k, k+1)`, which keeps IoU independent of the
//! discretization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or extent in `(z, y, x)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Zyx(pub [f64; 3]);

impl Zyx {
    pub fn z(&self) -> f64 {
        self.0[0]
    }
    pub fn y(&self) -> f64 {
        self.0[1]
    }
    pub fn x(&self) -> f64 {
        self.0[2]
    }
}

impl std::ops::Index<usize> for Zyx {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<[f64; 3]> for Zyx {
    fn from(v: [f64; 3]) -> Self {
        Zyx(v)
    }
}

/// Axis-aligned box with strictly positive volume, in continuous voxel
/// coordinates.
///
/// Validity (`min < max` on every axis) is enforced at construction, so a
/// `BoundingBox3D` value is always usable in overlap computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox3D {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Serialize, Deserialize, Clone)]
struct RawBox {
    min: [f64; 3],
    max: [f64; 3],
}

impl TryFrom<RawBox> for BoundingBox3D {
    type Error = Error;
    fn try_from(r: RawBox) -> Result<Self> {
        BoundingBox3D::new(r.min, r.max)
    }
}

impl From<BoundingBox3D> for RawBox {
    fn from(b: BoundingBox3D) -> Self {
        RawBox { min: b.min, max: b.max }
    }
}

impl BoundingBox3D {
    /// Build a box from min/max corners in `(z, y, x)` order.
    ///
    /// Errors if any coordinate is non-finite or the box is degenerate
    /// (zero or negative extent on some axis).
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for axis in 0..3 {
            if !min[axis].is_finite() || !max[axis].is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite box corner on axis {axis}: min={} max={}",
                    min[axis], max[axis]
                )));
            }
            if min[axis] >= max[axis] {
                return Err(Error::InvalidInput(format!(
                    "degenerate box on axis {axis}: min={} max={}",
                    min[axis], max[axis]
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// Box centered at `center` with side lengths `sides`.
    pub fn from_center_sides(center: [f64; 3], sides: [f64; 3]) -> Result<Self> {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for axis in 0..3 {
            min[axis] = center[axis] - sides[axis] / 2.0;
            max[axis] = center[axis] + sides[axis] / 2.0;
        }
        Self::new(min, max)
    }

    pub fn min(&self) -> [f64; 3] {
        self.min
    }

    pub fn max(&self) -> [f64; 3] {
        self.max
    }

    pub fn sides(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            (self.min[2] + self.max[2]) / 2.0,
        ]
    }

    pub fn volume(&self) -> f64 {
        let s = self.sides();
        s[0] * s[1] * s[2]
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    /// Volume of the intersection with `other`; 0 when disjoint.
    pub fn intersection_volume(&self, other: &Self) -> f64 {
        let mut v = 1.0;
        for axis in 0..3 {
            let lo = self.min[axis].max(other.min[axis]);
            let hi = self.max[axis].min(other.max[axis]);
            if hi <= lo {
                return 0.0;
            }
            v *= hi - lo;
        }
        v
    }

    /// Intersection box, or `None` when the overlap is empty or degenerate.
    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for axis in 0..3 {
            min[axis] = self.min[axis].max(other.min[axis]);
            max[axis] = self.max[axis].min(other.max[axis]);
            if min[axis] >= max[axis] {
                return None;
            }
        }
        Some(Self { min, max })
    }

    /// Box shifted by `offset` (per-axis, `(z, y, x)`).
    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let mut min = self.min;
        let mut max = self.max;
        for axis in 0..3 {
            min[axis] += offset[axis];
            max[axis] += offset[axis];
        }
        Self { min, max }
    }
}

/// Intersection over union of two valid boxes; 0 when disjoint, 1 iff equal.
pub fn iou3d(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    let inter = a.intersection_volume(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.volume() + b.volume() - inter)
}

/// Intersection volume divided by the volume of `gt` (an alternative overlap
/// criterion for detection scoring).
pub fn intersection_over_gt(det: &BoundingBox3D, gt: &BoundingBox3D) -> f64 {
    det.intersection_volume(gt) / gt.volume()
}

/// A scored candidate lesion location on one breast.
///
/// Serializes as one JSON-lines object `{"breast_id", "min", "max", "score"}`
/// with the box corners flattened in; corners are validated on read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BoundingBox3D,
    pub score: f64,
    pub breast_id: String,
}

impl Detection {
    pub fn new(bbox: BoundingBox3D, score: f64, breast_id: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidInput(format!(
                "detection score {score} outside [0, 1]"
            )));
        }
        Ok(Self { bbox, score, breast_id: breast_id.into() })
    }
}

/// Offsets from an anchor box to a target box: center offsets normalized by
/// the anchor side lengths plus log side-length ratios, per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxOffsets {
    /// (target_center - anchor_center) / anchor_side, per axis.
    pub center: [f64; 3],
    /// ln(target_side / anchor_side), per axis.
    pub log_size: [f64; 3],
}

impl BoxOffsets {
    pub const ZERO: BoxOffsets = BoxOffsets { center: [0.0; 3], log_size: [0.0; 3] };

    pub fn from_array(v: [f64; 6]) -> Self {
        Self { center: [v[0], v[1], v[2]], log_size: [v[3], v[4], v[5]] }
    }

    pub fn to_array(self) -> [f64; 6] {
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.log_size[0],
            self.log_size[1],
            self.log_size[2],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Decoded log-ratios are clamped to this range before exponentiation, which
/// keeps early-training decodes numerically safe.
pub const LOG_RATIO_CLAMP: f64 = 4.0;

/// Offsets that map `anchor` onto `target`.
pub fn encode_box(anchor: &BoundingBox3D, target: &BoundingBox3D) -> BoxOffsets {
    let ac = anchor.center();
    let asz = anchor.sides();
    let tc = target.center();
    let tsz = target.sides();
    let mut center = [0.0; 3];
    let mut log_size = [0.0; 3];
    for axis in 0..3 {
        center[axis] = (tc[axis] - ac[axis]) / asz[axis];
        log_size[axis] = (tsz[axis] / asz[axis]).ln();
    }
    BoxOffsets { center, log_size }
}

/// Apply `offsets` to `anchor`. Inverse of [`encode_box`] up to the log-ratio
/// clamp. Errors on non-finite offsets.
pub fn decode_box(anchor: &BoundingBox3D, offsets: &BoxOffsets) -> Result<BoundingBox3D> {
    if !offsets.is_finite() {
        return Err(Error::InvalidInput("non-finite box offsets".into()));
    }
    let ac = anchor.center();
    let asz = anchor.sides();
    let mut center = [0.0; 3];
    let mut sides = [0.0; 3];
    for axis in 0..3 {
        center[axis] = ac[axis] + offsets.center[axis] * asz[axis];
        let lr = offsets.log_size[axis].clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
        sides[axis] = asz[axis] * lr.exp();
    }
    BoundingBox3D::from_center_sides(center, sides)
}

/// Greedy score-descending non-maximum suppression.
///
/// Survivors never overlap above `iou_threshold`; output is sorted by score.
/// Ties on score are resolved by lexicographic min corner (then max corner)
/// so the result does not depend on input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| nms_ordering(&dets[a], &dets[b]));

    let mut keep: Vec<Detection> = Vec::new();
    for &idx in &order {
        let cand = &dets[idx];
        if keep.iter().all(|k| iou3d(&k.bbox, &cand.bbox) <= iou_threshold) {
            keep.push(cand.clone());
        }
    }
    keep
}

fn nms_ordering(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| cmp_lex(&a.bbox.min(), &b.bbox.min()))
        .then_with(|| cmp_lex(&a.bbox.max(), &b.bbox.max()))
}

fn cmp_lex(a: &[f64; 3], b: &[f64; 3]) -> std::cmp::Ordering {
    for axis in 0..3 {
        match a[axis].partial_cmp(&b[axis]) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(ord) => return ord,
        }
    }
    std::cmp::Ordering::Equal
}
