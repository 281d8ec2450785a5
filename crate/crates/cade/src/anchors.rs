//! Anchor grid generation for the feature pyramid and anchor-to-lesion
//! assignment for loss computation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_box, iou3d, BoundingBox3D, BoxOffsets};

/// Feature pyramid levels used by the detector. P1 is skipped for memory,
/// C5 is never built; P5/P6 come from strided convolutions on C4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PyramidLevel {
    P2,
    P3,
    P4,
    P5,
    P6,
}

impl PyramidLevel {
    pub const ALL: [PyramidLevel; 5] = [
        PyramidLevel::P2,
        PyramidLevel::P3,
        PyramidLevel::P4,
        PyramidLevel::P5,
        PyramidLevel::P6,
    ];

    /// 0 for P2 .. 4 for P6.
    pub fn index(self) -> usize {
        match self {
            PyramidLevel::P2 => 0,
            PyramidLevel::P3 => 1,
            PyramidLevel::P4 => 2,
            PyramidLevel::P5 => 3,
            PyramidLevel::P6 => 4,
        }
    }
}

impl std::fmt::Display for PyramidLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "P{}", self.index() + 2)
    }
}

/// Anchor shape catalogue: per-level base size, shared scale multipliers and
/// per-axis aspect multipliers, and the per-axis voxel stride of each level.
///
/// Side lengths of one anchor are `base * scale * ratio[axis]`; with the
/// default 3 scales and 3 ratio triples every feature voxel carries 9 anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// In-plane anchor side length in voxels for P2..P6.
    pub base_sizes: [f64; 5],
    /// Scale multipliers applied to the base size.
    pub scales: Vec<f64>,
    /// Per-axis `(z, y, x)` multipliers; the default set varies the slice
    /// extent against the in-plane extent (slices are thicker than pixels).
    pub ratios: Vec<[f64; 3]>,
    /// Per-axis `(z, y, x)` voxel stride of each level P2..P6.
    pub strides: [[usize; 3]; 5],
    /// Anchors with IoU >= this against some lesion become positives.
    pub positive_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        let cbrt2 = 2f64.powf(1.0 / 3.0);
        Self {
            base_sizes: [16.0, 32.0, 64.0, 128.0, 256.0],
            scales: vec![1.0, cbrt2, cbrt2 * cbrt2],
            ratios: vec![[0.5, 1.0, 1.0], [1.0, 1.0, 1.0], [2.0, 1.0, 1.0]],
            strides: [[4; 3], [8; 3], [16; 3], [32; 3], [64; 3]],
            positive_iou: 0.2,
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_position(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("anchors: scales and ratios must be non-empty".into()));
        }
        if self.scales.iter().any(|&s| s <= 0.0)
            || self.ratios.iter().flatten().any(|&r| r <= 0.0)
            || self.base_sizes.iter().any(|&b| b <= 0.0)
        {
            return Err(Error::Config("anchors: sizes, scales and ratios must be positive".into()));
        }
        if self.strides.iter().flatten().any(|&s| s == 0) {
            return Err(Error::Config("anchors.strides: strides must be positive".into()));
        }
        if !(0.0 < self.positive_iou && self.positive_iou < 1.0) {
            return Err(Error::Config("anchors.positive_iou: must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Anchor boxes for one pyramid level with feature shape `(d, h, w)`.
///
/// Centers sit at `(index + 0.5) * stride` per axis. Order is voxel-major
/// (z, then y, then x), then scale, then ratio — regeneration with the same
/// config is bit-identical. Anchors may extend past the image boundary; they
/// are not clipped.
pub fn generate_anchors(
    level: PyramidLevel,
    feature_shape: [usize; 3],
    config: &AnchorConfig,
) -> Vec<BoundingBox3D> {
    let li = level.index();
    let base = config.base_sizes[li];
    let stride = config.strides[li];
    let [d, h, w] = feature_shape;

    let mut shapes = Vec::with_capacity(config.anchors_per_position());
    for &scale in &config.scales {
        for ratio in &config.ratios {
            shapes.push([
                base * scale * ratio[0],
                base * scale * ratio[1],
                base * scale * ratio[2],
            ]);
        }
    }

    let mut anchors = Vec::with_capacity(d * h * w * shapes.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let center = [
                    (z as f64 + 0.5) * stride[0] as f64,
                    (y as f64 + 0.5) * stride[1] as f64,
                    (x as f64 + 0.5) * stride[2] as f64,
                ];
                for sides in &shapes {
                    anchors.push(
                        BoundingBox3D::from_center_sides(center, *sides)
                            .expect("anchor sides are positive"),
                    );
                }
            }
        }
    }
    anchors
}

/// One anchor selected for regression: its matched ground truth and the
/// encoded offsets toward it.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveAnchor {
    pub anchor: usize,
    pub gt: usize,
    pub iou: f64,
    pub target: BoxOffsets,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
}

/// Result of anchor matching. Only positives are materialized; every anchor
/// not listed is a focal-loss negative.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorAssignments {
    pub num_anchors: usize,
    /// Sorted by anchor index; anchor indices are unique.
    pub positives: Vec<PositiveAnchor>,
}

impl AnchorAssignments {
    pub fn label(&self, anchor: usize) -> AnchorLabel {
        match self.positives.binary_search_by_key(&anchor, |p| p.anchor) {
            Ok(i) => AnchorLabel::Positive { gt: self.positives[i].gt },
            Err(_) => AnchorLabel::Negative,
        }
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }
}

/// Lexicographic (min, max) comparison used to break IoU ties without
/// depending on ground-truth list order.
fn cmp_box(a: &BoundingBox3D, b: &BoundingBox3D) -> std::cmp::Ordering {
    let (am, bm) = (a.min(), b.min());
    let (ax, bx) = (a.max(), b.max());
    for i in 0..3 {
        match am[i].partial_cmp(&bm[i]).unwrap_or(std::cmp::Ordering::Equal) {
            std::cmp::Ordering::Equal => {}
            ord => return ord,
        }
    }
    for i in 0..3 {
        match ax[i].partial_cmp(&bx[i]).unwrap_or(std::cmp::Ordering::Equal) {
            std::cmp::Ordering::Equal => {}
            ord => return ord,
        }
    }
    std::cmp::Ordering::Equal
}

/// Assign anchors to ground-truth boxes.
///
/// Each anchor is matched to its max-IoU ground truth and labeled positive
/// when that IoU reaches `pos_threshold`; everything else is negative (single
/// threshold, no ignore band). On top of that, every ground truth forces its
/// highest-IoU anchor positive so no lesion goes unmatched: force pairs are
/// claimed in descending IoU order, and a ground truth whose best anchor was
/// already claimed takes its best remaining one. All ties are broken by box
/// value (then anchor index), never by ground-truth list order, so the
/// assignment is permutation-equivariant in `gts`.
pub fn match_anchors(
    anchors: &[BoundingBox3D],
    gts: &[BoundingBox3D],
    pos_threshold: f64,
) -> AnchorAssignments {
    if gts.is_empty() || anchors.is_empty() {
        return AnchorAssignments { num_anchors: anchors.len(), positives: Vec::new() };
    }

    // Per-anchor best ground truth (ties by box value).
    let mut best_gt: Vec<(f64, usize)> = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let mut bi = 0usize;
        let mut bv = -1.0f64;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou3d(anchor, gt);
            if v > bv || (v == bv && cmp_box(gt, &gts[bi]) == std::cmp::Ordering::Less) {
                bv = v;
                bi = gi;
            }
        }
        best_gt.push((bv, bi));
    }

    let mut matched: Vec<Option<usize>> = best_gt
        .iter()
        .map(|&(iou, gi)| (iou >= pos_threshold).then_some(gi))
        .collect();

    // Forced matching: highest-IoU (gt, anchor) pairs claim anchors first.
    let mut unforced: Vec<usize> = (0..gts.len()).collect();
    let mut claimed = vec![false; anchors.len()];
    while !unforced.is_empty() {
        let mut pick: Option<(f64, usize, usize)> = None; // (iou, gt, anchor)
        for &gi in &unforced {
            let mut best: Option<(f64, usize)> = None;
            for (ai, anchor) in anchors.iter().enumerate() {
                if claimed[ai] {
                    continue;
                }
                let v = iou3d(anchor, &gts[gi]);
                if best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, ai));
                }
            }
            let Some((v, ai)) = best else { break };
            let better = match pick {
                None => true,
                Some((pv, pg, _)) => {
                    v > pv || (v == pv && cmp_box(&gts[gi], &gts[pg]) == std::cmp::Ordering::Less)
                }
            };
            if better {
                pick = Some((v, gi, ai));
            }
        }
        let Some((_, gi, ai)) = pick else { break };
        claimed[ai] = true;
        matched[ai] = Some(gi);
        unforced.retain(|&g| g != gi);
    }

    let positives = matched
        .iter()
        .enumerate()
        .filter_map(|(ai, m)| {
            m.map(|gi| PositiveAnchor {
                anchor: ai,
                gt: gi,
                iou: iou3d(&anchors[ai], &gts[gi]),
                target: encode_box(&anchors[ai], &gts[gi]),
            })
        })
        .collect();

    AnchorAssignments { num_anchors: anchors.len(), positives }
}
