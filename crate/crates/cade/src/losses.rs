//! Focal classification loss and smooth-L1 regression loss over anchor
//! assignments, with analytic gradients for the training loop.

use ndarray::{Array5, Axis};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorAssignments;
use crate::detector::{sigmoid, DetectorGrads, DetectorOutput, OFFSETS_PER_ANCHOR};
use crate::error::{Error, Result};
use crate::nn::Elem;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm.
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focusing exponent: well-classified examples are down-weighted by
    /// `(1 - p_t)^gamma`.
    pub gamma: f64,
    /// Balancing weight of the positive class.
    pub alpha: f64,
    /// Smooth-L1 quadratic-to-linear transition point.
    pub smooth_l1_beta: f64,
    /// Normalize both terms by the positive-anchor count (min 1).
    pub normalize_by_positives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25, smooth_l1_beta: 1.0, normalize_by_positives: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config("loss.gamma: must be >= 0".into()));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::Config("loss.alpha: must lie in (0, 1)".into()));
        }
        if self.smooth_l1_beta <= 0.0 {
            return Err(Error::Config("loss.smooth_l1_beta: must be > 0".into()));
        }
        Ok(())
    }
}

/// Focal loss of one prediction: with `p_t = p` when positive else `1 - p`
/// and `a_t` the matching balance weight, `FL = -a_t (1 - p_t)^g ln(p_t)`.
pub fn focal_loss(p: f64, positive: bool, config: &LossConfig) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    let (p_t, a_t) = if positive { (p, config.alpha) } else { (1.0 - p, 1.0 - config.alpha) };
    -a_t * (1.0 - p_t).powf(config.gamma) * p_t.ln()
}

/// Focal loss and its derivative with respect to the logit.
pub fn focal_loss_from_logit(z: f64, positive: bool, config: &LossConfig) -> (f64, f64) {
    let p_raw = sigmoid(z);
    let clamped = !(EPS..=1.0 - EPS).contains(&p_raw);
    let p = p_raw.clamp(EPS, 1.0 - EPS);
    let (p_t, a_t) = if positive { (p, config.alpha) } else { (1.0 - p, 1.0 - config.alpha) };
    let one_m = 1.0 - p_t;
    let loss = -a_t * one_m.powf(config.gamma) * p_t.ln();

    if clamped {
        return (loss, 0.0);
    }
    // dFL/dp_t; the gamma = 0 branch avoids 0 * one_m^(-1).
    let dl_dpt = if config.gamma == 0.0 {
        -a_t / p_t
    } else {
        a_t * (config.gamma * one_m.powf(config.gamma - 1.0) * p_t.ln() - one_m.powf(config.gamma) / p_t)
    };
    let dpt_dz = if positive { p * (1.0 - p) } else { -p * (1.0 - p) };
    (loss, dl_dpt * dpt_dz)
}

/// Smooth L1 of one residual: `0.5 x^2 / beta` inside `|x| < beta`, else
/// `|x| - beta/2`. Returns `(value, dvalue/dx)`.
pub fn smooth_l1_scalar(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Smooth L1 summed over the six offset coordinates.
pub fn smooth_l1(pred: &crate::geometry::BoxOffsets, target: &crate::geometry::BoxOffsets, beta: f64) -> f64 {
    pred.to_array()
        .iter()
        .zip(target.to_array())
        .map(|(&p, t)| smooth_l1_scalar(p - t, beta).0)
        .sum()
}

/// Total loss and per-term breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub focal: f64,
    pub regression: f64,
    pub total: f64,
    pub num_positives: usize,
}

/// Positive-anchor lookup for one batch item, in global anchor indexing
/// (level-major P2..P6, voxel-major inside a level, anchor-index innermost).
struct PositiveLookup {
    /// anchor index -> (offset targets), sorted by anchor index.
    entries: Vec<(usize, [f64; OFFSETS_PER_ANCHOR])>,
}

impl PositiveLookup {
    fn from_assignments(assignments: &AnchorAssignments) -> Self {
        let entries = assignments
            .positives
            .iter()
            .map(|p| (p.anchor, p.target.to_array()))
            .collect();
        Self { entries }
    }

    fn get(&self, anchor: usize) -> Option<&[f64; OFFSETS_PER_ANCHOR]> {
        self.entries
            .binary_search_by_key(&anchor, |e| e.0)
            .ok()
            .map(|i| &self.entries[i].1)
    }
}

/// Focal loss over every anchor plus smooth-L1 over the positive anchors,
/// both normalized by the positive count (min 1) when configured; the total
/// is their sum. `assignments` holds one entry per batch item. When
/// `grads` is requested the per-level logit/offset gradients are returned
/// alongside.
pub fn total_loss<F: Elem>(
    output: &DetectorOutput<F>,
    assignments: &[AnchorAssignments],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    Ok(total_loss_impl(output, assignments, config, false)?.0)
}

pub fn total_loss_with_grads<F: Elem>(
    output: &DetectorOutput<F>,
    assignments: &[AnchorAssignments],
    config: &LossConfig,
) -> Result<(LossBreakdown, DetectorGrads<F>)> {
    let (breakdown, grads) = total_loss_impl(output, assignments, config, true)?;
    Ok((breakdown, grads.expect("grads requested")))
}

fn total_loss_impl<F: Elem>(
    output: &DetectorOutput<F>,
    assignments: &[AnchorAssignments],
    config: &LossConfig,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<DetectorGrads<F>>)> {
    config.validate()?;
    let batch = output.levels[0].1.class_logits.dim().0;
    if assignments.len() != batch {
        return Err(Error::InvalidInput(format!(
            "{} anchor assignments for batch of {batch}",
            assignments.len()
        )));
    }
    let total_anchors = output.total_anchors();
    for asg in assignments {
        if asg.num_anchors != total_anchors {
            return Err(Error::InvalidInput(format!(
                "assignment covers {} anchors, detector emits {total_anchors}",
                asg.num_anchors
            )));
        }
    }

    let lookups: Vec<PositiveLookup> =
        assignments.iter().map(PositiveLookup::from_assignments).collect();
    let num_positives: usize = assignments.iter().map(|a| a.num_positives()).sum();
    let norm = if config.normalize_by_positives { num_positives.max(1) as f64 } else { 1.0 };

    let mut focal_sum = 0.0f64;
    let mut reg_sum = 0.0f64;
    let mut grads: Vec<(Array5<F>, Array5<F>)> = Vec::new();

    let mut level_base = 0usize; // global anchor index of this level's first anchor
    for (_, level) in &output.levels {
        let a_count = level.anchors_per_position();
        let [d, h, w] = level.spatial();
        let v_total = d * h * w;
        let mut class_grad = want_grads.then(|| Array5::<F>::zeros(level.class_logits.dim()));
        let mut box_grad = want_grads.then(|| Array5::<F>::zeros(level.box_offsets.dim()));

        for n in 0..batch {
            let logits = level
                .class_logits
                .index_axis(Axis(0), n)
                .into_shape_with_order((a_count, v_total))
                .expect("standard layout");
            let offsets = level
                .box_offsets
                .index_axis(Axis(0), n)
                .into_shape_with_order((a_count * OFFSETS_PER_ANCHOR, v_total))
                .expect("standard layout");

            let mut cg = class_grad.as_mut().map(|g| {
                g.index_axis_mut(Axis(0), n)
                    .into_shape_with_order((a_count, v_total))
                    .expect("standard layout")
            });
            let mut bg = box_grad.as_mut().map(|g| {
                g.index_axis_mut(Axis(0), n)
                    .into_shape_with_order((a_count * OFFSETS_PER_ANCHOR, v_total))
                    .expect("standard layout")
            });

            for v in 0..v_total {
                for a in 0..a_count {
                    let global = level_base + v * a_count + a;
                    let target = lookups[n].get(global);
                    let z = logits[(a, v)].as_f64();
                    let (fl, dfl) = focal_loss_from_logit(z, target.is_some(), config);
                    focal_sum += fl;
                    if let Some(cg) = cg.as_mut() {
                        cg[(a, v)] = F::of(dfl / norm);
                    }
                    if let Some(t) = target {
                        for j in 0..OFFSETS_PER_ANCHOR {
                            let pred = offsets[(a * OFFSETS_PER_ANCHOR + j, v)].as_f64();
                            let (val, dval) = smooth_l1_scalar(pred - t[j], config.smooth_l1_beta);
                            reg_sum += val;
                            if let Some(bg) = bg.as_mut() {
                                bg[(a * OFFSETS_PER_ANCHOR + j, v)] = F::of(dval / norm);
                            }
                        }
                    }
                }
            }
        }
        if want_grads {
            grads.push((class_grad.unwrap(), box_grad.unwrap()));
        }
        level_base += v_total * a_count;
    }

    let breakdown = LossBreakdown {
        focal: focal_sum / norm,
        regression: reg_sum / norm,
        total: (focal_sum + reg_sum) / norm,
        num_positives,
    };
    Ok((breakdown, want_grads.then_some(DetectorGrads { levels: grads })))
}
