//! Detection-to-lesion matching, FROC curves, CPM and bootstrap statistics.
//!
//! False positives are only counted on breasts with no annotated lesions:
//! lesion-bearing breasts can contain related but unannotated suspicious
//! regions, so unmatched detections there are ignored rather than penalized.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{intersection_over_gt, iou3d, Detection};
use crate::records::{CaseManifest, Category, LesionAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricTag {
    /// Fraction of all annotated lesions detected.
    DetectionRate,
    /// Fraction of malignant lesions detected.
    Sensitivity,
    /// Fraction of benign lesions (biopsied + follow-up) detected.
    BenignDetectionRate,
}

impl MetricTag {
    pub fn includes(self, category: Category) -> bool {
        match self {
            MetricTag::DetectionRate => true,
            MetricTag::Sensitivity => category == Category::Malignant,
            MetricTag::BenignDetectionRate => category.is_benign(),
        }
    }
}

impl std::fmt::Display for MetricTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MetricTag::DetectionRate => "detection-rate",
            MetricTag::Sensitivity => "sensitivity",
            MetricTag::BenignDetectionRate => "benign-detection-rate",
        };
        write!(f, "{s}")
    }
}

/// How a detected box is compared against a ground-truth box. The default is
/// IoU at 0.2, consistent with the anchor-matching threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub criterion: OverlapCriterion,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapCriterion {
    #[default]
    Iou,
    /// Intersection volume over ground-truth volume.
    IntersectionOverGt,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { criterion: OverlapCriterion::Iou, threshold: 0.2 }
    }
}

impl MatchConfig {
    fn overlap(&self, det: &crate::geometry::BoundingBox3D, gt: &crate::geometry::BoundingBox3D) -> f64 {
        match self.criterion {
            OverlapCriterion::Iou => iou3d(det, gt),
            OverlapCriterion::IntersectionOverGt => intersection_over_gt(det, gt),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Disposition {
    TruePositive { lesion: usize },
    FalsePositive,
    /// Unmatched detection on a lesion-bearing breast.
    Ignored,
}

#[derive(Debug, Clone)]
pub struct LesionOutcome {
    pub category: Category,
    pub breast_id: String,
    /// Score of the detection that hit this lesion, if any.
    pub hit_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    pub lesions: Vec<LesionOutcome>,
    /// Parallel to the input detection list.
    pub dispositions: Vec<Disposition>,
    pub normal_breasts: usize,
    /// Scores of false-positive detections.
    pub fp_scores: Vec<f64>,
}

/// Greedily match detections (highest score first) against the unhit lesions
/// of their breast. A detection on an annotation-free breast that matches
/// nothing is a false positive; on a lesion-bearing breast it is ignored.
pub fn match_detections(
    dets: &[Detection],
    annotations: &[LesionAnnotation],
    universe: &CaseManifest,
    config: &MatchConfig,
) -> Result<MatchResult> {
    use std::collections::{HashMap, HashSet};
    let known: HashSet<&str> =
        universe.cases.iter().flat_map(|c| c.breast_ids.iter().map(|s| s.as_str())).collect();
    for d in dets {
        if !known.contains(d.breast_id.as_str()) {
            return Err(Error::Evaluation(format!("unknown breast id '{}' in detections", d.breast_id)));
        }
    }
    for a in annotations {
        if !known.contains(a.breast_id.as_str()) {
            return Err(Error::Evaluation(format!(
                "unknown breast id '{}' in annotations",
                a.breast_id
            )));
        }
    }

    let mut lesions: Vec<LesionOutcome> = annotations
        .iter()
        .map(|a| LesionOutcome {
            category: a.category,
            breast_id: a.breast_id.clone(),
            hit_score: None,
        })
        .collect();
    let mut lesions_of_breast: HashMap<&str, Vec<usize>> = HashMap::new();
    for (li, a) in annotations.iter().enumerate() {
        lesions_of_breast.entry(a.breast_id.as_str()).or_default().push(li);
    }

    // Score-descending processing; ties broken by box corners so the result
    // is independent of input order.
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| dets[a].breast_id.cmp(&dets[b].breast_id))
            .then_with(|| {
                dets[a]
                    .bbox
                    .min()
                    .partial_cmp(&dets[b].bbox.min())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });

    let mut dispositions = vec![Disposition::Ignored; dets.len()];
    let mut hit = vec![false; annotations.len()];
    for &di in &order {
        let det = &dets[di];
        let candidates = lesions_of_breast.get(det.breast_id.as_str());
        let mut best: Option<(f64, usize)> = None;
        if let Some(cand) = candidates {
            for &li in cand {
                if hit[li] {
                    continue;
                }
                let overlap = config.overlap(&det.bbox, &annotations[li].bbox);
                if overlap >= config.threshold && best.map_or(true, |(bv, _)| overlap > bv) {
                    best = Some((overlap, li));
                }
            }
        }
        dispositions[di] = match best {
            Some((_, li)) => {
                hit[li] = true;
                lesions[li].hit_score = Some(det.score);
                Disposition::TruePositive { lesion: li }
            }
            None if candidates.map_or(true, |c| c.is_empty()) => Disposition::FalsePositive,
            None => Disposition::Ignored,
        };
    }

    let annotated: HashSet<&str> = annotations.iter().map(|a| a.breast_id.as_str()).collect();
    let normal_breasts = universe
        .cases
        .iter()
        .flat_map(|c| &c.breast_ids)
        .filter(|b| !annotated.contains(b.as_str()))
        .count();
    let fp_scores = order
        .iter()
        .filter(|&&di| dispositions[di] == Disposition::FalsePositive)
        .map(|&di| dets[di].score)
        .collect();

    Ok(MatchResult { lesions, dispositions, normal_breasts, fp_scores })
}

/// Per-case match outcomes: the unit of bootstrap resampling.
#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub study_id: String,
    /// (category, score of the hitting detection if any).
    pub lesions: Vec<(Category, Option<f64>)>,
    pub fp_scores: Vec<f64>,
    pub normal_breasts: usize,
}

/// A fully matched evaluation run over a case universe.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub cases: Vec<CaseOutcome>,
}

impl EvalRun {
    pub fn total_normal_breasts(&self) -> usize {
        self.cases.iter().map(|c| c.normal_breasts).sum()
    }
}

/// Match detections and group the outcomes by case.
pub fn evaluate_run(
    dets: &[Detection],
    annotations: &[LesionAnnotation],
    universe: &CaseManifest,
    config: &MatchConfig,
) -> Result<EvalRun> {
    use std::collections::HashMap;
    let result = match_detections(dets, annotations, universe, config)?;

    let mut breast_to_case: HashMap<&str, usize> = HashMap::new();
    for (ci, case) in universe.cases.iter().enumerate() {
        for b in &case.breast_ids {
            breast_to_case.insert(b.as_str(), ci);
        }
    }
    let mut cases: Vec<CaseOutcome> = universe
        .cases
        .iter()
        .map(|c| CaseOutcome {
            study_id: c.study_id.clone(),
            lesions: Vec::new(),
            fp_scores: Vec::new(),
            normal_breasts: 0,
        })
        .collect();
    for lesion in &result.lesions {
        let ci = breast_to_case[lesion.breast_id.as_str()];
        cases[ci].lesions.push((lesion.category, lesion.hit_score));
    }
    // FP scores attach to the case owning the normal breast.
    let annotated: std::collections::HashSet<&str> =
        annotations.iter().map(|a| a.breast_id.as_str()).collect();
    for (ci, case) in universe.cases.iter().enumerate() {
        cases[ci].normal_breasts =
            case.breast_ids.iter().filter(|b| !annotated.contains(b.as_str())).count();
    }
    for (di, disp) in result.dispositions.iter().enumerate() {
        if *disp == Disposition::FalsePositive {
            let ci = breast_to_case[dets[di].breast_id.as_str()];
            cases[ci].fp_scores.push(dets[di].score);
        }
    }
    Ok(EvalRun { cases })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_normal_breast: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub metric: MetricTag,
    pub points: Vec<FrocPoint>,
}

fn froc_from_parts(
    hit_scores: &[(Category, Option<f64>)],
    fp_scores: &[f64],
    normal_breasts: usize,
    metric: MetricTag,
) -> Result<FrocCurve> {
    if normal_breasts == 0 {
        return Err(Error::Evaluation(
            "FROC undefined: no normal breasts to count false positives on".into(),
        ));
    }
    let subset: Vec<Option<f64>> = hit_scores
        .iter()
        .filter(|(c, _)| metric.includes(*c))
        .map(|(_, s)| *s)
        .collect();
    if subset.is_empty() {
        return Err(Error::Evaluation(format!("FROC undefined: no lesions for metric {metric}")));
    }

    let mut thresholds: Vec<f64> = subset
        .iter()
        .filter_map(|s| *s)
        .chain(fp_scores.iter().copied())
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    thresholds.dedup();

    let n_subset = subset.len() as f64;
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let hits = subset.iter().filter(|s| s.map_or(false, |v| v >= t)).count() as f64;
        let fps = fp_scores.iter().filter(|&&v| v >= t).count() as f64;
        points.push(FrocPoint {
            threshold: t,
            fp_per_normal_breast: fps / normal_breasts as f64,
            value: hits / n_subset,
        });
    }
    Ok(FrocCurve { metric, points })
}

/// FROC curve: metric value against false positives per normal breast,
/// swept over every distinct detection score (descending).
pub fn froc(run: &EvalRun, metric: MetricTag) -> Result<FrocCurve> {
    let hit_scores: Vec<(Category, Option<f64>)> =
        run.cases.iter().flat_map(|c| c.lesions.iter().copied()).collect();
    let fp_scores: Vec<f64> = run.cases.iter().flat_map(|c| c.fp_scores.iter().copied()).collect();
    froc_from_parts(&hit_scores, &fp_scores, run.total_normal_breasts(), metric)
}

/// The seven FROC operating points entering the CPM.
pub const CPM_FP_POINTS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Curve value at an FP rate under step interpolation: the best value among
/// points at or below `fp`, 0 when none.
pub fn curve_value_at(curve: &FrocCurve, fp: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fp_per_normal_breast <= fp)
        .map(|p| p.value)
        .fold(0.0, f64::max)
}

/// Competition performance metric: mean curve value at {1/8 .. 8} false
/// positives per normal breast.
pub fn cpm(curve: &FrocCurve) -> f64 {
    CPM_FP_POINTS.iter().map(|&fp| curve_value_at(curve, fp)).sum::<f64>()
        / CPM_FP_POINTS.len() as f64
}

fn cpm_of_case_sample(run: &EvalRun, indices: &[usize], metric: MetricTag) -> Result<f64> {
    let mut hit_scores: Vec<(Category, Option<f64>)> = Vec::new();
    let mut fp_scores: Vec<f64> = Vec::new();
    let mut normals = 0usize;
    for &ci in indices {
        let case = &run.cases[ci];
        hit_scores.extend(case.lesions.iter().copied());
        fp_scores.extend(case.fp_scores.iter().copied());
        normals += case.normal_breasts;
    }
    Ok(cpm(&froc_from_parts(&hit_scores, &fp_scores, normals, metric)?))
}

fn same_universe(a: &EvalRun, b: &EvalRun) -> bool {
    a.cases.len() == b.cases.len()
        && a.cases.iter().zip(&b.cases).all(|(x, y)| x.study_id == y.study_id)
}

/// Bootstrap comparison of two runs over the same cases: resample cases with
/// replacement `n` times, compute `delta = CPM_A - CPM_B` per resample, and
/// return `p = #{delta <= 0} / n`. Resamples on which either CPM is
/// undefined (no normal breasts or no subset lesions drawn) are redrawn.
pub fn bootstrap_compare(
    run_a: &EvalRun,
    run_b: &EvalRun,
    metric: MetricTag,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if !same_universe(run_a, run_b) {
        return Err(Error::Evaluation("bootstrap_compare: runs cover different cases".into()));
    }
    if run_a.cases.is_empty() || n == 0 {
        return Err(Error::Evaluation("bootstrap_compare: empty run or zero samples".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cases = run_a.cases.len();
    let mut non_positive = 0usize;
    for _ in 0..n {
        let mut redraws = 0;
        let delta = loop {
            let indices: Vec<usize> = (0..cases).map(|_| rng.gen_range(0..cases)).collect();
            let a = cpm_of_case_sample(run_a, &indices, metric);
            let b = cpm_of_case_sample(run_b, &indices, metric);
            match (a, b) {
                (Ok(a), Ok(b)) => break a - b,
                _ => {
                    redraws += 1;
                    if redraws > 1000 {
                        return Err(Error::Evaluation(
                            "bootstrap_compare: could not draw a valid resample".into(),
                        ));
                    }
                }
            }
        };
        if delta <= 0.0 {
            non_positive += 1;
        }
    }
    Ok(non_positive as f64 / n as f64)
}

/// Percentile-bootstrap confidence band of the curve value at each FP
/// coordinate in `fps`, from one shared set of `n` resamples.
pub fn curve_confidence_band(
    run: &EvalRun,
    metric: MetricTag,
    fps: &[f64],
    n: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cases = run.cases.len();
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n); fps.len()];
    for _ in 0..n {
        let mut redraws = 0;
        loop {
            let indices: Vec<usize> = (0..cases).map(|_| rng.gen_range(0..cases)).collect();
            let mut hit_scores: Vec<(Category, Option<f64>)> = Vec::new();
            let mut fp_scores: Vec<f64> = Vec::new();
            let mut normals = 0usize;
            for &ci in &indices {
                hit_scores.extend(run.cases[ci].lesions.iter().copied());
                fp_scores.extend(run.cases[ci].fp_scores.iter().copied());
                normals += run.cases[ci].normal_breasts;
            }
            match froc_from_parts(&hit_scores, &fp_scores, normals, metric) {
                Ok(curve) => {
                    for (i, &fp) in fps.iter().enumerate() {
                        samples[i].push(curve_value_at(&curve, fp));
                    }
                    break;
                }
                Err(_) => {
                    redraws += 1;
                    if redraws > 1000 {
                        return Err(Error::Evaluation(
                            "curve_confidence_band: could not draw a valid resample".into(),
                        ));
                    }
                }
            }
        }
    }
    let base = froc(run, metric)?;
    let alpha = (1.0 - level) / 2.0;
    Ok(samples
        .iter_mut()
        .zip(fps)
        .map(|(values, &fp)| {
            values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let q = |p: f64| -> f64 {
                let pos = p * (values.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                let w = pos - lo as f64;
                values[lo] * (1.0 - w) + values[hi] * w
            };
            let estimate = curve_value_at(&base, fp);
            (q(alpha).min(estimate), q(1.0 - alpha).max(estimate))
        })
        .collect())
}

/// Percentile-bootstrap confidence interval of the curve value at `fp_point`.
/// The interval is widened (rarely) to contain the full-sample estimate.
pub fn confidence_interval(
    run: &EvalRun,
    metric: MetricTag,
    fp_point: f64,
    n: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Evaluation(format!("confidence level {level} outside (0, 1)")));
    }
    let estimate = curve_value_at(&froc(run, metric)?, fp_point);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cases = run.cases.len();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let mut redraws = 0;
        loop {
            let indices: Vec<usize> = (0..cases).map(|_| rng.gen_range(0..cases)).collect();
            let mut hit_scores: Vec<(Category, Option<f64>)> = Vec::new();
            let mut fp_scores: Vec<f64> = Vec::new();
            let mut normals = 0usize;
            for &ci in &indices {
                hit_scores.extend(run.cases[ci].lesions.iter().copied());
                fp_scores.extend(run.cases[ci].fp_scores.iter().copied());
                normals += run.cases[ci].normal_breasts;
            }
            match froc_from_parts(&hit_scores, &fp_scores, normals, metric) {
                Ok(curve) => {
                    values.push(curve_value_at(&curve, fp_point));
                    break;
                }
                Err(_) => {
                    redraws += 1;
                    if redraws > 1000 {
                        return Err(Error::Evaluation(
                            "confidence_interval: could not draw a valid resample".into(),
                        ));
                    }
                }
            }
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let q = |p: f64| -> f64 {
        let pos = p * (values.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let w = pos - lo as f64;
        values[lo] * (1.0 - w) + values[hi] * w
    };
    let alpha = (1.0 - level) / 2.0;
    Ok((q(alpha).min(estimate), q(1.0 - alpha).max(estimate)))
}
