//! Dynamic-series preprocessing: motion compensation, pre-contrast
//! subtraction, temporal normalization on the aortic reference time-point,
//! Otsu-based breast cropping and per-breast intensity normalization.
//!
//! The output of [`preprocess_study`] is one model-ready tensor per breast:
//! 13 subtraction volumes cropped to `crop_size x crop_size` in-plane, all
//! slices kept.

use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox3D;
use crate::records::BreastSide;
use crate::volume::{read_tensor4, write_tensor4, DynamicSeries};

/// Number of post-reference subtraction volumes fed to the model. This is the
/// maximum available across patients with a 20-point acquisition.
pub const TEMPORAL_CHANNELS: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RegistrationKind {
    /// Exhaustive integer-translation search maximizing normalized
    /// cross-correlation (the shipped reference backend).
    #[default]
    Translation,
    /// Pass volumes through unchanged (for already-aligned data).
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// The reference time-point is the first one whose aortic ROI mean
    /// exceeds this fraction of the maximum ROI mean over time.
    pub reference_fraction: f64,
    /// Post-reference window length (temporal channel count).
    pub window_len: usize,
    /// In-plane crop size in voxels; the input width must equal twice this.
    pub crop_size: usize,
    /// The crop starts this many rows above the breast top-point.
    pub top_margin: usize,
    pub registration: RegistrationKind,
    /// Search radius (voxels per axis) of the translation registrar.
    pub search_radius: i64,
    /// Each breast tensor is divided by this percentile of its own nonzero
    /// values before entering the network.
    pub normalize_percentile: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            reference_fraction: 0.2,
            window_len: TEMPORAL_CHANNELS,
            crop_size: 192,
            top_margin: 5,
            registration: RegistrationKind::Translation,
            search_radius: 5,
            normalize_percentile: 0.99,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.reference_fraction && self.reference_fraction < 1.0) {
            return Err(Error::Config("preprocess.reference_fraction: must lie in (0, 1)".into()));
        }
        if self.window_len == 0 || self.crop_size == 0 {
            return Err(Error::Config("preprocess.window_len/crop_size: must be positive".into()));
        }
        if !(0.0 < self.normalize_percentile && self.normalize_percentile <= 1.0) {
            return Err(Error::Config("preprocess.normalize_percentile: must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Registration
// ---------------------------------------------------------------------------

/// Pluggable volume-to-volume registration.
///
/// The clinical pipeline this models used Elastix (rigid 250 iterations +
/// B-spline 500 iterations, adaptive stochastic gradient descent, mutual
/// information, three resolutions); hooking that up is an external-tool
/// adapter implementing this trait. The shipped reference backend recovers
/// global integer translations, which is what the phantom generator injects.
pub trait RegistrationBackend: Sync {
    /// Resample `moving` into the space of `fixed`.
    fn register(&self, fixed: ArrayView3<'_, f32>, moving: ArrayView3<'_, f32>)
        -> Result<Array3<f32>>;
}

pub struct IdentityRegistrar;

impl RegistrationBackend for IdentityRegistrar {
    fn register(
        &self,
        _fixed: ArrayView3<'_, f32>,
        moving: ArrayView3<'_, f32>,
    ) -> Result<Array3<f32>> {
        Ok(moving.to_owned())
    }
}

/// Exhaustive integer-translation search (`±max_shift` voxels per axis)
/// maximizing normalized cross-correlation over the overlap region.
pub struct TranslationSearchRegistrar {
    pub max_shift: i64,
}

impl TranslationSearchRegistrar {
    pub fn new(max_shift: i64) -> Self {
        Self { max_shift }
    }

    /// Estimated displacement of `moving` relative to `fixed`, in voxels
    /// `(z, y, x)`: translating `moving` by the negated result aligns it.
    /// Ties prefer the smallest shift.
    pub fn find_shift(&self, fixed: ArrayView3<'_, f32>, moving: ArrayView3<'_, f32>) -> [i64; 3] {
        let r = self.max_shift;
        let mut candidates: Vec<[i64; 3]> = Vec::new();
        for z in -r..=r {
            for y in -r..=r {
                for x in -r..=r {
                    candidates.push([z, y, x]);
                }
            }
        }
        candidates.sort_by_key(|s| (s[0] * s[0] + s[1] * s[1] + s[2] * s[2], s[0], s[1], s[2]));

        let scores: Vec<f64> = candidates
            .par_iter()
            .map(|&shift| ncc_shifted(fixed, moving, shift))
            .collect();
        let mut best = 0usize;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        candidates[best]
    }
}

/// NCC between `fixed` and `moving` under the hypothesis that the moving
/// content is displaced by `shift` (`moving[v] == fixed[v - shift]`),
/// computed over the overlap region by pairing `fixed[v]` with
/// `moving[v + shift]`.
fn ncc_shifted(fixed: ArrayView3<'_, f32>, moving: ArrayView3<'_, f32>, shift: [i64; 3]) -> f64 {
    let shape = fixed.shape();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let n = shape[a] as i64;
        let lo_i = 0i64.max(-shift[a]);
        let hi_i = n.min(n - shift[a]);
        if hi_i <= lo_i {
            return f64::NEG_INFINITY;
        }
        lo[a] = lo_i as usize;
        hi[a] = hi_i as usize;
    }
    let f = fixed.slice(s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]);
    let m = moving.slice(s![
        (lo[0] as i64 + shift[0]) as usize..(hi[0] as i64 + shift[0]) as usize,
        (lo[1] as i64 + shift[1]) as usize..(hi[1] as i64 + shift[1]) as usize,
        (lo[2] as i64 + shift[2]) as usize..(hi[2] as i64 + shift[2]) as usize
    ]);

    let n = f.len() as f64;
    let mut sf = 0.0f64;
    let mut sm = 0.0f64;
    ndarray::Zip::from(&f).and(&m).for_each(|&a, &b| {
        sf += a as f64;
        sm += b as f64;
    });
    let (mf, mm) = (sf / n, sm / n);
    let mut num = 0.0f64;
    let mut df = 0.0f64;
    let mut dm = 0.0f64;
    ndarray::Zip::from(&f).and(&m).for_each(|&a, &b| {
        let da = a as f64 - mf;
        let db = b as f64 - mm;
        num += da * db;
        df += da * da;
        dm += db * db;
    });
    if df <= 0.0 || dm <= 0.0 {
        return f64::NEG_INFINITY;
    }
    num / (df * dm).sqrt()
}

/// Translate a volume by integer voxels, zero-filling uncovered regions.
pub fn translate_volume(vol: ArrayView3<'_, f32>, shift: [i64; 3]) -> Array3<f32> {
    let shape = vol.shape();
    let mut out = Array3::zeros((shape[0], shape[1], shape[2]));
    let mut src_lo = [0usize; 3];
    let mut src_hi = [0usize; 3];
    let mut dst_lo = [0usize; 3];
    for a in 0..3 {
        let n = shape[a] as i64;
        let lo = 0i64.max(shift[a]);
        let hi = n.min(n + shift[a]);
        if hi <= lo {
            return out;
        }
        dst_lo[a] = lo as usize;
        src_lo[a] = (lo - shift[a]) as usize;
        src_hi[a] = (hi - shift[a]) as usize;
    }
    let len = [src_hi[0] - src_lo[0], src_hi[1] - src_lo[1], src_hi[2] - src_lo[2]];
    let src = vol.slice(s![
        src_lo[0]..src_lo[0] + len[0],
        src_lo[1]..src_lo[1] + len[1],
        src_lo[2]..src_lo[2] + len[2]
    ]);
    out.slice_mut(s![
        dst_lo[0]..dst_lo[0] + len[0],
        dst_lo[1]..dst_lo[1] + len[1],
        dst_lo[2]..dst_lo[2] + len[2]
    ])
    .assign(&src);
    out
}

impl RegistrationBackend for TranslationSearchRegistrar {
    fn register(
        &self,
        fixed: ArrayView3<'_, f32>,
        moving: ArrayView3<'_, f32>,
    ) -> Result<Array3<f32>> {
        let motion = self.find_shift(fixed, moving);
        Ok(translate_volume(moving, [-motion[0], -motion[1], -motion[2]]))
    }
}

/// Register every volume `t >= 1` onto volume 0. Volume 0 passes through.
pub fn motion_compensate(
    series: &DynamicSeries,
    registrar: &dyn RegistrationBackend,
) -> Result<DynamicSeries> {
    let t_count = series.num_volumes();
    if t_count == 0 {
        return Err(Error::InvalidInput("empty dynamic series".into()));
    }
    let fixed = series.volume(0);
    let mut out = series.data.clone();
    for t in 1..t_count {
        let registered = registrar
            .register(fixed, series.volume(t))
            .map_err(|e| Error::Registration { time_index: t, message: e.to_string() })?;
        if registered.shape() != fixed.shape() {
            return Err(Error::Registration {
                time_index: t,
                message: "backend changed the volume shape".into(),
            });
        }
        out.index_axis_mut(Axis(0), t).assign(&registered);
    }
    DynamicSeries::new(out, series.spacing_mm, series.time_index.clone())
}

// ---------------------------------------------------------------------------
// Subtraction and temporal normalization
// ---------------------------------------------------------------------------

/// Subtract the pre-contrast volume (t = 0) from every later volume,
/// clamping at zero. Output volume `t` corresponds to input volume `t + 1`.
pub fn subtract_precontrast(series: &DynamicSeries) -> Result<DynamicSeries> {
    let t_count = series.num_volumes();
    if t_count < 2 {
        return Err(Error::InvalidInput(format!(
            "subtraction needs at least 2 volumes, found {t_count}"
        )));
    }
    let [d, h, w] = series.volume_shape();
    let pre = series.volume(0);
    let mut out = Array4::zeros((t_count - 1, d, h, w));
    for t in 1..t_count {
        let mut dst = out.index_axis_mut(Axis(0), t - 1);
        ndarray::Zip::from(&mut dst)
            .and(&series.volume(t))
            .and(&pre)
            .for_each(|o, &v, &p| *o = (v - p).max(0.0));
    }
    DynamicSeries::new(out, series.spacing_mm, series.time_index[1..].to_vec())
}

/// Voxel index ranges (per axis) of the voxels whose centers lie inside
/// `roi`, clamped to `shape`.
fn roi_voxel_range(roi: &BoundingBox3D, shape: [usize; 3]) -> Result<[(usize, usize); 3]> {
    let mut ranges = [(0usize, 0usize); 3];
    for a in 0..3 {
        let lo = roi.min()[a].ceil().max(0.0) as usize;
        let hi = (roi.max()[a].floor() as i64).min(shape[a] as i64).max(0) as usize;
        if hi <= lo {
            return Err(Error::InvalidInput(format!(
                "ROI covers no voxels on axis {a} within volume shape {shape:?}"
            )));
        }
        ranges[a] = (lo, hi);
    }
    Ok(ranges)
}

fn roi_mean(vol: ArrayView3<'_, f32>, r: &[(usize, usize); 3]) -> f64 {
    let slab = vol.slice(s![r[0].0..r[0].1, r[1].0..r[1].1, r[2].0..r[2].1]);
    slab.iter().map(|&v| v as f64).sum::<f64>() / slab.len() as f64
}

/// Index (into the subtracted series) of the first time-point at which the
/// aorta enhances: the first ROI mean exceeding `fraction` of the maximum ROI
/// mean over time. Errors when the ROI never enhances or fewer than
/// `window_len` volumes remain from the detected index.
pub fn find_reference_timepoint(
    subtracted: &DynamicSeries,
    aorta_roi: &BoundingBox3D,
    fraction: f64,
    window_len: usize,
) -> Result<usize> {
    let ranges = roi_voxel_range(aorta_roi, subtracted.volume_shape())?;
    let means: Vec<f64> =
        (0..subtracted.num_volumes()).map(|t| roi_mean(subtracted.volume(t), &ranges)).collect();
    let peak = means.iter().cloned().fold(f64::MIN, f64::max);
    if peak <= 0.0 {
        return Err(Error::ReferenceDetection(
            "aortic ROI never enhances (peak mean <= 0)".into(),
        ));
    }
    let threshold = fraction * peak;
    let reference = means
        .iter()
        .position(|&m| m > threshold)
        .ok_or_else(|| Error::ReferenceDetection("no ROI mean exceeds the threshold".into()))?;
    if subtracted.num_volumes() - reference < window_len {
        return Err(Error::ReferenceDetection(format!(
            "only {} volumes remain from reference {reference}, need {window_len}",
            subtracted.num_volumes() - reference
        )));
    }
    Ok(reference)
}

/// The `window_len` volumes starting at `reference`.
pub fn select_temporal_window(
    subtracted: &DynamicSeries,
    reference: usize,
    window_len: usize,
) -> Result<DynamicSeries> {
    let t_count = subtracted.num_volumes();
    if reference + window_len > t_count {
        return Err(Error::InvalidInput(format!(
            "window [{reference}, {}) exceeds series length {t_count}",
            reference + window_len
        )));
    }
    let data = subtracted.data.slice(s![reference..reference + window_len, .., .., ..]).to_owned();
    let time_index = subtracted.time_index[reference..reference + window_len].to_vec();
    DynamicSeries::new(data, subtracted.spacing_mm, time_index)
}

// ---------------------------------------------------------------------------
// Otsu segmentation and cropping
// ---------------------------------------------------------------------------

/// Otsu threshold over a 256-bin histogram: the cut maximizing between-class
/// variance. Exact ties (runs of empty bins between the classes) resolve to
/// the middle tied cut, so the threshold lands mid-gap for well-separated
/// modes. Returns the intensity at the chosen bin boundary; foreground is
/// everything at or above it. Errors when the input has fewer than two
/// distinct values.
pub fn otsu_threshold(values: impl IntoIterator<Item = f32>) -> Result<f32> {
    const BINS: usize = 256;
    let values: Vec<f32> = values.into_iter().collect();
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in &values {
        min = min.min(v);
        max = max.max(v);
    }
    if values.is_empty() || !min.is_finite() || !max.is_finite() || min == max {
        return Err(Error::InvalidInput(
            "otsu threshold needs at least two distinct finite values".into(),
        ));
    }

    let width = (max - min) as f64 / BINS as f64;
    let mut hist = [0u64; BINS];
    for &v in &values {
        let bin = (((v - min) as f64 / width) as usize).min(BINS - 1);
        hist[bin] += 1;
    }

    let total = values.len() as f64;
    let sum_total: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    let mut best_var = f64::NEG_INFINITY;
    let mut best_cuts: Vec<usize> = Vec::new();
    for cut in 0..BINS - 1 {
        w0 += hist[cut] as f64;
        sum0 += cut as f64 * hist[cut] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_total - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_cuts.clear();
            best_cuts.push(cut);
        } else if var == best_var {
            best_cuts.push(cut);
        }
    }
    let best_cut = best_cuts[best_cuts.len() / 2];
    Ok(min + ((best_cut + 1) as f64 * width) as f32)
}

/// One preprocessed breast: 13 subtraction channels, cropped. Data layout is
/// `(t, z, y, x)`; `crop_origin` maps tensor voxel (0,0,0) back into the
/// original volume (entries may be negative when padding was needed).
#[derive(Debug, Clone, PartialEq)]
pub struct BreastTensor {
    pub data: Array4<f32>,
    pub side: BreastSide,
    pub crop_origin: [i64; 3],
}

/// Sidecar metadata for one breast tensor, serialized as
/// `<base>.crop.json` next to the tensor files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropMeta {
    pub side: BreastSide,
    pub crop_origin: [i64; 3],
    pub original_shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub top_row: usize,
    pub otsu_threshold: f32,
    pub reference_timepoint: usize,
    /// Divisor applied to the tensor intensities (percentile normalization).
    pub intensity_scale: f32,
}

impl BreastTensor {
    /// Map a box from tensor coordinates back into original-volume
    /// coordinates.
    pub fn to_original(&self, bbox: &BoundingBox3D) -> BoundingBox3D {
        bbox.translated([
            self.crop_origin[0] as f64,
            self.crop_origin[1] as f64,
            self.crop_origin[2] as f64,
        ])
    }

    /// Map a box from original-volume coordinates into tensor coordinates,
    /// clipped to the tensor extent. `None` when the box misses the crop.
    pub fn to_cropped(&self, bbox: &BoundingBox3D) -> Option<BoundingBox3D> {
        to_cropped(bbox, self.crop_origin, crop_extent(&self.data))
    }
}

fn crop_extent(data: &Array4<f32>) -> [f64; 3] {
    let s = data.shape();
    [s[1] as f64, s[2] as f64, s[3] as f64]
}

pub fn to_original(bbox: &BoundingBox3D, crop_origin: [i64; 3]) -> BoundingBox3D {
    bbox.translated([crop_origin[0] as f64, crop_origin[1] as f64, crop_origin[2] as f64])
}

pub fn to_cropped(
    bbox: &BoundingBox3D,
    crop_origin: [i64; 3],
    extent: [f64; 3],
) -> Option<BoundingBox3D> {
    let shifted = bbox.translated([
        -crop_origin[0] as f64,
        -crop_origin[1] as f64,
        -crop_origin[2] as f64,
    ]);
    let bounds = BoundingBox3D::new([0.0, 0.0, 0.0], extent).ok()?;
    shifted.intersection(&bounds)
}

/// Split into left/right halves, segment each half of the pre-contrast
/// volume with Otsu, and crop `crop_size` rows starting `top_margin` rows
/// above the first foreground row. Rows outside the volume are zero-padded.
///
/// `precontrast` must be the unsubtracted volume 0; `window` holds the 13
/// subtraction channels.
/// Per-side segmentation facts recorded during cropping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropFacts {
    pub top_row: usize,
    pub otsu_threshold: f32,
}

pub fn split_and_crop(
    precontrast: ArrayView3<'_, f32>,
    window: &DynamicSeries,
    config: &PreprocessConfig,
) -> Result<((BreastTensor, CropFacts), (BreastTensor, CropFacts))> {
    let [d, h, w] = window.volume_shape();
    let pshape = precontrast.shape();
    if [pshape[0], pshape[1], pshape[2]] != [d, h, w] {
        return Err(Error::InvalidInput(
            "pre-contrast volume and subtraction window shapes differ".into(),
        ));
    }
    if w % 2 != 0 {
        return Err(Error::InvalidInput(format!("in-plane width {w} is odd, cannot halve")));
    }
    if w / 2 != config.crop_size {
        return Err(Error::InvalidInput(format!(
            "half width {} does not match crop_size {}",
            w / 2,
            config.crop_size
        )));
    }

    let mut tensors = Vec::with_capacity(2);
    for side in BreastSide::BOTH {
        let (x0, x1) = match side {
            BreastSide::Left => (0, w / 2),
            BreastSide::Right => (w / 2, w),
        };
        let half = precontrast.slice(s![.., .., x0..x1]);
        let threshold = otsu_threshold(half.iter().cloned())
            .map_err(|e| Error::Segmentation(format!("{side:?} breast: {e}")))?;

        let mut top_row = None;
        'rows: for y in 0..h {
            for z in 0..d {
                for x in 0..w / 2 {
                    if half[(z, y, x)] >= threshold {
                        top_row = Some(y);
                        break 'rows;
                    }
                }
            }
        }
        let top_row = top_row.ok_or_else(|| {
            Error::Segmentation(format!("{side:?} breast: empty foreground after Otsu"))
        })?;

        let y_start = top_row as i64 - config.top_margin as i64;
        let cs = config.crop_size;
        let t = window.num_volumes();
        let mut data = Array4::<f32>::zeros((t, d, cs, cs));
        let y_lo = y_start.max(0) as usize;
        let y_hi = ((y_start + cs as i64).min(h as i64)).max(0) as usize;
        if y_hi > y_lo {
            let dst_y0 = (y_lo as i64 - y_start) as usize;
            let rows = y_hi - y_lo;
            data.slice_mut(s![.., .., dst_y0..dst_y0 + rows, ..])
                .assign(&window.data.slice(s![.., .., y_lo..y_hi, x0..x1]));
        }
        tensors.push((
            BreastTensor { data, side, crop_origin: [0, y_start, x0 as i64] },
            CropFacts { top_row, otsu_threshold: threshold },
        ));
    }

    let right = tensors.pop().expect("two sides");
    let left = tensors.pop().expect("two sides");
    Ok((left, right))
}

/// Percentile of the nonzero values (0.99 = the 99th percentile); `None`
/// when everything is zero.
pub fn nonzero_percentile(data: &Array4<f32>, percentile: f64) -> Option<f32> {
    let mut nonzero: Vec<f32> = data.iter().cloned().filter(|&v| v != 0.0).collect();
    if nonzero.is_empty() {
        return None;
    }
    let k = ((nonzero.len() - 1) as f64 * percentile).floor() as usize;
    let (_, kth, _) = nonzero.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).unwrap());
    Some(*kth)
}

/// Scale a tensor by 1/percentile of its nonzero values. Returns the divisor.
pub fn normalize_intensity(tensor: &mut BreastTensor, percentile: f64) -> f32 {
    match nonzero_percentile(&tensor.data, percentile) {
        Some(p) if p > 0.0 => {
            tensor.data.mapv_inplace(|v| v / p);
            p
        }
        _ => 1.0,
    }
}

/// Everything `preprocess_study` produces for one study.
pub struct PreprocessedStudy {
    pub left: BreastTensor,
    pub right: BreastTensor,
    pub left_meta: CropMeta,
    pub right_meta: CropMeta,
    pub reference_timepoint: usize,
}

/// Full preprocessing chain for one study: motion compensation, subtraction,
/// reference detection, temporal windowing, split/crop, normalization.
pub fn preprocess_study(
    series: &DynamicSeries,
    aorta_roi: &BoundingBox3D,
    config: &PreprocessConfig,
) -> Result<PreprocessedStudy> {
    config.validate()?;
    let registered = match config.registration {
        RegistrationKind::Identity => series.clone(),
        RegistrationKind::Translation => {
            let registrar = TranslationSearchRegistrar::new(config.search_radius);
            motion_compensate(series, &registrar)?
        }
    };
    let subtracted = subtract_precontrast(&registered)?;
    let reference = find_reference_timepoint(
        &subtracted,
        aorta_roi,
        config.reference_fraction,
        config.window_len,
    )?;
    let window = select_temporal_window(&subtracted, reference, config.window_len)?;
    let ((mut left, left_facts), (mut right, right_facts)) =
        split_and_crop(registered.volume(0), &window, config)?;
    let left_scale = normalize_intensity(&mut left, config.normalize_percentile);
    let right_scale = normalize_intensity(&mut right, config.normalize_percentile);

    let make_meta = |t: &BreastTensor, facts: CropFacts, scale: f32| CropMeta {
        side: t.side,
        crop_origin: t.crop_origin,
        original_shape: series.volume_shape(),
        spacing_mm: series.spacing_mm,
        top_row: facts.top_row,
        otsu_threshold: facts.otsu_threshold,
        reference_timepoint: reference,
        intensity_scale: scale,
    };
    let left_meta = make_meta(&left, left_facts, left_scale);
    let right_meta = make_meta(&right, right_facts, right_scale);
    Ok(PreprocessedStudy { left, right, left_meta, right_meta, reference_timepoint: reference })
}

/// Write `<base>.f32`, `<base>.json` and `<base>.crop.json`.
pub fn write_breast_tensor(base: &Path, tensor: &BreastTensor, meta: &CropMeta) -> Result<()> {
    write_tensor4(base, &tensor.data, meta.spacing_mm)?;
    let crop_path = crop_meta_path(base);
    let f = std::io::BufWriter::new(std::fs::File::create(crop_path)?);
    serde_json::to_writer_pretty(f, meta)?;
    Ok(())
}

pub fn read_breast_tensor(base: &Path) -> Result<(BreastTensor, CropMeta)> {
    let data = read_tensor4(base)?;
    let meta: CropMeta =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(crop_meta_path(base))?))?;
    Ok((BreastTensor { data, side: meta.side, crop_origin: meta.crop_origin }, meta))
}

fn crop_meta_path(base: &Path) -> std::path::PathBuf {
    let stem = match base.extension().and_then(|e| e.to_str()) {
        Some("f32") | Some("json") => base.with_extension(""),
        _ => base.to_path_buf(),
    };
    let mut os = stem.into_os_string();
    os.push(".crop.json");
    std::path::PathBuf::from(os)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    fn series_from(volumes: Vec<Array3<f32>>) -> DynamicSeries {
        let t = volumes.len();
        let sh = volumes[0].dim();
        let mut data = Array4::zeros((t, sh.0, sh.1, sh.2));
        for (i, v) in volumes.into_iter().enumerate() {
            data.index_axis_mut(Axis(0), i).assign(&v);
        }
        DynamicSeries::new(data, [2.5, 1.0, 1.0], (0..t as i64).collect()).unwrap()
    }

    fn textured_volume(seed: u64, shape: (usize, usize, usize)) -> Array3<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.gen_range(0.0..100.0))
    }

    #[test]
    fn identity_registrar_passes_through() {
        let v0 = textured_volume(1, (4, 8, 8));
        let v1 = textured_volume(2, (4, 8, 8));
        let series = series_from(vec![v0, v1]);
        let out = motion_compensate(&series, &IdentityRegistrar).unwrap();
        assert_eq!(out.data, series.data);
    }

    #[test]
    fn translation_search_recovers_injected_shift() {
        let fixed = textured_volume(3, (8, 16, 16));
        let shift = [2i64, 3, -1];
        let moving = translate_volume(fixed.view(), shift);
        let reg = TranslationSearchRegistrar::new(5);
        assert_eq!(reg.find_shift(fixed.view(), moving.view()), shift);
        let registered = reg.register(fixed.view(), moving.view()).unwrap();
        // Interior voxels must match exactly after undoing the shift.
        let inner = s![3..5, 4..12, 2..14];
        assert_eq!(registered.slice(inner), fixed.slice(inner));
    }

    #[test]
    fn translation_search_zero_for_aligned() {
        let fixed = textured_volume(4, (6, 10, 10));
        let reg = TranslationSearchRegistrar::new(5);
        assert_eq!(reg.find_shift(fixed.view(), fixed.view()), [0, 0, 0]);
    }

    #[test]
    fn subtraction_of_constant_series_is_zero() {
        let v = Array3::from_elem((2, 3, 3), 42.0f32);
        let series = series_from(vec![v.clone(), v.clone(), v]);
        let sub = subtract_precontrast(&series).unwrap();
        assert_eq!(sub.num_volumes(), 2);
        assert!(sub.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn subtraction_of_linear_ramp() {
        let base = textured_volume(5, (2, 3, 3));
        let c = 7.0f32;
        let vols: Vec<Array3<f32>> = (0..4).map(|t| &base + t as f32 * c).collect();
        let sub = subtract_precontrast(&series_from(vols)).unwrap();
        for t in 0..3 {
            for &v in sub.volume(t).iter() {
                assert!((v - (t as f32 + 1.0) * c).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn subtraction_clamps_negative() {
        let hi = Array3::from_elem((1, 2, 2), 10.0f32);
        let lo = Array3::from_elem((1, 2, 2), 4.0f32);
        let sub = subtract_precontrast(&series_from(vec![hi, lo])).unwrap();
        assert!(sub.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subtraction_needs_two_volumes() {
        let series = series_from(vec![Array3::zeros((1, 2, 2))]);
        assert!(subtract_precontrast(&series).is_err());
    }

    fn enhancing_series(onset_sub: usize, t_sub: usize) -> (DynamicSeries, BoundingBox3D) {
        // Subtracted-series stand-in: ROI voxels jump to 50 from `onset_sub`.
        let mut data = Array4::<f32>::zeros((t_sub, 4, 8, 8));
        for t in onset_sub..t_sub {
            data.slice_mut(s![t, 1..3, 2..4, 2..4]).fill(50.0);
        }
        let series = DynamicSeries::new(data, [1.0; 3], (0..t_sub as i64).collect()).unwrap();
        let roi = BoundingBox3D::new([1.0, 2.0, 2.0], [3.0, 4.0, 4.0]).unwrap();
        (series, roi)
    }

    #[test]
    fn reference_timepoint_found_at_onset() {
        let (series, roi) = enhancing_series(3, 16);
        assert_eq!(find_reference_timepoint(&series, &roi, 0.2, 13).unwrap(), 3);
    }

    #[test]
    fn reference_timepoint_zero_when_enhancing_from_start() {
        let (series, roi) = enhancing_series(0, 13);
        assert_eq!(find_reference_timepoint(&series, &roi, 0.2, 13).unwrap(), 0);
    }

    #[test]
    fn reference_timepoint_errors_when_never_enhancing() {
        let data = Array4::<f32>::zeros((16, 4, 8, 8));
        let series = DynamicSeries::new(data, [1.0; 3], (0..16).collect()).unwrap();
        let roi = BoundingBox3D::new([1.0, 2.0, 2.0], [3.0, 4.0, 4.0]).unwrap();
        assert!(matches!(
            find_reference_timepoint(&series, &roi, 0.2, 13),
            Err(Error::ReferenceDetection(_))
        ));
    }

    #[test]
    fn reference_timepoint_errors_when_window_does_not_fit() {
        let (series, roi) = enhancing_series(8, 20);
        // Only 12 volumes remain from t=8.
        assert!(matches!(
            find_reference_timepoint(&series, &roi, 0.2, 13),
            Err(Error::ReferenceDetection(_))
        ));
    }

    #[test]
    fn temporal_window_slicing() {
        let (series, _) = enhancing_series(0, 20);
        let w = select_temporal_window(&series, 5, 13).unwrap();
        assert_eq!(w.num_volumes(), 13);
        assert_eq!(w.time_index, (5..18).collect::<Vec<i64>>());
        let whole = select_temporal_window(&series, 0, 13).unwrap();
        assert_eq!(whole.num_volumes(), 13);
        assert!(select_temporal_window(&series, 8, 13).is_err());
    }

    #[test]
    fn otsu_bimodal_two_values() {
        let vals: Vec<f32> =
            (0..100).map(|i| if i < 50 { 10.0 } else { 200.0 }).collect();
        let t = otsu_threshold(vals).unwrap();
        assert!(t > 10.0 && t < 200.0, "threshold {t}");
    }

    #[test]
    fn otsu_rejects_constant() {
        assert!(otsu_threshold(vec![5.0f32; 64]).is_err());
    }

    /// Exhaustive search over all bin cuts, recomputed from scratch (same
    /// mid-run tie rule, evaluated through an independent per-cut pass).
    fn otsu_oracle(values: &[f32]) -> f32 {
        let min = values.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let width = (max - min) as f64 / 256.0;
        let bin_of = |v: f32| (((v - min) as f64 / width) as usize).min(255);
        let mut best_var = f64::NEG_INFINITY;
        let mut best_cuts: Vec<usize> = Vec::new();
        for cut in 0..255usize {
            let c0: Vec<f64> =
                values.iter().filter(|&&v| bin_of(v) <= cut).map(|&v| bin_of(v) as f64).collect();
            let c1: Vec<f64> =
                values.iter().filter(|&&v| bin_of(v) > cut).map(|&v| bin_of(v) as f64).collect();
            if c0.is_empty() || c1.is_empty() {
                continue;
            }
            let m0 = c0.iter().sum::<f64>() / c0.len() as f64;
            let m1 = c1.iter().sum::<f64>() / c1.len() as f64;
            let var = c0.len() as f64 * c1.len() as f64 * (m0 - m1) * (m0 - m1);
            if var > best_var {
                best_var = var;
                best_cuts.clear();
                best_cuts.push(cut);
            } else if var == best_var {
                best_cuts.push(cut);
            }
        }
        min + ((best_cuts[best_cuts.len() / 2] + 1) as f64 * width) as f32
    }

    #[test]
    fn otsu_matches_exhaustive_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        for _ in 0..50 {
            let n = rng.gen_range(50..400);
            let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-30.0..250.0)).collect();
            let got = otsu_threshold(values.clone()).unwrap();
            let want = otsu_oracle(&values);
            assert!((got - want).abs() < 1e-5, "got {got}, want {want}");
        }
    }

    #[test]
    fn otsu_gaussian_mixture_threshold_in_gap() {
        let mut rng = ChaCha20Rng::seed_from_u64(67);
        let lo = Normal::new(50.0f32, 5.0).unwrap();
        let hi = Normal::new(180.0f32, 10.0).unwrap();
        let mut values = Vec::new();
        for _ in 0..2000 {
            values.push(lo.sample(&mut rng));
            values.push(hi.sample(&mut rng));
        }
        let t = otsu_threshold(values).unwrap();
        assert!(t > 80.0 && t < 150.0, "threshold {t}");
    }

    /// A crude two-breast scene: bright half-ellipsoids starting at `top_row`
    /// on a dark background, pre-contrast only.
    fn two_breast_precontrast(
        shape: (usize, usize, usize),
        top_row: usize,
    ) -> Array3<f32> {
        let (d, h, w) = shape;
        let mut vol = Array3::from_elem(shape, 5.0f32);
        for (cx, _side) in [(w / 4, 0), (3 * w / 4, 1)] {
            let ry = (h - top_row) as f64 * 0.8;
            let rx = w as f64 / 5.0;
            let rz = d as f64 / 2.2;
            let cz = d as f64 / 2.0;
            for z in 0..d {
                for y in top_row..h {
                    for x in 0..w {
                        let dz = (z as f64 + 0.5 - cz) / rz;
                        let dy = (y as f64 + 0.5 - top_row as f64) / ry;
                        let dx = (x as f64 + 0.5 - cx as f64) / rx;
                        if dz * dz + dy * dy + dx * dx <= 1.0 {
                            vol[(z, y, x)] = 200.0;
                        }
                    }
                }
            }
        }
        vol
    }

    fn small_config(crop: usize) -> PreprocessConfig {
        PreprocessConfig {
            crop_size: crop,
            window_len: 3,
            registration: RegistrationKind::Identity,
            ..PreprocessConfig::default()
        }
    }

    #[test]
    fn crop_rows_start_five_above_top_point() {
        let pre = two_breast_precontrast((4, 384, 384), 40);
        let window = series_from(vec![
            Array3::zeros((4, 384, 384)),
            Array3::zeros((4, 384, 384)),
            Array3::zeros((4, 384, 384)),
        ]);
        let cfg = small_config(192);
        let ((left, left_facts), (right, _)) = split_and_crop(pre.view(), &window, &cfg).unwrap();
        // Top-point at row 40 -> rows [35, 227).
        assert_eq!(left_facts.top_row, 40);
        assert_eq!(left.crop_origin, [0, 35, 0]);
        assert_eq!(right.crop_origin, [0, 35, 192]);
        assert_eq!(left.data.shape(), &[3, 4, 192, 192]);
    }

    #[test]
    fn crop_zero_pads_when_anatomy_is_shallow() {
        // Volume of 64 rows with breasts near the top: crop 96 rows must pad.
        let pre = two_breast_precontrast((2, 64, 192), 8);
        let vols = vec![pre.clone(), pre.clone(), pre.clone()];
        let window = series_from(vols);
        let cfg = small_config(96);
        let ((left, _), _) = split_and_crop(pre.view(), &window, &cfg).unwrap();
        assert_eq!(left.data.shape(), &[3, 2, 96, 96]);
        // Rows beyond the volume are zero.
        assert!(left.data.slice(s![.., .., 64.., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_phantom_gives_mirrored_tensors() {
        let (d, h, w) = (3, 96, 192);
        let pre = two_breast_precontrast((d, h, w), 20);
        let sub = pre.mapv(|v| if v > 100.0 { 30.0 } else { 0.0 });
        let window = series_from(vec![sub.clone(), sub.clone(), sub]);
        let cfg = small_config(96);
        let ((left, _), (right, _)) = split_and_crop(pre.view(), &window, &cfg).unwrap();
        for t in 0..3 {
            for z in 0..d {
                for y in 0..96 {
                    for x in 0..96 {
                        assert_eq!(
                            left.data[(t, z, y, x)],
                            right.data[(t, z, y, 95 - x)],
                            "mirror mismatch at {t},{z},{y},{x}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn crop_round_trip_is_exact() {
        let tensor = BreastTensor {
            data: Array4::zeros((3, 4, 96, 96)),
            side: BreastSide::Right,
            crop_origin: [0, 35, 96],
        };
        let in_crop = BoundingBox3D::new([1.0, 10.0, 20.0], [3.0, 30.0, 50.0]).unwrap();
        let orig = tensor.to_original(&in_crop);
        assert_eq!(orig.min(), [1.0, 45.0, 116.0]);
        let back = tensor.to_cropped(&orig).unwrap();
        assert_eq!(back, in_crop);
    }

    #[test]
    fn odd_width_rejected() {
        let pre = Array3::<f32>::zeros((2, 8, 7));
        let window = series_from(vec![Array3::zeros((2, 8, 7))]);
        assert!(split_and_crop(pre.view(), &window, &small_config(3)).is_err());
    }

    #[test]
    fn normalization_divides_by_percentile() {
        let mut tensor = BreastTensor {
            data: Array4::from_shape_fn((1, 1, 10, 10), |(_, _, y, x)| (y * 10 + x) as f32),
            side: BreastSide::Left,
            crop_origin: [0, 0, 0],
        };
        let p = normalize_intensity(&mut tensor, 0.99);
        assert!(p > 90.0);
        let max = tensor.data.iter().cloned().fold(f32::MIN, f32::max);
        assert!(max <= 99.0 / 97.0 + 1e-5);
        // All-zero tensor is left unchanged.
        let mut zero = BreastTensor {
            data: Array4::zeros((1, 1, 2, 2)),
            side: BreastSide::Left,
            crop_origin: [0, 0, 0],
        };
        assert_eq!(normalize_intensity(&mut zero, 0.99), 1.0);
    }

    #[test]
    fn breast_tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tensor = BreastTensor {
            data: Array4::from_shape_fn((2, 2, 3, 3), |(t, z, y, x)| {
                (t * 100 + z * 9 + y * 3 + x) as f32
            }),
            side: BreastSide::Right,
            crop_origin: [0, -2, 3],
        };
        let meta = CropMeta {
            side: BreastSide::Right,
            crop_origin: [0, -2, 3],
            original_shape: [2, 8, 6],
            spacing_mm: [2.5, 1.0, 1.0],
            top_row: 3,
            otsu_threshold: 12.5,
            reference_timepoint: 2,
            intensity_scale: 1.5,
        };
        let base = dir.path().join("right");
        write_breast_tensor(&base, &tensor, &meta).unwrap();
        let (back, back_meta) = read_breast_tensor(&base).unwrap();
        assert_eq!(back, tensor);
        assert_eq!(back_meta, meta);
    }
}
