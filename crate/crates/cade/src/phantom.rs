//! Deterministic synthetic 4D DCE-MRI generator.
//!
//! The phantom is two half-ellipsoid breasts on a chest-wall slab: bright
//! non-enhancing fat, slowly enhancing parenchyma, fast-enhancing thin
//! vessels, a descending-aorta cylinder that enhances at the configured
//! contrast-arrival index, and ellipsoidal lesions with category-dependent
//! wash-in (malignant steepest, follow-up benign low-contrast and hard).
//! Everything is a pure function of `(config, seed)`.

use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox3D;
use crate::records::{
    breast_id, BreastSide, CaseManifest, Category, CorpusIndex, LesionAnnotation, StudyRecord,
};
use crate::volume::{write_series, DynamicSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Series shape `(T, D, H, W)`. The full clinical geometry would be
    /// `(20, 60, 384, 384)`; the default stays desk-scale.
    pub shape: [usize; 4],
    pub spacing_mm: [f64; 3],
    /// Probability weights for a study containing 0, 1, 2, ... lesions.
    pub lesion_count_weights: Vec<f64>,
    /// Relative frequency of malignant / biopsied-benign / follow-up-benign
    /// lesions (the clinical mix is 365/148/59).
    pub category_weights: [f64; 3],
    /// Effective lesion radius in millimetres, (mean, sd), per category.
    pub malignant_radius_mm: (f64, f64),
    pub benign_radius_mm: (f64, f64),
    pub followup_radius_mm: (f64, f64),
    pub vessels_per_breast: usize,
    pub noise_sigma: f64,
    /// Maximum |integer shift| per axis injected per post-contrast volume.
    pub motion_amplitude: i64,
    /// Raw acquisition index at which contrast reaches the aorta.
    pub contrast_arrival: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [16, 16, 96, 192],
            spacing_mm: [2.5, 1.0, 1.0],
            lesion_count_weights: vec![0.25, 0.55, 0.20],
            category_weights: [365.0, 148.0, 59.0],
            malignant_radius_mm: (13.6, 7.5),
            benign_radius_mm: (12.0, 7.5),
            followup_radius_mm: (8.3, 3.5),
            vessels_per_breast: 2,
            noise_sigma: 4.0,
            motion_amplitude: 0,
            contrast_arrival: 3,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let [t, d, h, w] = self.shape;
        if t < 2 || d < 4 || h < 16 || w < 16 {
            return Err(Error::Config(format!("phantom.shape: {:?} is too small", self.shape)));
        }
        if w % 2 != 0 {
            return Err(Error::Config("phantom.shape: width must be even".into()));
        }
        if self.contrast_arrival == 0 || self.contrast_arrival >= t {
            return Err(Error::Config(
                "phantom.contrast_arrival: must lie in [1, T)".into(),
            ));
        }
        if self.lesion_count_weights.is_empty() {
            return Err(Error::Config("phantom.lesion_count_weights: empty".into()));
        }
        Ok(())
    }
}

/// Half-ellipsoid breast description; kept analytic so the mask can be
/// materialized on demand without storing a voxel volume in the truth file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreastGeometry {
    pub side: BreastSide,
    /// Ellipsoid center `(z, y, x)`; y is the chest-wall row.
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl BreastGeometry {
    pub fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        // Anterior half only (y above the chest wall).
        if y > self.center[1] {
            return false;
        }
        let dz = (z - self.center[0]) / self.radii[0];
        let dy = (y - self.center[1]) / self.radii[1];
        let dx = (x - self.center[2]) / self.radii[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomLesion {
    #[serde(flatten)]
    pub bbox: BoundingBox3D,
    pub category: Category,
    pub breast_id: String,
    /// Index into the subtracted series at which enhancement starts.
    pub onset_subtracted: usize,
}

/// Ground truth accompanying a generated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub lesions: Vec<PhantomLesion>,
    pub aorta_roi: BoundingBox3D,
    /// Index into the subtracted series at which the aorta enhances; equals
    /// what reference detection must recover on the noise-free series.
    pub aorta_onset_subtracted: usize,
    /// Injected global translation per time-point (zero at t = 0).
    pub motion: Vec<[i64; 3]>,
    pub breasts: [BreastGeometry; 2],
}

pub struct PhantomStudy {
    pub series: DynamicSeries,
    /// Same anatomy and motion, no additive noise.
    pub noise_free: DynamicSeries,
    pub truth: PhantomTruth,
    pub record: StudyRecord,
}

// Tissue signal model: value(t) = base + amplitude * washin(t).
const AIR_BASE: f32 = 2.0;
const FAT_BASE: f32 = 200.0;
const CHEST_BASE: f32 = 100.0;
const PARENCHYMA_BASE: f32 = 80.0;
const PARENCHYMA_AMP: f32 = 30.0;
const VESSEL_BASE: f32 = 60.0;
const VESSEL_AMP: f32 = 250.0;
const AORTA_BASE: f32 = 90.0;
const AORTA_AMP: f32 = 400.0;
const LESION_BASE: f32 = 70.0;

fn category_kinetics(category: Category) -> (f32, f64, usize) {
    // (amplitude, tau, onset delay after aorta arrival)
    match category {
        Category::Malignant => (300.0, 0.8, 0),
        Category::BenignBiopsied => (220.0, 1.6, 1),
        Category::BenignFollowup => (90.0, 2.5, 2),
    }
}

/// Saturating wash-in ramp: 0 before `onset`, then 1 - exp(-(t-onset+1)/tau).
/// Monotone nondecreasing with a plateau at 1.
fn washin(t: usize, onset: usize, tau: f64) -> f32 {
    if t < onset {
        0.0
    } else {
        (1.0 - (-((t - onset) as f64 + 1.0) / tau).exp()) as f32
    }
}

/// Per-voxel static tissue maps from which every time-point is synthesized.
struct TissueMaps {
    base: Array3<f32>,
    amplitude: Array3<f32>,
    onset: Array3<i32>, // raw time index; i32::MAX = never enhances
    tau: Array3<f32>,
}

fn derive_rng(seed: u64, salt: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt))
}

fn sample_radius_mm(rng: &mut ChaCha20Rng, mean_sd: (f64, f64)) -> f64 {
    let dist = Normal::new(mean_sd.0, mean_sd.1).expect("valid normal");
    for _ in 0..64 {
        let r = dist.sample(rng);
        if r > 1.0 {
            return r;
        }
    }
    mean_sd.0.max(2.0)
}

struct LesionSeed {
    center: [f64; 3],
    radii: [f64; 3],
    category: Category,
    side: BreastSide,
}

fn place_lesions(
    rng: &mut ChaCha20Rng,
    config: &PhantomConfig,
    breasts: &[BreastGeometry; 2],
) -> Result<Vec<LesionSeed>> {
    let total_w: f64 = config.lesion_count_weights.iter().sum();
    let mut pick = rng.gen_range(0.0..total_w);
    let mut count = 0usize;
    for (i, &w) in config.lesion_count_weights.iter().enumerate() {
        if pick < w {
            count = i;
            break;
        }
        pick -= w;
    }

    let mut lesions: Vec<LesionSeed> = Vec::with_capacity(count);
    for _ in 0..count {
        let cat_w: f64 = config.category_weights.iter().sum();
        let mut pick = rng.gen_range(0.0..cat_w);
        let mut category = Category::Malignant;
        for (i, &w) in config.category_weights.iter().enumerate() {
            if pick < w {
                category = Category::ALL[i];
                break;
            }
            pick -= w;
        }
        let mean_sd = match category {
            Category::Malignant => config.malignant_radius_mm,
            Category::BenignBiopsied => config.benign_radius_mm,
            Category::BenignFollowup => config.followup_radius_mm,
        };

        let mut placed = false;
        for attempt in 0..40 {
            let breast = breasts[rng.gen_range(0..2usize)];
            // Later retries shrink the draw so tiny phantom volumes still
            // find room for every requested lesion.
            let shrink = 1.0 / (1.0 + attempt as f64 * 0.08);
            let r_mm = sample_radius_mm(rng, mean_sd) * shrink;
            let mut radii = [
                r_mm / config.spacing_mm[0],
                r_mm / config.spacing_mm[1] * rng.gen_range(0.8..1.25),
                r_mm / config.spacing_mm[2] * rng.gen_range(0.8..1.25),
            ];
            // Clamp so the lesion can actually sit inside the breast.
            for a in 0..3 {
                let hi = (breast.radii[a] * 0.45).max(1.05);
                radii[a] = radii[a].clamp(1.0, hi);
            }
            // Uniform center in the interior half-ellipsoid.
            let u: f64 = rng.gen_range(0.05..0.55);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let phi: f64 = rng.gen_range(0.2..std::f64::consts::FRAC_PI_2);
            let center = [
                breast.center[0] + breast.radii[0] * u * phi.sin() * theta.cos(),
                breast.center[1] - breast.radii[1] * u * phi.cos() - radii[1] - 2.0,
                breast.center[2] + breast.radii[2] * u * phi.sin() * theta.sin(),
            ];
            let fits = breast.contains(center[0] - radii[0], center[1], center[2])
                && breast.contains(center[0] + radii[0], center[1], center[2])
                && breast.contains(center[0], center[1] - radii[1], center[2])
                && breast.contains(center[0], center[1] + radii[1], center[2])
                && breast.contains(center[0], center[1], center[2] - radii[2])
                && breast.contains(center[0], center[1], center[2] + radii[2]);
            if !fits {
                continue;
            }
            // No overlap with already-placed lesions.
            let overlaps = lesions.iter().any(|l| {
                (0..3).all(|a| (l.center[a] - center[a]).abs() < l.radii[a] + radii[a] + 2.0)
            });
            if overlaps {
                continue;
            }
            lesions.push(LesionSeed { center, radii, category, side: breast.side });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(
                "lesion placement failed after bounded retries".into(),
            ));
        }
    }
    Ok(lesions)
}

struct VesselSeed {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

fn place_vessels(
    rng: &mut ChaCha20Rng,
    config: &PhantomConfig,
    breast: &BreastGeometry,
) -> Vec<VesselSeed> {
    (0..config.vessels_per_breast)
        .map(|_| {
            let point = |rng: &mut ChaCha20Rng| {
                [
                    breast.center[0] + rng.gen_range(-0.6..0.6) * breast.radii[0],
                    breast.center[1] - rng.gen_range(0.15..0.8) * breast.radii[1],
                    breast.center[2] + rng.gen_range(-0.6..0.6) * breast.radii[2],
                ]
            };
            VesselSeed { a: point(rng), b: point(rng), radius: rng.gen_range(1.0..1.6) }
        })
        .collect()
}

fn dist_point_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let denom = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if denom == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / denom).clamp(0.0, 1.0)
    };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt()
}

/// Deterministic phantom study. `index` names the study (`s<index>`) and
/// seeds are derived from `(config.seed, seed_salt, index)` so corpus
/// generation can run study-parallel without changing the output.
pub fn generate_phantom(config: &PhantomConfig, seed: u64, index: usize) -> Result<PhantomStudy> {
    config.validate()?;
    let [t_count, d, h, w] = config.shape;
    let mut rng = derive_rng(seed, index as u64);

    let chest_row = (h as f64 * 0.72).round();
    let top_row = (h as f64 / 10.0).max(6.0).round();
    let breasts = [
        BreastGeometry {
            side: BreastSide::Left,
            center: [d as f64 / 2.0, chest_row, w as f64 * 0.25],
            radii: [d as f64 * 0.45, chest_row - top_row, w as f64 * 0.19],
        },
        BreastGeometry {
            side: BreastSide::Right,
            center: [d as f64 / 2.0, chest_row, w as f64 * 0.75],
            radii: [d as f64 * 0.45, chest_row - top_row, w as f64 * 0.19],
        },
    ];

    let arrival = config.contrast_arrival;
    let lesion_seeds = place_lesions(&mut rng, config, &breasts)?;
    let vessels: Vec<(VesselSeed, usize)> = breasts
        .iter()
        .flat_map(|b| place_vessels(&mut rng, config, b))
        .map(|v| (v, arrival))
        .collect();

    // Aorta: cylinder along z behind the chest wall, mid-sagittal.
    let aorta_center = [chest_row + (h as f64 - chest_row) * 0.4, w as f64 * 0.5];
    let aorta_radius = 2.8f64;
    let aorta_roi = BoundingBox3D::new(
        [0.0, aorta_center[0] - 2.0, aorta_center[1] - 2.0],
        [d as f64, aorta_center[0] + 2.0, aorta_center[1] + 2.0],
    )?;

    // Paint static tissue maps, last writer wins: air < chest < breast fat <
    // parenchyma < aorta < vessels < lesions.
    let mut maps = TissueMaps {
        base: Array3::from_elem((d, h, w), AIR_BASE),
        amplitude: Array3::zeros((d, h, w)),
        onset: Array3::from_elem((d, h, w), i32::MAX),
        tau: Array3::ones((d, h, w)),
    };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (pz, py, px) = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                let idx = (z, y, x);
                if py >= chest_row {
                    maps.base[idx] = CHEST_BASE;
                }
                for breast in &breasts {
                    if breast.contains(pz, py, px) {
                        let dz = (pz - breast.center[0]) / breast.radii[0];
                        let dy = (py - breast.center[1]) / breast.radii[1];
                        let dx = (px - breast.center[2]) / breast.radii[2];
                        let rho = dz * dz + dy * dy + dx * dx;
                        if rho <= 0.30 {
                            maps.base[idx] = PARENCHYMA_BASE;
                            maps.amplitude[idx] = PARENCHYMA_AMP;
                            maps.onset[idx] = (arrival + 2) as i32;
                            maps.tau[idx] = 4.0;
                        } else {
                            maps.base[idx] = FAT_BASE;
                        }
                    }
                }
                let da = ((py - aorta_center[0]).powi(2) + (px - aorta_center[1]).powi(2)).sqrt();
                if da <= aorta_radius {
                    maps.base[idx] = AORTA_BASE;
                    maps.amplitude[idx] = AORTA_AMP;
                    maps.onset[idx] = arrival as i32;
                    maps.tau[idx] = 0.7;
                }
            }
        }
    }
    for (vessel, onset) in &vessels {
        let zr = vessel.a[0].min(vessel.b[0]) - 2.0;
        let zh = vessel.a[0].max(vessel.b[0]) + 2.0;
        let yr = vessel.a[1].min(vessel.b[1]) - 2.0;
        let yh = vessel.a[1].max(vessel.b[1]) + 2.0;
        let xr = vessel.a[2].min(vessel.b[2]) - 2.0;
        let xh = vessel.a[2].max(vessel.b[2]) + 2.0;
        for z in zr.max(0.0) as usize..(zh.ceil() as usize).min(d) {
            for y in yr.max(0.0) as usize..(yh.ceil() as usize).min(h) {
                for x in xr.max(0.0) as usize..(xh.ceil() as usize).min(w) {
                    let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                    if dist_point_segment(p, vessel.a, vessel.b) <= vessel.radius {
                        let idx = (z, y, x);
                        maps.base[idx] = VESSEL_BASE;
                        maps.amplitude[idx] = VESSEL_AMP;
                        maps.onset[idx] = *onset as i32;
                        maps.tau[idx] = 0.8;
                    }
                }
            }
        }
    }

    // Lesions last so nothing overwrites them; record tight boxes.
    let study_id = format!("s{index:04}");
    let mut lesions: Vec<PhantomLesion> = Vec::with_capacity(lesion_seeds.len());
    for seed_l in &lesion_seeds {
        let (amp, tau, delay) = category_kinetics(seed_l.category);
        let onset_raw = arrival + delay;
        if onset_raw + 2 >= t_count {
            return Err(Error::Generation(format!(
                "lesion onset {onset_raw} too late for {t_count} time-points"
            )));
        }
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let c = seed_l.center;
        let r = seed_l.radii;
        let z0 = ((c[0] - r[0]).floor().max(0.0)) as usize;
        let z1 = ((c[0] + r[0]).ceil() as usize).min(d);
        let y0 = ((c[1] - r[1]).floor().max(0.0)) as usize;
        let y1 = ((c[1] + r[1]).ceil() as usize).min(h);
        let x0 = ((c[2] - r[2]).floor().max(0.0)) as usize;
        let x1 = ((c[2] + r[2]).ceil() as usize).min(w);
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    let dz = (z as f64 + 0.5 - c[0]) / r[0];
                    let dy = (y as f64 + 0.5 - c[1]) / r[1];
                    let dx = (x as f64 + 0.5 - c[2]) / r[2];
                    if dz * dz + dy * dy + dx * dx <= 1.0 {
                        let idx = (z, y, x);
                        maps.base[idx] = LESION_BASE;
                        maps.amplitude[idx] = amp;
                        maps.onset[idx] = onset_raw as i32;
                        maps.tau[idx] = tau as f32;
                        for (a, &v) in [z, y, x].iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v);
                        }
                    }
                }
            }
        }
        if lo[0] == usize::MAX {
            return Err(Error::Generation("lesion produced no voxel support".into()));
        }
        let bbox = BoundingBox3D::new(
            [lo[0] as f64, lo[1] as f64, lo[2] as f64],
            [hi[0] as f64 + 1.0, hi[1] as f64 + 1.0, hi[2] as f64 + 1.0],
        )?;
        lesions.push(PhantomLesion {
            bbox,
            category: seed_l.category,
            breast_id: breast_id(&study_id, seed_l.side),
            onset_subtracted: onset_raw - 1,
        });
    }

    // Injected motion, zero for the pre-contrast volume.
    let mut motion = vec![[0i64; 3]];
    for _ in 1..t_count {
        let amp = config.motion_amplitude;
        motion.push(if amp == 0 {
            [0, 0, 0]
        } else {
            [
                rng.gen_range(-amp..=amp),
                rng.gen_range(-amp..=amp),
                rng.gen_range(-amp..=amp),
            ]
        });
    }

    // Synthesize the series, one volume per time-point in parallel;
    // noise streams are derived per (seed, index, t) so the result does not
    // depend on scheduling.
    let volumes: Vec<(Array3<f32>, Array3<f32>)> = (0..t_count)
        .into_par_iter()
        .map(|t| {
            let mut clean = Array3::<f32>::zeros((d, h, w));
            ndarray::Zip::from(&mut clean)
                .and(&maps.base)
                .and(&maps.amplitude)
                .and(&maps.onset)
                .and(&maps.tau)
                .for_each(|out, &b, &a, &o, &tau| {
                    *out = if o == i32::MAX || a == 0.0 {
                        b
                    } else {
                        b + a * washin(t, o as usize, tau as f64)
                    };
                });
            if motion[t] != [0, 0, 0] {
                clean = crate::preprocessing::translate_volume(clean.view(), motion[t]);
            }
            let mut noise_rng = derive_rng(seed, (index as u64) << 20 | (t as u64 + 1));
            let normal = Normal::new(0.0f64, config.noise_sigma.max(1e-12)).unwrap();
            let noisy = if config.noise_sigma > 0.0 {
                let mut n = clean.clone();
                n.mapv_inplace(|v| (v + normal.sample(&mut noise_rng) as f32).max(0.0));
                n
            } else {
                clean.clone()
            };
            (noisy, clean)
        })
        .collect();

    let mut noisy_data = Array4::zeros((t_count, d, h, w));
    let mut clean_data = Array4::zeros((t_count, d, h, w));
    for (t, (noisy, clean)) in volumes.into_iter().enumerate() {
        noisy_data.index_axis_mut(Axis(0), t).assign(&noisy);
        clean_data.index_axis_mut(Axis(0), t).assign(&clean);
    }
    let time_index: Vec<i64> = (0..t_count as i64).collect();
    let series = DynamicSeries::new(noisy_data, config.spacing_mm, time_index.clone())?;
    let noise_free = DynamicSeries::new(clean_data, config.spacing_mm, time_index)?;

    let date = NaiveDate::from_ymd_opt(2013, 1, 1).unwrap()
        + chrono::Days::new(rng.gen_range(0..730u64));
    let annotations: Vec<LesionAnnotation> = lesions
        .iter()
        .map(|l| LesionAnnotation {
            bbox: l.bbox,
            category: l.category,
            breast_id: l.breast_id.clone(),
        })
        .collect();
    let record = StudyRecord {
        patient_id: format!("p{index:04}"),
        study_id: study_id.clone(),
        date,
        annotations,
        series: Path::new("studies").join(&study_id).join("series").to_path_buf(),
        aorta_roi,
        preprocessed: None,
    };
    let truth = PhantomTruth {
        lesions,
        aorta_roi,
        aorta_onset_subtracted: arrival - 1,
        motion,
        breasts,
    };
    Ok(PhantomStudy { series, noise_free, truth, record })
}

/// Generate `n_studies` phantoms under `dir`: per-study series + truth files,
/// `corpus.json`, `annotations.jsonl` and `cases.json`. About one study in
/// ten shares a patient with its predecessor, and dates span two years, so
/// fold construction and the temporal split both get exercised.
pub fn generate_corpus(
    n_studies: usize,
    config: &PhantomConfig,
    seed: u64,
    dir: &Path,
) -> Result<CorpusIndex> {
    if n_studies == 0 {
        return Err(Error::InvalidInput("corpus needs at least one study".into()));
    }
    config.validate()?;
    std::fs::create_dir_all(dir)?;

    let studies: Vec<(StudyRecord, PhantomTruth, DynamicSeries)> = (0..n_studies)
        .into_par_iter()
        .map(|i| {
            let study = generate_phantom(config, seed, i)?;
            Ok((study.record, study.truth, study.series))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(n_studies);
    let mut annotations = Vec::new();
    for (i, (mut record, truth, series)) in studies.into_iter().enumerate() {
        // Occasionally reuse the previous patient id (multi-study patients).
        let mut link_rng = derive_rng(seed, 0xA11C_E000 + i as u64);
        if i > 0 && link_rng.gen_bool(0.1) {
            let prev: &StudyRecord = &records[i - 1];
            record.patient_id = prev.patient_id.clone();
        }
        let study_dir = dir.join("studies").join(&record.study_id);
        std::fs::create_dir_all(&study_dir)?;
        write_series(&study_dir.join("series"), &series)?;
        let truth_file = std::io::BufWriter::new(std::fs::File::create(study_dir.join("truth.json"))?);
        serde_json::to_writer_pretty(truth_file, &truth)?;
        annotations.extend(record.annotations.iter().cloned());
        records.push(record);
    }

    let index = CorpusIndex { studies: records };
    index.save(dir)?;
    crate::records::write_annotations(&dir.join("annotations.jsonl"), &annotations)?;
    CaseManifest::from_studies(&index.studies).save(&dir.join("cases.json"))?;
    Ok(index)
}
