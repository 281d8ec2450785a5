//! Corpus-level orchestration: preprocessing every study, running inference
//! back into original coordinates, and k-fold cross-testing.

use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::detector::RetinaNet3d;
use crate::error::{Error, Result};
use crate::evaluation::{cpm, evaluate_run, froc, MatchConfig, MetricTag};
use crate::geometry::Detection;
use crate::preprocessing::{preprocess_study, write_breast_tensor, PreprocessConfig};
use crate::records::{
    read_annotations, BreastSide, CaseManifest, CorpusIndex, PreprocessedPaths, StudyRecord,
};
use crate::volume::read_series;

/// Inference decode settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.5, max_detections: 100 }
    }
}

/// Thread pool for study-level data work, capped by `CADE_NUM_WORKERS`.
pub fn data_pool() -> rayon::ThreadPool {
    let threads = std::env::var("CADE_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool construction")
}

/// Preprocess every study of a corpus into `out_dir`: per-breast tensors,
/// crop metadata, and an updated `corpus.json` whose records carry the
/// tensor paths. Annotations and cases are copied over so the output is a
/// self-contained corpus.
pub fn preprocess_corpus(
    corpus_dir: &Path,
    out_dir: &Path,
    config: &PreprocessConfig,
) -> Result<CorpusIndex> {
    use rayon::prelude::*;
    config.validate()?;
    let index = CorpusIndex::load(corpus_dir)?;
    std::fs::create_dir_all(out_dir)?;

    let pool = data_pool();
    let processed: Vec<StudyRecord> = pool.install(|| {
        index
            .studies
            .par_iter()
            .map(|study| {
                let series = read_series(&corpus_dir.join(&study.series))?;
                let result = preprocess_study(&series, &study.aorta_roi, config)?;
                let study_rel = Path::new("studies").join(&study.study_id);
                let study_dir = out_dir.join(&study_rel);
                std::fs::create_dir_all(&study_dir)?;
                write_breast_tensor(&study_dir.join("left"), &result.left, &result.left_meta)?;
                write_breast_tensor(&study_dir.join("right"), &result.right, &result.right_meta)?;
                let mut record = study.clone();
                record.preprocessed = Some(PreprocessedPaths {
                    left: study_rel.join("left"),
                    right: study_rel.join("right"),
                });
                Ok(record)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let out_index = CorpusIndex { studies: processed };
    out_index.save(out_dir)?;
    crate::records::write_annotations(
        &out_dir.join("annotations.jsonl"),
        &out_index.all_annotations(),
    )?;
    CaseManifest::from_studies(&out_index.studies).save(&out_dir.join("cases.json"))?;
    Ok(out_index)
}

/// Run the detector over the given preprocessed studies. Detections come
/// back in ORIGINAL volume coordinates (crop origins applied) tagged with
/// their breast id.
pub fn detect_studies(
    net: &mut RetinaNet3d<f32>,
    studies: &[StudyRecord],
    corpus_root: &Path,
    config: &DetectConfig,
) -> Result<Vec<Detection>> {
    let mut detections = Vec::new();
    for study in studies {
        let pre = study.preprocessed.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!("study {} is not preprocessed", study.study_id))
        })?;
        for side in BreastSide::BOTH {
            let rel = match side {
                BreastSide::Left => &pre.left,
                BreastSide::Right => &pre.right,
            };
            let (tensor, _) = crate::preprocessing::read_breast_tensor(&corpus_root.join(rel))?;
            let input = tensor.data.view().insert_axis(Axis(0)).to_owned();
            let found = net.predict(
                &input,
                config.score_threshold,
                config.nms_iou,
                config.max_detections,
            )?;
            let bid = crate::records::breast_id(&study.study_id, side);
            for (bbox, score) in &found[0] {
                detections.push(Detection::new(
                    tensor.to_original(bbox),
                    *score,
                    bid.clone(),
                )?);
            }
        }
    }
    Ok(detections)
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_studies: usize,
    pub test_studies: usize,
    pub detections: usize,
    pub matched_lesions: usize,
    pub total_lesions: usize,
    pub cpm_detection_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossvalSummary {
    pub folds: Vec<FoldReport>,
    pub pooled_matched_lesions: usize,
    pub pooled_total_lesions: usize,
    pub pooled_cpm_detection_rate: Option<f64>,
}

/// Patient-level k-fold cross-testing: for each fold, train a fresh network
/// on the remaining folds, detect on the held-out fold, and pool the
/// per-fold outcomes into one FROC. Per-fold artifacts land in
/// `out_dir/fold-<i>/`.
#[allow(clippy::too_many_arguments)]
pub fn crossval(
    corpus: &CorpusIndex,
    corpus_root: &Path,
    folds: usize,
    seed: u64,
    network: &crate::detector::NetworkConfig,
    train_cfg: &crate::training::TrainConfig,
    loss_cfg: &crate::losses::LossConfig,
    detect_cfg: &DetectConfig,
    match_cfg: &MatchConfig,
    out_dir: &Path,
) -> Result<CrossvalSummary> {
    let assignment = crate::training::make_folds(&corpus.studies, folds, seed)?;
    std::fs::create_dir_all(out_dir)?;

    let universe = CaseManifest::from_studies(&corpus.studies);
    let annotations = corpus.all_annotations();
    let mut fold_reports = Vec::with_capacity(folds);
    let mut pooled_detections: Vec<Detection> = Vec::new();

    for (fi, test_idx) in assignment.iter().enumerate() {
        let fold_dir = out_dir.join(format!("fold-{fi}"));
        std::fs::create_dir_all(&fold_dir)?;
        let train_studies: Vec<StudyRecord> = corpus
            .studies
            .iter()
            .enumerate()
            .filter(|(si, _)| !test_idx.contains(si))
            .map(|(_, s)| s.clone())
            .collect();
        let test_studies: Vec<StudyRecord> =
            test_idx.iter().map(|&si| corpus.studies[si].clone()).collect();

        let mut fold_net_cfg = network.clone();
        fold_net_cfg.seed = seed.wrapping_add(fi as u64);
        let mut net = RetinaNet3d::<f32>::new(fold_net_cfg)?;
        let mut fold_train_cfg = train_cfg.clone();
        fold_train_cfg.seed = seed.wrapping_add(1000 + fi as u64);
        crate::training::fit(
            &mut net,
            &train_studies,
            None,
            corpus_root,
            &fold_train_cfg,
            loss_cfg,
            crate::training::FitOptions { out_dir: &fold_dir, on_epoch: None },
        )?;

        let dets = detect_studies(&mut net, &test_studies, corpus_root, detect_cfg)?;
        crate::records::write_detections(&fold_dir.join("detections.jsonl"), &dets)?;

        // Per-fold evaluation over the fold's own universe.
        let fold_universe = CaseManifest::from_studies(&test_studies);
        let fold_anns: Vec<_> = test_studies.iter().flat_map(|s| s.annotations.clone()).collect();
        let run = evaluate_run(&dets, &fold_anns, &fold_universe, match_cfg)?;
        let matched = run
            .cases
            .iter()
            .flat_map(|c| &c.lesions)
            .filter(|(_, s)| s.is_some())
            .count();
        let total = run.cases.iter().map(|c| c.lesions.len()).sum();
        let fold_cpm = froc(&run, MetricTag::DetectionRate).ok().map(|c| cpm(&c));
        let report = FoldReport {
            fold: fi,
            train_studies: train_studies.len(),
            test_studies: test_studies.len(),
            detections: dets.len(),
            matched_lesions: matched,
            total_lesions: total,
            cpm_detection_rate: fold_cpm,
        };
        serde_json::to_writer_pretty(
            std::io::BufWriter::new(std::fs::File::create(fold_dir.join("report.json"))?),
            &report,
        )?;
        fold_reports.push(report);
        pooled_detections.extend(dets);
    }

    // Pooled curve across folds: every study was tested exactly once, so the
    // pooled run is the concatenation of the per-fold runs. Cross-check the
    // bookkeeping by re-matching the pooled detections over the full corpus.
    let pooled_run = evaluate_run(&pooled_detections, &annotations, &universe, match_cfg)?;
    let pooled_matched = pooled_run
        .cases
        .iter()
        .flat_map(|c| &c.lesions)
        .filter(|(_, s)| s.is_some())
        .count();
    let per_fold_sum: usize = fold_reports.iter().map(|r| r.matched_lesions).sum();
    debug_assert_eq!(pooled_matched, per_fold_sum);
    let pooled_curve = froc(&pooled_run, MetricTag::DetectionRate).ok();
    if let Some(curve) = &pooled_curve {
        serde_json::to_writer_pretty(
            std::io::BufWriter::new(std::fs::File::create(out_dir.join("pooled_curve.json"))?),
            curve,
        )?;
    }
    crate::records::write_detections(&out_dir.join("detections.jsonl"), &pooled_detections)?;

    let summary = CrossvalSummary {
        folds: fold_reports,
        pooled_matched_lesions: pooled_matched,
        pooled_total_lesions: pooled_run.cases.iter().map(|c| c.lesions.len()).sum(),
        pooled_cpm_detection_rate: pooled_curve.as_ref().map(cpm),
    };
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("summary.json"))?),
        &summary,
    )?;
    Ok(summary)
}

/// Load the standard evaluation inputs from a run directory written by
/// `detect`/`evaluate`: `detections.jsonl`, `annotations.jsonl`, `cases.json`.
pub fn load_run_inputs(dir: &Path) -> Result<(Vec<Detection>, Vec<crate::records::LesionAnnotation>, CaseManifest)> {
    let dets = crate::records::read_detections(&dir.join("detections.jsonl"))?;
    let anns = read_annotations(&dir.join("annotations.jsonl"))?;
    let cases = CaseManifest::load(&dir.join("cases.json"))?;
    Ok((dets, anns, cases))
}

/// Create `base/run-NNNN` with the first free NNNN; never overwrites.
pub fn fresh_run_dir(base: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(base)?;
    for i in 1..10_000u32 {
        let candidate = base.join(format!("run-{i:04}"));
        if !candidate.exists() {
            std::fs::create_dir(&candidate)?;
            return Ok(candidate);
        }
    }
    Err(Error::InvalidInput(format!("no free run directory under {}", base.display())))
}

/// Require an empty or absent directory (deterministic outputs are written
/// directly and must never silently overwrite previous results).
pub fn ensure_fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty {
            return Err(Error::InvalidInput(format!(
                "output directory {} already exists and is not empty",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}
