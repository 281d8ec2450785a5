//! Study records, lesion annotations and their on-disk forms: JSON-lines for
//! detections/annotations, `corpus.json` for study indexes and `cases.json`
//! for the breast universe used by evaluation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox3D, Detection};

/// Lesion category. Follow-up-proven benign lesions are the hard examples:
/// visually close to background, never biopsied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Malignant,
    BenignBiopsied,
    BenignFollowup,
}

impl Category {
    pub const ALL: [Category; 3] =
        [Category::Malignant, Category::BenignBiopsied, Category::BenignFollowup];

    pub fn is_benign(self) -> bool {
        !matches!(self, Category::Malignant)
    }
}

/// Ground-truth lesion: box in original volume coordinates plus category,
/// attached to one breast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionAnnotation {
    #[serde(flatten)]
    pub bbox: BoundingBox3D,
    pub category: Category,
    pub breast_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BreastSide {
    Left,
    Right,
}

impl BreastSide {
    pub const BOTH: [BreastSide; 2] = [BreastSide::Left, BreastSide::Right];

    pub fn suffix(self) -> &'static str {
        match self {
            BreastSide::Left => "L",
            BreastSide::Right => "R",
        }
    }
}

/// Conventional breast identifier: `<study_id>_L` / `<study_id>_R`.
pub fn breast_id(study_id: &str, side: BreastSide) -> String {
    format!("{study_id}_{}", side.suffix())
}

/// Paths of the two preprocessed breast tensors of a study (file base names,
/// crop metadata sits next to them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedPaths {
    pub left: PathBuf,
    pub right: PathBuf,
}

/// One MRI study: both breasts of one patient on one date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub patient_id: String,
    pub study_id: String,
    pub date: NaiveDate,
    /// All lesion annotations of both breasts, original coordinates.
    pub annotations: Vec<LesionAnnotation>,
    /// Base path of the raw dynamic series, relative to the corpus root.
    pub series: PathBuf,
    /// Aortic ROI used for temporal normalization.
    pub aorta_roi: BoundingBox3D,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessed: Option<PreprocessedPaths>,
}

impl StudyRecord {
    pub fn breast_ids(&self) -> [String; 2] {
        [breast_id(&self.study_id, BreastSide::Left), breast_id(&self.study_id, BreastSide::Right)]
    }

    pub fn annotations_for(&self, side: BreastSide) -> Vec<&LesionAnnotation> {
        let id = breast_id(&self.study_id, side);
        self.annotations.iter().filter(|a| a.breast_id == id).collect()
    }
}

/// Corpus index written by the phantom generator and consumed by the
/// training/evaluation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub studies: Vec<StudyRecord>,
}

impl CorpusIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("corpus.json");
        let index: CorpusIndex = serde_json::from_reader(BufReader::new(File::open(&path)?))?;
        Ok(index)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(File::create(dir.join("corpus.json"))?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn all_annotations(&self) -> Vec<LesionAnnotation> {
        self.studies.iter().flat_map(|s| s.annotations.iter().cloned()).collect()
    }
}

/// The case/breast universe for evaluation: which breasts exist and how they
/// group into studies (the bootstrap resampling unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub cases: Vec<CaseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub study_id: String,
    pub breast_ids: Vec<String>,
}

impl CaseManifest {
    pub fn from_studies(studies: &[StudyRecord]) -> Self {
        CaseManifest {
            cases: studies
                .iter()
                .map(|s| CaseEntry {
                    study_id: s.study_id.clone(),
                    breast_ids: s.breast_ids().to_vec(),
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.flush()?;
        Ok(())
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_jsonl(path, dets)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    read_jsonl(path)
}

pub fn write_annotations(path: &Path, anns: &[LesionAnnotation]) -> Result<()> {
    write_jsonl(path, anns)
}

pub fn read_annotations(path: &Path) -> Result<Vec<LesionAnnotation>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox(min: [f64; 3], max: [f64; 3]) -> BoundingBox3D {
        BoundingBox3D::new(min, max).unwrap()
    }

    #[test]
    fn annotation_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let anns = vec![
            LesionAnnotation {
                bbox: bbox([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]),
                category: Category::Malignant,
                breast_id: "s000_L".into(),
            },
            LesionAnnotation {
                bbox: bbox([0.0, 0.0, 0.0], [2.0, 2.0, 2.0]),
                category: Category::BenignFollowup,
                breast_id: "s000_R".into(),
            },
        ];
        let path = dir.path().join("annotations.jsonl");
        write_annotations(&path, &anns).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"category\":\"malignant\""));
        assert!(text.contains("benign-followup"));
        assert_eq!(read_annotations(&path).unwrap(), anns);
    }

    #[test]
    fn breast_id_convention() {
        assert_eq!(breast_id("s042", BreastSide::Left), "s042_L");
        assert_eq!(breast_id("s042", BreastSide::Right), "s042_R");
    }
}
