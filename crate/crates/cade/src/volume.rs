//! In-memory volumes and the raw tensor file format.
//!
//! Volumes are `f32` arrays in `(z, y, x)` order; a dynamic series stacks
//! them as `(t, z, y, x)`. On disk a tensor is a raw little-endian float32
//! file (C order) next to a JSON sidecar
//! `{"shape": [...], "spacing_mm": [z, y, x], "time_index": [...]}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayView3, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 4D dynamic acquisition: `data` is `(T, D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSeries {
    pub data: Array4<f32>,
    /// Voxel spacing in millimetres, `(z, y, x)`.
    pub spacing_mm: [f64; 3],
    /// Acquisition index of each stored volume in the original series.
    pub time_index: Vec<i64>,
}

impl DynamicSeries {
    pub fn new(data: Array4<f32>, spacing_mm: [f64; 3], time_index: Vec<i64>) -> Result<Self> {
        if time_index.len() != data.shape()[0] {
            return Err(Error::InvalidInput(format!(
                "time_index length {} does not match volume count {}",
                time_index.len(),
                data.shape()[0]
            )));
        }
        Ok(Self { data, spacing_mm, time_index })
    }

    pub fn num_volumes(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial shape `(D, H, W)`.
    pub fn volume_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn volume(&self, t: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(ndarray::Axis(0), t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    spacing_mm: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_index: Option<Vec<i64>>,
}

/// `base` may be given with or without the `.f32`/`.json` extension.
fn split_base(base: &Path) -> (PathBuf, PathBuf) {
    let stem = match base.extension().and_then(|e| e.to_str()) {
        Some("f32") | Some("json") => base.with_extension(""),
        _ => base.to_path_buf(),
    };
    (stem.with_extension("f32"), stem.with_extension("json"))
}

fn write_raw_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_raw_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 4 {
        return Err(Error::InvalidInput(format!(
            "{}: expected {} bytes for {} float32 values, found {}",
            path.display(),
            expected * 4,
            expected,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_tensor(base: &Path, view: ArrayViewD<'_, f32>, sidecar: &Sidecar) -> Result<()> {
    let (raw, json) = split_base(base);
    if let Some(dir) = raw.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let contiguous;
    let slice = match view.as_slice() {
        Some(s) => s,
        None => {
            contiguous = view.to_owned();
            contiguous.as_slice().expect("owned array is contiguous")
        }
    };
    write_raw_f32(&raw, slice)?;
    let mut f = BufWriter::new(File::create(json)?);
    serde_json::to_writer_pretty(&mut f, sidecar)?;
    f.flush()?;
    Ok(())
}

fn read_tensor(base: &Path) -> Result<(ndarray::ArrayD<f32>, Sidecar)> {
    let (raw, json) = split_base(base);
    let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(&json)?))?;
    let n: usize = sidecar.shape.iter().product();
    let data = read_raw_f32(&raw, n)?;
    let arr = ndarray::ArrayD::from_shape_vec(IxDyn(&sidecar.shape), data)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", raw.display())))?;
    Ok((arr, sidecar))
}

pub fn write_series(base: &Path, series: &DynamicSeries) -> Result<()> {
    let sidecar = Sidecar {
        shape: series.data.shape().to_vec(),
        spacing_mm: series.spacing_mm,
        time_index: Some(series.time_index.clone()),
    };
    write_tensor(base, series.data.view().into_dyn(), &sidecar)
}

pub fn read_series(base: &Path) -> Result<DynamicSeries> {
    let (arr, sidecar) = read_tensor(base)?;
    let arr4 = arr
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::InvalidInput(format!("{}: expected a 4D [T,D,H,W] tensor", base.display())))?;
    let t = arr4.shape()[0];
    let time_index = sidecar.time_index.unwrap_or_else(|| (0..t as i64).collect());
    DynamicSeries::new(arr4, sidecar.spacing_mm, time_index)
}

pub fn write_volume(base: &Path, vol: &Array3<f32>, spacing_mm: [f64; 3]) -> Result<()> {
    let sidecar = Sidecar { shape: vol.shape().to_vec(), spacing_mm, time_index: None };
    write_tensor(base, vol.view().into_dyn(), &sidecar)
}

pub fn read_volume(base: &Path) -> Result<(Array3<f32>, [f64; 3])> {
    let (arr, sidecar) = read_tensor(base)?;
    let arr3 = arr
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::InvalidInput(format!("{}: expected a 3D [D,H,W] tensor", base.display())))?;
    Ok((arr3, sidecar.spacing_mm))
}

/// Write a 4D tensor that is not a time series (e.g. a model input tensor).
pub fn write_tensor4(base: &Path, data: &Array4<f32>, spacing_mm: [f64; 3]) -> Result<()> {
    let sidecar = Sidecar { shape: data.shape().to_vec(), spacing_mm, time_index: None };
    write_tensor(base, data.view().into_dyn(), &sidecar)
}

pub fn read_tensor4(base: &Path) -> Result<Array4<f32>> {
    let (arr, _) = read_tensor(base)?;
    arr.into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::InvalidInput(format!("{}: expected a 4D tensor", base.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn series_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array4::from_shape_fn((3, 2, 4, 5), |(t, z, y, x)| {
            (t * 1000 + z * 100 + y * 10 + x) as f32 * 0.5
        });
        let series = DynamicSeries::new(data, [2.5, 1.0, 0.9], vec![0, 1, 2]).unwrap();
        let base = dir.path().join("series");
        write_series(&base, &series).unwrap();
        let back = read_series(&base).unwrap();
        assert_eq!(back, series);
        // Reading via either concrete path works too.
        let back2 = read_series(&dir.path().join("series.json")).unwrap();
        assert_eq!(back2, series);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array4::<f32>::zeros((2, 2, 2, 2));
        let series = DynamicSeries::new(data, [1.0; 3], vec![0, 1]).unwrap();
        let base = dir.path().join("s");
        write_series(&base, &series).unwrap();
        std::fs::write(dir.path().join("s.f32"), [0u8; 12]).unwrap();
        assert!(read_series(&base).is_err());
    }

    #[test]
    fn time_index_must_match_volume_count() {
        let data = Array4::<f32>::zeros((3, 1, 1, 1));
        assert!(DynamicSeries::new(data, [1.0; 3], vec![0, 1]).is_err());
    }
}
