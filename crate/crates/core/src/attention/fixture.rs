//! Weights and trajectory fixtures: a JSON manifest next to raw
//! little-endian f32 blobs, one per matrix.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AttentionError, AttentionWeights, BlockWeights, LatentGrid};

pub const WEIGHTS_MANIFEST: &str = "weights.json";
pub const TRAJECTORY_MANIFEST: &str = "trajectory.json";

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("blob {file}: expected {expected} bytes, found {found}")]
    BlobSize { file: String, expected: usize, found: usize },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsManifest {
    pub dtype: String,
    pub heads: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryManifest {
    pub dtype: String,
    pub resolution: usize,
    pub channels: usize,
    pub steps: Vec<String>,
}

fn write_blob(dir: &Path, file: &str, values: impl Iterator<Item = f64>) -> io::Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(dir.join(file), bytes)
}

fn read_blob(dir: &Path, file: &str, len: usize) -> Result<Vec<f64>, FixtureError> {
    let bytes = fs::read(dir.join(file))?;
    if bytes.len() != len * 4 {
        return Err(FixtureError::BlobSize {
            file: file.to_string(),
            expected: len * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn tensors(w: &BlockWeights) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (layer, a) in [("sa", &w.sa), ("ca", &w.ca), ("laca", &w.laca), ("lasa", &w.lasa)] {
        for (m, arr) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
            out.push((format!("{layer}.{m}"), arr.shape().to_vec(), arr.iter().copied().collect()));
        }
    }
    out.push(("laca.gain".into(), vec![w.laca_gain.len()], w.laca_gain.to_vec()));
    out.push(("lasa.gain".into(), vec![w.lasa_gain.len()], w.lasa_gain.to_vec()));
    out
}

pub fn save_weights(dir: impl AsRef<Path>, w: &BlockWeights) -> Result<(), FixtureError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, shape, values) in tensors(w) {
        let file = format!("{name}.f32");
        write_blob(dir, &file, values.into_iter())?;
        entries.push(TensorEntry { name, shape, file });
    }
    let manifest = WeightsManifest {
        dtype: "f32le".into(),
        heads: w.sa.heads,
        tensors: entries,
    };
    fs::write(dir.join(WEIGHTS_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_weights(dir: impl AsRef<Path>) -> Result<BlockWeights, FixtureError> {
    let dir = dir.as_ref();
    let manifest: WeightsManifest = serde_json::from_str(&fs::read_to_string(dir.join(WEIGHTS_MANIFEST))?)?;
    let find = |name: &str| {
        manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| FixtureError::MissingTensor(name.to_string()))
    };
    let matrix = |name: &str| -> Result<Array2<f64>, FixtureError> {
        let t = find(name)?;
        let [r, c] = t.shape[..] else {
            return Err(AttentionError::ShapeMismatch(format!("{name} must be 2-d")).into());
        };
        let data = read_blob(dir, &t.file, r * c)?;
        Ok(Array2::from_shape_vec((r, c), data).expect("length checked"))
    };
    let vector = |name: &str| -> Result<Array1<f64>, FixtureError> {
        let t = find(name)?;
        let [n] = t.shape[..] else {
            return Err(AttentionError::ShapeMismatch(format!("{name} must be 1-d")).into());
        };
        Ok(Array1::from(read_blob(dir, &t.file, n)?))
    };
    let layer = |l: &str| -> Result<AttentionWeights, FixtureError> {
        Ok(AttentionWeights {
            wq: matrix(&format!("{l}.wq"))?,
            wk: matrix(&format!("{l}.wk"))?,
            wv: matrix(&format!("{l}.wv"))?,
            wo: matrix(&format!("{l}.wo"))?,
            heads: manifest.heads,
        })
    };
    let w = BlockWeights {
        sa: layer("sa")?,
        ca: layer("ca")?,
        laca: layer("laca")?,
        lasa: layer("lasa")?,
        laca_gain: vector("laca.gain")?,
        lasa_gain: vector("lasa.gain")?,
    };
    w.validate()?;
    Ok(w)
}

pub fn save_trajectory(dir: impl AsRef<Path>, trajectory: &[LatentGrid]) -> Result<(), FixtureError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let first = trajectory
        .first()
        .ok_or_else(|| AttentionError::ShapeMismatch("empty trajectory".into()))?;
    let mut steps = Vec::with_capacity(trajectory.len());
    for (k, z) in trajectory.iter().enumerate() {
        let file = format!("step_{k:04}.f32");
        write_blob(dir, &file, z.values().iter().copied())?;
        steps.push(file);
    }
    let manifest = TrajectoryManifest {
        dtype: "f32le".into(),
        resolution: first.resolution(),
        channels: first.channels(),
        steps,
    };
    fs::write(dir.join(TRAJECTORY_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_trajectory(dir: impl AsRef<Path>) -> Result<Vec<LatentGrid>, FixtureError> {
    let dir = dir.as_ref();
    let m: TrajectoryManifest = serde_json::from_str(&fs::read_to_string(dir.join(TRAJECTORY_MANIFEST))?)?;
    let rows = m.resolution * m.resolution;
    m.steps
        .iter()
        .map(|file| {
            let data = read_blob(dir, file, rows * m.channels)?;
            let values = Array2::from_shape_vec((rows, m.channels), data).expect("length checked");
            Ok(LatentGrid::new(m.resolution, values)?)
        })
        .collect()
}
