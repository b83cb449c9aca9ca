//! Measurement datasets, normalization and the `SSMT` file format.
//!
//! ```text
//! "SSMT"             magic
//! u32                version (1)
//! u64 N, u64 T, u64 p
//! u32                flags: bit0 ground truth present, bit1 image data
//! [f64; p]           channel means
//! [f64; p]           channel standard deviations
//! f64                measurement noise std
//! [f32; N·T·p]       measurements, trajectory-major then time-major
//! [f32; N·T·p]       noiseless ground truth (only with bit0)
//! ```
//!
//! Files always hold raw (unnormalized) values; the stored statistics are
//! those of the file's own measurements. Noise is generated with
//! xoshiro256++ streams seeded per trajectory and Box–Muller normals.

use crate::autodiff::Tensor;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 4] = b"SSMT";
pub const DATASET_VERSION: u32 = 1;

const FLAG_TRUTH: u32 = 1;
const FLAG_IMAGE: u32 = 2;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },
    #[error("cannot write a normalized dataset; save the raw data instead")]
    Normalized,
}

/// Per-channel affine normalization `(y − mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(p: usize) -> Self {
        Self {
            mean: vec![0.0; p],
            std: vec![1.0; p],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes a flat buffer of `p`-channel rows in place.
    pub fn apply(&self, values: &mut [f64]) {
        let p = self.dim();
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % p]) / self.std[i % p];
        }
    }

    /// Inverse of [`NormStats::apply`].
    pub fn invert(&self, values: &mut [f64]) {
        let p = self.dim();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % p] + self.mean[i % p];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    len: usize,
    horizon: usize,
    dim: usize,
    measurements: Vec<f64>,
    ground_truth: Option<Vec<f64>>,
    noise_std: f64,
    is_image: bool,
    /// Statistics used to normalize `measurements`, if they are normalized.
    normalization: Option<NormStats>,
}

impl TrajectoryDataset {
    pub fn new(
        len: usize,
        horizon: usize,
        dim: usize,
        measurements: Vec<f64>,
        ground_truth: Option<Vec<f64>>,
        noise_std: f64,
        is_image: bool,
    ) -> Result<Self, DatasetError> {
        let expected = len * horizon * dim;
        if horizon == 0 || dim == 0 {
            return Err(DatasetError::Malformed(
                "horizon and measurement dim must be positive".into(),
            ));
        }
        if measurements.len() != expected
            || ground_truth.as_ref().is_some_and(|g| g.len() != expected)
        {
            return Err(DatasetError::Malformed(format!(
                "expected {expected} values for N={len}, T={horizon}, p={dim}"
            )));
        }
        Ok(Self {
            len,
            horizon,
            dim,
            measurements,
            ground_truth,
            noise_std,
            is_image,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn measurement_dim(&self) -> usize {
        self.dim
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn is_image(&self) -> bool {
        self.is_image
    }

    pub fn normalization(&self) -> Option<&NormStats> {
        self.normalization.as_ref()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.ground_truth.is_some()
    }

    /// All `T · p` measurements of trajectory `j`.
    pub fn trajectory(&self, j: usize) -> &[f64] {
        let n = self.horizon * self.dim;
        &self.measurements[j * n..(j + 1) * n]
    }

    pub fn measurement(&self, j: usize, t: usize) -> &[f64] {
        let start = (j * self.horizon + t) * self.dim;
        &self.measurements[start..start + self.dim]
    }

    /// Measurements of trajectory `j` as a `[T × p]` tensor.
    pub fn trajectory_tensor(&self, j: usize) -> Tensor {
        Tensor::new(vec![self.horizon, self.dim], self.trajectory(j).to_vec())
            .expect("consistent shape")
    }

    /// Noiseless measurements of trajectory `j`, always in raw units.
    pub fn ground_truth(&self, j: usize) -> Option<&[f64]> {
        let n = self.horizon * self.dim;
        self.ground_truth.as_ref().map(|g| &g[j * n..(j + 1) * n])
    }

    pub fn measurements(&self) -> &[f64] {
        &self.measurements
    }

    /// Per-channel mean and std of the current measurements.
    pub fn channel_stats(&self) -> Result<NormStats, DatasetError> {
        let p = self.dim;
        let count = (self.len * self.horizon) as f64;
        let mut mean = vec![0.0; p];
        for (i, v) in self.measurements.iter().enumerate() {
            mean[i % p] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; p];
        for (i, v) in self.measurements.iter().enumerate() {
            var[i % p] += (v - mean[i % p]).powi(2);
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
        if let Some(channel) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(DatasetError::ZeroVariance { channel });
        }
        Ok(NormStats { mean, std })
    }

    /// Standardizes every channel with this dataset's own statistics.
    /// Image datasets are left unchanged (pixels already lie in [0, 1]).
    pub fn normalize(&self) -> Result<(Self, NormStats), DatasetError> {
        let stats = if self.is_image {
            NormStats::identity(self.dim)
        } else {
            self.channel_stats()?
        };
        Ok((self.normalize_with(&stats)?, stats))
    }

    /// Normalizes with externally supplied (training-set) statistics.
    pub fn normalize_with(&self, stats: &NormStats) -> Result<Self, DatasetError> {
        if stats.dim() != self.dim {
            return Err(DatasetError::Malformed(format!(
                "statistics have {} channels, data has {}",
                stats.dim(),
                self.dim
            )));
        }
        if let Some(channel) = stats.std.iter().position(|s| !(*s > 0.0)) {
            return Err(DatasetError::ZeroVariance { channel });
        }
        let mut out = self.denormalize();
        stats.apply(&mut out.measurements);
        out.normalization = Some(stats.clone());
        Ok(out)
    }

    /// Returns the dataset in raw units.
    pub fn denormalize(&self) -> Self {
        let mut out = self.clone();
        if let Some(stats) = out.normalization.take() {
            stats.invert(&mut out.measurements);
        }
        out
    }

    /// Dataset made of the trajectories `ids`, in that order.
    pub fn select(&self, ids: &[usize]) -> Self {
        let n = self.horizon * self.dim;
        let pick = |v: &[f64]| {
            ids.iter()
                .flat_map(|&j| v[j * n..(j + 1) * n].iter().copied())
                .collect::<Vec<_>>()
        };
        Self {
            len: ids.len(),
            measurements: pick(&self.measurements),
            ground_truth: self.ground_truth.as_deref().map(pick),
            normalization: self.normalization.clone(),
            ..self.clone()
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), DatasetError> {
        if self.normalization.is_some() {
            return Err(DatasetError::Normalized);
        }
        let stats = self
            .channel_stats()
            .unwrap_or_else(|_| NormStats::identity(self.dim));
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for v in [self.len, self.horizon, self.dim] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let flags = if self.ground_truth.is_some() {
            FLAG_TRUTH
        } else {
            0
        } | if self.is_image { FLAG_IMAGE } else { 0 };
        w.write_all(&flags.to_le_bytes())?;
        for v in stats.mean.iter().chain(&stats.std).chain([&self.noise_std]) {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut put = |values: &[f64]| -> io::Result<()> {
            let mut buf = Vec::with_capacity(values.len() * 4);
            for v in values {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf)
        };
        put(&self.measurements)?;
        if let Some(g) = &self.ground_truth {
            put(g)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, DatasetError> {
        let header = read_header(r)?;
        let count = header.len * header.horizon * header.dim;
        let read_block = |r: &mut dyn Read| -> Result<Vec<f64>, DatasetError> {
            let mut bytes = vec![0u8; count * 4];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect())
        };
        let measurements = read_block(r)?;
        let ground_truth = if header.has_truth {
            Some(read_block(r)?)
        } else {
            None
        };
        Self::new(
            header.len,
            header.horizon,
            header.dim,
            measurements,
            ground_truth,
            header.noise_std,
            header.is_image,
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

/// Fixed-size part of an `SSMT` file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub len: usize,
    pub horizon: usize,
    pub dim: usize,
    pub has_truth: bool,
    pub is_image: bool,
    pub stats: NormStats,
    pub noise_std: f64,
}

pub fn read_header(r: &mut impl Read) -> Result<DatasetHeader, DatasetError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != DATASET_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut b8)?;
        *d = u64::from_le_bytes(b8) as usize;
    }
    r.read_exact(&mut b4)?;
    let flags = u32::from_le_bytes(b4);
    let mut floats = vec![0.0; 2 * dims[2] + 1];
    for f in &mut floats {
        r.read_exact(&mut b8)?;
        *f = f64::from_le_bytes(b8);
    }
    let noise_std = floats.pop().expect("noise std");
    let std = floats.split_off(dims[2]);
    Ok(DatasetHeader {
        len: dims[0],
        horizon: dims[1],
        dim: dims[2],
        has_truth: flags & FLAG_TRUTH != 0,
        is_image: flags & FLAG_IMAGE != 0,
        stats: NormStats { mean: floats, std },
        noise_std,
    })
}
