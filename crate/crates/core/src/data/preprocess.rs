//! CT windowing, intensity normalization and grid resampling.

use serde::{Deserialize, Serialize};

use super::volume::{IntensityDomain, VolumeSample};
use crate::error::{Error, Result};
use crate::tensor::Dims3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Window range mapped affinely onto `[0, 1]`.
    #[default]
    MinMax,
    /// Windowed intensities shifted and scaled to zero mean, unit variance.
    ZScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub window_lo: f64,
    pub window_hi: f64,
    /// Output grid `[nx, ny, nz]`.
    pub target_shape: [usize; 3],
    pub normalization: Normalization,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_lo: -200.0,
            window_hi: 250.0,
            target_shape: [128, 128, 64],
            normalization: Normalization::MinMax,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_lo.is_nan() || self.window_hi.is_nan() || self.window_lo >= self.window_hi {
            return Err(Error::Config(format!(
                "window [{}, {}] is empty",
                self.window_lo, self.window_hi
            )));
        }
        if self.target_shape.iter().any(|&n| n < 4) {
            return Err(Error::Config(format!(
                "target shape {:?} has an axis below 4",
                self.target_shape
            )));
        }
        Ok(())
    }
}

/// Clamps to the window and normalizes; returns values in `[0, 1]` for min-max.
pub fn window_intensities(image: &[f32], lo: f64, hi: f64, norm: Normalization) -> Vec<f32> {
    let clamped: Vec<f64> = image.iter().map(|&v| (v as f64).clamp(lo, hi)).collect();
    match norm {
        Normalization::MinMax => clamped.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect(),
        Normalization::ZScore => {
            let n = clamped.len().max(1) as f64;
            let mean = clamped.iter().sum::<f64>() / n;
            let var = clamped.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            clamped.iter().map(|v| ((v - mean) / sd) as f32).collect()
        }
    }
}

/// Source coordinate sampled by output index `i` (cell-centre alignment).
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
}

/// Linear interpolation along one axis of a grid.
fn resample_axis(src: &[f64], dims: Dims3, axis: usize, n_out: usize) -> (Vec<f64>, Dims3) {
    let mut od = dims;
    match axis {
        0 => od.nx = n_out,
        1 => od.ny = n_out,
        _ => od.nz = n_out,
    }
    let n_in = [dims.nx, dims.ny, dims.nz][axis];
    let taps: Vec<(usize, usize, f64)> = (0..n_out)
        .map(|i| {
            let s = source_coord(i, n_in, n_out);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect();
    let mut out = vec![0.0; od.len()];
    for z in 0..od.nz {
        for y in 0..od.ny {
            for x in 0..od.nx {
                let (i0, i1, t) = match axis {
                    0 => taps[x],
                    1 => taps[y],
                    _ => taps[z],
                };
                let at = |k: usize| match axis {
                    0 => src[dims.index(k, y, z)],
                    1 => src[dims.index(x, k, z)],
                    _ => src[dims.index(x, y, k)],
                };
                let v = if t == 0.0 {
                    at(i0)
                } else {
                    at(i0) * (1.0 - t) + at(i1) * t
                };
                out[od.index(x, y, z)] = v;
            }
        }
    }
    (out, od)
}

/// Separable trilinear resampling onto `to`.
pub fn resample_trilinear(src: &[f32], from: Dims3, to: Dims3) -> Vec<f32> {
    if from == to {
        return src.to_vec();
    }
    let mut data: Vec<f64> = src.iter().map(|&v| v as f64).collect();
    let mut dims = from;
    for (axis, n) in to.as_array().into_iter().enumerate() {
        if dims.as_array()[axis] != n {
            let (d, nd) = resample_axis(&data, dims, axis, n);
            data = d;
            dims = nd;
        }
    }
    data.into_iter().map(|v| v as f32).collect()
}

fn nearest_index(i: usize, n_in: usize, n_out: usize) -> usize {
    (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
}

/// Nearest-neighbour resampling of a label grid.
pub fn resample_nearest(src: &[u8], from: Dims3, to: Dims3) -> Vec<u8> {
    if from == to {
        return src.to_vec();
    }
    let xs: Vec<usize> = (0..to.nx).map(|i| nearest_index(i, from.nx, to.nx)).collect();
    let ys: Vec<usize> = (0..to.ny).map(|i| nearest_index(i, from.ny, to.ny)).collect();
    let zs: Vec<usize> = (0..to.nz).map(|i| nearest_index(i, from.nz, to.nz)).collect();
    let mut out = Vec::with_capacity(to.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push(src[from.index(x, y, z)]);
            }
        }
    }
    out
}

/// Windows, normalizes and resamples a raw sample onto the configured grid.
///
/// Samples already in the normalized domain skip windowing, so applying this
/// twice changes nothing.
pub fn preprocess(sample: &VolumeSample, cfg: &PreprocessConfig) -> Result<VolumeSample> {
    cfg.validate()?;
    sample.validate()?;
    if sample.dims.min_extent() < 2 {
        return Err(Error::InvalidInput(format!(
            "volume {} has degenerate shape {}",
            sample.id, sample.dims
        )));
    }
    let image = match sample.intensity {
        IntensityDomain::Hounsfield => {
            window_intensities(&sample.image, cfg.window_lo, cfg.window_hi, cfg.normalization)
        }
        IntensityDomain::Normalized => sample.image.clone(),
    };
    let to = Dims3::from_slice(&cfg.target_shape)?;
    let from = sample.dims;
    let image = resample_trilinear(&image, from, to);
    let label = resample_nearest(&sample.label, from, to);
    let spacing = [
        sample.spacing[0] * from.nx as f64 / to.nx as f64,
        sample.spacing[1] * from.ny as f64 / to.ny as f64,
        sample.spacing[2] * from.nz as f64 / to.nz as f64,
    ];
    VolumeSample::new(
        sample.id.clone(),
        to,
        spacing,
        image,
        label,
        IntensityDomain::Normalized,
    )
}
