//! Dense row-major arrays and 3D grid geometry.
//!
//! Volumes are stored x-fastest: the flat index of voxel `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Feature maps are channel-major on top of that,
//! so channel `c` occupies the contiguous slice `c * len .. (c + 1) * len`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial extent of a voxel grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims3 {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn from_slice(s: &[usize]) -> Result<Self> {
        match s {
            [nx, ny, nz] => Ok(Self::new(*nx, *ny, *nz)),
            _ => Err(Error::InvalidInput(format!("expected a 3-element shape, got {s:?}"))),
        }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        (x, y, z)
    }

    pub fn halved(&self) -> Self {
        Self::new(self.nx / 2, self.ny / 2, self.nz / 2)
    }

    pub fn doubled(&self) -> Self {
        Self::new(self.nx * 2, self.ny * 2, self.nz * 2)
    }

    pub fn min_extent(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }

    pub fn divisible_by(&self, k: usize) -> bool {
        self.nx.is_multiple_of(k) && self.ny.is_multiple_of(k) && self.nz.is_multiple_of(k)
    }
}

impl std::fmt::Display for Dims3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// A dense f64 array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    /// A `[channels, nz, ny, nx]` feature map.
    pub fn feature_map(channels: usize, dims: Dims3, data: Vec<f64>) -> Self {
        Self::new(vec![channels, dims.nz, dims.ny, dims.nx], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Channel count and spatial grid of a `[c, nz, ny, nx]` feature map.
    pub fn channels_and_dims(&self) -> (usize, Dims3) {
        assert_eq!(self.shape.len(), 4, "not a feature map: {:?}", self.shape);
        (self.shape[0], Dims3::new(self.shape[3], self.shape[2], self.shape[1]))
    }

    /// Rows and columns of a 2D tensor.
    pub fn rows_cols(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "not a matrix: {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-voxel argmax across the channel axis of a `[c, ...]` map.
pub fn argmax_channels(map: &Tensor) -> Vec<u8> {
    let (c, dims) = map.channels_and_dims();
    let n = dims.len();
    let d = map.data();
    (0..n)
        .map(|i| {
            let mut best = 0usize;
            let mut best_v = d[i];
            for k in 1..c {
                let v = d[k * n + i];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let d = Dims3::new(5, 4, 3);
        for i in 0..d.len() {
            let (x, y, z) = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
    }

    #[test]
    fn argmax_picks_first_on_ties() {
        let dims = Dims3::new(2, 1, 1);
        let t = Tensor::feature_map(2, dims, vec![1.0, 0.0, 1.0, 2.0]);
        assert_eq!(argmax_channels(&t), vec![0, 1]);
    }
}
