use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Dims3;

/// What the intensity values of a volume currently mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntensityDomain {
    /// Raw CT intensities in Hounsfield units.
    #[default]
    Hounsfield,
    /// Windowed and normalized network input.
    Normalized,
}

/// One CT volume with its label grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    pub dims: Dims3,
    /// Physical voxel size in mm along x, y, z.
    pub spacing: [f64; 3],
    pub image: Vec<f32>,
    pub label: Vec<u8>,
    pub intensity: IntensityDomain,
}

impl VolumeSample {
    pub fn new(
        id: impl Into<String>,
        dims: Dims3,
        spacing: [f64; 3],
        image: Vec<f32>,
        label: Vec<u8>,
        intensity: IntensityDomain,
    ) -> Result<Self> {
        let s = Self {
            id: id.into(),
            dims,
            spacing,
            image,
            label,
            intensity,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.len();
        if self.image.len() != n || self.label.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "volume {}: grid {} holds {n} voxels but image has {} and label {}",
                self.id,
                self.dims,
                self.image.len(),
                self.label.len()
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "volume {}: spacing {:?} must be positive",
                self.id, self.spacing
            )));
        }
        Ok(())
    }

    /// Fails if any label is outside `0..n_classes`.
    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        match self.label.iter().find(|&&l| l as usize >= n_classes) {
            Some(&l) => Err(Error::InvalidInput(format!(
                "volume {}: label {l} outside {n_classes} classes",
                self.id
            ))),
            None => Ok(()),
        }
    }

    /// Voxel count per class id `0..n_classes`.
    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &l in &self.label {
            if (l as usize) < n_classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// Image values as f64 network input.
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64).collect()
    }
}
