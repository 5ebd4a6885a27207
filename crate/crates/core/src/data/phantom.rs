//! Synthetic abdominal phantoms: non-overlapping ellipsoidal "organs" with
//! class-dependent intensity, smooth shading and Gaussian noise, in Hounsfield
//! units so they go through the same preprocessing as real scans.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{save_volume, DatasetManifest, ManifestEntry, Split};
use super::volume::{IntensityDomain, VolumeSample};
use crate::error::{Error, Result};
use crate::tensor::Dims3;

const MAX_ATTEMPTS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub n_classes: usize,
    /// Inclusive `(min, max)` ellipsoid count per foreground class `1..n_classes`.
    pub organ_counts: Vec<(usize, usize)>,
    /// Semi-axis length as a fraction of the axis extent.
    pub radius_frac: (f64, f64),
    pub spacing: [f64; 3],
    pub noise_hu: f64,
    /// Amplitude of the low-frequency shading field.
    pub shading_hu: f64,
}

impl PhantomConfig {
    pub fn new(shape: [usize; 3], n_classes: usize) -> Self {
        Self {
            shape,
            n_classes,
            organ_counts: vec![(1, 1); n_classes.saturating_sub(1)],
            radius_frac: (0.12, 0.22),
            spacing: [1.0, 1.0, 2.0],
            noise_hu: 30.0,
            shading_hu: 25.0,
        }
    }

    fn validate(&self) -> Result<Dims3> {
        let dims = Dims3::from_slice(&self.shape)?;
        if self.n_classes < 2 {
            return Err(Error::InvalidInput("a phantom needs at least two classes".into()));
        }
        if self.n_classes > u8::MAX as usize {
            return Err(Error::InvalidInput("too many classes for uint8 labels".into()));
        }
        if dims.min_extent() < 8 {
            return Err(Error::InvalidInput(format!("phantom shape {dims} has an axis below 8")));
        }
        if self.organ_counts.len() != self.n_classes - 1 {
            return Err(Error::InvalidInput(format!(
                "{} organ count ranges for {} foreground classes",
                self.organ_counts.len(),
                self.n_classes - 1
            )));
        }
        if self.organ_counts.iter().any(|&(lo, hi)| lo > hi) {
            return Err(Error::InvalidInput("organ count range with min > max".into()));
        }
        let (lo, hi) = self.radius_frac;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidInput(format!("radius range ({lo}, {hi})")));
        }
        for n in dims.as_array() {
            let r = hi * n as f64;
            if 2.0 * r + 1.0 > n as f64 {
                return Err(Error::Placement(format!(
                    "organ semi-axis {r:.1} voxels does not fit an axis of {n}"
                )));
            }
        }
        Ok(dims)
    }

    /// Mean intensity of each class, spread over the soft-tissue window.
    pub fn class_means(&self) -> Vec<f64> {
        let c = self.n_classes;
        (0..c).map(|k| -160.0 + 370.0 * k as f64 / (c - 1) as f64).collect()
    }
}

/// A generated phantom together with the generator's own bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub sample: VolumeSample,
    /// Voxels painted per class, counted while placing organs.
    pub class_counts: Vec<usize>,
    pub organs: Vec<Ellipsoid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub class_id: u8,
    pub center: [usize; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, x: usize, y: usize, z: usize, grow: f64) -> bool {
        let d = [
            x as f64 - self.center[0] as f64,
            y as f64 - self.center[1] as f64,
            z as f64 - self.center[2] as f64,
        ];
        let s: f64 = (0..3).map(|k| (d[k] / (self.radii[k] + grow)).powi(2)).sum();
        s <= 1.0
    }

    fn bounds(&self, dims: Dims3, grow: f64) -> [(usize, usize); 3] {
        let n = dims.as_array();
        let mut out = [(0, 0); 3];
        for k in 0..3 {
            let r = (self.radii[k] + grow).ceil() as isize;
            let c = self.center[k] as isize;
            out[k] = ((c - r).max(0) as usize, ((c + r) as usize).min(n[k] - 1));
        }
        out
    }
}

/// Deterministic phantom for `seed`.
pub fn generate_phantom(seed: u64, cfg: &PhantomConfig) -> Result<Phantom> {
    let dims = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label = vec![0u8; dims.len()];
    let mut counts = vec![0usize; cfg.n_classes];
    let mut organs = Vec::new();

    let mut requests: Vec<u8> = Vec::new();
    for (k, &(lo, hi)) in cfg.organ_counts.iter().enumerate() {
        let n = rng.random_range(lo..=hi);
        requests.extend(std::iter::repeat_n((k + 1) as u8, n));
    }

    let n = dims.as_array();
    for class_id in requests {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let radii: [f64; 3] = std::array::from_fn(|k| {
                (rng.random_range(cfg.radius_frac.0..=cfg.radius_frac.1) * n[k] as f64).max(1.0)
            });
            let center: [usize; 3] = std::array::from_fn(|k| {
                let r = radii[k].ceil() as usize;
                rng.random_range(r..n[k] - r)
            });
            let e = Ellipsoid {
                class_id,
                center,
                radii,
            };
            // one-voxel gap to every other organ
            let [bx, by, bz] = e.bounds(dims, 1.0);
            let clear = (bz.0..=bz.1).all(|z| {
                (by.0..=by.1)
                    .all(|y| (bx.0..=bx.1).all(|x| !e.contains(x, y, z, 1.0) || label[dims.index(x, y, z)] == 0))
            });
            if !clear {
                continue;
            }
            let [bx, by, bz] = e.bounds(dims, 0.0);
            for z in bz.0..=bz.1 {
                for y in by.0..=by.1 {
                    for x in bx.0..=bx.1 {
                        if e.contains(x, y, z, 0.0) {
                            label[dims.index(x, y, z)] = class_id;
                            counts[class_id as usize] += 1;
                        }
                    }
                }
            }
            organs.push(e);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place an organ of class {class_id} in {dims} after {MAX_ATTEMPTS} attempts"
            )));
        }
    }
    counts[0] = dims.len() - counts[1..].iter().sum::<usize>();

    let means = cfg.class_means();
    let noise = Normal::new(0.0, cfg.noise_hu.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let image = (0..dims.len())
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            let shade = cfg.shading_hu
                * ((x as f64 / n[0] as f64 * std::f64::consts::TAU + phase[0]).sin()
                    + (y as f64 / n[1] as f64 * std::f64::consts::TAU + phase[1]).sin()
                    + (z as f64 / n[2] as f64 * std::f64::consts::PI + phase[2]).sin())
                / 3.0;
            (means[label[i] as usize] + shade + noise.sample(&mut rng)) as f32
        })
        .collect();

    let sample = VolumeSample::new(
        format!("phantom_{seed}"),
        dims,
        cfg.spacing,
        image,
        label,
        IntensityDomain::Hounsfield,
    )?;
    Ok(Phantom {
        sample,
        class_counts: counts,
        organs,
    })
}

/// Shorthand with default geometry for the given per-class count ranges.
pub fn generate_synthetic_phantom(
    seed: u64,
    shape: [usize; 3],
    n_classes: usize,
    organ_count_ranges: &[(usize, usize)],
) -> Result<VolumeSample> {
    let cfg = PhantomConfig {
        organ_counts: organ_count_ranges.to_vec(),
        ..PhantomConfig::new(shape, n_classes)
    };
    Ok(generate_phantom(seed, &cfg)?.sample)
}

/// Seed of the `index`-th phantom of a dataset seeded with `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    crate::seed::derive(seed, index as u64)
}

/// Writes `train_count + test_count` phantoms as raw volumes plus `manifest.json`.
pub fn synthesize_dataset(
    out_dir: &Path,
    seed: u64,
    train_count: usize,
    test_count: usize,
    cfg: &PhantomConfig,
) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for i in 0..train_count + test_count {
        let p = generate_phantom(case_seed(seed, i), cfg)?;
        let name = format!("case_{i:03}");
        let image = PathBuf::from(format!("{name}.raw"));
        let label = PathBuf::from(format!("{name}_label.raw"));
        let mut s = p.sample;
        s.id = name;
        save_volume(&s, &out_dir.join(&image), &out_dir.join(&label))?;
        entries.push(ManifestEntry {
            image,
            label,
            split: if i < train_count { Split::Train } else { Split::Test },
        });
    }
    let mut classes = vec!["background".to_string()];
    classes.extend((1..cfg.n_classes).map(|k| format!("organ{k}")));
    let manifest = DatasetManifest { classes, entries };
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
