//! False-negative-first voxel sampling at feature-map resolution.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax_channels, Dims3, Tensor};

/// Nearest-neighbour downsampling of a label grid by integer factors.
pub fn downsample_label(label: &[u8], from: Dims3, to: Dims3) -> Result<Vec<u8>> {
    if label.len() != from.len() {
        return Err(Error::ShapeMismatch(format!(
            "label has {} voxels, grid {from} needs {}",
            label.len(),
            from.len()
        )));
    }
    let f = from.as_array();
    let t = to.as_array();
    if (0..3).any(|k| t[k] == 0 || !f[k].is_multiple_of(t[k])) {
        return Err(Error::ShapeMismatch(format!("{to} does not divide {from}")));
    }
    if from == to {
        return Ok(label.to_vec());
    }
    let src = |i: usize, k: usize| {
        let s = f[k] / t[k];
        i * s + (s - 1) / 2
    };
    let mut out = Vec::with_capacity(to.len());
    for z in 0..to.nz {
        for y in 0..to.ny {
            for x in 0..to.nx {
                out.push(label[from.index(src(x, 0), src(y, 1), src(z, 2))]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VoxelTag {
    Tp,
    Fn,
}

/// Tags each voxel of `label_i` by comparing it with the downsampled argmax of `score_map`.
pub fn classify_voxels(label_i: &[u8], score_map: &Tensor, layer_dims: Dims3) -> Result<Vec<VoxelTag>> {
    let (_, full) = score_map.channels_and_dims();
    if label_i.len() != layer_dims.len() {
        return Err(Error::ShapeMismatch(format!(
            "layer label has {} voxels, grid {layer_dims} needs {}",
            label_i.len(),
            layer_dims.len()
        )));
    }
    let pred = downsample_label(&argmax_channels(score_map), full, layer_dims)?;
    Ok(label_i
        .iter()
        .zip(&pred)
        .map(|(l, p)| if l == p { VoxelTag::Tp } else { VoxelTag::Fn })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapScope {
    /// Caps bound the sample of a layer across the whole batch.
    #[default]
    PerBatch,
    /// Caps bound each volume's sample separately.
    PerVolume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub total_cap: usize,
    pub fn_cap: usize,
    pub include_background: bool,
    pub scope: CapScope,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            total_cap: 1700,
            fn_cap: 1000,
            include_background: true,
            scope: CapScope::PerBatch,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_cap == 0 || self.fn_cap == 0 {
            return Err(Error::Config("sampling caps must be positive".into()));
        }
        if self.fn_cap > self.total_cap {
            return Err(Error::Config(format!(
                "fn_cap {} exceeds total_cap {}",
                self.fn_cap, self.total_cap
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledVoxel {
    /// Position of the volume within the batch.
    pub volume: u32,
    /// Flat index in the layer grid.
    pub index: usize,
    pub tag: VoxelTag,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledSet {
    pub layer_id: u32,
    pub class_id: u8,
    pub voxels: Vec<SampledVoxel>,
}

/// Every voxel selected for the feature loss in one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub total_cap: usize,
    pub fn_cap: usize,
    pub rng_seed: u64,
    pub sets: Vec<SampledSet>,
}

impl SamplingPlan {
    pub fn is_empty(&self) -> bool {
        self.sets.iter().all(|s| s.voxels.is_empty())
    }

    pub fn count(&self, layer_id: u32, tag: Option<VoxelTag>) -> usize {
        self.sets
            .iter()
            .filter(|s| s.layer_id == layer_id)
            .flat_map(|s| &s.voxels)
            .filter(|v| tag.is_none_or(|t| v.tag == t))
            .count()
    }

    pub fn layer_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.sets.iter().map(|s| s.layer_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Splits `budget` over classes in proportion to `avail`, at most `avail` each and at
/// least one for every class with something available.
pub fn apportion(budget: usize, avail: &[usize]) -> Vec<usize> {
    let total: usize = avail.iter().sum();
    if budget >= total {
        return avail.to_vec();
    }
    let mut out = vec![0; avail.len()];
    let mut present: Vec<usize> = (0..avail.len()).filter(|&i| avail[i] > 0).collect();
    if budget < present.len() {
        present.sort_by(|&a, &b| avail[b].cmp(&avail[a]).then(a.cmp(&b)));
        for &i in &present[..budget] {
            out[i] = 1;
        }
        return out;
    }
    for &i in &present {
        out[i] = 1;
    }
    let rest = budget - present.len();
    let spare: Vec<usize> = avail.iter().map(|&a| a.saturating_sub(1)).collect();
    let spare_total: usize = spare.iter().sum();
    if rest == 0 || spare_total == 0 {
        return out;
    }
    let mut remainders = Vec::new();
    let mut given = 0;
    for i in 0..avail.len() {
        let exact = rest as f64 * spare[i] as f64 / spare_total as f64;
        let base = (exact.floor() as usize).min(spare[i]);
        out[i] += base;
        given += base;
        remainders.push((exact - base as f64, i));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter() {
        if given == rest {
            break;
        }
        if out[i] < avail[i] {
            out[i] += 1;
            given += 1;
        }
    }
    out
}

/// Samples one layer's voxels across the volumes `(label_i, tags)` under a single cap.
pub fn sample_layer<R: Rng>(
    layer_id: u32,
    volumes: &[(&[u8], &[VoxelTag])],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Vec<SampledSet> {
    let n_classes = volumes
        .iter()
        .flat_map(|(l, _)| l.iter())
        .map(|&c| c as usize + 1)
        .max()
        .unwrap_or(0);
    let first = if cfg.include_background { 0 } else { 1 };
    // candidate pools per class and tag
    let mut pools: Vec<[Vec<(u32, usize)>; 2]> = (0..n_classes).map(|_| [Vec::new(), Vec::new()]).collect();
    for (v, (label, tags)) in volumes.iter().enumerate() {
        for (i, (&c, &t)) in label.iter().zip(tags.iter()).enumerate() {
            if (c as usize) < first {
                continue;
            }
            let slot = if t == VoxelTag::Fn { 1 } else { 0 };
            pools[c as usize][slot].push((v as u32, i));
        }
    }
    let fn_avail: Vec<usize> = pools.iter().map(|p| p[1].len()).collect();
    let fn_take = apportion(cfg.fn_cap.min(fn_avail.iter().sum()), &fn_avail);
    let fn_used: usize = fn_take.iter().sum();
    let tp_avail: Vec<usize> = pools.iter().map(|p| p[0].len()).collect();
    let tp_take = apportion((cfg.total_cap - fn_used).min(tp_avail.iter().sum()), &tp_avail);

    let mut sets = Vec::new();
    for c in first..n_classes {
        let mut voxels = Vec::new();
        for (slot, take, tag) in [(1, fn_take[c], VoxelTag::Fn), (0, tp_take[c], VoxelTag::Tp)] {
            let pool = &pools[c][slot];
            let mut picked: Vec<usize> = index::sample(rng, pool.len(), take).into_vec();
            picked.sort_unstable();
            voxels.extend(picked.into_iter().map(|k| SampledVoxel {
                volume: pool[k].0,
                index: pool[k].1,
                tag,
            }));
        }
        if !voxels.is_empty() {
            sets.push(SampledSet {
                layer_id,
                class_id: c as u8,
                voxels,
            });
        }
    }
    sets
}

/// Sampling plan for a single volume at a single layer.
pub fn sample_voxels(label_i: &[u8], tags: &[VoxelTag], cfg: &SamplerConfig, seed: u64) -> Result<SamplingPlan> {
    cfg.validate()?;
    if label_i.len() != tags.len() {
        return Err(Error::ShapeMismatch("one tag per voxel is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(SamplingPlan {
        total_cap: cfg.total_cap,
        fn_cap: cfg.fn_cap,
        rng_seed: seed,
        sets: sample_layer(1, &[(label_i, tags)], cfg, &mut rng),
    })
}

/// Per-layer inputs of a batch: `layers[l][v] = (label_i, tags)` for layer id `l + 1`.
pub fn sample_batch(layers: &[Vec<(&[u8], &[VoxelTag])>], cfg: &SamplerConfig, seed: u64) -> Result<SamplingPlan> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::new();
    for (l, vols) in layers.iter().enumerate() {
        let layer_id = l as u32 + 1;
        match cfg.scope {
            CapScope::PerBatch => sets.extend(sample_layer(layer_id, vols, cfg, &mut rng)),
            CapScope::PerVolume => {
                for (v, vol) in vols.iter().enumerate() {
                    let mut part = sample_layer(layer_id, std::slice::from_ref(vol), cfg, &mut rng);
                    for s in &mut part {
                        s.voxels.iter_mut().for_each(|x| x.volume = v as u32);
                    }
                    sets.extend(part);
                }
            }
        }
    }
    Ok(SamplingPlan {
        total_cap: cfg.total_cap,
        fn_cap: cfg.fn_cap,
        rng_seed: seed,
        sets,
    })
}
