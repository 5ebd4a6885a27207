//! Optimization loop: forward, FN-first sampling, losses, Adam, schedule and checkpoints.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Progress};
use crate::config::{poly_lr, TrainConfig};
use crate::data::{preprocess, DatasetManifest, IntensityDomain, Split, VolumeSample};
use crate::error::{Error, Result};
use crate::heads::stop_gradient;
use crate::losses::{FeatureLossPlan, LossReport};
use crate::metrics::{class_mask, dsc};
use crate::model::Model;
use crate::params::Adam;
use crate::sampler::{classify_voxels, downsample_label, sample_batch, VoxelTag};
use crate::seed;
use crate::tensor::{Dims3, Tensor};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Per-epoch summary, also written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_dice_loss: f64,
    pub mean_feature_loss: f64,
    /// Mean foreground DSC on the selection set, when evaluated this epoch.
    pub selection_dsc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub best_metric: Option<f64>,
    pub history: Vec<EpochSummary>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub best_metric: Option<f64>,
}

/// Mean foreground DSC of predicted against reference labels.
pub fn mean_foreground_dsc(pred: &[u8], gt: &[u8], n_classes: usize) -> Result<f64> {
    let mut sum = 0.0;
    for c in 1..n_classes {
        sum += dsc(&class_mask(pred, c as u8), &class_mask(gt, c as u8))?;
    }
    Ok(sum / (n_classes - 1) as f64)
}

/// Sorted indices of a seeded subset holding `fraction` of `n` items (at least one).
pub fn select_fraction(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((n as f64 * fraction).round() as usize).clamp(1.min(n), n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// Crop of `sample` with the given origin and shape.
pub fn crop(sample: &VolumeSample, origin: [usize; 3], shape: [usize; 3]) -> Result<VolumeSample> {
    let d = sample.dims;
    let n = d.as_array();
    if (0..3).any(|k| origin[k] + shape[k] > n[k]) {
        return Err(Error::ShapeMismatch(format!(
            "crop {shape:?} at {origin:?} exceeds {d}"
        )));
    }
    let to = Dims3::from_slice(&shape)?;
    let mut image = Vec::with_capacity(to.len());
    let mut label = Vec::with_capacity(to.len());
    for z in 0..to.nz {
        for y in 0..to.ny {
            let row = d.index(origin[0], origin[1] + y, origin[2] + z);
            image.extend_from_slice(&sample.image[row..row + to.nx]);
            label.extend_from_slice(&sample.label[row..row + to.nx]);
        }
    }
    VolumeSample::new(sample.id.clone(), to, sample.spacing, image, label, sample.intensity)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config)?;
        let adam = Adam::new(config.adam(), &model.store);
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            step: 0,
            best_metric: None,
        })
    }

    /// Restores parameters, optimizer state and counters from a training checkpoint.
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let config = ck.header.config.clone();
        config.validate()?;
        let adam_state = ck
            .adam
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state; cannot resume".into()))?;
        let model = Model::from_store(&config, ck.store)?;
        Ok(Self {
            adam: Adam::from_state(config.adam(), adam_state),
            config,
            model,
            epoch: ck.header.epoch,
            step: ck.header.step,
            best_metric: ck.header.best_metric,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &self.config,
            Progress {
                epoch: self.epoch,
                step: self.step,
                best_metric: self.best_metric,
            },
            &self.model.store,
            Some(self.adam.state()),
        )
    }

    fn check_batch(&self, batch: &[VolumeSample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let dims = batch[0].dims;
        for s in batch {
            s.validate()?;
            s.check_classes(self.model.n_classes())?;
            if s.dims != dims {
                return Err(Error::ShapeMismatch(format!("batch mixes grids {dims} and {}", s.dims)));
            }
        }
        self.config.unet.check_input(dims)
    }

    /// One optimization step on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &[VolumeSample], lr: f64) -> Result<LossReport> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let model = &self.model;
        let use_features = cfg.uses_features() && model.heads.is_some();
        let n_feat = if use_features { cfg.feature_layers } else { 0 };
        let n_classes = model.n_classes();
        let b = batch.len();

        let mut g = Graph::new();
        let mut pyramids = Vec::with_capacity(b);
        let mut dice_terms = Vec::with_capacity(b);
        let mut per_class = vec![0.0; n_classes];
        for s in batch {
            let x = g.constant(Tensor::feature_map(1, s.dims, s.image_f64()));
            let pyr = model.unet.forward_graph(&mut g, &model.store, x, n_feat)?;
            let (d, pc) = g.soft_dice(pyr.score_map, &s.label);
            dice_terms.push((d, 1.0 / b as f64));
            per_class.iter_mut().zip(&pc).for_each(|(a, v)| *a += v / b as f64);
            pyramids.push(pyr);
        }
        let dice = g.weighted_sum(&dice_terms);
        let lambda = cfg.lambda();

        let mut report = LossReport {
            epoch: self.epoch,
            step: self.step,
            lr,
            dice_loss: g.value(dice).item(),
            lambda,
            per_class_dice: per_class,
            ..Default::default()
        };

        let total = if use_features {
            let heads = model.heads.as_ref().expect("checked above");
            let mut layer_inputs: Vec<Vec<(Vec<u8>, Vec<VoxelTag>)>> = Vec::new();
            for l in 0..n_feat {
                let mut vols = Vec::new();
                for (s, pyr) in batch.iter().zip(&pyramids) {
                    let (_, ld) = g.value(pyr.features[l]).channels_and_dims();
                    let li = downsample_label(&s.label, s.dims, ld)?;
                    let tags = classify_voxels(&li, g.value(pyr.score_map), ld)?;
                    vols.push((li, tags));
                }
                layer_inputs.push(vols);
            }
            let borrowed: Vec<Vec<(&[u8], &[VoxelTag])>> = layer_inputs
                .iter()
                .map(|vols| vols.iter().map(|(l, t)| (l.as_slice(), t.as_slice())).collect())
                .collect();
            let plan = sample_batch(
                &borrowed,
                &cfg.sampler,
                seed::derive(cfg.seed, seed::STREAM_SAMPLER + self.step as u64),
            )?;

            // one head evaluation per (layer, volume)
            let mut groups: BTreeMap<(u32, u32), (Vec<usize>, Vec<u32>)> = BTreeMap::new();
            for set in &plan.sets {
                for v in &set.voxels {
                    let e = groups.entry((set.layer_id, v.volume)).or_default();
                    e.0.push(v.index);
                    e.1.push(set.class_id as u32);
                }
            }
            let (mut ps, mut zs, mut class_ids, mut layer_ids): (Vec<Var>, Vec<Var>, Vec<u32>, Vec<u32>) =
                Default::default();
            for ((layer_id, vol), (idx, cls)) in &groups {
                let f = pyramids[*vol as usize].features[*layer_id as usize - 1];
                let (p, z) = heads.embed_graph(&mut g, &model.store, f, idx, *layer_id)?;
                ps.push(p);
                zs.push(stop_gradient(&mut g, z));
                class_ids.extend(cls);
                layer_ids.extend(std::iter::repeat_n(*layer_id, idx.len()));
            }
            report.sampled = class_ids.len();
            if ps.is_empty() {
                dice
            } else {
                let p = g.concat(&ps);
                let z = g.concat(&zs);
                let lplan = FeatureLossPlan::new(&class_ids, &layer_ids, &cfg.feature_loss)?;
                let (fl, value) = g.feature_loss(p, z, lplan);
                report.feature_loss = value.loss;
                report.feature_classes = value.class_ids;
                report.class_weights = value.class_weights;
                report.pair_similarity = value.similarities;
                g.weighted_sum(&[(dice, 1.0), (fl, lambda)])
            }
        } else {
            dice
        };
        report.total = g.value(total).item();
        if !report.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {}: dice {} feature {}",
                self.step, report.dice_loss, report.feature_loss
            )));
        }
        let grads = g.backward(total);
        let pg = g.param_grads(&grads, &model.store);
        if let Some((i, _)) = pg
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {} at step {}",
                model.store.get(crate::params::ParamId(i)).name,
                self.step
            )));
        }
        drop(g);
        self.adam.step(&mut self.model.store, &pg, lr);
        self.step += 1;
        Ok(report)
    }

    /// Mean foreground DSC of the current model over `samples`.
    pub fn evaluate_dsc(&self, samples: &[VolumeSample]) -> Result<f64> {
        let mut sum = 0.0;
        for s in samples {
            sum += mean_foreground_dsc(&self.model.predict(s)?, &s.label, self.model.n_classes())?;
        }
        Ok(sum / samples.len().max(1) as f64)
    }

    fn patch_batch(&self, batch: Vec<VolumeSample>) -> Result<Vec<VolumeSample>> {
        let Some(shape) = self.config.patch_shape else {
            return Ok(batch);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.config.seed, seed::STREAM_PATCH + self.step as u64));
        batch
            .iter()
            .map(|s| {
                let n = s.dims.as_array();
                let origin: [usize; 3] = std::array::from_fn(|k| rng.random_range(0..=n[k].saturating_sub(shape[k])));
                crop(s, origin, shape)
            })
            .collect()
    }

    /// Runs the remaining epochs on `train`, writing checkpoints and the log under `out_dir`.
    pub fn fit(&mut self, train: &[VolumeSample], out_dir: &Path) -> Result<FitOutcome> {
        let cfg = self.config.clone();
        if train.is_empty() {
            return Err(Error::InvalidInput("empty training split".into()));
        }
        for s in train {
            s.check_classes(self.model.n_classes())?;
        }
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let labelled = select_fraction(
            train.len(),
            cfg.label_fraction,
            seed::derive(cfg.seed, seed::STREAM_SPLIT),
        );
        let n_val = ((labelled.len() as f64 * cfg.val_fraction).floor() as usize).min(labelled.len() - 1);
        let mut shuffled = labelled.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
            cfg.seed,
            seed::STREAM_SPLIT + 1,
        )));
        let mut val: Vec<usize> = shuffled[..n_val].to_vec();
        let mut fit_idx: Vec<usize> = shuffled[n_val..].to_vec();
        val.sort_unstable();
        fit_idx.sort_unstable();
        let selection: Vec<VolumeSample> = if val.is_empty() { &fit_idx } else { &val }
            .iter()
            .map(|&i| train[i].clone())
            .collect();

        let log_path = out_dir.join(TRAIN_LOG);
        let mut log = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?,
        );
        let wl = |log: &mut BufWriter<File>, v: serde_json::Value| -> Result<()> {
            writeln!(log, "{v}").map_err(|e| Error::io(&log_path, e))
        };
        wl(
            &mut log,
            json!({
                "kind": "start",
                "label": cfg.method_label(),
                "start_epoch": self.epoch,
                "parameter_count": self.model.unet.count_parameters(),
                "head_parameter_count": self.model.store.scalar_count() - self.model.store.inference_scalar_count(),
                "train_volumes": fit_idx.iter().map(|&i| train[i].id.clone()).collect::<Vec<_>>(),
                "val_volumes": val.iter().map(|&i| train[i].id.clone()).collect::<Vec<_>>(),
                "config": cfg,
            }),
        )?;

        let best_path = out_dir.join(BEST_CHECKPOINT);
        let last_path = out_dir.join(LAST_CHECKPOINT);
        let mut history = Vec::new();
        while self.epoch < cfg.epochs {
            let t0 = Instant::now();
            let epoch = self.epoch;
            let lr = poly_lr(epoch, cfg.epochs, cfg.base_lr, cfg.poly_power)?;
            let mut order = fit_idx.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
                cfg.seed,
                seed::STREAM_SHUFFLE + epoch as u64,
            )));
            let (mut tot, mut dl, mut fl, mut n) = (0.0, 0.0, 0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let batch = self.patch_batch(chunk.iter().map(|&i| train[i].clone()).collect())?;
                let mut rep = self.train_step(&batch, lr)?;
                rep.epoch = epoch;
                tot += rep.total;
                dl += rep.dice_loss;
                fl += rep.feature_loss;
                n += 1;
                let mut rec = serde_json::to_value(&rep)?;
                rec["kind"] = json!("step");
                wl(&mut log, rec)?;
            }
            self.epoch = epoch + 1;
            let due = self.epoch.is_multiple_of(cfg.eval_every) || self.epoch == cfg.epochs;
            let selection_dsc = if due {
                Some(self.evaluate_dsc(&selection)?)
            } else {
                None
            };
            if let Some(m) = selection_dsc {
                if self.best_metric.is_none_or(|b| m > b) {
                    self.best_metric = Some(m);
                    self.save(&best_path)?;
                }
            }
            self.save(&last_path)?;
            let summary = EpochSummary {
                epoch,
                lr,
                mean_total: tot / n as f64,
                mean_dice_loss: dl / n as f64,
                mean_feature_loss: fl / n as f64,
                selection_dsc,
                seconds: t0.elapsed().as_secs_f64(),
            };
            let mut rec = serde_json::to_value(&summary)?;
            rec["kind"] = json!("epoch");
            wl(&mut log, rec)?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            log::info!(
                "epoch {epoch} lr {lr:.3e} loss {:.4} dsc {:?}",
                summary.mean_total,
                selection_dsc
            );
            history.push(summary);
            if let (Some(target), Some(m)) = (cfg.stop_at_dsc, selection_dsc) {
                if m >= target {
                    break;
                }
            }
        }
        if !best_path.exists() {
            self.save(&best_path)?;
        }
        Ok(FitOutcome {
            best_checkpoint: best_path,
            last_checkpoint: last_path,
            log_path,
            best_metric: self.best_metric,
            history,
        })
    }
}

/// Loads a split and brings every volume onto the configured grid.
pub fn load_preprocessed(manifest: &DatasetManifest, split: Split, cfg: &TrainConfig) -> Result<Vec<VolumeSample>> {
    manifest
        .load_split(split)?
        .into_iter()
        .map(|s| {
            if s.intensity == IntensityDomain::Normalized && s.dims.as_array() == cfg.preprocess.target_shape {
                Ok(s)
            } else {
                preprocess(&s, &cfg.preprocess)
            }
        })
        .collect()
}

/// Trains from scratch on the training split of `manifest`.
pub fn fit(manifest: &DatasetManifest, config: TrainConfig, out_dir: &Path) -> Result<FitOutcome> {
    let train = load_preprocessed(manifest, Split::Train, &config)?;
    if manifest.n_classes() != config.unet.n_classes {
        return Err(Error::Config(format!(
            "manifest lists {} classes but the network predicts {}",
            manifest.n_classes(),
            config.unet.n_classes
        )));
    }
    Trainer::new(config)?.fit(&train, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomConfig};

    fn phantoms(n: usize, shape: [usize; 3]) -> Vec<VolumeSample> {
        let pc = PhantomConfig::new(shape, 3);
        let cfg = crate::data::PreprocessConfig {
            target_shape: shape,
            ..Default::default()
        };
        (0..n)
            .map(|i| preprocess(&generate_phantom(i as u64, &pc).unwrap().sample, &cfg).unwrap())
            .collect()
    }

    fn tiny(lambda: Option<f64>) -> TrainConfig {
        let mut c = TrainConfig::desk([16, 16, 8], 3);
        c.unet.base_channels = 4;
        c.heads.hidden_dim = 8;
        c.lambda = lambda;
        c.epochs = 4;
        c
    }

    #[test]
    fn steps_are_deterministic() {
        let batch = phantoms(2, [16, 16, 8]);
        let run = || {
            let mut t = Trainer::new(tiny(None)).unwrap();
            (0..3).map(|_| t.train_step(&batch, 1e-3).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a[0].sampled > 0 && a[0].feature_loss != 0.0);
    }

    #[test]
    fn lambda_zero_skips_feature_path() {
        let batch = phantoms(2, [16, 16, 8]);
        let mut t = Trainer::new(tiny(Some(0.0))).unwrap();
        let r = t.train_step(&batch, 1e-3).unwrap();
        assert_eq!(r.sampled, 0);
        assert_eq!(r.feature_loss, 0.0);
        assert_eq!(r.total, r.dice_loss);
    }

    #[test]
    fn select_fraction_is_seeded_subset() {
        let a = select_fraction(16, 0.25, 3);
        assert_eq!(a.len(), 4);
        assert_eq!(a, select_fraction(16, 0.25, 3));
        assert_eq!(select_fraction(3, 0.01, 0).len(), 1);
    }

    #[test]
    fn crop_copies_block() {
        let s = &phantoms(1, [16, 16, 8])[0];
        let c = crop(s, [8, 4, 2], [8, 8, 4]).unwrap();
        assert_eq!(c.image[c.dims.index(1, 2, 3)], s.image[s.dims.index(9, 6, 5)]);
        assert!(crop(s, [9, 0, 0], [8, 8, 4]).is_err());
    }

    #[test]
    fn empty_training_split_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny(None)).unwrap();
        assert!(matches!(t.fit(&[], dir.path()), Err(Error::InvalidInput(_))));
    }
}
