//! Objective functions: negative cosine similarity, soft Dice, voxel-pair
//! similarity, class weights, the multi-resolution feature loss and the total
//! loss.
//!
//! The feature loss is defined over a pooled set of `(p, z)` embedding pairs.
//! For each class `c` with sampled rows `P^c`, `Z^c`:
//!
//! ```text
//! S_c = sum_{i in P^c} sum_{j in Z^c, j != i} w_f(i) <p_i/|p_i|, z_j/|z_j|> / pairs_c
//! L   = - sum_c w_c S_c
//! ```
//!
//! computed through the factorization `(sum_i w_f p̂_i) . (sum_j ẑ_j) - sum_i w_f p̂_i . ẑ_i`,
//! which is linear in the number of rows instead of quadratic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::dot;
use crate::tensor::Tensor;

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Row norms below this are treated as zero.
const NORM_FLOOR: f64 = 1e-12;

/// `-(p/|p|) . (z/|z|)`.
pub fn neg_cosine(p: &[f64], z: &[f64]) -> Result<f64> {
    if p.len() != z.len() {
        return Err(Error::ShapeMismatch(format!(
            "vectors of length {} and {}",
            p.len(),
            z.len()
        )));
    }
    let np = dot(p, p).sqrt();
    let nz = dot(z, z).sqrt();
    if np <= NORM_FLOOR || nz <= NORM_FLOOR {
        return Err(Error::InvalidInput("zero-norm vector in neg_cosine".into()));
    }
    Ok(-(dot(p, z) / (np * nz)).clamp(-1.0, 1.0))
}

/// Softmax across the channel axis of a `[c, nz, ny, nx]` score map.
pub fn softmax_channels(score_map: &Tensor) -> Tensor {
    let (c, dims) = score_map.channels_and_dims();
    let n = dims.len();
    let s = score_map.data();
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(s[k * n + i]);
        }
        let mut z = 0.0;
        for k in 0..c {
            let e = (s[k * n + i] - m).exp();
            out[k * n + i] = e;
            z += e;
        }
        for k in 0..c {
            out[k * n + i] /= z;
        }
    }
    Tensor::feature_map(c, dims, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceTerms {
    /// `1 - mean_c dice_c`.
    pub loss: f64,
    pub per_class: Vec<f64>,
}

/// Soft Dice on class probabilities laid out `[classes, voxels]`.
///
/// `dice_c = (2 sum p g + eps) / (sum p^2 + sum g^2 + eps)` with `g` the
/// one-hot ground truth; a class absent from both prediction and label scores 1.
pub fn soft_dice_from_probs(probs: &[f64], classes: usize, labels: &[u8]) -> Result<DiceTerms> {
    let n = labels.len();
    if probs.len() != classes * n {
        return Err(Error::ShapeMismatch(format!(
            "probabilities hold {} values, expected {classes} classes x {n} voxels",
            probs.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::ShapeMismatch(format!(
            "label {bad} outside the {classes}-class axis"
        )));
    }
    let mut inter = vec![0.0; classes];
    let mut psq = vec![0.0; classes];
    let mut gsum = vec![0.0; classes];
    for c in 0..classes {
        let pc = &probs[c * n..(c + 1) * n];
        psq[c] = dot(pc, pc);
    }
    for (i, &l) in labels.iter().enumerate() {
        let c = l as usize;
        inter[c] += probs[c * n + i];
        gsum[c] += 1.0;
    }
    let per_class: Vec<f64> = (0..classes)
        .map(|c| (2.0 * inter[c] + DICE_EPS) / (psq[c] + gsum[c] + DICE_EPS))
        .collect();
    let loss = 1.0 - per_class.iter().sum::<f64>() / classes as f64;
    Ok(DiceTerms { loss, per_class })
}

/// Soft Dice loss of a raw score map (softmax applied internally).
pub fn soft_dice_loss(score_map: &Tensor, labels: &[u8]) -> Result<f64> {
    let (c, dims) = score_map.channels_and_dims();
    if dims.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "score map has {} voxels, label has {}",
            dims.len(),
            labels.len()
        )));
    }
    let probs = softmax_channels(score_map);
    Ok(soft_dice_from_probs(probs.data(), c, labels)?.loss)
}

/// Gradient of the soft Dice loss with respect to the logits that produced `probs`.
pub(crate) fn soft_dice_grad_logits(probs: &[f64], classes: usize, labels: &[u8]) -> Vec<f64> {
    let n = labels.len();
    let mut inter = vec![0.0; classes];
    let mut den = vec![0.0; classes];
    for c in 0..classes {
        let pc = &probs[c * n..(c + 1) * n];
        den[c] = dot(pc, pc) + DICE_EPS;
    }
    for (i, &l) in labels.iter().enumerate() {
        inter[l as usize] += probs[l as usize * n + i];
        den[l as usize] += 1.0;
    }
    let scale = -1.0 / classes as f64;
    // d loss / d p
    let mut gp = vec![0.0; classes * n];
    for c in 0..classes {
        let num = 2.0 * inter[c] + DICE_EPS;
        let d2 = den[c] * den[c];
        for i in 0..n {
            let g = if labels[i] as usize == c { 1.0 } else { 0.0 };
            let p = probs[c * n + i];
            gp[c * n + i] = scale * (2.0 * g / den[c] - num * 2.0 * p / d2);
        }
    }
    // softmax backward
    let mut gl = vec![0.0; classes * n];
    for i in 0..n {
        let mut s = 0.0;
        for c in 0..classes {
            s += probs[c * n + i] * gp[c * n + i];
        }
        for c in 0..classes {
            gl[c * n + i] = probs[c * n + i] * (gp[c * n + i] - s);
        }
    }
    gl
}

fn unit_rows(data: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = data.len() / dim;
    let mut out = vec![0.0; data.len()];
    let mut norms = vec![0.0; rows];
    for r in 0..rows {
        let v = &data[r * dim..(r + 1) * dim];
        let n = dot(v, v).sqrt().max(NORM_FLOOR);
        norms[r] = n;
        for (o, x) in out[r * dim..(r + 1) * dim].iter_mut().zip(v) {
            *o = x / n;
        }
    }
    (out, norms)
}

fn check_rows(data: &[f64], dim: usize, what: &str) -> Result<usize> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} values is not a whole number of {dim}-d rows",
            data.len()
        )));
    }
    let rows = data.len() / dim;
    for r in 0..rows {
        let v = &data[r * dim..(r + 1) * dim];
        if dot(v, v).sqrt() <= NORM_FLOOR {
            return Err(Error::InvalidInput(format!("{what}: row {r} has zero norm")));
        }
    }
    Ok(rows)
}

/// Mean cosine similarity over all pairs of `p` rows and `z` rows.
///
/// With `exclude_self`, `p` and `z` must be row-aligned (row `i` of both comes
/// from the same voxel) and the `i == j` pairs are left out of the sum and the
/// pair count.
pub fn voxel_pair_similarity(p: &[f64], z: &[f64], dim: usize, exclude_self: bool) -> Result<f64> {
    let np = check_rows(p, dim, "P")?;
    let nz = check_rows(z, dim, "Z")?;
    if np == 0 || nz == 0 {
        return Err(Error::InvalidInput("empty embedding set".into()));
    }
    if exclude_self && np != nz {
        return Err(Error::ShapeMismatch(format!(
            "self-pair exclusion needs aligned sets, got {np} and {nz} rows"
        )));
    }
    let pairs = if exclude_self { np * (np - 1) } else { np * nz };
    if pairs == 0 {
        return Err(Error::InvalidInput("a single voxel has no cross-voxel pairs".into()));
    }
    let (ph, _) = unit_rows(p, dim);
    let (zh, _) = unit_rows(z, dim);
    let mut psum = vec![0.0; dim];
    let mut zsum = vec![0.0; dim];
    for r in 0..np {
        for (s, v) in psum.iter_mut().zip(&ph[r * dim..(r + 1) * dim]) {
            *s += v;
        }
    }
    for r in 0..nz {
        for (s, v) in zsum.iter_mut().zip(&zh[r * dim..(r + 1) * dim]) {
            *s += v;
        }
    }
    let mut total = dot(&psum, &zsum);
    if exclude_self {
        for r in 0..np {
            total -= dot(&ph[r * dim..(r + 1) * dim], &zh[r * dim..(r + 1) * dim]);
        }
    }
    Ok(total / pairs as f64)
}

/// `w_c = (|P| / |P^c|) / sum_k (|P| / |P^k|)`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::InvalidInput("no classes to weight".into()));
    }
    if counts.contains(&0) {
        return Err(Error::InvalidInput(
            "zero sampled count; exclude the class upstream".into(),
        ));
    }
    let total: usize = counts.iter().sum();
    let inv: Vec<f64> = counts.iter().map(|&c| total as f64 / c as f64).collect();
    let s: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / s).collect())
}

/// How embeddings from different resolution layers are paired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerPooling {
    /// Pairs are formed across layers within each class.
    #[default]
    Pooled,
    /// Pairs stay within a layer; per-layer similarities are summed with `w_f`.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureLossConfig {
    /// Inverse-frequency class weights; `false` uses `1 / classes`.
    pub weighted: bool,
    pub pooling: LayerPooling,
    pub exclude_self_pairs: bool,
    /// `w_f` for layer ids `1..`; missing entries default to 1.
    pub layer_weights: Vec<f64>,
}

impl Default for FeatureLossConfig {
    fn default() -> Self {
        Self {
            weighted: true,
            pooling: LayerPooling::Pooled,
            exclude_self_pairs: true,
            layer_weights: vec![1.0; 3],
        }
    }
}

impl FeatureLossConfig {
    pub fn layer_weight(&self, layer_id: u32) -> f64 {
        self.layer_weights
            .get(layer_id.saturating_sub(1) as usize)
            .copied()
            .unwrap_or(1.0)
    }
}

#[derive(Clone, Debug)]
struct PairGroup {
    class_id: u32,
    rows: Vec<usize>,
}

/// Per-class breakdown of an evaluated feature loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureLossValue {
    pub loss: f64,
    pub class_ids: Vec<u32>,
    pub class_weights: Vec<f64>,
    /// Layer-weighted mean pair similarity per class (summed over layers in per-layer mode).
    pub similarities: Vec<f64>,
}

/// Grouping, weights and pair counts for one feature-loss evaluation.
#[derive(Clone, Debug)]
pub struct FeatureLossPlan {
    groups: Vec<PairGroup>,
    /// Class weight of each group.
    group_weight: Vec<f64>,
    row_wf: Vec<f64>,
    classes: Vec<u32>,
    weights: Vec<f64>,
    exclude_self: bool,
    rows: usize,
}

impl FeatureLossPlan {
    pub fn new(class_id: &[u32], layer_id: &[u32], cfg: &FeatureLossConfig) -> Result<Self> {
        if class_id.len() != layer_id.len() {
            return Err(Error::ShapeMismatch("class and layer id lists differ in length".into()));
        }
        let min_rows = if cfg.exclude_self_pairs { 2 } else { 1 };
        let mut classes: Vec<u32> = class_id.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let count = |c: u32| class_id.iter().filter(|&&k| k == c).count();
        let classes: Vec<u32> = classes.into_iter().filter(|&c| count(c) >= min_rows).collect();

        let weights = if classes.is_empty() {
            Vec::new()
        } else if cfg.weighted {
            class_weights(&classes.iter().map(|&c| count(c)).collect::<Vec<_>>())?
        } else {
            vec![1.0 / classes.len() as f64; classes.len()]
        };

        let mut groups = Vec::new();
        let mut group_weight = Vec::new();
        for (ci, &c) in classes.iter().enumerate() {
            match cfg.pooling {
                LayerPooling::Pooled => {
                    let rows: Vec<usize> = (0..class_id.len()).filter(|&i| class_id[i] == c).collect();
                    groups.push(PairGroup { class_id: c, rows });
                    group_weight.push(weights[ci]);
                }
                LayerPooling::PerLayer => {
                    let mut layers: Vec<u32> = (0..class_id.len())
                        .filter(|&i| class_id[i] == c)
                        .map(|i| layer_id[i])
                        .collect();
                    layers.sort_unstable();
                    layers.dedup();
                    for l in layers {
                        let rows: Vec<usize> = (0..class_id.len())
                            .filter(|&i| class_id[i] == c && layer_id[i] == l)
                            .collect();
                        if rows.len() >= min_rows {
                            groups.push(PairGroup { class_id: c, rows });
                            group_weight.push(weights[ci]);
                        }
                    }
                }
            }
        }
        if groups.is_empty() && !class_id.is_empty() {
            log::warn!("feature loss: no class has enough sampled voxels to form pairs; loss is 0");
        }
        Ok(Self {
            groups,
            group_weight,
            row_wf: layer_id.iter().map(|&l| cfg.layer_weight(l)).collect(),
            classes,
            weights,
            exclude_self: cfg.exclude_self_pairs,
            rows: class_id.len(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    fn pairs(&self, g: &PairGroup) -> f64 {
        let n = g.rows.len() as f64;
        if self.exclude_self {
            n * (n - 1.0)
        } else {
            n * n
        }
    }

    /// Group sums `A = sum w_f p̂`, `Zs = sum ẑ`, and the self-pair term.
    fn group_sums(&self, g: &PairGroup, ph: &[f64], zh: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>, f64) {
        let mut a = vec![0.0; dim];
        let mut zs = vec![0.0; dim];
        let mut diag = 0.0;
        for &r in &g.rows {
            let wf = self.row_wf[r];
            let pr = &ph[r * dim..(r + 1) * dim];
            let zr = &zh[r * dim..(r + 1) * dim];
            for k in 0..dim {
                a[k] += wf * pr[k];
                zs[k] += zr[k];
            }
            if self.exclude_self {
                diag += wf * dot(pr, zr);
            }
        }
        (a, zs, diag)
    }

    pub fn evaluate(&self, p: &[f64], z: &[f64], dim: usize) -> FeatureLossValue {
        assert_eq!(p.len(), self.rows * dim);
        assert_eq!(z.len(), self.rows * dim);
        let (ph, _) = unit_rows(p, dim);
        let (zh, _) = unit_rows(z, dim);
        let mut sims = vec![0.0; self.classes.len()];
        let mut loss = 0.0;
        for (g, &w) in self.groups.iter().zip(&self.group_weight) {
            let (a, zs, diag) = self.group_sums(g, &ph, &zh, dim);
            let s = (dot(&a, &zs) - diag) / self.pairs(g);
            loss -= w * s;
            let ci = self.classes.iter().position(|&c| c == g.class_id).expect("group class");
            sims[ci] += s;
        }
        FeatureLossValue {
            loss,
            class_ids: self.classes.clone(),
            class_weights: self.weights.clone(),
            similarities: sims,
        }
    }

    /// Gradients of the loss with respect to the raw `p` and `z` rows.
    pub fn gradients(&self, p: &[f64], z: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
        let (ph, pn) = unit_rows(p, dim);
        let (zh, zn) = unit_rows(z, dim);
        // gradients on the unit vectors first
        let mut gph = vec![0.0; p.len()];
        let mut gzh = vec![0.0; z.len()];
        for (g, &w) in self.groups.iter().zip(&self.group_weight) {
            let (a, zs, _) = self.group_sums(g, &ph, &zh, dim);
            let k = -w / self.pairs(g);
            for &r in &g.rows {
                let wf = self.row_wf[r];
                for j in 0..dim {
                    let self_z = if self.exclude_self { zh[r * dim + j] } else { 0.0 };
                    let self_p = if self.exclude_self { wf * ph[r * dim + j] } else { 0.0 };
                    gph[r * dim + j] = k * wf * (zs[j] - self_z);
                    gzh[r * dim + j] = k * (a[j] - self_p);
                }
            }
        }
        (unit_backward(&ph, &pn, &gph, dim), unit_backward(&zh, &zn, &gzh, dim))
    }
}

/// Feature loss of an embedded batch whose `z` branch has been gradient-blocked.
pub fn feature_loss(batch: &crate::heads::EmbeddingBatch, cfg: &FeatureLossConfig) -> Result<FeatureLossValue> {
    if !batch.z_blocked {
        return Err(Error::InvalidInput(
            "z must pass through stop_gradient before the feature loss".into(),
        ));
    }
    let plan = FeatureLossPlan::new(&batch.class_id, &batch.layer_id, cfg)?;
    Ok(plan.evaluate(batch.p.data(), batch.z.data(), batch.dim()))
}

/// Backward of row normalization `u = v / |v|`.
fn unit_backward(unit: &[f64], norms: &[f64], gu: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; unit.len()];
    for (r, &n) in norms.iter().enumerate() {
        let u = &unit[r * dim..(r + 1) * dim];
        let g = &gu[r * dim..(r + 1) * dim];
        let ug = dot(u, g);
        for k in 0..dim {
            out[r * dim + k] = (g[k] - u[k] * ug) / n;
        }
    }
    out
}

/// Default feature-loss weight for `|F|` layers.
pub fn default_lambda(feature_layers: usize) -> f64 {
    if feature_layers <= 1 {
        100.0
    } else {
        10.0
    }
}

pub fn total_loss(dice: f64, feature: f64, lambda: f64) -> f64 {
    dice + lambda * feature
}

/// One training step's objective breakdown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub dice_loss: f64,
    pub feature_loss: f64,
    pub total: f64,
    pub lambda: f64,
    pub per_class_dice: Vec<f64>,
    pub feature_classes: Vec<u32>,
    pub pair_similarity: Vec<f64>,
    pub class_weights: Vec<f64>,
    pub sampled: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.dice_loss.is_finite()
            && self.feature_loss.is_finite()
            && self.total.is_finite()
            && self.per_class_dice.iter().all(|v| v.is_finite())
            && self.pair_similarity.iter().all(|v| v.is_finite())
            && self.class_weights.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims3;

    #[test]
    fn neg_cosine_examples() {
        assert!((neg_cosine(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(neg_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        let v = neg_cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn neg_cosine_rejects_zero_norm() {
        assert!(neg_cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dice_class_axis_mismatch() {
        let err = soft_dice_from_probs(&[0.5; 6], 2, &[0, 1, 0, 1]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
        assert!(soft_dice_from_probs(&[0.5; 4], 2, &[0, 2]).is_err());
    }

    #[test]
    fn dice_from_logits_of_uniform_map() {
        let dims = Dims3::new(8, 1, 1);
        let map = Tensor::feature_map(2, dims, vec![0.0; 16]);
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let l = soft_dice_loss(&map, &labels).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let dims = Dims3::new(3, 2, 1);
        let c = 3;
        let logits: Vec<f64> = (0..c * dims.len())
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3)
            .collect();
        let labels = [0u8, 1, 2, 1, 0, 2];
        let probs = softmax_channels(&Tensor::feature_map(c, dims, logits.clone()));
        let g = soft_dice_grad_logits(probs.data(), c, &labels);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            up[i] += h;
            let mut dn = logits.clone();
            dn[i] -= h;
            let fu = soft_dice_loss(&Tensor::feature_map(c, dims, up), &labels).unwrap();
            let fd = soft_dice_loss(&Tensor::feature_map(c, dims, dn), &labels).unwrap();
            let num = (fu - fd) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-7, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn class_weight_errors() {
        assert!(class_weights(&[]).is_err());
        assert!(class_weights(&[3, 0]).is_err());
    }

    #[test]
    fn pair_similarity_single_voxel_errors() {
        assert!(voxel_pair_similarity(&[1.0, 0.0], &[1.0, 0.0], 2, true).is_err());
        assert!(voxel_pair_similarity(&[], &[1.0, 0.0], 2, false).is_err());
    }

    #[test]
    fn per_layer_mode_sums_over_layers() {
        // one class, identical unit vectors on three layers
        let dim = 2;
        let rows = 6;
        let p = [1.0, 0.0].repeat(rows);
        let class_id = vec![1u32; rows];
        let layer_id = vec![1u32, 1, 2, 2, 3, 3];
        let cfg = FeatureLossConfig {
            pooling: LayerPooling::PerLayer,
            ..Default::default()
        };
        let plan = FeatureLossPlan::new(&class_id, &layer_id, &cfg).unwrap();
        assert!((plan.evaluate(&p, &p, dim).loss + 3.0).abs() < 1e-12);
        let pooled = FeatureLossPlan::new(&class_id, &layer_id, &FeatureLossConfig::default()).unwrap();
        assert!((pooled.evaluate(&p, &p, dim).loss + 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_gives_zero_loss() {
        let plan = FeatureLossPlan::new(&[1, 2], &[1, 1], &FeatureLossConfig::default()).unwrap();
        let v = plan.evaluate(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(v.loss, 0.0);
        assert!(v.class_ids.is_empty());
    }

    #[test]
    fn default_lambdas() {
        assert_eq!(default_lambda(3), 10.0);
        assert_eq!(default_lambda(1), 100.0);
        assert_eq!(total_loss(0.3, -0.9, 10.0), 0.3 + 10.0 * -0.9);
    }
}
