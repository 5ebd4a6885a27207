//! Projection and prediction heads producing the `p` and `z` voxel embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, he_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    #[default]
    Mlp,
    /// Both heads are the identity, so `p = z = f`.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    /// Output width; `None` ties it to `hidden_dim`.
    pub embed_dim: Option<usize>,
    pub kind: HeadKind,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            embed_dim: None,
            kind: HeadKind::Mlp,
        }
    }
}

impl HeadConfig {
    pub fn with_hidden(hidden_dim: usize) -> Self {
        Self {
            hidden_dim,
            ..Self::default()
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim.unwrap_or(self.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == HeadKind::Mlp && (self.embed_dim() < 2 || self.hidden_dim < 2) {
            return Err(Error::Config(format!(
                "head dims hidden={} embed={} must be >= 2",
                self.hidden_dim,
                self.embed_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Fc {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Ln {
    gamma: ParamId,
    beta: ParamId,
}

/// FC -> LN -> ReLU -> FC -> LN projection and FC -> LN -> ReLU -> FC prediction.
#[derive(Clone, Debug)]
struct MlpPair {
    proj: (Fc, Ln, Fc, Ln),
    pred: (Fc, Ln, Fc),
}

/// Heads of one feature layer.
#[derive(Clone, Debug)]
pub struct HeadPair {
    pub in_dim: usize,
    mlp: Option<MlpPair>,
}

/// One head pair per feature layer, addressed by 1-based layer id.
#[derive(Clone, Debug)]
pub struct SiameseHeads {
    pub config: HeadConfig,
    pub layers: Vec<HeadPair>,
}

fn name(layer: usize, part: &str) -> String {
    format!("heads.f{layer}.{part}")
}

impl SiameseHeads {
    /// Creates heads for feature layers with channel widths `in_dims` (F_1 first).
    pub fn new<R: Rng>(config: HeadConfig, in_dims: &[usize], store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        Self::build(config, in_dims, &mut |n, shape, fan_in, kind| {
            let len = shape.iter().product();
            let value = match kind {
                'w' => he_normal(rng, len, fan_in),
                'b' => fan_in_uniform(rng, len, fan_in),
                'g' => vec![1.0; len],
                _ => vec![0.0; len],
            };
            Ok(store.add(n, shape, value, true))
        })
    }

    pub fn bind(config: HeadConfig, in_dims: &[usize], store: &ParamStore) -> Result<Self> {
        Self::build(config, in_dims, &mut |n, shape, _, _| {
            let id = store
                .find(&n)
                .ok_or_else(|| Error::Checkpoint(format!("missing head parameter {n}")))?;
            if store.get(id).shape != shape {
                return Err(Error::Checkpoint(format!("head parameter {n} has the wrong shape")));
            }
            Ok(id)
        })
    }

    fn build(
        config: HeadConfig,
        in_dims: &[usize],
        reg: &mut dyn FnMut(String, Vec<usize>, usize, char) -> Result<ParamId>,
    ) -> Result<Self> {
        config.validate()?;
        let (h, e) = (config.hidden_dim, config.embed_dim());
        let mut layers = Vec::new();
        for (i, &c) in in_dims.iter().enumerate() {
            let l = i + 1;
            let mut fc = |part: &str, fin: usize, fout: usize| -> Result<Fc> {
                Ok(Fc {
                    w: reg(name(l, &format!("{part}.weight")), vec![fout, fin], fin, 'w')?,
                    b: reg(name(l, &format!("{part}.bias")), vec![fout], fin, 'b')?,
                })
            };
            let mlp = match config.kind {
                HeadKind::Identity => None,
                HeadKind::Mlp => {
                    let p0 = fc("proj.fc0", c, h)?;
                    let p1 = fc("proj.fc1", h, e)?;
                    let q0 = fc("pred.fc0", e, h)?;
                    let q1 = fc("pred.fc1", h, e)?;
                    let mut ln = |part: &str, d: usize| -> Result<Ln> {
                        Ok(Ln {
                            gamma: reg(name(l, &format!("{part}.gamma")), vec![d], d, 'g')?,
                            beta: reg(name(l, &format!("{part}.beta")), vec![d], d, 'z')?,
                        })
                    };
                    let pl0 = ln("proj.ln0", h)?;
                    let pl1 = ln("proj.ln1", e)?;
                    let ql0 = ln("pred.ln0", h)?;
                    Some(MlpPair {
                        proj: (p0, pl0, p1, pl1),
                        pred: (q0, ql0, q1),
                    })
                }
            };
            layers.push(HeadPair { in_dim: c, mlp });
        }
        Ok(Self { config, layers })
    }

    fn layer(&self, layer_id: u32) -> Result<&HeadPair> {
        layer_id
            .checked_sub(1)
            .and_then(|i| self.layers.get(i as usize))
            .ok_or_else(|| Error::InvalidInput(format!("no head constructed for layer {layer_id}")))
    }

    /// Embedding width of `layer_id`.
    pub fn out_dim(&self, layer_id: u32) -> Result<usize> {
        let h = self.layer(layer_id)?;
        Ok(match h.mlp {
            Some(_) => self.config.embed_dim(),
            None => h.in_dim,
        })
    }

    /// Records `z = proj(f)` and `p = pred(z)` for rows `[N, C_i]`; returns `(p, z)`.
    pub fn apply_graph(&self, g: &mut Graph, store: &ParamStore, f: Var, layer_id: u32) -> Result<(Var, Var)> {
        let head = self.layer(layer_id)?;
        let (_, c) = g.value(f).rows_cols();
        if c != head.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer_id} head expects {} channels, got {c}",
                head.in_dim
            )));
        }
        let Some(m) = &head.mlp else { return Ok((f, f)) };
        let fc = |g: &mut Graph, x: Var, fc: &Fc| {
            let w = g.param(store, fc.w);
            let b = g.param(store, fc.b);
            g.linear(x, w, b)
        };
        let ln = |g: &mut Graph, x: Var, ln: &Ln| {
            let gm = g.param(store, ln.gamma);
            let bt = g.param(store, ln.beta);
            g.layer_norm(x, gm, bt, LN_EPS)
        };
        let (p0, pl0, p1, pl1) = &m.proj;
        let x = fc(g, f, p0);
        let x = ln(g, x, pl0);
        let x = g.relu(x);
        let x = fc(g, x, p1);
        let z = ln(g, x, pl1);
        let (q0, ql0, q1) = &m.pred;
        let x = fc(g, z, q0);
        let x = ln(g, x, ql0);
        let x = g.relu(x);
        let p = fc(g, x, q1);
        Ok((p, z))
    }

    /// Gathers the selected voxels of feature map `feature` and embeds them.
    pub fn embed_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feature: Var,
        voxel_indices: &[usize],
        layer_id: u32,
    ) -> Result<(Var, Var)> {
        let (_, dims) = g.value(feature).channels_and_dims();
        if let Some(&bad) = voxel_indices.iter().find(|&&i| i >= dims.len()) {
            return Err(Error::InvalidInput(format!(
                "voxel index {bad} out of range for layer {layer_id} grid {dims}"
            )));
        }
        self.layer(layer_id)?;
        let rows = g.gather_voxels(feature, voxel_indices);
        self.apply_graph(g, store, rows, layer_id)
    }

    /// Value-level embedding of selected voxels of one feature map.
    pub fn embed(
        &self,
        store: &ParamStore,
        feature: &Tensor,
        voxel_indices: &[usize],
        layer_id: u32,
        class_id: &[u32],
        volume_id: u32,
    ) -> Result<EmbeddingBatch> {
        if class_id.len() != voxel_indices.len() {
            return Err(Error::ShapeMismatch(
                "one class id per selected voxel is required".into(),
            ));
        }
        let mut g = Graph::new();
        let f = g.constant(feature.clone());
        let (p, z) = self.embed_graph(&mut g, store, f, voxel_indices, layer_id)?;
        let n = voxel_indices.len();
        Ok(EmbeddingBatch {
            p: g.value(p).clone(),
            z: g.value(z).clone(),
            class_id: class_id.to_vec(),
            layer_id: vec![layer_id; n],
            volume_id: vec![volume_id; n],
            z_blocked: false,
        })
    }
}

/// `z` with differentiation cut: same values, never propagates a gradient.
pub fn stop_gradient(g: &mut Graph, z: Var) -> Var {
    g.detach(z)
}

/// Embedded voxel rows with their bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    /// `[N, D]`
    pub p: Tensor,
    /// `[N, D]`
    pub z: Tensor,
    pub class_id: Vec<u32>,
    pub layer_id: Vec<u32>,
    pub volume_id: Vec<u32>,
    /// Set once `z` has passed through [`EmbeddingBatch::stop_gradient`].
    pub z_blocked: bool,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.class_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_id.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p.rows_cols().1
    }

    pub fn stop_gradient(mut self) -> Self {
        self.z_blocked = true;
        self
    }

    /// Stacks batches row-wise; embedding widths must agree.
    pub fn concat(parts: &[EmbeddingBatch]) -> Result<Self> {
        let dim = parts.first().map(|b| b.dim()).unwrap_or(0);
        if parts.iter().any(|b| b.dim() != dim) {
            return Err(Error::ShapeMismatch("embedding widths differ across batches".into()));
        }
        let mut out = EmbeddingBatch {
            p: Tensor::zeros(vec![0, dim]),
            z: Tensor::zeros(vec![0, dim]),
            class_id: Vec::new(),
            layer_id: Vec::new(),
            volume_id: Vec::new(),
            z_blocked: parts.iter().all(|b| b.z_blocked),
        };
        let (mut p, mut z) = (Vec::new(), Vec::new());
        for b in parts {
            p.extend_from_slice(b.p.data());
            z.extend_from_slice(b.z.data());
            out.class_id.extend(&b.class_id);
            out.layer_id.extend(&b.layer_id);
            out.volume_id.extend(&b.volume_id);
        }
        let n = out.class_id.len();
        out.p = Tensor::new(vec![n, dim], p);
        out.z = Tensor::new(vec![n, dim], z);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heads(kind: HeadKind, dims: &[usize]) -> (SiameseHeads, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = HeadConfig {
            hidden_dim: 8,
            embed_dim: Some(6),
            kind,
        };
        (SiameseHeads::new(cfg, dims, &mut store, &mut rng).unwrap(), store)
    }

    fn feature(c: usize, dims: Dims3) -> Tensor {
        Tensor::feature_map(
            c,
            dims,
            (0..c * dims.len())
                .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
                .collect(),
        )
    }

    #[test]
    fn single_voxel_batch_shape() {
        let (h, store) = heads(HeadKind::Mlp, &[4]);
        let b = h
            .embed(&store, &feature(4, Dims3::new(2, 2, 2)), &[3], 1, &[1], 0)
            .unwrap();
        assert_eq!(b.p.shape(), [1, 6]);
        assert_eq!(b.z.shape(), [1, 6]);
        assert!(b.p.is_finite() && b.z.is_finite());
    }

    #[test]
    fn identical_features_give_identical_rows() {
        let (h, store) = heads(HeadKind::Mlp, &[3]);
        let dims = Dims3::new(2, 1, 1);
        let f = Tensor::feature_map(3, dims, vec![0.5, 0.5, -1.0, -1.0, 2.0, 2.0]);
        let b = h.embed(&store, &f, &[0, 1], 1, &[1, 1], 0).unwrap();
        assert_eq!(b.z.data()[..6], b.z.data()[6..]);
        assert_eq!(b.p.data()[..6], b.p.data()[6..]);
    }

    #[test]
    fn identity_heads_pass_features_through() {
        let (h, store) = heads(HeadKind::Identity, &[3]);
        assert_eq!(store.len(), 0);
        let dims = Dims3::new(2, 2, 1);
        let f = feature(3, dims);
        let b = h.embed(&store, &f, &[2], 1, &[0], 0).unwrap();
        let expect: Vec<f64> = (0..3).map(|c| f.data()[c * 4 + 2]).collect();
        assert_eq!(b.p.data(), expect.as_slice());
        assert_eq!(b.z.data(), expect.as_slice());
    }

    #[test]
    fn bad_index_and_layer_rejected() {
        let (h, store) = heads(HeadKind::Mlp, &[4]);
        let f = feature(4, Dims3::new(2, 2, 2));
        assert!(h.embed(&store, &f, &[8], 1, &[1], 0).is_err());
        assert!(h.embed(&store, &f, &[0], 2, &[1], 0).is_err());
        assert!(h.embed(&store, &f, &[0], 0, &[1], 0).is_err());
    }

    #[test]
    fn head_params_are_training_only() {
        let (_, store) = heads(HeadKind::Mlp, &[4, 8]);
        assert!(!store.is_empty());
        assert!(store.iter().all(|(_, p)| p.training_only));
        assert_eq!(store.inference_scalar_count(), 0);
    }

    #[test]
    fn stop_gradient_keeps_values() {
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let id = store.add("x", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let x = g.param(&store, id);
        let z = stop_gradient(&mut g, x);
        assert_eq!(g.value(z), g.value(x));
        assert!(!g.requires_grad(z));
    }
}
