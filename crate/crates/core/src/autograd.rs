//! A small reverse-mode tape.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the tape in reverse and accumulates gradients only along nodes that
//! require them; a [`Graph::detach`]ed node never propagates anything, so
//! gradients blocked that way are exactly zero rather than numerically small.

use crate::kernels::{self, NormCache};
use crate::losses::{self, FeatureLossPlan};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Dims3, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which axis the affine scale/shift of a normalization is indexed by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AffineAxis {
    /// One scale per normalized group (instance norm over channels).
    Group,
    /// One scale per element within a group (layer norm over features).
    Element,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv3 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1 {
        x: Var,
        w: Var,
        b: Var,
    },
    UpConv2 {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        arg: Vec<usize>,
    },
    Upsample2 {
        x: Var,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        len: usize,
        axis: AffineAxis,
        cache: NormCache,
    },
    Relu {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftDice {
        logits: Var,
        labels: Vec<u8>,
        probs: Vec<f64>,
    },
    FeatureLoss {
        p: Var,
        z: Var,
        plan: FeatureLossPlan,
        dim: usize,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(Tensor::new(p.shape.clone(), p.value.clone()), Op::Param(id), true)
    }

    /// Same value as `v`, treated as a constant by differentiation.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.push(t, Op::Leaf, false)
    }

    pub fn conv3(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (cin, dims) = self.value(x).channels_and_dims();
        let ws = self.value(w).shape();
        assert_eq!(ws, [ws[0], cin, 27], "conv3 weight shape");
        let cout = ws[0];
        let out = kernels::conv3_forward(
            self.value(x).data(),
            cin,
            dims,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::feature_map(cout, dims, out), Op::Conv3 { x, w, b }, rg)
    }

    pub fn conv1(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (cin, dims) = self.value(x).channels_and_dims();
        let cout = self.value(w).shape()[0];
        let out = kernels::conv1_forward(
            self.value(x).data(),
            cin,
            dims.len(),
            self.value(w).data(),
            cout,
            self.value(b).data(),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::feature_map(cout, dims, out), Op::Conv1 { x, w, b }, rg)
    }

    pub fn upconv2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (cin, dims) = self.value(x).channels_and_dims();
        let cout = self.value(w).shape()[1];
        let out = kernels::upconv2_forward(
            self.value(x).data(),
            cin,
            dims,
            self.value(w).data(),
            cout,
            self.value(b).data(),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::feature_map(cout, dims.doubled(), out),
            Op::UpConv2 { x, w, b },
            rg,
        )
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (c, dims) = self.value(x).channels_and_dims();
        let (out, arg) = kernels::maxpool2_forward(self.value(x).data(), c, dims);
        let rg = self.rg(x);
        self.push(Tensor::feature_map(c, dims.halved(), out), Op::MaxPool2 { x, arg }, rg)
    }

    /// Trilinear 2x upsampling of a feature map.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, dims) = self.value(x).channels_and_dims();
        let out = kernels::upsample2_forward(self.value(x).data(), c, dims);
        let rg = self.rg(x);
        self.push(Tensor::feature_map(c, dims.doubled(), out), Op::Upsample2 { x }, rg)
    }

    /// Per-channel normalization over the spatial grid of a feature map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (c, dims) = self.value(x).channels_and_dims();
        self.norm(x, gamma, beta, c, dims.len(), AffineAxis::Group, eps)
    }

    /// Per-row normalization over the features of a `[rows, dim]` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (rows, dim) = self.value(x).rows_cols();
        self.norm(x, gamma, beta, rows, dim, AffineAxis::Element, eps)
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, len: usize, axis: AffineAxis, eps: f64) -> Var {
        let cache = kernels::normalize_groups(self.value(x).data(), groups, len, eps);
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = cache.normalized.clone();
        for g in 0..groups {
            for k in 0..len {
                let a = match axis {
                    AffineAxis::Group => g,
                    AffineAxis::Element => k,
                };
                out[g * len + k] = out[g * len + k] * gm[a] + bt[a];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                groups,
                len,
                axis,
                cache,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), Op::Relu { x }, rg)
    }

    /// Concatenates along the leading axis (channels of feature maps, rows of matrices).
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape()[1..], first[1..], "concat trailing shape");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data), Op::Concat { parts: parts.to_vec() }, rg)
    }

    /// Rows `[idx.len(), channels]` of per-voxel feature vectors from a feature map.
    pub fn gather_voxels(&mut self, x: Var, idx: &[usize]) -> Var {
        let (c, dims) = self.value(x).channels_and_dims();
        let n = dims.len();
        let d = self.value(x).data();
        let mut out = vec![0.0; idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < n, "voxel index {i} out of range for {dims}");
            for k in 0..c {
                out[r * c + k] = d[k * n + i];
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![idx.len(), c], out),
            Op::Gather { x, idx: idx.to_vec() },
            rg,
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (rows, fin) = self.value(x).rows_cols();
        let (fout, wfin) = self.value(w).rows_cols();
        assert_eq!(fin, wfin, "linear input width");
        let out = kernels::linear_forward(
            self.value(x).data(),
            rows,
            fin,
            self.value(w).data(),
            fout,
            self.value(b).data(),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![rows, fout], out), Op::Linear { x, w, b }, rg)
    }

    /// Soft Dice loss of a score map against integer labels (softmax applied inside).
    pub fn soft_dice(&mut self, logits: Var, labels: &[u8]) -> (Var, Vec<f64>) {
        let (c, _) = self.value(logits).channels_and_dims();
        let probs = losses::softmax_channels(self.value(logits)).into_data();
        let terms = losses::soft_dice_from_probs(&probs, c, labels).expect("dice inputs validated by caller");
        let rg = self.rg(logits);
        let v = self.push(
            Tensor::scalar(terms.loss),
            Op::SoftDice {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        );
        (v, terms.per_class)
    }

    pub fn feature_loss(&mut self, p: Var, z: Var, plan: FeatureLossPlan) -> (Var, losses::FeatureLossValue) {
        let (rows, dim) = self.value(p).rows_cols();
        assert_eq!(self.value(z).rows_cols(), (rows, dim));
        let value = plan.evaluate(self.value(p).data(), self.value(z).data(), dim);
        let rg = self.rg(p) || self.rg(z);
        let v = self.push(Tensor::scalar(value.loss), Op::FeatureLoss { p, z, plan, dim }, rg);
        (v, value)
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(s), Op::WeightedSum { terms: terms.to_vec() }, rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(output) {
            grads[output.0] = Some(vec![1.0; self.value(output).len()]);
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv3 { x, w, b } => {
                let (cin, dims) = self.value(*x).channels_and_dims();
                let cout = self.value(*w).shape()[0];
                let (gx, gw, gb) = kernels::conv3_backward(val(*x), cin, dims, val(*w), cout, gy, self.rg(*x));
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], gx);
                }
                if self.rg(*w) {
                    add_into(&mut grads[w.0], gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        add_into(&mut grads[b.0], gb);
                    }
                }
            }
            Op::Conv1 { x, w, b } => {
                let (cin, dims) = self.value(*x).channels_and_dims();
                let cout = self.value(*w).shape()[0];
                let (gx, gw, gb) = kernels::conv1_backward(val(*x), cin, dims.len(), val(*w), cout, gy, self.rg(*x));
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], gx);
                }
                if self.rg(*w) {
                    add_into(&mut grads[w.0], gw);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::UpConv2 { x, w, b } => {
                let (cin, dims) = self.value(*x).channels_and_dims();
                let cout = self.value(*w).shape()[1];
                let (gx, gw, gb) = kernels::upconv2_backward(val(*x), cin, dims, val(*w), cout, gy, self.rg(*x));
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], gx);
                }
                if self.rg(*w) {
                    add_into(&mut grads[w.0], gw);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::MaxPool2 { x, arg } => {
                if self.rg(*x) {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (o, &i) in arg.iter().enumerate() {
                        gx[i] += gy[o];
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Upsample2 { x } => {
                if self.rg(*x) {
                    let (c, dims) = self.value(*x).channels_and_dims();
                    add_into(&mut grads[x.0], kernels::upsample2_backward(gy, c, dims));
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                groups,
                len,
                axis,
                cache,
            } => {
                let gm = val(*gamma);
                let (groups, len) = (*groups, *len);
                let n_aff = gm.len();
                let mut ggamma = vec![0.0; n_aff];
                let mut gbeta = vec![0.0; n_aff];
                let mut gnorm = vec![0.0; groups * len];
                for g in 0..groups {
                    for k in 0..len {
                        let a = match axis {
                            AffineAxis::Group => g,
                            AffineAxis::Element => k,
                        };
                        let idx = g * len + k;
                        ggamma[a] += gy[idx] * cache.normalized[idx];
                        gbeta[a] += gy[idx];
                        gnorm[idx] = gy[idx] * gm[a];
                    }
                }
                if self.rg(*x) {
                    add_into(
                        &mut grads[x.0],
                        kernels::normalize_groups_backward(cache, &gnorm, groups, len),
                    );
                }
                if self.rg(*gamma) {
                    add_into(&mut grads[gamma.0], ggamma);
                }
                if self.rg(*beta) {
                    add_into(&mut grads[beta.0], gbeta);
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let gx = val(*x)
                        .iter()
                        .zip(gy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.rg(*p) {
                        add_into(&mut grads[p.0], gy[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Gather { x, idx } => {
                if self.rg(*x) {
                    let (c, dims) = self.value(*x).channels_and_dims();
                    let n = dims.len();
                    let mut gx = vec![0.0; c * n];
                    for (r, &i) in idx.iter().enumerate() {
                        for k in 0..c {
                            gx[k * n + i] += gy[r * c + k];
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, fin) = self.value(*x).rows_cols();
                let fout = self.value(*w).shape()[0];
                let (gx, gw, gb) = kernels::linear_backward(val(*x), rows, fin, val(*w), fout, gy, self.rg(*x));
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], gx);
                }
                if self.rg(*w) {
                    add_into(&mut grads[w.0], gw);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::SoftDice { logits, labels, probs } => {
                let (c, _) = self.value(*logits).channels_and_dims();
                let mut g = losses::soft_dice_grad_logits(probs, c, labels);
                g.iter_mut().for_each(|v| *v *= gy[0]);
                add_into(&mut grads[logits.0], g);
            }
            Op::FeatureLoss { p, z, plan, dim } => {
                let (mut gp, mut gz) = plan.gradients(val(*p), val(*z), *dim);
                if self.rg(*p) {
                    gp.iter_mut().for_each(|v| *v *= gy[0]);
                    add_into(&mut grads[p.0], gp);
                }
                if self.rg(*z) {
                    gz.iter_mut().for_each(|v| *v *= gy[0]);
                    add_into(&mut grads[z.0], gz);
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if self.rg(v) {
                        add_into(&mut grads[v.0], vec![w * gy[0]]);
                    }
                }
            }
        }
    }

    /// Gradients per parameter slot of `store` (summed over every use on the tape).
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = (0..store.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    add_into(&mut out[id.0], g.clone());
                }
            }
        }
        out
    }
}

/// Convenience for constructing an input feature map.
pub fn image_tensor(values: &[f64], dims: Dims3) -> Tensor {
    Tensor::feature_map(1, dims, values.to_vec())
}
