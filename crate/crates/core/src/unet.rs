//! 3D U-Net backbone exposing its encoder features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{he_normal, ParamId, ParamStore};
use crate::tensor::{Dims3, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsampling {
    #[default]
    TransposedConv,
    /// Trilinear 2x interpolation followed by a 1x1x1 convolution.
    TrilinearConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Number of resolution levels, bottleneck included.
    pub depth: usize,
    pub base_channels: usize,
    pub n_classes: usize,
    pub in_channels: usize,
    pub upsampling: Upsampling,
    /// Instance normalization inside conv blocks.
    pub instance_norm: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            n_classes: 9,
            in_channels: 1,
            upsampling: Upsampling::TransposedConv,
            instance_norm: true,
        }
    }
}

impl UNetConfig {
    /// Small network used for CPU-scale runs.
    pub fn desk(n_classes: usize) -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            n_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("unet depth {} < 2", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels {} < 4", self.base_channels)));
        }
        if self.n_classes < 2 || self.n_classes > u8::MAX as usize {
            return Err(Error::Config(format!("n_classes {} outside 2..=255", self.n_classes)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Channel width per level, shallowest first.
    pub fn channels(&self) -> Vec<usize> {
        (0..self.depth).map(|l| self.base_channels << l).collect()
    }

    /// Every spatial axis must be divisible by this.
    pub fn shape_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_input(&self, dims: Dims3) -> Result<()> {
        let k = self.shape_multiple();
        if !dims.divisible_by(k) {
            return Err(Error::ShapeMismatch(format!(
                "input {dims} is not divisible by {k} on every axis (depth {})",
                self.depth
            )));
        }
        Ok(())
    }

    /// Exact trainable scalar count, computed from the architecture alone.
    pub fn count_parameters(&self) -> usize {
        let ch = self.channels();
        let block = |cin: usize, cout: usize| {
            let per_conv = |ci: usize| ci * cout * 27 + if self.instance_norm { 2 * cout } else { cout };
            per_conv(cin) + per_conv(cout)
        };
        let mut total = 0;
        let mut cin = self.in_channels;
        for &c in &ch {
            total += block(cin, c);
            cin = c;
        }
        for l in (0..self.depth - 1).rev() {
            let (cu, c) = (ch[l + 1], ch[l]);
            total += match self.upsampling {
                Upsampling::TransposedConv => cu * c * 8 + c,
                Upsampling::TrilinearConv => cu * c + c,
            };
            total += block(2 * c, c);
        }
        total + ch[0] * self.n_classes + self.n_classes
    }
}

/// Encoder features (deepest first) and the segmentation score map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    /// `features[0]` is the bottleneck F_1; each following entry doubles resolution.
    pub features: Vec<T>,
    pub score_map: T,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Copy, Debug)]
struct Up {
    w: ParamId,
    b: ParamId,
}

/// Parameter handles of a U-Net; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    encoder: Vec<[Conv; 2]>,
    decoder: Vec<(Up, [Conv; 2])>,
    head: Up,
}

/// How a parameter slot gets its initial value.
enum Init {
    He(usize),
    Const(f64),
}

impl UNet {
    /// Registers freshly initialized parameters in `store`.
    pub fn new<R: Rng>(config: UNetConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        Self::build(config, &mut |name, shape, init| {
            let n = shape.iter().product();
            let value = match init {
                Init::He(fan_in) => he_normal(rng, n, fan_in),
                Init::Const(v) => vec![v; n],
            };
            Ok(store.add(name, shape, value, false))
        })
    }

    /// Binds to parameters already present in `store` (e.g. from a checkpoint).
    pub fn bind(config: UNetConfig, store: &ParamStore) -> Result<Self> {
        Self::build(config, &mut |name, shape, _| {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.get(id).shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape
                )));
            }
            Ok(id)
        })
    }

    fn build(config: UNetConfig, reg: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>) -> Result<Self> {
        config.validate()?;
        let ch = config.channels();
        let norm = config.instance_norm;
        let mut conv = |prefix: &str, cin: usize, cout: usize| -> Result<Conv> {
            let w = reg(format!("{prefix}.weight"), vec![cout, cin, 27], Init::He(cin * 27))?;
            let (b, nrm) = if norm {
                let g = reg(format!("{prefix}.norm.gamma"), vec![cout], Init::Const(1.0))?;
                let bt = reg(format!("{prefix}.norm.beta"), vec![cout], Init::Const(0.0))?;
                (None, Some((g, bt)))
            } else {
                (Some(reg(format!("{prefix}.bias"), vec![cout], Init::Const(0.0))?), None)
            };
            Ok(Conv { w, b, norm: nrm })
        };
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for (l, &c) in ch.iter().enumerate() {
            encoder.push([
                conv(&format!("enc{l}.conv0"), cin, c)?,
                conv(&format!("enc{l}.conv1"), c, c)?,
            ]);
            cin = c;
        }
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for l in (0..config.depth - 1).rev() {
            let (cu, c) = (ch[l + 1], ch[l]);
            blocks.push([
                conv(&format!("dec{l}.conv0"), 2 * c, c)?,
                conv(&format!("dec{l}.conv1"), c, c)?,
            ]);
            ups.push((l, cu, c));
        }
        let mut decoder = Vec::new();
        for ((l, cu, c), block) in ups.into_iter().zip(blocks) {
            let up = match config.upsampling {
                Upsampling::TransposedConv => Up {
                    w: reg(format!("dec{l}.up.weight"), vec![cu, c, 8], Init::He(cu))?,
                    b: reg(format!("dec{l}.up.bias"), vec![c], Init::Const(0.0))?,
                },
                Upsampling::TrilinearConv => Up {
                    w: reg(format!("dec{l}.up.weight"), vec![c, cu], Init::He(cu))?,
                    b: reg(format!("dec{l}.up.bias"), vec![c], Init::Const(0.0))?,
                },
            };
            decoder.push((up, block));
        }
        let head = Up {
            w: reg("out.weight".into(), vec![config.n_classes, ch[0]], Init::He(ch[0]))?,
            b: reg("out.bias".into(), vec![config.n_classes], Init::Const(0.0))?,
        };
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.config.count_parameters()
    }

    /// Ids of every backbone parameter.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let push_conv = |c: &Conv, ids: &mut Vec<ParamId>| {
            ids.push(c.w);
            ids.extend(c.b);
            if let Some((g, b)) = c.norm {
                ids.extend([g, b]);
            }
        };
        for block in &self.encoder {
            block.iter().for_each(|c| push_conv(c, &mut ids));
        }
        for (up, block) in &self.decoder {
            ids.extend([up.w, up.b]);
            block.iter().for_each(|c| push_conv(c, &mut ids));
        }
        ids.extend([self.head.w, self.head.b]);
        ids
    }

    fn run<B: Backend>(&self, be: &mut B, input: B::T, n_features: usize) -> FeaturePyramid<B::T> {
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut x = input;
        for (l, block) in self.encoder.iter().enumerate() {
            for c in block {
                x = conv_block(be, x, c);
            }
            if l + 1 < depth {
                let pooled = be.maxpool2(&x);
                skips.push(x);
                x = pooled;
            } else {
                skips.push(x.clone());
            }
        }
        let features = (0..n_features).map(|i| skips[depth - 1 - i].clone()).collect();
        for ((up, block), l) in self.decoder.iter().zip((0..depth - 1).rev()) {
            let w = be.param(up.w);
            let b = be.param(up.b);
            let u = match self.config.upsampling {
                Upsampling::TransposedConv => be.upconv2(&x, &w, &b),
                Upsampling::TrilinearConv => {
                    let i = be.upsample2(&x);
                    be.conv1(&i, &w, &b)
                }
            };
            x = be.concat(&u, &skips[l]);
            for c in block {
                x = conv_block(be, x, c);
            }
        }
        let w = be.param(self.head.w);
        let b = be.param(self.head.b);
        let score_map = be.conv1(&x, &w, &b);
        FeaturePyramid { features, score_map }
    }

    fn check(&self, shape: &[usize], n_features: usize) -> Result<()> {
        if shape.len() != 4 || shape[0] != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected a [{}, nz, ny, nx] input, got {shape:?}",
                self.config.in_channels
            )));
        }
        if n_features > self.config.depth {
            return Err(Error::Config(format!(
                "{n_features} feature layers requested from a depth-{} network",
                self.config.depth
            )));
        }
        self.config.check_input(Dims3::new(shape[3], shape[2], shape[1]))
    }

    /// Differentiable forward pass recorded on `graph`.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        input: Var,
        n_features: usize,
    ) -> Result<FeaturePyramid<Var>> {
        self.check(graph.value(input).shape(), n_features)?;
        let mut be = Taped { graph, store };
        Ok(self.run(&mut be, input, n_features))
    }

    /// Inference pass; intermediate activations are dropped as soon as possible.
    pub fn forward(&self, store: &ParamStore, input: &Tensor, n_features: usize) -> Result<FeaturePyramid<Tensor>> {
        self.check(input.shape(), n_features)?;
        let mut be = Eager { store };
        Ok(self.run(&mut be, input.clone(), n_features))
    }

    /// Score map `[n_classes, nz, ny, nx]` for a single-channel image.
    pub fn score_map(&self, store: &ParamStore, image: &[f64], dims: Dims3) -> Result<Tensor> {
        let input = Tensor::feature_map(1, dims, image.to_vec());
        Ok(self.forward(store, &input, 0)?.score_map)
    }
}

fn conv_block<B: Backend>(be: &mut B, x: B::T, c: &Conv) -> B::T {
    let w = be.param(c.w);
    let b = c.b.map(|b| be.param(b));
    let y = be.conv3(&x, &w, b.as_ref());
    let y = match c.norm {
        Some((g, bt)) => {
            let g = be.param(g);
            let bt = be.param(bt);
            be.instance_norm(&y, &g, &bt)
        }
        None => y,
    };
    be.relu(y)
}

/// The operations the U-Net needs, either recorded for differentiation or run eagerly.
trait Backend {
    type T: Clone;
    fn param(&mut self, id: ParamId) -> Self::T;
    fn conv3(&mut self, x: &Self::T, w: &Self::T, b: Option<&Self::T>) -> Self::T;
    fn conv1(&mut self, x: &Self::T, w: &Self::T, b: &Self::T) -> Self::T;
    fn upconv2(&mut self, x: &Self::T, w: &Self::T, b: &Self::T) -> Self::T;
    fn upsample2(&mut self, x: &Self::T) -> Self::T;
    fn maxpool2(&mut self, x: &Self::T) -> Self::T;
    fn instance_norm(&mut self, x: &Self::T, gamma: &Self::T, beta: &Self::T) -> Self::T;
    fn relu(&mut self, x: Self::T) -> Self::T;
    fn concat(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
}

struct Taped<'a> {
    graph: &'a mut Graph,
    store: &'a ParamStore,
}

impl Backend for Taped<'_> {
    type T = Var;

    fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
    fn conv3(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Var {
        self.graph.conv3(*x, *w, b.copied())
    }
    fn conv1(&mut self, x: &Var, w: &Var, b: &Var) -> Var {
        self.graph.conv1(*x, *w, *b)
    }
    fn upconv2(&mut self, x: &Var, w: &Var, b: &Var) -> Var {
        self.graph.upconv2(*x, *w, *b)
    }
    fn upsample2(&mut self, x: &Var) -> Var {
        self.graph.upsample2(*x)
    }
    fn maxpool2(&mut self, x: &Var) -> Var {
        self.graph.maxpool2(*x)
    }
    fn instance_norm(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Var {
        self.graph.instance_norm(*x, *gamma, *beta, NORM_EPS)
    }
    fn relu(&mut self, x: Var) -> Var {
        self.graph.relu(x)
    }
    fn concat(&mut self, a: &Var, b: &Var) -> Var {
        self.graph.concat(&[*a, *b])
    }
}

struct Eager<'a> {
    store: &'a ParamStore,
}

impl Backend for Eager<'_> {
    type T = Tensor;

    fn param(&mut self, id: ParamId) -> Tensor {
        let p = self.store.get(id);
        Tensor::new(p.shape.clone(), p.value.clone())
    }
    fn conv3(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
        let (cin, dims) = x.channels_and_dims();
        let cout = w.shape()[0];
        let out = kernels::conv3_forward(x.data(), cin, dims, w.data(), cout, b.map(|b| b.data()));
        Tensor::feature_map(cout, dims, out)
    }
    fn conv1(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (cin, dims) = x.channels_and_dims();
        let cout = w.shape()[0];
        Tensor::feature_map(
            cout,
            dims,
            kernels::conv1_forward(x.data(), cin, dims.len(), w.data(), cout, b.data()),
        )
    }
    fn upconv2(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (cin, dims) = x.channels_and_dims();
        let cout = w.shape()[1];
        Tensor::feature_map(
            cout,
            dims.doubled(),
            kernels::upconv2_forward(x.data(), cin, dims, w.data(), cout, b.data()),
        )
    }
    fn upsample2(&mut self, x: &Tensor) -> Tensor {
        let (c, dims) = x.channels_and_dims();
        Tensor::feature_map(c, dims.doubled(), kernels::upsample2_forward(x.data(), c, dims))
    }
    fn maxpool2(&mut self, x: &Tensor) -> Tensor {
        let (c, dims) = x.channels_and_dims();
        Tensor::feature_map(c, dims.halved(), kernels::maxpool2_forward(x.data(), c, dims).0)
    }
    fn instance_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let (c, dims) = x.channels_and_dims();
        let n = dims.len();
        let mut out = kernels::normalize_groups(x.data(), c, n, NORM_EPS).normalized;
        for (k, chunk) in out.chunks_mut(n).enumerate() {
            let (g, b) = (gamma.data()[k], beta.data()[k]);
            chunk.iter_mut().for_each(|v| *v = *v * g + b);
        }
        Tensor::feature_map(c, dims, out)
    }
    fn relu(&mut self, mut x: Tensor) -> Tensor {
        x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }
    fn concat(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let (ca, dims) = a.channels_and_dims();
        let (cb, _) = b.channels_and_dims();
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        Tensor::feature_map(ca + cb, dims, data)
    }
}
