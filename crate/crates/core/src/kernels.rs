//! Forward and backward numeric kernels used by the autodiff tape.
//!
//! The 3x3x3 convolution works on zero-padded copies of its operands so each
//! of the 27 taps becomes one long contiguous axpy (or dot) over the padded
//! grid. Outputs that land on the padding ring are garbage and discarded; the
//! zero ring on the inputs keeps interior values exact.

use crate::tensor::Dims3;

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry of a grid padded by one voxel on every face.
struct Padded {
    dims: Dims3,
    px: usize,
    py: usize,
    len: usize,
}

impl Padded {
    fn new(dims: Dims3) -> Self {
        let px = dims.nx + 2;
        let py = dims.ny + 2;
        Self {
            dims,
            px,
            py,
            len: px * py * (dims.nz + 2),
        }
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.px * (y + self.py * z)
    }

    /// Padded-grid span covering every interior voxel.
    fn interior_span(&self) -> (usize, usize) {
        let d = self.dims;
        (self.index(1, 1, 1), self.index(d.nx, d.ny, d.nz) + 1)
    }

    /// Signed flat offsets of the 27 taps, ordered `(dz, dy, dx)` with dx fastest.
    fn tap_offsets(&self) -> [isize; 27] {
        let mut out = [0isize; 27];
        let mut k = 0;
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    out[k] = dx + self.px as isize * (dy + self.py as isize * dz);
                    k += 1;
                }
            }
        }
        out
    }

    fn pad(&self, src: &[f64], dst: &mut [f64]) {
        let d = self.dims;
        for z in 0..d.nz {
            for y in 0..d.ny {
                let s = d.index(0, y, z);
                let t = self.index(1, y + 1, z + 1);
                dst[t..t + d.nx].copy_from_slice(&src[s..s + d.nx]);
            }
        }
    }

    fn unpad_add(&self, src: &[f64], dst: &mut [f64]) {
        let d = self.dims;
        for z in 0..d.nz {
            for y in 0..d.ny {
                let s = self.index(1, y + 1, z + 1);
                let t = d.index(0, y, z);
                for (o, v) in dst[t..t + d.nx].iter_mut().zip(&src[s..s + d.nx]) {
                    *o += v;
                }
            }
        }
    }

    fn pad_channels(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let n = self.dims.len();
        let mut out = vec![0.0; channels * self.len];
        for c in 0..channels {
            self.pad(&src[c * n..(c + 1) * n], &mut out[c * self.len..(c + 1) * self.len]);
        }
        out
    }
}

/// 3x3x3 convolution, stride 1, zero padding 1.
///
/// `x` is `[cin, dims]`, `w` is `[cout, cin, 27]`; returns `[cout, dims]`.
pub fn conv3_forward(x: &[f64], cin: usize, dims: Dims3, w: &[f64], cout: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let n = dims.len();
    let pg = Padded::new(dims);
    let xp = pg.pad_channels(x, cin);
    let (lo, hi) = pg.interior_span();
    let taps = pg.tap_offsets();
    let mut out = vec![0.0; cout * n];
    let mut acc = vec![0.0; pg.len];
    for co in 0..cout {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..cin {
            let xc = &xp[ci * pg.len..(ci + 1) * pg.len];
            let wk = &w[(co * cin + ci) * 27..(co * cin + ci + 1) * 27];
            for (k, &off) in taps.iter().enumerate() {
                let s = (lo as isize + off) as usize;
                axpy(wk[k], &xc[s..s + (hi - lo)], &mut acc[lo..hi]);
            }
        }
        let o = &mut out[co * n..(co + 1) * n];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        pg.unpad_add(&acc, o);
    }
    out
}

/// Gradients of [`conv3_forward`] with respect to input, weight and bias.
pub fn conv3_backward(
    x: &[f64],
    cin: usize,
    dims: Dims3,
    w: &[f64],
    cout: usize,
    gy: &[f64],
    need_input_grad: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = dims.len();
    let pg = Padded::new(dims);
    let xp = pg.pad_channels(x, cin);
    let gyp = pg.pad_channels(gy, cout);
    let (lo, hi) = pg.interior_span();
    let span = hi - lo;
    let taps = pg.tap_offsets();

    let mut gw = vec![0.0; cout * cin * 27];
    for co in 0..cout {
        let g = &gyp[co * pg.len + lo..co * pg.len + hi];
        for ci in 0..cin {
            let xc = &xp[ci * pg.len..(ci + 1) * pg.len];
            for (k, &off) in taps.iter().enumerate() {
                let s = (lo as isize + off) as usize;
                gw[(co * cin + ci) * 27 + k] = dot(g, &xc[s..s + span]);
            }
        }
    }
    let gb: Vec<f64> = (0..cout).map(|co| gy[co * n..(co + 1) * n].iter().sum()).collect();

    let gx = need_input_grad.then(|| {
        let mut gx = vec![0.0; cin * n];
        let mut acc = vec![0.0; pg.len];
        for ci in 0..cin {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..cout {
                let g = &gyp[co * pg.len + lo..co * pg.len + hi];
                let wk = &w[(co * cin + ci) * 27..(co * cin + ci + 1) * 27];
                for (k, &off) in taps.iter().enumerate() {
                    let s = (lo as isize + off) as usize;
                    axpy(wk[k], g, &mut acc[s..s + span]);
                }
            }
            pg.unpad_add(&acc, &mut gx[ci * n..(ci + 1) * n]);
        }
        gx
    });
    (gx, gw, gb)
}

/// Pointwise (1x1x1) convolution: `w` is `[cout, cin]`.
pub fn conv1_forward(x: &[f64], cin: usize, n: usize, w: &[f64], cout: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cout * n];
    for co in 0..cout {
        let o = &mut out[co * n..(co + 1) * n];
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..cin {
            axpy(w[co * cin + ci], &x[ci * n..(ci + 1) * n], o);
        }
    }
    out
}

pub fn conv1_backward(
    x: &[f64],
    cin: usize,
    n: usize,
    w: &[f64],
    cout: usize,
    gy: &[f64],
    need_input_grad: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; cout * cin];
    for co in 0..cout {
        for ci in 0..cin {
            gw[co * cin + ci] = dot(&gy[co * n..(co + 1) * n], &x[ci * n..(ci + 1) * n]);
        }
    }
    let gb = (0..cout).map(|co| gy[co * n..(co + 1) * n].iter().sum()).collect();
    let gx = need_input_grad.then(|| {
        let mut gx = vec![0.0; cin * n];
        for ci in 0..cin {
            let g = &mut gx[ci * n..(ci + 1) * n];
            for co in 0..cout {
                axpy(w[co * cin + ci], &gy[co * n..(co + 1) * n], g);
            }
        }
        gx
    });
    (gx, gw, gb)
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
///
/// `x` is `[cin, dims]`, `w` is `[cin, cout, 8]` with the 8 taps ordered
/// `(c, b, a)` for offsets along `(z, y, x)`, x fastest.
pub fn upconv2_forward(x: &[f64], cin: usize, dims: Dims3, w: &[f64], cout: usize, b: &[f64]) -> Vec<f64> {
    let n = dims.len();
    let od = dims.doubled();
    let on = od.len();
    let mut out = vec![0.0; cout * on];
    for co in 0..cout {
        out[co * on..(co + 1) * on].iter_mut().for_each(|v| *v = b[co]);
    }
    for ci in 0..cin {
        let xc = &x[ci * n..(ci + 1) * n];
        for co in 0..cout {
            let wk = &w[(ci * cout + co) * 8..(ci * cout + co + 1) * 8];
            let o = &mut out[co * on..(co + 1) * on];
            for z in 0..dims.nz {
                for y in 0..dims.ny {
                    for x0 in 0..dims.nx {
                        let v = xc[dims.index(x0, y, z)];
                        for (k, wv) in wk.iter().enumerate() {
                            let (a, bb, c) = (k & 1, (k >> 1) & 1, k >> 2);
                            o[od.index(2 * x0 + a, 2 * y + bb, 2 * z + c)] += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn upconv2_backward(
    x: &[f64],
    cin: usize,
    dims: Dims3,
    w: &[f64],
    cout: usize,
    gy: &[f64],
    need_input_grad: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = dims.len();
    let od = dims.doubled();
    let on = od.len();
    let mut gw = vec![0.0; cin * cout * 8];
    let mut gx = need_input_grad.then(|| vec![0.0; cin * n]);
    for ci in 0..cin {
        let xc = &x[ci * n..(ci + 1) * n];
        for co in 0..cout {
            let g = &gy[co * on..(co + 1) * on];
            let wk = &w[(ci * cout + co) * 8..(ci * cout + co + 1) * 8];
            let gwk = &mut gw[(ci * cout + co) * 8..(ci * cout + co + 1) * 8];
            for z in 0..dims.nz {
                for y in 0..dims.ny {
                    for x0 in 0..dims.nx {
                        let i = dims.index(x0, y, z);
                        let v = xc[i];
                        let mut gi = 0.0;
                        for k in 0..8 {
                            let (a, bb, c) = (k & 1, (k >> 1) & 1, k >> 2);
                            let go = g[od.index(2 * x0 + a, 2 * y + bb, 2 * z + c)];
                            gwk[k] += go * v;
                            gi += go * wk[k];
                        }
                        if let Some(gx) = gx.as_mut() {
                            gx[ci * n + i] += gi;
                        }
                    }
                }
            }
        }
    }
    let gb = (0..cout).map(|co| gy[co * on..(co + 1) * on].iter().sum()).collect();
    (gx, gw, gb)
}

/// 2x2x2 max pooling. Returns pooled values and, per output, the flat input index of the max.
pub fn maxpool2_forward(x: &[f64], channels: usize, dims: Dims3) -> (Vec<f64>, Vec<usize>) {
    let n = dims.len();
    let od = dims.halved();
    let on = od.len();
    let mut out = vec![0.0; channels * on];
    let mut arg = vec![0usize; channels * on];
    for c in 0..channels {
        for z in 0..od.nz {
            for y in 0..od.ny {
                for x0 in 0..od.nx {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for k in 0..8 {
                        let (a, b, cc) = (k & 1, (k >> 1) & 1, k >> 2);
                        let i = c * n + dims.index(2 * x0 + a, 2 * y + b, 2 * z + cc);
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                    let o = c * on + od.index(x0, y, z);
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    (out, arg)
}

/// Views a `[c, nz, ny, nx]` buffer as `[outer, n, inner]` around `axis` (0 = x).
fn axis_split(channels: usize, dims: Dims3, axis: usize) -> (usize, usize, usize) {
    match axis {
        0 => (channels * dims.nz * dims.ny, dims.nx, 1),
        1 => (channels * dims.nz, dims.ny, dims.nx),
        _ => (channels, dims.nz, dims.ny * dims.nx),
    }
}

/// Source taps of output `i` for 2x linear upsampling with cell-centre alignment.
fn up2_taps(i: usize, n: usize) -> (usize, usize) {
    let k = i / 2;
    let other = if i.is_multiple_of(2) {
        k.saturating_sub(1)
    } else {
        (k + 1).min(n - 1)
    };
    (k, other)
}

fn linear_up2_axis(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * 2 * n * inner];
    for o in 0..outer {
        for i in 0..2 * n {
            let (k, k2) = up2_taps(i, n);
            let dst = &mut out[(o * 2 * n + i) * inner..(o * 2 * n + i + 1) * inner];
            let a = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
            let b = &x[(o * n + k2) * inner..(o * n + k2 + 1) * inner];
            for j in 0..inner {
                dst[j] = 0.75 * a[j] + 0.25 * b[j];
            }
        }
    }
    out
}

fn linear_up2_axis_transpose(g: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for i in 0..2 * n {
            let (k, k2) = up2_taps(i, n);
            let src = &g[(o * 2 * n + i) * inner..(o * 2 * n + i + 1) * inner];
            axpy(0.75, src, &mut out[(o * n + k) * inner..(o * n + k + 1) * inner]);
            axpy(0.25, src, &mut out[(o * n + k2) * inner..(o * n + k2 + 1) * inner]);
        }
    }
    out
}

/// Separable trilinear 2x upsampling of a `[channels, dims]` feature map.
pub fn upsample2_forward(x: &[f64], channels: usize, dims: Dims3) -> Vec<f64> {
    let mut data = x.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let (outer, n, inner) = axis_split(channels, d, axis);
        data = linear_up2_axis(&data, outer, n, inner);
        match axis {
            0 => d.nx *= 2,
            1 => d.ny *= 2,
            _ => d.nz *= 2,
        }
    }
    data
}

/// Adjoint of [`upsample2_forward`]; `dims` is the input (coarse) grid.
pub fn upsample2_backward(gy: &[f64], channels: usize, dims: Dims3) -> Vec<f64> {
    let mut data = gy.to_vec();
    let mut d = dims.doubled();
    for axis in (0..3).rev() {
        match axis {
            0 => d.nx /= 2,
            1 => d.ny /= 2,
            _ => d.nz /= 2,
        }
        let (outer, n, inner) = axis_split(channels, d, axis);
        data = linear_up2_axis_transpose(&data, outer, n, inner);
    }
    data
}

/// Per-channel normalization statistics cached for the backward pass.
pub struct NormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes each of `groups` contiguous runs of `len` values to zero mean and unit variance.
pub fn normalize_groups(x: &[f64], groups: usize, len: usize, eps: f64) -> NormCache {
    let mut normalized = vec![0.0; groups * len];
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let xs = &x[g * len..(g + 1) * len];
        let mean = xs.iter().sum::<f64>() / len as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[g] = is;
        for (o, v) in normalized[g * len..(g + 1) * len].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
    }
    NormCache { normalized, inv_std }
}

/// Backward of `normalize_groups` given the upstream gradient on the normalized values.
pub fn normalize_groups_backward(cache: &NormCache, g_norm: &[f64], groups: usize, len: usize) -> Vec<f64> {
    let mut gx = vec![0.0; groups * len];
    for g in 0..groups {
        let xh = &cache.normalized[g * len..(g + 1) * len];
        let gn = &g_norm[g * len..(g + 1) * len];
        let mean_g = gn.iter().sum::<f64>() / len as f64;
        let mean_gx = dot(gn, xh) / len as f64;
        let is = cache.inv_std[g];
        for ((o, gv), xv) in gx[g * len..(g + 1) * len].iter_mut().zip(gn).zip(xh) {
            *o = is * (gv - mean_g - xv * mean_gx);
        }
    }
    gx
}

/// `y = x W^T + b` for `x: [rows, fin]`, `w: [fout, fin]`.
pub fn linear_forward(x: &[f64], rows: usize, fin: usize, w: &[f64], fout: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * fout];
    for r in 0..rows {
        let xr = &x[r * fin..(r + 1) * fin];
        for o in 0..fout {
            out[r * fout + o] = dot(xr, &w[o * fin..(o + 1) * fin]) + b[o];
        }
    }
    out
}

pub fn linear_backward(
    x: &[f64],
    rows: usize,
    fin: usize,
    w: &[f64],
    fout: usize,
    gy: &[f64],
    need_input_grad: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; fout * fin];
    let mut gb = vec![0.0; fout];
    for r in 0..rows {
        let xr = &x[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let g = gy[r * fout + o];
            gb[o] += g;
            axpy(g, xr, &mut gw[o * fin..(o + 1) * fin]);
        }
    }
    let gx = need_input_grad.then(|| {
        let mut gx = vec![0.0; rows * fin];
        for r in 0..rows {
            let gxr = &mut gx[r * fin..(r + 1) * fin];
            for o in 0..fout {
                axpy(gy[r * fout + o], &w[o * fin..(o + 1) * fin], gxr);
            }
        }
        gx
    });
    (gx, gw, gb)
}
