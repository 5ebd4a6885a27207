//! Overlap and surface-distance metrics on binary masks.
//!
//! Surfaces are 6-connected boundaries: a foreground voxel with a background
//! face neighbour, where positions outside the grid count as background.
//! Distances come from an exact Euclidean distance transform with per-axis
//! spacing, so results are in millimetres.

use crate::error::{Error, Result};
use crate::tensor::Dims3;

fn check_pair(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "masks hold {} and {} voxels",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn check_grid(a: &[bool], dims: Dims3) -> Result<()> {
    if a.len() != dims.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask holds {} voxels, grid {dims} needs {}",
            a.len(),
            dims.len()
        )));
    }
    Ok(())
}

/// Mask of voxels equal to `class_id`.
pub fn class_mask(labels: &[u8], class_id: u8) -> Vec<bool> {
    labels.iter().map(|&l| l == class_id).collect()
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        sa += a as usize;
        sb += b as usize;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

/// Flat indices of boundary voxels.
pub fn boundary(mask: &[bool], dims: Dims3) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..dims.len() {
        if !mask[i] {
            continue;
        }
        let (x, y, z) = dims.coords(i);
        let edge = x == 0
            || y == 0
            || z == 0
            || x + 1 == dims.nx
            || y + 1 == dims.ny
            || z + 1 == dims.nz
            || !mask[i - 1]
            || !mask[i + 1]
            || !mask[i - dims.nx]
            || !mask[i + dims.nx]
            || !mask[i - dims.nx * dims.ny]
            || !mask[i + dims.nx * dims.ny];
        if edge {
            out.push(i);
        }
    }
    out
}

/// 1-D lower-envelope squared distance transform along a line with sample spacing `h`.
fn dt_line(f: &[f64], h: f64, out: &mut [f64], v: &mut Vec<usize>, zb: &mut Vec<f64>) {
    v.clear();
    zb.clear();
    let pos = |q: usize| q as f64 * h;
    let inter = |q: usize, p: usize| ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
    for (q, fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            match v.last() {
                Some(&p) => {
                    let s = inter(q, p);
                    if s <= *zb.last().expect("boundary per vertex") {
                        v.pop();
                        zb.pop();
                    } else {
                        v.push(q);
                        zb.push(s);
                        break;
                    }
                }
                None => {
                    v.push(q);
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate().take(f.len()) {
        while k + 1 < v.len() && zb[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest `site`.
pub fn edt_squared(sites: &[bool], dims: Dims3, spacing: [f64; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let n = dims.as_array();
    let strides = [1, dims.nx, dims.nx * dims.ny];
    let (mut v, mut zb) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = n[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for start in 0..dims.len() {
            let (x, y, z) = dims.coords(start);
            if [x, y, z][axis] != 0 {
                continue;
            }
            for k in 0..len {
                line[k] = g[start + k * strides[axis]];
            }
            dt_line(&line, spacing[axis], &mut out, &mut v, &mut zb);
            for k in 0..len {
                g[start + k * strides[axis]] = out[k];
            }
        }
    }
    g
}

/// Directed nearest-boundary distances `A -> B` and `B -> A`; `None` if either mask is empty.
pub fn surface_distances(
    a: &[bool],
    b: &[bool],
    dims: Dims3,
    spacing: [f64; 3],
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    check_pair(a, b)?;
    check_grid(a, dims)?;
    let ba = boundary(a, dims);
    let bb = boundary(b, dims);
    if ba.is_empty() || bb.is_empty() {
        return Ok(None);
    }
    let directed = |from: &[usize], to: &[usize]| {
        let mut sites = vec![false; dims.len()];
        to.iter().for_each(|&i| sites[i] = true);
        let d2 = edt_squared(&sites, dims, spacing);
        from.iter().map(|&i| d2[i].sqrt()).collect::<Vec<f64>>()
    };
    Ok(Some((directed(&ba, &bb), directed(&bb, &ba))))
}

/// Linear-interpolated percentile of sorted values, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

fn pooled(a: &[bool], b: &[bool], dims: Dims3, spacing: [f64; 3]) -> Result<Option<Vec<f64>>> {
    Ok(surface_distances(a, b, dims, spacing)?.map(|(mut ab, ba)| {
        ab.extend(ba);
        ab.sort_by(f64::total_cmp);
        ab
    }))
}

/// 95th percentile of the pooled symmetric boundary distances (mm).
pub fn hd95(pred: &[bool], gt: &[bool], dims: Dims3, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(pooled(pred, gt, dims, spacing)?.map(|d| percentile(&d, 95.0)))
}

/// Full Hausdorff distance (mm).
pub fn hd100(pred: &[bool], gt: &[bool], dims: Dims3, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(pooled(pred, gt, dims, spacing)?.map(|d| *d.last().expect("non-empty boundaries")))
}

/// Mean of the pooled symmetric boundary distances (mm).
pub fn assd(pred: &[bool], gt: &[bool], dims: Dims3, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(pooled(pred, gt, dims, spacing)?.map(|d| d.iter().sum::<f64>() / d.len() as f64))
}

/// All three metrics for one class of a predicted and reference label grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
}

pub fn class_metrics(pred: &[u8], gt: &[u8], class_id: u8, dims: Dims3, spacing: [f64; 3]) -> Result<ClassMetrics> {
    let a = class_mask(pred, class_id);
    let b = class_mask(gt, class_id);
    let d = dsc(&a, &b)?;
    match pooled(&a, &b, dims, spacing)? {
        Some(dist) => Ok(ClassMetrics {
            dsc: d,
            hd95: Some(percentile(&dist, 95.0)),
            assd: Some(dist.iter().sum::<f64>() / dist.len() as f64),
        }),
        None => Ok(ClassMetrics {
            dsc: d,
            hd95: None,
            assd: None,
        }),
    }
}
