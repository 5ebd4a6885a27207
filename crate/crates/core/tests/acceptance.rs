//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

#![allow(clippy::approx_constant)]

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use voxelsim::autograd::Graph;
use voxelsim::checkpoint::{load_checkpoint, strip_training_only};
use voxelsim::config::{poly_lr, TrainConfig};
use voxelsim::data::{generate_phantom, preprocess, PhantomConfig, PreprocessConfig, VolumeSample};
use voxelsim::eval::{evaluate_model, MetricReport};
use voxelsim::heads::{stop_gradient, EmbeddingBatch, HeadConfig, SiameseHeads};
use voxelsim::losses::{
    class_weights, feature_loss, neg_cosine, soft_dice_from_probs, soft_dice_loss, total_loss, voxel_pair_similarity,
    FeatureLossConfig, FeatureLossPlan,
};
use voxelsim::metrics::{assd, dsc, hd95};
use voxelsim::model::Model;
use voxelsim::params::ParamStore;
use voxelsim::sampler::{
    classify_voxels, downsample_label, sample_batch, CapScope, SamplerConfig, SamplingPlan, VoxelTag,
};
use voxelsim::sweep::SweepSummary;
use voxelsim::trainer::Trainer;
use voxelsim::{Dims3, Tensor};

type Outcome = Result<String, String>;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    check((a - b).abs() <= tol, || {
        format!("{what}: got {a}, expected {b} (tol {tol})")
    })
}

fn phantoms(seeds: impl Iterator<Item = u64>, shape: [usize; 3]) -> Vec<VolumeSample> {
    let pc = PhantomConfig::new(shape, 3);
    let pp = PreprocessConfig {
        target_shape: shape,
        ..Default::default()
    };
    seeds
        .map(|s| preprocess(&generate_phantom(s, &pc).unwrap().sample, &pp).unwrap())
        .collect()
}

fn embedding_batch(rows: &[(&[f64], u32)]) -> EmbeddingBatch {
    let d = rows[0].0.len();
    let data: Vec<f64> = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
    EmbeddingBatch {
        p: Tensor::new(vec![rows.len(), d], data.clone()),
        z: Tensor::new(vec![rows.len(), d], data),
        class_id: rows.iter().map(|r| r.1).collect(),
        layer_id: vec![1; rows.len()],
        volume_id: vec![0; rows.len()],
        z_blocked: false,
    }
    .stop_gradient()
}

// ---------------------------------------------------------------------------
// 1. loss oracles
// ---------------------------------------------------------------------------

fn loss_oracles() -> Outcome {
    let t0 = Instant::now();
    let tol = 1e-6;
    close(
        neg_cosine(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(),
        -1.0,
        tol,
        "neg_cosine identical",
    )?;
    close(
        neg_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
        0.0,
        tol,
        "neg_cosine orthogonal",
    )?;
    close(
        neg_cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
        -0.5f64.sqrt(),
        tol,
        "neg_cosine (1,1).(1,0)",
    )?;
    close(
        neg_cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
        -0.70711,
        1e-5,
        "neg_cosine rounded",
    )?;
    check(neg_cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err(), || {
        "zero-norm input accepted".into()
    })?;

    // two classes on 32 voxels, class 1 on the first half
    let n = 32;
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i < n / 2)).collect();
    let onehot: Vec<f64> = (0..2)
        .flat_map(|c| labels.iter().map(move |&l| f64::from(l as usize == c)))
        .collect();
    close(
        soft_dice_from_probs(&onehot, 2, &labels).unwrap().loss,
        0.0,
        tol,
        "dice perfect",
    )?;
    let flipped: Vec<f64> = (0..2)
        .flat_map(|c| labels.iter().map(move |&l| f64::from(l as usize != c)))
        .collect();
    close(
        soft_dice_from_probs(&flipped, 2, &labels).unwrap().loss,
        1.0,
        tol,
        "dice disjoint",
    )?;
    let logits = Tensor::feature_map(2, Dims3::new(n, 1, 1), onehot.iter().map(|v| 40.0 * v).collect());
    close(
        soft_dice_loss(&logits, &labels).unwrap(),
        0.0,
        tol,
        "dice from saturated logits",
    )?;
    let labels8: Vec<u8> = (0..8).map(|i| u8::from(i < 4)).collect();
    let half = soft_dice_from_probs(&[0.5; 16], 2, &labels8).unwrap();
    for d in &half.per_class {
        close(*d, 4.0 / 6.0, tol, "dice_c at p = 0.5")?;
    }
    close(half.loss, 1.0 / 3.0, tol, "dice loss at p = 0.5")?;
    let flat = Tensor::feature_map(2, Dims3::new(8, 1, 1), vec![0.0; 16]);
    close(
        soft_dice_loss(&flat, &labels8).unwrap(),
        1.0 / 3.0,
        tol,
        "dice loss of equal logits",
    )?;

    let w = class_weights(&[100, 100]).unwrap();
    close(w[0], 0.5, tol, "w [100,100]")?;
    close(w[1], 0.5, tol, "w [100,100]")?;
    let w = class_weights(&[100, 300]).unwrap();
    close(w[0], 0.75, tol, "w [100,300]")?;
    close(w[1], 0.25, tol, "w [100,300]")?;
    close(class_weights(&[37]).unwrap()[0], 1.0, tol, "w [N]")?;
    check(class_weights(&[3, 0]).is_err(), || "zero count accepted".into())?;

    close(poly_lr(0, 500, 1e-3, 0.9).unwrap(), 1e-3, tol, "poly_lr start")?;
    close(poly_lr(500, 500, 1e-3, 0.9).unwrap(), 0.0, tol, "poly_lr end")?;
    close(poly_lr(250, 500, 1e-3, 0.9).unwrap(), 5.359e-4, tol, "poly_lr 250/500")?;
    check(poly_lr(501, 500, 1e-3, 0.9).is_err(), || {
        "epoch past the end accepted".into()
    })?;

    close(total_loss(0.3, -0.9, 10.0), -8.7, tol, "total loss")?;
    close(total_loss(0.3, -0.9, 0.0), 0.3, tol, "total loss at lambda 0")?;

    let e = [1.0, 0.0];
    let b = embedding_batch(&[(&e, 1), (&e, 1), (&e, 1)]);
    close(
        feature_loss(&b, &FeatureLossConfig::default()).unwrap().loss,
        -1.0,
        tol,
        "feature loss one class",
    )?;
    let (a, c) = ([1.0, 0.0], [0.0, 1.0]);
    let b = embedding_batch(&[(&a, 1), (&a, 1), (&c, 2), (&c, 2)]);
    close(
        feature_loss(&b, &FeatureLossConfig::default()).unwrap().loss,
        -1.0,
        tol,
        "feature loss two classes",
    )?;
    close(
        voxel_pair_similarity(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 0.0], 2, false).unwrap(),
        1.0,
        tol,
        "pair sim aligned",
    )?;
    close(
        voxel_pair_similarity(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2, true).unwrap(),
        0.0,
        tol,
        "pair sim cross-only",
    )?;

    let secs = t0.elapsed().as_secs_f64();
    check(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("all hand-evaluated values within 1e-6 ({secs:.3}s)"))
}

// ---------------------------------------------------------------------------
// 2. factorized pair similarity vs double loop
// ---------------------------------------------------------------------------

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn brute_pair_similarity(p: &[f64], z: &[f64], d: usize, exclude_self: bool) -> f64 {
    let (np, nz) = (p.len() / d, z.len() / d);
    let mut s = 0.0;
    let mut pairs = 0usize;
    for i in 0..np {
        let pi = unit(&p[i * d..(i + 1) * d]);
        for j in 0..nz {
            if exclude_self && i == j {
                continue;
            }
            let zj = unit(&z[j * d..(j + 1) * d]);
            s += pi.iter().zip(&zj).map(|(a, b)| a * b).sum::<f64>();
            pairs += 1;
        }
    }
    s / pairs as f64
}

fn pair_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=100);
        let m = rng.random_range(2..=100);
        let d = rng.random_range(1..=64);
        let bias: f64 = rng.random_range(-1.0..1.0);
        let mut draw = |k: usize| -> Vec<f64> { (0..k * d).map(|_| gauss(&mut rng) + bias).collect() };
        let p = draw(n);
        let z_aligned = draw(n);
        let z_other = draw(m);
        let cases = [(&z_aligned, true), (&z_other, false)];
        for (z, excl) in cases {
            let f = voxel_pair_similarity(&p, z, d, excl).map_err(|e| e.to_string())?;
            let b = brute_pair_similarity(&p, z, d, excl);
            worst = worst.max((f - b).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(worst <= 1e-5, || format!("max deviation {worst:e}"))?;
    check(secs < 30.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "200 random sets, max |factorized - brute| = {worst:.2e} ({secs:.2}s)"
    ))
}

// ---------------------------------------------------------------------------
// 3. stop-gradient contract on a toy encoder + heads
// ---------------------------------------------------------------------------

struct Toy {
    store: ParamStore,
    heads: SiameseHeads,
    conv_w: voxelsim::params::ParamId,
    conv_b: voxelsim::params::ParamId,
    input: Tensor,
    idx: Vec<usize>,
    plan: FeatureLossPlan,
}

impl Toy {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let c = 4;
        let w: Vec<f64> = (0..c * 27).map(|_| 0.3 * gauss(&mut rng)).collect();
        let conv_w = store.add("toy.conv.weight", vec![c, 1, 27], w, false);
        let b: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..0.5)).collect();
        let conv_b = store.add("toy.conv.bias", vec![c], b, false);
        let heads = SiameseHeads::new(HeadConfig::with_hidden(8), &[c], &mut store, &mut rng).unwrap();
        let dims = Dims3::new(4, 4, 4);
        let input = Tensor::feature_map(1, dims, (0..dims.len()).map(|_| rng.random_range(0.0..1.0)).collect());
        let idx: Vec<usize> = (0..16).map(|k| k * 4 + (k % 4)).collect();
        let classes: Vec<u32> = (0..16).map(|k| 1 + (k % 3) as u32).collect();
        let plan = FeatureLossPlan::new(&classes, &[1; 16], &FeatureLossConfig::default()).unwrap();
        Self {
            store,
            heads,
            conv_w,
            conv_b,
            input,
            idx,
            plan,
        }
    }

    /// Records the encoder and heads; returns `(graph, p, z)`.
    fn forward(&self, store: &ParamStore) -> (Graph, voxelsim::autograd::Var, voxelsim::autograd::Var) {
        let mut g = Graph::new();
        let x = g.constant(self.input.clone());
        let w = g.param(store, self.conv_w);
        let b = g.param(store, self.conv_b);
        let h = g.conv3(x, w, Some(b));
        let h = g.relu(h);
        let (p, z) = self.heads.embed_graph(&mut g, store, h, &self.idx, 1).unwrap();
        (g, p, z)
    }
}

fn stop_gradient_contract() -> Outcome {
    let toy = Toy::new();
    let n_params = toy.store.scalar_count();
    check(n_params <= 10_000, || format!("toy net has {n_params} parameters"))?;

    // z branch alone: p frozen, z through stop-gradient -> no parameter gradient at all
    let (mut g, p, z) = toy.forward(&toy.store);
    let p_frozen = g.detach(p);
    let z_sg = stop_gradient(&mut g, z);
    let (loss, _) = g.feature_loss(p_frozen, z_sg, toy.plan.clone());
    let grads = g.backward(loss);
    let z_branch = g.param_grads(&grads, &toy.store);
    let nonzero = z_branch.iter().flatten().flatten().filter(|v| **v != 0.0).count();
    check(nonzero == 0, || {
        format!("{nonzero} non-zero gradient entries through the z branch")
    })?;
    check(grads.get(z_sg).is_none(), || {
        "stop-gradient node received a gradient".into()
    })?;

    // without the stop-gradient the same branch does carry gradient
    let (mut g, p, z) = toy.forward(&toy.store);
    let p_frozen = g.detach(p);
    let (loss, _) = g.feature_loss(p_frozen, z, toy.plan.clone());
    let grads = g.backward(loss);
    let open = g
        .param_grads(&grads, &toy.store)
        .iter()
        .flatten()
        .flatten()
        .filter(|v| **v != 0.0)
        .count();
    check(open > 0, || {
        "unblocked z branch carries no gradient; toy net is degenerate".into()
    })?;

    // p branch: analytic vs central differences with z held at its base value
    let (mut g, p, z) = toy.forward(&toy.store);
    let z_base = g.value(z).clone();
    let z_sg = stop_gradient(&mut g, z);
    let (loss, _) = g.feature_loss(p, z_sg, toy.plan.clone());
    let grads = g.backward(loss);
    let analytic: Vec<f64> = g
        .param_grads(&grads, &toy.store)
        .into_iter()
        .zip(toy.store.iter())
        .flat_map(|(gr, (_, prm))| gr.unwrap_or_else(|| vec![0.0; prm.value.len()]))
        .collect();
    let dim = z_base.rows_cols().1;
    let frozen_loss = |store: &ParamStore| {
        let (g, p, _) = toy.forward(store);
        toy.plan.evaluate(g.value(p).data(), z_base.data(), dim).loss
    };
    let h = 1e-6;
    let mut fd = Vec::with_capacity(n_params);
    let mut store = toy.store.clone();
    let ids: Vec<_> = toy.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value[k];
            store.get_mut(id).value[k] = orig + h;
            let up = frozen_loss(&store);
            store.get_mut(id).value[k] = orig - h;
            let down = frozen_loss(&store);
            store.get_mut(id).value[k] = orig;
            fd.push((up - down) / (2.0 * h));
        }
    }
    let diff: f64 = analytic
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = diff / norm;
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale))
        .fold(0.0f64, f64::max);
    check(rel <= 1e-4, || format!("relative gradient error {rel:e}"))?;
    Ok(format!(
        "{n_params} params: z-branch gradient exactly 0; p-branch vs central FD relative error {rel:.2e} (worst entry {worst:.2e})"
    ))
}

// ---------------------------------------------------------------------------
// 4. sampler invariants
// ---------------------------------------------------------------------------

fn sampler_invariants() -> Outcome {
    let shape = [32, 32, 16];
    let full = Dims3::from_slice(&shape).unwrap();
    let layer_dims = [full, full.halved(), full.halved().halved()];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut plans = 0;
    let mut max_total = 0;
    let mut max_fn = 0;
    for case in 0..50u64 {
        let vols = phantoms([2 * case + 100, 2 * case + 101].into_iter(), shape);
        let mut labels: Vec<Vec<Vec<u8>>> = Vec::new();
        let mut tags: Vec<Vec<Vec<VoxelTag>>> = Vec::new();
        for ld in layer_dims {
            let mut ls = Vec::new();
            let mut ts = Vec::new();
            for v in &vols {
                let sharp: f64 = rng.random_range(0.0..4.0);
                let score: Vec<f64> = (0..3)
                    .flat_map(|c| v.label.iter().map(move |&l| if l as usize == c { sharp } else { 0.0 }))
                    .map(|s| s + gauss(&mut rng))
                    .collect();
                let map = Tensor::feature_map(3, full, score);
                let li = downsample_label(&v.label, full, ld).map_err(|e| e.to_string())?;
                ts.push(classify_voxels(&li, &map, ld).map_err(|e| e.to_string())?);
                ls.push(li);
            }
            labels.push(ls);
            tags.push(ts);
        }
        for scope in [CapScope::PerBatch, CapScope::PerVolume] {
            let cfg = SamplerConfig {
                scope,
                ..SamplerConfig::default()
            };
            let layers: Vec<Vec<(&[u8], &[VoxelTag])>> = labels
                .iter()
                .zip(&tags)
                .map(|(ls, ts)| ls.iter().zip(ts).map(|(l, t)| (l.as_slice(), t.as_slice())).collect())
                .collect();
            let seed = 1000 + case;
            let plan = sample_batch(&layers, &cfg, seed).map_err(|e| e.to_string())?;
            let again = sample_batch(&layers, &cfg, seed).map_err(|e| e.to_string())?;
            check(plan == again, || {
                format!("case {case}: plan differs under a fixed seed")
            })?;
            let (t, f) = check_plan(&plan, &labels, &tags, &cfg).map_err(|e| format!("case {case} {scope:?}: {e}"))?;
            max_total = max_total.max(t);
            max_fn = max_fn.max(f);
            plans += 1;
        }
    }
    Ok(format!(
        "100 phantoms, {plans} plans: caps, FN-first counts, labels, uniqueness, determinism hold (max total {max_total}, max FN {max_fn})"
    ))
}

/// Returns the largest per-group total and FN counts.
fn check_plan(
    plan: &SamplingPlan,
    labels: &[Vec<Vec<u8>>],
    tags: &[Vec<Vec<VoxelTag>>],
    cfg: &SamplerConfig,
) -> Result<(usize, usize), String> {
    let mut max_t = 0;
    let mut max_f = 0;
    for (l, (ls, ts)) in labels.iter().zip(tags).enumerate() {
        let layer_id = l as u32 + 1;
        let groups: Vec<Vec<usize>> = match cfg.scope {
            CapScope::PerBatch => vec![(0..ls.len()).collect()],
            CapScope::PerVolume => (0..ls.len()).map(|v| vec![v]).collect(),
        };
        let mut seen = HashSet::new();
        for s in plan.sets.iter().filter(|s| s.layer_id == layer_id) {
            for v in &s.voxels {
                let vi = v.volume as usize;
                check(ls[vi][v.index] == s.class_id, || {
                    format!("voxel {v:?} labelled {} in set {}", ls[vi][v.index], s.class_id)
                })?;
                check(ts[vi][v.index] == v.tag, || format!("voxel {v:?} has the wrong tag"))?;
                check(seen.insert((v.volume, v.index)), || format!("duplicate voxel {v:?}"))?;
            }
        }
        for g in groups {
            let in_group = |vol: u32| g.contains(&(vol as usize));
            let picked: Vec<_> = plan
                .sets
                .iter()
                .filter(|s| s.layer_id == layer_id)
                .flat_map(|s| s.voxels.iter())
                .filter(|v| in_group(v.volume))
                .collect();
            let total = picked.len();
            let fns = picked.iter().filter(|v| v.tag == VoxelTag::Fn).count();
            let avail: usize = g.iter().map(|&v| ls[v].len()).sum();
            let fn_avail: usize = g
                .iter()
                .map(|&v| ts[v].iter().filter(|t| **t == VoxelTag::Fn).count())
                .sum();
            check(total <= cfg.total_cap, || {
                format!("layer {layer_id}: {total} > total cap")
            })?;
            check(fns <= cfg.fn_cap, || format!("layer {layer_id}: {fns} FN > FN cap"))?;
            check(fns == fn_avail.min(cfg.fn_cap), || {
                format!("layer {layer_id}: {fns} FN of {fn_avail} available")
            })?;
            let fn_take = fn_avail.min(cfg.fn_cap);
            let expected = fn_take + (avail - fn_avail).min(cfg.total_cap - fn_take);
            check(total == expected, || {
                format!("layer {layer_id}: {total} sampled, expected {expected}")
            })?;
            max_t = max_t.max(total);
            max_f = max_f.max(fns);
        }
    }
    Ok((max_t, max_f))
}

// ---------------------------------------------------------------------------
// 5. metric oracles
// ---------------------------------------------------------------------------

fn brute_boundary(m: &[bool], d: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    let at = |x: i64, y: i64, z: i64| {
        if x < 0 || y < 0 || z < 0 || x >= d[0] as i64 || y >= d[1] as i64 || z >= d[2] as i64 {
            false
        } else {
            m[x as usize + d[0] * (y as usize + d[1] * z as usize)]
        }
    };
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let (xi, yi, zi) = (x as i64, y as i64, z as i64);
                if !at(xi, yi, zi) {
                    continue;
                }
                let nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if nbrs.iter().any(|(a, b, c)| !at(xi + a, yi + b, zi + c)) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn brute_distances(a: &[[usize; 3]], b: &[[usize; 3]], sp: [f64; 3]) -> Vec<f64> {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    (0..3)
                        .map(|k| ((p[k] as f64 - q[k] as f64) * sp[k]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn linear_percentile(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn random_mask(rng: &mut ChaCha8Rng, d: [usize; 3]) -> Vec<bool> {
    let n = d[0] * d[1] * d[2];
    let mut m = vec![false; n];
    for _ in 0..rng.random_range(1..4) {
        let lo: [usize; 3] = std::array::from_fn(|k| rng.random_range(0..d[k]));
        let hi: [usize; 3] = std::array::from_fn(|k| rng.random_range(lo[k]..d[k]) + 1);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    m[x + d[0] * (y + d[1] * z)] = true;
                }
            }
        }
    }
    let speckle: f64 = rng.random_range(0.0..0.2);
    for v in m.iter_mut() {
        if rng.random_bool(speckle) {
            *v = !*v;
        }
    }
    if !m.iter().any(|&v| v) {
        m[rng.random_range(0..n)] = true;
    }
    m
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d: [usize; 3] = std::array::from_fn(|_| rng.random_range(2..=16));
        let sp: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..3.0));
        let dims = Dims3::from_slice(&d).unwrap();
        let a = random_mask(&mut rng, d);
        let b = random_mask(&mut rng, d);
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let sizes = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
        let dsc_ref = 2.0 * inter as f64 / sizes as f64;
        let (ba, bb) = (brute_boundary(&a, d), brute_boundary(&b, d));
        let mut pooled = brute_distances(&ba, &bb, sp);
        pooled.extend(brute_distances(&bb, &ba, sp));
        let assd_ref = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let hd_ref = linear_percentile(&mut pooled, 95.0);
        let got_dsc = dsc(&a, &b).map_err(|e| e.to_string())?;
        let got_hd = hd95(&a, &b, dims, sp)
            .map_err(|e| e.to_string())?
            .ok_or("hd95 missing")?;
        let got_assd = assd(&a, &b, dims, sp)
            .map_err(|e| e.to_string())?
            .ok_or("assd missing")?;
        for (g, r) in [(got_dsc, dsc_ref), (got_hd, hd_ref), (got_assd, assd_ref)] {
            worst = worst.max((g - r).abs());
        }
        let same = (
            dsc(&a, &a).unwrap(),
            hd95(&a, &a, dims, sp).unwrap().unwrap(),
            assd(&a, &a, dims, sp).unwrap().unwrap(),
        );
        check(same == (1.0, 0.0, 0.0), || format!("identical masks gave {same:?}"))?;
    }
    check(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "50 random anisotropic mask pairs, max deviation {worst:.1e}; identical masks give (1, 0, 0)"
    ))
}

// ---------------------------------------------------------------------------
// 6. overfit run
// ---------------------------------------------------------------------------

fn mean_organ_dsc(pred: &[u8], gt: &[u8], n_classes: u8) -> f64 {
    let mut s = 0.0;
    for c in 1..n_classes {
        let p: Vec<bool> = pred.iter().map(|&v| v == c).collect();
        let g: Vec<bool> = gt.iter().map(|&v| v == c).collect();
        let i = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
        let n = p.iter().filter(|v| **v).count() + g.iter().filter(|v| **v).count();
        s += if n == 0 { 1.0 } else { 2.0 * i as f64 / n as f64 };
    }
    s / (n_classes - 1) as f64
}

fn overfit() -> Outcome {
    let t0 = Instant::now();
    let shape = [32, 32, 16];
    let train = phantoms(0..2, shape);
    let mut cfg = TrainConfig::desk(shape, 3);
    cfg.feature_layers = 3;
    cfg.lambda = Some(10.0);
    cfg.epochs = 200;
    cfg.base_lr = 3e-3;
    cfg.stop_at_dsc = Some(0.95);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let out = trainer.fit(&train, dir.path()).map_err(|e| e.to_string())?;
    let ck = load_checkpoint(&out.best_checkpoint).map_err(|e| e.to_string())?;
    let model = Model::from_store(&ck.header.config, ck.store).map_err(|e| e.to_string())?;
    let mut total = 0.0;
    for s in &train {
        total += mean_organ_dsc(&model.predict(s).map_err(|e| e.to_string())?, &s.label, 3);
    }
    let train_dsc = total / train.len() as f64;
    let epochs = out.history.len();
    let secs = t0.elapsed().as_secs_f64();
    check(train_dsc >= 0.95, || {
        format!("train DSC {train_dsc:.4} after {epochs} epochs")
    })?;
    check(epochs <= 200, || format!("{epochs} epochs"))?;
    check(secs <= 900.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "|F|=3, lambda=10: train DSC {train_dsc:.4} after {epochs} epochs ({secs:.0}s)"
    ))
}

// ---------------------------------------------------------------------------
// 7. low-data property
// ---------------------------------------------------------------------------

fn low_data() -> Outcome {
    let shape = [24, 24, 16];
    let all = phantoms(1000..1024, shape);
    let (train, test) = all.split_at(16);
    let classes: Vec<String> = ["background", "organ1", "organ2"].map(String::from).to_vec();
    let mut means = Vec::new();
    let mut lines = Vec::new();
    for lambda in [10.0, 0.0] {
        let mut sum = 0.0;
        for seed in 0..3u64 {
            let mut cfg = TrainConfig::desk(shape, 3);
            cfg.lambda = Some(lambda);
            cfg.epochs = 60;
            cfg.base_lr = 3e-3;
            cfg.seed = seed;
            cfg.label_fraction = 0.25;
            cfg.eval_every = cfg.epochs;
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let mut t = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
            t.fit(train, dir.path()).map_err(|e| e.to_string())?;
            let r = evaluate_model(&t.model, &cfg.method_label(), &classes, test).map_err(|e| e.to_string())?;
            sum += r.average_dsc;
            lines.push(format!("{}/s{seed}={:.3}", r.label, r.average_dsc));
        }
        means.push(sum / 3.0);
    }
    let (full, base) = (means[0], means[1]);
    check(full >= base - 0.01, || {
        format!("full {full:.4} < baseline {base:.4} - 0.01 [{}]", lines.join(", "))
    })?;
    Ok(format!(
        "25% labels, 3 seeds: full method {full:.4} vs lambda=0 baseline {base:.4} (reference gap at 10%: 0.431 -> 0.548, non-binding)"
    ))
}

// ---------------------------------------------------------------------------
// 8. inference parity after stripping heads
// ---------------------------------------------------------------------------

fn inference_parity() -> Outcome {
    let shape = [16, 16, 8];
    let train = phantoms(10..12, shape);
    let test = phantoms(20..23, shape);
    let mut cfg = TrainConfig::desk(shape, 3);
    cfg.epochs = 3;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let out = t.fit(&train, dir.path()).map_err(|e| e.to_string())?;
    let stripped = dir.path().join("stripped.ckpt");
    strip_training_only(&out.last_checkpoint, &stripped).map_err(|e| e.to_string())?;
    let full = load_checkpoint(&out.last_checkpoint).map_err(|e| e.to_string())?;
    let lean = load_checkpoint(&stripped).map_err(|e| e.to_string())?;
    let head_params = full.store.iter().filter(|(_, p)| p.name.starts_with("heads.")).count();
    check(head_params > 0, || "training checkpoint has no heads".into())?;
    check(lean.store.iter().all(|(_, p)| !p.training_only), || {
        "stripped checkpoint kept training-only tensors".into()
    })?;
    let a = Model::from_store(&full.header.config, full.store).map_err(|e| e.to_string())?;
    let b = Model::from_store(&lean.header.config, lean.store).map_err(|e| e.to_string())?;
    check(a.heads.is_some() && b.heads.is_none(), || {
        "heads presence not as expected".into()
    })?;
    for s in &test {
        let (sa, sb) = (
            a.score_map(s).map_err(|e| e.to_string())?,
            b.score_map(s).map_err(|e| e.to_string())?,
        );
        let same = sa.data().iter().zip(sb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        check(same && sa.shape() == sb.shape(), || {
            format!("score maps differ on {}", s.id)
        })?;
    }
    let names: Vec<String> = ["bg", "o1", "o2"].map(String::from).to_vec();
    let ra: MetricReport = evaluate_model(&a, "x", &names, &test).map_err(|e| e.to_string())?;
    let rb = evaluate_model(&b, "x", &names, &test).map_err(|e| e.to_string())?;
    check(ra == rb, || "reports differ".into())?;
    Ok(format!(
        "{head_params} head tensors removed; score maps bit-identical on {} volumes; reports equal",
        test.len()
    ))
}

// ---------------------------------------------------------------------------
// 9. ablation presets through the CLI
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_voxelsim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn ablation_plumbing() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let data = root.join("data");
    run_cli(&[
        "synth",
        "--out",
        s(&data),
        "--seed",
        "3",
        "--count",
        "4",
        "--test-count",
        "2",
        "--shape",
        "16,16,8",
    ])?;
    let manifest = data.join("manifest.json");
    let expected: [(&str, &[&str]); 3] = [
        ("table3", &["feature (1)", "feature (2)", "feature (3)"]),
        ("table4", &["feature (w/o weight)", "feature"]),
        ("table5", &["feature (64)", "feature (128)", "feature (256)"]),
    ];
    let mut counts = Vec::new();
    for (preset, labels) in expected {
        let out = root.join(preset);
        run_cli(&[
            "sweep",
            "--preset",
            preset,
            "--manifest",
            s(&manifest),
            "--desk",
            "--epochs",
            "1",
            "--out",
            s(&out),
        ])?;
        let summary = SweepSummary::load(&out.join("sweep_summary.json")).map_err(|e| e.to_string())?;
        let got: Vec<&str> = summary.entries.iter().map(|e| e.label.as_str()).collect();
        check(got == labels, || format!("{preset}: labels {got:?}"))?;
        let mut configs = Vec::new();
        for e in &summary.entries {
            let r = MetricReport::load(&e.report).map_err(|e| e.to_string())?;
            check(r.label == e.label, || {
                format!("{preset}: report {} labelled {}", e.report.display(), r.label)
            })?;
            let csv_path = e.report.with_extension("csv");
            let csv = std::fs::read_to_string(&csv_path).map_err(|e| e.to_string())?;
            let quoted = if e.label.contains(',') {
                format!("\"{}\"", e.label)
            } else {
                e.label.clone()
            };
            check(csv.lines().skip(1).all(|l| l.starts_with(&quoted)), || {
                format!("{preset}: csv rows mislabelled")
            })?;
            let ck = load_checkpoint(&e.checkpoint).map_err(|e| e.to_string())?;
            configs.push(ck.header.config);
        }
        let stems: HashSet<_> = summary.entries.iter().map(|e| &e.stem).collect();
        check(stems.len() == labels.len(), || {
            format!("{preset}: report stems collide")
        })?;
        let distinct = match preset {
            "table3" => configs.iter().map(|c| c.feature_layers).collect::<Vec<_>>() == [1, 2, 3],
            "table4" => configs.iter().map(|c| c.feature_loss.weighted).collect::<Vec<_>>() == [false, true],
            _ => configs.iter().map(|c| c.heads.hidden_dim).collect::<Vec<_>>() == [64, 128, 256],
        };
        check(distinct, || {
            format!("{preset}: trained configurations do not follow the preset")
        })?;
        counts.push(format!("{preset}: {}", labels.len()));
    }
    Ok(format!("one sweep command per preset, reports {}", counts.join(", ")))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 loss oracles", loss_oracles),
        ("2 pair-sum equivalence", pair_equivalence),
        ("3 stop-gradient contract", stop_gradient_contract),
        ("4 sampler invariants", sampler_invariants),
        ("5 metric oracles", metric_oracles),
        ("6 overfit run", overfit),
        ("7 low-data property", low_data),
        ("8 inference parity", inference_parity),
        ("9 ablation plumbing", ablation_plumbing),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|k| name.contains(k.as_str())) {
            continue;
        }
        match std::panic::catch_unwind(f) {
            Ok(Ok(msg)) => println!("PASS criterion {name}: {msg}"),
            Ok(Err(msg)) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL criterion {name}: panicked");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
