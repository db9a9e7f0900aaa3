//! Independent reference computations and property checks, shared by the
//! test suite and the `check` command.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::depth_net::{DepthNet, ModelConfig, PATCH_FACTORS};
use crate::error::{Error, Result};
use crate::gradcheck::{check, DEFAULT_STEP};
use crate::loss::{silog_loss, LossConfig};
use crate::neural_crf::{CrfOptimConfig, CrfOptimization, NeuralCrfBlock};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::partition::{partition_windows, WindowPartition};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Attention messages `HW×C_x` of `stage` computed directly over all node
/// pairs, for a grid that fits inside one window.
pub fn dense_attention(features: &Tensor, prediction: &Tensor, store: &ParamStore, stage: &CrfOptimization) -> Result<Tensor> {
    let cfg = &stage.config;
    let (n, heads, dh) = (cfg.window_size, cfg.heads, cfg.head_dim);
    let cx = cfg.prediction_channels();
    let [h, w, c] = *features.extents() else {
        return Err(Error::Shape(alloc::format!("features {:?} must be H×W×C", features.extents())));
    };
    if h > n || w > n || c != cfg.feature_channels || prediction.extents() != [h, w, cx] {
        return Err(Error::Contract("dense attention needs a grid inside one window and matching channels".into()));
    }
    let nodes = h * w;
    let f = features.data();
    let x = prediction.data();
    let (gain, beta) = (store.get(stage.norm_gain).data(), store.get(stage.norm_bias).data());
    let (wq, wk) = (store.get(stage.query).data(), store.get(stage.key).data());
    let table = store.get(stage.position_bias).data();

    let mut q = vec![0.0; nodes * cx];
    let mut k = vec![0.0; nodes * cx];
    for i in 0..nodes {
        let row = &f[i * c..(i + 1) * c];
        let normed: Vec<f64> = if cfg.qk_layer_norm {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / libm::sqrt(var + 1e-5);
            (0..c).map(|j| (row[j] - mean) * inv * gain[j] + beta[j]).collect()
        } else {
            row.to_vec()
        };
        for o in 0..cx {
            q[i * cx + o] = (0..c).map(|j| normed[j] * wq[j * cx + o]).sum();
            k[i * cx + o] = (0..c).map(|j| normed[j] * wk[j * cx + o]).sum();
        }
    }

    let scale = if cfg.scale_logits { 1.0 / libm::sqrt(dh as f64) } else { 1.0 };
    let span = 2 * n - 1;
    let mut out = vec![0.0; nodes * cx];
    for head in 0..heads {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..nodes {
            let (yi, xi) = (i / w, i % w);
            let logits: Vec<f64> = (0..nodes)
                .map(|j| {
                    let (yj, xj) = (j / w, j % w);
                    let dot: f64 = cols.clone().map(|d| q[i * cx + d] * k[j * cx + d]).sum();
                    let r = (yj + n - 1 - yi) * span + (xj + n - 1 - xi);
                    dot * scale + table[r * heads + head]
                })
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| libm::exp(l - top)).collect();
            let z: f64 = e.iter().sum();
            for d in cols.clone() {
                out[i * cx + d] = (0..nodes).map(|j| e[j] / z * x[j * cx + d]).sum();
            }
        }
    }
    Tensor::new(&[nodes, cx], out)
}

fn random_stage(n: usize, seed: u64) -> (ParamStore, CrfOptimization) {
    let cfg = CrfOptimConfig { feature_channels: 5, heads: 2, head_dim: 3, window_size: n, mlp_ratio: 4, scale_logits: true, qk_layer_norm: true };
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let stage = CrfOptimization::new(&mut store, "check", cfg, &mut init);
    // Wider spread than the initial values so every term matters.
    for id in [stage.position_bias, stage.norm_gain, stage.norm_bias] {
        let extents = store.get(id).extents().to_vec();
        *store.get_mut(id) = init.uniform(&extents, 1.0);
    }
    (store, stage)
}

/// Largest absolute difference between the windowed attention stage and
/// [`dense_attention`] on a random `rows×cols` grid with one `N×N` window.
pub fn dense_equivalence(rows: usize, cols: usize, n: usize, seed: u64) -> Result<f64> {
    if rows > n || cols > n {
        return Err(Error::Contract(alloc::format!("dense equivalence needs the {rows}×{cols} grid inside one {n}×{n} window")));
    }
    let (store, stage) = random_stage(n, seed);
    let mut data = Initializer::new(seed ^ 0x5eed);
    let f = data.uniform(&[rows, cols, stage.config.feature_channels], 1.0);
    let x = data.uniform(&[rows, cols, stage.config.prediction_channels()], 1.0);
    let reference = dense_attention(&f, &x, &store, &stage)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let fv = tape.leaf(f);
    let xv = tape.leaf(x);
    let part = partition_windows(rows, cols, n, false)?;
    let (pair, _) = stage.pairwise(&mut tape, &p, fv, xv, &part)?;
    tape.value(pair)
        .max_abs_diff(&reference)
        .ok_or_else(|| Error::Shape("windowed and dense attention differ in shape".into()))
}

/// Ordered pairs of distinct nodes that share a window region of
/// `partition`, or all ordered pairs when `partition` is `None`, counted by
/// enumeration.
pub fn brute_force_edges(rows: usize, cols: usize, partition: Option<&WindowPartition>) -> u64 {
    let nodes: Vec<(usize, usize)> = (0..rows).flat_map(|y| (0..cols).map(move |x| (y, x))).collect();
    let mut count = 0;
    for &a in &nodes {
        for &b in &nodes {
            if a != b && partition.is_none_or(|p| p.connected(a, b)) {
                count += 1;
            }
        }
    }
    count
}

/// Outcome of the shift-connectivity property.
#[derive(Clone, Debug, PartialEq)]
pub struct Connectivity {
    /// 4-adjacent node pairs examined.
    pub pairs: usize,
    /// Smallest attention weight, over heads and both directions, that a
    /// pair receives in the partition connecting it.
    pub min_weight: f64,
    /// Pairs that share no window or receive zero weight.
    pub failures: Vec<((usize, usize), (usize, usize))>,
}

/// Checks that every 4-adjacent pair of a `rows×cols` grid shares a window
/// in the regular or shifted partition and attends to each other there under
/// random parameters.
pub fn shift_connectivity(rows: usize, cols: usize, n: usize, seed: u64) -> Result<Connectivity> {
    let (store, stage) = random_stage(n, seed);
    let mut data = Initializer::new(seed ^ 0xc0ffee);
    let f = data.uniform(&[rows, cols, stage.config.feature_channels], 1.0);
    let parts = [partition_windows(rows, cols, n, false)?, partition_windows(rows, cols, n, true)?];
    let mut weights = Vec::with_capacity(2);
    for part in &parts {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let fv = tape.leaf(f.clone());
        weights.push(stage.attention_weights(&mut tape, &p, fv, part)?);
    }
    let n2 = n * n;
    let mut result = Connectivity { pairs: 0, min_weight: f64::INFINITY, failures: Vec::new() };
    for y in 0..rows {
        for x in 0..cols {
            for b in [(y, x + 1), (y + 1, x)] {
                if b.0 >= rows || b.1 >= cols {
                    continue;
                }
                let a = (y, x);
                result.pairs += 1;
                let mut best: Option<f64> = None;
                for (part, wts) in parts.iter().zip(&weights) {
                    if !part.connected(a, b) {
                        continue;
                    }
                    let (win, sa) = part.locate(a.0, a.1);
                    let (_, sb) = part.locate(b.0, b.1);
                    let weakest = wts[win]
                        .iter()
                        .flat_map(|m| [m.data()[sa * n2 + sb], m.data()[sb * n2 + sa]])
                        .fold(f64::INFINITY, f64::min);
                    best = Some(best.map_or(weakest, |v| v.max(weakest)));
                }
                match best {
                    Some(wt) if wt > 0.0 => result.min_weight = result.min_weight.min(wt),
                    _ => result.failures.push((a, b)),
                }
            }
        }
    }
    Ok(result)
}

/// Per-tensor worst relative gradient error.
pub type NamedErrors = Vec<(String, f64)>;

/// Largest error in a [`NamedErrors`] list.
pub fn worst(errors: &NamedErrors) -> f64 {
    errors.iter().map(|e| e.1).fold(0.0, f64::max)
}

fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let extents = tape.value(v).extents().to_vec();
    let r = tape.leaf(Initializer::new(seed).uniform(&extents, 1.0));
    let prod = tape.mul(v, r)?;
    Ok(tape.sum(prod))
}

/// Finite-difference check of the parameters `checked` of `store` plus the
/// `extra` input tensors; parameters outside `checked` are held fixed.
fn param_check(
    store: &ParamStore,
    checked: &[ParamId],
    extra: Vec<(String, Tensor)>,
    limit: Option<usize>,
    f: impl Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
) -> Result<NamedErrors> {
    let mut names: Vec<String> = checked.iter().map(|&id| String::from(store.name(id))).collect();
    let mut inputs: Vec<Tensor> = checked.iter().map(|&id| store.get(id).clone()).collect();
    for (name, t) in extra {
        names.push(name);
        inputs.push(t);
    }
    let report = check(
        &inputs,
        |tape, vars| {
            let all = store
                .ids()
                .map(|id| match checked.iter().position(|&c| c == id) {
                    Some(i) => vars[i],
                    None => tape.leaf(store.get(id).clone()),
                })
                .collect();
            f(tape, &Bound::from_vars(all), &vars[checked.len()..])
        },
        DEFAULT_STEP,
        limit,
    )?;
    Ok(names.into_iter().zip(report.max_error).collect())
}

/// Gradient check of every parameter tensor of one regular+shifted CRF
/// block on a 4×5 grid with `N = 3`, plus its two inputs.
pub fn crf_block_gradients(seed: u64, limit: Option<usize>) -> Result<NamedErrors> {
    let cfg = CrfOptimConfig { feature_channels: 3, heads: 2, head_dim: 2, window_size: 3, mlp_ratio: 2, scale_logits: true, qk_layer_norm: true };
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let block = NeuralCrfBlock::new(&mut store, "block", cfg, &mut init);
    let bias_ids = [block.regular.position_bias, block.shifted.position_bias];
    for id in bias_ids {
        let e = store.get(id).extents().to_vec();
        *store.get_mut(id) = init.uniform(&e, 0.5);
    }
    let ids: Vec<ParamId> = store.ids().collect();
    let extra = vec![
        (String::from("features"), init.uniform(&[4, 5, 3], 1.0)),
        (String::from("prediction"), init.uniform(&[4, 5, 4], 1.0)),
    ];
    param_check(&store, &ids, extra, limit, |tape, p, v| {
        let out = block.forward(tape, p, v[0], v[1])?;
        weighted_sum(tape, out, seed ^ 1)
    })
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        window_size: 2,
        heads: [2, 1, 1, 1],
        head_dim: 4,
        encoder_widths: [3, 4, 4, 5],
        ppm_scales: vec![1, 2, 3],
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

/// Gradient check of the pyramid pooling head on a 5×5 top feature map
/// with pooling scales 1, 2 and 3.
pub fn ppm_gradients(seed: u64, limit: Option<usize>) -> Result<NamedErrors> {
    let mut cfg = tiny_config();
    cfg.seed = seed;
    let (net, store) = DepthNet::new(cfg.clone())?;
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with("ppm.")).collect();
    let top = Initializer::new(seed ^ 7).uniform(&[5, 5, cfg.encoder_widths[3]], 1.0);
    param_check(&store, &ids, vec![(String::from("top"), top)], limit, |tape, p, v| {
        let out = net.ppm_head(tape, p, v[0])?;
        weighted_sum(tape, out, seed ^ 2)
    })
}

/// Gradient check of the scale-invariant loss with respect to a random
/// positive prediction, with some pixels masked out.
pub fn silog_gradients(seed: u64) -> Result<NamedErrors> {
    let mut init = Initializer::new(seed);
    let pred = init.uniform(&[4, 6], 1.0).map(|v| 1.5 + v);
    let target = init.uniform(&[4, 6], 1.0).map(|v| 2.0 + v);
    let valid: Vec<bool> = (0..24).map(|i| i % 5 != 3).collect();
    let cfg = LossConfig::default();
    let report = check(&[pred], |tape, v| silog_loss(tape, v[0], &target, &valid, &cfg), DEFAULT_STEP, None)?;
    Ok(vec![(String::from("prediction"), report.max_error[0])])
}

/// Gradient check of image → depth → loss through the whole network on a
/// 32×32 input, probing at most `limit` entries per tensor.
pub fn end_to_end_gradients(seed: u64, limit: Option<usize>) -> Result<NamedErrors> {
    let mut cfg = tiny_config();
    cfg.seed = seed;
    cfg.fit_ppm_scales(32, 32);
    let (net, store) = DepthNet::new(cfg)?;
    let mut init = Initializer::new(seed ^ 11);
    let image = init.uniform(&[32, 32, 3], 0.5).map(|v| 0.5 + v);
    let side = 32 / PATCH_FACTORS[0];
    let target = init.uniform(&[side, side], 4.0).map(|v| 5.0 + v);
    let valid = vec![true; side * side];
    let ids: Vec<ParamId> = store.ids().collect();
    let loss = LossConfig::default();
    param_check(&store, &ids, vec![(String::from("image"), image)], limit, |tape, p, v| {
        let depth = net.forward(tape, p, v[0])?;
        silog_loss(tape, depth, &target, &valid, &loss)
    })
}
