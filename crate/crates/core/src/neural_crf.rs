//! Neural window fully-connected CRF optimisation.
//!
//! One optimisation pass takes an image feature map `F` (`H×W×C`) and a
//! prediction `X` (`H×W×C_x`) and produces an updated prediction `X'`:
//!
//! * unary potential: a 3×3 convolution over `[F, X]`;
//! * pairwise potential: per window and head,
//!   `softmax(Q·Kᵀ/√d_h + P) · X_h`, with `Q`, `K` projected from
//!   (layer-normalised) `F`, `P` a relative position bias, and `X_h` the
//!   head's `d_h`-channel slice of `X` (no value projection);
//! * the two potentials are concatenated per node and fed to a two-layer
//!   network (`2C_x → r·C_x → C_x`, GELU between).
//!
//! A [`NeuralCrfBlock`] chains two passes with independent parameters, the
//! first over regular windows and the second over shifted windows.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::partition::{partition_windows, WindowPartition};
use crate::tape::{Tape, Var, ZERO_SOURCE};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CrfOptimConfig {
    /// Channels of the feature map `F`.
    pub feature_channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Window size `N`.
    pub window_size: usize,
    /// Hidden width of the optimisation network as a multiple of `C_x`.
    pub mlp_ratio: usize,
    /// Divide attention logits by `√d_h`.
    pub scale_logits: bool,
    /// Layer-normalise `F` before the query/key projections.
    pub qk_layer_norm: bool,
}

impl CrfOptimConfig {
    /// Channels of the prediction `X`, `heads · d_h`.
    pub fn prediction_channels(&self) -> usize {
        self.heads * self.head_dim
    }

    fn logit_scale(&self) -> f64 {
        if self.scale_logits {
            1.0 / libm::sqrt(self.head_dim as f64)
        } else {
            1.0
        }
    }
}

/// Parameters of one CRF optimisation pass.
#[derive(Clone, Debug)]
pub struct CrfOptimization {
    pub config: CrfOptimConfig,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    /// `C × (heads·d_h)`; head `h` owns columns `h·d_h .. (h+1)·d_h`.
    pub query: ParamId,
    pub key: ParamId,
    /// `(2N−1)² × heads`.
    pub position_bias: ParamId,
    pub unary_kernel: ParamId,
    pub unary_bias: ParamId,
    pub hidden_weight: ParamId,
    pub hidden_bias: ParamId,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

/// Counters from one attention stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionStats {
    pub windows: usize,
    /// Logit entries evaluated per head (`k·N⁴`).
    pub logits_per_head: usize,
}

/// Table row of every `(a, b)` slot pair of an `N×N` window, row-major over
/// `N²×N²`: `(Δy + N − 1)·(2N − 1) + (Δx + N − 1)` with `(Δy, Δx)` the offset
/// of `b` from `a`.
pub fn relative_bias_rows(n: usize) -> Vec<usize> {
    let n2 = n * n;
    let span = 2 * n - 1;
    let mut rows = Vec::with_capacity(n2 * n2);
    for a in 0..n2 {
        let (ay, ax) = (a / n, a % n);
        for b in 0..n2 {
            let (by, bx) = (b / n, b % n);
            rows.push((by + n - 1 - ay) * span + (bx + n - 1 - ax));
        }
    }
    rows
}

/// Expands a `(2N−1)²×heads` bias table into one `N²×N²` bias per head.
pub fn relative_bias_lookup(tape: &mut Tape, table: Var, n: usize) -> Result<Vec<Var>> {
    let span = 2 * n - 1;
    let heads = match *tape.value(table).extents() {
        [r, h] if r == span * span => h,
        ref e => return Err(shape_err!("bias table {e:?} needs {} rows for window size {n}", span * span)),
    };
    let rows = relative_bias_rows(n);
    let n2 = n * n;
    (0..heads)
        .map(|h| {
            let sources = rows.iter().map(|&r| r * heads + h).collect();
            tape.gather(table, sources, &[n2, n2])
        })
        .collect()
}

/// Multi-head attention message passing inside one window.
///
/// `q`, `k` are `n×(heads·d_h)`, `x` is `n×(heads·d_h)`, `biases` holds one
/// `n×n` bias per head and `mask` is the row-major `n×n` attention mask.
/// Returns the `n×(heads·d_h)` messages.
#[allow(clippy::too_many_arguments)]
pub fn window_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    x: Var,
    biases: &[Var],
    mask: &[bool],
    head_dim: usize,
    logit_scale: f64,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(biases.len());
    for (h, &bias) in biases.iter().enumerate() {
        let weights = head_weights(tape, q, k, h, bias, mask, head_dim, logit_scale)?;
        let xh = tape.slice_last(x, h * head_dim, head_dim)?;
        outs.push(tape.matmul(weights, xh)?);
    }
    tape.concat_last(&outs)
}

#[allow(clippy::too_many_arguments)]
fn head_weights(tape: &mut Tape, q: Var, k: Var, h: usize, bias: Var, mask: &[bool], head_dim: usize, logit_scale: f64) -> Result<Var> {
    let qh = tape.slice_last(q, h * head_dim, head_dim)?;
    let kh = tape.slice_last(k, h * head_dim, head_dim)?;
    let kt = tape.transpose(kh)?;
    let logits = tape.matmul(qh, kt)?;
    let logits = tape.scale(logits, logit_scale);
    let logits = tape.add(logits, bias)?;
    tape.softmax_rows(logits, Some(mask))
}

/// Flat gather sources of the `slots` rows of an `HW×cols` matrix; empty
/// slots read zeros.
fn window_rows(slots: &[Option<usize>], cols: usize) -> Vec<usize> {
    slots
        .iter()
        .flat_map(|s| (0..cols).map(move |j| s.map_or(ZERO_SOURCE, |node| node * cols + j)))
        .collect()
}

fn fan_in_tensor(init: &mut Initializer, extents: &[usize], fan_in: usize) -> Tensor {
    init.fan_in(extents, fan_in)
}

impl CrfOptimization {
    pub fn new(store: &mut ParamStore, prefix: &str, config: CrfOptimConfig, init: &mut Initializer) -> Self {
        let c = config.feature_channels;
        let cx = config.prediction_channels();
        let hidden = config.mlp_ratio * cx;
        let span = 2 * config.window_size - 1;
        let mut add = |name: &str, t: Tensor| store.insert(format!("{prefix}.{name}"), t);
        CrfOptimization {
            norm_gain: add("norm.gain", Tensor::full(&[c], 1.0)),
            norm_bias: add("norm.bias", Tensor::zeros(&[c])),
            query: add("query", fan_in_tensor(init, &[c, cx], c)),
            key: add("key", fan_in_tensor(init, &[c, cx], c)),
            position_bias: add("position_bias", init.uniform(&[span * span, config.heads], 0.02)),
            unary_kernel: add("unary.kernel", fan_in_tensor(init, &[3, 3, c + cx, cx], 9 * (c + cx))),
            unary_bias: add("unary.bias", fan_in_tensor(init, &[cx], 9 * (c + cx))),
            hidden_weight: add("optim.hidden.weight", fan_in_tensor(init, &[2 * cx, hidden], 2 * cx)),
            hidden_bias: add("optim.hidden.bias", fan_in_tensor(init, &[hidden], 2 * cx)),
            out_weight: add("optim.out.weight", fan_in_tensor(init, &[hidden, cx], hidden)),
            out_bias: add("optim.out.bias", fan_in_tensor(init, &[cx], hidden)),
            config,
        }
    }

    fn check_inputs(&self, tape: &Tape, features: Var, prediction: Var) -> Result<(usize, usize)> {
        let f = tape.value(features).extents();
        let x = tape.value(prediction).extents();
        let cfg = &self.config;
        match (f, x) {
            ([h, w, c], [h2, w2, cx]) if h == h2 && w == w2 && *c == cfg.feature_channels && *cx == cfg.prediction_channels() => {
                Ok((*h, *w))
            }
            _ => Err(shape_err!(
                "CRF inputs: features {f:?} and prediction {x:?} must be H×W×{} and H×W×{}",
                cfg.feature_channels,
                cfg.prediction_channels()
            )),
        }
    }

    /// Unary potential map `H×W×C_x`.
    pub fn unary(&self, tape: &mut Tape, p: &Bound, features: Var, prediction: Var) -> Result<Var> {
        self.check_inputs(tape, features, prediction)?;
        let joined = tape.concat_last(&[features, prediction])?;
        tape.conv2d(joined, p.var(self.unary_kernel), p.var(self.unary_bias))
    }

    /// Queries and keys for every node, `HW × (heads·d_h)` each.
    fn project(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<(Var, Var)> {
        let t = tape.value(features);
        let (rows, c) = (t.len() / self.config.feature_channels, self.config.feature_channels);
        let flat = tape.reshape(features, &[rows, c])?;
        let normed = if self.config.qk_layer_norm {
            tape.layer_norm(flat, p.var(self.norm_gain), p.var(self.norm_bias))?
        } else {
            flat
        };
        let q = tape.matmul(normed, p.var(self.query))?;
        let k = tape.matmul(normed, p.var(self.key))?;
        Ok((q, k))
    }

    /// Attention messages for one window given its already flattened
    /// features `n×C` and prediction `n×C_x`.
    pub fn attention_pairwise(
        &self,
        tape: &mut Tape,
        p: &Bound,
        window_features: Var,
        window_prediction: Var,
        biases: &[Var],
        mask: &[bool],
    ) -> Result<Var> {
        let (q, k) = self.project(tape, p, window_features)?;
        let cfg = &self.config;
        window_attention(tape, q, k, window_prediction, biases, mask, cfg.head_dim, cfg.logit_scale())
    }

    /// Pairwise potential map `HW×C_x` over all windows of `partition`.
    pub fn pairwise(
        &self,
        tape: &mut Tape,
        p: &Bound,
        features: Var,
        prediction: Var,
        partition: &WindowPartition,
    ) -> Result<(Var, AttentionStats)> {
        let (h, w) = self.check_inputs(tape, features, prediction)?;
        if partition.grid() != (h, w) || partition.window_size() != self.config.window_size {
            return Err(shape_err!(
                "partition {:?} with window {} does not match a {h}×{w} grid with window {}",
                partition.grid(),
                partition.window_size(),
                self.config.window_size
            ));
        }
        let cfg = &self.config;
        let cx = cfg.prediction_channels();
        let (q, k) = self.project(tape, p, features)?;
        let x = tape.reshape(prediction, &[h * w, cx])?;
        let biases = relative_bias_lookup(tape, p.var(self.position_bias), cfg.window_size)?;
        let n2 = partition.slots_per_window();
        let mut outs = Vec::with_capacity(partition.window_count());
        let mut stats = AttentionStats::default();
        for win in 0..partition.window_count() {
            let slots = partition.window_slots(win);
            if slots.iter().all(Option::is_none) {
                return Err(Error::DegenerateRow { row: win });
            }
            let rows = window_rows(slots, cx);
            let qw = tape.gather(q, rows.clone(), &[n2, cx])?;
            let kw = tape.gather(k, rows.clone(), &[n2, cx])?;
            let xw = tape.gather(x, rows, &[n2, cx])?;
            let mask = partition.pair_mask(win);
            outs.push(window_attention(tape, qw, kw, xw, &biases, &mask, cfg.head_dim, cfg.logit_scale())?);
            stats.windows += 1;
            stats.logits_per_head += n2 * n2;
        }
        let stacked = tape.concat_rows(&outs)?;
        let mut back = Vec::with_capacity(h * w * cx);
        for y in 0..h {
            for xx in 0..w {
                let (win, slot) = partition.locate(y, xx);
                let row = win * n2 + slot;
                back.extend((0..cx).map(|j| row * cx + j));
            }
        }
        Ok((tape.gather(stacked, back, &[h * w, cx])?, stats))
    }

    /// Attention weights of every window and head, each `N²×N²` over the
    /// window's slots (rows are receivers).
    pub fn attention_weights(&self, tape: &mut Tape, p: &Bound, features: Var, partition: &WindowPartition) -> Result<Vec<Vec<Tensor>>> {
        let cfg = &self.config;
        let [h, w, c] = *tape.value(features).extents() else {
            return Err(shape_err!("attention weights: features must be H×W×C"));
        };
        if c != cfg.feature_channels || partition.grid() != (h, w) || partition.window_size() != cfg.window_size {
            return Err(shape_err!("attention weights: features or partition do not match the configuration"));
        }
        let cx = cfg.prediction_channels();
        let (q, k) = self.project(tape, p, features)?;
        let biases = relative_bias_lookup(tape, p.var(self.position_bias), cfg.window_size)?;
        let n2 = partition.slots_per_window();
        let mut all = Vec::with_capacity(partition.window_count());
        for win in 0..partition.window_count() {
            let rows = window_rows(partition.window_slots(win), cx);
            let qw = tape.gather(q, rows.clone(), &[n2, cx])?;
            let kw = tape.gather(k, rows, &[n2, cx])?;
            let mask = partition.pair_mask(win);
            let mut heads = Vec::with_capacity(cfg.heads);
            for (head, &bias) in biases.iter().enumerate() {
                let wv = head_weights(tape, qw, kw, head, bias, &mask, cfg.head_dim, cfg.logit_scale())?;
                heads.push(tape.value(wv).clone());
            }
            all.push(heads);
        }
        Ok(all)
    }

    /// One optimisation pass: `X' = MLP([ψ_u, Σψ_p])`, `H×W×C_x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var, prediction: Var, partition: &WindowPartition) -> Result<Var> {
        let (h, w) = self.check_inputs(tape, features, prediction)?;
        let cx = self.config.prediction_channels();
        let unary = self.unary(tape, p, features, prediction)?;
        let unary = tape.reshape(unary, &[h * w, cx])?;
        let (pairwise, _) = self.pairwise(tape, p, features, prediction, partition)?;
        let energy = tape.concat_last(&[unary, pairwise])?;
        let hidden = tape.matmul(energy, p.var(self.hidden_weight))?;
        let hidden = tape.add_bias(hidden, p.var(self.hidden_bias))?;
        let hidden = tape.gelu(hidden);
        let out = tape.matmul(hidden, p.var(self.out_weight))?;
        let out = tape.add_bias(out, p.var(self.out_bias))?;
        tape.reshape(out, &[h, w, cx])
    }
}

/// Two successive optimisations: regular windows, then shifted windows.
#[derive(Clone, Debug)]
pub struct NeuralCrfBlock {
    pub regular: CrfOptimization,
    pub shifted: CrfOptimization,
}

impl NeuralCrfBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, config: CrfOptimConfig, init: &mut Initializer) -> Self {
        let regular = CrfOptimization::new(store, &format!("{prefix}.regular"), config.clone(), init);
        let shifted = CrfOptimization::new(store, &format!("{prefix}.shifted"), config, init);
        NeuralCrfBlock { regular, shifted }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var, prediction: Var) -> Result<Var> {
        let [h, w, _] = *tape.value(features).extents() else {
            return Err(shape_err!("CRF block: features must be H×W×C"));
        };
        let n = self.regular.config.window_size;
        let plain = partition_windows(h, w, n, false)?;
        let shifted = partition_windows(h, w, n, true)?;
        let x = self.regular.forward(tape, p, features, prediction, &plain)?;
        self.shifted.forward(tape, p, features, x, &shifted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn config(c: usize, heads: usize, dh: usize, n: usize) -> CrfOptimConfig {
        CrfOptimConfig {
            feature_channels: c,
            heads,
            head_dim: dh,
            window_size: n,
            mlp_ratio: 4,
            scale_logits: true,
            qk_layer_norm: true,
        }
    }

    #[test]
    fn bias_lookup_examples() {
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::zeros(&[9, 2]));
        for b in relative_bias_lookup(&mut tape, zero, 2).unwrap() {
            assert!(tape.value(b).data().iter().all(|&v| v == 0.0));
        }
        let single = tape.leaf(Tensor::new(&[1, 1], vec![0.7]).unwrap());
        let p = relative_bias_lookup(&mut tape, single, 1).unwrap();
        assert_eq!(tape.value(p[0]).data(), &[0.7]);

        // N = 2: pairs with the same offset read the same row; (0,0)->(1,1)
        // and (0,1)->(1,2) cannot both exist in a 2×2 window, but (0,0)->(1,1)
        // is the only pair with offset (1,1) and maps to the last table row.
        let rows = relative_bias_rows(2);
        assert_eq!(rows[3], 8);
        assert_eq!(rows[3 * 4], 0);
        // (0,0)->(0,1) and (1,0)->(1,1) share offset (0,1).
        assert_eq!(rows[1], rows[2 * 4 + 3]);

        let bad = tape.leaf(Tensor::zeros(&[8, 1]));
        assert!(matches!(relative_bias_lookup(&mut tape, bad, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn two_node_window_closed_form() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap());
        let k = tape.leaf(Tensor::new(&[2, 1], vec![0.0, libm::log(3.0)]).unwrap());
        let x = tape.leaf(Tensor::new(&[2, 1], vec![1.0, 5.0]).unwrap());
        let bias = tape.leaf(Tensor::zeros(&[2, 2]));
        let out = window_attention(&mut tape, q, k, x, &[bias], &[true; 4], 1, 1.0).unwrap();
        assert!((tape.value(out).data()[0] - 4.0).abs() < 1e-14);
        // Row 1 has q = 0: uniform weights, mean 3.
        assert!((tape.value(out).data()[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn degenerate_window_is_rejected() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[2, 1]));
        let bias = tape.leaf(Tensor::zeros(&[2, 2]));
        let err = window_attention(&mut tape, z, z, z, &[bias], &[false; 4], 1, 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { .. }));
    }

    #[test]
    fn output_extents_and_stats() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(3);
        let optim = CrfOptimization::new(&mut store, "b", config(3, 2, 2, 2), &mut init);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut data = Initializer::new(9);
        let f = tape.leaf(data.uniform(&[4, 6, 3], 1.0));
        let x = tape.leaf(data.uniform(&[4, 6, 4], 1.0));
        let part = partition_windows(4, 6, 2, false).unwrap();
        let (pair, stats) = optim.pairwise(&mut tape, &p, f, x, &part).unwrap();
        assert_eq!(tape.value(pair).extents(), &[24, 4]);
        assert_eq!(stats.windows, 6);
        assert_eq!(stats.logits_per_head, 6 * 16);
        let out = optim.forward(&mut tape, &p, f, x, &part).unwrap();
        assert_eq!(tape.value(out).extents(), &[4, 6, 4]);

        let wrong = partition_windows(4, 6, 3, false).unwrap();
        assert!(optim.pairwise(&mut tape, &p, f, x, &wrong).is_err());
    }
}
