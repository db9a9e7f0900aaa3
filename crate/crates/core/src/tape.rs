//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every differentiable operation is a method on [`Tape`] that evaluates
//! eagerly, records its inputs (and any saved activations) and returns a
//! [`Var`] handle. [`Tape::backward`] walks the record in exact reverse order
//! and accumulates gradients into every node reachable from the loss.
//!
//! Index-remapping operations (transpose, pixel rearrangement, window row
//! gathers, relative-bias lookup, channel slices, nearest upsampling) are all
//! expressed through one gather primitive whose adjoint is a scatter-add.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`]. The identifier is unique within
/// its tape and increases with execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Sentinel in gather index lists: the output element is a constant zero.
pub const ZERO_SOURCE: usize = usize::MAX;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Reshape(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Conv2d { input: Var, kernel: Var, bias: Var },
    Gather { input: Var, sources: Vec<usize> },
    AvgPool { input: Var, size: usize },
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    LayerNorm { input: Var, gain: Var, bias: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Silog { pred: Var, coeffs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations. One tape serves one forward and
/// backward pass; it is single-owner and not shared across threads.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_extents(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.extents() != b.extents() {
        return Err(shape_err!("{op}: extents {:?} and {:?} differ", a.extents(), b.extents()));
    }
    Ok(())
}

fn matrix_dims(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.extents() {
        [r, c] => Ok((r, c)),
        ref e => Err(shape_err!("{op}: expected a matrix, got extents {e:?}")),
    }
}

fn image_dims(op: &str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.extents() {
        [h, w, c] => Ok((h, w, c)),
        ref e => Err(shape_err!("{op}: expected an H×W×C map, got extents {e:?}")),
    }
}

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gaussian_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI)
}

/// Bucket `[start, end)` of adaptive pooling cell `i` out of `s` over length `n`.
pub(crate) fn pool_bucket(i: usize, s: usize, n: usize) -> (usize, usize) {
    (i * n / s, (i + 1) * n / s)
}

fn im2col(input: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut cols = vec![0.0; h * w * 9 * c];
    for y in 0..h {
        for x in 0..w {
            let row = &mut cols[(y * w + x) * 9 * c..(y * w + x + 1) * 9 * c];
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = x as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let tap = ky * 3 + kx;
                    row[tap * c..(tap + 1) * c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], h: usize, w: usize, c: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let row = &cols[(y * w + x) * 9 * c..(y * w + x + 1) * 9 * c];
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = x as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let tap = ky * 3 + kx;
                    for (o, v) in out[dst..dst + c].iter_mut().zip(&row[tap * c..(tap + 1) * c]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Number of recorded values.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records an input value (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`; zero when `v` was never reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.grads[v.0] {
            Some(g) => Tensor::new(value.extents(), g.clone()).expect("gradient mirrors value"),
            None => Tensor::zeros(value.extents()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err!("matmul: inner extents differ, left is {m}×{k}, right is {k2}×{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_extents(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.extents(), data)?;
        Ok(self.push(out, op))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Adds a `[C]` bias along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, c) = ta.rows_cols();
        if tb.len() != c || tb.rank() != 1 {
            return Err(shape_err!("add_bias: bias {:?} does not match last extent {c}", tb.extents()));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn reshape(&mut self, a: Var, extents: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(extents)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Gaussian error linear unit, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * erf_cdf(x));
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + libm::exp(-x)));
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax of an `r×c` matrix. `mask` (row-major, `r·c` flags)
    /// excludes entries; excluded positions come out exactly zero.
    pub fn softmax_rows(&mut self, logits: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = matrix_dims("softmax_rows", t)?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(shape_err!("softmax_rows: mask has {} entries for a {r}×{c} matrix", m.len()));
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let max = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            let dst = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for j in (0..c).filter(|&j| keep(j)) {
                dst[j] = libm::exp(row[j] - max);
                total += dst[j];
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::new(&[r, c], out)?;
        Ok(self.push(out, Op::Softmax(logits)))
    }

    /// 3×3 convolution, stride 1, zero padding 1, over an `H×W×Cin` map with a
    /// `3×3×Cin×Cout` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (h, w, cin) = image_dims("conv2d", self.value(input))?;
        let (kt, bt) = (self.value(kernel), self.value(bias));
        let cout = match *kt.extents() {
            [3, 3, kc, co] if kc == cin => co,
            ref e => return Err(shape_err!("conv2d: kernel {e:?} does not fit input channels {cin}")),
        };
        if bt.extents() != [cout] {
            return Err(shape_err!("conv2d: bias {:?} does not match {cout} output channels", bt.extents()));
        }
        let cols = im2col(self.value(input).data(), h, w, cin);
        let mut out = vec![0.0; h * w * cout];
        gemm(h * w, 9 * cin, cout, &cols, false, kt.data(), false, &mut out, false);
        for row in out.chunks_mut(cout) {
            row.iter_mut().zip(bt.data()).for_each(|(o, b)| *o += b);
        }
        let out = Tensor::new(&[h, w, cout], out)?;
        Ok(self.push(out, Op::Conv2d { input, kernel, bias }))
    }

    /// Generic differentiable gather: `out[i] = input[sources[i]]`, or zero
    /// where `sources[i] == ZERO_SOURCE`.
    pub fn gather(&mut self, input: Var, sources: Vec<usize>, extents: &[usize]) -> Result<Var> {
        let src = self.value(input).data();
        if let Some(&bad) = sources.iter().find(|&&s| s != ZERO_SOURCE && s >= src.len()) {
            return Err(shape_err!("gather: source index {bad} out of range {}", src.len()));
        }
        let data = sources.iter().map(|&s| if s == ZERO_SOURCE { 0.0 } else { src[s] }).collect();
        let out = Tensor::new(extents, data)?;
        Ok(self.push(out, Op::Gather { input, sources }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.value(a))?;
        let sources = (0..r * c).map(|o| (o % r) * c + o / r).collect();
        self.gather(a, sources, &[c, r])
    }

    /// Depth-to-space with block 2: `[h×w×d] → [2h×2w×d/4]`,
    /// `out(2y+dy, 2x+dx, c) = in(y, x, 4c + 2dy + dx)`.
    pub fn pixel_rearrange(&mut self, a: Var) -> Result<Var> {
        let (h, w, d) = image_dims("pixel_rearrange", self.value(a))?;
        if d % 4 != 0 {
            return Err(shape_err!("pixel_rearrange: channel extent {d} is not divisible by 4"));
        }
        let c = d / 4;
        let mut sources = Vec::with_capacity(h * w * d);
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let (y, dy, x, dx) = (oy / 2, oy % 2, ox / 2, ox % 2);
                for ch in 0..c {
                    sources.push((y * w + x) * d + ch * 4 + dy * 2 + dx);
                }
            }
        }
        self.gather(a, sources, &[2 * h, 2 * w, c])
    }

    /// Inverse of [`Tape::pixel_rearrange`]: `[2h×2w×c] → [h×w×4c]`.
    pub fn pixel_unrearrange(&mut self, a: Var) -> Result<Var> {
        let (h2, w2, c) = image_dims("pixel_unrearrange", self.value(a))?;
        if h2 % 2 != 0 || w2 % 2 != 0 {
            return Err(shape_err!("pixel_unrearrange: spatial extents {h2}×{w2} must be even"));
        }
        let (h, w) = (h2 / 2, w2 / 2);
        let mut sources = Vec::with_capacity(h2 * w2 * c);
        for y in 0..h {
            for x in 0..w {
                for k in 0..4 * c {
                    let (ch, dy, dx) = (k / 4, (k % 4) / 2, k % 2);
                    sources.push(((2 * y + dy) * w2 + 2 * x + dx) * c + ch);
                }
            }
        }
        self.gather(a, sources, &[h, w, 4 * c])
    }

    /// Adaptive average pooling onto an `s×s` grid with buckets
    /// `floor(i·H/s)..floor((i+1)·H/s)`.
    pub fn avg_pool_to(&mut self, a: Var, s: usize) -> Result<Var> {
        let t = self.value(a);
        let (h, w, c) = image_dims("avg_pool_to", t)?;
        if s == 0 || s > h.min(w) {
            return Err(shape_err!("avg_pool_to: pooled size {s} must lie in 1..={}", h.min(w)));
        }
        let mut out = vec![0.0; s * s * c];
        for i in 0..s {
            let (y0, y1) = pool_bucket(i, s, h);
            for j in 0..s {
                let (x0, x1) = pool_bucket(j, s, w);
                let dst = &mut out[(i * s + j) * c..(i * s + j + 1) * c];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let src = &t.data()[(y * w + x) * c..(y * w + x + 1) * c];
                        dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                dst.iter_mut().for_each(|o| *o /= count);
            }
        }
        let out = Tensor::new(&[s, s, c], out)?;
        Ok(self.push(out, Op::AvgPool { input: a, size: s }))
    }

    /// Nearest-neighbour resize of an `h×w×C` map to `height×width×C`.
    pub fn upsample_nearest(&mut self, a: Var, height: usize, width: usize) -> Result<Var> {
        let (h, w, c) = image_dims("upsample_nearest", self.value(a))?;
        let mut sources = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let sy = y * h / height;
            for x in 0..width {
                let sx = x * w / width;
                sources.extend((0..c).map(|ch| (sy * w + sx) * c + ch));
            }
        }
        self.gather(a, sources, &[height, width, c])
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, c) = t.rows_cols();
        if start + len > c || len == 0 {
            return Err(shape_err!("slice_last: range {start}..{} outside last extent {c}", start + len));
        }
        let sources = (0..rows).flat_map(|r| (start..start + len).map(move |j| r * c + j)).collect();
        let mut extents = t.extents().to_vec();
        *extents.last_mut().unwrap() = len;
        self.gather(a, sources, &extents)
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| shape_err!("concat_last: no inputs"))?);
        let lead = &first.extents()[..first.rank() - 1];
        let rows = first.rows_cols().0;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if &t.extents()[..t.rank() - 1] != lead {
                return Err(shape_err!("concat_last: leading extents {:?} and {:?} differ", lead, t.extents()));
            }
            total += t.rows_cols().1;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.value(p).rows_cols();
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let mut extents = lead.to_vec();
        extents.push(total);
        let out = Tensor::new(&extents, out)?;
        Ok(self.push(out, Op::ConcatLast(parts.to_vec())))
    }

    /// Stacks `[rᵢ×C]` matrices into `[Σrᵢ×C]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = matrix_dims("concat_rows", self.value(*parts.first().ok_or_else(|| shape_err!("concat_rows: no inputs"))?))?.1;
        let mut out = Vec::new();
        for &p in parts {
            let (_, pc) = matrix_dims("concat_rows", self.value(p))?;
            if pc != c {
                return Err(shape_err!("concat_rows: column extents {c} and {pc} differ"));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / c;
        let out = Tensor::new(&[rows, c], out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Normalises every row of the last axis to zero mean and unit variance,
    /// then applies a per-channel gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, c) = t.rows_cols();
        if self.value(gain).extents() != [c] || self.value(bias).extents() != [c] {
            return Err(shape_err!("layer_norm: gain/bias must have extents [{c}]"));
        }
        let mut normalized = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = rs;
            for j in 0..c {
                normalized[r * c + j] = (row[j] - mean) * rs;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let data = normalized.iter().enumerate().map(|(i, &n)| n * g[i % c] + b[i % c]).collect();
        let out = Tensor::new(t.extents(), data)?;
        Ok(self.push(out, Op::LayerNorm { input: a, gain, bias, normalized, inv_std }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Scale-invariant log loss `α·sqrt(mean Δ² − λ·(mean Δ)²)` with
    /// `Δ = ln pred − ln target` over the `valid` pixels. Differentiable in
    /// `pred` only.
    pub fn silog(&mut self, pred: Var, target: &Tensor, valid: &[bool], lambda: f64, alpha: f64) -> Result<Var> {
        let p = self.value(pred);
        same_extents("silog", p, target)?;
        if valid.len() != p.len() {
            return Err(shape_err!("silog: mask has {} entries for {} pixels", valid.len(), p.len()));
        }
        let k = valid.iter().filter(|&&v| v).count();
        if k == 0 {
            return Err(Error::Contract(String::from("silog: no valid pixels")));
        }
        let mut delta = vec![0.0; p.len()];
        for i in (0..p.len()).filter(|&i| valid[i]) {
            let (d, t) = (p.data()[i], target.data()[i]);
            if d <= 0.0 || t <= 0.0 {
                return Err(Error::Domain(format!("silog: nonpositive depth at pixel {i} (pred {d}, target {t})")));
            }
            delta[i] = libm::log(d) - libm::log(t);
        }
        let kf = k as f64;
        let s1: f64 = delta.iter().sum();
        let s2: f64 = delta.iter().map(|d| d * d).sum();
        let variance = (s2 / kf - lambda * s1 * s1 / (kf * kf)).max(0.0);
        let root = libm::sqrt(variance);
        // d loss / d pred_i, saved for the backward pass (zero at the kink).
        let coeffs = if root > 0.0 {
            (0..p.len())
                .map(|i| {
                    if !valid[i] {
                        return 0.0;
                    }
                    let d_var = 2.0 * delta[i] / kf - 2.0 * lambda * s1 / (kf * kf);
                    alpha * d_var / (2.0 * root) / p.data()[i]
                })
                .collect()
        } else {
            vec![0.0; p.len()]
        };
        Ok(self.push(Tensor::scalar(alpha * root), Op::Silog { pred, coeffs }))
    }

    /// Propagates `d loss / d v` to every value reachable from `loss`,
    /// accumulating into previously stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("backward: variable {} is not on this tape", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got extents {:?}",
                self.nodes[loss.0].value.extents()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let len = |v: Var| nodes[v.0].value.len();
        macro_rules! acc {
            ($v:expr) => {
                adj[$v.0].get_or_insert_with(|| vec![0.0; len($v)])
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.extents()[0], nodes[a.0].value.extents()[1]);
                let n = nodes[b.0].value.extents()[1];
                gemm(m, n, k, g, false, nodes[b.0].value.data(), true, acc!(*a), true);
                gemm(k, m, n, nodes[a.0].value.data(), true, g, false, acc!(*b), true);
            }
            Op::Add(a, b) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                acc!(*b).iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::Sub(a, b) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                acc!(*b).iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let da = acc!(*a);
                for j in 0..g.len() {
                    da[j] += g[j] * vb[j];
                }
                let db = acc!(*b);
                for j in 0..g.len() {
                    db[j] += g[j] * va[j];
                }
            }
            Op::Scale(a, f) => acc!(*a).iter_mut().zip(g).for_each(|(d, g)| *d += g * f),
            Op::AddBias(a, b) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                let db = acc!(*b);
                let c = db.len();
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
            Op::Reshape(a) => acc!(*a).iter_mut().zip(g).for_each(|(d, g)| *d += g),
            Op::Gelu(a) => {
                let x = nodes[a.0].value.data();
                let da = acc!(*a);
                for j in 0..g.len() {
                    da[j] += g[j] * (erf_cdf(x[j]) + x[j] * gaussian_pdf(x[j]));
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                let da = acc!(*a);
                for j in 0..g.len() {
                    da[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
            Op::Softmax(a) => {
                let c = out.extents()[1];
                let y = out.data();
                let da = acc!(*a);
                for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        da[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Conv2d { input, kernel, bias } => {
                let [h, w, cin] = *nodes[input.0].value.extents() else { unreachable!() };
                let cout = out.extents()[2];
                let cols = im2col(nodes[input.0].value.data(), h, w, cin);
                gemm(9 * cin, h * w, cout, &cols, true, g, false, acc!(*kernel), true);
                let mut dcols = vec![0.0; h * w * 9 * cin];
                gemm(h * w, cout, 9 * cin, g, false, nodes[kernel.0].value.data(), true, &mut dcols, false);
                col2im_add(&dcols, h, w, cin, acc!(*input));
                let db = acc!(*bias);
                for row in g.chunks(cout) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
            Op::Gather { input, sources } => {
                let da = acc!(*input);
                for (&s, &gv) in sources.iter().zip(g) {
                    if s != ZERO_SOURCE {
                        da[s] += gv;
                    }
                }
            }
            Op::AvgPool { input, size } => {
                let [h, w, c] = *nodes[input.0].value.extents() else { unreachable!() };
                let s = *size;
                let da = acc!(*input);
                for i in 0..s {
                    let (y0, y1) = pool_bucket(i, s, h);
                    for j in 0..s {
                        let (x0, x1) = pool_bucket(j, s, w);
                        let count = ((y1 - y0) * (x1 - x0)) as f64;
                        let src = &g[(i * s + j) * c..(i * s + j + 1) * c];
                        for y in y0..y1 {
                            for x in x0..x1 {
                                let dst = &mut da[(y * w + x) * c..(y * w + x + 1) * c];
                                dst.iter_mut().zip(src).for_each(|(d, g)| *d += g / count);
                            }
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = *out.extents().last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let c = *nodes[p.0].value.extents().last().unwrap();
                    let dp = acc!(p);
                    for (r, row) in g.chunks(total).enumerate() {
                        dp[r * c..(r + 1) * c].iter_mut().zip(&row[offset..offset + c]).for_each(|(d, g)| *d += g);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    acc!(p).iter_mut().zip(&g[offset..offset + n]).for_each(|(d, g)| *d += g);
                    offset += n;
                }
            }
            Op::LayerNorm { input, gain, bias, normalized, inv_std } => {
                let c = *out.extents().last().unwrap();
                let gv = nodes[gain.0].value.data();
                {
                    let dg = acc!(*gain);
                    for (nr, gr) in normalized.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * nr[j];
                        }
                    }
                }
                {
                    let db = acc!(*bias);
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
                let dx = acc!(*input);
                for (r, (nr, gr)) in normalized.chunks(c).zip(g.chunks(c)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dn = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        mean_d += d;
                        mean_dn += d * nr[j];
                    }
                    mean_d /= c as f64;
                    mean_dn /= c as f64;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        dx[r * c + j] += inv_std[r] * (d - mean_d - nr[j] * mean_dn);
                    }
                }
            }
            Op::Sum(a) => acc!(*a).iter_mut().for_each(|d| *d += g[0]),
            Op::Mean(a) => {
                let n = len(*a) as f64;
                acc!(*a).iter_mut().for_each(|d| *d += g[0] / n);
            }
            Op::Silog { pred, coeffs } => {
                acc!(*pred).iter_mut().zip(coeffs).for_each(|(d, c)| *d += g[0] * c);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, extents: &[usize], data: &[f64]) -> Var {
        tape.leaf(Tensor::new(extents, data.to_vec()).unwrap())
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let eye = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let p = t.matmul(eye, eye).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = leaf(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut t, &[2, 1], &[1.0, 1.0]);
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p).extents(), &[2, 1]);
        assert_eq!(t.value(p).data(), &[3.0, 7.0]);

        let x = leaf(&mut t, &[2, 3], &[0.0; 6]);
        let err = t.matmul(x, x).unwrap_err();
        let Error::Shape(msg) = err else { panic!("expected shape error") };
        assert!(msg.contains("2×3"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let l = leaf(&mut t, &[1, 2], &[0.0, 0.0]);
        let s = t.softmax_rows(l, None).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let l = leaf(&mut t, &[1, 2], &[0.0, libm::log(3.0)]);
        let s = t.softmax_rows(l, None).unwrap();
        assert!((t.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((t.value(s).data()[1] - 0.75).abs() < 1e-15);

        let l = leaf(&mut t, &[1, 2], &[5.0, 9.0]);
        let s = t.softmax_rows(l, Some(&[true, false])).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 0.0]);

        let l = leaf(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.softmax_rows(l, Some(&[true, true, false, false])), Err(Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn conv2d_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[3, 3, 1], |i| i as f64));
        let zero_k = t.leaf(Tensor::zeros(&[3, 3, 1, 1]));
        let b = leaf(&mut t, &[1], &[2.5]);
        let y = t.conv2d(x, zero_k, b).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 2.5));

        let mut delta = Tensor::zeros(&[3, 3, 1, 1]);
        delta.set(&[1, 1, 0, 0], 1.0);
        let dk = t.leaf(delta);
        let zb = leaf(&mut t, &[1], &[0.0]);
        let y = t.conv2d(x, dk, zb).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let ones = t.leaf(Tensor::full(&[3, 3, 1], 1.0));
        let ok = t.leaf(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = t.conv2d(ones, ok, zb).unwrap();
        assert_eq!(t.value(y).at(&[1, 1, 0]), 9.0);
        assert_eq!(t.value(y).at(&[0, 0, 0]), 4.0);
        assert_eq!(t.value(y).at(&[0, 1, 0]), 6.0);

        let k2 = t.leaf(Tensor::zeros(&[3, 3, 2, 1]));
        assert!(matches!(t.conv2d(x, k2, zb), Err(Error::Shape(_))));
    }

    #[test]
    fn pixel_rearrange_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[2, 2, 8], |i| i as f64));
        let y = t.pixel_rearrange(x).unwrap();
        assert_eq!(t.value(y).extents(), &[4, 4, 2]);
        let back = t.pixel_unrearrange(y).unwrap();
        assert_eq!(t.value(back), t.value(x));

        let cell = leaf(&mut t, &[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let y = t.pixel_rearrange(cell).unwrap();
        assert_eq!(t.value(y).extents(), &[2, 2, 1]);
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let bad = t.leaf(Tensor::zeros(&[1, 1, 6]));
        assert!(matches!(t.pixel_rearrange(bad), Err(Error::Shape(_))));
    }

    #[test]
    fn avg_pool_examples() {
        let mut t = Tape::new();
        let c = t.leaf(Tensor::full(&[5, 7, 2], 3.25));
        for s in 1..=5 {
            let p = t.avg_pool_to(c, s).unwrap();
            assert!(t.value(p).data().iter().all(|&v| (v - 3.25).abs() < 1e-15));
        }
        let x = leaf(&mut t, &[2, 2, 1], &[1.0, 3.0, 5.0, 7.0]);
        let p = t.avg_pool_to(x, 1).unwrap();
        assert_eq!(t.value(p).data(), &[4.0]);
        let p = t.avg_pool_to(x, 2).unwrap();
        assert_eq!(t.value(p), t.value(x));
        assert!(matches!(t.avg_pool_to(x, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[1.0, -2.0, 0.5]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[1.0, -2.0, 0.5]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[2.0, -4.0, 1.0]);
        // A second call accumulates.
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[4.0, -8.0, 2.0]);
        assert!(matches!(t.backward(sq), Err(Error::Contract(_))));
        t.zero_grad();
        assert_eq!(t.grad(x).data(), &[0.0; 3]);
    }

    #[test]
    fn unreachable_values_keep_zero_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        let unused = leaf(&mut t, &[2], &[3.0, 4.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(unused).data(), &[0.0, 0.0]);
    }
}
