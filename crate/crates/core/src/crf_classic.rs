//! Hand-crafted CRF energies over a patch grid and pairwise-edge accounting.
//!
//! These are references for the learned potentials, not trainable layers.
//! The pairwise kernel follows the printed form
//! `μ·|x_i − x_j|·exp(−‖I_i − I_j‖ / 2σ²)·exp(−‖p_i − p_j‖ / 2σ²)`; the
//! conventional squared-distance Gaussian is available through
//! [`KernelForm::Squared`].

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::partition::WindowPartition;
use crate::tensor::Tensor;

/// A patch grid: per-node value, color and unary probability; node positions
/// are the integer grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGraph {
    values: Tensor,
    colors: Tensor,
    probs: Tensor,
}

impl GridGraph {
    /// `values` and `probs` are `H×W`, `colors` is `H×W×3`.
    pub fn new(values: Tensor, colors: Tensor, probs: Tensor) -> Result<Self> {
        let [h, w] = *values.extents() else {
            return Err(shape_err!("grid values must be H×W, got {:?}", values.extents()));
        };
        if colors.extents() != [h, w, 3] {
            return Err(shape_err!("grid colors {:?} do not match {h}×{w}×3", colors.extents()));
        }
        if probs.extents() != [h, w] {
            return Err(shape_err!("grid probabilities {:?} do not match {h}×{w}", probs.extents()));
        }
        Ok(GridGraph { values, colors, probs })
    }

    pub fn rows(&self) -> usize {
        self.values.extents()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.extents()[1]
    }

    fn color(&self, (y, x): (usize, usize)) -> [f64; 3] {
        let o = (y * self.cols() + x) * 3;
        let c = &self.colors.data()[o..o + 3];
        [c[0], c[1], c[2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KernelForm {
    /// Norms enter the exponent unsquared, as printed.
    #[default]
    Printed,
    /// Standard bilateral Gaussian with squared norms.
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassicCrfParams {
    sigma: f64,
    form: KernelForm,
}

impl ClassicCrfParams {
    pub fn new(sigma: f64, form: KernelForm) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
        }
        Ok(ClassicCrfParams { sigma, form })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn kernel(&self, distance: f64) -> f64 {
        let d = match self.form {
            KernelForm::Printed => distance,
            KernelForm::Squared => distance * distance,
        };
        libm::exp(-d / (2.0 * self.sigma * self.sigma))
    }
}

/// Elementwise `−ln p` of a probability map.
pub fn unary_energy_classic(prob: &Tensor) -> Result<Tensor> {
    if let Some(bad) = prob.data().iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Domain(format!("unary energy needs probabilities in (0, 1], got {bad}")));
    }
    Ok(prob.map(|p| -libm::log(p)))
}

/// Pairwise potential between grid nodes `i` and `j` (as `(row, col)`).
pub fn pairwise_energy_classic(g: &GridGraph, params: &ClassicCrfParams, i: (usize, usize), j: (usize, usize)) -> Result<f64> {
    for (y, x) in [i, j] {
        if y >= g.rows() || x >= g.cols() {
            return Err(Error::Contract(format!("node ({y}, {x}) outside {}×{} grid", g.rows(), g.cols())));
        }
    }
    if i == j {
        return Ok(0.0);
    }
    let xi = g.values.at(&[i.0, i.1]);
    let xj = g.values.at(&[j.0, j.1]);
    let (ci, cj) = (g.color(i), g.color(j));
    let color_dist = libm::sqrt((0..3).map(|k| (ci[k] - cj[k]) * (ci[k] - cj[k])).sum());
    let dy = i.0 as f64 - j.0 as f64;
    let dx = i.1 as f64 - j.1 as f64;
    let pos_dist = libm::sqrt(dy * dy + dx * dx);
    Ok((xi - xj).abs() * params.kernel(color_dist) * params.kernel(pos_dist))
}

/// `Σ_i ψ_u + Σ_{i≠j} ψ_p` over ordered pairs: all pairs, or only pairs that
/// share a window (and wrap region) of `partition`.
pub fn total_energy(g: &GridGraph, params: &ClassicCrfParams, partition: Option<&WindowPartition>) -> Result<f64> {
    let (h, w) = (g.rows(), g.cols());
    if let Some(p) = partition {
        if p.grid() != (h, w) {
            return Err(shape_err!("partition covers {:?} but the grid is {h}×{w}", p.grid()));
        }
    }
    let unary = unary_energy_classic(&g.probs)?.sum();
    let nodes: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
    let mut pair = 0.0;
    match partition {
        None => {
            for &a in &nodes {
                for &b in &nodes {
                    if a != b {
                        pair += pairwise_energy_classic(g, params, a, b)?;
                    }
                }
            }
        }
        Some(p) => {
            for win in 0..p.window_count() {
                let slots = p.window_slots(win);
                let regions = p.window_regions(win);
                for (sa, a) in slots.iter().enumerate() {
                    let Some(a) = a else { continue };
                    for (sb, b) in slots.iter().enumerate() {
                        let Some(b) = b else { continue };
                        if a != b && regions[sa] == regions[sb] {
                            pair += pairwise_energy_classic(g, params, (a / w, a % w), (b / w, b % w))?;
                        }
                    }
                }
            }
        }
    }
    Ok(unary + pair)
}

/// Ordered pairwise-edge count: `hw(hw − 1)` fully connected, `hw(N² − 1)`
/// for an exact tiling by `N×N` windows.
pub fn count_pairwise_edges(rows: usize, cols: usize, size: usize, fully_connected: bool) -> Result<u64> {
    if rows == 0 || cols == 0 || size == 0 {
        return Err(Error::Contract(format!("edge count: extents {rows}×{cols} and window {size} must be positive")));
    }
    if size > rows.min(cols) {
        return Err(Error::Contract(format!("edge count: window {size} exceeds the {rows}×{cols} grid")));
    }
    let hw = (rows * cols) as u64;
    if fully_connected {
        return Ok(hw * (hw - 1));
    }
    if !rows.is_multiple_of(size) || !cols.is_multiple_of(size) {
        return Err(Error::Contract(format!("edge count: window {size} does not tile the {rows}×{cols} grid exactly")));
    }
    let n2 = (size * size) as u64;
    Ok(hw * (n2 - 1))
}
