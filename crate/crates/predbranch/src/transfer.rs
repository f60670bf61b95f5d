//! Knowledge-transfer machinery.
//!
//! A trainable memory holds one representative feature row per class. A
//! coefficient projector turns the raw input feature into a preliminary
//! prediction `p̂`; the knowledge feature is the convex combination of memory
//! rows weighted by `p̂` (optionally restricted to a class subset); an
//! attention gate decides componentwise how much knowledge to mix in; and the
//! result is rescaled by `alpha * max(p̂)` so confidently-classified inputs
//! keep larger magnitudes than ambiguous ones.
//!
//! The memory loss pulls an input feature toward its own class row and, below
//! a margin, pushes it away from the mean of the other rows. Note the mean in
//! the margin term divides the sum over the other `A-1` rows by `A`, exactly
//! as the loss is defined.

use crate::baseline::ClassStats;
use crate::numerics::{softmax, Matrix, Vector};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which feature stream a memory belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    E,
    U,
}

/// Per-stream matrix of class-representative features (one row per class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    pub v: Matrix,
    /// When false the rows are frozen during training.
    pub trainable: bool,
}

impl Memory {
    pub fn num_classes(&self) -> usize {
        self.v.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.v.cols()
    }
}

/// Linear layer feeding the softmax that produces the coefficient `p̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientProjector {
    pub w: Matrix,
}

/// Knowledge-transfer constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KTConfig {
    /// Scale constant applied to enhanced features.
    pub alpha: f64,
    /// Weight of the margin term in the memory loss.
    pub gamma: f64,
    /// Margin below which other-class memory rows are pushed away.
    pub margin: f64,
    /// Weight of the memory loss in the total loss.
    pub lambda_mem: f64,
}

impl Default for KTConfig {
    fn default() -> Self {
        KTConfig { alpha: 10.0, gamma: 0.01, margin: 80.0, lambda_mem: 1.0 }
    }
}

impl KTConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha must be > 0"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma must be >= 0"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::invalid("margin must be >= 0"));
        }
        if !(self.lambda_mem >= 0.0) {
            return Err(Error::invalid("lambda_mem must be >= 0"));
        }
        Ok(())
    }
}

/// Memory rows start as the per-class feature averages of the pretrained baseline.
pub fn init_memory(stats: &ClassStats, stream: Stream) -> Memory {
    let v = match stream {
        Stream::E => stats.avg_e.clone(),
        Stream::U => stats.avg_u.clone(),
    };
    Memory { v, trainable: true }
}

/// Preliminary prediction `p̂ = softmax(W x)`.
pub fn compute_coefficient(x: &Vector, proj: &CoefficientProjector) -> Result<Vector> {
    softmax(&proj.w.matvec(x)?)
}

/// Knowledge feature `k = Vᵀ p̂`, optionally restricted to a class subset.
///
/// With a subset, `p̂` has one entry per subset class and rows are taken in
/// the subset's sorted order.
pub fn compute_knowledge(mem: &Memory, coeff: &Vector, subset: Option<&[usize]>) -> Result<Vector> {
    let dim = mem.feature_dim();
    let mut k = Vector::zeros(dim);
    match subset {
        None => {
            if coeff.dim() != mem.num_classes() {
                return Err(Error::invalid(format!(
                    "compute_knowledge: coefficient has dim {}, memory has {} rows",
                    coeff.dim(),
                    mem.num_classes()
                )));
            }
            for (i, &w) in coeff.as_slice().iter().enumerate() {
                for (slot, v) in k.as_mut_slice().iter_mut().zip(mem.v.row(i)) {
                    *slot += w * v;
                }
            }
        }
        Some(subset) => {
            if coeff.dim() != subset.len() {
                return Err(Error::invalid(format!(
                    "compute_knowledge: coefficient has dim {}, subset has {} classes",
                    coeff.dim(),
                    subset.len()
                )));
            }
            for (&class, &w) in subset.iter().zip(coeff.as_slice()) {
                if class >= mem.num_classes() {
                    return Err(Error::invalid(format!(
                        "compute_knowledge: subset class {class} out of range for {} rows",
                        mem.num_classes()
                    )));
                }
                for (slot, v) in k.as_mut_slice().iter_mut().zip(mem.v.row(class)) {
                    *slot += w * v;
                }
            }
        }
    }
    Ok(k)
}

/// Componentwise `max(tanh(x_i + y_i), 0)`; outputs lie in `[0, 1)`.
pub fn attention_gate(x: &Vector, y: &Vector) -> Result<Vector> {
    if x.dim() != y.dim() {
        return Err(Error::invalid(format!(
            "attention_gate: dims {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    let values = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (a + b).tanh().max(0.0))
        .collect();
    Ok(Vector { values })
}

/// Scale-calibrated enhancement `x' = alpha * m * (x + a ⊙ k)` with
/// `a = attention_gate(x, k)` and `m = max(p̂)`. Returns `(x', m)`.
pub fn enhance_feature(
    x: &Vector,
    k: &Vector,
    coeff: &Vector,
    cfg: &KTConfig,
) -> Result<(Vector, f64)> {
    if coeff.dim() == 0 {
        return Err(Error::invalid("enhance_feature: empty coefficient"));
    }
    let gate = attention_gate(x, k)?;
    let m = coeff.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = cfg.alpha * m;
    let values = x
        .as_slice()
        .iter()
        .zip(gate.as_slice())
        .zip(k.as_slice())
        .map(|((xi, ai), ki)| scale * (xi + ai * ki))
        .collect();
    Ok((Vector { values }, m))
}

/// Margin-based memory loss:
/// `||x - v_g||^2 + gamma * max(margin - (1/A) * sum_{i != g} ||x - v_i||, 0)`.
pub fn memory_loss(x: &Vector, mem: &Memory, g: usize, cfg: &KTConfig) -> Result<f64> {
    let a = mem.num_classes();
    if g >= a {
        return Err(Error::invalid(format!(
            "memory_loss: class {g} out of range for {a} rows"
        )));
    }
    if x.dim() != mem.feature_dim() {
        return Err(Error::invalid("memory_loss: feature dim mismatch"));
    }
    let own = mem.v.row_vector(g);
    let pull = x
        .as_slice()
        .iter()
        .zip(own.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    let mut mean_other = 0.0;
    for i in 0..a {
        if i == g {
            continue;
        }
        mean_other += x.distance(&mem.v.row_vector(i));
    }
    mean_other /= a as f64;
    Ok(pull + cfg.gamma * (cfg.margin - mean_other).max(0.0))
}

/// Gradients of [`memory_loss`] with respect to `x` and every memory row.
///
/// At a row exactly coincident with `x` the push direction is undefined; the
/// subgradient 0 is used there.
pub fn memory_loss_grad(
    x: &Vector,
    mem: &Memory,
    g: usize,
    cfg: &KTConfig,
) -> Result<(Vector, Matrix)> {
    let a = mem.num_classes();
    if g >= a {
        return Err(Error::invalid(format!(
            "memory_loss_grad: class {g} out of range for {a} rows"
        )));
    }
    let mut d_x = Vector::zeros(x.dim());
    let mut d_mem = Matrix::zeros(a, mem.feature_dim());

    // Pull term: d/dx = 2(x - v_g); d/dv_g = -2(x - v_g).
    {
        let own = mem.v.row(g);
        let d_own = d_mem.row_mut(g);
        for (i, (xi, vi)) in x.as_slice().iter().zip(own).enumerate() {
            let diff = 2.0 * (xi - vi);
            d_x.as_mut_slice()[i] += diff;
            d_own[i] -= diff;
        }
    }

    // Margin term is active only while the mean distance is below the margin.
    let mut mean_other = 0.0;
    for i in 0..a {
        if i != g {
            mean_other += x.distance(&mem.v.row_vector(i));
        }
    }
    mean_other /= a as f64;
    if mean_other < cfg.margin {
        let scale = -cfg.gamma / a as f64;
        for i in 0..a {
            if i == g {
                continue;
            }
            let row = mem.v.row(i);
            let dist = x.distance(&mem.v.row_vector(i));
            if dist <= 1e-12 {
                continue;
            }
            let d_row = d_mem.row_mut(i);
            for (t, (xt, vt)) in x.as_slice().iter().zip(row).enumerate() {
                let unit = (xt - vt) / dist;
                d_x.as_mut_slice()[t] += scale * unit;
                d_row[t] -= scale * unit;
            }
        }
    }
    Ok((d_x, d_mem))
}
