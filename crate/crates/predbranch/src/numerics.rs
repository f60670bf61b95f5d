//! Minimal dense f64 numerics with hand-written gradients.
//!
//! The whole model is small enough that a general autodiff engine would be
//! overkill; instead every operation ships an analytic gradient, and
//! [`grad_check`] verifies each one against central finite differences. All
//! values are binary64 and all public constructors reject non-finite input.
//!
//! Tolerances used by validation and tests live in [`Tolerances`] so there is
//! a single place to read them from.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Central tolerance record.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Softmax outputs must sum to one within this bound.
    pub prob_sum_strict: f64,
    /// Looser probability-sum bound for quantities accumulated over many terms.
    pub prob_sum: f64,
    /// Maximum relative error accepted from [`grad_check`].
    pub grad_rel: f64,
    /// Central finite-difference step.
    pub fd_step: f64,
    /// Bound for "equals an independent straight-line oracle" assertions.
    pub oracle_abs: f64,
}

impl Tolerances {
    pub const DEFAULT: Tolerances = Tolerances {
        prob_sum_strict: 1e-12,
        prob_sum: 1e-9,
        grad_rel: 1e-4,
        fd_step: 1e-5,
        oracle_abs: 1e-12,
    };
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances::DEFAULT
    }
}

// ---------------------------------------------------------------------------
// Dense containers
// ---------------------------------------------------------------------------

/// Dense vector of finite f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    pub(crate) values: Vec<f64>,
}

impl Vector {
    /// Validating constructor; rejects non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("vector entry {i} is not finite")));
        }
        Ok(Vector { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Vector { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// Euclidean norm of `self - other`.
    pub fn distance(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Vector, scale: f64) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::format(format!("{what}: non-finite value")));
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

/// Dense row-major matrix of finite f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("matrix dimensions must be positive"));
        }
        if values.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix expects {} values for {rows}x{cols}, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("matrix entry {i} is not finite")));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector { values: self.row(r).to_vec() }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `y = M x`.
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.cols {
            return Err(Error::invalid(format!(
                "matvec: {}x{} matrix with vector of dim {}",
                self.rows,
                self.cols,
                x.dim()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for (r, slot) in out.iter_mut().enumerate() {
            let row = self.row(r);
            *slot = row.iter().zip(&x.values).map(|(a, b)| a * b).sum();
        }
        Ok(Vector { values: out })
    }

    /// `x = Mᵀ y`.
    pub fn matvec_transpose(&self, y: &Vector) -> Result<Vector> {
        if y.dim() != self.rows {
            return Err(Error::invalid(format!(
                "matvec_transpose: {}x{} matrix with vector of dim {}",
                self.rows,
                self.cols,
                y.dim()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let yr = y.values[r];
            if yr == 0.0 {
                continue;
            }
            for (c, slot) in out.iter_mut().enumerate() {
                *slot += yr * self.values[r * self.cols + c];
            }
        }
        Ok(Vector { values: out })
    }

    /// Accumulates a scaled outer product: `M += scale * y xᵀ`.
    pub fn add_outer(&mut self, y: &Vector, x: &Vector, scale: f64) {
        debug_assert_eq!(y.dim(), self.rows);
        debug_assert_eq!(x.dim(), self.cols);
        for r in 0..self.rows {
            let s = scale * y.values[r];
            if s == 0.0 {
                continue;
            }
            let row = self.row_mut(r);
            for (slot, xv) in row.iter_mut().zip(&x.values) {
                *slot += s * xv;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Shape-and-finiteness check used by checkpoint loaders; `what` names the block.
    pub fn validate(&self, what: &str, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::format(format!(
                "{what}: expected {rows}x{cols}, found {}x{}",
                self.rows, self.cols
            )));
        }
        if self.values.len() != self.rows * self.cols {
            return Err(Error::format(format!("{what}: value count does not match shape")));
        }
        if !self.is_finite() {
            return Err(Error::format(format!("{what}: non-finite value")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Softmax / cross-entropy
// ---------------------------------------------------------------------------

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &Vector) -> Result<Vector> {
    if v.dim() == 0 {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let max = v.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.values.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    Ok(Vector { values: out })
}

/// Vector-Jacobian product of softmax: given `p = softmax(s)` and `dL/dp`,
/// returns `dL/ds = p ⊙ (dp − (p·dp))`.
pub fn softmax_vjp(p: &Vector, dp: &Vector) -> Vector {
    debug_assert_eq!(p.dim(), dp.dim());
    let inner = p.dot(dp);
    let values = p
        .values
        .iter()
        .zip(&dp.values)
        .map(|(pi, di)| pi * (di - inner))
        .collect();
    Vector { values }
}

/// Cross-entropy of a *logit* vector: `−ln softmax(logits)[target]`,
/// computed as `logsumexp(logits) − logits[target]` for stability.
pub fn cross_entropy(logits: &Vector, target: usize) -> Result<f64> {
    if target >= logits.dim() {
        return Err(Error::invalid(format!(
            "cross_entropy target {target} out of range for dim {}",
            logits.dim()
        )));
    }
    Ok(log_sum_exp(&logits.values) - logits.values[target])
}

/// Cross-entropy of an *already normalized* probability vector:
/// `−ln probs[target]`.
///
/// Distinct from [`cross_entropy`] on purpose: calling the logit form on a
/// probability vector would silently apply softmax twice.
pub fn cross_entropy_from_probs(probs: &Vector, target: usize) -> Result<f64> {
    if target >= probs.dim() {
        return Err(Error::invalid(format!(
            "cross_entropy_from_probs target {target} out of range for dim {}",
            probs.dim()
        )));
    }
    let p = probs.values[target];
    if p <= 0.0 {
        return Err(Error::numerical(format!(
            "cross_entropy_from_probs: probability at target {target} is {p}"
        )));
    }
    Ok(-p.ln())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Gradient of [`cross_entropy`] with respect to the logits: `softmax(logits) − onehot(target)`.
pub fn cross_entropy_grad(logits: &Vector, target: usize) -> Result<Vector> {
    let mut g = softmax(logits)?;
    if target >= g.dim() {
        return Err(Error::invalid(format!(
            "cross_entropy_grad target {target} out of range for dim {}",
            g.dim()
        )));
    }
    g.values[target] -= 1.0;
    Ok(g)
}

// ---------------------------------------------------------------------------
// Gradient tape + SGD
// ---------------------------------------------------------------------------

/// Additive per-parameter gradient store keyed by parameter identifier.
///
/// Shapes are fixed by the first accumulation for an identifier; later
/// accumulations must match.
#[derive(Debug, Clone, Default)]
pub struct GradTape {
    slots: BTreeMap<String, Matrix>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn accumulate(&mut self, id: &str, grad: &Matrix) -> Result<()> {
        match self.slots.get_mut(id) {
            Some(existing) => {
                if existing.rows != grad.rows || existing.cols != grad.cols {
                    return Err(Error::invalid(format!(
                        "gradient shape mismatch for '{id}': {}x{} vs {}x{}",
                        existing.rows, existing.cols, grad.rows, grad.cols
                    )));
                }
                for (a, b) in existing.values.iter_mut().zip(&grad.values) {
                    *a += b;
                }
            }
            None => {
                self.slots.insert(id.to_string(), grad.clone());
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Matrix> {
        self.slots.get(id)
    }

    /// Multiplies every stored gradient by `factor` (used for batch means).
    pub fn scale(&mut self, factor: f64) {
        for grad in self.slots.values_mut() {
            for v in &mut grad.values {
                *v *= factor;
            }
        }
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }
}

/// Per-parameter momentum buffers for [`sgd_step`].
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        SgdState::default()
    }
}

/// One SGD update over named parameters.
///
/// With momentum 0 this is `p ← p − lr·g`. With momentum μ it applies the
/// velocity recurrence `v ← μ·v + g`, `p ← p − lr·v`. Parameters with no tape
/// entry and no velocity are left untouched; a parameter with existing
/// velocity but no fresh gradient keeps sliding with `g = 0`.
pub fn sgd_step<S: AsRef<str>>(
    params: &mut [(S, &mut Matrix)],
    grads: &GradTape,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::invalid(format!("negative learning rate {lr}")));
    }
    for (id, param) in params.iter_mut() {
        let id = id.as_ref();
        let grad = grads.get(id);
        if let Some(g) = grad {
            if g.rows != param.rows || g.cols != param.cols {
                return Err(Error::invalid(format!(
                    "sgd_step shape mismatch for '{id}': param {}x{}, grad {}x{}",
                    param.rows, param.cols, g.rows, g.cols
                )));
            }
        }
        if momentum == 0.0 {
            if let Some(g) = grad {
                for (p, gv) in param.values.iter_mut().zip(&g.values) {
                    *p -= lr * gv;
                }
            }
            continue;
        }
        if grad.is_none() && !state.velocity.contains_key(id) {
            continue;
        }
        let vel = state
            .velocity
            .entry(id.to_string())
            .or_insert_with(|| vec![0.0; param.values.len()]);
        if vel.len() != param.values.len() {
            return Err(Error::invalid(format!("sgd_step velocity shape mismatch for '{id}'")));
        }
        for (i, p) in param.values.iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g.values[i]);
            vel[i] = momentum * vel[i] + g;
            *p -= lr * vel[i];
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Compares an analytic gradient against central finite differences.
///
/// `loss` must be deterministic. Returns the maximum over coordinates of
/// `|analytic − central| / max(1e-8, |analytic| + |central|)`.
pub fn grad_check<L>(loss: L, analytic: &[f64], theta: &[f64], h: f64) -> Result<f64>
where
    L: Fn(&[f64]) -> f64,
{
    if analytic.len() != theta.len() {
        return Err(Error::invalid(format!(
            "grad_check: analytic gradient has {} entries, parameters have {}",
            analytic.len(),
            theta.len()
        )));
    }
    if h <= 0.0 {
        return Err(Error::invalid("grad_check: step must be positive"));
    }
    let mut work = theta.to_vec();
    let mut max_err: f64 = 0.0;
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = loss(&work);
        work[i] = orig - h;
        let minus = loss(&work);
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numerical(format!(
                "grad_check: non-finite loss at coordinate {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        let central = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - central).abs() / f64::max(1e-8, a.abs() + central.abs());
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
