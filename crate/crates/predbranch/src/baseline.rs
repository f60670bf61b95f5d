//! The conventional all-class relation predictor and its statistics.
//!
//! The forward rule is `softmax(W_e e + W_u u + z)` with `z` added
//! unprojected. Pretraining minimizes cross-entropy by mini-batch SGD under
//! the warmup schedule from [`crate::trainer`]. After pretraining,
//! [`class_statistics`] collects the per-class mean predicted distribution
//! (which drives class clustering) and the per-class mean raw features (which
//! seed the knowledge-transfer memories).

use crate::numerics::{cross_entropy, cross_entropy_grad, softmax, GradTape, Matrix, SgdState, Vector};
use crate::rng::stream;
use crate::synthdata::{Dataset, RelationSample};
use crate::trainer::{lr_at, BatchSchedule, TrainConfig};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const PARAM_W_E: &str = "baseline.w_e";
pub const PARAM_W_U: &str = "baseline.w_u";

/// Weights of the all-class predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub w_e: Matrix,
    pub w_u: Matrix,
}

impl BaselineParams {
    /// Uniform `[-1/sqrt(P), 1/sqrt(P)]` initialization from the run seed.
    pub fn init(num_classes: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "baseline/init");
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            let values = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Matrix { rows, cols, values }
        };
        BaselineParams {
            w_e: draw(num_classes, feature_dim),
            w_u: draw(num_classes, feature_dim),
        }
    }

    pub fn validate(&self, num_classes: usize, feature_dim: usize) -> Result<()> {
        self.w_e.validate("baseline.w_e", num_classes, feature_dim)?;
        self.w_u.validate("baseline.w_u", num_classes, feature_dim)
    }
}

/// Per-class statistics of a pretrained baseline over the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Row `i`: mean predicted probability vector over training samples of class `i`.
    pub avg_prob: Matrix,
    /// Row `i`: mean raw context feature of class `i`.
    pub avg_e: Matrix,
    /// Row `i`: mean raw union feature of class `i`.
    pub avg_u: Matrix,
    pub support: Vec<usize>,
    /// Classes that had no training samples; their `avg_prob` row is uniform
    /// and their feature rows are zero.
    pub zero_support: Vec<usize>,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.support.len()
    }

    pub fn validate(&self, num_classes: usize, feature_dim: usize) -> Result<()> {
        self.avg_prob.validate("stats.avg_prob", num_classes, num_classes)?;
        self.avg_e.validate("stats.avg_e", num_classes, feature_dim)?;
        self.avg_u.validate("stats.avg_u", num_classes, feature_dim)?;
        if self.support.len() != num_classes {
            return Err(Error::format("stats.support: wrong length"));
        }
        for (i, &s) in self.support.iter().enumerate() {
            if s > 0 {
                let sum: f64 = self.avg_prob.row(i).iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::format(format!(
                        "stats.avg_prob row {i} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `softmax(W_e e + W_u u + z)`.
pub fn baseline_forward(sample: &RelationSample, params: &BaselineParams) -> Result<Vector> {
    let mut logits = params.w_e.matvec(&sample.e)?;
    let from_u = params.w_u.matvec(&sample.u)?;
    if sample.z.dim() != logits.dim() {
        return Err(Error::invalid(format!(
            "baseline_forward: z has dim {}, expected {}",
            sample.z.dim(),
            logits.dim()
        )));
    }
    logits.add_scaled(&from_u, 1.0);
    logits.add_scaled(&sample.z, 1.0);
    softmax(&logits)
}

/// Cross-entropy of one sample plus parameter gradients accumulated into `tape`.
pub fn baseline_loss_grad(
    sample: &RelationSample,
    params: &BaselineParams,
    tape: &mut GradTape,
) -> Result<f64> {
    let mut logits = params.w_e.matvec(&sample.e)?;
    logits.add_scaled(&params.w_u.matvec(&sample.u)?, 1.0);
    logits.add_scaled(&sample.z, 1.0);
    let loss = cross_entropy(&logits, sample.g)?;
    let dlogits = cross_entropy_grad(&logits, sample.g)?;
    let mut g_e = Matrix::zeros(params.w_e.rows(), params.w_e.cols());
    g_e.add_outer(&dlogits, &sample.e, 1.0);
    let mut g_u = Matrix::zeros(params.w_u.rows(), params.w_u.cols());
    g_u.add_outer(&dlogits, &sample.u, 1.0);
    tape.accumulate(PARAM_W_E, &g_e)?;
    tape.accumulate(PARAM_W_U, &g_u)?;
    Ok(loss)
}

/// Mean cross-entropy over a slice of samples (no gradients).
pub fn mean_loss(samples: &[RelationSample], params: &BaselineParams) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("mean_loss over an empty sample set"));
    }
    let mut acc = 0.0;
    for s in samples {
        let mut logits = params.w_e.matvec(&s.e)?;
        logits.add_scaled(&params.w_u.matvec(&s.u)?, 1.0);
        logits.add_scaled(&s.z, 1.0);
        acc += cross_entropy(&logits, s.g)?;
    }
    Ok(acc / samples.len() as f64)
}

/// Trains the baseline by mini-batch SGD with the warmup schedule.
pub fn pretrain_baseline(ds: &Dataset, cfg: &TrainConfig) -> Result<BaselineParams> {
    if ds.train.is_empty() {
        return Err(Error::invalid("pretrain_baseline: empty training set"));
    }
    cfg.validate()?;
    let mut params = BaselineParams::init(ds.spec.num_classes, ds.spec.feature_dim, cfg.seed);
    let mut schedule = BatchSchedule::new(ds.train.len(), cfg.batch_size, cfg.seed, "baseline/batches");
    let mut tape = GradTape::new();
    let mut sgd = SgdState::new();
    for iter in 0..cfg.total_iters {
        let lr = lr_at(iter, cfg);
        tape.clear();
        let batch = schedule.next_batch();
        for &idx in &batch {
            baseline_loss_grad(&ds.train[idx], &params, &mut tape)?;
        }
        tape.scale(1.0 / batch.len() as f64);
        let BaselineParams { w_e, w_u } = &mut params;
        crate::numerics::sgd_step(
            &mut [(PARAM_W_E, w_e), (PARAM_W_U, w_u)],
            &tape,
            &mut sgd,
            lr,
            cfg.momentum,
        )?;
    }
    Ok(params)
}

/// Per-class means of predicted distributions and raw features over the train split.
pub fn class_statistics(ds: &Dataset, params: &BaselineParams) -> Result<ClassStats> {
    let a = ds.spec.num_classes;
    let p = ds.spec.feature_dim;
    let mut avg_prob = Matrix::zeros(a, a);
    let mut avg_e = Matrix::zeros(a, p);
    let mut avg_u = Matrix::zeros(a, p);
    let mut support = vec![0usize; a];
    for s in &ds.train {
        let probs = baseline_forward(s, params)?;
        support[s.g] += 1;
        for (slot, v) in avg_prob.row_mut(s.g).iter_mut().zip(probs.as_slice()) {
            *slot += v;
        }
        for (slot, v) in avg_e.row_mut(s.g).iter_mut().zip(s.e.as_slice()) {
            *slot += v;
        }
        for (slot, v) in avg_u.row_mut(s.g).iter_mut().zip(s.u.as_slice()) {
            *slot += v;
        }
    }
    let mut zero_support = Vec::new();
    for c in 0..a {
        if support[c] == 0 {
            zero_support.push(c);
            for slot in avg_prob.row_mut(c) {
                *slot = 1.0 / a as f64;
            }
            // Feature rows stay zero.
        } else {
            let inv = 1.0 / support[c] as f64;
            for slot in avg_prob.row_mut(c) {
                *slot *= inv;
            }
            for slot in avg_e.row_mut(c) {
                *slot *= inv;
            }
            for slot in avg_u.row_mut(c) {
                *slot *= inv;
            }
        }
    }
    Ok(ClassStats { avg_prob, avg_e, avg_u, support, zero_support })
}
