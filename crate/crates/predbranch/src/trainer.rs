//! Two-phase training: baseline pretraining support (batch schedule, learning
//! rate) and the branched-predictor training loop, plus checkpoint I/O.
//!
//! The learning rate ramps linearly from 0 to `base_lr` over `warmup_iters`
//! and stays constant afterwards. Mini-batches come from a seeded shuffle
//! that reshuffles deterministically at each epoch boundary, so the whole map
//! `(dataset, config) -> checkpoint` is a pure function.

use crate::baseline::{BaselineParams, ClassStats};
use crate::branching::{total_loss_grad, LossFlags, PredictorParams, RoutingMode};
use crate::clustering::GroupPartition;
use crate::numerics::{sgd_step, GradTape, SgdState};
use crate::rng::stream;
use crate::synthdata::{Dataset, RelationSample};
use crate::transfer::{KTConfig, Memory, Stream};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: &str = "1";

/// Behavior switches recorded in the config echo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainFlags {
    /// Knowledge transfer on/off (off: heads see raw features).
    pub kt_enabled: bool,
    /// Routing mode used at evaluation time.
    pub routing: RoutingMode,
    pub u_coeff_ce: bool,
    pub off_branch_ce: bool,
    pub grad_through_knowledge: bool,
    pub mem_loss_per_classifier: bool,
}

impl Default for TrainFlags {
    fn default() -> Self {
        TrainFlags {
            kt_enabled: true,
            routing: RoutingMode::Hard,
            u_coeff_ce: false,
            off_branch_ce: false,
            grad_through_knowledge: false,
            mem_loss_per_classifier: false,
        }
    }
}

impl TrainFlags {
    pub fn loss_flags(&self) -> LossFlags {
        LossFlags {
            u_coeff_ce: self.u_coeff_ce,
            off_branch_ce: self.off_branch_ce,
            grad_through_knowledge: self.grad_through_knowledge,
            mem_loss_per_classifier: self.mem_loss_per_classifier,
        }
    }
}

/// Everything a training run depends on besides the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub momentum: f64,
    pub seed: u64,
    pub kt: KTConfig,
    pub flags: TrainFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            base_lr: 0.01,
            warmup_iters: 500,
            total_iters: 2000,
            momentum: 0.0,
            seed: 0,
            kt: KTConfig::default(),
            flags: TrainFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::invalid("base_lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        self.kt.validate()
    }
}

/// Linear warmup to `base_lr`, constant afterwards.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_iters == 0 || iter >= cfg.warmup_iters {
        cfg.base_lr
    } else {
        cfg.base_lr * iter as f64 / cfg.warmup_iters as f64
    }
}

/// Deterministic shuffled mini-batch iterator. Each epoch is an independent
/// labeled substream of the seed, so batch contents never depend on when the
/// schedule is constructed.
pub struct BatchSchedule {
    n: usize,
    batch_size: usize,
    seed: u64,
    label: String,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64, label: &str) -> Self {
        let mut s = BatchSchedule {
            n,
            batch_size: batch_size.max(1),
            seed,
            label: label.to_string(),
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = stream(self.seed, &format!("{}/epoch={}", self.label, self.epoch));
        self.order.shuffle(&mut rng);
        self.pos = 0;
        self.epoch += 1;
    }

    /// Next mini-batch of sample indices; the final batch of an epoch may be
    /// shorter than `batch_size`.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

/// One row of the training loss log.
#[derive(Debug, Clone)]
pub struct LossLogRow {
    pub iter: usize,
    pub total: f64,
    pub rel_root: f64,
    pub rel_branches: Vec<f64>,
    pub mem_e: f64,
    pub mem_u: f64,
    pub lr: f64,
}

/// Writes the loss log as CSV (`iter,L,L_rel_root,L_rel_b*,L_mem_e,L_mem_u,lr`).
pub fn write_loss_log(rows: &[LossLogRow], num_branches: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("iter,L,L_rel_root");
    for b in 0..num_branches {
        header.push_str(&format!(",L_rel_b{b}"));
    }
    header.push_str(",L_mem_e,L_mem_u,lr");
    writeln!(out, "{header}")?;
    for row in rows {
        let mut line = format!("{},{},{}", row.iter, row.total, row.rel_root);
        for b in 0..num_branches {
            line.push_str(&format!(",{}", row.rel_branches.get(b).copied().unwrap_or(0.0)));
        }
        line.push_str(&format!(",{},{},{}", row.mem_e, row.mem_u, row.lr));
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Snapshot stored with a finished checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub final_total_loss: f64,
    pub mean_loss_last_100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointParams {
    pub baseline: Option<BaselineParams>,
    pub stats: Option<ClassStats>,
    pub predictor: Option<PredictorParams>,
}

/// On-disk training artifact. Field order matches the serialized layout:
/// `{"version":"1","config":…,"partition":…,"params":{…},"iteration":…,"metrics":…}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config: TrainConfig,
    pub partition: Option<GroupPartition>,
    pub params: CheckpointParams,
    pub iteration: usize,
    pub metrics: Option<FinalMetrics>,
}

impl Checkpoint {
    /// Cross-checks every block present for consistent shapes.
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version \"{}\" (supported: \"{CHECKPOINT_FORMAT_VERSION}\")",
                self.version
            )));
        }
        self.config.validate()?;
        let mut dims: Option<(usize, usize)> = None;
        let mut merge = |what: &str, a: usize, p: usize| -> Result<()> {
            match dims {
                None => {
                    dims = Some((a, p));
                    Ok(())
                }
                Some((ea, ep)) if ea == a && ep == p => Ok(()),
                Some((ea, ep)) => Err(Error::format(format!(
                    "{what}: dimensions {a}x{p} disagree with {ea}x{ep} elsewhere in the checkpoint"
                ))),
            }
        };
        if let Some(b) = &self.params.baseline {
            merge("params.baseline", b.w_e.rows(), b.w_e.cols())?;
            b.validate(b.w_e.rows(), b.w_e.cols())?;
        }
        if let Some(s) = &self.params.stats {
            merge("params.stats", s.num_classes(), s.avg_e.cols())?;
            s.validate(s.num_classes(), s.avg_e.cols())?;
        }
        if let Some(p) = &self.params.predictor {
            merge("params.predictor", p.num_classes(), p.feature_dim())?;
            p.validate()?;
            if let Some(part) = &self.partition {
                if part != &p.partition {
                    return Err(Error::format(
                        "partition: top-level partition differs from params.predictor.partition",
                    ));
                }
            }
        }
        if let Some(part) = &self.partition {
            if let Some((a, _)) = dims {
                if part.num_classes() != a {
                    return Err(Error::format(format!(
                        "partition: covers {} classes, parameters describe {a}",
                        part.num_classes()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.validate()?;
    let text = crate::jsonfmt::to_string_17(ckpt)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(text.as_bytes())?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("checkpoint: {e}")))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::format("checkpoint: missing version"))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version \"{version}\" (supported: \"{CHECKPOINT_FORMAT_VERSION}\")"
        )));
    }
    let ckpt: Checkpoint = serde_json::from_value(value)
        .map_err(|e| Error::format(format!("checkpoint: {e}")))?;
    ckpt.validate()?;
    Ok(ckpt)
}

/// Trains the branched predictor. Memories start from the class statistics;
/// every parameter (including the memories, under the configured gradient
/// routing) is updated by SGD with the warmup schedule.
pub fn train_predictor(
    ds: &Dataset,
    stats: &ClassStats,
    partition: &GroupPartition,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<LossLogRow>)> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::invalid("train_predictor: empty training set"));
    }
    if stats.num_classes() != ds.spec.num_classes {
        return Err(Error::invalid("train_predictor: stats do not match the dataset"));
    }
    if partition.num_classes() != ds.spec.num_classes {
        return Err(Error::invalid("train_predictor: partition does not match the dataset"));
    }
    let mut params =
        PredictorParams::init(stats, partition, cfg.kt, cfg.flags.kt_enabled, cfg.seed)?;
    let loss_flags = cfg.flags.loss_flags();
    let mut schedule = BatchSchedule::new(ds.train.len(), cfg.batch_size, cfg.seed, "predictor/batches");
    let mut tape = GradTape::new();
    let mut sgd = SgdState::new();
    let mut log = Vec::with_capacity(cfg.total_iters);
    let num_branches = params.branches.len();

    for iter in 0..cfg.total_iters {
        let lr = lr_at(iter, cfg);
        tape.clear();
        let batch = schedule.next_batch();
        let mut row = LossLogRow {
            iter,
            total: 0.0,
            rel_root: 0.0,
            rel_branches: vec![0.0; num_branches],
            mem_e: 0.0,
            mem_u: 0.0,
            lr,
        };
        for &idx in &batch {
            let breakdown = total_loss_grad(&ds.train[idx], &params, &loss_flags, &mut tape)?;
            row.total += breakdown.total;
            row.rel_root += breakdown.rel_root;
            for (slot, v) in row.rel_branches.iter_mut().zip(&breakdown.rel_branches) {
                *slot += v;
            }
            row.mem_e += breakdown.mem_e;
            row.mem_u += breakdown.mem_u;
        }
        let inv = 1.0 / batch.len() as f64;
        tape.scale(inv);
        row.total *= inv;
        row.rel_root *= inv;
        for v in &mut row.rel_branches {
            *v *= inv;
        }
        row.mem_e *= inv;
        row.mem_u *= inv;
        log.push(row);

        let mut named = params.named_params_mut();
        sgd_step(&mut named, &tape, &mut sgd, lr, cfg.momentum)?;
    }

    let metrics = if log.is_empty() {
        None
    } else {
        let tail = &log[log.len().saturating_sub(100)..];
        Some(FinalMetrics {
            final_total_loss: log.last().unwrap().total,
            mean_loss_last_100: tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64,
        })
    };
    let ckpt = Checkpoint {
        version: CHECKPOINT_FORMAT_VERSION.to_string(),
        config: cfg.clone(),
        partition: Some(partition.clone()),
        params: CheckpointParams { baseline: None, stats: Some(stats.clone()), predictor: Some(params) },
        iteration: cfg.total_iters,
        metrics,
    };
    Ok((ckpt, log))
}

/// Per-class distance summary between samples and memory rows.
#[derive(Debug, Clone)]
pub struct MemoryGeometry {
    /// Mean `||x - v_g||` over samples of each class (None without samples).
    pub own_mean: Vec<Option<f64>>,
    /// Mean over samples of the mean distance to the other classes' rows.
    pub other_mean: Vec<Option<f64>>,
    pub support: Vec<usize>,
}

/// Measures distances of the chosen feature stream against a memory.
pub fn memory_geometry(
    samples: &[RelationSample],
    memory: &Memory,
    which: Stream,
) -> Result<MemoryGeometry> {
    let a = memory.num_classes();
    let mut own = vec![0.0; a];
    let mut other = vec![0.0; a];
    let mut support = vec![0usize; a];
    for s in samples {
        if s.g >= a {
            return Err(Error::invalid(format!("sample class {} out of range", s.g)));
        }
        let x = match which {
            Stream::E => &s.e,
            Stream::U => &s.u,
        };
        support[s.g] += 1;
        let mut sum_other = 0.0;
        for i in 0..a {
            let d = x.distance(&memory.v.row_vector(i));
            if i == s.g {
                own[s.g] += d;
            } else {
                sum_other += d;
            }
        }
        if a > 1 {
            other[s.g] += sum_other / (a - 1) as f64;
        }
    }
    let own_mean = own
        .iter()
        .zip(&support)
        .map(|(sum, &n)| if n > 0 { Some(sum / n as f64) } else { None })
        .collect();
    let other_mean = other
        .iter()
        .zip(&support)
        .map(|(sum, &n)| if n > 0 { Some(sum / n as f64) } else { None })
        .collect();
    Ok(MemoryGeometry { own_mean, other_mean, support })
}
