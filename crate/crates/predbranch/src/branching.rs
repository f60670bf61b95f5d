//! The branched predictor.
//!
//! Three kinds of classifier heads share one structure: a root head that
//! picks a class group, and one fine-grained head per group. Every head
//! projects the (optionally knowledge-enhanced) features and the prior vector
//! into its own output space and normalizes:
//!
//! ```text
//! p = softmax(W_e e' + W_u u' + W_z z)
//! ```
//!
//! The root's coefficient/knowledge path runs over the full memory; a branch
//! head restricts it to the memory rows of its own class group. Routing is
//! either hard (pick the branch by the root's argmax, rank its labels first)
//! or soft (multiply branch posteriors by root probabilities).
//!
//! Per-head training loss: cross-entropy on the final output, on each of the
//! three projections separately, and on the e-stream coefficient (the
//! u-stream coefficient term is a flag). Branch heads are only supervised on
//! samples of their own group unless `off_branch_ce` is set, in which case the
//! off-branch head is pushed toward a uniform output instead of being skipped.

use crate::clustering::GroupPartition;
use crate::numerics::{
    cross_entropy, cross_entropy_from_probs, softmax, softmax_vjp, GradTape, Matrix, Vector,
};
use crate::rng::stream;
use crate::synthdata::RelationSample;
use crate::transfer::{memory_loss, memory_loss_grad, CoefficientProjector, KTConfig, Memory};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const PARAM_MEMORY_E: &str = "memory_e";
pub const PARAM_MEMORY_U: &str = "memory_u";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    Hard,
    Soft,
}

/// Loss-shape switches; all default to the masked, e-stream-only form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossFlags {
    /// Add a coefficient cross-entropy term for the u-stream as well.
    pub u_coeff_ce: bool,
    /// Supervise off-branch heads toward a uniform output instead of skipping them.
    pub off_branch_ce: bool,
    /// Let classification gradients flow through the knowledge feature into
    /// the memory (default: the memory is updated by the memory loss only).
    pub grad_through_knowledge: bool,
    /// Count the memory loss once per classifier invocation instead of once
    /// per sample.
    pub mem_loss_per_classifier: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            u_coeff_ce: false,
            off_branch_ce: false,
            grad_through_knowledge: false,
            mem_loss_per_classifier: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Root,
    /// Fine-grained head for the given group index.
    Branch(usize),
}

/// One classifier head.
///
/// `targets` lists what the output dimensions mean: group ids for the root,
/// sorted global class ids for a branch. The coefficient projectors map the
/// raw features to the coefficient space, which is all classes for the root
/// and the head's own classes for a branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub kind: HeadKind,
    pub targets: Vec<usize>,
    pub w_e: Matrix,
    pub w_u: Matrix,
    pub w_z: Matrix,
    pub coeff_e: CoefficientProjector,
    pub coeff_u: CoefficientProjector,
}

impl ClassifierHead {
    pub fn output_dim(&self) -> usize {
        self.targets.len()
    }

    /// Memory rows this head's knowledge is built from (`None` = all rows).
    pub fn knowledge_subset(&self) -> Option<&[usize]> {
        match self.kind {
            HeadKind::Root => None,
            HeadKind::Branch(_) => Some(&self.targets),
        }
    }

    fn init(
        kind: HeadKind,
        targets: Vec<usize>,
        num_classes: usize,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c_out = targets.len();
        let c_coef = match kind {
            HeadKind::Root => num_classes,
            HeadKind::Branch(_) => c_out,
        };
        let mut draw = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let values = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Matrix { rows, cols, values }
        };
        ClassifierHead {
            kind,
            targets,
            w_e: draw(c_out, feature_dim),
            w_u: draw(c_out, feature_dim),
            w_z: draw(c_out, num_classes),
            coeff_e: CoefficientProjector { w: draw(c_coef, feature_dim) },
            coeff_u: CoefficientProjector { w: draw(c_coef, feature_dim) },
        }
    }

    fn validate(&self, label: &str, num_classes: usize, feature_dim: usize) -> Result<()> {
        let c_out = self.targets.len();
        let c_coef = match self.kind {
            HeadKind::Root => num_classes,
            HeadKind::Branch(_) => c_out,
        };
        self.w_e.validate(&format!("{label}.w_e"), c_out, feature_dim)?;
        self.w_u.validate(&format!("{label}.w_u"), c_out, feature_dim)?;
        self.w_z.validate(&format!("{label}.w_z"), c_out, num_classes)?;
        self.coeff_e.w.validate(&format!("{label}.coeff_e"), c_coef, feature_dim)?;
        self.coeff_u.w.validate(&format!("{label}.coeff_u"), c_coef, feature_dim)?;
        Ok(())
    }
}

/// All weights of the branched predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub root: ClassifierHead,
    pub branches: Vec<ClassifierHead>,
    pub memory_e: Memory,
    pub memory_u: Memory,
    pub partition: GroupPartition,
    pub kt: KTConfig,
    /// When false the heads see the raw features (`e' = e`, `u' = u`) and no
    /// coefficient or memory machinery is active.
    pub kt_enabled: bool,
}

impl PredictorParams {
    pub fn init(
        stats: &crate::baseline::ClassStats,
        partition: &GroupPartition,
        kt: KTConfig,
        kt_enabled: bool,
        seed: u64,
    ) -> Result<Self> {
        kt.validate()?;
        let a = stats.num_classes();
        if partition.num_classes() != a {
            return Err(Error::invalid(format!(
                "partition covers {} classes, stats describe {a}",
                partition.num_classes()
            )));
        }
        let p = stats.avg_e.cols();
        let mut rng = stream(seed, "predictor/init");
        let root = ClassifierHead::init(
            HeadKind::Root,
            (0..partition.num_groups()).collect(),
            a,
            p,
            &mut rng,
        );
        let branches = (0..partition.num_groups())
            .map(|b| {
                ClassifierHead::init(HeadKind::Branch(b), partition.group(b).to_vec(), a, p, &mut rng)
            })
            .collect();
        Ok(PredictorParams {
            root,
            branches,
            memory_e: crate::transfer::init_memory(stats, crate::transfer::Stream::E),
            memory_u: crate::transfer::init_memory(stats, crate::transfer::Stream::U),
            partition: partition.clone(),
            kt,
            kt_enabled,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.partition.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.memory_e.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.partition.num_classes();
        let p = self.memory_e.feature_dim();
        self.kt.validate()?;
        if self.branches.len() != self.partition.num_groups() {
            return Err(Error::format(format!(
                "predictor has {} branches for {} groups",
                self.branches.len(),
                self.partition.num_groups()
            )));
        }
        if self.root.targets != (0..self.partition.num_groups()).collect::<Vec<_>>() {
            return Err(Error::format("predictor.root: targets must be the group ids"));
        }
        self.root.validate("predictor.root", a, p)?;
        for (b, head) in self.branches.iter().enumerate() {
            if head.kind != HeadKind::Branch(b) {
                return Err(Error::format(format!("predictor.branch{b}: wrong head kind")));
            }
            if head.targets != self.partition.group(b) {
                return Err(Error::format(format!(
                    "predictor.branch{b}: target set does not match partition group"
                )));
            }
            head.validate(&format!("predictor.branch{b}"), a, p)?;
        }
        self.memory_e.v.validate("predictor.memory_e", a, p)?;
        self.memory_u.v.validate("predictor.memory_u", a, p)?;
        Ok(())
    }

    /// Named mutable views of every trainable matrix, for the optimizer.
    /// The strings carry the ids used by the gradient tape.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = Vec::new();
        head_params("root", &mut self.root, &mut out);
        for (b, head) in self.branches.iter_mut().enumerate() {
            head_params(&format!("branch{b}"), head, &mut out);
        }
        if self.memory_e.trainable {
            out.push((PARAM_MEMORY_E.to_string(), &mut self.memory_e.v));
        }
        if self.memory_u.trainable {
            out.push((PARAM_MEMORY_U.to_string(), &mut self.memory_u.v));
        }
        out
    }
}

fn head_params<'a>(
    prefix: &str,
    head: &'a mut ClassifierHead,
    out: &mut Vec<(String, &'a mut Matrix)>,
) {
    let ClassifierHead { w_e, w_u, w_z, coeff_e, coeff_u, .. } = head;
    out.push((format!("{prefix}.w_e"), w_e));
    out.push((format!("{prefix}.w_u"), w_u));
    out.push((format!("{prefix}.w_z"), w_z));
    out.push((format!("{prefix}.coeff_e"), &mut coeff_e.w));
    out.push((format!("{prefix}.coeff_u"), &mut coeff_u.w));
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Everything one head computed for one sample. When knowledge transfer is
/// disabled the coefficient/knowledge vectors are empty and the scales are 1.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub probs: Vector,
    pub coeff_e: Vector,
    pub coeff_u: Vector,
    pub knowledge_e: Vector,
    pub knowledge_u: Vector,
    pub enhanced_e: Vector,
    pub enhanced_u: Vector,
    pub logits_e: Vector,
    pub logits_u: Vector,
    pub logits_z: Vector,
    pub scale_e: f64,
    pub scale_u: f64,
    pub kt_enabled: bool,
}

/// Traces of all heads plus the per-stream memory losses for the sample.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub root: HeadTrace,
    pub branches: Vec<HeadTrace>,
    pub mem_loss_e: f64,
    pub mem_loss_u: f64,
}

impl ForwardTrace {
    /// Probability vectors must sum to one.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let check = |v: &Vector, what: &str| -> Result<()> {
            if v.dim() == 0 {
                return Ok(());
            }
            let sum: f64 = v.as_slice().iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::numerical(format!("{what} sums to {sum}")));
            }
            Ok(())
        };
        check(&self.root.probs, "root probs")?;
        check(&self.root.coeff_e, "root coeff_e")?;
        check(&self.root.coeff_u, "root coeff_u")?;
        for (b, t) in self.branches.iter().enumerate() {
            check(&t.probs, &format!("branch{b} probs"))?;
            check(&t.coeff_e, &format!("branch{b} coeff_e"))?;
            check(&t.coeff_u, &format!("branch{b} coeff_u"))?;
        }
        Ok(())
    }
}

pub(crate) struct StreamState {
    pub(crate) coeff: Vector,
    pub(crate) knowledge: Vector,
    pub(crate) gate: Vector,
    pub(crate) scale: f64,
    pub(crate) scale_idx: usize,
    pub(crate) enhanced: Vector,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn stream_forward(
    x: &Vector,
    proj: &CoefficientProjector,
    mem: &Memory,
    subset: Option<&[usize]>,
    kt: &KTConfig,
    kt_enabled: bool,
) -> Result<StreamState> {
    if !kt_enabled {
        return Ok(StreamState {
            coeff: Vector::zeros(0),
            knowledge: Vector::zeros(0),
            gate: Vector::zeros(0),
            scale: 1.0,
            scale_idx: 0,
            enhanced: x.clone(),
        });
    }
    let coeff = crate::transfer::compute_coefficient(x, proj)?;
    let knowledge = crate::transfer::compute_knowledge(mem, &coeff, subset)?;
    let gate = crate::transfer::attention_gate(x, &knowledge)?;
    let (enhanced, scale) = crate::transfer::enhance_feature(x, &knowledge, &coeff, kt)?;
    let scale_idx = argmax(coeff.as_slice());
    Ok(StreamState { coeff, knowledge, gate, scale, scale_idx, enhanced })
}

/// Forward pass of one head.
pub fn branch_forward(
    sample: &RelationSample,
    head: &ClassifierHead,
    memory_e: &Memory,
    memory_u: &Memory,
    kt: &KTConfig,
    kt_enabled: bool,
) -> Result<HeadTrace> {
    let subset = head.knowledge_subset();
    let se = stream_forward(&sample.e, &head.coeff_e, memory_e, subset, kt, kt_enabled)?;
    let su = stream_forward(&sample.u, &head.coeff_u, memory_u, subset, kt, kt_enabled)?;
    let logits_e = head.w_e.matvec(&se.enhanced)?;
    let logits_u = head.w_u.matvec(&su.enhanced)?;
    let logits_z = head.w_z.matvec(&sample.z)?;
    let mut total = logits_e.clone();
    total.add_scaled(&logits_u, 1.0);
    total.add_scaled(&logits_z, 1.0);
    let probs = softmax(&total)?;
    Ok(HeadTrace {
        probs,
        coeff_e: se.coeff,
        coeff_u: su.coeff,
        knowledge_e: se.knowledge,
        knowledge_u: su.knowledge,
        enhanced_e: se.enhanced,
        enhanced_u: su.enhanced,
        logits_e,
        logits_u,
        logits_z,
        scale_e: se.scale,
        scale_u: su.scale,
        kt_enabled,
    })
}

/// Runs every head on the sample and evaluates the per-stream memory losses.
pub fn forward_trace(sample: &RelationSample, params: &PredictorParams) -> Result<ForwardTrace> {
    let root = branch_forward(
        sample,
        &params.root,
        &params.memory_e,
        &params.memory_u,
        &params.kt,
        params.kt_enabled,
    )?;
    let branches = params
        .branches
        .iter()
        .map(|h| {
            branch_forward(sample, h, &params.memory_e, &params.memory_u, &params.kt, params.kt_enabled)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mem_loss_e, mem_loss_u) = if params.kt_enabled {
        (
            memory_loss(&sample.e, &params.memory_e, sample.g, &params.kt)?,
            memory_loss(&sample.u, &params.memory_u, sample.g, &params.kt)?,
        )
    } else {
        (0.0, 0.0)
    };
    Ok(ForwardTrace { root, branches, mem_loss_e, mem_loss_u })
}

// ---------------------------------------------------------------------------
// Routing
// ---------------------------------------------------------------------------

/// Scores every global class and picks a branch.
///
/// Hard mode ranks the chosen branch's labels first (by that branch's own
/// probabilities), then the remaining branches' labels. The returned scores
/// encode that ranking monotonically. Soft mode returns the proper joint
/// distribution `p_root[group] * p_group[local]`. Root ties choose the
/// higher-indexed group, matching the strict-inequality rule for two groups.
pub fn route_and_score(
    sample: &RelationSample,
    params: &PredictorParams,
    mode: RoutingMode,
) -> Result<(Vector, usize)> {
    let trace = forward_trace(sample, params)?;
    score_trace(&trace, params, mode)
}

/// Scoring applied to an existing forward trace.
pub fn score_trace(
    trace: &ForwardTrace,
    params: &PredictorParams,
    mode: RoutingMode,
) -> Result<(Vector, usize)> {
    let num_groups = params.partition.num_groups();
    let root_p = trace.root.probs.as_slice();
    let mut chosen = 0usize;
    for j in 1..num_groups {
        if root_p[j] >= root_p[chosen] {
            chosen = j;
        }
    }
    let mut scores = Vector::zeros(params.num_classes());
    match mode {
        RoutingMode::Hard => {
            let mut order: Vec<usize> = (0..num_groups).collect();
            order.sort_by(|&x, &y| {
                let cx = x == chosen;
                let cy = y == chosen;
                cy.cmp(&cx)
                    .then(root_p[y].partial_cmp(&root_p[x]).unwrap())
                    .then(x.cmp(&y))
            });
            for (rank, &b) in order.iter().enumerate() {
                let offset = 2.0 * (num_groups - 1 - rank) as f64;
                for (local, &global) in params.partition.group(b).iter().enumerate() {
                    scores[global] = offset + trace.branches[b].probs[local];
                }
            }
        }
        RoutingMode::Soft => {
            for b in 0..num_groups {
                for (local, &global) in params.partition.group(b).iter().enumerate() {
                    scores[global] = root_p[b] * trace.branches[b].probs[local];
                }
            }
        }
    }
    Ok((scores, chosen))
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub(crate) enum Target {
    Class(usize),
    Uniform,
}

fn ce_logits(logits: &Vector, target: Target) -> Result<f64> {
    match target {
        Target::Class(t) => cross_entropy(logits, t),
        Target::Uniform => {
            let c = logits.dim() as f64;
            let mean: f64 = logits.as_slice().iter().sum::<f64>() / c;
            let lse = {
                let max = logits.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + logits.as_slice().iter().map(|x| (x - max).exp()).sum::<f64>().ln()
            };
            Ok(lse - mean)
        }
    }
}

fn ce_logits_grad(logits: &Vector, target: Target) -> Result<Vector> {
    let mut g = softmax(logits)?;
    match target {
        Target::Class(t) => g[t] -= 1.0,
        Target::Uniform => {
            let inv = 1.0 / logits.dim() as f64;
            for v in g.as_mut_slice() {
                *v -= inv;
            }
        }
    }
    Ok(g)
}

fn ce_probs(probs: &Vector, target: Target) -> Result<f64> {
    match target {
        Target::Class(t) => cross_entropy_from_probs(probs, t),
        Target::Uniform => {
            let c = probs.dim() as f64;
            let mut acc = 0.0;
            for (i, p) in probs.as_slice().iter().enumerate() {
                if *p <= 0.0 {
                    return Err(Error::numerical(format!("probability {i} is {p}")));
                }
                acc -= p.ln();
            }
            Ok(acc / c)
        }
    }
}

/// Head-local targets for a sample: the final/auxiliary target and the
/// coefficient target. The root's final target is the group id while its
/// coefficient (which spans all classes) targets the class itself.
fn head_targets(
    head: &ClassifierHead,
    partition: &GroupPartition,
    g_global: usize,
) -> Result<(usize, usize)> {
    if g_global >= partition.num_classes() {
        return Err(Error::invalid(format!(
            "class {g_global} out of range for {} classes",
            partition.num_classes()
        )));
    }
    match head.kind {
        HeadKind::Root => Ok((partition.group_of(g_global), g_global)),
        HeadKind::Branch(b) => {
            if partition.group_of(g_global) != b {
                return Err(Error::invalid(format!(
                    "class {g_global} is not in branch {b}'s target set"
                )));
            }
            let local = partition.local_index(g_global);
            Ok((local, local))
        }
    }
}

/// The per-head classification loss evaluated from a forward trace:
/// cross-entropy on the final output, the coefficient(s), and the three
/// separate projections.
pub fn relation_loss(
    trace: &HeadTrace,
    head: &ClassifierHead,
    partition: &GroupPartition,
    g_global: usize,
    flags: &LossFlags,
) -> Result<f64> {
    let (t, t_coeff) = head_targets(head, partition, g_global)?;
    let mut loss = ce_probs(&trace.probs, Target::Class(t))?;
    loss += ce_logits(&trace.logits_e, Target::Class(t))?;
    loss += ce_logits(&trace.logits_u, Target::Class(t))?;
    loss += ce_logits(&trace.logits_z, Target::Class(t))?;
    if trace.kt_enabled {
        loss += ce_probs(&trace.coeff_e, Target::Class(t_coeff))?;
        if flags.u_coeff_ce {
            loss += ce_probs(&trace.coeff_u, Target::Class(t_coeff))?;
        }
    }
    Ok(loss)
}

/// Loss components of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub rel_root: f64,
    pub rel_branches: Vec<f64>,
    pub mem_e: f64,
    pub mem_u: f64,
    /// Multiplier applied to the memory losses (lambda, times the number of
    /// classifier invocations when `mem_loss_per_classifier` is set).
    pub mem_weight: f64,
    pub total: f64,
}

fn mem_weight(params: &PredictorParams, flags: &LossFlags) -> f64 {
    let invocations = if flags.mem_loss_per_classifier {
        (1 + params.branches.len()) as f64
    } else {
        1.0
    };
    params.kt.lambda_mem * invocations
}

/// Total loss of one sample (no gradients): the root loss, the loss of the
/// branch owning the sample's class (other branches contribute 0 unless
/// `off_branch_ce`), and the weighted memory losses.
pub fn total_loss(
    sample: &RelationSample,
    params: &PredictorParams,
    flags: &LossFlags,
) -> Result<(f64, LossBreakdown)> {
    let trace = forward_trace(sample, params)?;
    let own = params.partition.group_of(sample.g);
    let rel_root = relation_loss(&trace.root, &params.root, &params.partition, sample.g, flags)?;
    let mut rel_branches = vec![0.0; params.branches.len()];
    for (b, head) in params.branches.iter().enumerate() {
        if b == own {
            rel_branches[b] =
                relation_loss(&trace.branches[b], head, &params.partition, sample.g, flags)?;
        } else if flags.off_branch_ce {
            rel_branches[b] = off_branch_loss(&trace.branches[b], flags)?;
        }
    }
    let weight = mem_weight(params, flags);
    let total = rel_root
        + rel_branches.iter().sum::<f64>()
        + weight * (trace.mem_loss_e + trace.mem_loss_u);
    Ok((
        total,
        LossBreakdown {
            rel_root,
            rel_branches,
            mem_e: trace.mem_loss_e,
            mem_u: trace.mem_loss_u,
            mem_weight: weight,
            total,
        },
    ))
}

fn off_branch_loss(trace: &HeadTrace, flags: &LossFlags) -> Result<f64> {
    let mut loss = ce_probs(&trace.probs, Target::Uniform)?;
    loss += ce_logits(&trace.logits_e, Target::Uniform)?;
    loss += ce_logits(&trace.logits_u, Target::Uniform)?;
    loss += ce_logits(&trace.logits_z, Target::Uniform)?;
    if trace.kt_enabled {
        loss += ce_probs(&trace.coeff_e, Target::Uniform)?;
        if flags.u_coeff_ce {
            loss += ce_probs(&trace.coeff_u, Target::Uniform)?;
        }
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Memory gradient of the knowledge path: `dV[row(ci)] += p̂[ci] * d_k`.
pub(crate) fn knowledge_memory_grad(
    mem: &Memory,
    subset: Option<&[usize]>,
    coeff: &Vector,
    d_k: &Vector,
) -> Matrix {
    let mut d_mem = Matrix::zeros(mem.num_classes(), mem.feature_dim());
    for (ci, &w) in coeff.as_slice().iter().enumerate() {
        let row_idx = subset.map_or(ci, |s| s[ci]);
        let row = d_mem.row_mut(row_idx);
        for (slot, dk) in row.iter_mut().zip(d_k.as_slice()) {
            *slot += w * dk;
        }
    }
    d_mem
}

/// Backward pass of one knowledge stream. Returns the coefficient-projector
/// gradient and `dL/dk` (needed for the optional memory gradient).
#[allow(clippy::too_many_arguments)]
pub(crate) fn stream_grads(
    x: &Vector,
    proj: &CoefficientProjector,
    mem: &Memory,
    subset: Option<&[usize]>,
    kt: &KTConfig,
    st: &StreamState,
    d_enhanced: &Vector,
    coeff_ce: Option<Target>,
) -> Result<(Matrix, Vector)> {
    let p_dim = x.dim();
    let alpha_m = kt.alpha * st.scale;

    let mut d_scale = 0.0;
    let mut d_k = Vector::zeros(p_dim);
    for i in 0..p_dim {
        let combined = x[i] + st.gate[i] * st.knowledge[i];
        d_scale += kt.alpha * d_enhanced[i] * combined;
        let de = alpha_m * d_enhanced[i];
        let d_gate = de * st.knowledge[i];
        d_k[i] += de * st.gate[i];
        if st.gate[i] > 0.0 {
            d_k[i] += d_gate * (1.0 - st.gate[i] * st.gate[i]);
        }
    }

    let c = st.coeff.dim();
    let mut d_coeff = Vector::zeros(c);
    for ci in 0..c {
        let row_idx = subset.map_or(ci, |s| s[ci]);
        let row = mem.v.row(row_idx);
        d_coeff[ci] = row.iter().zip(d_k.as_slice()).map(|(v, dk)| v * dk).sum();
    }
    d_coeff[st.scale_idx] += d_scale;
    if let Some(target) = coeff_ce {
        match target {
            Target::Class(t) => d_coeff[t] -= 1.0 / st.coeff[t],
            Target::Uniform => {
                let inv_c = 1.0 / c as f64;
                for i in 0..c {
                    d_coeff[i] -= inv_c / st.coeff[i];
                }
            }
        }
    }

    let d_logits = softmax_vjp(&st.coeff, &d_coeff);
    let mut d_proj = Matrix::zeros(proj.w.rows(), proj.w.cols());
    d_proj.add_outer(&d_logits, x, 1.0);
    Ok((d_proj, d_k))
}

/// Fused loss + gradient for one sample; gradients accumulate into `tape`.
pub fn total_loss_grad(
    sample: &RelationSample,
    params: &PredictorParams,
    flags: &LossFlags,
    tape: &mut GradTape,
) -> Result<LossBreakdown> {
    if sample.g >= params.num_classes() {
        return Err(Error::invalid(format!(
            "sample class {} out of range for {} classes",
            sample.g,
            params.num_classes()
        )));
    }
    let own = params.partition.group_of(sample.g);
    let root_target = Target::Class(params.partition.group_of(sample.g));
    let rel_root = head_loss_grad_with_coeff_target(
        sample,
        &params.root,
        params,
        root_target,
        Target::Class(sample.g),
        flags,
        tape,
        "root",
    )?;
    let mut rel_branches = vec![0.0; params.branches.len()];
    for (b, head) in params.branches.iter().enumerate() {
        if b == own {
            let local = Target::Class(params.partition.local_index(sample.g));
            rel_branches[b] = head_loss_grad_with_coeff_target(
                sample,
                head,
                params,
                local,
                local,
                flags,
                tape,
                &format!("branch{b}"),
            )?;
        } else if flags.off_branch_ce {
            rel_branches[b] = head_loss_grad_with_coeff_target(
                sample,
                head,
                params,
                Target::Uniform,
                Target::Uniform,
                flags,
                tape,
                &format!("branch{b}"),
            )?;
        }
    }

    let weight = mem_weight(params, flags);
    let (mem_e, mem_u) = if params.kt_enabled {
        let le = memory_loss(&sample.e, &params.memory_e, sample.g, &params.kt)?;
        let lu = memory_loss(&sample.u, &params.memory_u, sample.g, &params.kt)?;
        if weight > 0.0 {
            if params.memory_e.trainable {
                let (_, mut d_mem) = memory_loss_grad(&sample.e, &params.memory_e, sample.g, &params.kt)?;
                for v in d_mem.as_mut_slice() {
                    *v *= weight;
                }
                tape.accumulate(PARAM_MEMORY_E, &d_mem)?;
            }
            if params.memory_u.trainable {
                let (_, mut d_mem) = memory_loss_grad(&sample.u, &params.memory_u, sample.g, &params.kt)?;
                for v in d_mem.as_mut_slice() {
                    *v *= weight;
                }
                tape.accumulate(PARAM_MEMORY_U, &d_mem)?;
            }
        }
        (le, lu)
    } else {
        (0.0, 0.0)
    };

    let total = rel_root + rel_branches.iter().sum::<f64>() + weight * (mem_e + mem_u);
    Ok(LossBreakdown { rel_root, rel_branches, mem_e, mem_u, mem_weight: weight, total })
}

/// `head_loss_grad` with distinct final/coefficient targets (the root targets
/// the group id while its coefficient targets the class).
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_loss_grad_with_coeff_target(
    sample: &RelationSample,
    head: &ClassifierHead,
    params: &PredictorParams,
    target: Target,
    coeff_target: Target,
    flags: &LossFlags,
    tape: &mut GradTape,
    prefix: &str,
) -> Result<f64> {
    let kt = &params.kt;
    let kt_enabled = params.kt_enabled;
    let subset = head.knowledge_subset();
    let se = stream_forward(&sample.e, &head.coeff_e, &params.memory_e, subset, kt, kt_enabled)?;
    let su = stream_forward(&sample.u, &head.coeff_u, &params.memory_u, subset, kt, kt_enabled)?;
    let logits_e = head.w_e.matvec(&se.enhanced)?;
    let logits_u = head.w_u.matvec(&su.enhanced)?;
    let logits_z = head.w_z.matvec(&sample.z)?;
    let mut total_logits = logits_e.clone();
    total_logits.add_scaled(&logits_u, 1.0);
    total_logits.add_scaled(&logits_z, 1.0);

    let mut loss = ce_logits(&total_logits, target)?;
    loss += ce_logits(&logits_e, target)?;
    loss += ce_logits(&logits_u, target)?;
    loss += ce_logits(&logits_z, target)?;
    if kt_enabled {
        loss += ce_probs(&se.coeff, coeff_target)?;
        if flags.u_coeff_ce {
            loss += ce_probs(&su.coeff, coeff_target)?;
        }
    }

    let d_total = ce_logits_grad(&total_logits, target)?;
    let mut d_le = ce_logits_grad(&logits_e, target)?;
    d_le.add_scaled(&d_total, 1.0);
    let mut d_lu = ce_logits_grad(&logits_u, target)?;
    d_lu.add_scaled(&d_total, 1.0);
    let mut d_lz = ce_logits_grad(&logits_z, target)?;
    d_lz.add_scaled(&d_total, 1.0);

    let mut g_w_e = Matrix::zeros(head.w_e.rows(), head.w_e.cols());
    g_w_e.add_outer(&d_le, &se.enhanced, 1.0);
    let mut g_w_u = Matrix::zeros(head.w_u.rows(), head.w_u.cols());
    g_w_u.add_outer(&d_lu, &su.enhanced, 1.0);
    let mut g_w_z = Matrix::zeros(head.w_z.rows(), head.w_z.cols());
    g_w_z.add_outer(&d_lz, &sample.z, 1.0);
    tape.accumulate(&format!("{prefix}.w_e"), &g_w_e)?;
    tape.accumulate(&format!("{prefix}.w_u"), &g_w_u)?;
    tape.accumulate(&format!("{prefix}.w_z"), &g_w_z)?;

    if kt_enabled {
        let d_enh_e = head.w_e.matvec_transpose(&d_le)?;
        let d_enh_u = head.w_u.matvec_transpose(&d_lu)?;
        let (d_proj_e, d_k_e) = stream_grads(
            &sample.e,
            &head.coeff_e,
            &params.memory_e,
            subset,
            kt,
            &se,
            &d_enh_e,
            Some(coeff_target),
        )?;
        let (d_proj_u, d_k_u) = stream_grads(
            &sample.u,
            &head.coeff_u,
            &params.memory_u,
            subset,
            kt,
            &su,
            &d_enh_u,
            if flags.u_coeff_ce { Some(coeff_target) } else { None },
        )?;
        tape.accumulate(&format!("{prefix}.coeff_e"), &d_proj_e)?;
        tape.accumulate(&format!("{prefix}.coeff_u"), &d_proj_u)?;
        if flags.grad_through_knowledge {
            if params.memory_e.trainable {
                let d_mem = knowledge_memory_grad(&params.memory_e, subset, &se.coeff, &d_k_e);
                tape.accumulate(PARAM_MEMORY_E, &d_mem)?;
            }
            if params.memory_u.trainable {
                let d_mem = knowledge_memory_grad(&params.memory_u, subset, &su.coeff, &d_k_u);
                tape.accumulate(PARAM_MEMORY_U, &d_mem)?;
            }
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::ClassStats;
    use crate::numerics::{grad_check, Tolerances};
    use rand::Rng;

    const TOL: Tolerances = Tolerances::DEFAULT;

    fn fixture_stats(a: usize, p: usize, seed: u64) -> ClassStats {
        let mut rng = stream(seed, "branching/test/stats");
        let mut avg_prob = Matrix::zeros(a, a);
        for r in 0..a {
            let raw: Vec<f64> = (0..a).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            for (slot, v) in avg_prob.row_mut(r).iter_mut().zip(&raw) {
                *slot = v / sum;
            }
        }
        let mut draw = |rows: usize, cols: usize| {
            let values = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Matrix { rows, cols, values }
        };
        ClassStats {
            avg_prob,
            avg_e: draw(a, p),
            avg_u: draw(a, p),
            support: (0..a).map(|i| 10 + i).collect(),
            zero_support: vec![],
        }
    }

    fn fixture(seed: u64) -> (PredictorParams, RelationSample) {
        let a = 6;
        let p = 4;
        let stats = fixture_stats(a, p, seed);
        let partition = GroupPartition::from_groups(vec![vec![0, 2, 4], vec![1, 3, 5]]).unwrap();
        let params = PredictorParams::init(&stats, &partition, KTConfig::default(), true, seed).unwrap();
        let mut rng = stream(seed, "branching/test/sample");
        let sample = RelationSample {
            e: Vector::new((0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            u: Vector::new((0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            z: Vector::new((0..a).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            g: 2,
            scene_id: 0,
        };
        (params, sample)
    }

    #[test]
    fn zero_weights_give_uniform_heads() {
        let (mut params, sample) = fixture(1);
        for (_, m) in params.named_params_mut() {
            for v in m.as_mut_slice() {
                *v = 0.0;
            }
        }
        let trace = forward_trace(&sample, &params).unwrap();
        assert_eq!(trace.root.probs.dim(), 2);
        assert!(trace.root.probs.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-15));
        for b in &trace.branches {
            assert_eq!(b.probs.dim(), 3);
            assert!(b.probs.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn output_dims_match_target_sets() {
        let (params, sample) = fixture(2);
        let trace = forward_trace(&sample, &params).unwrap();
        assert_eq!(trace.root.probs.dim(), params.partition.num_groups());
        for (b, t) in trace.branches.iter().enumerate() {
            assert_eq!(t.probs.dim(), params.partition.group(b).len());
        }
        // Root coefficient spans all classes; branch coefficients are local.
        assert_eq!(trace.root.coeff_e.dim(), 6);
        assert_eq!(trace.branches[0].coeff_e.dim(), 3);
        trace.validate(TOL.prob_sum).unwrap();
    }

    /// Straight-line reimplementation of the enhancement + classification
    /// pipeline using raw loops, independent of the library code paths.
    fn oracle_head_probs(
        sample: &RelationSample,
        head: &ClassifierHead,
        mem_e: &Memory,
        mem_u: &Memory,
        kt: &KTConfig,
    ) -> Vec<f64> {
        let p_dim = sample.e.dim();
        let enhance = |x: &[f64], proj: &Matrix, mem: &Matrix, rows: &[usize]| -> Vec<f64> {
            // coefficient
            let c = proj.rows();
            let mut logits = vec![0.0; c];
            for (r, slot) in logits.iter_mut().enumerate() {
                for t in 0..p_dim {
                    *slot += proj.get(r, t) * x[t];
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let coeff: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            // knowledge
            let mut k = vec![0.0; p_dim];
            for (ci, &row) in rows.iter().enumerate() {
                for t in 0..p_dim {
                    k[t] += coeff[ci] * mem.get(row, t);
                }
            }
            // attention + enhance
            let m = coeff.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (0..p_dim)
                .map(|t| {
                    let a = (x[t] + k[t]).tanh().max(0.0);
                    kt.alpha * m * (x[t] + a * k[t])
                })
                .collect()
        };
        let rows: Vec<usize> = match head.knowledge_subset() {
            Some(s) => s.to_vec(),
            None => (0..mem_e.num_classes()).collect(),
        };
        let ep = enhance(sample.e.as_slice(), &head.coeff_e.w, &mem_e.v, &rows);
        let up = enhance(sample.u.as_slice(), &head.coeff_u.w, &mem_u.v, &rows);
        let c = head.output_dim();
        let mut logits = vec![0.0; c];
        for (r, slot) in logits.iter_mut().enumerate() {
            for t in 0..p_dim {
                *slot += head.w_e.get(r, t) * ep[t] + head.w_u.get(r, t) * up[t];
            }
            for t in 0..sample.z.dim() {
                *slot += head.w_z.get(r, t) * sample.z.as_slice()[t];
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    #[test]
    fn branch_forward_matches_straight_line_oracle() {
        for seed in 0..20 {
            let (params, sample) = fixture(seed);
            for head in std::iter::once(&params.root).chain(params.branches.iter()) {
                let trace = branch_forward(
                    &sample,
                    head,
                    &params.memory_e,
                    &params.memory_u,
                    &params.kt,
                    true,
                )
                .unwrap();
                let oracle =
                    oracle_head_probs(&sample, head, &params.memory_e, &params.memory_u, &params.kt);
                for (got, want) in trace.probs.as_slice().iter().zip(&oracle) {
                    assert!((got - want).abs() < TOL.oracle_abs, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn kt_disabled_passes_features_through() {
        let (mut params, sample) = fixture(3);
        params.kt_enabled = false;
        let trace = forward_trace(&sample, &params).unwrap();
        assert_eq!(trace.root.enhanced_e.as_slice(), sample.e.as_slice());
        assert_eq!(trace.root.enhanced_u.as_slice(), sample.u.as_slice());
        assert_eq!(trace.root.coeff_e.dim(), 0);
        assert_eq!(trace.mem_loss_e, 0.0);
        assert_eq!(trace.root.scale_e, 1.0);
    }

    #[test]
    fn hard_routing_prefers_root_argmax() {
        let (params, sample) = fixture(4);
        let trace = forward_trace(&sample, &params).unwrap();
        let (scores, chosen) = score_trace(&trace, &params, RoutingMode::Hard).unwrap();
        let root = trace.root.probs.as_slice();
        if root[0] > root[1] {
            assert_eq!(chosen, 0);
        } else {
            assert_eq!(chosen, 1);
        }
        // Top-1 lies in the chosen branch and equals its argmax.
        let top1 = argmax(scores.as_slice());
        assert_eq!(params.partition.group_of(top1), chosen);
        let local = argmax(trace.branches[chosen].probs.as_slice());
        assert_eq!(params.partition.global_index(chosen, local), top1);
    }

    #[test]
    fn exact_root_tie_picks_second_branch() {
        let (mut params, sample) = fixture(5);
        // Zero the root weights: p_root is exactly [0.5, 0.5].
        for v in params.root.w_e.as_mut_slice() {
            *v = 0.0;
        }
        for v in params.root.w_u.as_mut_slice() {
            *v = 0.0;
        }
        for v in params.root.w_z.as_mut_slice() {
            *v = 0.0;
        }
        let (_, chosen) = route_and_score(&sample, &params, RoutingMode::Hard).unwrap();
        assert_eq!(chosen, 1);
    }

    #[test]
    fn soft_scores_form_distribution() {
        let (params, sample) = fixture(6);
        let (scores, _) = route_and_score(&sample, &params, RoutingMode::Soft).unwrap();
        let sum: f64 = scores.as_slice().iter().sum();
        assert!((sum - 1.0).abs() < TOL.prob_sum);
        assert!(scores.as_slice().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn relation_loss_is_sum_of_five_ce_terms() {
        let (params, sample) = fixture(7);
        let flags = LossFlags::default();
        let head = &params.branches[0];
        let trace =
            branch_forward(&sample, head, &params.memory_e, &params.memory_u, &params.kt, true)
                .unwrap();
        let loss = relation_loss(&trace, head, &params.partition, sample.g, &flags).unwrap();
        let t = params.partition.local_index(sample.g);
        let manual = cross_entropy_from_probs(&trace.probs, t).unwrap()
            + cross_entropy_from_probs(&trace.coeff_e, t).unwrap()
            + cross_entropy(&trace.logits_e, t).unwrap()
            + cross_entropy(&trace.logits_u, t).unwrap()
            + cross_entropy(&trace.logits_z, t).unwrap();
        assert!((loss - manual).abs() < 1e-12);
    }

    #[test]
    fn relation_loss_zero_weight_closed_form() {
        // All-zero weights and a 5-class branch: every one of the five terms
        // is a uniform cross-entropy, so the total is 5 ln 5.
        let a = 10;
        let p = 4;
        let stats = fixture_stats(a, p, 8);
        let partition =
            GroupPartition::from_groups(vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]).unwrap();
        let mut params =
            PredictorParams::init(&stats, &partition, KTConfig::default(), true, 8).unwrap();
        for (_, m) in params.named_params_mut() {
            for v in m.as_mut_slice() {
                *v = 0.0;
            }
        }
        let sample = RelationSample {
            e: Vector::new(vec![0.3, -0.4, 0.1, 0.9]).unwrap(),
            u: Vector::new(vec![-0.2, 0.8, 0.5, -0.6]).unwrap(),
            z: Vector::zeros(a),
            g: 2,
            scene_id: 0,
        };
        let head = &params.branches[0];
        let trace =
            branch_forward(&sample, head, &params.memory_e, &params.memory_u, &params.kt, true)
                .unwrap();
        let loss =
            relation_loss(&trace, head, &params.partition, 2, &LossFlags::default()).unwrap();
        let expected = 5.0 * 5.0_f64.ln();
        assert!((loss - expected).abs() < 1e-9, "loss {loss} vs {expected}");
    }

    #[test]
    fn relation_loss_rejects_foreign_class() {
        let (params, sample) = fixture(9);
        let head = &params.branches[1]; // sample.g = 2 lives in branch 0
        let trace =
            branch_forward(&sample, head, &params.memory_e, &params.memory_u, &params.kt, true)
                .unwrap();
        let res = relation_loss(&trace, head, &params.partition, sample.g, &LossFlags::default());
        assert!(matches!(res, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn total_loss_masks_off_branch() {
        let (params, sample) = fixture(10);
        let flags = LossFlags::default();
        let (_, breakdown) = total_loss(&sample, &params, &flags).unwrap();
        let own = params.partition.group_of(sample.g);
        assert!(breakdown.rel_root > 0.0);
        assert!(breakdown.rel_branches[own] > 0.0);
        assert_eq!(breakdown.rel_branches[1 - own], 0.0);
    }

    #[test]
    fn total_loss_lambda_zero_is_pure_relation_loss() {
        let (mut params, sample) = fixture(11);
        params.kt.lambda_mem = 0.0;
        let (total, breakdown) = total_loss(&sample, &params, &LossFlags::default()).unwrap();
        let rel = breakdown.rel_root + breakdown.rel_branches.iter().sum::<f64>();
        assert_eq!(total, rel);
        assert!(breakdown.mem_e > 0.0); // still reported
    }

    #[test]
    fn total_loss_grad_matches_total_loss_value() {
        let (params, sample) = fixture(12);
        let flags = LossFlags::default();
        let mut tape = GradTape::new();
        let breakdown = total_loss_grad(&sample, &params, &flags, &mut tape).unwrap();
        let (value, _) = total_loss(&sample, &params, &flags).unwrap();
        assert!((breakdown.total - value).abs() < 1e-12);
    }

    #[test]
    fn masked_branch_receives_no_gradient() {
        let (params, sample) = fixture(13);
        let mut tape = GradTape::new();
        total_loss_grad(&sample, &params, &LossFlags::default(), &mut tape).unwrap();
        let own = params.partition.group_of(sample.g);
        let off = 1 - own;
        for which in ["w_e", "w_u", "w_z", "coeff_e", "coeff_u"] {
            assert!(tape.get(&format!("branch{own}.{which}")).is_some());
            assert!(tape.get(&format!("branch{off}.{which}")).is_none());
        }
        // Default routing: memory gradients come from the memory loss only.
        assert!(tape.get(PARAM_MEMORY_E).is_some());
    }

    #[test]
    fn off_branch_ce_flag_supervises_other_branch() {
        let (params, sample) = fixture(14);
        let flags = LossFlags { off_branch_ce: true, ..LossFlags::default() };
        let mut tape = GradTape::new();
        let breakdown = total_loss_grad(&sample, &params, &flags, &mut tape).unwrap();
        let off = 1 - params.partition.group_of(sample.g);
        assert!(breakdown.rel_branches[off] > 0.0);
        assert!(tape.get(&format!("branch{off}.w_e")).is_some());
    }

    /// Gathers the current values of the given tape ids from the parameters.
    fn gather_theta(params: &mut PredictorParams, ids: &[String]) -> Vec<f64> {
        let mut theta = Vec::new();
        let named = params.named_params_mut();
        for id in ids {
            let (_, m) = named.iter().find(|(n, _)| n == id).expect("param id");
            theta.extend_from_slice(m.as_slice());
        }
        theta
    }

    fn scatter_theta(params: &mut PredictorParams, ids: &[String], theta: &[f64]) {
        let mut offset = 0;
        let mut named = params.named_params_mut();
        for id in ids {
            let (_, m) = named.iter_mut().find(|(n, _)| n == id).expect("param id");
            let len = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&theta[offset..offset + len]);
            offset += len;
        }
    }

    fn tape_gradient(tape: &GradTape, ids: &[String], sizes: &[usize]) -> Vec<f64> {
        let mut grad = Vec::new();
        for (id, &len) in ids.iter().zip(sizes) {
            match tape.get(id) {
                Some(m) => grad.extend_from_slice(m.as_slice()),
                None => grad.extend(std::iter::repeat(0.0).take(len)),
            }
        }
        grad
    }

    fn run_total_loss_gradcheck(flags: LossFlags, include_memories: bool, seed: u64) -> f64 {
        let (mut params, sample) = fixture(seed);
        let ids: Vec<String> = params
            .named_params_mut()
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| include_memories || !n.starts_with("memory"))
            .collect();
        let sizes: Vec<usize> = {
            let named = params.named_params_mut();
            ids.iter()
                .map(|id| named.iter().find(|(n, _)| n == id).unwrap().1.as_slice().len())
                .collect()
        };
        let theta = gather_theta(&mut params, &ids);
        let mut tape = GradTape::new();
        total_loss_grad(&sample, &params, &flags, &mut tape).unwrap();
        let analytic = tape_gradient(&tape, &ids, &sizes);
        let base = params.clone();
        let loss = |t: &[f64]| {
            let mut p = base.clone();
            scatter_theta(&mut p, &ids, t);
            total_loss(&sample, &p, &flags).unwrap().0
        };
        grad_check(loss, &analytic, &theta, TOL.fd_step).unwrap()
    }

    #[test]
    fn total_loss_gradcheck_full_flow() {
        // With gradients flowing through the knowledge path, every parameter
        // including the memories matches finite differences.
        let flags = LossFlags { grad_through_knowledge: true, ..LossFlags::default() };
        for seed in [20, 21, 22] {
            let err = run_total_loss_gradcheck(flags, true, seed);
            assert!(err <= TOL.grad_rel, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn total_loss_gradcheck_default_routing_non_memory() {
        // Default routing treats the memory as a constant in the knowledge
        // path, so only non-memory parameters are checked against finite
        // differences here.
        let flags = LossFlags::default();
        for seed in [23, 24] {
            let err = run_total_loss_gradcheck(flags, false, seed);
            assert!(err <= TOL.grad_rel, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn total_loss_gradcheck_with_u_coeff_and_off_branch() {
        let flags = LossFlags {
            u_coeff_ce: true,
            off_branch_ce: true,
            grad_through_knowledge: true,
            mem_loss_per_classifier: true,
        };
        let err = run_total_loss_gradcheck(flags, true, 25);
        assert!(err <= TOL.grad_rel, "max rel err {err}");
    }

    #[test]
    fn single_group_partition_behaves_like_one_head() {
        // A one-group predictor routes everything to branch 0 and its soft
        // scores equal the branch posterior.
        let a = 6;
        let stats = fixture_stats(a, 4, 30);
        let partition = GroupPartition::single_group(a).unwrap();
        let params =
            PredictorParams::init(&stats, &partition, KTConfig::default(), true, 30).unwrap();
        let (_, sample) = fixture(30);
        let (scores, chosen) = route_and_score(&sample, &params, RoutingMode::Soft).unwrap();
        assert_eq!(chosen, 0);
        let trace = forward_trace(&sample, &params).unwrap();
        assert_eq!(trace.root.probs.as_slice(), &[1.0]);
        for (s, p) in scores.as_slice().iter().zip(trace.branches[0].probs.as_slice()) {
            assert!((s - p).abs() < 1e-15);
        }
    }
}
