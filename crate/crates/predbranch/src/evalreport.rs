//! Recall@K evaluation with per-frequency-group summaries, plus the four-way
//! ablation driver (baseline / branch-only / transfer-only / both).
//!
//! Within each scene all `(candidate, label)` pairs are ranked together by
//! score; a ground-truth instance is recalled if its pair appears in the top
//! K. Ties break by lower global class index, then lower candidate index.
//! Mean recall averages per-class recalls over classes that occur in the test
//! split. Frequency groups follow the class's rank by training count: with 50
//! classes the split is 10/25/15, otherwise top gets `floor(0.2 A)`, bottom
//! `floor(0.3 A)`, and the middle the rest.

use crate::baseline::{baseline_forward, class_statistics, pretrain_baseline, BaselineParams};
use crate::branching::{route_and_score, PredictorParams, RoutingMode};
use crate::clustering::{cluster_predicates, GroupPartition};
use crate::numerics::Vector;
use crate::synthdata::{Dataset, RelationSample};
use crate::trainer::{train_predictor, TrainConfig};
use crate::{Error, Result};
use std::io::Write as _;
use std::path::Path;

/// One scene: every candidate with its ground truth and score vector.
#[derive(Debug, Clone)]
pub struct ScoredScene {
    pub candidates: Vec<(usize, Vector)>,
}

/// Groups a split into scenes and scores every sample.
pub fn score_scenes<F>(samples: &[RelationSample], mut scorer: F) -> Result<Vec<ScoredScene>>
where
    F: FnMut(&RelationSample) -> Result<Vector>,
{
    let mut scenes: Vec<ScoredScene> = Vec::new();
    let mut current: Option<usize> = None;
    for s in samples {
        if current != Some(s.scene_id) {
            scenes.push(ScoredScene { candidates: Vec::new() });
            current = Some(s.scene_id);
        }
        scenes.last_mut().unwrap().candidates.push((s.g, scorer(s)?));
    }
    Ok(scenes)
}

/// Per-class recall counters aggregated over scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClassRecall {
    pub recalled: Vec<usize>,
    pub total: Vec<usize>,
}

impl PerClassRecall {
    pub fn recall(&self, class: usize) -> Option<f64> {
        if self.total[class] == 0 {
            None
        } else {
            Some(self.recalled[class] as f64 / self.total[class] as f64)
        }
    }

    /// Mean recall over classes with at least one ground-truth instance.
    pub fn mean_recall(&self) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for c in 0..self.total.len() {
            if let Some(r) = self.recall(c) {
                acc += r;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }
}

/// Top-K retrieval per scene.
pub fn recall_at_k(scenes: &[ScoredScene], num_classes: usize, k: usize) -> Result<PerClassRecall> {
    if k < 1 {
        return Err(Error::invalid("recall_at_k: K must be at least 1"));
    }
    let mut recalled = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for scene in scenes {
        let mut triples: Vec<(usize, usize, f64)> = Vec::new(); // (cand, label, score)
        for (cand, (g, scores)) in scene.candidates.iter().enumerate() {
            if *g >= num_classes {
                return Err(Error::invalid(format!("class {g} out of range")));
            }
            if scores.dim() != num_classes {
                return Err(Error::invalid(format!(
                    "score vector has dim {}, expected {num_classes}",
                    scores.dim()
                )));
            }
            for (label, &score) in scores.as_slice().iter().enumerate() {
                triples.push((cand, label, score));
            }
        }
        triples.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });
        let top: std::collections::HashSet<(usize, usize)> =
            triples.iter().take(k).map(|&(c, l, _)| (c, l)).collect();
        for (cand, (g, _)) in scene.candidates.iter().enumerate() {
            total[*g] += 1;
            if top.contains(&(cand, *g)) {
                recalled[*g] += 1;
            }
        }
    }
    Ok(PerClassRecall { recalled, total })
}

/// Sizes of the top/middle/bottom frequency groups.
pub fn group_sizes(num_classes: usize) -> (usize, usize, usize) {
    if num_classes == 50 {
        (10, 25, 15)
    } else {
        let top = num_classes / 5; // floor(0.2 A)
        let bottom = num_classes * 3 / 10; // floor(0.3 A)
        (top, num_classes - top - bottom, bottom)
    }
}

/// Class ids ordered by descending training count; ties go to the lower id.
pub fn frequency_ranking(train_counts: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..train_counts.len()).collect();
    order.sort_by(|&a, &b| train_counts[b].cmp(&train_counts[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMeans {
    pub top: f64,
    pub middle: f64,
    pub bottom: f64,
}

/// Mean per-class recall inside each frequency group (classes without test
/// support are skipped; an entirely unsupported group reports 0).
pub fn group_report(per_class: &PerClassRecall, train_counts: &[usize]) -> Result<GroupMeans> {
    let a = train_counts.len();
    if per_class.total.len() != a {
        return Err(Error::invalid("group_report: class count mismatch"));
    }
    let ranking = frequency_ranking(train_counts);
    let (top_n, mid_n, _) = group_sizes(a);
    let mean_over = |ids: &[usize]| -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for &c in ids {
            if let Some(r) = per_class.recall(c) {
                acc += r;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    };
    Ok(GroupMeans {
        top: mean_over(&ranking[..top_n]),
        middle: mean_over(&ranking[top_n..top_n + mid_n]),
        bottom: mean_over(&ranking[top_n + mid_n..]),
    })
}

// ---------------------------------------------------------------------------
// Whole-split evaluation
// ---------------------------------------------------------------------------

/// A trained model that can score a sample over all classes.
pub enum ModelScorer<'a> {
    Baseline(&'a BaselineParams),
    Predictor(&'a PredictorParams, RoutingMode),
}

impl ModelScorer<'_> {
    pub fn score(&self, sample: &RelationSample) -> Result<Vector> {
        match self {
            ModelScorer::Baseline(params) => baseline_forward(sample, params),
            ModelScorer::Predictor(params, mode) => {
                route_and_score(sample, params, *mode).map(|(scores, _)| scores)
            }
        }
    }
}

/// Full evaluation artifact for one model on one dataset.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub config_name: String,
    pub seed: u64,
    pub ks: Vec<usize>,
    pub per_class: Vec<PerClassRecall>,
    pub mean_recall: Vec<f64>,
    pub groups: Vec<GroupMeans>,
    pub test_support: Vec<usize>,
}

impl EvalReport {
    /// mR@K for the i-th configured K.
    pub fn mr(&self, i: usize) -> f64 {
        self.mean_recall[i]
    }
}

/// Evaluates a model on the test split at each K.
pub fn evaluate(
    ds: &Dataset,
    scorer: &ModelScorer<'_>,
    ks: &[usize],
    config_name: &str,
    seed: u64,
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::invalid("evaluate: no K values"));
    }
    let scenes = score_scenes(&ds.test, |s| scorer.score(s))?;
    let a = ds.spec.num_classes;
    let mut per_class = Vec::with_capacity(ks.len());
    let mut mean_recall = Vec::with_capacity(ks.len());
    let mut groups = Vec::with_capacity(ks.len());
    for &k in ks {
        let pc = recall_at_k(&scenes, a, k)?;
        mean_recall.push(pc.mean_recall());
        groups.push(group_report(&pc, &ds.class_counts.train)?);
        per_class.push(pc);
    }
    Ok(EvalReport {
        config_name: config_name.to_string(),
        seed,
        ks: ks.to_vec(),
        per_class,
        mean_recall,
        groups,
        test_support: ds.class_counts.test.clone(),
    })
}

/// Report CSV: one row per K with per-class recall columns (blank when the
/// class has no test support).
pub fn write_report_csv(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let a = reports
        .first()
        .map(|r| r.test_support.len())
        .ok_or_else(|| Error::invalid("write_report_csv: no reports"))?;
    let mut header = String::from("config_name,seed,K,mR,top_mean,middle_mean,bottom_mean");
    for c in 0..a {
        header.push_str(&format!(",recall_c{c}"));
    }
    writeln!(out, "{header}")?;
    for r in reports {
        for (i, &k) in r.ks.iter().enumerate() {
            let g = &r.groups[i];
            let mut line = format!(
                "{},{},{},{},{},{},{}",
                r.config_name, r.seed, k, r.mean_recall[i], g.top, g.middle, g.bottom
            );
            for c in 0..a {
                match r.per_class[i].recall(c) {
                    Some(v) => line.push_str(&format!(",{v}")),
                    None => line.push(','),
                }
            }
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

pub const ABLATION_CONFIGS: [&str; 4] = ["baseline", "branch", "kt", "branch_kt"];

/// Trains and evaluates the four-model grid with shared per-seed pipelines:
///
/// * `baseline`   — the all-class predictor alone;
/// * `branch`     — branched heads, transfer disabled (`e' = e`, `u' = u`, lambda 0);
/// * `kt`         — a single all-class head with full-memory transfer;
/// * `branch_kt`  — the full model.
///
/// Every configuration under one seed shares the same pretrained baseline,
/// class statistics, and clustering.
pub fn ablation_run(
    ds: &Dataset,
    base_cfg: &TrainConfig,
    seeds: &[u64],
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation_run: no seeds"));
    }
    let mut reports = Vec::with_capacity(seeds.len() * 4);
    for &seed in seeds {
        let mut cfg = base_cfg.clone();
        cfg.seed = seed;

        let baseline = pretrain_baseline(ds, &cfg)?;
        reports.push(evaluate(ds, &ModelScorer::Baseline(&baseline), ks, "baseline", seed)?);

        let stats = class_statistics(ds, &baseline)?;
        let partition2 = cluster_predicates(&stats, 2)?;
        let partition1 = GroupPartition::single_group(ds.spec.num_classes)?;

        let mut branch_cfg = cfg.clone();
        branch_cfg.flags.kt_enabled = false;
        branch_cfg.kt.lambda_mem = 0.0;
        let (branch_ckpt, _) = train_predictor(ds, &stats, &partition2, &branch_cfg)?;
        let branch_params = branch_ckpt.params.predictor.expect("predictor trained");
        reports.push(evaluate(
            ds,
            &ModelScorer::Predictor(&branch_params, cfg.flags.routing),
            ks,
            "branch",
            seed,
        )?);

        let (kt_ckpt, _) = train_predictor(ds, &stats, &partition1, &cfg)?;
        let kt_params = kt_ckpt.params.predictor.expect("predictor trained");
        reports.push(evaluate(
            ds,
            &ModelScorer::Predictor(&kt_params, cfg.flags.routing),
            ks,
            "kt",
            seed,
        )?);

        let (full_ckpt, _) = train_predictor(ds, &stats, &partition2, &cfg)?;
        let full_params = full_ckpt.params.predictor.expect("predictor trained");
        reports.push(evaluate(
            ds,
            &ModelScorer::Predictor(&full_params, cfg.flags.routing),
            ks,
            "branch_kt",
            seed,
        )?);
    }
    Ok(reports)
}
