//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantity (a failed assertion prints the FAIL detail).
//!
//! Criteria:
//!  1. gradient suite vs central finite differences
//!  2. head forward pass vs a straight-line oracle
//!  3. mean recall vs a brute-force enumeration oracle
//!  4. closed-form loss values
//!  5. recovery of the planted class grouping
//!  6. ablation trend (branch+transfer helps tails and overall mean recall)
//!  7. memory geometry after training
//!  8. byte-level determinism of checkpoints and reports
//!  9. routing invariants

use predbranch::baseline::{class_statistics, pretrain_baseline, ClassStats};
use predbranch::branching::{
    branch_forward, forward_trace, relation_loss, route_and_score, score_trace, ClassifierHead,
    LossFlags, PredictorParams, RoutingMode,
};
use predbranch::clustering::{adjusted_rand_index, cluster_predicates, GroupPartition};
use predbranch::evalreport::{evaluate, recall_at_k, ModelScorer, ScoredScene};
use predbranch::numerics::{Matrix, Tolerances, Vector};
use predbranch::synthdata::{generate_dataset, write_dataset, DatasetSpec, RelationSample};
use predbranch::trainer::{
    memory_geometry, save_checkpoint, train_predictor, TrainConfig,
};
use predbranch::transfer::{memory_loss, KTConfig, Memory, Stream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const TOL: Tolerances = Tolerances::DEFAULT;

fn pass(criterion: usize, name: &str, detail: String) {
    println!("ACCEPTANCE {criterion} ({name}): PASS — {detail}");
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

/// The evaluation dataset: 20 classes, 16 dims, ~50:1 head:tail, 20k train.
fn acceptance_spec() -> DatasetSpec {
    DatasetSpec {
        num_classes: 20,
        feature_dim: 16,
        n_train: 20_000,
        n_val: 0,
        n_test: 4_000,
        imbalance_exponent: (50.0f64).ln() / (20.0f64).ln(),
        n_latent_clusters: 2,
        cluster_separation: 4.0,
        noise_scale: 0.8,
        scene_size: 16,
        seed: 7,
    }
}

fn acceptance_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        base_lr: 0.01,
        warmup_iters: 500,
        total_iters: 2000,
        momentum: 0.0,
        seed,
        ..TrainConfig::default()
    }
}

fn random_stats(rng: &mut ChaCha8Rng, a: usize, p: usize) -> ClassStats {
    let mut avg_prob = Matrix::zeros(a, a);
    for r in 0..a {
        let raw: Vec<f64> = (0..a).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        for (slot, v) in avg_prob.row_mut(r).iter_mut().zip(&raw) {
            *slot = v / sum;
        }
    }
    let mut mat = |rows: usize, cols: usize| {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    };
    ClassStats {
        avg_prob,
        avg_e: mat(a, p),
        avg_u: mat(a, p),
        support: vec![10; a],
        zero_support: vec![],
    }
}

fn random_sample(rng: &mut ChaCha8Rng, a: usize, p: usize) -> RelationSample {
    RelationSample {
        e: Vector::new((0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        u: Vector::new((0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        z: Vector::new((0..a).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        g: rng.gen_range(0..a),
        scene_id: 0,
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

#[test]
fn acceptance_1_gradient_suite() {
    let start = Instant::now();
    let results = predbranch::gradsuite::run(0, 20).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let mut worst = 0.0f64;
    for r in &results {
        assert!(
            r.max_rel_err <= TOL.grad_rel,
            "ACCEPTANCE 1 FAIL: {} max relative error {} exceeds {}",
            r.name,
            r.max_rel_err,
            TOL.grad_rel
        );
        worst = worst.max(r.max_rel_err);
    }
    assert!(
        elapsed.as_secs_f64() < 30.0,
        "ACCEPTANCE 1 FAIL: runtime {elapsed:?} exceeds 30 s"
    );
    pass(1, "gradient suite", format!("8 checks x 20 seeds, max rel err {worst:.2e}, {elapsed:.2?}"));
}

// ---------------------------------------------------------------------------
// 2. Forward oracle
// ---------------------------------------------------------------------------

/// Straight-line reimplementation of the enhancement + classification
/// pipeline with raw loops; independent of the library code paths.
fn oracle_head_probs(
    sample: &RelationSample,
    head: &ClassifierHead,
    mem_e: &Memory,
    mem_u: &Memory,
    kt: &KTConfig,
) -> Vec<f64> {
    let p_dim = sample.e.dim();
    let softmax = |logits: &[f64]| -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    };
    let enhance = |x: &[f64], proj: &Matrix, mem: &Matrix, rows: &[usize]| -> Vec<f64> {
        let c = proj.rows();
        let mut logits = vec![0.0; c];
        for (r, slot) in logits.iter_mut().enumerate() {
            for t in 0..p_dim {
                *slot += proj.get(r, t) * x[t];
            }
        }
        let coeff = softmax(&logits);
        let mut k = vec![0.0; p_dim];
        for (ci, &row) in rows.iter().enumerate() {
            for t in 0..p_dim {
                k[t] += coeff[ci] * mem.get(row, t);
            }
        }
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
        for (t, zv) in sample.z.as_slice().iter().enumerate() {
            *slot += head.w_z.get(r, t) * zv;
        }
    }
    softmax(&logits)
}

#[test]
fn acceptance_2_forward_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for instance in 0..100 {
        let a = 6;
        let p = 8;
        let stats = random_stats(&mut rng, a, p);
        let partition = GroupPartition::from_groups(vec![vec![0, 2, 4], vec![1, 3, 5]]).unwrap();
        let params =
            PredictorParams::init(&stats, &partition, KTConfig::default(), true, rng.gen()).unwrap();
        let sample = random_sample(&mut rng, a, p);
        for head in std::iter::once(&params.root).chain(params.branches.iter()) {
            let trace =
                branch_forward(&sample, head, &params.memory_e, &params.memory_u, &params.kt, true)
                    .unwrap();
            let oracle = oracle_head_probs(&sample, head, &params.memory_e, &params.memory_u, &params.kt);
            for (got, want) in trace.probs.as_slice().iter().zip(&oracle) {
                let diff = (got - want).abs();
                worst = worst.max(diff);
                assert!(
                    diff <= TOL.oracle_abs,
                    "ACCEPTANCE 2 FAIL: instance {instance} differs from the straight-line oracle by {diff}"
                );
            }
        }
    }
    pass(2, "forward oracle", format!("100 instances x 3 heads, max abs diff {worst:.2e}"));
}

// ---------------------------------------------------------------------------
// 3. Metric oracle
// ---------------------------------------------------------------------------

fn oracle_mean_recall(scenes: &[ScoredScene], num_classes: usize, k: usize) -> f64 {
    let mut recalled = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for sc in scenes {
        let mut all: Vec<(f64, usize, usize)> = Vec::new();
        for (cand, (_, scores)) in sc.candidates.iter().enumerate() {
            for label in 0..num_classes {
                all.push((scores.as_slice()[label], label, cand));
            }
        }
        all.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        for (cand, (g, _)) in sc.candidates.iter().enumerate() {
            total[*g] += 1;
            if all.iter().take(k).any(|&(_, l, c)| l == *g && c == cand) {
                recalled[*g] += 1;
            }
        }
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for c in 0..num_classes {
        if total[c] > 0 {
            acc += recalled[c] as f64 / total[c] as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

#[test]
fn acceptance_3_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for instance in 0..200 {
        let a = rng.gen_range(2..=6);
        let n_scenes = rng.gen_range(1..=3);
        let scenes: Vec<ScoredScene> = (0..n_scenes)
            .map(|_| ScoredScene {
                candidates: (0..rng.gen_range(1..=4))
                    .map(|_| {
                        let g = rng.gen_range(0..a);
                        // Quantized scores so ties genuinely occur.
                        let s: Vec<f64> =
                            (0..a).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
                        (g, Vector::new(s).unwrap())
                    })
                    .collect(),
            })
            .collect();
        let k = rng.gen_range(1..=(4 * a));
        let got = recall_at_k(&scenes, a, k).unwrap().mean_recall();
        let want = oracle_mean_recall(&scenes, a, k);
        assert!(
            got == want,
            "ACCEPTANCE 3 FAIL: instance {instance} (A={a}, K={k}): {got} vs oracle {want}"
        );
    }
    pass(3, "metric oracle", "200 instances, exact equality".to_string());
}

// ---------------------------------------------------------------------------
// 4. Closed-form loss values
// ---------------------------------------------------------------------------

#[test]
fn acceptance_4_closed_form_losses() {
    // Memory loss: two classes, the own row coincident, the other 100 away:
    // 0.01 * max(80 - 100/2, 0) = 0.3.
    let kt = KTConfig { gamma: 0.01, margin: 80.0, ..KTConfig::default() };
    let mem = Memory {
        v: Matrix::new(2, 1, vec![0.0, 100.0]).unwrap(),
        trainable: true,
    };
    let x = Vector::new(vec![0.0]).unwrap();
    let got = memory_loss(&x, &mem, 0, &kt).unwrap();
    assert!(
        (got - 0.3).abs() <= 1e-12,
        "ACCEPTANCE 4 FAIL: memory loss hand case gave {got}, expected 0.3"
    );

    // Relation loss with all-zero weights and a 5-class branch: five uniform
    // cross-entropies, 5 ln 5.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let stats = random_stats(&mut rng, 10, 4);
    let partition =
        GroupPartition::from_groups(vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]).unwrap();
    let mut params = PredictorParams::init(&stats, &partition, KTConfig::default(), true, 4).unwrap();
    for (_, m) in params.named_params_mut() {
        for v in m.as_mut_slice() {
            *v = 0.0;
        }
    }
    let sample = random_sample(&mut rng, 10, 4);
    let head = &params.branches[0];
    let trace =
        branch_forward(&sample, head, &params.memory_e, &params.memory_u, &params.kt, true).unwrap();
    let got = relation_loss(&trace, head, &params.partition, 2, &LossFlags::default()).unwrap();
    let expected = 5.0 * 5.0_f64.ln();
    assert!(
        (got - expected).abs() <= 1e-9,
        "ACCEPTANCE 4 FAIL: zero-weight relation loss gave {got}, expected {expected}"
    );
    pass(4, "closed-form losses", format!("memory loss 0.3, relation loss {expected:.6}"));
}

// ---------------------------------------------------------------------------
// 5. Clustering recovery
// ---------------------------------------------------------------------------

#[test]
fn acceptance_5_clustering_recovery() {
    let start = Instant::now();
    let mut recovered = 0;
    for seed in 0..10u64 {
        let spec = DatasetSpec {
            num_classes: 20,
            feature_dim: 16,
            n_train: 2000,
            n_val: 0,
            n_test: 0,
            imbalance_exponent: 1.0,
            n_latent_clusters: 2,
            cluster_separation: 4.0,
            noise_scale: 0.8,
            scene_size: 16,
            seed,
        };
        let ds = generate_dataset(&spec).unwrap();
        let cfg = TrainConfig {
            total_iters: 300,
            warmup_iters: 50,
            base_lr: 0.05,
            batch_size: 32,
            seed,
            ..TrainConfig::default()
        };
        let baseline = pretrain_baseline(&ds, &cfg).unwrap();
        let stats = class_statistics(&ds, &baseline).unwrap();
        let partition = cluster_predicates(&stats, 2).unwrap();
        let planted: Vec<usize> = (0..20).map(|c| spec.planted_cluster(c)).collect();
        let found: Vec<usize> = (0..20).map(|c| partition.group_of(c)).collect();
        if adjusted_rand_index(&planted, &found).unwrap() == 1.0 {
            recovered += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(
        recovered >= 9,
        "ACCEPTANCE 5 FAIL: planted grouping recovered in only {recovered}/10 seeds"
    );
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "ACCEPTANCE 5 FAIL: runtime {elapsed:?} exceeds 10 s"
    );
    pass(5, "clustering recovery", format!("{recovered}/10 seeds, {elapsed:.2?}"));
}

// ---------------------------------------------------------------------------
// 6. Ablation trend
// ---------------------------------------------------------------------------

#[test]
fn acceptance_6_ablation_trend() {
    let start = Instant::now();
    let ds = generate_dataset(&acceptance_spec()).unwrap();
    let cfg = acceptance_train_config(0);
    let seeds: Vec<u64> = (0..5).collect();
    let reports = predbranch::evalreport::ablation_run(&ds, &cfg, &seeds, &[50]).unwrap();
    let elapsed = start.elapsed();

    let mut bottom_wins = 0;
    let mut mr_wins = 0;
    for s in 0..seeds.len() {
        let base = &reports[s * 4];
        let full = &reports[s * 4 + 3];
        assert_eq!(base.config_name, "baseline");
        assert_eq!(full.config_name, "branch_kt");
        if full.groups[0].bottom > base.groups[0].bottom {
            bottom_wins += 1;
        }
        if full.mean_recall[0] >= base.mean_recall[0] {
            mr_wins += 1;
        }
    }
    assert!(
        bottom_wins >= 4,
        "ACCEPTANCE 6 FAIL: bottom-group recall improved in only {bottom_wins}/5 seeds"
    );
    assert!(
        mr_wins >= 4,
        "ACCEPTANCE 6 FAIL: mean recall improved in only {mr_wins}/5 seeds"
    );
    assert!(
        elapsed.as_secs_f64() < 300.0,
        "ACCEPTANCE 6 FAIL: runtime {elapsed:?} exceeds 5 min"
    );
    pass(
        6,
        "ablation trend",
        format!("bottom-group wins {bottom_wins}/5, mean-recall wins {mr_wins}/5, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 7. Memory geometry after training
// ---------------------------------------------------------------------------

#[test]
fn acceptance_7_memory_geometry() {
    let ds = generate_dataset(&acceptance_spec()).unwrap();
    let cfg = acceptance_train_config(0);
    let baseline = pretrain_baseline(&ds, &cfg).unwrap();
    let stats = class_statistics(&ds, &baseline).unwrap();
    let partition = cluster_predicates(&stats, 2).unwrap();
    let (ckpt, _) = train_predictor(&ds, &stats, &partition, &cfg).unwrap();
    let predictor = ckpt.params.predictor.unwrap();
    let geometry = memory_geometry(&ds.train, &predictor.memory_e, Stream::E).unwrap();
    let mut closer = 0usize;
    let mut eligible = 0usize;
    for c in 0..ds.spec.num_classes {
        if geometry.support[c] < 10 {
            continue;
        }
        eligible += 1;
        if geometry.own_mean[c].unwrap() < geometry.other_mean[c].unwrap() {
            closer += 1;
        }
    }
    let frac = closer as f64 / eligible as f64;
    assert!(
        frac >= 0.8,
        "ACCEPTANCE 7 FAIL: own memory row closer than other rows for only {closer}/{eligible} classes"
    );
    pass(7, "memory geometry", format!("{closer}/{eligible} classes have own row closest"));
}

// ---------------------------------------------------------------------------
// 8. Determinism
// ---------------------------------------------------------------------------

#[test]
fn acceptance_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        num_classes: 8,
        feature_dim: 6,
        n_train: 800,
        n_val: 0,
        n_test: 400,
        imbalance_exponent: 1.0,
        n_latent_clusters: 2,
        cluster_separation: 4.0,
        noise_scale: 0.8,
        scene_size: 8,
        seed: 17,
    };
    let cfg = TrainConfig {
        total_iters: 250,
        warmup_iters: 50,
        base_lr: 0.01,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    };

    let run = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let ds = generate_dataset(&spec).unwrap();
        let ds_path = dir.path().join(format!("{tag}.jsonl"));
        write_dataset(&ds, &ds_path).unwrap();
        let baseline = pretrain_baseline(&ds, &cfg).unwrap();
        let stats = class_statistics(&ds, &baseline).unwrap();
        let partition = cluster_predicates(&stats, 2).unwrap();
        let (ckpt, _) = train_predictor(&ds, &stats, &partition, &cfg).unwrap();
        let ck_path = dir.path().join(format!("{tag}.ckpt.json"));
        save_checkpoint(&ckpt, &ck_path).unwrap();
        let predictor = ckpt.params.predictor.as_ref().unwrap();
        let report = evaluate(
            &ds,
            &ModelScorer::Predictor(predictor, RoutingMode::Hard),
            &[10, 50],
            "predictor",
            cfg.seed,
        )
        .unwrap();
        let report_path = dir.path().join(format!("{tag}.report.csv"));
        predbranch::evalreport::write_report_csv(std::slice::from_ref(&report), &report_path)
            .unwrap();
        (
            std::fs::read(&ds_path).unwrap(),
            std::fs::read(&ck_path).unwrap(),
            std::fs::read(&report_path).unwrap(),
        )
    };

    let (ds1, ck1, rp1) = run("first");
    let (ds2, ck2, rp2) = run("second");
    assert!(ds1 == ds2, "ACCEPTANCE 8 FAIL: dataset files differ between runs");
    assert!(ck1 == ck2, "ACCEPTANCE 8 FAIL: checkpoints differ between runs");
    assert!(rp1 == rp2, "ACCEPTANCE 8 FAIL: evaluation reports differ between runs");
    pass(
        8,
        "determinism",
        format!("dataset {}B, checkpoint {}B, report {}B byte-identical", ds1.len(), ck1.len(), rp1.len()),
    );
}

// ---------------------------------------------------------------------------
// 9. Routing invariants
// ---------------------------------------------------------------------------

#[test]
fn acceptance_9_routing_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = 6;
    let p = 8;
    let mut checked = 0usize;
    for _ in 0..100 {
        let stats = random_stats(&mut rng, a, p);
        let partition = GroupPartition::from_groups(vec![vec![0, 2, 4], vec![1, 3, 5]]).unwrap();
        let params =
            PredictorParams::init(&stats, &partition, KTConfig::default(), true, rng.gen()).unwrap();
        for _ in 0..100 {
            let sample = random_sample(&mut rng, a, p);
            let trace = forward_trace(&sample, &params).unwrap();
            let (hard, chosen) = score_trace(&trace, &params, RoutingMode::Hard).unwrap();
            let top1 = hard
                .as_slice()
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0;
            assert!(
                params.partition.group_of(top1) == chosen,
                "ACCEPTANCE 9 FAIL: hard top-1 label {top1} not in chosen branch {chosen}"
            );
            let local_argmax = trace.branches[chosen]
                .probs
                .as_slice()
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0;
            assert!(
                params.partition.global_index(chosen, local_argmax) == top1,
                "ACCEPTANCE 9 FAIL: hard top-1 is not the chosen branch's argmax"
            );
            let (soft, _) = route_and_score(&sample, &params, RoutingMode::Soft).unwrap();
            let sum: f64 = soft.as_slice().iter().sum();
            assert!(
                (sum - 1.0).abs() <= TOL.prob_sum,
                "ACCEPTANCE 9 FAIL: soft scores sum to {sum}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 10_000);
    pass(9, "routing invariants", "10000 instances".to_string());
}
