//! Scores a trained predictor on the test split and reports recall@K, mean
//! recall, and per-frequency-group means under both routing modes.
//!
//! ```bash
//! cargo run --example evaluate_recall
//! ```

use predbranch::baseline::{class_statistics, pretrain_baseline};
use predbranch::branching::RoutingMode;
use predbranch::clustering::cluster_predicates;
use predbranch::evalreport::{evaluate, ModelScorer};
use predbranch::synthdata::{generate_dataset, DatasetSpec};
use predbranch::trainer::{train_predictor, TrainConfig};

fn main() -> predbranch::Result<()> {
    let spec = DatasetSpec {
        num_classes: 12,
        feature_dim: 10,
        n_train: 8_000,
        n_val: 0,
        n_test: 2_400,
        imbalance_exponent: 1.2,
        n_latent_clusters: 2,
        cluster_separation: 4.0,
        noise_scale: 0.8,
        scene_size: 12,
        seed: 21,
    };
    let ds = generate_dataset(&spec)?;
    let cfg = TrainConfig {
        total_iters: 1_500,
        warmup_iters: 300,
        base_lr: 0.01,
        batch_size: 32,
        seed: 1,
        ..TrainConfig::default()
    };
    let baseline = pretrain_baseline(&ds, &cfg)?;
    let stats = class_statistics(&ds, &baseline)?;
    let partition = cluster_predicates(&stats, 2)?;
    let (ckpt, _) = train_predictor(&ds, &stats, &partition, &cfg)?;
    let predictor = ckpt.params.predictor.unwrap();

    for routing in [RoutingMode::Hard, RoutingMode::Soft] {
        let report = evaluate(
            &ds,
            &ModelScorer::Predictor(&predictor, routing),
            &[20, 50, 100],
            "predictor",
            cfg.seed,
        )?;
        println!("routing {routing:?}:");
        for (i, &k) in report.ks.iter().enumerate() {
            let g = &report.groups[i];
            println!(
                "  K={k:<4} mR {:.4} | top {:.4} middle {:.4} bottom {:.4}",
                report.mean_recall[i], g.top, g.middle, g.bottom
            );
        }
    }
    Ok(())
}
