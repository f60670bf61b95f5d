//! Pretrains the conventional all-class predictor and collects the per-class
//! statistics that seed clustering and the transfer memories.
//!
//! ```bash
//! cargo run --example pretrain_baseline
//! ```

use predbranch::baseline::{baseline_forward, class_statistics, mean_loss, pretrain_baseline};
use predbranch::synthdata::{generate_dataset, DatasetSpec};
use predbranch::trainer::TrainConfig;

fn main() -> predbranch::Result<()> {
    let spec = DatasetSpec {
        num_classes: 12,
        feature_dim: 10,
        n_train: 6_000,
        n_val: 0,
        n_test: 1_200,
        imbalance_exponent: 1.2,
        n_latent_clusters: 2,
        cluster_separation: 4.0,
        noise_scale: 0.8,
        scene_size: 12,
        seed: 3,
    };
    let ds = generate_dataset(&spec)?;
    let cfg = TrainConfig {
        total_iters: 1_000,
        warmup_iters: 100,
        base_lr: 0.02,
        batch_size: 32,
        seed: 0,
        ..TrainConfig::default()
    };

    let init = predbranch::baseline::BaselineParams::init(spec.num_classes, spec.feature_dim, cfg.seed);
    println!("mean train loss before: {:.4}", mean_loss(&ds.train, &init)?);
    let params = pretrain_baseline(&ds, &cfg)?;
    println!("mean train loss after:  {:.4}", mean_loss(&ds.train, &params)?);

    let correct = ds
        .test
        .iter()
        .filter(|s| {
            let p = baseline_forward(s, &params).unwrap();
            let argmax = p
                .as_slice()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            argmax == s.g
        })
        .count();
    println!("test accuracy: {:.3}", correct as f64 / ds.test.len() as f64);

    let stats = class_statistics(&ds, &params)?;
    println!("per-class support: {:?}", stats.support);
    println!("avg_prob row of class 0 (most frequent): {:?}",
        stats.avg_prob.row(0).iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    Ok(())
}
