//! The full two-phase training pipeline: baseline pretraining, class
//! clustering, then branched-predictor training with knowledge transfer.
//!
//! ```bash
//! cargo run --example train_predictor
//! ```

use predbranch::baseline::{class_statistics, pretrain_baseline};
use predbranch::clustering::cluster_predicates;
use predbranch::synthdata::{generate_dataset, DatasetSpec};
use predbranch::trainer::{save_checkpoint, train_predictor, write_loss_log, TrainConfig};

fn main() -> predbranch::Result<()> {
    let spec = DatasetSpec {
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
    };
    let ds = generate_dataset(&spec)?;

    // Phase 1: the all-class baseline provides class statistics.
    let cfg = TrainConfig {
        batch_size: 32,
        base_lr: 0.01,
        warmup_iters: 500,
        total_iters: 2_000,
        seed: 0,
        ..TrainConfig::default()
    };
    let baseline = pretrain_baseline(&ds, &cfg)?;
    let stats = class_statistics(&ds, &baseline)?;
    let partition = cluster_predicates(&stats, 2)?;
    println!("class groups: {:?}", partition.groups());

    // Phase 2: branched predictor with memories initialized from the stats.
    let (ckpt, log) = train_predictor(&ds, &stats, &partition, &cfg)?;
    println!(
        "loss: first batch {:.3}, last batch {:.3}",
        log.first().unwrap().total,
        log.last().unwrap().total
    );
    std::fs::create_dir_all("target/demo")?;
    save_checkpoint(&ckpt, "target/demo/predictor.ckpt.json")?;
    write_loss_log(&log, partition.num_groups(), "target/demo/predictor.loss.csv")?;
    println!("wrote target/demo/predictor.ckpt.json and .loss.csv");
    Ok(())
}
