//! Groups classes by the similarity of their average predicted distributions
//! and compares the result against the generator's planted clusters.
//!
//! ```bash
//! cargo run --example cluster_classes
//! ```

use predbranch::baseline::{class_statistics, pretrain_baseline};
use predbranch::clustering::{adjusted_rand_index, cluster_predicates, partition_to_json};
use predbranch::synthdata::{generate_dataset, DatasetSpec};
use predbranch::trainer::TrainConfig;

fn main() -> predbranch::Result<()> {
    let spec = DatasetSpec {
        num_classes: 20,
        feature_dim: 16,
        n_train: 4_000,
        n_val: 0,
        n_test: 0,
        imbalance_exponent: 1.0,
        n_latent_clusters: 2,
        cluster_separation: 4.0,
        noise_scale: 0.8,
        scene_size: 16,
        seed: 5,
    };
    let ds = generate_dataset(&spec)?;
    let cfg = TrainConfig {
        total_iters: 400,
        warmup_iters: 50,
        base_lr: 0.05,
        batch_size: 32,
        seed: 5,
        ..TrainConfig::default()
    };
    let baseline = pretrain_baseline(&ds, &cfg)?;
    let stats = class_statistics(&ds, &baseline)?;

    let partition = cluster_predicates(&stats, 2)?;
    for (gi, group) in partition.groups().iter().enumerate() {
        println!("group {gi}: {group:?}");
    }

    let planted: Vec<usize> = (0..spec.num_classes).map(|c| spec.planted_cluster(c)).collect();
    let found: Vec<usize> = (0..spec.num_classes).map(|c| partition.group_of(c)).collect();
    println!("adjusted Rand index vs planted clusters: {:.3}", adjusted_rand_index(&planted, &found)?);
    println!("serialized: {}", partition_to_json(&partition)?);
    Ok(())
}
