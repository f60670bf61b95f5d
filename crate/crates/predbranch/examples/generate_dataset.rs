//! Generates a synthetic long-tailed relation dataset and inspects its
//! planted structure.
//!
//! ```bash
//! cargo run --example generate_dataset
//! ```

use predbranch::synthdata::{generate_dataset, write_dataset, DatasetSpec};

fn main() -> predbranch::Result<()> {
    let spec = DatasetSpec {
        num_classes: 20,
        feature_dim: 16,
        n_train: 20_000,
        n_val: 2_000,
        n_test: 4_000,
        // Exponent chosen so the most frequent class outnumbers the rarest ~50:1.
        imbalance_exponent: (50.0f64).ln() / (20.0f64).ln(),
        n_latent_clusters: 2,
        cluster_separation: 4.0,
        noise_scale: 0.8,
        scene_size: 16,
        seed: 7,
    };
    let ds = generate_dataset(&spec)?;

    println!("train class histogram (head -> tail):");
    for (c, n) in ds.class_counts.train.iter().enumerate() {
        println!("  class {c:>2} | cluster {} | {}", spec.planted_cluster(c), "#".repeat(1 + n / 150));
    }
    let head = ds.class_counts.train[0];
    let tail = ds.class_counts.train[spec.num_classes - 1];
    println!("head:tail ratio = {head}:{tail} ≈ {:.1}", head as f64 / tail as f64);

    // Planted similarity: same-cluster class means are closer than
    // cross-cluster ones.
    let dist = |a: usize, b: usize| {
        ds.class_means_e
            .row(a)
            .iter()
            .zip(ds.class_means_e.row(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    println!("mean distance class0-class2 (same cluster):  {:.3}", dist(0, 2));
    println!("mean distance class0-class1 (cross cluster): {:.3}", dist(0, 1));

    std::fs::create_dir_all("target/demo")?;
    write_dataset(&ds, "target/demo/dataset.jsonl")?;
    println!("wrote target/demo/dataset.jsonl");
    Ok(())
}
