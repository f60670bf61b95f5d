//! Reproduces the four-way ablation: the all-class baseline, branching alone,
//! knowledge transfer alone, and both combined — shared seeds throughout.
//!
//! ```bash
//! cargo run --release --example ablation_table
//! ```

use predbranch::evalreport::ablation_run;
use predbranch::synthdata::{generate_dataset, DatasetSpec};
use predbranch::trainer::TrainConfig;

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
    let cfg = TrainConfig {
        batch_size: 32,
        base_lr: 0.01,
        warmup_iters: 500,
        total_iters: 2_000,
        ..TrainConfig::default()
    };
    let seeds: Vec<u64> = (0..5).collect();
    let reports = ablation_run(&ds, &cfg, &seeds, &[50])?;

    println!("{:<10} {:>4} {:>8} {:>8} {:>8} {:>8}", "config", "seed", "mR@50", "top", "middle", "bottom");
    for r in &reports {
        let g = &r.groups[0];
        println!(
            "{:<10} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.config_name, r.seed, r.mean_recall[0], g.top, g.middle, g.bottom
        );
    }

    // Seed-averaged summary.
    println!("\nseed-averaged:");
    for (i, name) in ["baseline", "branch", "kt", "branch_kt"].iter().enumerate() {
        let rows: Vec<_> = reports.iter().skip(i).step_by(4).collect();
        let avg = |f: &dyn Fn(&predbranch::evalreport::EvalReport) -> f64| {
            rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
        };
        println!(
            "{:<10} mR {:.4} | bottom {:.4}",
            name,
            avg(&|r| r.mean_recall[0]),
            avg(&|r| r.groups[0].bottom)
        );
    }
    Ok(())
}
