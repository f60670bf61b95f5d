//! Command-line wiring for the pipeline.
//!
//! Subcommands: `gen-data`, `pretrain`, `cluster`, `train`, `eval`, `ablate`,
//! `grad-check`. Every run first writes a `<out>.manifest.json` capturing the
//! command, tool version, seed, inputs/outputs, and the fully resolved config,
//! which is enough to replay the run exactly. Configs come from JSON files
//! with command-line flags taking precedence.
//!
//! Exit codes: 0 success, 1 violated invariant or failed check (the message
//! names it), 2 usage errors. `PREDBRANCH_THREADS` caps internal parallelism;
//! the current implementation is single-threaded, so any positive value is
//! accepted and honored.

use crate::branching::RoutingMode;
use crate::clustering::{Linkage, Metric};
use crate::numerics::Tolerances;
use crate::synthdata::DatasetSpec;
use crate::trainer::{Checkpoint, TrainConfig, CHECKPOINT_FORMAT_VERSION};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "predbranch", version, about = "Branched long-tailed relation classifier pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    GenData(GenDataArgs),
    /// Train the all-class baseline and collect class statistics.
    Pretrain(PretrainArgs),
    /// Cluster classes by their average predicted distributions.
    Cluster(ClusterArgs),
    /// Train the branched predictor from a pretrained checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint with recall@K and group means.
    Eval(EvalArgs),
    /// Run the four-way ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Verify every analytic gradient against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum RoutingArg {
    Hard,
    Soft,
}

impl From<RoutingArg> for RoutingMode {
    fn from(r: RoutingArg) -> Self {
        match r {
            RoutingArg::Hard => RoutingMode::Hard,
            RoutingArg::Soft => RoutingMode::Soft,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Manhattan,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkageArg {
    Average,
    Single,
    Complete,
}

/// Training-config overrides shared by `pretrain`, `train`, and `ablate`.
#[derive(Args, Clone)]
struct TrainOverrides {
    /// JSON file with a full training config (defaults apply to missing runs).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Mini-batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Total SGD iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Memory-loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Enhancement scale constant.
    #[arg(long)]
    alpha: Option<f64>,
    /// Memory-loss margin weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Memory-loss margin.
    #[arg(long)]
    margin: Option<f64>,
    /// Routing mode used at evaluation time.
    #[arg(long, value_enum)]
    routing: Option<RoutingArg>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::format(format!("train config {}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(batch) = self.batch {
            cfg.batch_size = batch;
        }
        if let Some(iters) = self.iters {
            cfg.total_iters = iters;
        }
        if let Some(lambda) = self.lambda {
            cfg.kt.lambda_mem = lambda;
        }
        if let Some(alpha) = self.alpha {
            cfg.kt.alpha = alpha;
        }
        if let Some(gamma) = self.gamma {
            cfg.kt.gamma = gamma;
        }
        if let Some(margin) = self.margin {
            cfg.kt.margin = margin;
        }
        if let Some(routing) = self.routing {
            cfg.flags.routing = routing.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset spec JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the spec file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Input dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct ClusterArgs {
    /// Pretrained checkpoint with class statistics.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output partition JSON.
    #[arg(long)]
    out: PathBuf,
    /// Number of class groups.
    #[arg(long, default_value_t = 2)]
    groups: usize,
    #[arg(long, value_enum, default_value = "euclidean")]
    metric: MetricArg,
    #[arg(long, value_enum, default_value = "average")]
    linkage: LinkageArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Pretrained baseline checkpoint (provides class statistics).
    #[arg(long)]
    ckpt: PathBuf,
    /// Partition JSON from `cluster`.
    #[arg(long)]
    partition: PathBuf,
    /// Output checkpoint path (loss log goes to `<out>.loss.csv`).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Input dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate (branched predictor or baseline-only).
    #[arg(long)]
    ckpt: PathBuf,
    /// Output report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated recall cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "50")]
    k: Vec<usize>,
    #[arg(long, value_enum)]
    routing: Option<RoutingArg>,
}

#[derive(Args)]
struct AblateArgs {
    /// Input dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Merged ablation table CSV (per-run reports go next to it).
    #[arg(long)]
    out: PathBuf,
    /// Number of training seeds (seed, seed+1, ...).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma-separated recall cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "50")]
    k: Vec<usize>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Randomized instances per check.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Optional text report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Record written before any long computation; replaying the command with
/// this config reproduces the run exactly.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub resolved_config: serde_json::Value,
}

fn manifest_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", out.display()))
}

fn write_manifest(manifest: &RunManifest, out: &Path) -> Result<()> {
    let text = crate::jsonfmt::to_string_17(manifest)?;
    std::fs::write(manifest_path(out), text + "\n")?;
    Ok(())
}

fn thread_cap() -> Result<usize> {
    match std::env::var("PREDBRANCH_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => s
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "PREDBRANCH_THREADS must be a positive integer, got \"{s}\""
                ))
            }),
    }
}

/// Entry point used by the binary.
pub fn run() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    dispatch(&argv)
}

/// Parses and executes one invocation; returns the process exit status.
pub fn dispatch(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = thread_cap() {
        eprintln!("error: {e}");
        return 2;
    }
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Cluster(args) => cmd_cluster(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn to_config_value<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| Error::numerical(format!("config echo: {e}")))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)?;
    let mut spec: DatasetSpec = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("dataset spec {}: {e}", args.spec.display())))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    write_manifest(
        &RunManifest {
            command: "gen-data".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: spec.seed,
            inputs: vec![args.spec.display().to_string()],
            outputs: vec![args.out.display().to_string()],
            resolved_config: to_config_value(&spec)?,
        },
        &args.out,
    )?;
    let ds = crate::synthdata::generate_dataset(&spec)?;
    crate::synthdata::write_dataset(&ds, &args.out)?;
    println!(
        "wrote {} ({} train / {} val / {} test samples, {} classes)",
        args.out.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        spec.num_classes
    );
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    write_manifest(
        &RunManifest {
            command: "pretrain".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            inputs: vec![args.data.display().to_string()],
            outputs: vec![args.out.display().to_string()],
            resolved_config: to_config_value(&cfg)?,
        },
        &args.out,
    )?;
    let ds = crate::synthdata::read_dataset(&args.data)?;
    let params = crate::baseline::pretrain_baseline(&ds, &cfg)?;
    let stats = crate::baseline::class_statistics(&ds, &params)?;
    for &c in &stats.zero_support {
        eprintln!("warning: class {c} has no training samples; statistics row is a placeholder");
    }
    let train_loss = crate::baseline::mean_loss(&ds.train, &params)?;
    let ckpt = Checkpoint {
        version: CHECKPOINT_FORMAT_VERSION.to_string(),
        config: cfg.clone(),
        partition: None,
        params: crate::trainer::CheckpointParams {
            baseline: Some(params),
            stats: Some(stats),
            predictor: None,
        },
        iteration: cfg.total_iters,
        metrics: Some(crate::trainer::FinalMetrics {
            final_total_loss: train_loss,
            mean_loss_last_100: train_loss,
        }),
    };
    crate::trainer::save_checkpoint(&ckpt, &args.out)?;
    println!("wrote {} (train mean loss {train_loss:.6})", args.out.display());
    Ok(())
}

fn cmd_cluster(args: ClusterArgs) -> Result<()> {
    let metric = match args.metric {
        MetricArg::Euclidean => Metric::Euclidean,
        MetricArg::Manhattan => Metric::Manhattan,
    };
    let linkage = match args.linkage {
        LinkageArg::Average => Linkage::Average,
        LinkageArg::Single => Linkage::Single,
        LinkageArg::Complete => Linkage::Complete,
    };
    let ckpt = crate::trainer::load_checkpoint(&args.ckpt)?;
    write_manifest(
        &RunManifest {
            command: "cluster".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: ckpt.config.seed,
            inputs: vec![args.ckpt.display().to_string()],
            outputs: vec![args.out.display().to_string()],
            resolved_config: serde_json::json!({
                "groups": args.groups,
                "metric": metric,
                "linkage": linkage,
            }),
        },
        &args.out,
    )?;
    let stats = ckpt
        .params
        .stats
        .ok_or_else(|| Error::invalid("checkpoint has no class statistics; run pretrain first"))?;
    let partition = crate::clustering::cluster_predicates_with(&stats, args.groups, metric, linkage)?;
    std::fs::write(&args.out, crate::clustering::partition_to_json(&partition)? + "\n")?;
    println!(
        "wrote {} ({} groups, sizes {:?})",
        args.out.display(),
        partition.num_groups(),
        partition.groups().iter().map(|g| g.len()).collect::<Vec<_>>()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    write_manifest(
        &RunManifest {
            command: "train".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            inputs: vec![
                args.data.display().to_string(),
                args.ckpt.display().to_string(),
                args.partition.display().to_string(),
            ],
            outputs: vec![
                args.out.display().to_string(),
                format!("{}.loss.csv", args.out.display()),
            ],
            resolved_config: to_config_value(&cfg)?,
        },
        &args.out,
    )?;
    let ds = crate::synthdata::read_dataset(&args.data)?;
    let base = crate::trainer::load_checkpoint(&args.ckpt)?;
    let stats = base
        .params
        .stats
        .ok_or_else(|| Error::invalid("checkpoint has no class statistics; run pretrain first"))?;
    let partition =
        crate::clustering::partition_from_json(&std::fs::read_to_string(&args.partition)?)?;
    let (mut ckpt, log) = crate::trainer::train_predictor(&ds, &stats, &partition, &cfg)?;
    // Carry the pretrained baseline along for provenance.
    ckpt.params.baseline = base.params.baseline;
    crate::trainer::save_checkpoint(&ckpt, &args.out)?;
    crate::trainer::write_loss_log(
        &log,
        partition.num_groups(),
        format!("{}.loss.csv", args.out.display()),
    )?;
    let last = log.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("wrote {} (final batch loss {last:.6})", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = crate::trainer::load_checkpoint(&args.ckpt)?;
    let routing: RoutingMode = args
        .routing
        .map(Into::into)
        .unwrap_or(ckpt.config.flags.routing);
    write_manifest(
        &RunManifest {
            command: "eval".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: ckpt.config.seed,
            inputs: vec![args.data.display().to_string(), args.ckpt.display().to_string()],
            outputs: vec![args.out.display().to_string()],
            resolved_config: serde_json::json!({ "k": args.k, "routing": routing }),
        },
        &args.out,
    )?;
    let ds = crate::synthdata::read_dataset(&args.data)?;
    let report = if let Some(predictor) = &ckpt.params.predictor {
        crate::evalreport::evaluate(
            &ds,
            &crate::evalreport::ModelScorer::Predictor(predictor, routing),
            &args.k,
            "predictor",
            ckpt.config.seed,
        )?
    } else if let Some(baseline) = &ckpt.params.baseline {
        crate::evalreport::evaluate(
            &ds,
            &crate::evalreport::ModelScorer::Baseline(baseline),
            &args.k,
            "baseline",
            ckpt.config.seed,
        )?
    } else {
        return Err(Error::invalid("checkpoint contains neither a predictor nor a baseline"));
    };
    crate::evalreport::write_report_csv(std::slice::from_ref(&report), &args.out)?;
    for (i, &k) in report.ks.iter().enumerate() {
        let g = &report.groups[i];
        println!(
            "K={k}: mR {:.4} | top {:.4} middle {:.4} bottom {:.4}",
            report.mean_recall[i], g.top, g.middle, g.bottom
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    if args.seeds == 0 {
        return Err(Error::invalid("--seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (0..args.seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    write_manifest(
        &RunManifest {
            command: "ablate".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            inputs: vec![args.data.display().to_string()],
            outputs: vec![args.out.display().to_string()],
            resolved_config: serde_json::json!({
                "train": to_config_value(&cfg)?,
                "seeds": seeds,
                "k": args.k,
            }),
        },
        &args.out,
    )?;
    let ds = crate::synthdata::read_dataset(&args.data)?;
    let reports = crate::evalreport::ablation_run(&ds, &cfg, &seeds, &args.k)?;
    crate::evalreport::write_report_csv(&reports, &args.out)?;
    for r in &reports {
        let path = format!(
            "{}.{}.{}.csv",
            args.out.display(),
            r.config_name,
            r.seed
        );
        crate::evalreport::write_report_csv(std::slice::from_ref(r), path)?;
    }
    println!("wrote {} ({} rows)", args.out.display(), reports.len() * args.k.len());
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    if let Some(out) = &args.out {
        write_manifest(
            &RunManifest {
                command: "grad-check".into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                seed: args.seed,
                inputs: vec![],
                outputs: vec![out.display().to_string()],
                resolved_config: serde_json::json!({ "seed": args.seed, "trials": args.trials }),
            },
            out,
        )?;
    }
    let results = crate::gradsuite::run(args.seed, args.trials)?;
    let tol = Tolerances::DEFAULT.grad_rel;
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;
    for r in &results {
        lines.push(format!("{:32} max rel err {:.3e}", r.name, r.max_rel_err));
        worst = worst.max(r.max_rel_err);
    }
    lines.push(format!("overall max relative error: {worst:.3e} (tolerance {tol:.0e})"));
    let text = lines.join("\n");
    println!("{text}");
    if let Some(out) = &args.out {
        std::fs::write(out, text + "\n")?;
    }
    if worst > tol {
        return Err(Error::numerical(format!(
            "gradient check failed: max relative error {worst:.3e} exceeds {tol:.0e}"
        )));
    }
    Ok(())
}
