use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use tak_bench::config::{AlphaPolicy, Overrides, PenaltySource, PipelineConfig};
use tak_bench::inspect::{inspect, render};
use tak_bench::pipeline::{Exec, Pipeline};
use tak_bench::Result;
use tak_core::regfactors::MergeMode;

#[derive(Parser)]
#[command(
    name = "tak",
    version,
    about = "Curvature-regularized task arithmetic on synthetic suites"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task suite.
    Gen(RunArgs),
    /// Pre-train the anchor network.
    Pretrain(RunArgs),
    /// Estimate per-task KFAC factors.
    Kfac(RunArgs),
    /// Merge factors per held-out task and report the merge error.
    MergeKfac(RunArgs),
    /// Fine-tune one task vector per task.
    Finetune(RunArgs),
    /// Write the composed checkpoint θ0 + α Σ τ_t.
    Compose {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Per-task and merged accuracy.
    Eval(RunArgs),
    /// Merged accuracy over the α grid.
    Sweep(RunArgs),
    /// Disentanglement error map for a task pair.
    Disentangle(RunArgs),
    /// Normalcy-score AUC per task.
    Localize(RunArgs),
    /// Task negation at matched control accuracy.
    Negate(RunArgs),
    /// Every stage end to end.
    Pipeline(RunArgs),
    /// Summarize curvature files.
    Inspect {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Emit JSON instead of tables.
        #[arg(long)]
        json: bool,
    },
}

fn enum_arg<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory holding artifacts and the manifest.
    #[arg(long, default_value = "tak-run")]
    out: PathBuf,
    /// Run every stage on one thread.
    #[arg(long)]
    serial: bool,
    #[arg(long, short)]
    verbose: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// none, merged, per_task, diagonal or exact.
    #[arg(long, value_parser = enum_arg::<PenaltySource>)]
    source: Option<PenaltySource>,
    /// input_weighted or scale_consistent.
    #[arg(long, value_parser = enum_arg::<MergeMode>)]
    merge_mode: Option<MergeMode>,
    #[arg(long)]
    apply_every: Option<usize>,
    /// Block-diagonal factor compression with this many blocks.
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// fixed, grid_best or both.
    #[arg(long, value_parser = enum_arg::<AlphaPolicy>)]
    alpha_policy: Option<AlphaPolicy>,
}

impl RunArgs {
    fn pipeline(&self) -> Result<Pipeline> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        Overrides {
            seed: self.seed,
            n_tasks: self.tasks,
            beta: self.beta,
            source: self.source,
            merge_mode: self.merge_mode,
            apply_every: self.apply_every,
            block_compression: self.blocks,
            epochs: self.epochs,
            lr: self.lr,
            alpha_policy: self.alpha_policy,
        }
        .apply(&mut cfg)?;
        Ok(Pipeline::new(cfg, &self.out, Exec::from_env(self.serial))?.verbose(self.verbose))
    }
}

fn finish(p: &Pipeline) -> Result<()> {
    p.manifest().save(p.dir())
}

fn pct(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| format!("{:.1}", 100.0 * x))
        .collect::<Vec<_>>()
        .join(" ")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => {
            let mut p = a.pipeline()?;
            let suite = p.suite()?;
            finish(&p)?;
            println!(
                "{} tasks, {} pre-training examples, min inter-task distance {:.3}",
                suite.n_tasks(),
                suite.pretrain.len(),
                suite.meta.min_inter_task_distance
            );
        }
        Command::Pretrain(a) => {
            let mut p = a.pipeline()?;
            let theta0 = p.theta0()?;
            finish(&p)?;
            println!("anchor with {} parameters", theta0.len());
        }
        Command::Kfac(a) => {
            let mut p = a.pipeline()?;
            let cs = p.curvatures()?;
            finish(&p)?;
            for c in &cs {
                println!(
                    "{}: {} samples, {} bytes",
                    c.meta.task_id,
                    c.meta.n_samples,
                    c.storage_bytes()
                );
            }
        }
        Command::MergeKfac(a) => {
            let mut p = a.pipeline()?;
            let reports = p.merge_kfac()?;
            finish(&p)?;
            for (t, r) in reports.iter().enumerate() {
                let worst = r
                    .layers
                    .iter()
                    .map(|l| l.actual / l.bound.max(f64::MIN_POSITIVE))
                    .fold(0.0, f64::max);
                println!(
                    "excluding task-{t}: {} tasks merged, max error/bound {worst:.4}",
                    r.n_tasks
                );
            }
        }
        Command::Finetune(a) => {
            let mut p = a.pipeline()?;
            let tvs = p.task_vectors()?;
            finish(&p)?;
            for tv in &tvs {
                println!("{}: |τ| = {:.4}", tv.task_id, tv.delta.norm());
            }
        }
        Command::Compose { run, alpha } => {
            let mut p = run.pipeline()?;
            let path = p.compose(alpha)?;
            finish(&p)?;
            println!("{}", path.display());
        }
        Command::Eval(a) => {
            let mut p = a.pipeline()?;
            let r = p.eval()?;
            finish(&p)?;
            println!("pre-trained  {}", pct(&r.pretrained));
            println!("individual   {}", pct(&r.individual));
            for m in [&r.merged_fixed, &r.merged_best].into_iter().flatten() {
                println!(
                    "merged α={:<4} {} (abs {:.2}, norm {:.2})",
                    m.alpha,
                    pct(&m.per_task),
                    m.absolute,
                    m.normalized
                );
            }
        }
        Command::Sweep(a) => {
            let mut p = a.pipeline()?;
            let rows = p.sweep()?;
            finish(&p)?;
            for r in &rows {
                println!("α={:.2} abs {:.2} norm {:.2}", r.alpha, r.absolute, r.normalized);
            }
        }
        Command::Disentangle(a) => {
            let mut p = a.pipeline()?;
            let m = p.disentangle()?;
            finish(&p)?;
            println!("mean ξ {:.4}", m.mean());
        }
        Command::Localize(a) => {
            let mut p = a.pipeline()?;
            let reports = p.localize()?;
            finish(&p)?;
            for (t, r) in reports.iter().enumerate() {
                println!("task-{t}: AUC {:.4}", r.auc);
            }
        }
        Command::Negate(a) => {
            let mut p = a.pipeline()?;
            let rows = p.negate()?;
            finish(&p)?;
            for r in &rows {
                println!(
                    "task-{}: α={:.2} target {:.1} (pre {:.1}) control {:.1} (pre {:.1}){}",
                    r.target,
                    r.alpha,
                    100.0 * r.target_accuracy,
                    100.0 * r.pretrained_target,
                    100.0 * r.control_accuracy,
                    100.0 * r.pretrained_control,
                    if r.feasible { "" } else { " infeasible" }
                );
            }
        }
        Command::Pipeline(a) => {
            let mut p = a.pipeline()?;
            let r = p.run()?;
            if let Some(m) = &r.merged_fixed {
                println!("merged α={} abs {:.2} norm {:.2}", m.alpha, m.absolute, m.normalized);
            }
            println!("{}", p.dir().join("results.json").display());
        }
        Command::Inspect { files, json } => {
            let report = inspect(&files)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", render(&report));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tak: {e}");
            ExitCode::FAILURE
        }
    }
}
