//! Command-line front end: training runs, experiment matrices, the scalar
//! verification lab, the efficiency estimator, and the self-check suite.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use pcdistill::config::{default_experiment, experiment_from_file};
use pcdistill::distill::train_run;
use pcdistill::effmodel::{
    kv_cache_bytes, kv_reduction_visual, prefill_flops, sweep_tokens, ArchSpec, WorkloadSpec,
    SEVEN_B_TEXT_TOKENS,
};
use pcdistill::harness::matrix::run_matrix;
use pcdistill::harness::task::SyntheticTask;
use pcdistill::scalarlab::{verify_theorem, write_path_csv, CenterFunction, ScalarProblem};
use pcdistill::selfcheck::{run_gradient_suite, run_invariant_suite};
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "pcdistill", version, about)]
struct Cli {
    /// Flat key=value configuration file (see docs/CONFIG.md).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the training seed (and the matrix seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model with the configured mode and log per-step losses.
    Train,
    /// Run the full (mode x seed) training grid and evaluate every cell
    /// across compressors and ratios.
    Matrix,
    /// Verify the scalar-path total-variation bound and emit the report.
    ScalarLab {
        /// Center function preset: quad | affine | exp | softplus.
        #[arg(long, default_value = "quad")]
        center: String,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0.9)]
        r_max: f64,
    },
    /// Analytic prefill FLOPs and KV-cache table for a preset architecture.
    Efficiency {
        /// Architecture preset: 7b-class | toy.
        #[arg(long, default_value = "7b-class")]
        preset: String,
        /// Comma-separated retained visual token counts.
        #[arg(long, default_value = "576,128,64", value_delimiter = ',')]
        retained: Vec<usize>,
        #[arg(long, default_value_t = 576)]
        visual_tokens: usize,
        /// Prompt text length; defaults to the fitted 7B-class value.
        #[arg(long)]
        text_tokens: Option<usize>,
        /// Compression layer (1-based).
        #[arg(long, default_value_t = 2)]
        layer: usize,
    },
    /// Run gradient and invariant suites; exit nonzero on any failure.
    Selfcheck {
        /// Random instances per gradient check.
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_experiment(cli: &Cli) -> anyhow::Result<pcdistill::harness::ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => experiment_from_file(path).context("loading config")?,
        None => default_experiment(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train => {
            let cfg = load_experiment(&cli)?;
            let task = SyntheticTask::new(cfg.task.clone())?;
            let model_cfg = cfg.resolved_model(&task);
            let run_dir = cli.out.join(format!("train_{}_s{}", cfg.train.mode, cfg.train.seed));
            let artifact = train_run(&task, &model_cfg, &cfg.train, &run_dir)?;
            let last = artifact.records.last().expect("at least one step");
            println!(
                "trained mode={} steps={} final: loss_sft={:.4} loss_kd={:.4} loss_total={:.4}",
                cfg.train.mode,
                artifact.records.len(),
                last.loss_sft,
                last.loss_kd,
                last.loss_total
            );
            println!("checkpoint: {}", artifact.checkpoint.display());
            println!("steps log:  {}", artifact.steps_csv.display());
        }
        Command::Matrix => {
            let cfg = load_experiment(&cli)?;
            let out = run_matrix(&cfg, &cli.out)?;
            println!(
                "matrix complete: {} rows, chance level {:.4}",
                out.rows.len(),
                out.summary.chance_level
            );
            for g in &out.summary.groups {
                println!(
                    "mode={:<7} eval={:<10} r={:<6.4} retained-acc mean={:.4} std={:.4} ({} seeds)",
                    g.mode.name(),
                    g.eval_compressor.name(),
                    g.ratio,
                    g.mean_accuracy,
                    g.std_accuracy,
                    g.n_seeds
                );
            }
            println!("results: {}", out.results_csv.display());
            println!("summary: {}", out.summary_json.display());
        }
        Command::ScalarLab { center, lambda, delta, steps, r_max } => {
            let center = CenterFunction::preset(center, *r_max)?;
            let problem = ScalarProblem::uniform(center, *lambda, *delta, *steps, *r_max)?;
            let report = verify_theorem(&problem)?;
            std::fs::create_dir_all(&cli.out)?;
            let json_path = cli.out.join("theorem_report.json");
            std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
            let csv_path = cli.out.join("minimizer_paths.csv");
            let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
            write_path_csv(&report, &mut csv)?;
            csv.flush()?;
            println!("center={} lambda={} delta={}", report.center, report.lambda, report.delta);
            println!(
                "tv_direct={:.12} tv_progressive={:.12} kappa={:.6} factor={:.6}",
                report.tv_direct, report.tv_progressive, report.kappa, report.contraction_factor
            );
            println!(
                "bound_holds={} strict={} gamma_bound_holds={}",
                report.bound_holds, report.strict, report.gamma_bound_holds
            );
            println!("report: {}", json_path.display());
            println!("paths:  {}", csv_path.display());
            if !report.bound_holds {
                bail!("total-variation bound failed");
            }
        }
        Command::Efficiency { preset, retained, visual_tokens, text_tokens, layer } => {
            let arch = ArchSpec::preset(preset)?;
            let text = text_tokens.unwrap_or(SEVEN_B_TEXT_TOKENS);
            let rows = sweep_tokens(&arch, *visual_tokens, text, *layer, retained)?;
            let full = WorkloadSpec::new(*visual_tokens, text, usize::MAX, 0.0)?;
            let full_flops = prefill_flops(&arch, &full);
            let full_kv = kv_cache_bytes(&arch, &full);
            println!(
                "preset={preset} layers={} d_model={} visual={} text={text} compression layer={layer}",
                arch.n_layers, arch.d_model, visual_tokens
            );
            println!(
                "{:>9} {:>12} {:>10} {:>14} {:>10} {:>12}",
                "retained", "flops(T)", "flops_red", "kv_cache(MB)", "kv_red", "kv_red_vis"
            );
            std::fs::create_dir_all(&cli.out)?;
            let csv_path = cli.out.join("efficiency.csv");
            let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
            writeln!(csv, "retained,flops,kv_bytes,flops_reduction,kv_reduction_visual")?;
            for row in &rows {
                let w = if row.retained == *visual_tokens {
                    full
                } else {
                    WorkloadSpec::with_retained(*visual_tokens, text, *layer, row.retained)?
                };
                let f_red = 1.0 - row.flops / full_flops;
                let kv_red = 1.0 - row.kv_bytes as f64 / full_kv as f64;
                let kv_red_vis = kv_reduction_visual(&w);
                println!(
                    "{:>9} {:>12.2} {:>9.1}% {:>14.1} {:>9.1}% {:>11.1}%",
                    row.retained,
                    row.flops / 1e12,
                    f_red * 100.0,
                    row.kv_bytes as f64 / 1e6,
                    kv_red * 100.0,
                    kv_red_vis * 100.0
                );
                writeln!(
                    csv,
                    "{},{},{},{},{}",
                    row.retained, row.flops, row.kv_bytes, f_red, kv_red_vis
                )?;
            }
            csv.flush()?;
            println!("csv: {}", csv_path.display());
        }
        Command::Selfcheck { instances } => {
            let mut all_pass = true;
            println!("gradient suite ({instances} instances per op):");
            for r in run_gradient_suite(*instances, 2024) {
                println!("  [{}] {} — {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
                all_pass &= r.pass;
            }
            println!("invariant suite:");
            for r in run_invariant_suite(2025) {
                println!("  [{}] {} — {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
                all_pass &= r.pass;
            }
            if !all_pass {
                bail!("selfcheck failed");
            }
            println!("selfcheck passed");
        }
    }
    Ok(())
}
