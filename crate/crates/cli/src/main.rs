use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use udavi_core::config::ExperimentConfig;
use udavi_core::experiment::{self, RunLayout, Sweep};
use udavi_core::Error;

#[derive(Parser, Debug)]
#[command(name = "udavi", version, about = "Amortized posterior sampling for imaging inverse problems")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to the config's output_dir or runs/<task>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-stage training plus the continuation control.
    Train,
    /// Single-pass posterior samples with an NFE report.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by synth-data; defaults to the config's validation split.
        #[arg(long)]
        measurements: Option<PathBuf>,
        /// Samples per measurement; defaults to eval.infer_samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Paired baseline vs uncertainty-aware comparison over eval.seeds seeds.
    Eval {
        /// Baseline checkpoint; defaults to <out>/checkpoints/control.ckpt.
        #[arg(long)]
        davi: Option<PathBuf>,
        /// Uncertainty-aware checkpoint; defaults to <out>/checkpoints/stage2.ckpt.
        #[arg(long)]
        udavi: Option<PathBuf>,
        /// Trained run directories to evaluate in place; a combined p-value
        /// table goes to <out>/pvalues.csv.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
    },
    /// Second-stage sweep from a shared first stage.
    Ablate {
        /// Comma-separated uncertainty scales.
        #[arg(long, value_delimiter = ',', conflicts_with = "window")]
        lambda: Vec<f64>,
        /// Comma-separated memory windows.
        #[arg(long, value_delimiter = ',')]
        window: Vec<usize>,
    },
    /// Writes the synthesized dataset cache and split.
    SynthData,
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli_out: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.task.name()))
}

fn require_config(cli: &Cli) -> Result<ExperimentConfig> {
    let Some(path) = &cli.config else { bail!(Error::Config("--config is required for this command".into())) };
    load_config(path, cli.seed)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train => {
            let cfg = require_config(&cli)?;
            let out = out_dir(&cli.out, &cfg);
            let o = experiment::cmd_train(&cfg, &out)?;
            println!("config_hash {}", o.config_hash);
            for (label, path, hash) in [
                ("stage1", &o.stage1, &o.stage1_params),
                ("stage2", &o.stage2, &o.stage2_params),
                ("control", &o.control, &o.control_params),
            ] {
                println!("{label:8} {}  params {hash}", path.display());
            }
        }
        Command::Infer { checkpoint, measurements, samples } => {
            let cfg = require_config(&cli)?;
            let out = out_dir(&cli.out, &cfg);
            let k = samples.unwrap_or(cfg.eval.infer_samples);
            let r = experiment::cmd_infer(&cfg, checkpoint, measurements.as_deref(), k, &out)?;
            println!(
                "{} measurements x {} samples: {} generator evaluations, NFE per sample {}",
                r.measurements, r.samples_per_measurement, r.generator_evaluations, r.nfe_per_sample
            );
        }
        Command::Eval { davi, udavi, runs } => {
            if runs.is_empty() {
                let cfg = require_config(&cli)?;
                let out = out_dir(&cli.out, &cfg);
                let layout = RunLayout::new(&out);
                let d = davi.clone().unwrap_or_else(|| layout.checkpoint("control"));
                let u = udavi.clone().unwrap_or_else(|| layout.checkpoint("stage2"));
                let s = experiment::cmd_eval(&cfg, &d, &u, &out)?;
                print_summary(&s);
            } else {
                if davi.is_some() || udavi.is_some() {
                    bail!(Error::Config("--davi/--udavi cannot be combined with --run".into()));
                }
                let mut summaries = Vec::new();
                for run_dir in runs {
                    let layout = RunLayout::new(run_dir);
                    let cfg = load_config(&layout.config(), cli.seed)?;
                    let s = experiment::cmd_eval(&cfg, &layout.checkpoint("control"), &layout.checkpoint("stage2"), run_dir)?;
                    print_summary(&s);
                    summaries.push(s);
                }
                let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
                experiment::write_pvalue_table(&summaries, &out.join("pvalues.csv"))?;
                println!("p-value table {}", out.join("pvalues.csv").display());
            }
        }
        Command::Ablate { lambda, window } => {
            let cfg = require_config(&cli)?;
            let out = out_dir(&cli.out, &cfg);
            let sweep = if !lambda.is_empty() {
                Sweep::Lambda(lambda.clone())
            } else if !window.is_empty() {
                Sweep::MemoryWindow(window.clone())
            } else {
                bail!(Error::Config("ablate needs --lambda or --window values".into()));
            };
            let r = experiment::cmd_ablate(&cfg, &sweep, &out)?;
            println!("{:>10} {:>10} {:>14} {:>12} {:>12}", r.sweep, "psnr", "frechet_desk", "p_psnr", "p_frechet");
            for row in &r.rows {
                println!(
                    "{:>10} {:>10.4} {:>14.6} {:>12.3e} {:>12.3e}",
                    row.value,
                    row.psnr,
                    row.frechet_desk,
                    row.delta_psnr.p_value.unwrap_or(f64::NAN),
                    row.delta_frechet_desk.p_value.unwrap_or(f64::NAN)
                );
            }
            println!("best by psnr: {}  best by frechet_desk: {}", r.best_by_psnr, r.best_by_frechet_desk);
        }
        Command::SynthData => {
            let cfg = require_config(&cli)?;
            let out = out_dir(&cli.out, &cfg);
            let m = experiment::cmd_synth_data(&cfg, &out)?;
            println!("{} records on {} (clamp rate {:.3e}) in {}", m.count, m.dims, m.clamp_rate, out.join("data").display());
        }
    }
    Ok(())
}

fn print_summary(s: &experiment::EvalSummary) {
    println!(
        "{}: psnr {:.4} -> {:.4}, frechet_desk {:.6} -> {:.6} over {} seeds",
        s.task, s.psnr_davi_mean, s.psnr_udavi_mean, s.frechet_desk_davi_mean, s.frechet_desk_udavi_mean, s.seeds
    );
    for t in &s.tests {
        match (t.t_stat, t.p_value) {
            (Some(ts), Some(p)) => println!("  delta {:13} mean {:+.6e}  t {:+.4}  p {:.3e}", t.metric, t.mean_delta, ts, p),
            _ => println!("  delta {:13} mean {:+.6e}  zero variance", t.metric, t.mean_delta),
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::Divergence { .. } => 3,
                Error::Io(_) | Error::Checkpoint(_) => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("UDAVI_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size worker pool: {e}");
            return ExitCode::from(1);
        }
        info!("worker pool capped at {n} threads");
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
