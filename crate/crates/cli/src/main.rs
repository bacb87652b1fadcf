use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use simknot::experiment::{
    cmd_ablation, cmd_align, cmd_report, cmd_similarity, cmd_sweep, cmd_train_source, cmd_transfer, Ablation,
    ExperimentConfig,
};
use simknot::simknot::{normalized_auc, Method};
use simknot::Error;

#[derive(Parser)]
#[command(name = "simknot", version, about = "Similarity-based transfer between continuous-control tasks")]
struct Cli {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for single runs; sweeps use the seeds in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory of the configuration.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Sac,
    SacFbo,
}

impl From<Baseline> for Method {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::Sac => Method::Sac,
            Baseline::SacFbo => Method::SacFbo,
        }
    }
}

#[derive(Args)]
struct AblationFlags {
    /// Drop the reward-alignment term.
    #[arg(long)]
    no_align: bool,
    /// Drop the geometry-preservation term.
    #[arg(long)]
    no_geo: bool,
}

impl AblationFlags {
    fn condition(&self) -> Ablation {
        match (self.no_align, self.no_geo) {
            (false, false) => Ablation::Full,
            (false, true) => Ablation::WithoutGeometry,
            (true, false) => Ablation::WithoutAlignment,
            (true, true) => Ablation::WithoutBoth,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a source agent and fit its reward and transition models.
    TrainSource {
        #[arg(long)]
        task: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Learn the alignment between target data and one source.
    Align {
        /// Dataset CSV, or a directory holding `dataset.csv`.
        #[arg(long)]
        target_data: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Rank sources by similarity for one or more target datasets.
    Similarity {
        #[arg(long, num_args = 1.., required = true)]
        target: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        sources: Vec<PathBuf>,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Full transfer run on a target task.
    Transfer {
        #[arg(long)]
        target: String,
        #[arg(long, num_args = 1..)]
        sources: Vec<PathBuf>,
        /// Run a baseline instead of transfer.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Plain-RL comparison run on a target task.
    Baseline {
        #[arg(long)]
        target: String,
        #[arg(long, value_enum, default_value = "sac")]
        method: Baseline,
    },
    /// Every target, method, and seed of the configuration, then the report.
    Sweep,
    /// Summarize completed runs.
    Report {
        #[arg(long)]
        runs_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Self-pair comparison of alignment-loss conditions.
    Ablation {
        #[arg(long)]
        task: String,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        4
    } else if e.is_numeric() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon_threads(n) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn rayon_threads(n: usize) -> Result<(), String> {
    if n == 0 {
        return Err("--jobs must be at least 1".into());
    }
    simknot::set_worker_threads(n).map_err(|e| e.to_string())
}

fn print_json<T: serde::Serialize>(value: &T) -> simknot::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> simknot::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    let seed = cli.seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0));
    let pipeline = &cfg.pipeline;
    match cli.command {
        Command::TrainSource { task, steps } => {
            let dir = cfg.source_dir(&task);
            let trained = cmd_train_source(&task, steps.unwrap_or(cfg.source_steps), seed, pipeline, &dir)?;
            let last = trained.curve.last().map_or(f64::NAN, |p| p.mean_eval_return);
            log::info!("source `{task}` written to {} (final evaluation {last:.3})", dir.display());
        }
        Command::Align { target_data, source, ablation } => {
            let dir = cfg.out_dir.join("alignment");
            let acfg = ablation.condition().apply(&pipeline.alignment);
            let m = cmd_align(&target_data, &source, &acfg, seed, &dir)?;
            log::info!("alignment {} -> {} written to {}", m.source_id, m.target_id, dir.display());
        }
        Command::Similarity { target, sources, ablation } => {
            let mut p = pipeline.clone();
            p.alignment = ablation.condition().apply(&p.alignment);
            let reports = cmd_similarity(&target, &sources, &p, seed, &cfg.out_dir.join("similarity"))?;
            print_json(&reports)?;
        }
        Command::Transfer { target, sources, baseline } => {
            let method = baseline.map_or(Method::Simknot, Method::from);
            let dir = cfg.run_dir(&target, method, seed);
            let run = cmd_transfer(&target, &sources, method, pipeline, seed, &dir)?;
            log::info!(
                "{} on `{target}`: normalized AUC {:.3}, written to {}",
                method.name(),
                normalized_auc(&run.curve),
                dir.display()
            );
        }
        Command::Baseline { target, method } => {
            let method = Method::from(method);
            let dir = cfg.run_dir(&target, method, seed);
            let run = cmd_transfer(&target, &[], method, pipeline, seed, &dir)?;
            log::info!(
                "{} on `{target}`: normalized AUC {:.3}, written to {}",
                method.name(),
                normalized_auc(&run.curve),
                dir.display()
            );
        }
        Command::Sweep => {
            let dirs = cmd_sweep(&cfg, &[Method::Sac, Method::SacFbo, Method::Simknot])?;
            log::info!("{} runs written under {}", dirs.len(), cfg.out_dir.display());
        }
        Command::Report { runs_dir, out } => {
            let out = out.unwrap_or_else(|| cfg.out_dir.join("report"));
            let report = cmd_report(&runs_dir, &out, &cfg.report)?;
            print_json(&report.methods)?;
        }
        Command::Ablation { task, steps } => {
            let seeds = match cli.seed {
                Some(s) => vec![s],
                None => cfg.seeds.clone(),
            };
            let dir = cfg.out_dir.join("ablation");
            let report = cmd_ablation(&task, &seeds, steps.unwrap_or(cfg.source_steps), pipeline, Some(&dir))?;
            for c in Ablation::ALL {
                println!("{:<18} {:.4}", c.name(), report.mean(c));
            }
        }
    }
    Ok(())
}
