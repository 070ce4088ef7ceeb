use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use arousal::experiments::{
    self, load_toml, render_report, run_dir, Experiment, ExperimentSpec, GenerateConfig, RunConfig, CHECKPOINT_FILE,
    RUNS_ENV,
};
use arousal::selftest::{self, SelftestOptions};
use arousal::Error;

/// Arousal detection in synthetic sleep recordings with transfer learning
/// across channel montages.
#[derive(Debug, Parser)]
#[command(name = "arousal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its partition manifest.
    Generate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// TOML file with [generator] and [partition] sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the 1500-record layout instead of the desk-scale one.
        #[arg(long)]
        full_scale: bool,
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one experiment and select its detection threshold.
    Train {
        #[arg(long, value_parser = parse_experiment)]
        experiment: Experiment,
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = RUNS_ENV, default_value = "runs")]
        runs: PathBuf,
        /// TOML run configuration; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// FM checkpoint for PT/FT (default: the FM run under --runs).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate the four runs on the test split and compare them.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = RUNS_ENV, default_value = "runs")]
        runs: PathBuf,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Run the built-in verification suites.
    Selftest {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Add this offset to analytic gradients (the suite should then fail).
        #[arg(long, default_value_t = 0.0)]
        perturb_gradient: f64,
    },
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn generate_config(
    config: Option<&Path>,
    full_scale: bool,
    records: Option<usize>,
    seed: Option<u64>,
) -> arousal::Result<GenerateConfig> {
    let mut cfg = match config {
        Some(path) => load_toml(path)?,
        None if full_scale => GenerateConfig::full_scale(),
        None => GenerateConfig::default(),
    };
    if let Some(n) = records {
        cfg.generator.n_records = n;
    }
    if let Some(s) = seed {
        cfg.generator.rng_seed = s;
        cfg.partition.rng_seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> arousal::Result<bool> {
    match cli.command {
        Command::Generate {
            out,
            config,
            full_scale,
            records,
            seed,
            force,
        } => {
            let cfg = generate_config(config.as_deref(), full_scale, records, seed)?;
            let ds = experiments::generate(&out, &cfg, force)?;
            let p = &ds.manifest.partition;
            println!(
                "wrote {} records to {} (train1 {}, eval1 {}, test1 {}; train2 {}, eval2 {}, test2 {})",
                ds.manifest.files.len(),
                out.display(),
                p.train1.len(),
                p.eval1.len(),
                p.test1.len(),
                p.train2.len(),
                p.eval2.len(),
                p.test2.len()
            );
            Ok(true)
        }
        Command::Train {
            experiment,
            data,
            runs,
            config,
            from,
            seed,
            max_steps,
            learning_rate,
            force,
        } => {
            let mut cfg: RunConfig = match &config {
                Some(path) => load_toml(path)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = max_steps {
                cfg.train.max_steps = n;
            }
            if let Some(lr) = learning_rate {
                cfg.optimizer.learning_rate = lr;
            }
            let fm = from.unwrap_or_else(|| run_dir(&runs, Experiment::Fm).join(CHECKPOINT_FILE));
            let spec = ExperimentSpec::standard(experiment, &fm);
            let dir = run_dir(&runs, experiment);
            let rec = experiments::run_experiment(&spec, &data, &dir, &cfg, force)?;
            println!(
                "{experiment}: best step {} of {}, validation loss {:.4}, tau {:.2} (eval F1 {:.3}); run in {}",
                rec.best_step,
                rec.steps_run,
                rec.best_val.total,
                rec.tau(),
                rec.threshold
                    .grid
                    .iter()
                    .position(|t| *t == rec.tau())
                    .map_or(0.0, |i| rec.threshold.mean_f1[i]),
                dir.display()
            );
            Ok(true)
        }
        Command::Evaluate { data, runs, json } => {
            let report = experiments::evaluate(&runs, &data)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", render_report(&report));
            }
            Ok(true)
        }
        Command::Selftest {
            trials,
            seed,
            perturb_gradient,
        } => {
            let mut opts = SelftestOptions {
                trials,
                perturb_gradient,
                ..SelftestOptions::default()
            };
            if let Some(s) = seed {
                opts.seed = s;
            }
            let checks = selftest::run(&opts)?;
            for c in &checks {
                println!(
                    "{} {:<10} {:<28} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.suite,
                    c.name,
                    c.detail
                );
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) | Error::Toml(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
