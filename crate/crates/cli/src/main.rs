use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use elegant::oracle::SuiteConfig;
use elegant_cli::run::{self, Overrides};
use elegant_cli::{exit_code, ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "elegant", version, about = "Entropy-regularized fine-tuning of diffusion samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method and write checkpoints and a manifest.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Score one or more runs; several runs also produce a comparison table.
    Evaluate {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        n_override: Option<usize>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Fine-tune and evaluate once per α listed under [sweep].
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long)]
        n_override: Option<usize>,
    },
    /// Check the exact identities against their oracles.
    OracleCheck {
        /// Suite settings as JSON; the defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        /// Adds this amount to one tilted transition per chain.
        #[arg(long, hide = true)]
        inject_tilt_error: Option<f64>,
    },
    /// Dump terminal samples of a run as CSV.
    Sample {
        manifest: PathBuf,
        #[arg(long)]
        n_override: Option<usize>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Finetune { config, out_dir, seed_override } => {
            let cfg = load(&config, seed_override)?;
            let dir = run::resolve_out_dir(&cfg, out_dir.as_deref());
            run::finetune(&cfg, &dir)?;
            println!("{}", dir.join(run::MANIFEST_FILE).display());
        }
        Command::Evaluate { manifests, out_dir, n_override, seed_override } => {
            let over = Overrides { n: n_override, seed: seed_override };
            for r in run::evaluate_many(&manifests, out_dir.as_deref(), over)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Sweep { config, out_dir, seed_override, n_override } => {
            let cfg = load(&config, seed_override)?;
            let dir = run::resolve_out_dir(&cfg, out_dir.as_deref());
            let summary = run::sweep(&cfg, &dir, Overrides { n: n_override, seed: None })?;
            for row in &summary.rows {
                if let Some(e) = &row.error {
                    eprintln!("α = {}: {e}", row.alpha);
                }
            }
            println!("{}", dir.join("sweep.csv").display());
        }
        Command::OracleCheck { config, out_dir, seed_override, inject_tilt_error } => {
            let mut suite = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<SuiteConfig>(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
                }
                None => SuiteConfig::default(),
            };
            if let Some(s) = seed_override {
                suite.seed = s;
            }
            run::oracle_check(&suite, out_dir.as_deref(), inject_tilt_error)?;
        }
        Command::Sample { manifest, n_override, seed_override } => {
            let path = run::sample(&manifest, Overrides { n: n_override, seed: seed_override })?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
