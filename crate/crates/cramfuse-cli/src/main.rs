//! `cramfuse` — experiment runner for the camera–radar fusion toolkit.
//!
//! Every verb reads the same JSON experiment config (see `print-config` for
//! the schema and defaults) and accepts `--set key=value` dotted overrides.
//! The root seed comes from the config, then `$CRAMFUSE_SEED`, then 0.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cramfuse_cli::commands;
use cramfuse_cli::config::{load_config, ExperimentConfig};

#[derive(Parser)]
#[command(name = "cramfuse", version, about = "Camera-radar fusion experiment runner")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted keys take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key by dotted path, e.g. --set pipeline.tau=0.2
    /// or --set mode=radar_only. May be repeated; applied in order after
    /// the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a synthetic dataset at the configured dataset path.
    Synth,
    /// Train the model heads and save them with the loss trace.
    Train,
    /// Evaluate one configuration: detections.json, eval.csv, timing.json.
    Run,
    /// Sweep the stage-1 foreground threshold tau (points, AP, latency).
    AblateThreshold {
        /// Comma-separated tau values in (0,1).
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15,0.25,0.4,0.6")]
        taus: Vec<f64>,
    },
    /// 2x2 grid: attention on/off x plain/dropout-trained model.
    AblateFusion,
    /// Sweep the RF intensity pre-filter threshold.
    AblateRf {
        /// Comma-separated thresholds in [0,1].
        #[arg(long, value_delimiter = ',', default_value = "0,0.35,0.5,0.6,0.7,0.8")]
        thresholds: Vec<f64>,
    },
    /// Camera-noise sweep comparing the plain and dropout-trained models.
    Robustness {
        /// Comma-separated noise sigmas.
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2,0.4")]
        sigmas: Vec<f64>,
    },
    /// Hyperparameter sensitivity table (epsilon, s, modality code, p_drop).
    AblateHparams {
        /// Attention depth-band half-widths to sweep.
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
        epsilons: Vec<f64>,
        /// Ray sample counts per side to sweep.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        scales: Vec<usize>,
        /// Dropout probabilities; each value retrains on the training
        /// dataset. Omit to skip the retrains.
        #[arg(long, value_delimiter = ',')]
        p_drops: Option<Vec<f64>>,
    },
    /// Print the merged experiment config as JSON and exit.
    PrintConfig,
}

fn dispatch(cfg: &ExperimentConfig, verb: &Verb) -> cramfuse::error::Result<()> {
    match verb {
        Verb::Synth => commands::cmd_synth(cfg),
        Verb::Train => commands::cmd_train(cfg),
        Verb::Run => commands::cmd_run(cfg),
        Verb::AblateThreshold { taus } => commands::cmd_ablate_threshold(cfg, taus),
        Verb::AblateFusion => commands::cmd_ablate_fusion(cfg),
        Verb::AblateRf { thresholds } => commands::cmd_ablate_rf(cfg, thresholds),
        Verb::Robustness { sigmas } => commands::cmd_robustness(cfg, sigmas),
        Verb::AblateHparams { epsilons, scales, p_drops } => commands::cmd_ablate_hparams(
            cfg,
            epsilons,
            scales,
            p_drops.as_deref().unwrap_or(&[]),
        ),
        Verb::PrintConfig => {
            println!(
                "{}",
                serde_json::to_string_pretty(cfg)
                    .map_err(|e| cramfuse::error::CramError::Config(e.to_string()))?
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(cli.common.config.as_deref(), &cli.common.sets) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match dispatch(&cfg, &cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
