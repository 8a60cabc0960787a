mod commands;
mod config;
mod report;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use plrr_core::model::TokenId;

use commands::{DeviceArgs, EstimateArgs, IntegrityArgs, TrainArgs};
use config::RunConfig;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

const AFTER_HELP: &str = concat!(
    "Configuration files hold `section.key = value` lines. Defaults:\n\n",
    config::default_config!(),
    "\n",
    "Logging: PLRR_LOG=error|info|debug. Exit codes: 0 ok, 1 runtime error, 2 handshake or config error, ",
    "3 selftest failure."
);

#[derive(Parser)]
#[command(name = "plrr", version, about = "Split device/cloud transformer with low-rank residual transmission")]
#[command(after_long_help = AFTER_HELP)]
struct Cli {
    /// Run configuration file
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the cloud half over TCP
    ServeCloud {
        /// Overrides wire.listen_addr
        #[arg(long)]
        listen: Option<String>,
        /// Exit after this many sessions
        #[arg(long)]
        max_sessions: Option<usize>,
    },
    /// Generate from a prompt of token ids on the device half
    RunDevice {
        /// Whitespace- or comma-separated token ids
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        n_tokens: usize,
        /// Private checkpoint holding trained M
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Record every frame to a capture file
        #[arg(long)]
        capture: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train M on a private dataset (`prompt ids | target ids` per line)
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "private.ckpt")]
        checkpoint_out: PathBuf,
        /// Per-step loss as CSV (step, lr, loss)
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        capture: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Analytical memory, FLOPs, network time and throughput estimates
    Estimate {
        /// Built-in preset (repeatable): small1b, small3b, llama7, llama13, llama30
        #[arg(long = "preset")]
        presets: Vec<String>,
        /// Preset file (repeatable)
        #[arg(long = "preset-file")]
        preset_files: Vec<PathBuf>,
        /// Rank in both directions
        #[arg(long)]
        rank: Option<u64>,
        #[arg(long)]
        r_c2d: Option<u64>,
        #[arg(long)]
        r_d2c: Option<u64>,
        /// Adapted layers; every layer when omitted
        #[arg(long)]
        n_adapted: Option<u64>,
        #[arg(long, default_value_t = 16)]
        wire_bits: u64,
        /// Itemize the per-token network time
        #[arg(long)]
        overhead: bool,
        /// Layers plain LoRA can adapt at the target speed
        #[arg(long)]
        lora_budget: bool,
        /// Fraction of cloud decode speed to keep
        #[arg(long, default_value_t = 0.7)]
        target: f64,
        /// Cloud decode tokens per second; defaults to the preset's calibration
        #[arg(long)]
        tps_cloud: Option<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train M on a memorization task, then swap in fresh public matrices
    AblateIntegrity {
        #[arg(long, default_value_t = 32)]
        pairs: usize,
        #[arg(long, default_value_t = 4)]
        prompt_len: usize,
        #[arg(long, default_value_t = 4)]
        target_len: usize,
        #[arg(long, default_value_t = 99)]
        task_seed: u64,
        #[arg(long, default_value_t = 20)]
        perturbations: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Equivalence, gradient and ledger checks over loopback
    Selftest {
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check a capture file against the direction whitelist and sequencing
    VerifyCapture {
        path: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_ids(s: &str) -> anyhow::Result<Vec<TokenId>> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| !w.is_empty())
        .map(|w| {
            w.parse()
                .map_err(|_| plrr_core::Error::Input(format!("`{w}` is not a token id")).into())
        })
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::ServeCloud { listen, max_sessions } => commands::serve_cloud(&cfg, listen.as_deref(), max_sessions)?,
        Command::RunDevice {
            prompt,
            n_tokens,
            checkpoint,
            capture,
            report,
        } => {
            let prompt = parse_ids(&prompt)?;
            let args = DeviceArgs {
                prompt: &prompt,
                n_tokens,
                checkpoint: checkpoint.as_deref(),
                capture: capture.as_deref(),
                report: report.as_deref(),
            };
            commands::run_device(&cfg, &args)?
        }
        Command::Train {
            dataset,
            checkpoint_out,
            loss_csv,
            capture,
            report,
        } => {
            let args = TrainArgs {
                dataset: &dataset,
                checkpoint_out: &checkpoint_out,
                loss_csv: loss_csv.as_deref(),
                capture: capture.as_deref(),
                report: report.as_deref(),
            };
            commands::train(&cfg, &args)?
        }
        Command::Estimate {
            presets,
            preset_files,
            rank,
            r_c2d,
            r_d2c,
            n_adapted,
            wire_bits,
            overhead,
            lora_budget,
            target,
            tps_cloud,
            csv,
            report,
        } => {
            let args = EstimateArgs {
                presets,
                preset_files,
                rank,
                r_c2d,
                r_d2c,
                n_adapted,
                wire_bits,
                overhead,
                lora_budget,
                target,
                tps_cloud,
                csv,
                report,
            };
            commands::estimate(&cfg, &args)?
        }
        Command::AblateIntegrity {
            pairs,
            prompt_len,
            target_len,
            task_seed,
            perturbations,
            report,
        } => {
            let args = IntegrityArgs {
                pairs,
                prompt_len,
                target_len,
                task_seed,
                perturbations,
                report,
            };
            commands::ablate_integrity(&cfg, &args)?
        }
        Command::Selftest { report } => {
            let r = selftest::run()?;
            for s in &r.suites {
                println!("{} {}: {}", if s.pass { "PASS" } else { "FAIL" }, s.name, s.detail);
            }
            if let Some(p) = report {
                report::Report::new("selftest", serde_json::json!({}), &r)?.emit(Some(&p))?;
            }
            if !r.pass {
                return Ok(ExitCode::from(EXIT_SELFTEST));
            }
        }
        Command::VerifyCapture { path, report } => {
            if !commands::verify_capture(&path, report.as_deref())? {
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<plrr_core::Error>() {
        Some(plrr_core::Error::Handshake(_) | plrr_core::Error::Config(_)) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PLRR_LOG", "error")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
