use std::path::PathBuf;
use std::process::ExitCode;

use capforge::{exit_code, run, Command, Ctx, ExperimentConfig, EXIT_CONFIG};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "capforge", version, about = "Codec-input audio captioning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set model.hidden=32`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Experiment seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic datasets and apply the dataset rules.
    SynthData,
    /// Fit the residual quantizer and encode every clip.
    Rvq,
    /// Pretrain then finetune the captioner.
    Train,
    /// Beam and nucleus candidates for the test split.
    Generate,
    /// Filter and rerank candidates.
    Rerank,
    /// Score the top caption of each system.
    Evaluate,
    /// Compare systems side by side.
    Report {
        /// Metric reports to compare instead of the current run's.
        inputs: Vec<PathBuf>,
        /// Compare reports produced by different configs.
        #[arg(long)]
        allow_hash_mismatch: bool,
    },
    /// Every stage in order.
    Run,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = (|| {
        let base = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut cfg = base.with_overrides(&cli.sets)?;
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(j) = cli.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build_global()
                .map_err(|e| capforge_core::Error::Config(format!("cannot size worker pool: {e}")))?;
        }
        let ctx = Ctx::new(cfg)?;
        let (cmd, inputs, allow) = match &cli.command {
            Cmd::SynthData => (Command::SynthData, Vec::new(), false),
            Cmd::Rvq => (Command::Rvq, Vec::new(), false),
            Cmd::Train => (Command::Train, Vec::new(), false),
            Cmd::Generate => (Command::Generate, Vec::new(), false),
            Cmd::Rerank => (Command::Rerank, Vec::new(), false),
            Cmd::Evaluate => (Command::Evaluate, Vec::new(), false),
            Cmd::Report {
                inputs,
                allow_hash_mismatch,
            } => (Command::Report, inputs.clone(), *allow_hash_mismatch),
            Cmd::Run => (Command::Run, Vec::new(), false),
        };
        run(cmd, &ctx, &inputs, allow)
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("capforge: {e}");
            let code = exit_code(&e);
            ExitCode::from(if code == 0 { EXIT_CONFIG } else { code } as u8)
        }
    }
}
