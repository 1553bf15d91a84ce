//! Experiment pipeline behind the `capforge` command.

pub mod config;
pub mod pipeline;
pub mod report;

use std::path::PathBuf;

use capforge_core::Error;

pub use config::ExperimentConfig;
pub use pipeline::Ctx;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_METRIC: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Training { .. } => EXIT_TRAINING,
        Error::Metric(_) => EXIT_METRIC,
        Error::Input(_) | Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::Json(_) => EXIT_DATA,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    SynthData,
    Rvq,
    Train,
    Generate,
    Rerank,
    Evaluate,
    Report,
    /// Every stage in order.
    Run,
}

/// Runs one command. `report_inputs` overrides the metric files compared by
/// `Report`; by default the current config's files are used.
pub fn run(cmd: Command, ctx: &Ctx, report_inputs: &[PathBuf], allow_hash_mismatch: bool) -> Result<(), Error> {
    match cmd {
        Command::SynthData => pipeline::cmd_synth_data(ctx).map(drop),
        Command::Rvq => pipeline::cmd_rvq(ctx).map(drop),
        Command::Train => pipeline::cmd_train(ctx).map(drop),
        Command::Generate => pipeline::cmd_generate(ctx).map(drop),
        Command::Rerank => pipeline::cmd_rerank(ctx),
        Command::Evaluate => pipeline::cmd_evaluate(ctx).map(drop),
        Command::Report => {
            let inputs: Vec<PathBuf> = if report_inputs.is_empty() {
                ctx.cfg
                    .rerank
                    .modes
                    .iter()
                    .map(|&m| ctx.path(&pipeline::metrics_path(m)))
                    .collect()
            } else {
                report_inputs.to_vec()
            };
            let cmp = report::compare(&inputs, allow_hash_mismatch)?;
            print!("{}", report::markdown(&cmp));
            report::write(&ctx.path("report"), &cmp)
        }
        Command::Run => {
            for c in [
                Command::SynthData,
                Command::Rvq,
                Command::Train,
                Command::Generate,
                Command::Rerank,
                Command::Evaluate,
                Command::Report,
            ] {
                log::info!("running {c:?}");
                run(c, ctx, report_inputs, allow_hash_mismatch)?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Input("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Metric("x".into())), EXIT_METRIC);
        let e = Error::Training {
            step: 3,
            message: "x".into(),
        };
        assert_eq!(exit_code(&e), EXIT_TRAINING);
        assert_ne!(EXIT_OK, EXIT_CONFIG);
    }
}
