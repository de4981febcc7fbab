//! The `warpgeo` command-line driver: scene generation, direct optimization,
//! evaluation, layer application, gradient checks and ablation sweeps.
//!
//! Exit codes: 0 on success, 1 when `gradcheck` exceeds its tolerances,
//! 2 on configuration or input errors, 3 on numeric failure.

pub mod args;
pub mod commands;
pub mod config;
pub mod sequence;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub use args::Cli;
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_THRESHOLD: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// A run produced non-finite values.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// A check ran to completion but missed its acceptance threshold.
#[derive(Debug)]
pub struct ThresholdFailure(pub String);

impl fmt::Display for ThresholdFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ThresholdFailure {}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ThresholdFailure>() {
            return EXIT_THRESHOLD;
        }
        if cause.is::<NumericFailure>() {
            return EXIT_NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<warpgeo::Error>() {
            if matches!(e, warpgeo::Error::NonFinite { .. } | warpgeo::Error::Domain(_)) {
                return EXIT_NUMERIC;
            }
        }
    }
    EXIT_CONFIG
}

fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads.filter(|&n| n > 0) {
        // Only the first configuration in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `argv`, runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    configure_threads(cli.common.threads);
    let result = RunConfig::resolve(&cli).and_then(|cfg| commands::execute(&cfg));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_classification() {
        let threshold = anyhow::Error::new(ThresholdFailure("tol".into())).context("gradcheck");
        assert_eq!(exit_code(&threshold), EXIT_THRESHOLD);
        assert_eq!(exit_code(&NumericFailure("nan".into()).into()), EXIT_NUMERIC);
        let non_finite = warpgeo::Error::NonFinite {
            what: "depth".into(),
            index: 0,
        };
        assert_eq!(exit_code(&anyhow::Error::new(non_finite).context("optimize")), EXIT_NUMERIC);
        assert_eq!(exit_code(&warpgeo::Error::InvalidInput("bad".into()).into()), EXIT_CONFIG);
        assert_eq!(exit_code(&anyhow::anyhow!("missing flag")), EXIT_CONFIG);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run(["warpgeo", "--help"]), EXIT_OK);
        assert_eq!(run(["warpgeo", "optimize", "--no-such-flag"]), EXIT_CONFIG);
    }
}
