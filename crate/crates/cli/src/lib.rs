//! Command-line surface over the `edgeflow` pipeline.
//!
//! Configuration is layered: preset defaults, then the `--config` file, then
//! `--set` and `--seed` flags. Each run writes its effective configuration,
//! outputs and a log into the `--out` directory.

pub mod args;
pub mod commands;
pub mod layers;

use edgeflow::Error;

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParam(_) => 2,
        Error::Convergence { .. } => 4,
        _ => 3,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
        Error::UnsupportedDatatype(_) => "unsupported_datatype",
        Error::Shape(_) => "shape",
        Error::Degenerate(_) => "degenerate",
        Error::InvalidParam(_) => "invalid_param",
        Error::Convergence { .. } => "convergence",
        Error::NonFinite(_) => "non_finite",
        Error::Capacity(_) => "capacity",
        Error::Checkpoint(_) => "checkpoint",
    }
}

/// The JSON object printed on stderr when a command fails.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": {
            "kind": kind(e),
            "message": e.to_string(),
            "exit_code": exit_code(e),
        }
    })
    .to_string()
}

pub fn run(cli: &args::Cli) -> edgeflow::Result<String> {
    let cfg = layers::effective(&cli.common)?;
    let dir = commands::RunDir::create(&cli.common.out)?;
    commands::execute(&cli.command, &cfg, &dir)
}
