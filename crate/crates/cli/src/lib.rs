//! Command implementations behind the `gsnet` binary.
//!
//! Exit codes: 0 success, 1 a metric or contract failure, 2 a usage error
//! (bad flags, unreadable inputs, invalid config).

mod args;
mod commands;
mod model_io;

use std::fmt;

pub use args::{Cli, Command, ConfigArgs};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<gsnet::Error> for CliError {
    fn from(e: gsnet::Error) -> Self {
        use gsnet::Error as E;
        let code = match e {
            E::Usage(_)
            | E::Config(_)
            | E::Io { .. }
            | E::Image { .. }
            | E::Json(_)
            | E::UnknownPolicy(_)
            | E::DuplicateName(_)
            | E::MissingEmbedding(_)
            | E::UnknownParameter(_)
            | E::Checkpoint(_) => 2,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train { config, manifest, out, seed, iters, embeddings } => {
            commands::train(&config, &manifest, &out, seed, iters, embeddings.as_deref())
        }
        Command::Infer { config, checkpoint, image, classes, out, embeddings } => {
            commands::infer(&config, &checkpoint, &image, &classes, &out, embeddings.as_deref())
        }
        Command::Eval { config, checkpoint, manifest, out, exclude, method, embeddings } => {
            commands::eval(&config, &checkpoint, &manifest, &out, &exclude, &method, embeddings.as_deref())
        }
        Command::Stats { manifest, out } => commands::stats(&manifest, &out),
        Command::Merge { manifest, out, name, background } => commands::merge(&manifest, &out, name, background),
        Command::Gradcheck { seed, trials, out } => commands::gradcheck(seed, trials, out.as_deref()),
        Command::Simcheck { a, b } => commands::simcheck(&a, &b),
        Command::Synth { out, classes, count, size, seed, name } => {
            commands::synth(&out, &classes, count, size, seed, &name)
        }
    }
}
