//! Command-line driver: synthetic data, training, streaming simulation,
//! evaluation, attribution and K ablations, each configured by a
//! [`manifest::RunManifest`].

// NaN-rejecting range checks read as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;

pub use args::Cli;
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;

/// Layers flags over the manifest file (or defaults) and runs the command.
pub fn run(cli: &Cli) -> CliResult<String> {
    let mut m = match &cli.manifest {
        Some(path) => RunManifest::load(path)?,
        None => RunManifest::default(),
    };
    cli.apply(&mut m);
    m.resolve(cli.command.name());
    commands::dispatch(&mut m)
}
