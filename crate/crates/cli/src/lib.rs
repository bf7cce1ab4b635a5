//! The `fracsrf` command line.
//!
//! Exit codes: 0 on success, 1 for bad flags or unreadable files, 2 when a
//! computation fails (non-finite loss, quadrature divergence, failed
//! gradient check).

mod args;
mod commands;
mod error;
mod output;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::Cli;
pub use error::{CliError, CliResult};

use args::Command;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenSinusoids(a) => commands::gen_sinusoids(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Exp1(a) => commands::exp1(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::InspectKernels(a) => commands::inspect_kernels(a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
        Command::CountParams(a) => commands::count_params(a),
        Command::CompareCf(a) => commands::compare_cf_cmd(a),
    }
}
