//! Command-line front end: configuration, CSV ingestion, reports and SVG
//! figures around `nuisance_core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod svg;

pub use commands::{dispatch, Cli, ReportBundle};
pub use error::{CliError, CliResult};

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(bundle) => {
            for p in bundle.all() {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
