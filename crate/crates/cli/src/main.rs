use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod manifest;

use args::{Cli, Command};

/// Exit status for a failed command.
fn exit_code(err: &xvfi::Error) -> u8 {
    use xvfi::Error;
    if err.is_file_error() {
        return 3;
    }
    match err {
        Error::Shape { .. } | Error::LayerShape { .. } | Error::MissingLayer(_) | Error::UnexpectedLayer(_) => 4,
        Error::InvalidArgument(_) => 2,
        _ => 3,
    }
}

fn init_threads() -> xvfi::Result<()> {
    let threads = xvfi::parallel::threads_from_env()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| xvfi::Error::InvalidArgument(format!("cannot start worker threads: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Interpolate(a) => commands::interpolate(a),
        Command::Flows(a) => commands::flows(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Curate(a) => commands::curate(a),
        Command::Stats(a) => commands::stats(a),
        Command::InitWeights(a) => commands::init_weights(a),
        Command::InspectWeights(a) => commands::inspect_weights(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
