mod args;
mod commands;
mod config;

use std::io::IsTerminal;
use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use args::{Cli, Command};
use config::FileConfig;

/// Machine-readable category for the `error[kind]:` prefix.
fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<vcnet_core::CoreError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<vcnet_label::LabelError>() {
            return e.code();
        }
        if cause.is::<serde_json::Error>() {
            return "config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "runtime"
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let mut cfg = FileConfig::load(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed);
    match &cli.command {
        Command::Phantom(a) => commands::phantom(a, &cfg),
        Command::Mip(a) => commands::mip(a),
        Command::Train(a) => commands::train_cmd(a, &mut cfg),
        Command::Finetune(a) => commands::finetune(a, &mut cfg),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Baseline(b) => commands::baseline(b, &cfg),
        Command::Serve(a) => commands::serve(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and 0 for --help.
    let cli = Cli::parse();
    let filter = EnvFilter::try_new(&cli.log).unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter).with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_kind(&e));
            ExitCode::from(1)
        }
    }
}
