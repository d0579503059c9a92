use std::io::Write;
use std::process::ExitCode;
use std::sync::Arc;

use clap::parser::ValueSource;
use clap::{CommandFactory, FromArgMatches};
use ragops::cli::{action, render, Action, Cli, Sub};
use ragops::ops::execute;
use ragops_core::engine::Engine;
use serde_json::json;

const USAGE: u8 = 2;
const FAILED: u8 = 1;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        // help and version exit 0, everything else 2
        Err(e) => e.exit(),
    };
    let explicit = matches.value_source("config") == Some(ValueSource::CommandLine);
    let mut cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let sub = std::mem::replace(&mut cli.cmd, Sub::Health);
    let act = match action(sub) {
        Ok(a) => a,
        Err(msg) => return usage(&msg),
    };
    let config = match ragops::load_config(&cli.config, explicit) {
        Ok(c) => c,
        Err(msg) => return usage(&msg),
    };
    let engine = match Engine::open(config) {
        Ok(e) => e,
        Err(e) => return failure(cli.json, &e),
    };
    match act {
        Action::Serve { addr } => {
            let rt = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(FAILED);
                }
            };
            match rt.block_on(ragops::http::serve(Arc::new(engine), &addr)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {addr}: {e}");
                    ExitCode::from(FAILED)
                }
            }
        }
        Action::Run(cmd) => match execute(&engine, cmd.clone()) {
            Ok(out) => {
                let text = if cli.json {
                    serde_json::to_string_pretty(&out).unwrap_or_default()
                } else {
                    render(&cmd, &out)
                };
                // a closed pipe (`| head`) is not a failure
                let _ = writeln!(std::io::stdout().lock(), "{text}");
                ExitCode::SUCCESS
            }
            Err(e) => failure(cli.json, &e),
        },
    }
}

fn usage(msg: &str) -> ExitCode {
    eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
    ExitCode::from(USAGE)
}

fn failure(as_json: bool, e: &ragops_core::engine::EngineError) -> ExitCode {
    if as_json {
        println!("{}", json!({ "error": e.to_string(), "kind": e.kind() }));
    }
    eprintln!("error: {e}");
    ExitCode::from(FAILED)
}
