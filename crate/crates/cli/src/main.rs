mod args;
mod commands;

use std::collections::HashSet;
use std::ffi::OsString;
use std::io::Write;
use std::process::ExitCode;

use clap::{ArgAction, CommandFactory, Parser};

use args::Cli;
use commands::Failure;

const THREADS_ENV: &str = "TAPER_CALIB_THREADS";

fn main() -> ExitCode {
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let argv: Vec<OsString> = std::env::args_os().collect();
    let argv = match inject_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
        Err(Failure::File(path, e)) => {
            eprintln!("error: {}: {e}", path.display());
            ExitCode::from(2)
        }
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a non-negative integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

/// Splices `--key value` pairs from a `--config` file in front of the
/// user's own flags; keys already given on the command line are skipped.
fn inject_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(sub) = argv.get(1).and_then(|s| s.to_str()).map(str::to_owned) else {
        return Ok(argv);
    };
    let rest: Vec<String> = argv[2..].iter().map(|s| s.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in rest.iter().enumerate() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            path = rest.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_owned());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let root = Cli::command();
    let Some(cmd) = root.find_subcommand(&sub) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let pairs = taper_calib::io::parse_key_values(&text).map_err(|e| format!("config {path}: {e}"))?;

    let given: HashSet<&str> = rest
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a))
        .collect();
    let mut injected = Vec::new();
    for (key, value) in pairs {
        let flag = key.replace('_', "-");
        if flag == "config" {
            return Err(format!("config {path}: nested config keys are not allowed"));
        }
        let Some(arg) = cmd.get_arguments().find(|a| a.get_long() == Some(flag.as_str())) else {
            return Err(format!("config {path}: unknown key {key:?} for {sub}"));
        };
        if given.contains(flag.as_str()) {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" | "1" | "yes" => injected.push(format!("--{flag}")),
                "false" | "0" | "no" => {}
                _ => return Err(format!("config {path}: {key} expects true or false, got {value:?}")),
            }
        } else {
            injected.push(format!("--{flag}"));
            injected.push(value);
        }
    }
    let mut out = argv[..2].to_vec();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend(argv[2..].iter().cloned());
    Ok(out)
}
