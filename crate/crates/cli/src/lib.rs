//! The `streetscape` batch command line.
//!
//! Every subcommand reads one flat [`RunConfig`], runs its pipeline and
//! leaves a `<command>.json` manifest (config hash, seeds, artifacts) in the
//! output directory, so any output can be regenerated from scratch.

pub mod commands;
pub mod config;
pub mod selftest;

use std::ffi::OsString;
use std::path::Path;

use clap::{Arg, ArgMatches, Command};
use serde_json::json;
use streetscape_core::{Error, Result};

pub use config::{RunConfig, KEYS};

pub const COMMANDS: [(&str, &str); 8] = [
    ("worldgen", "Generate a street world and write its layout"),
    ("dataset", "Render a windowed training dataset"),
    ("train", "Train the curriculum or a single stage"),
    ("generate", "Generate streetscapes along sampled trajectories"),
    ("interpolate", "Insert two frames between consecutive frames of a run"),
    ("render-gbuffer", "Render the G-buffer and ground-truth photo of one camera"),
    ("evaluate", "Drift and patch-similarity metrics of generated runs"),
    ("selftest", "Fast invariant suite"),
];

pub fn cli() -> Command {
    let mut root = Command::new("streetscape")
        .about("Synthetic street-view generation with a window diffusion model")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .arg(Arg::new("config").long("config").value_name("PATH").help("key = value file, applied before flags"));
        for k in KEYS {
            let help = match k.default {
                Some(d) if !d.is_empty() => format!("{} [default: {d}]", k.doc),
                _ => k.doc.to_owned(),
            };
            sub = sub.arg(Arg::new(k.name).long(k.name).value_name("VALUE").help(help));
        }
        root = root.subcommand(sub);
    }
    root
}

fn build_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

/// Runs `command` and writes its manifest; returns whether every check held.
pub fn execute(command: &str, cfg: &RunConfig) -> Result<bool> {
    let out = Path::new(cfg.raw("out"));
    std::fs::create_dir_all(out)?;
    let outcome = commands::run(command, cfg, out)?;
    let mut artifacts = outcome.artifacts;
    artifacts.sort();
    let config: serde_json::Map<String, serde_json::Value> =
        KEYS.iter().filter(|k| k.name != "out").map(|k| (k.name.to_owned(), json!(cfg.raw(k.name)))).collect();
    let manifest = json!({
        "command": command,
        "config_hash": cfg.hash(),
        "config": config,
        "seeds": outcome.seeds,
        "artifacts": artifacts,
        "summary": outcome.summary,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(out.join(format!("{command}.json")), text + "\n")?;
    Ok(!outcome.failed)
}

/// Exit code for an error: 2 for I/O, 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let result = build_config(sub).and_then(|cfg| execute(name, &cfg));
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("streetscape {name}: checks failed");
            1
        }
        Err(e) => {
            eprintln!("streetscape {name}: {e}");
            exit_code(&e)
        }
    }
}
