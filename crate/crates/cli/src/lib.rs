//! Command-line surface: `train`, `eval`, `ablate`, `gradcheck`, `synth`
//! and `infer` over a shared `key = value` configuration.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::Path;

use clap::{Arg, ArgAction, ArgMatches, Command};

pub use config::RunConfig;
pub use error::{CliError, CliResult, Failure};

fn with_keys(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value configuration file"),
    );
    config::KEYS.iter().fold(cmd, |cmd, k| {
        cmd.arg(Arg::new(k.name).long(k.flag).value_name("VALUE").help(k.help))
    })
}

pub fn command() -> Command {
    Command::new("rsgn")
        .about("Recursive semantics-guided vessel segmentation")
        .subcommand_required(true)
        .subcommand(with_keys(
            Command::new("train").about("Train a network and write a checkpoint and log"),
        ))
        .subcommand(with_keys(
            Command::new("eval")
                .about("Score the test split: CSV of AUC/SE/SP/COR/INF/WRN plus maps and masks")
                .arg(
                    Arg::new("oracle")
                        .long("oracle")
                        .action(ArgAction::SetTrue)
                        .help("score the ground truth itself"),
                ),
        ))
        .subcommand(with_keys(
            Command::new("ablate").about("Train and evaluate the four-leg ablation grid"),
        ))
        .subcommand(with_keys(
            Command::new("gradcheck")
                .about("Finite-difference check of every op and the toy network")
                .arg(Arg::new("fault").long("fault").value_name("OP").hide(true)),
        ))
        .subcommand(with_keys(
            Command::new("synth").about("Generate a synthetic vessel dataset and manifest"),
        ))
        .subcommand(with_keys(Command::new("infer").about("Predict one image")))
}

fn resolve(m: &ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(file) = m.get_one::<String>("config") {
        cfg.apply_file(Path::new(file))?;
    }
    for k in config::KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

/// Parses `args` (program name first) and runs the chosen command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            write!(out, "{}", e.render())?;
            return Ok(());
        }
        Err(e) => return Err(CliError::usage(e.render().to_string())),
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = resolve(sub)?;
    match name {
        "train" => commands::train(&cfg, out).map(drop),
        "eval" => commands::eval(&cfg, sub.get_flag("oracle"), out).map(drop),
        "ablate" => commands::ablate(&cfg, out).map(drop),
        "gradcheck" => {
            let fault = sub
                .get_one::<String>("fault")
                .map(|s| commands::parse_fault(s))
                .transpose()?;
            commands::gradcheck(&cfg, fault, out).map(drop)
        }
        "synth" => commands::synth(&cfg, out).map(drop),
        "infer" => commands::infer_image(&cfg, out).map(drop),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

/// Caps the global thread pool at `RSGN_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("RSGN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("RSGN_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))
}
