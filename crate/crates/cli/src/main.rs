//! `spillnet` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use spillnet::pipeline::{self, Command, RunConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    Ingest,
    Exposures,
    Fit,
    Permute,
    Causal,
    Simulate,
    Report,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Command {
        match s {
            Sub::Ingest => Command::Ingest,
            Sub::Exposures => Command::Exposures,
            Sub::Fit => Command::Fit,
            Sub::Permute => Command::Permute,
            Sub::Causal => Command::Causal,
            Sub::Simulate => Command::Simulate,
            Sub::Report => Command::Report,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OutcomeArg {
    Deaths,
    Cases,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FilterArg {
    All,
    Contiguous,
    Noncontiguous,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Panel,
    CrossSectional,
}

/// Spillover exposures, negative binomial models, permutation tests and
/// propensity-weighted effects for region panels.
#[derive(Debug, Parser)]
#[command(name = "spillnet", version)]
struct Cli {
    /// Subcommand to run.
    #[arg(value_enum)]
    command: Sub,
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    outcome: Option<OutcomeArg>,
    #[arg(long = "network-filter", value_enum)]
    network_filter: Option<FilterArg>,
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn resolve(cli: &Cli) -> spillnet::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| spillnet::Error::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(o) = cli.outcome {
        cfg.set("outcome", match o {
            OutcomeArg::Deaths => "deaths",
            OutcomeArg::Cases => "cases",
        })?;
    }
    if let Some(f) = cli.network_filter {
        cfg.set("network_filter", match f {
            FilterArg::All => "all",
            FilterArg::Contiguous => "contiguous",
            FilterArg::Noncontiguous => "noncontiguous",
        })?;
    }
    if let Some(n) = cli.permutations {
        cfg.permutations = n;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.set("mode", match m {
            ModeArg::Panel => "panel",
            ModeArg::CrossSectional => "cross-sectional",
        })?;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn fail(command: Command, err: &spillnet::Error) -> ExitCode {
    let rec = pipeline::error_record(Some(command), err);
    eprintln!("{}", serde_json::to_string(&rec).unwrap_or_else(|_| err.to_string()));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = Command::from(cli.command);
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            let out = cli.out.clone().unwrap_or_else(|| RunConfig::default().out);
            pipeline::write_error(&out, Some(command), &e);
            return fail(command, &e);
        }
    };
    match pipeline::run(command, &cfg) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(command, &e),
    }
}
