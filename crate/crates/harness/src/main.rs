// SPDX-License-Identifier: Apache-2.0

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, IsTerminal};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use mmb::engine::Engine;
use mmb::pipeline::{PipelineConfig, DEFAULT_VECTOR_SIZE};
use mmb_harness::repl::{load_script, run_session};
use mmb_harness::replay::replay_pcap;
use mmb_harness::scenario::{run_on, Scenario, ScenarioKind};
use serde::Serialize;
use tracing::{error, info};
use tracing_subscriber::EnvFilter;

/// Userspace middlebox: rule shell, pcap replay and benchmark scenarios.
///
/// Without --scenario or --pcap-in, reads `mmb` commands from stdin.
#[derive(Debug, Parser)]
#[command(name = "mmb", version)]
struct Args {
    /// Replay this capture through the rules.
    #[arg(long, value_name = "PATH", conflicts_with = "scenario")]
    pcap_in: Option<PathBuf>,
    /// Write forwarded packets of the replay here.
    #[arg(long, value_name = "PATH", requires = "pcap_in")]
    pcap_out: Option<PathBuf>,
    /// Commands to run first, one per line.
    #[arg(long, value_name = "FILE")]
    rules: Option<PathBuf>,
    /// forward, firewall, stateful, nat, tcp-opts or mask-limit.
    #[arg(long, value_name = "NAME")]
    scenario: Option<ScenarioKind>,
    /// Rules the scenario generates; defaults per scenario.
    #[arg(long, value_name = "N", requires = "scenario")]
    rule_count: Option<usize>,
    #[arg(long, value_name = "N", default_value_t = 1)]
    seed: u64,
    #[arg(long, value_name = "V", default_value_t = DEFAULT_VECTOR_SIZE)]
    vector_size: usize,
    #[arg(long, value_name = "N", default_value_t = 1)]
    workers: usize,
    /// Write the run report as JSON.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Other(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_report<T: Serialize>(path: &Option<PathBuf>, value: &T) -> Result<(), CliError> {
    let Some(path) = path else {
        return Ok(());
    };
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(path, json + "\n").map_err(io_err(path))
}

fn run(args: Args) -> Result<bool, CliError> {
    let config = PipelineConfig {
        vector_size: args.vector_size.max(1),
        workers: args.workers.max(1),
        ..PipelineConfig::default()
    };

    if let Some(kind) = args.scenario {
        let mut s = Scenario::new(kind, args.seed);
        s.pipeline = config;
        if let Some(n) = args.rule_count {
            s.rule_count = n;
        }
        let mut engine = s.build_engine().map_err(|e| CliError::Other(e.to_string()))?;
        if let Some(path) = &args.rules {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            load_script(&mut engine, &text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        }
        let report = run_on(&mut engine, &s).map_err(|e| CliError::Other(e.to_string()))?;
        print!("{report}");
        write_report(&args.report, &report)?;
        return Ok(report.passed());
    }

    let mut engine = Engine::new(config);
    if let Some(path) = &args.rules {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let n = load_script(&mut engine, &text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        info!(commands = n, "rules loaded");
    }

    if let Some(input) = &args.pcap_in {
        let reader = BufReader::new(File::open(input).map_err(io_err(input))?);
        let writer = match &args.pcap_out {
            Some(p) => Some(BufWriter::new(File::create(p).map_err(io_err(p))?)),
            None => None,
        };
        let report = replay_pcap(&mut engine, reader, writer).map_err(|e| CliError::Other(e.to_string()))?;
        print!("{report}");
        write_report(&args.report, &report)?;
        return Ok(true);
    }

    let stdin = io::stdin();
    let echo = !stdin.is_terminal();
    let mut out = io::stdout().lock();
    run_session(&mut engine, stdin.lock(), &mut out, echo).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(true)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(io::stderr)
        .init();
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            error!("{e}");
            eprintln!("mmb: {e}");
            ExitCode::FAILURE
        }
    }
}
