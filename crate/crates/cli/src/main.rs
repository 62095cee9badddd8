use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use listreg::algorithm::run;
use listreg::eval::{check_invariants, run_experiment, trial_seed};
use listreg::io::{
    config_entries, parse_config, read_batches_csv, write_batches_csv, write_report_csv, write_report_json,
    write_run_csv, write_run_json, ConfigFile,
};
use listreg::synth::generate;
use listreg::{BatchCollection, Error};

const EXIT_FAILURE: u8 = 1;
const EXIT_ARGUMENT: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INCOMPLETE: u8 = 4;

#[derive(Parser)]
#[command(name = "listreg", version, about = "List-decodable linear regression from batches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic batch dataset as CSV.
    Gen(Common),
    /// Run the algorithm on a dataset (or a generated one) and write the list.
    Run(Common),
    /// Run a seeded sweep of generated trials and write per-trial metrics.
    Bench(Common),
    /// Run the algorithm and verify its structural guarantees.
    Check(Common),
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV batch data (batch_id,x_0,...,x_{d-1},y).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of trials, overriding the config.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Record wall-clock time per trial (makes output non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

enum Failure {
    Lib(Error),
    Incomplete,
    Violations(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn load_config(common: &Common) -> Result<ConfigFile, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Argument(format!("cannot read config {}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => ConfigFile::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = common.trials {
        cfg.trials = trials;
    }
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<BatchCollection, Failure> {
    let file = File::open(path).map_err(|e| Error::Argument(format!("cannot open data {}: {e}", path.display())))?;
    Ok(read_batches_csv(BufReader::new(file))?)
}

/// The dataset named by `--data`, or trial 0 of the configured scenario.
fn dataset(common: &Common, cfg: &ConfigFile) -> Result<BatchCollection, Failure> {
    match &common.data {
        Some(path) => load_data(path),
        None => {
            let spec = cfg.scenario.instantiate(trial_seed(cfg.seed, 0))?;
            Ok(generate(&spec)?.coll)
        }
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Error::Argument(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn gen(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let spec = cfg.scenario.instantiate(trial_seed(cfg.seed, 0))?;
    let data = generate(&spec)?;
    let mut out = output(&common.out)?;
    write_batches_csv(&data.coll, &mut out)?;
    out.flush().map_err(Error::from)?;
    Ok(())
}

fn run_once(common: &Common) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    let coll = dataset(common, &cfg)?;
    if let Some(seed) = common.seed {
        cfg.algo.rng_seed = seed;
    }
    let result = run(&coll, &cfg.algo)?;
    let mut out = output(&common.out)?;
    match common.format {
        Format::Json => write_run_json(&config_entries(&cfg.scenario, &cfg.algo, None, Some(cfg.seed)), &result, &mut out)?,
        Format::Csv => write_run_csv(&result, coll.dim(), &mut out)?,
    }
    out.flush().map_err(Error::from)?;
    if result.complete {
        Ok(())
    } else {
        Err(Failure::Incomplete)
    }
}

fn bench(common: &Common) -> Result<(), Failure> {
    if common.data.is_some() {
        return Err(Error::Argument("bench generates its own data; --data is not accepted".into()).into());
    }
    let cfg = load_config(common)?;
    let report = run_experiment(&cfg.scenario, &cfg.algo, cfg.trials, cfg.seed, common.timing)?;
    let mut out = output(&common.out)?;
    match common.format {
        Format::Json => write_report_json(&report, &mut out)?,
        Format::Csv => write_report_csv(&report, &mut out)?,
    }
    out.flush().map_err(Error::from)?;
    if report.per_trial.iter().all(|r| r.complete) {
        Ok(())
    } else {
        Err(Failure::Incomplete)
    }
}

fn check(common: &Common) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    let coll = dataset(common, &cfg)?;
    if let Some(seed) = common.seed {
        cfg.algo.rng_seed = seed;
    }
    let result = run(&coll, &cfg.algo)?;
    let violations = check_invariants(&coll, &cfg.algo, &result)?;
    let mut out = output(&common.out)?;
    let write = |out: &mut Box<dyn Write>, line: String| writeln!(out, "{line}").map_err(Error::from);
    write(&mut out, format!("batches: {}  batch size: {}  dimension: {}", coll.len(), coll.batch_size(), coll.dim()))?;
    write(
        &mut out,
        format!(
            "list size: {} (bound {})  filter calls: {} (budget {})  rejected clusters: {}",
            result.list.len(),
            cfg.algo.list_size_bound(),
            result.filter_calls,
            cfg.algo.filter_budget(coll.len()),
            result.rejected_clusters
        ),
    )?;
    for v in &violations {
        write(&mut out, format!("VIOLATION {v}"))?;
    }
    write(&mut out, format!("{} violations", violations.len()))?;
    out.flush().map_err(Error::from)?;
    if !violations.is_empty() {
        Err(Failure::Violations(violations.len()))
    } else if !result.complete {
        Err(Failure::Incomplete)
    } else {
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gen(c) => gen(c),
        Command::Run(c) => run_once(c),
        Command::Bench(c) => bench(c),
        Command::Check(c) => check(c),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Incomplete) => {
            eprintln!("listreg: run incomplete (filter budget exhausted)");
            ExitCode::from(EXIT_INCOMPLETE)
        }
        Err(Failure::Violations(k)) => {
            eprintln!("listreg: {k} invariant violations");
            ExitCode::from(EXIT_FAILURE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("listreg: {e}");
            ExitCode::from(match e {
                Error::Argument(_) => EXIT_ARGUMENT,
                Error::DataFormat(_) => EXIT_DATA,
                _ => EXIT_FAILURE,
            })
        }
    }
}
