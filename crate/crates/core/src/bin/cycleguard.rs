use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cycleguard::alloc::MemoryPool;
use cycleguard::protection::SchemeKind;
use cycleguard::report::{
    cmd_alloc_bench, cmd_attack_matrix, cmd_compare, cmd_run, AllocBenchParams, CommandError, Format, Report,
};
use cycleguard::scenario::Scenario;

#[derive(Parser)]
#[command(name = "cycleguard", version, about = "Cycle-oriented MPU protection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate cycles under one scheme and report task frequencies and overhead.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        horizon: Option<u64>,
        /// Scheme to run; defaults to the scenario's default.
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        /// Also write the per-cycle dispatch trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run several schemes side by side from the same seed.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        horizon: Option<u64>,
        /// Comma-separated schemes; defaults to every scheme the scenario configures.
        #[arg(long, value_enum, value_delimiter = ',')]
        schemes: Vec<SchemeArg>,
    },
    /// Adjudicate every attack script under every scheme.
    AttackMatrix {
        #[command(flatten)]
        common: Common,
        /// Monte Carlo trials for cases decided by guessing an address.
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
    },
    /// Compare ascending and descending allocation order.
    AllocBench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        /// Comma-separated buffer sizes; defaults to the scenario's buffer set.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<u32>,
        #[arg(long)]
        pool_size: Option<u32>,
        #[arg(long)]
        retry_budget: Option<u32>,
    },
}

#[derive(Args)]
struct Common {
    /// Bundled scenario name or path to a scenario file.
    #[arg(long, default_value = "ardupilot_like")]
    scenario: String,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    None,
    TaskOriented,
    CycleOriented,
}

impl From<SchemeArg> for SchemeKind {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::None => SchemeKind::None,
            SchemeArg::TaskOriented => SchemeKind::TaskOriented,
            SchemeArg::CycleOriented => SchemeKind::CycleOriented,
        }
    }
}

fn emit(report: &Report, common: &Common) -> io::Result<()> {
    let format = match common.format {
        FormatArg::Json => Format::Json,
        FormatArg::Csv => Format::Csv,
    };
    match &common.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            report.write(format, &mut w)?;
            w.flush()
        }
        None => report.write(format, io::stdout().lock()),
    }
}

fn execute(cli: Cli) -> Result<(), CommandError> {
    let io_err = |e: io::Error| CommandError::Usage(format!("cannot write output: {e}"));
    match cli.command {
        Command::Run { common, horizon, scheme, trace } => {
            let scenario = Scenario::open(&common.scenario)?;
            let seed = common.seed.unwrap_or(scenario.seed);
            let kind = scheme.map_or(scenario.default_scheme, SchemeKind::from);
            let (report, cycles) = cmd_run(&scenario, kind, seed, horizon.unwrap_or(scenario.horizon))?;
            if let Some(path) = trace {
                let file = File::create(&path).map_err(io_err)?;
                cycles.write_csv(BufWriter::new(file)).map_err(io_err)?;
            }
            emit(&Report::Run(report), &common).map_err(io_err)
        }
        Command::Compare { common, horizon, schemes } => {
            let scenario = Scenario::open(&common.scenario)?;
            let seed = common.seed.unwrap_or(scenario.seed);
            let kinds: Vec<SchemeKind> = if schemes.is_empty() {
                scenario.available_schemes()
            } else {
                schemes.into_iter().map(SchemeKind::from).collect()
            };
            let report = cmd_compare(&scenario, &kinds, seed, horizon.unwrap_or(scenario.horizon))?;
            emit(&Report::Compare(report), &common).map_err(io_err)
        }
        Command::AttackMatrix { common, trials } => {
            let scenario = Scenario::open(&common.scenario)?;
            let seed = common.seed.unwrap_or(scenario.seed);
            let report = cmd_attack_matrix(&scenario, seed, trials)?;
            emit(&Report::AttackMatrix(report), &common).map_err(io_err)
        }
        Command::AllocBench { common, trials, sizes, pool_size, retry_budget } => {
            let scenario = Scenario::open(&common.scenario)?;
            let seed = common.seed.unwrap_or(scenario.seed);
            let mut params = AllocBenchParams::from_scenario(&scenario, trials, seed)?;
            if !sizes.is_empty() {
                params.sizes = sizes;
            }
            if let Some(size) = pool_size {
                params.pool = MemoryPool { base: params.pool.base, size };
            }
            if let Some(budget) = retry_budget {
                params.retry_budget = budget;
            }
            let report = cmd_alloc_bench(&params)?;
            emit(&Report::AllocBench(report), &common).map_err(io_err)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
