use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kvtier::config::page_bytes;
use kvtier::envelope::EnvelopePoint;
use kvtier::oracle::{belady, bucketed_lru, lru_reference, AccessTrace};
use kvtier::pipeline::prefill_index;
use kvtier::sim::{
    compare, envelope_table, footprint_scenario, generate_trace_file, json_lines, run_sim,
    ComparePoint, SimConfig,
};
use kvtier::workload::{write_arrivals, TraceFile};
use kvtier::Error;

/// Trace-driven KV-cache tiering simulator.
#[derive(Debug, Parser)]
#[command(name = "kvtier", version, about)]
struct Cli {
    /// JSON configuration document.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Selection trace to read (or, for gen-trace, to write).
    #[arg(long, global = true, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Write per-step metrics as JSON lines.
    #[arg(long, global = true, value_name = "PATH")]
    emit_steps: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Write the plot-ready CSV here.
    #[arg(long, global = true, value_name = "PATH")]
    csv: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a configuration and print derived sizes.
    Validate,
    /// Generate a synthetic selection trace, and the arrival schedule with --csv.
    GenTrace {
        /// Prompt tokens per request; defaults to the compare section.
        #[arg(long)]
        context: Option<u64>,
        /// Decode steps; defaults to the compare section.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Simulate the configured workload end to end.
    Run,
    /// Buffer-ratio sweep: realized TPOT, envelope TPOT and LRU miss ratio.
    Compare,
    /// Ideal TPOT per batch size.
    Envelope,
    /// Metadata footprint of the configured working set.
    Footprint,
    /// Miss counts of true LRU, Belady and bucketed LRU on a trace.
    Oracle {
        /// Unpinned device pages per head; repeatable.
        #[arg(long = "capacity")]
        capacities: Vec<u64>,
    },
}

/// An error with the process exit status it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl Failure {
    fn config(error: Error) -> Self {
        Self { code: 1, error }
    }

    fn trace(error: Error) -> Self {
        Self { code: 2, error }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::TraceExhausted { .. } | Error::Parse { .. } => 2,
            Error::Invariant(_) | Error::DoubleFree(_) | Error::PoolExhausted { .. } => 3,
            _ => 1,
        };
        Self { code, error }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match (&f.code, &f.error) {
                (3, Error::Invariant(what)) => eprintln!("kvtier: invariant violated: {what}"),
                (_, e) => eprintln!("kvtier: {e}"),
            }
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<SimConfig> {
    let path = cli.config.as_deref().ok_or_else(|| {
        Failure::config(Error::InvalidSpecParams("--config is required".into()))
    })?;
    let mut config = SimConfig::load(path).map_err(Failure::config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate().map_err(Failure::config)?;
    Ok(config)
}

fn load_trace(cli: &Cli) -> CliResult<Option<TraceFile>> {
    cli.trace
        .as_deref()
        .map(|p| TraceFile::read_file(p).map_err(Failure::trace))
        .transpose()
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::config(e.into()))
}

/// Writes `text` to `path`, or stdout when absent.
fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::config(e.into())),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|()| out.flush())
                .map_err(|e| Failure::config(e.into()))
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Validate => validate(cli, &config),
        Command::GenTrace { context, steps } => gen_trace(cli, &config, *context, *steps),
        Command::Run => run(cli, &config),
        Command::Compare => compare_cmd(cli, &config),
        Command::Envelope => envelope(cli, &config),
        Command::Footprint => footprint(cli, &config),
        Command::Oracle { capacities } => oracle(cli, &config, capacities),
    }
}

fn validate(cli: &Cli, config: &SimConfig) -> CliResult<()> {
    let ctx = config.compare.context;
    let heads = config.model.heads_per_request();
    let pb = page_bytes(&config.model, &config.sparse);
    let summary = serde_json::json!({
        "valid": true,
        "page_bytes": pb,
        "heads_per_request": heads,
        "device_pages_per_lane": config.tiers.device_capacity / pb / heads,
        "budget_partitions_at_compare_context": config.budget_partitions(ctx),
    });
    emit(cli.out.as_deref(), &to_json(&summary))
}

fn gen_trace(
    cli: &Cli,
    config: &SimConfig,
    context: Option<u64>,
    steps: Option<usize>,
) -> CliResult<()> {
    let context = context.unwrap_or(config.compare.context);
    let steps = steps.unwrap_or(config.compare.steps);
    let trace = generate_trace_file(config, context, steps)?;
    match cli.trace.as_deref().or(cli.out.as_deref()) {
        Some(p) => trace.write_file(p).map_err(Failure::config)?,
        None => trace
            .write(io::stdout().lock())
            .map_err(Failure::config)?,
    }
    if let Some(p) = cli.csv.as_deref() {
        let arrivals = config.arrivals(cli.config.as_deref().and_then(Path::parent))?;
        write_arrivals(&arrivals, create(p)?).map_err(Failure::config)?;
    }
    Ok(())
}

fn run(cli: &Cli, config: &SimConfig) -> CliResult<()> {
    let trace = load_trace(cli)?;
    let arrivals = config.arrivals(cli.config.as_deref().and_then(Path::parent))?;
    let report = match cli.emit_steps.as_deref() {
        Some(p) => {
            let mut w = create(p)?;
            let r = run_sim(config, &arrivals, trace, json_lines(&mut w))?;
            w.flush().map_err(|e| Failure::config(e.into()))?;
            r
        }
        None => run_sim(config, &arrivals, trace, |_| Ok(()))?,
    };
    if let Some(p) = cli.csv.as_deref() {
        emit(Some(p), &report.peak_footprint.to_csv_string())?;
    }
    emit(cli.out.as_deref(), &to_json(&report))
}

fn trace_or_generated(cli: &Cli, config: &SimConfig) -> CliResult<TraceFile> {
    match load_trace(cli)? {
        Some(t) => Ok(t),
        None => Ok(generate_trace_file(
            config,
            config.compare.context,
            config.compare.steps,
        )?),
    }
}

fn compare_cmd(cli: &Cli, config: &SimConfig) -> CliResult<()> {
    let trace = trace_or_generated(cli, config)?;
    let points = compare(config, &trace, config.compare.context, &config.compare.ratios)?;
    let mut csv = String::from(ComparePoint::CSV_HEADER);
    csv.push('\n');
    for p in &points {
        csv.push_str(&p.csv_row());
        csv.push('\n');
    }
    write_table(cli, &csv, &points)
}

/// CSV to --csv and JSON to --out; CSV to stdout when neither is given.
fn write_table<T: serde::Serialize>(cli: &Cli, csv: &str, value: &T) -> CliResult<()> {
    if let Some(p) = cli.csv.as_deref() {
        emit(Some(p), csv)?;
    }
    match (cli.out.as_deref(), cli.csv.is_some()) {
        (Some(p), _) => emit(Some(p), &to_json(value)),
        (None, false) => emit(None, csv),
        (None, true) => Ok(()),
    }
}

fn envelope(cli: &Cli, config: &SimConfig) -> CliResult<()> {
    let trace = load_trace(cli)?;
    let points = envelope_table(config, trace.as_ref())?;
    let mut csv = String::from(EnvelopePoint::CSV_HEADER);
    csv.push('\n');
    for p in &points {
        csv.push_str(&p.csv_row());
        csv.push('\n');
    }
    write_table(cli, &csv, &points)
}

fn footprint(cli: &Cli, config: &SimConfig) -> CliResult<()> {
    let fp = footprint_scenario(
        config,
        config.footprint.context,
        config.footprint.requests,
    )?;
    write_table(cli, &fp.to_csv_string(), &fp)
}

#[derive(serde::Serialize)]
struct OracleRow {
    capacity: u64,
    demand: u64,
    lru_misses: u64,
    belady_misses: u64,
    bucketed_misses: u64,
}

fn oracle(cli: &Cli, config: &SimConfig, capacities: &[u64]) -> CliResult<()> {
    let trace = trace_or_generated(cli, config)?;
    let context = config.compare.context;
    let spec = prefill_index(
        context,
        config.model.max_context,
        &config.sparse,
        &config.index,
    )?;
    let pages: Vec<u64> = spec
        .token_counts()?
        .iter()
        .map(|&c| config.sparse.pages_for_tokens(c))
        .collect();
    let mut heads = Vec::new();
    for layer in 0..config.model.num_layers {
        for head in 0..config.model.num_kv_heads {
            let sel: Vec<Vec<u32>> = trace
                .project(layer, head)
                .into_iter()
                .map(|s| s.into_iter().filter(|i| !spec.pinned.contains(i)).collect())
                .collect();
            heads.push(AccessTrace::new(sel, pages.clone(), pages.iter().sum())?);
        }
    }
    let caps: Vec<u64> = if capacities.is_empty() {
        let m = config.budget_partitions(context) as u64;
        config
            .compare
            .ratios
            .iter()
            .map(|r| (m as f64 * (1.0 + r)).ceil() as u64)
            .collect()
    } else {
        capacities.to_vec()
    };
    let mut rows = Vec::new();
    for &capacity in &caps {
        let mut row = OracleRow {
            capacity,
            demand: 0,
            lru_misses: 0,
            belady_misses: 0,
            bucketed_misses: 0,
        };
        for t in &heads {
            let t = t.with_capacity(capacity)?;
            row.demand += t.total_demand();
            row.lru_misses += lru_reference(&t).miss_pages;
            row.belady_misses += belady(&t, capacity)?.miss_pages;
            row.bucketed_misses += bucketed_lru(&t, &config.replacement)?.miss_pages;
        }
        rows.push(row);
    }
    let mut csv = String::from("capacity,demand,lru_misses,belady_misses,bucketed_misses\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.capacity, r.demand, r.lru_misses, r.belady_misses, r.bucketed_misses
        ));
    }
    write_table(cli, &csv, &rows)
}
