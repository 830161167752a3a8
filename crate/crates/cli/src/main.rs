//! `marglik` command-line front end.
//!
//! Exit codes: 0 success, 2 input error, 3 enumeration budget or limit,
//! 4 identification failure, 5 non-convergence.

mod units;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use marglik::estimators::{
    evaluate_fit, fisher_scoring, goodman, independence_fit, metric_me, EstimateError,
    FisherOptions, FitResult, IterationRecord,
};
use marglik::extreme::{
    build_extreme, enumerate_extremes, ExtremeError, ExtremeTable, PermutationPair,
};
use marglik::likelihood::{CondProbMatrix, EIDataset, LikelihoodError};
use marglik::scan::{scan, ScanOptions, DEFAULT_SCAN_XI};
use marglik::simulate::{simulate, table3_pi};
use marglik::tables::{
    count_tables, enumerate_tables, FreqTable, MarginPair, TableError, DEFAULT_TABLE_LIMIT,
};
use serde::Serialize;

use crate::units::{read_pi, sidecar_path, Truth, UnitsFile};

#[derive(Parser)]
#[command(
    name = "marglik",
    version,
    about = "Exact marginal likelihood of two-way tables from their margins"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List (or count) every table with the given margins.
    Enumerate(EnumerateArgs),
    /// Print extreme tables for permutation pairs.
    Extreme(ExtremeArgs),
    /// Log-likelihood at every table-derived distribution of one unit.
    Scan(ScanArgs),
    /// Fit shared conditional probabilities to a units file.
    Estimate(EstimateArgs),
    /// Draw a synthetic units file and its truth sidecar.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct EnumerateArgs {
    /// Margins literal `r1,...,rR/c1,...,cC`.
    margins: MarginPair,
    #[arg(long, default_value_t = DEFAULT_TABLE_LIMIT)]
    limit: usize,
    /// Print only the number of tables.
    #[arg(long)]
    count_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtremeArgs {
    margins: MarginPair,
    /// 1-based permutation pair `rows/cols`; category k moves to position pi(k).
    #[arg(long, conflicts_with = "all", required_unless_present = "all")]
    perms: Option<PermutationPair>,
    /// Every distinct extreme table.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScanArgs {
    margins: MarginPair,
    /// Zero replacement is exp(-xi).
    #[arg(long, default_value_t = DEFAULT_SCAN_XI)]
    xi: f64,
    #[arg(long, default_value_t = 0)]
    random_mixtures: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop random mixtures whose log-likelihood falls below this.
    #[arg(long)]
    scan_floor: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TABLE_LIMIT)]
    max_tables: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Ml,
    Goodman,
    Independence,
}

#[derive(Args)]
struct EstimateArgs {
    units: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Ml)]
    method: Method,
    /// Recorded in the output; every method is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-unit enumeration limit.
    #[arg(long, default_value_t = DEFAULT_TABLE_LIMIT)]
    max_tables: usize,
    /// Truth sidecar; defaults to `<stem>.truth.json` next to the units file.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long = "s", default_value_t = 60)]
    units: usize,
    #[arg(long = "n", default_value_t = 40)]
    unit_size: u32,
    #[arg(long = "R", default_value_t = 3)]
    nrows: usize,
    #[arg(long = "C", default_value_t = 3)]
    ncols: usize,
    /// `table3` or a file with one comma-separated row per line.
    #[arg(long, default_value = "table3")]
    pi: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Units file; the sidecar is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Failure {
            code: exit_code(&error),
            error,
        }
    }
}

fn table_code(e: &TableError) -> u8 {
    match e {
        TableError::LimitExceeded { .. } => 3,
        _ => 2,
    }
}

fn likelihood_code(e: &LikelihoodError) -> u8 {
    match e {
        LikelihoodError::UnitTables { source, .. } | LikelihoodError::Tables(source) => {
            table_code(source)
        }
        LikelihoodError::Extreme(ExtremeError::BudgetExceeded { .. }) => 3,
        _ => 2,
    }
}

fn exit_code(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        if let Some(e) = cause.downcast_ref::<EstimateError>() {
            return match e {
                EstimateError::Likelihood(inner) => likelihood_code(inner),
                EstimateError::UnderIdentified { .. }
                | EstimateError::RankDeficient(_)
                | EstimateError::SingularInformation { .. } => 4,
                EstimateError::IpfNonConvergence { .. } => 5,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<LikelihoodError>() {
            return likelihood_code(e);
        }
        if let Some(e) = cause.downcast_ref::<TableError>() {
            return table_code(e);
        }
        if let Some(ExtremeError::BudgetExceeded { .. }) = cause.downcast_ref::<ExtremeError>() {
            return 3;
        }
    }
    2
}

/// Number with 12 significant digits, trailing zeros trimmed.
fn sig12(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..12).contains(&exp) {
        let s = format!("{:.*}", (11 - exp).max(0) as usize, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.11e}")
    }
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_enumerate(args: EnumerateArgs) -> Result<()> {
    if args.count_only {
        println!("{}", count_tables(&args.margins, Some(args.limit))?);
        return Ok(());
    }
    let tables = enumerate_tables(&args.margins, Some(args.limit))?;
    if args.out.is_some() {
        println!("{}", tables.len());
    }
    let mut w = csv::Writer::from_writer(sink(args.out.as_deref())?);
    let ncols = args.margins.ncols();
    let header: Vec<String> = ["table".to_string(), "row".to_string()]
        .into_iter()
        .chain((1..=ncols).map(|j| format!("c{j}")))
        .collect();
    w.write_record(&header)?;
    for (k, t) in tables.iter().enumerate() {
        for (i, row) in t.chunks_exact(ncols).enumerate() {
            let rec: Vec<String> = [k.to_string(), (i + 1).to_string()]
                .into_iter()
                .chain(row.iter().map(u32::to_string))
                .collect();
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Table with row totals on the right and column totals underneath.
fn write_bordered(w: &mut dyn Write, t: &FreqTable) -> io::Result<()> {
    let rows = t.row_sums();
    let cols = t.col_sums();
    let total: u32 = rows.iter().sum();
    let width = total.to_string().len().max(3);
    for i in 0..t.nrows() {
        for &x in t.row(i) {
            write!(w, "{x:>width$} ")?;
        }
        writeln!(w, "| {:>width$}", rows[i])?;
    }
    for &x in &cols {
        write!(w, "{x:>width$} ")?;
    }
    writeln!(w, "| {total:>width$}")
}

/// Rearranged order first (where the staircase is visible), then the same
/// table in the original category order.
fn write_extreme(w: &mut dyn Write, z: &ExtremeTable) -> io::Result<()> {
    writeln!(w, "# perms {}", z.perms())?;
    write_bordered(w, &z.permuted())?;
    writeln!(w, "# original order")?;
    write_bordered(w, z.table())
}

fn run_extreme(args: ExtremeArgs) -> Result<()> {
    let zs = match args.perms {
        Some(p) => {
            if p.rows().len() != args.margins.nrows() || p.cols().len() != args.margins.ncols() {
                bail!(
                    "permutation pair {p} does not fit {}x{} margins",
                    args.margins.nrows(),
                    args.margins.ncols()
                );
            }
            vec![build_extreme(&args.margins, &p)]
        }
        None => enumerate_extremes(&args.margins, None)?,
    };
    let mut w = sink(args.out.as_deref())?;
    for (k, z) in zs.iter().enumerate() {
        if k > 0 {
            writeln!(w)?;
        }
        write_extreme(&mut w, z)?;
    }
    w.flush()?;
    Ok(())
}

fn run_scan(args: ScanArgs) -> Result<()> {
    let opts = ScanOptions {
        xi: args.xi,
        random_mixtures: args.random_mixtures,
        seed: args.seed,
        floor: args.scan_floor,
        table_limit: Some(args.max_tables),
    };
    let records = scan(&args.margins, &opts)?;
    let mut w = csv::Writer::from_writer(sink(args.out.as_deref())?);
    w.write_record(["index", "loglik", "kind"])?;
    for r in &records {
        w.write_record([r.index.to_string(), sig12(r.loglik), r.kind.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Params<'a> {
    phi: &'a [f64],
    lambda: &'a [f64],
}

#[derive(Serialize)]
struct Report<'a> {
    method: Method,
    seed: u64,
    nrows: usize,
    ncols: usize,
    units: usize,
    /// Row-major conditional probabilities.
    probs: &'a [f64],
    params: Params<'a>,
    loglik: f64,
    iterations: usize,
    converged: bool,
    score_norm: f64,
    info_condition: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a [IterationRecord]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    raw: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clipped_cells: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    m_e: Option<f64>,
}

fn load_truth(args: &EstimateArgs) -> Result<Option<CondProbMatrix>> {
    let path = match &args.truth {
        Some(p) => p.clone(),
        None => {
            let p = sidecar_path(&args.units);
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    Ok(Some(Truth::load(&path)?.probs()?))
}

fn run_estimate(args: EstimateArgs) -> Result<bool> {
    let file = UnitsFile::load(&args.units)?;
    let truth = load_truth(&args)?;
    let data = EIDataset::new(file.margins)?
        .with_table_limit(args.max_tables)
        .enumerated()?;
    if let Some(t) = &truth {
        if (t.nrows(), t.ncols()) != (data.nrows(), data.ncols()) {
            bail!(
                "truth is {}x{}, data {}x{}",
                t.nrows(),
                t.ncols(),
                data.nrows(),
                data.ncols()
            );
        }
    }
    let mut raw = None;
    let mut clipped = None;
    let fit: FitResult = match args.method {
        Method::Ml => fisher_scoring(&data, None, &FisherOptions::default())?,
        Method::Independence => independence_fit(&data)?,
        Method::Goodman => {
            let g = goodman(&data)?;
            raw = Some(g.raw.clone());
            clipped = Some(g.clipped_cells);
            evaluate_fit(&data, &g.repaired)?
        }
    };
    let report = Report {
        method: args.method,
        seed: args.seed,
        nrows: data.nrows(),
        ncols: data.ncols(),
        units: data.len(),
        probs: fit.probs.values(),
        params: Params {
            phi: fit.params.phi(),
            lambda: fit.params.lambda(),
        },
        loglik: fit.loglik,
        iterations: fit.iterations,
        converged: fit.converged,
        score_norm: fit.score_norm,
        info_condition: fit.info_condition.is_finite().then_some(fit.info_condition),
        trace: matches!(args.method, Method::Ml).then_some(fit.trace.as_slice()),
        raw: raw.as_deref(),
        clipped_cells: clipped,
        m_e: truth.map(|t| metric_me(std::slice::from_ref(&fit.probs), &t, data.len())),
    };
    let mut w = sink(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;
    Ok(fit.converged || !matches!(args.method, Method::Ml))
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let pi = if args.pi == "table3" {
        table3_pi()
    } else {
        read_pi(Path::new(&args.pi))?
    };
    if (pi.nrows(), pi.ncols()) != (args.nrows, args.ncols) {
        bail!(
            "pi is {}x{} but --R {} --C {} was requested",
            pi.nrows(),
            pi.ncols(),
            args.nrows,
            args.ncols
        );
    }
    if args.units == 0 || (args.unit_size as usize) < args.nrows.max(args.ncols) {
        bail!("need --s >= 1 and --n >= max(R, C)");
    }
    let sim = simulate(&pi, args.units, args.unit_size, args.seed);
    let file = UnitsFile {
        ids: (1..=args.units).map(|h| format!("u{h}")).collect(),
        margins: sim.margins,
    };
    file.write(sink(args.out.as_deref())?)?;
    if let Some(out) = &args.out {
        let truth = Truth {
            pi: pi.rows(),
            seed: args.seed,
            units: args.units,
            unit_size: args.unit_size,
            rejections: sim.rejections,
        };
        let path = sidecar_path(out);
        std::fs::write(&path, serde_json::to_string_pretty(&truth)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Enumerate(a) => run_enumerate(a)?,
        Command::Extreme(a) => run_extreme(a)?,
        Command::Scan(a) => run_scan(a)?,
        Command::Simulate(a) => run_simulate(a)?,
        Command::Estimate(a) => {
            if !run_estimate(a)? {
                return Err(Failure {
                    code: 5,
                    error: anyhow::anyhow!("Fisher scoring did not converge"),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
