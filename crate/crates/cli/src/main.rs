use std::path::PathBuf;
use std::process::ExitCode;

use arraycache::bench::{cmd_compare, cmd_gen, cmd_run, read_report, GenConfig, RunConfig};
use arraycache::cluster::Policy;
use arraycache::io::{read_schema, FileFormat};
use arraycache::workload::{DatasetParams, Pattern, Skew, WorkloadParams};
use arraycache::{ArraySchema, AttrKind, Attribute, BoundingBox, Dimension, Error};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_IO: u8 = 4;

/// Simulate cost-based caching of raw sparse arrays on a shared-nothing
/// cluster.
#[derive(Parser)]
#[command(name = "arraycache", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, its schema and a query workload.
    Gen(GenArgs),
    /// Run a workload under one policy and write a JSON and CSV report.
    Run(RunArgs),
    /// Compare reports over the same workload against the first one.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SkewArg {
    Uniform,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Sabf,
}

#[derive(Args)]
struct GenArgs {
    /// Output directory; receives schema.toml, data/ and workload.txt.
    #[arg(long)]
    out: PathBuf,
    /// Reuse an existing schema instead of building one from --dims/--extent.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    /// Cells per dimension; coordinates run from 0 to extent-1.
    #[arg(long, default_value_t = 10_000)]
    extent: i64,
    /// Number of float attributes per cell.
    #[arg(long, default_value_t = 1)]
    attrs: usize,
    #[arg(long, default_value_t = 1_000_000)]
    points: usize,
    #[arg(long, default_value_t = 100)]
    files: usize,
    #[arg(long, value_enum, default_value = "gaussian")]
    skew: SkewArg,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 800.0)]
    sigma: f64,
    #[arg(long, value_enum, default_value = "sabf")]
    format: FormatArg,
    /// shifting, alternating, shifting-return or uniform-random.
    #[arg(long, default_value = "shifting-return")]
    pattern: Pattern,
    /// First query range as lo,lo,..:hi,hi,..
    #[arg(long)]
    base: String,
    /// Per-step translation, one value per dimension.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    shift: Vec<i64>,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    /// L1 radius of the similarity join.
    #[arg(long, default_value_t = 1)]
    radius: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    schema: PathBuf,
    /// Raw files or directories of them; may be repeated.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    workload: PathBuf,
    /// cost, chunk-lru or file-lru.
    #[arg(long, default_value = "cost")]
    policy: Policy,
    #[arg(long, default_value_t = 8)]
    nodes: u32,
    #[arg(long)]
    budget_per_node: u64,
    #[arg(long, default_value_t = arraycache::chunking::DEFAULT_MIN_CELLS)]
    min_cells: usize,
    #[arg(long, default_value_t = 2.0)]
    decay_base: f64,
    #[arg(long, default_value_t = 16)]
    window: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Report path; the CSV goes next to it with a .csv extension.
    #[arg(long)]
    out: PathBuf,
    /// Keep chunks where eviction leaves them instead of collocating joined
    /// chunks.
    #[arg(long)]
    no_placement: bool,
    /// Also write the final cluster state as JSON.
    #[arg(long)]
    snapshot: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Report files; the first is the baseline.
    #[arg(required = true, num_args = 2..)]
    reports: Vec<PathBuf>,
    /// Also write the comparison as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_base(s: &str, dims: usize) -> Result<BoundingBox, Error> {
    let bad = || Error::Usage(format!("--base must look like lo,lo:hi,hi, got {s:?}"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let parse = |part: &str| -> Result<Vec<i64>, Error> {
        part.split(',').map(|v| v.trim().parse::<i64>().map_err(|_| bad())).collect()
    };
    let (lo, hi) = (parse(lo)?, parse(hi)?);
    if lo.len() != dims {
        return Err(Error::Usage(format!("--base has {} coordinates, schema has {dims} dimensions", lo.len())));
    }
    BoundingBox::new(lo, hi)
}

fn gen(args: GenArgs) -> Result<(), Error> {
    let schema = match &args.schema {
        Some(path) => read_schema(path)?,
        None => ArraySchema::with_default_record(
            (0..args.dims)
                .map(|i| Dimension { name: format!("d{i}"), lo: 0, hi: args.extent - 1 })
                .collect(),
            (0..args.attrs).map(|i| Attribute { name: format!("a{i}"), kind: AttrKind::Float }).collect(),
        )?,
    };
    let dims = schema.ndims();
    let shift = if args.shift.is_empty() { vec![0; dims] } else { args.shift };
    let config = GenConfig {
        out: args.out,
        dataset: DatasetParams {
            n_points: args.points,
            n_files: args.files,
            skew: match args.skew {
                SkewArg::Uniform => Skew::Uniform,
                SkewArg::Gaussian => Skew::GaussianCluster { clusters: args.clusters, sigma: args.sigma },
            },
            seed: args.seed,
        },
        format: match args.format {
            FormatArg::Csv => FileFormat::Csv,
            FormatArg::Sabf => FileFormat::Sabf,
        },
        workload: WorkloadParams {
            pattern: args.pattern,
            base: parse_base(&args.base, dims)?,
            shift,
            count: args.queries,
            shape_radius: args.radius,
            seed: args.seed,
        },
        schema,
    };
    let m = cmd_gen(&config)?;
    println!("schema   {}", m.schema.display());
    println!("data     {} ({} files, {} cells)", m.data.display(), m.files.len(), m.cells);
    println!("workload {}", m.workload.display());
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Error> {
    let config = RunConfig {
        data: args.data,
        schema: args.schema,
        workload: args.workload,
        policy: args.policy,
        nodes: args.nodes,
        budget_per_node: args.budget_per_node,
        min_cells: args.min_cells,
        decay_base: args.decay_base,
        window: args.window,
        seed: args.seed,
        out: args.out,
        placement: !args.no_placement,
        snapshot: args.snapshot,
    };
    let report = cmd_run(&config)?;
    let t = &report.totals;
    println!(
        "{}: {} queries, {} files / {} bytes scanned, {} network bytes, {} result cells",
        report.label(),
        report.rows.len(),
        t.files_scanned,
        t.bytes_scanned,
        t.network_bytes,
        t.result_cell_count
    );
    println!("report {}", config.out.display());
    println!("rows   {}", config.csv_path().display());
    Ok(())
}

fn compare(args: CompareArgs) -> Result<(), Error> {
    let reports = args.reports.iter().map(|p| read_report(p)).collect::<Result<Vec<_>, _>>()?;
    let cmp = cmd_compare(&reports)?;
    print!("{}", cmp.to_table());
    if let Some(out) = args.out {
        std::fs::write(out, serde_json::to_string_pretty(&cmp)? + "\n")?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Precondition(_) => EXIT_USAGE,
        Error::Io(_) => EXIT_IO,
        Error::Ingest { .. } | Error::Format(_) | Error::Generation(_) | Error::Json(_) => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ARRAYCACHE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("arraycache: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
