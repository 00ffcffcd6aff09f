//! Benchmark driver: generate inputs, run a workload, compare reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterState, MetricsTotals, Policy, QueryMetrics, SimConfig};
use crate::error::{Error, Result};
use crate::eviction::QueryWeight;
use crate::geometry::{ArraySchema, QuerySpec};
use crate::io::{list_raw_files, load_dataset, read_schema, write_dataset, write_schema, FileFormat};
use crate::workload::{generate_synthetic_dataset, generate_workload, DatasetParams, Pattern, WorkloadParams, WorkloadTrace};

pub const REPORT_FORMAT: &str = "arraycache-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Vec<PathBuf>,
    pub schema: PathBuf,
    pub workload: PathBuf,
    pub policy: Policy,
    pub nodes: u32,
    pub budget_per_node: u64,
    pub min_cells: usize,
    pub decay_base: f64,
    pub window: u32,
    pub seed: u64,
    /// JSON report path; the CSV rows go next to it with a `.csv` extension.
    pub out: PathBuf,
    pub placement: bool,
    /// Where to write the final cluster state, if anywhere.
    pub snapshot: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::usage("--nodes must be at least 1"));
        }
        if self.min_cells == 0 {
            return Err(Error::usage("--min-cells must be at least 1"));
        }
        QueryWeight::new(self.decay_base, self.window)?;
        if self.data.is_empty() {
            return Err(Error::usage("no dataset given"));
        }
        Ok(())
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut c = SimConfig::new(self.policy, self.nodes, self.budget_per_node);
        c.min_cells = self.min_cells;
        c.weights = QueryWeight::new(self.decay_base, self.window)?;
        c.placement = self.placement;
        Ok(c)
    }

    pub fn csv_path(&self) -> PathBuf {
        self.out.with_extension("csv")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkingRow {
    pub query_id: u64,
    pub total_chunks: usize,
    /// Chunk count per file, in dataset order.
    pub per_file: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub pattern: Pattern,
    pub workload_seed: u64,
    pub queries: Vec<QuerySpec>,
    pub files: Vec<String>,
    pub rows: Vec<QueryMetrics>,
    pub totals: MetricsTotals,
    pub chunking: Vec<ChunkingRow>,
}

impl RunReport {
    /// Short name for tables: the policy, marked when placement is off.
    pub fn label(&self) -> String {
        if self.config.policy == Policy::Cost && !self.config.placement {
            "cost(no-placement)".into()
        } else {
            self.config.policy.to_string()
        }
    }
}

/// Flat per-query CSV row.
#[derive(Serialize)]
struct CsvRow {
    query_id: u64,
    files_scanned: u64,
    bytes_scanned: u64,
    network_bytes: u64,
    cache_hit_chunks: u64,
    cache_miss_chunks: u64,
    collocated_pair_fraction: f64,
    result_cell_count: u64,
    chunk_count: usize,
}

pub fn read_workload(path: &Path) -> Result<WorkloadTrace> {
    let text = fs::read_to_string(path).map_err(Error::io_at(path))?;
    WorkloadTrace::from_text(&text).map_err(|e| match e {
        Error::Format(msg) => Error::format_in(path, msg),
        e => e,
    })
}

/// Run the workload of `config` and write the JSON report and CSV rows.
pub fn cmd_run(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let schema = read_schema(&config.schema)?;
    let files = list_raw_files(&config.data)?;
    let data = Arc::new(load_dataset(&files, &schema, config.nodes)?);
    let trace = read_workload(&config.workload)?;
    trace.validate(&schema)?;
    let report = run_trace(config, data, &trace)?;

    if let Some(dir) = config.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&config.out, serde_json::to_string_pretty(&report)? + "\n")?;
    let mut w = csv::Writer::from_path(config.csv_path()).map_err(|e| Error::Io(e.into()))?;
    for (r, c) in report.rows.iter().zip(&report.chunking) {
        w.serialize(CsvRow {
            query_id: r.query_id,
            files_scanned: r.files_scanned,
            bytes_scanned: r.bytes_scanned,
            network_bytes: r.network_bytes,
            cache_hit_chunks: r.cache_hit_chunks,
            cache_miss_chunks: r.cache_miss_chunks,
            collocated_pair_fraction: r.collocated_pair_fraction,
            result_cell_count: r.result_cell_count,
            chunk_count: c.total_chunks,
        })
        .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(report)
}

/// Run a trace over an in-memory dataset. Also writes the snapshot if the
/// config asks for one.
pub fn run_trace(config: &RunConfig, data: Arc<crate::cluster::Dataset>, trace: &WorkloadTrace) -> Result<RunReport> {
    let mut state = ClusterState::new(config.sim_config()?, Arc::clone(&data))?;
    let mut chunking = Vec::with_capacity(trace.queries.len());
    for q in &trace.queries {
        let out = state.run_query(q)?;
        let t = out.timing;
        log::info!(
            "query {}: scanned {} files / {} bytes, network {} bytes, {} results; refine {:?} join {:?} eviction {:?} placement {:?}",
            q.id,
            out.metrics.files_scanned,
            out.metrics.bytes_scanned,
            out.metrics.network_bytes,
            out.metrics.result_cell_count,
            t.refine,
            t.join,
            t.eviction,
            t.placement
        );
        let per_file: Vec<usize> = state.chunkings().iter().map(|c| c.len()).collect();
        chunking.push(ChunkingRow {
            query_id: q.id,
            total_chunks: per_file.iter().sum(),
            per_file,
        });
    }
    if let Some(path) = &config.snapshot {
        fs::write(path, serde_json::to_string(&state.snapshot())?)?;
    }
    Ok(RunReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config: config.clone(),
        pattern: trace.pattern,
        workload_seed: trace.seed,
        queries: trace.queries.clone(),
        files: data.files.iter().map(|f| f.meta.file_id.to_string()).collect(),
        rows: state.metrics().rows.clone(),
        totals: state.metrics().totals(),
        chunking,
    })
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(Error::io_at(path))?;
    let r: RunReport = serde_json::from_str(&text).map_err(|e| Error::format_in(path, e))?;
    if r.format != REPORT_FORMAT || r.version != REPORT_VERSION {
        return Err(Error::format_in(path, format!("not a version {REPORT_VERSION} run report")));
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub out: PathBuf,
    pub schema: ArraySchema,
    pub dataset: DatasetParams,
    pub format: FileFormat,
    pub workload: WorkloadParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub schema: PathBuf,
    pub data: PathBuf,
    pub files: Vec<PathBuf>,
    pub workload: PathBuf,
    pub cells: u64,
}

/// Write `schema.toml`, `data/part-*.{csv,sabf}` and `workload.txt` under
/// `config.out`.
pub fn cmd_gen(config: &GenConfig) -> Result<GenManifest> {
    config.schema.validate()?;
    let parts = generate_synthetic_dataset(&config.schema, &config.dataset)?;
    let trace = generate_workload(&config.schema, &config.workload)?;
    fs::create_dir_all(&config.out)?;
    let schema = config.out.join("schema.toml");
    write_schema(&schema, &config.schema)?;
    let data = config.out.join("data");
    if data.exists() {
        for f in list_raw_files(std::slice::from_ref(&data)).unwrap_or_default() {
            fs::remove_file(f)?;
        }
    }
    let files = write_dataset(&data, &config.schema, &parts, config.format)?;
    let workload = config.out.join("workload.txt");
    fs::write(&workload, trace.to_text())?;
    Ok(GenManifest {
        schema,
        data,
        files,
        workload,
        cells: parts.iter().map(|p| p.len() as u64).sum(),
    })
}

/// `value / baseline`; 1 when both are zero, `None` when only the baseline
/// is.
pub fn ratio(value: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 {
        (value == 0.0).then_some(1.0)
    } else {
        Some(value / baseline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    /// 0 for the cumulative row.
    pub query_id: u64,
    pub bytes_scanned: Option<f64>,
    pub network_bytes: Option<f64>,
    pub collocated_pair_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub label: String,
    pub per_query: Vec<RatioRow>,
    pub cumulative: RatioRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub entries: Vec<ComparisonEntry>,
}

/// Ratios of every report against the first one.
pub fn cmd_compare(reports: &[RunReport]) -> Result<Comparison> {
    let [base, rest @ ..] = reports else {
        return Err(Error::usage("compare needs at least two reports"));
    };
    if rest.is_empty() {
        return Err(Error::usage("compare needs at least two reports"));
    }
    let mut entries = Vec::with_capacity(rest.len());
    for r in rest {
        if r.queries != base.queries {
            return Err(Error::usage(format!(
                "reports {} and {} ran different workloads",
                base.label(),
                r.label()
            )));
        }
        let per_query = r
            .rows
            .iter()
            .zip(&base.rows)
            .map(|(a, b)| RatioRow {
                query_id: a.query_id,
                bytes_scanned: ratio(a.bytes_scanned as f64, b.bytes_scanned as f64),
                network_bytes: ratio(a.network_bytes as f64, b.network_bytes as f64),
                collocated_pair_fraction: ratio(a.collocated_pair_fraction, b.collocated_pair_fraction),
            })
            .collect();
        let (a, b) = (&r.totals, &base.totals);
        entries.push(ComparisonEntry {
            label: r.label(),
            per_query,
            cumulative: RatioRow {
                query_id: 0,
                bytes_scanned: ratio(a.bytes_scanned as f64, b.bytes_scanned as f64),
                network_bytes: ratio(a.network_bytes as f64, b.network_bytes as f64),
                collocated_pair_fraction: ratio(a.mean_collocated_pair_fraction, b.mean_collocated_pair_fraction),
            },
        });
    }
    Ok(Comparison {
        baseline: base.label(),
        entries,
    })
}

impl Comparison {
    /// Plain-text table, one block per compared report.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{} vs {}\n", e.label, self.baseline));
            out.push_str(&format!("{:>6} {:>10} {:>10} {:>10}\n", "query", "scanned", "network", "colocated"));
            for r in e.per_query.iter().chain(std::iter::once(&e.cumulative)) {
                let q = if r.query_id == 0 { "total".to_string() } else { r.query_id.to_string() };
                out.push_str(&format!(
                    "{:>6} {:>10} {:>10} {:>10}\n",
                    q,
                    cell(r.bytes_scanned),
                    cell(r.network_bytes),
                    cell(r.collocated_pair_fraction)
                ));
            }
        }
        out
    }
}
