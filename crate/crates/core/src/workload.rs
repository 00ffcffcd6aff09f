//! Query workloads and synthetic datasets.
//!
//! Workload traces are plain text:
//!
//! ```text
//! arraycache-workload 1
//! pattern shifting-return seed 7
//! query 1 10,20 59,69 1
//! ```
//!
//! Each `query` line holds the id, the low corner, the high corner and the
//! join radius. Ids run `1..=n` in order.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ArraySchema, AttrKind, AttrValue, BoundingBox, Cell, QuerySpec};

pub const TRACE_HEADER: &str = "arraycache-workload 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    /// Query `k` is the base range moved by `(k - 1) * shift`.
    Shifting,
    /// Four ranges `base + j * shift`, `j = 0..4`, visited 1,2,3,4,1,2,...
    Alternating,
    /// Out and back: positions 1,2,...,h,h,...,2,1 with `h = ceil(n / 2)`.
    ShiftingReturn,
    /// Boxes the size of the base range at seeded random positions.
    UniformRandom,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Shifting,
        Pattern::Alternating,
        Pattern::ShiftingReturn,
        Pattern::UniformRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Shifting => "shifting",
            Pattern::Alternating => "alternating",
            Pattern::ShiftingReturn => "shifting-return",
            Pattern::UniformRandom => "uniform-random",
        }
    }

    /// Position of query `k` (1-based) among `n`, counted in shifts.
    fn step(self, k: usize, n: usize) -> usize {
        match self {
            Pattern::Shifting | Pattern::UniformRandom => k - 1,
            Pattern::Alternating => (k - 1) % 4,
            Pattern::ShiftingReturn => {
                let half = n.div_ceil(2);
                if k <= half {
                    k - 1
                } else {
                    n - k
                }
            }
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown workload pattern {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    pub pattern: Pattern,
    pub base: BoundingBox,
    pub shift: Vec<i64>,
    pub count: usize,
    pub shape_radius: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTrace {
    pub pattern: Pattern,
    pub seed: u64,
    pub queries: Vec<QuerySpec>,
}

impl WorkloadTrace {
    pub fn validate(&self, schema: &ArraySchema) -> Result<()> {
        for (k, q) in self.queries.iter().enumerate() {
            if q.id != k as u64 + 1 {
                return Err(Error::format(format!("query {} appears at position {}", q.id, k + 1)));
            }
            q.validate(schema)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[i64]| v.iter().map(i64::to_string).collect::<Vec<_>>().join(",");
        let mut out = format!("{TRACE_HEADER}\npattern {} seed {}\n", self.pattern, self.seed);
        for q in &self.queries {
            out.push_str(&format!(
                "query {} {} {} {}\n",
                q.id,
                join(&q.range.lo),
                join(&q.range.hi),
                q.shape_radius
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |n: usize, msg: &str| Error::format(format!("workload line {}: {msg}", n + 1));
        match lines.next() {
            Some((_, l)) if l.trim() == TRACE_HEADER => {}
            Some((n, _)) => return Err(bad(n, "expected header `arraycache-workload 1`")),
            None => return Err(Error::format("empty workload file")),
        }
        let (n, meta) = lines.next().ok_or_else(|| Error::format("workload has no pattern line"))?;
        let meta: Vec<&str> = meta.split_whitespace().collect();
        let (pattern, seed) = match meta.as_slice() {
            ["pattern", p, "seed", s] => (
                p.parse::<Pattern>().map_err(|_| bad(n, "unknown pattern"))?,
                s.parse::<u64>().map_err(|_| bad(n, "bad seed"))?,
            ),
            _ => return Err(bad(n, "expected `pattern <name> seed <n>`")),
        };
        let tuple = |n: usize, s: &str| -> Result<Vec<i64>> {
            s.split(',')
                .map(|v| v.trim().parse::<i64>().map_err(|_| bad(n, "bad coordinate")))
                .collect()
        };
        let mut queries = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let ["query", id, lo, hi, r] = f.as_slice() else {
                return Err(bad(n, "expected `query <id> <lo> <hi> <radius>`"));
            };
            let id: u64 = id.parse().map_err(|_| bad(n, "bad query id"))?;
            if id != queries.len() as u64 + 1 {
                return Err(bad(n, "query ids must run 1..n in order"));
            }
            let range = BoundingBox::new(tuple(n, lo)?, tuple(n, hi)?).map_err(|e| bad(n, &e.to_string()))?;
            let r = r.parse().map_err(|_| bad(n, "bad radius"))?;
            queries.push(QuerySpec::new(id, range, r));
        }
        Ok(WorkloadTrace { pattern, seed, queries })
    }
}

pub fn generate_workload(schema: &ArraySchema, params: &WorkloadParams) -> Result<WorkloadTrace> {
    let d = schema.ndims();
    if params.base.ndims() != d || params.shift.len() != d {
        return Err(Error::usage(format!("base range and shift must have {d} dimensions")));
    }
    if params.count == 0 {
        return Err(Error::usage("a workload needs at least one query"));
    }
    let domain = schema.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut queries = Vec::with_capacity(params.count);
    for k in 1..=params.count {
        let range = if params.pattern == Pattern::UniformRandom {
            let (mut lo, mut hi) = (Vec::with_capacity(d), Vec::with_capacity(d));
            for (i, dim) in schema.dims.iter().enumerate() {
                let ext = (params.base.extent(i) as i64).min(dim.hi - dim.lo + 1);
                let l = rng.random_range(dim.lo..=dim.hi - ext + 1);
                lo.push(l);
                hi.push(l + ext - 1);
            }
            BoundingBox::new(lo, hi)?
        } else {
            let s = params.pattern.step(k, params.count) as i64;
            let delta: Vec<i64> = params.shift.iter().map(|v| v * s).collect();
            params.base.translate(&delta).intersection(&domain).ok_or_else(|| {
                Error::Generation(format!("query {k} is shifted entirely outside the array"))
            })?
        };
        queries.push(QuerySpec::new(k as u64, range, params.shape_radius));
    }
    Ok(WorkloadTrace {
        pattern: params.pattern,
        seed: params.seed,
        queries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Skew {
    Uniform,
    /// Points drawn around `clusters` uniformly placed centres with a
    /// per-dimension gaussian offset of `sigma` cells. Points arrive cluster
    /// by cluster.
    GaussianCluster { clusters: usize, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_points: usize,
    pub n_files: usize,
    pub skew: Skew,
    pub seed: u64,
}

/// Seeded synthetic cells split evenly into `n_files` files by arrival order.
///
/// Uniform points are redrawn until `n_points` are distinct. Gaussian points
/// are drawn once and duplicates dropped, so a small `sigma` yields fewer
/// cells.
pub fn generate_synthetic_dataset(schema: &ArraySchema, params: &DatasetParams) -> Result<Vec<Vec<Cell>>> {
    if params.n_files == 0 {
        return Err(Error::usage("at least one file is required"));
    }
    if params.n_points < params.n_files {
        return Err(Error::usage("need at least one point per file"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let dims = &schema.dims;
    let mut seen: HashSet<Vec<i64>> = HashSet::with_capacity(params.n_points);
    let mut coords: Vec<Vec<i64>> = Vec::with_capacity(params.n_points);
    match params.skew {
        Skew::Uniform => {
            if schema.domain().volume() < params.n_points as u128 {
                return Err(Error::Generation("array has fewer cells than requested points".into()));
            }
            while coords.len() < params.n_points {
                let p: Vec<i64> = dims.iter().map(|d| rng.random_range(d.lo..=d.hi)).collect();
                if seen.insert(p.clone()) {
                    coords.push(p);
                }
            }
        }
        Skew::GaussianCluster { clusters, sigma } => {
            if clusters == 0 {
                return Err(Error::usage("at least one cluster is required"));
            }
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::usage(format!("bad sigma {sigma}: {e}")))?;
            let centres: Vec<Vec<i64>> = (0..clusters)
                .map(|_| dims.iter().map(|d| rng.random_range(d.lo..=d.hi)).collect())
                .collect();
            for i in 0..params.n_points {
                let c = &centres[i * clusters / params.n_points];
                let p: Vec<i64> = dims
                    .iter()
                    .zip(c)
                    .map(|(d, &x)| (x + normal.sample(&mut rng).round() as i64).clamp(d.lo, d.hi))
                    .collect();
                if seen.insert(p.clone()) {
                    coords.push(p);
                }
            }
        }
    }
    if coords.len() < params.n_files {
        return Err(Error::Generation(format!(
            "only {} distinct points for {} files",
            coords.len(),
            params.n_files
        )));
    }

    let n = coords.len();
    let mut files = Vec::with_capacity(params.n_files);
    let mut it = coords.into_iter();
    for k in 0..params.n_files {
        let take = (k + 1) * n / params.n_files - k * n / params.n_files;
        let cells = it
            .by_ref()
            .take(take)
            .map(|c| {
                let attrs = schema
                    .attrs
                    .iter()
                    .map(|a| match a.kind {
                        AttrKind::Int => AttrValue::Int(rng.random_range(0..1000)),
                        AttrKind::Float => AttrValue::Float(rng.random::<f64>()),
                    })
                    .collect();
                Cell::new(c, attrs)
            })
            .collect();
        files.push(cells);
    }
    Ok(files)
}
