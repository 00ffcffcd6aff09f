//! Deterministic in-process cluster: a coordinator with the global catalog
//! and `N` worker nodes, each with a cache budget and its own raw files.
//!
//! Every query runs the same pipeline: find the files and chunks it touches,
//! scan files with missing chunks, refine the chunking, pair up chunks for
//! the similarity join and assign the pairs to nodes, run the join, then
//! decide what stays cached and where. Disk and network cost are counted in
//! bytes.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::chunking::{FileChunking, RawFileMeta, DEFAULT_MIN_CELLS};
use crate::error::{Error, Result};
use crate::eviction::{plan_eviction, plan_lru, CacheTriple, LruEntry, QueryWeight};
use crate::geometry::{tight_box, ArraySchema, BoundingBox, Cell, QuerySpec};
use crate::ids::{ChunkId, FileId, NodeId};
use crate::join::{assign_pairs, generate_pairs, similarity_join_cells, JoinTask};
use crate::placement::{plan_placement, JoinHistory, PlacementState};
use crate::timing::Stopwatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Cost,
    ChunkLru,
    FileLru,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Cost, Policy::ChunkLru, Policy::FileLru];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Cost => "cost",
            Policy::ChunkLru => "chunk-lru",
            Policy::FileLru => "file-lru",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown policy {s:?}, expected cost, chunk-lru or file-lru")))
    }
}

/// Whether a chunk may be cached away from the node that stores its file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Budgeting {
    /// Any node with room; the cache is one pool of `N * budget_per_node`.
    #[default]
    Distributed,
    /// Only the node the data was read on.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub nodes: u32,
    pub budget_per_node: u64,
    pub min_cells: usize,
    pub weights: QueryWeight,
    pub policy: Policy,
    /// Run the placement step after eviction (cost policy only).
    pub placement: bool,
    #[serde(default)]
    pub budgeting: Budgeting,
}

impl SimConfig {
    pub fn new(policy: Policy, nodes: u32, budget_per_node: u64) -> Self {
        SimConfig {
            nodes,
            budget_per_node,
            min_cells: DEFAULT_MIN_CELLS,
            weights: QueryWeight::default(),
            policy,
            placement: true,
            budgeting: Budgeting::Distributed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::usage("cluster needs at least one node"));
        }
        if self.min_cells == 0 {
            return Err(Error::usage("min_cells must be at least 1"));
        }
        QueryWeight::new(self.weights.decay_base, self.weights.window)?;
        Ok(())
    }

    pub fn total_budget(&self) -> u64 {
        self.budget_per_node.saturating_mul(self.nodes as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawFile {
    pub meta: RawFileMeta,
    pub cells: Vec<Cell>,
}

/// All raw files of one array.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: ArraySchema,
    pub files: Vec<RawFile>,
}

impl Dataset {
    pub fn new(schema: ArraySchema, files: Vec<RawFile>) -> Result<Self> {
        schema.validate()?;
        let mut seen = BTreeSet::new();
        for f in &files {
            let id = f.meta.file_id;
            if !seen.insert(id) {
                return Err(Error::usage(format!("duplicate file {id}")));
            }
            if f.cells.is_empty() {
                return Err(Error::usage(format!("file {id} has no cells")));
            }
            for c in &f.cells {
                schema.check_cell(c)?;
            }
            if f.meta.cell_count != f.cells.len() as u64 {
                return Err(Error::usage(format!("file {id}: cell count does not match its cells")));
            }
            if tight_box(&f.cells)? != f.meta.bbox {
                return Err(Error::usage(format!("file {id}: box is not the tight box of its cells")));
            }
        }
        Ok(Dataset { schema, files })
    }

    /// One file per partition; file `k` is stored on node `k mod nodes` and
    /// charged at `cell_record_bytes` per cell.
    pub fn from_partitions(schema: ArraySchema, parts: Vec<Vec<Cell>>, nodes: u32) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::usage("cluster needs at least one node"));
        }
        let mut files = Vec::with_capacity(parts.len());
        for (k, cells) in parts.into_iter().enumerate() {
            let k = k as u32;
            if cells.is_empty() {
                return Err(Error::usage(format!("partition {k} is empty")));
            }
            let meta = RawFileMeta {
                file_id: FileId::new(k % nodes, k / nodes),
                cell_count: cells.len() as u64,
                file_bytes: cells.len() as u64 * schema.cell_record_bytes,
                bbox: tight_box(&cells)?,
            };
            files.push(RawFile { meta, cells });
        }
        Dataset::new(schema, files)
    }

    pub fn total_cells(&self) -> u64 {
        self.files.iter().map(|f| f.meta.cell_count).sum()
    }

    pub fn file(&self, id: FileId) -> Option<&RawFile> {
        self.files.iter().find(|f| f.meta.file_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: u64,
    pub files_scanned: u64,
    pub bytes_scanned: u64,
    pub network_bytes: u64,
    pub cache_hit_chunks: u64,
    pub cache_miss_chunks: u64,
    /// Share of cross-chunk join pairs whose chunks already sat on the same
    /// node before any transfer; 1 when the query has no cross pairs.
    pub collocated_pair_fraction: f64,
    pub result_cell_count: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTotals {
    pub files_scanned: u64,
    pub bytes_scanned: u64,
    pub network_bytes: u64,
    pub cache_hit_chunks: u64,
    pub cache_miss_chunks: u64,
    pub result_cell_count: u64,
    pub mean_collocated_pair_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<QueryMetrics>,
}

impl MetricsLog {
    pub fn totals(&self) -> MetricsTotals {
        let mut t = MetricsTotals::default();
        for r in &self.rows {
            t.files_scanned += r.files_scanned;
            t.bytes_scanned += r.bytes_scanned;
            t.network_bytes += r.network_bytes;
            t.cache_hit_chunks += r.cache_hit_chunks;
            t.cache_miss_chunks += r.cache_miss_chunks;
            t.result_cell_count += r.result_cell_count;
            t.mean_collocated_pair_fraction += r.collocated_pair_fraction;
        }
        if !self.rows.is_empty() {
            t.mean_collocated_pair_fraction /= self.rows.len() as f64;
        }
        t
    }
}

/// Wall-clock time spent per pipeline stage. Not part of the metrics, which
/// must be reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTiming {
    pub refine: Duration,
    pub join: Duration,
    pub eviction: Duration,
    pub placement: Duration,
    pub total: Duration,
}

impl StageTiming {
    /// Time spent deciding what to chunk, keep and move.
    pub fn planning(&self) -> Duration {
        self.refine + self.eviction + self.placement
    }
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub metrics: QueryMetrics,
    pub timing: StageTiming,
    /// Chunks overlapping the query after refinement.
    pub flagged: Vec<ChunkId>,
    pub tasks: Vec<JoinTask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedFile {
    pub node: NodeId,
    pub bytes: u64,
    pub last_access: u64,
}

/// A chunk overlapping the current query, and where its data is in memory.
struct Flagged {
    id: ChunkId,
    bbox: BoundingBox,
    size: u64,
    loc: NodeId,
    was_cached: bool,
}

/// A request to cache `key` somewhere.
struct Want<K> {
    key: K,
    size: u64,
    pref: NodeId,
    copies: BTreeSet<NodeId>,
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    config: SimConfig,
    data: Arc<Dataset>,
    file_index: BTreeMap<FileId, usize>,
    file_bytes: BTreeMap<FileId, u64>,
    chunkings: Vec<FileChunking>,
    /// Cell indices (into the file's cell list) of every live chunk.
    members: HashMap<ChunkId, Vec<u32>>,
    /// Cached chunks and their nodes (cost and chunk-lru).
    home: BTreeMap<ChunkId, NodeId>,
    /// Cached whole files (file-lru).
    cached_files: BTreeMap<FileId, CachedFile>,
    last_access: BTreeMap<ChunkId, u64>,
    triples: Vec<CacheTriple>,
    joins: JoinHistory,
    metrics: MetricsLog,
    last_query: u64,
}

impl ClusterState {
    pub fn new(config: SimConfig, data: Arc<Dataset>) -> Result<Self> {
        config.validate()?;
        let mut chunkings = Vec::with_capacity(data.files.len());
        let mut members = HashMap::new();
        for f in &data.files {
            if f.meta.file_id.node.0 >= config.nodes {
                return Err(Error::usage(format!(
                    "file {} lives on a node outside a {}-node cluster",
                    f.meta.file_id, config.nodes
                )));
            }
            let ch = FileChunking::new(&f.meta, config.min_cells, data.schema.cell_record_bytes)?;
            members.insert(ChunkId::new(f.meta.file_id, 0), (0..f.cells.len() as u32).collect());
            chunkings.push(ch);
        }
        let mut state = Self::empty(config, data, chunkings);
        state.members = members;
        Ok(state)
    }

    fn empty(config: SimConfig, data: Arc<Dataset>, chunkings: Vec<FileChunking>) -> Self {
        ClusterState {
            file_index: data
                .files
                .iter()
                .enumerate()
                .map(|(i, f)| (f.meta.file_id, i))
                .collect(),
            file_bytes: data.files.iter().map(|f| (f.meta.file_id, f.meta.file_bytes)).collect(),
            config,
            data,
            chunkings,
            members: HashMap::new(),
            home: BTreeMap::new(),
            cached_files: BTreeMap::new(),
            last_access: BTreeMap::new(),
            triples: Vec::new(),
            joins: JoinHistory::new(),
            metrics: MetricsLog::default(),
            last_query: 0,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn data(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    pub fn chunkings(&self) -> &[FileChunking] {
        &self.chunkings
    }

    pub fn chunking(&self, file: FileId) -> Option<&FileChunking> {
        self.file_index.get(&file).map(|&i| &self.chunkings[i])
    }

    pub fn chunk_count(&self) -> usize {
        self.chunkings.iter().map(FileChunking::len).sum()
    }

    /// Cached chunks and their homes (empty under file-lru).
    pub fn cached_chunks(&self) -> &BTreeMap<ChunkId, NodeId> {
        &self.home
    }

    /// Cached files and their nodes (file-lru only).
    pub fn cached_files(&self) -> &BTreeMap<FileId, CachedFile> {
        &self.cached_files
    }

    pub fn triples(&self) -> &[CacheTriple] {
        &self.triples
    }

    pub fn join_history(&self) -> &JoinHistory {
        &self.joins
    }

    pub fn chunk_members(&self, chunk: ChunkId) -> Option<&[u32]> {
        self.members.get(&chunk).map(Vec::as_slice)
    }

    pub fn chunk_cells(&self, chunk: ChunkId) -> Option<Vec<&Cell>> {
        let file = &self.data.files[*self.file_index.get(&chunk.file)?];
        let m = self.members.get(&chunk)?;
        Some(m.iter().map(|&i| &file.cells[i as usize]).collect())
    }

    fn chunk_size(&self, chunk: ChunkId) -> u64 {
        self.chunking(chunk.file)
            .and_then(|c| c.get(chunk))
            .map_or(0, |s| s.size_bytes)
    }

    /// Bytes cached on each node.
    pub fn node_usage(&self) -> BTreeMap<NodeId, u64> {
        let mut used: BTreeMap<NodeId, u64> = (0..self.config.nodes).map(|n| (NodeId(n), 0)).collect();
        for (&c, n) in &self.home {
            *used.entry(*n).or_default() += self.chunk_size(c);
        }
        for f in self.cached_files.values() {
            *used.entry(f.node).or_default() += f.bytes;
        }
        used
    }

    fn is_cached(&self, chunk: ChunkId) -> bool {
        match self.config.policy {
            Policy::FileLru => self.cached_files.contains_key(&chunk.file),
            _ => self.home.contains_key(&chunk),
        }
    }

    /// Node holding the chunk's data: its cache home, else its file's node.
    fn location(&self, chunk: ChunkId) -> NodeId {
        match self.config.policy {
            Policy::FileLru => self.cached_files.get(&chunk.file).map(|f| f.node),
            _ => self.home.get(&chunk).copied(),
        }
        .unwrap_or(chunk.file.node)
    }

    pub fn run_query(&mut self, q: &QuerySpec) -> Result<QueryOutcome> {
        let total = Stopwatch::start();
        q.validate(&self.data.schema)?;
        if q.id <= self.last_query {
            return Err(Error::usage(format!(
                "query ids must increase: got {} after {}",
                q.id, self.last_query
            )));
        }
        self.last_query = q.id;
        let now = q.id;
        let data = Arc::clone(&self.data);
        let crb = data.schema.cell_record_bytes;
        let mut m = QueryMetrics {
            query_id: q.id,
            collocated_pair_fraction: 1.0,
            ..QueryMetrics::default()
        };
        let mut timing = StageTiming::default();

        // files and chunks touched; a file with any missing chunk is scanned
        let mut touched = Vec::new();
        for (fi, f) in data.files.iter().enumerate() {
            if !f.meta.bbox.intersects(&q.range) {
                continue;
            }
            let overlapping = self.chunkings[fi].overlapping_chunks(&q.range);
            if overlapping.is_empty() {
                continue;
            }
            let mut miss = false;
            for &c in &overlapping {
                if self.is_cached(c) {
                    m.cache_hit_chunks += 1;
                } else {
                    m.cache_miss_chunks += 1;
                    miss = true;
                }
            }
            if miss {
                m.files_scanned += 1;
                m.bytes_scanned += f.meta.file_bytes;
            }
            touched.push((fi, overlapping));
        }
        if touched.is_empty() {
            timing.total = total.elapsed();
            self.metrics.rows.push(m.clone());
            return Ok(QueryOutcome {
                metrics: m,
                timing,
                flagged: Vec::new(),
                tasks: Vec::new(),
            });
        }

        let sw = Stopwatch::start();
        let mut flagged: Vec<Flagged> = Vec::new();
        let mut renames: HashMap<ChunkId, Option<ChunkId>> = HashMap::new();
        for (fi, overlapping) in &touched {
            let file = &data.files[*fi];
            let before: HashMap<ChunkId, (bool, NodeId)> = overlapping
                .iter()
                .map(|&c| (c, (self.is_cached(c), self.location(c))))
                .collect();
            let cells: BTreeMap<ChunkId, Vec<&[i64]>> = overlapping
                .iter()
                .map(|c| {
                    let idx = &self.members[c];
                    (*c, idx.iter().map(|&i| file.cells[i as usize].coords.as_slice()).collect())
                })
                .collect();
            let out = self.chunkings[*fi].refine(q, &cells)?;
            drop(cells);

            let mut parents = BTreeSet::new();
            for rc in out.chunks {
                if rc.id == rc.parent {
                    let (was_cached, loc) = before[&rc.id];
                    flagged.push(Flagged {
                        id: rc.id,
                        bbox: rc.bbox,
                        size: rc.cell_count * crb,
                        loc,
                        was_cached,
                    });
                    continue;
                }
                parents.insert(rc.parent);
                let from = &self.members[&rc.parent];
                let own: Vec<u32> = rc.members.unwrap_or_default().iter().map(|&k| from[k]).collect();
                self.members.insert(rc.id, own);
                if rc.overlaps_query {
                    let (was_cached, loc) = before[&rc.parent];
                    renames.insert(rc.parent, Some(rc.id));
                    flagged.push(Flagged {
                        id: rc.id,
                        bbox: rc.bbox,
                        size: rc.cell_count * crb,
                        loc,
                        was_cached,
                    });
                } else {
                    renames.entry(rc.parent).or_insert(None);
                }
            }
            for p in parents {
                self.members.remove(&p);
                self.home.remove(&p);
                self.last_access.remove(&p);
            }
        }
        if !renames.is_empty() {
            let rename = |c: ChunkId| renames.get(&c).copied().unwrap_or(Some(c));
            self.joins.remap(rename);
            let mut triples = Vec::with_capacity(self.triples.len());
            for t in std::mem::take(&mut self.triples) {
                let chunks: Vec<(ChunkId, u64)> = t
                    .chunks
                    .iter()
                    .filter_map(|&(c, _)| rename(c))
                    .map(|c| (c, self.chunk_size(c)))
                    .collect();
                if !chunks.is_empty() {
                    triples.push(CacheTriple::new(t.query_id, t.file_id, chunks)?);
                }
            }
            self.triples = triples;
        }
        timing.refine = sw.elapsed();

        // join pairs, assignment and the cell-level join
        let sw = Stopwatch::start();
        let boxes: Vec<(ChunkId, BoundingBox)> = flagged.iter().map(|f| (f.id, f.bbox.clone())).collect();
        let pairs = generate_pairs(&boxes, q);
        let loc: BTreeMap<ChunkId, NodeId> = flagged.iter().map(|f| (f.id, f.loc)).collect();
        let sizes: BTreeMap<ChunkId, u64> = flagged.iter().map(|f| (f.id, f.size)).collect();
        let cross: Vec<&(ChunkId, ChunkId)> = pairs.iter().filter(|(a, b)| a != b).collect();
        if !cross.is_empty() {
            let together = cross.iter().filter(|(a, b)| loc[a] == loc[b]).count();
            m.collocated_pair_fraction = together as f64 / cross.len() as f64;
        }
        let mut copies: BTreeMap<ChunkId, BTreeSet<NodeId>> =
            loc.iter().map(|(&c, &n)| (c, BTreeSet::from([n]))).collect();
        let tasks = assign_pairs(&pairs, &mut copies, &sizes)?;
        m.network_bytes += tasks.iter().map(|t| t.transfer_bytes).sum::<u64>();

        let in_range: HashMap<ChunkId, Vec<&[i64]>> = flagged
            .iter()
            .map(|f| {
                let file = &data.files[self.file_index[&f.id.file]];
                let pts = self.members[&f.id]
                    .iter()
                    .map(|&i| file.cells[i as usize].coords.as_slice())
                    .filter(|p| q.range.contains_point(p))
                    .collect();
                (f.id, pts)
            })
            .collect();
        for t in &tasks {
            let (a, b) = t.pair;
            let n = similarity_join_cells(&in_range[&a], &in_range[&b], q);
            m.result_cell_count += if a == b { n } else { 2 * n };
        }
        drop(in_range);
        timing.join = sw.elapsed();

        self.joins.record(now, pairs.iter().copied());
        self.joins.purge(now, &self.config.weights);

        match self.config.policy {
            Policy::Cost => self.update_cost(now, &flagged, &copies, &mut m, &mut timing)?,
            Policy::ChunkLru => {
                let sw = Stopwatch::start();
                self.update_chunk_lru(now, &flagged, &mut m);
                timing.eviction = sw.elapsed();
            }
            Policy::FileLru => {
                let sw = Stopwatch::start();
                self.update_file_lru(now, &flagged, &mut m);
                timing.eviction = sw.elapsed();
            }
        }

        timing.total = total.elapsed();
        self.metrics.rows.push(m.clone());
        Ok(QueryOutcome {
            metrics: m,
            timing,
            flagged: flagged.iter().map(|f| f.id).collect(),
            tasks,
        })
    }

    fn budgets(&self) -> BTreeMap<NodeId, u64> {
        (0..self.config.nodes)
            .map(|n| (NodeId(n), self.config.budget_per_node))
            .collect()
    }

    /// Give each wanted item a node: its preferred node if it fits, else
    /// (when distributed) the node with the most room left. Moving to a node
    /// without a copy is charged to `network`.
    fn allocate<K: Ord + Copy>(
        &self,
        wants: Vec<Want<K>>,
        remaining: &mut BTreeMap<NodeId, u64>,
        network: &mut u64,
    ) -> (BTreeMap<K, NodeId>, Vec<K>) {
        let mut homes = BTreeMap::new();
        let mut dropped = Vec::new();
        for w in wants {
            let target = if remaining.get(&w.pref).is_some_and(|&r| r >= w.size) {
                Some(w.pref)
            } else if self.config.budgeting == Budgeting::Distributed {
                remaining
                    .iter()
                    .max_by_key(|(n, r)| (**r, Reverse(**n)))
                    .filter(|(_, r)| **r >= w.size)
                    .map(|(n, _)| *n)
            } else {
                None
            };
            match target {
                Some(n) => {
                    *remaining.get_mut(&n).unwrap() -= w.size;
                    if !w.copies.contains(&n) {
                        *network += w.size;
                    }
                    homes.insert(w.key, n);
                }
                None => dropped.push(w.key),
            }
        }
        (homes, dropped)
    }

    fn update_cost(
        &mut self,
        now: u64,
        flagged: &[Flagged],
        copies: &BTreeMap<ChunkId, BTreeSet<NodeId>>,
        m: &mut QueryMetrics,
        timing: &mut StageTiming,
    ) -> Result<()> {
        let sw = Stopwatch::start();
        let weights = self.config.weights;
        let mut by_file: BTreeMap<FileId, Vec<(ChunkId, u64)>> = BTreeMap::new();
        for f in flagged {
            by_file.entry(f.id.file).or_default().push((f.id, f.size));
        }
        let current = by_file
            .into_iter()
            .map(|(file, chunks)| CacheTriple::new(now, file, chunks))
            .collect::<Result<Vec<_>>>()?;
        let plan = plan_eviction(
            &self.triples,
            &current,
            self.config.total_budget(),
            &weights,
            &self.file_bytes,
            now,
        )?;
        timing.eviction = sw.elapsed();

        let sw = Stopwatch::start();
        let flagged_at: HashMap<ChunkId, &Flagged> = flagged.iter().map(|f| (f.id, f)).collect();
        let mut priority: BTreeMap<ChunkId, f64> = BTreeMap::new();
        for t in &plan.keep {
            let p = weights.weight_at(now, t.query_id) * self.file_bytes[&t.file_id] as f64 / t.bytes().max(1) as f64;
            for &(c, _) in &t.chunks {
                let e = priority.entry(c).or_insert(p);
                *e = e.max(p);
            }
        }

        let mut remaining = self.budgets();
        let homes = if self.config.placement {
            let mut locations = BTreeMap::new();
            for &c in plan.kept_chunks.keys() {
                let nodes = match (copies.get(&c), self.home.get(&c)) {
                    (Some(s), _) => s.clone(),
                    (None, Some(&h)) => BTreeSet::from([h]),
                    (None, None) => {
                        return Err(Error::Precondition(format!("kept chunk {c} has no copy")));
                    }
                };
                locations.insert(c, nodes);
            }
            let state = PlacementState {
                locations,
                sizes: plan.kept_chunks.clone(),
                budgets: remaining.clone(),
                priority: priority.clone(),
            };
            let placed = plan_placement(&state, &self.joins, &weights, now)?;
            for (n, used) in &placed.used {
                *remaining.get_mut(n).unwrap() -= used;
            }
            let mut spill: Vec<ChunkId> = placed.dropped.clone();
            let prio = |c: &ChunkId| priority.get(c).copied().unwrap_or(0.0);
            spill.sort_by(|a, b| prio(b).total_cmp(&prio(a)).then(a.cmp(b)));
            let wants = spill
                .into_iter()
                .map(|c| {
                    let nodes = &state.locations[&c];
                    Want {
                        key: c,
                        size: state.sizes[&c],
                        pref: *nodes.first().unwrap(),
                        copies: nodes.clone(),
                    }
                })
                .collect();
            let (mut spilled, _) = self.allocate(wants, &mut remaining, &mut m.network_bytes);
            let mut homes = placed.home;
            homes.append(&mut spilled);
            homes
        } else {
            let mut wants: Vec<(bool, Want<ChunkId>)> = plan
                .kept_chunks
                .iter()
                .map(|(&c, &size)| match flagged_at.get(&c) {
                    Some(f) => (
                        f.was_cached,
                        Want {
                            key: c,
                            size,
                            pref: f.loc,
                            copies: copies[&c].clone(),
                        },
                    ),
                    None => {
                        let h = self.home[&c];
                        (
                            true,
                            Want {
                                key: c,
                                size,
                                pref: h,
                                copies: BTreeSet::from([h]),
                            },
                        )
                    }
                })
                .collect();
            wants.sort_by_key(|(cached, w)| (!*cached, w.key));
            let wants = wants.into_iter().map(|(_, w)| w).collect();
            self.allocate(wants, &mut remaining, &mut m.network_bytes).0
        };

        let mut triples = Vec::with_capacity(plan.keep.len());
        for t in plan.keep {
            let chunks: Vec<_> = t.chunks.iter().copied().filter(|(c, _)| homes.contains_key(c)).collect();
            if !chunks.is_empty() {
                triples.push(CacheTriple::new(t.query_id, t.file_id, chunks)?);
            }
        }
        self.triples = triples;
        self.home = homes;
        timing.placement = sw.elapsed();
        Ok(())
    }

    fn update_chunk_lru(&mut self, now: u64, flagged: &[Flagged], m: &mut QueryMetrics) {
        let flagged_at: HashMap<ChunkId, &Flagged> = flagged.iter().map(|f| (f.id, f)).collect();
        let mut entries: Vec<LruEntry<ChunkId>> = self
            .home
            .keys()
            .filter(|c| !flagged_at.contains_key(c))
            .map(|&c| LruEntry {
                key: c,
                bytes: self.chunk_size(c),
                last_access: self.last_access.get(&c).copied().unwrap_or(0),
            })
            .collect();
        entries.extend(flagged.iter().map(|f| LruEntry {
            key: f.id,
            bytes: f.size,
            last_access: now,
        }));
        let plan = plan_lru(&entries, self.config.total_budget());

        let mut wants: Vec<(bool, Want<ChunkId>)> = plan
            .keep
            .iter()
            .map(|&c| match flagged_at.get(&c) {
                Some(f) => (
                    f.was_cached,
                    Want {
                        key: c,
                        size: f.size,
                        pref: f.loc,
                        copies: BTreeSet::from([f.loc]),
                    },
                ),
                None => (
                    true,
                    Want {
                        key: c,
                        size: self.chunk_size(c),
                        pref: self.home[&c],
                        copies: BTreeSet::from([self.home[&c]]),
                    },
                ),
            })
            .collect();
        wants.sort_by_key(|(cached, w)| (!*cached, w.key));
        let mut remaining = self.budgets();
        let (homes, _) = self.allocate(
            wants.into_iter().map(|(_, w)| w).collect(),
            &mut remaining,
            &mut m.network_bytes,
        );
        self.last_access = homes
            .keys()
            .map(|&c| {
                let t = if flagged_at.contains_key(&c) {
                    now
                } else {
                    self.last_access.get(&c).copied().unwrap_or(0)
                };
                (c, t)
            })
            .collect();
        self.home = homes;
    }

    fn update_file_lru(&mut self, now: u64, flagged: &[Flagged], m: &mut QueryMetrics) {
        let crb = self.data.schema.cell_record_bytes;
        let accessed: BTreeSet<FileId> = flagged.iter().map(|f| f.id.file).collect();
        let mem_bytes = |f: FileId| self.data.files[self.file_index[&f]].meta.cell_count * crb;
        let mut entries: Vec<LruEntry<FileId>> = self
            .cached_files
            .iter()
            .filter(|(f, _)| !accessed.contains(f))
            .map(|(&f, c)| LruEntry {
                key: f,
                bytes: c.bytes,
                last_access: c.last_access,
            })
            .collect();
        entries.extend(accessed.iter().map(|&f| LruEntry {
            key: f,
            bytes: mem_bytes(f),
            last_access: now,
        }));
        let plan = plan_lru(&entries, self.config.total_budget());

        let mut wants: Vec<(bool, Want<FileId>)> = plan
            .keep
            .iter()
            .map(|&f| {
                let (cached, node) = match self.cached_files.get(&f) {
                    Some(c) => (true, c.node),
                    None => (false, f.node),
                };
                (
                    cached,
                    Want {
                        key: f,
                        size: mem_bytes(f),
                        pref: node,
                        copies: BTreeSet::from([node]),
                    },
                )
            })
            .collect();
        wants.sort_by_key(|(cached, w)| (!*cached, w.key));
        let mut remaining = self.budgets();
        let (homes, _) = self.allocate(
            wants.into_iter().map(|(_, w)| w).collect(),
            &mut remaining,
            &mut m.network_bytes,
        );
        self.cached_files = homes
            .into_iter()
            .map(|(f, node)| {
                let last_access = if accessed.contains(&f) {
                    now
                } else {
                    self.cached_files[&f].last_access
                };
                (
                    f,
                    CachedFile {
                        node,
                        bytes: mem_bytes(f),
                        last_access,
                    },
                )
            })
            .collect();
    }

    /// Check budgets, catalog consistency and the chunking invariants:
    /// chunk cell sets partition each file and every chunk box is tight.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Precondition(msg));
        for (n, used) in self.node_usage() {
            if n.0 >= self.config.nodes {
                return fail(format!("data cached on unknown node {n}"));
            }
            if used > self.config.budget_per_node {
                return fail(format!("node {n} holds {used} bytes over a budget of {}", self.config.budget_per_node));
            }
        }
        for &c in self.home.keys() {
            if self.chunking(c.file).and_then(|ch| ch.get(c)).is_none() {
                return fail(format!("cached chunk {c} is not in the catalog"));
            }
        }
        if self.config.policy == Policy::FileLru && !self.home.is_empty() {
            return fail("file-lru caches chunks".into());
        }
        if self.config.policy != Policy::FileLru && !self.cached_files.is_empty() {
            return fail("chunk policy caches files".into());
        }
        for t in &self.triples {
            if let Some((c, _)) = t.chunks.iter().find(|(c, _)| !self.home.contains_key(c)) {
                return fail(format!("triple of query {} references uncached chunk {c}", t.query_id));
            }
        }

        for (fi, ch) in self.chunkings.iter().enumerate() {
            let file = &self.data.files[fi];
            let mut seen = vec![false; file.cells.len()];
            for s in ch.chunks() {
                let Some(idx) = self.members.get(&s.id) else {
                    return fail(format!("chunk {} has no cells", s.id));
                };
                if idx.len() as u64 != s.cell_count {
                    return fail(format!("chunk {} cell count mismatch", s.id));
                }
                for &i in idx {
                    if std::mem::replace(&mut seen[i as usize], true) {
                        return fail(format!("cell {i} of {} in two chunks", file.meta.file_id));
                    }
                }
                let tight = tight_box(idx.iter().map(|&i| &file.cells[i as usize]))?;
                if tight != s.bbox {
                    return fail(format!("chunk {} box {} is not tight ({tight})", s.id, s.bbox));
                }
            }
            if seen.iter().any(|s| !s) {
                return fail(format!("file {} has cells in no chunk", file.meta.file_id));
            }
        }
        let live: usize = self.chunkings.iter().map(FileChunking::len).sum();
        if live != self.members.len() {
            return fail("membership table holds dead chunks".into());
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            config: self.config.clone(),
            last_query: self.last_query,
            chunkings: self.chunkings.clone(),
            home: self.home.clone(),
            cached_files: self.cached_files.clone(),
            last_access: self.last_access.clone(),
            triples: self.triples.clone(),
            joins: self.joins.clone(),
            metrics: self.metrics.clone(),
        }
    }

    /// Rebuild a cluster from a snapshot taken over the same dataset. Chunk
    /// membership is recomputed from the chunk boxes, which never overlap.
    pub fn restore(snap: Snapshot, data: Arc<Dataset>) -> Result<Self> {
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(Error::format(format!(
                "not a version {SNAPSHOT_VERSION} cluster snapshot: {} v{}",
                snap.format, snap.version
            )));
        }
        snap.config.validate()?;
        if snap.chunkings.len() != data.files.len()
            || snap.chunkings.iter().zip(&data.files).any(|(c, f)| c.file_id() != f.meta.file_id)
        {
            return Err(Error::format("snapshot was taken over a different dataset"));
        }
        let mut members: HashMap<ChunkId, Vec<u32>> = HashMap::new();
        for (ch, f) in snap.chunkings.iter().zip(&data.files) {
            let boxes: Vec<(ChunkId, &BoundingBox)> = ch.chunks().map(|s| (s.id, &s.bbox)).collect();
            for (i, cell) in f.cells.iter().enumerate() {
                let Some((id, _)) = boxes.iter().find(|(_, b)| b.contains_point(&cell.coords)) else {
                    return Err(Error::format(format!("cell {i} of {} lies in no chunk", f.meta.file_id)));
                };
                members.entry(*id).or_default().push(i as u32);
            }
        }
        let mut state = Self::empty(snap.config, data, snap.chunkings);
        state.members = members;
        state.last_query = snap.last_query;
        state.home = snap.home;
        state.cached_files = snap.cached_files;
        state.last_access = snap.last_access;
        state.triples = snap.triples;
        state.joins = snap.joins;
        state.metrics = snap.metrics;
        state
            .check_invariants()
            .map_err(|e| Error::format(format!("inconsistent snapshot: {e}")))?;
        Ok(state)
    }
}

pub const SNAPSHOT_FORMAT: &str = "arraycache-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format: String,
    pub version: u32,
    pub config: SimConfig,
    pub last_query: u64,
    pub chunkings: Vec<FileChunking>,
    pub home: BTreeMap<ChunkId, NodeId>,
    pub cached_files: BTreeMap<FileId, CachedFile>,
    pub last_access: BTreeMap<ChunkId, u64>,
    pub triples: Vec<CacheTriple>,
    pub joins: JoinHistory,
    pub metrics: MetricsLog,
}

/// Bytes of the distinct cells a workload actually reads: the cells of every
/// chunk that overlaps a query after refinement, at `cell_record_bytes` each.
pub fn working_set_bytes(data: &Arc<Dataset>, queries: &[QuerySpec], min_cells: usize) -> Result<u64> {
    let nodes = data.files.iter().map(|f| f.meta.file_id.node.0 + 1).max().unwrap_or(1);
    let mut config = SimConfig::new(Policy::ChunkLru, nodes, 0);
    config.min_cells = min_cells;
    let mut state = ClusterState::new(config, Arc::clone(data))?;
    let mut cells: HashSet<(FileId, u32)> = HashSet::new();
    for q in queries {
        let out = state.run_query(q)?;
        for c in out.flagged {
            cells.extend(state.members[&c].iter().map(|&i| (c.file, i)));
        }
    }
    Ok(cells.len() as u64 * data.schema.cell_record_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Dimension;

    fn schema2(hi: i64) -> ArraySchema {
        ArraySchema::with_default_record(
            vec![
                Dimension { name: "i".into(), lo: 0, hi },
                Dimension { name: "j".into(), lo: 0, hi },
            ],
            vec![],
        )
        .unwrap()
    }

    fn cells(pts: &[[i64; 2]]) -> Vec<Cell> {
        pts.iter().map(|p| Cell::at(p)).collect()
    }

    fn bx(lo: [i64; 2], hi: [i64; 2]) -> BoundingBox {
        BoundingBox::new(lo.to_vec(), hi.to_vec()).unwrap()
    }

    /// Two files on two nodes, 4 cells each.
    fn small() -> Arc<Dataset> {
        let parts = vec![
            cells(&[[1, 1], [2, 1], [8, 8], [9, 9]]),
            cells(&[[1, 2], [2, 2], [8, 1], [9, 1]]),
        ];
        Arc::new(Dataset::from_partitions(schema2(20), parts, 2).unwrap())
    }

    fn config(policy: Policy, cells_per_node: u64) -> SimConfig {
        let mut c = SimConfig::new(policy, 2, cells_per_node * 16);
        c.min_cells = 2;
        c
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("lfu".parse::<Policy>().unwrap_err().is_usage());
    }

    #[test]
    fn repeat_query_is_a_full_hit() {
        for p in Policy::ALL {
            let mut s = ClusterState::new(config(p, 8), small()).unwrap();
            let q = QuerySpec::new(1, bx([0, 0], [3, 3]), 1);
            let first = s.run_query(&q).unwrap().metrics;
            assert_eq!(first.files_scanned, 2, "{p}");
            let again = s.run_query(&QuerySpec { id: 2, ..q }).unwrap().metrics;
            assert_eq!((again.files_scanned, again.bytes_scanned), (0, 0), "{p}");
            assert_eq!(again.result_cell_count, first.result_cell_count);
            s.check_invariants().unwrap();
        }
    }

    #[test]
    fn disjoint_query_changes_nothing() {
        let mut s = ClusterState::new(config(Policy::Cost, 8), small()).unwrap();
        s.run_query(&QuerySpec::new(1, bx([0, 0], [3, 3]), 1)).unwrap();
        let before = s.snapshot();
        let m = s.run_query(&QuerySpec::new(2, bx([15, 15], [20, 20]), 1)).unwrap().metrics;
        assert_eq!(
            m,
            QueryMetrics {
                query_id: 2,
                collocated_pair_fraction: 1.0,
                ..QueryMetrics::default()
            }
        );
        let after = s.snapshot();
        assert_eq!(before.chunkings, after.chunkings);
        assert_eq!(before.home, after.home);
        assert_eq!(before.triples, after.triples);
    }

    #[test]
    fn join_result_matches_direct_join() {
        let data = small();
        let q = QuerySpec::new(1, bx([0, 0], [3, 3]), 1);
        let all: Vec<&Cell> = data.files.iter().flat_map(|f| &f.cells).collect();
        let expect = similarity_join_cells(&all.iter().map(|c| c.coords.clone()).collect::<Vec<_>>(), &all.iter().map(|c| c.coords.clone()).collect::<Vec<_>>(), &q);
        for p in Policy::ALL {
            let mut s = ClusterState::new(config(p, 8), Arc::clone(&data)).unwrap();
            assert_eq!(s.run_query(&q).unwrap().metrics.result_cell_count, expect);
        }
        // 4 cells in a 2x2 square: 4 self pairs + 8 ordered neighbours
        assert_eq!(expect, 12);
    }

    #[test]
    fn zero_budget_caches_nothing() {
        for p in Policy::ALL {
            let mut s = ClusterState::new(config(p, 0), small()).unwrap();
            for id in 1..=3 {
                let m = s.run_query(&QuerySpec::new(id, bx([0, 0], [3, 3]), 1)).unwrap().metrics;
                assert_eq!(m.files_scanned, 2);
            }
            assert!(s.cached_chunks().is_empty() && s.cached_files().is_empty());
        }
    }

    #[test]
    fn query_ids_must_increase() {
        let mut s = ClusterState::new(config(Policy::Cost, 8), small()).unwrap();
        s.run_query(&QuerySpec::new(3, bx([0, 0], [3, 3]), 1)).unwrap();
        assert!(s.run_query(&QuerySpec::new(3, bx([0, 0], [3, 3]), 1)).unwrap_err().is_usage());
    }

    #[test]
    fn splitting_prunes_later_scans() {
        let mut s = ClusterState::new(config(Policy::ChunkLru, 0), small()).unwrap();
        s.run_query(&QuerySpec::new(1, bx([0, 0], [3, 3]), 0)).unwrap();
        // the far corner of file 0 has been split off; a query between the
        // two clusters no longer touches any chunk of file 0
        let m = s.run_query(&QuerySpec::new(2, bx([4, 4], [7, 7]), 0)).unwrap().metrics;
        assert_eq!(m.files_scanned, 0);
        s.check_invariants().unwrap();
    }

    #[test]
    fn local_budgeting_never_moves_data() {
        // a single big file on node 0 and an idle node 1
        let parts = vec![cells(&[[1, 1], [1, 2], [2, 1], [2, 2]]), cells(&[[15, 15]])];
        let data = Arc::new(Dataset::from_partitions(schema2(20), parts, 2).unwrap());
        let q = QuerySpec::new(1, bx([0, 0], [3, 3]), 0);

        let mut cfg = config(Policy::ChunkLru, 4);
        cfg.min_cells = 100;
        cfg.budget_per_node = 3 * 16;
        cfg.budgeting = Budgeting::Local;
        let mut local = ClusterState::new(cfg.clone(), Arc::clone(&data)).unwrap();
        local.run_query(&q).unwrap();
        assert!(local.cached_chunks().is_empty());

        cfg.budgeting = Budgeting::Distributed;
        cfg.budget_per_node = 4 * 16;
        let mut dist = ClusterState::new(cfg, data).unwrap();
        let m = dist.run_query(&q).unwrap().metrics;
        assert_eq!(dist.cached_chunks().len(), 1);
        assert_eq!(m.network_bytes, 0, "fits at origin");
    }

    #[test]
    fn snapshot_round_trips() {
        let data = small();
        let mut s = ClusterState::new(config(Policy::Cost, 3), Arc::clone(&data)).unwrap();
        s.run_query(&QuerySpec::new(1, bx([0, 0], [3, 3]), 1)).unwrap();
        s.run_query(&QuerySpec::new(2, bx([7, 0], [9, 9]), 1)).unwrap();
        let snap = s.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let back: Snapshot = serde_json::from_str(&json).unwrap();
        let mut r = ClusterState::restore(back, Arc::clone(&data)).unwrap();
        let q = QuerySpec::new(3, bx([0, 0], [9, 9]), 1);
        assert_eq!(r.run_query(&q).unwrap().metrics, s.run_query(&q).unwrap().metrics);
        assert_eq!(r.snapshot(), s.snapshot());
    }

    #[test]
    fn snapshot_from_other_dataset_is_rejected() {
        let s = ClusterState::new(config(Policy::Cost, 3), small()).unwrap();
        let other = Arc::new(Dataset::from_partitions(schema2(20), vec![cells(&[[1, 1]])], 2).unwrap());
        assert!(ClusterState::restore(s.snapshot(), other).is_err());
    }

    #[test]
    fn dataset_rejects_bad_meta() {
        let schema = schema2(20);
        let meta = RawFileMeta {
            file_id: FileId::new(0, 0),
            cell_count: 1,
            file_bytes: 16,
            bbox: bx([0, 0], [5, 5]),
        };
        let f = RawFile {
            meta,
            cells: cells(&[[1, 1]]),
        };
        assert!(Dataset::new(schema, vec![f]).is_err());
    }

    #[test]
    fn working_set_counts_flagged_cells_once() {
        let data = small();
        let qs = [
            QuerySpec::new(1, bx([0, 0], [3, 3]), 0),
            QuerySpec::new(2, bx([0, 0], [3, 3]), 0),
        ];
        // min_cells 2: the four cells near the origin end up in flagged chunks
        assert_eq!(working_set_bytes(&data, &qs, 2).unwrap(), 4 * 16);
    }
}
