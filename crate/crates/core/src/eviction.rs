//! Cache eviction planning.
//!
//! The cost-based planner keeps the chunks that save the most raw-file
//! scanning per byte of cache. Its unit is the [`CacheTriple`]: the chunks
//! one query read from one file. Because a single missing chunk forces a
//! full rescan of its file, a triple is worth keeping only as a whole, and
//! its cost is the file size divided by the bytes still needed to complete
//! it, weighted by how recent the query was:
//!
//! ```text
//! cost(t) = w(age) * file_bytes / sum(size of t's chunks not yet kept)
//! ```
//!
//! The planner starts from the current query's triples and admits historical
//! triples greedily by maximum cost. Admitting a triple can only lower the
//! uncached bytes of triples sharing its chunks, so their costs are raised in
//! place with an addressable heap.
//!
//! File-level and chunk-level LRU baselines live here too.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heap::IndexedMaxHeap;
use crate::ids::{ChunkId, FileId};

/// Exponentially decaying weight of a query by age (0 = current query),
/// truncated to a window of recent queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryWeight {
    pub decay_base: f64,
    pub window: u32,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    scale: f64,
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

impl Default for QueryWeight {
    fn default() -> Self {
        QueryWeight {
            decay_base: 2.0,
            window: 16,
            scale: 1.0,
        }
    }
}

impl QueryWeight {
    pub fn new(decay_base: f64, window: u32) -> Result<Self> {
        if !(decay_base > 1.0 && decay_base.is_finite()) {
            return Err(Error::usage(format!("decay base must be > 1, got {decay_base}")));
        }
        if window == 0 {
            return Err(Error::usage("weight window must be at least 1"));
        }
        Ok(QueryWeight {
            decay_base,
            window,
            scale: 1.0,
        })
    }

    /// Same decay with every weight multiplied by `factor`.
    pub fn scaled(self, factor: f64) -> Self {
        QueryWeight {
            scale: self.scale * factor,
            ..self
        }
    }

    pub fn weight(&self, age: u64) -> f64 {
        if age >= self.window as u64 {
            0.0
        } else {
            self.scale * self.decay_base.powi(-(age as i32))
        }
    }

    pub fn weight_at(&self, now: u64, query_id: u64) -> f64 {
        self.weight(now.saturating_sub(query_id))
    }
}

/// The chunks of `file_id` accessed by query `query_id`, with their sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheTriple {
    pub query_id: u64,
    pub file_id: FileId,
    /// Sorted by chunk id; never empty.
    pub chunks: Vec<(ChunkId, u64)>,
}

impl CacheTriple {
    pub fn new(query_id: u64, file_id: FileId, mut chunks: Vec<(ChunkId, u64)>) -> Result<Self> {
        if chunks.is_empty() {
            return Err(Error::usage("cache triple needs at least one chunk"));
        }
        if let Some((c, _)) = chunks.iter().find(|(c, _)| c.file != file_id) {
            return Err(Error::usage(format!("chunk {c} does not belong to {file_id}")));
        }
        chunks.sort_unstable_by_key(|(c, _)| *c);
        chunks.dedup_by_key(|(c, _)| *c);
        Ok(CacheTriple {
            query_id,
            file_id,
            chunks,
        })
    }

    pub fn bytes(&self) -> u64 {
        self.chunks.iter().map(|(_, b)| b).sum()
    }

    fn first_chunk(&self) -> ChunkId {
        self.chunks[0].0
    }
}

/// Eviction cost of `triple` given the chunks already kept.
///
/// Queries at or beyond the weight window cost 0. A triple whose chunks are
/// all kept costs `+inf`.
pub fn eviction_cost(
    triple: &CacheTriple,
    kept: &BTreeSet<ChunkId>,
    weights: &QueryWeight,
    file_bytes: &BTreeMap<FileId, u64>,
    now: u64,
) -> Result<f64> {
    let fb = *file_bytes
        .get(&triple.file_id)
        .ok_or_else(|| Error::usage(format!("unknown file {}", triple.file_id)))?;
    let w = weights.weight_at(now, triple.query_id);
    if w == 0.0 {
        return Ok(0.0);
    }
    let uncached: u64 = triple
        .chunks
        .iter()
        .filter(|(c, _)| !kept.contains(c))
        .map(|(_, b)| b)
        .sum();
    Ok(cost_value(w, fb, uncached))
}

fn cost_value(weight: f64, file_bytes: u64, uncached: u64) -> f64 {
    if uncached == 0 {
        f64::INFINITY
    } else {
        weight * (file_bytes as f64 / uncached as f64)
    }
}

/// One greedy admission, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    /// Index into the history slice passed to [`plan_eviction`].
    pub triple: usize,
    pub cost: f64,
    pub added_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvictionPlan {
    pub keep: Vec<CacheTriple>,
    pub evict: Vec<CacheTriple>,
    /// Every distinct chunk referenced by `keep`, with its size.
    pub kept_chunks: BTreeMap<ChunkId, u64>,
    pub kept_bytes: u64,
    pub trace: Vec<Admission>,
}

impl EvictionPlan {
    pub fn keeps(&self, chunk: ChunkId) -> bool {
        self.kept_chunks.contains_key(&chunk)
    }
}

/// Heap key: higher cost first; among equal costs the newer query, then the
/// lower file id, then the lower first chunk id is admitted first.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AdmitKey {
    cost: f64,
    query_id: u64,
    file_id: FileId,
    first_chunk: ChunkId,
}

impl Eq for AdmitKey {}

impl Ord for AdmitKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.query_id.cmp(&other.query_id))
            .then(other.file_id.cmp(&self.file_id))
            .then(other.first_chunk.cmp(&self.first_chunk))
    }
}

impl PartialOrd for AdmitKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Plan which cache triples survive after query `now`.
///
/// `current` holds the triples of query `now`; they are kept first. If they
/// alone exceed `budget`, their chunks are admitted by descending size until
/// nothing more fits and each current triple is trimmed to its admitted
/// chunks. Historical triples older than the weight window are evicted
/// outright; the rest compete greedily by [`eviction_cost`]. Bytes are
/// charged once per distinct chunk.
pub fn plan_eviction(
    history: &[CacheTriple],
    current: &[CacheTriple],
    budget: u64,
    weights: &QueryWeight,
    file_bytes: &BTreeMap<FileId, u64>,
    now: u64,
) -> Result<EvictionPlan> {
    for t in history.iter().chain(current) {
        if !file_bytes.contains_key(&t.file_id) {
            return Err(Error::usage(format!("unknown file {}", t.file_id)));
        }
    }

    let mut plan = EvictionPlan::default();

    let mut current_chunks: BTreeMap<ChunkId, u64> = BTreeMap::new();
    for t in current {
        current_chunks.extend(t.chunks.iter().copied());
    }
    let current_total: u64 = current_chunks.values().sum();
    if current_total <= budget {
        plan.kept_chunks = current_chunks;
        plan.kept_bytes = current_total;
        plan.keep.extend(current.iter().cloned());
    } else {
        let mut by_size: Vec<(ChunkId, u64)> = current_chunks.into_iter().collect();
        by_size.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (c, b) in by_size {
            if plan.kept_bytes + b <= budget {
                plan.kept_chunks.insert(c, b);
                plan.kept_bytes += b;
            }
        }
        for t in current {
            let admitted: Vec<_> = t
                .chunks
                .iter()
                .copied()
                .filter(|(c, _)| plan.kept_chunks.contains_key(c))
                .collect();
            if admitted.is_empty() {
                plan.evict.push(t.clone());
            } else {
                plan.keep.push(CacheTriple {
                    chunks: admitted,
                    ..t.clone()
                });
            }
        }
    }

    // Outstanding (not yet kept) bytes per historical triple, and which
    // triples reference each chunk.
    let mut uncached = vec![0u64; history.len()];
    let mut holders: HashMap<ChunkId, Vec<usize>> = HashMap::new();
    let mut heap = IndexedMaxHeap::with_capacity(history.len());
    let mut decayed = Vec::new();
    for (i, t) in history.iter().enumerate() {
        let w = weights.weight_at(now, t.query_id);
        if w == 0.0 {
            decayed.push(i);
            continue;
        }
        for &(c, b) in &t.chunks {
            if !plan.kept_chunks.contains_key(&c) {
                uncached[i] += b;
                holders.entry(c).or_default().push(i);
            }
        }
        heap.push(i, admit_key(t, w, file_bytes[&t.file_id], uncached[i]));
    }

    let mut admitted = vec![false; history.len()];
    while let Some((i, key)) = heap.pop() {
        let t = &history[i];
        if plan.kept_bytes + uncached[i] > budget {
            // Kept bytes only grow and shared chunks only shrink the gap by
            // what they add, so a triple that does not fit now never will.
            continue;
        }
        admitted[i] = true;
        plan.trace.push(Admission {
            triple: i,
            cost: key.cost,
            added_bytes: uncached[i],
        });
        plan.kept_bytes += uncached[i];
        for &(c, b) in &t.chunks {
            if plan.kept_chunks.insert(c, b).is_some() {
                continue;
            }
            for &j in holders.get(&c).map(Vec::as_slice).unwrap_or(&[]) {
                if j == i || !heap.contains(j) {
                    continue;
                }
                uncached[j] -= b;
                let other = &history[j];
                let w = weights.weight_at(now, other.query_id);
                heap.increase_key(j, admit_key(other, w, file_bytes[&other.file_id], uncached[j]));
            }
        }
        plan.keep.push(t.clone());
    }

    for (i, t) in history.iter().enumerate() {
        if !admitted[i] {
            plan.evict.push(t.clone());
        }
    }
    debug_assert!(decayed.iter().all(|&i| !admitted[i]));
    Ok(plan)
}

fn admit_key(t: &CacheTriple, weight: f64, file_bytes: u64, uncached: u64) -> AdmitKey {
    AdmitKey {
        cost: cost_value(weight, file_bytes, uncached),
        query_id: t.query_id,
        file_id: t.file_id,
        first_chunk: t.first_chunk(),
    }
}

/// A cached item for the LRU baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LruEntry<K> {
    pub key: K,
    pub bytes: u64,
    pub last_access: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LruPlan<K> {
    /// Kept entries, most recent first.
    pub keep: Vec<K>,
    pub evict: Vec<K>,
    pub kept_bytes: u64,
}

/// Evict least-recently used entries until the rest fit in `budget`.
///
/// Entries larger than the whole budget are never cached. Equal access
/// times are ordered by key.
pub fn plan_lru<K: Ord + Copy>(entries: &[LruEntry<K>], budget: u64) -> LruPlan<K> {
    let mut order: Vec<&LruEntry<K>> = entries.iter().collect();
    order.sort_by(|a, b| b.last_access.cmp(&a.last_access).then(a.key.cmp(&b.key)));
    let mut plan = LruPlan {
        keep: Vec::new(),
        evict: Vec::new(),
        kept_bytes: 0,
    };
    let mut full = false;
    for e in order {
        if !full && e.bytes > budget {
            plan.evict.push(e.key);
            continue;
        }
        if !full && plan.kept_bytes + e.bytes <= budget {
            plan.kept_bytes += e.bytes;
            plan.keep.push(e.key);
        } else {
            full = true;
            plan.evict.push(e.key);
        }
    }
    plan
}

/// Chunk-granularity LRU.
pub fn plan_eviction_chunk_lru(entries: &[LruEntry<ChunkId>], budget: u64) -> LruPlan<ChunkId> {
    plan_lru(entries, budget)
}

/// File-granularity LRU: a file is cached with all of its cells or not at
/// all, so `bytes` is the in-memory size of the whole file.
pub fn plan_eviction_file_lru(entries: &[LruEntry<FileId>], budget: u64) -> LruPlan<FileId> {
    plan_lru(entries, budget)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fid(i: u32) -> FileId {
        FileId::new(0, i)
    }

    fn cid(f: u32, s: u32) -> ChunkId {
        ChunkId::new(fid(f), s)
    }

    fn triple(q: u64, f: u32, chunks: &[(u32, u64)]) -> CacheTriple {
        CacheTriple::new(q, fid(f), chunks.iter().map(|&(s, b)| (cid(f, s), b)).collect()).unwrap()
    }

    #[test]
    fn weights_decay_and_window() {
        let w = QueryWeight::default();
        assert_eq!(w.weight(0), 1.0);
        assert_eq!(w.weight(2), 0.25);
        assert_eq!(w.weight(15), 2f64.powi(-15));
        assert_eq!(w.weight(16), 0.0);
        assert!(QueryWeight::new(1.0, 4).is_err());
        assert!(QueryWeight::new(2.0, 0).is_err());
    }

    #[test]
    fn cost_examples() {
        let w = QueryWeight::default();
        let files = BTreeMap::from([(fid(0), 100_000_000u64)]);
        let t = triple(1, 0, &[(1, 20_000_000), (2, 5_000_000)]);

        let kept = BTreeSet::from([cid(0, 1), cid(0, 2)]);
        assert_eq!(eviction_cost(&t, &kept, &w, &files, 3).unwrap(), f64::INFINITY);

        let kept = BTreeSet::from([cid(0, 2)]);
        assert_eq!(eviction_cost(&t, &kept, &w, &files, 3).unwrap(), 1.25);

        assert_eq!(eviction_cost(&t, &kept, &w, &files, 17).unwrap(), 0.0);

        let stray = triple(1, 9, &[(1, 1)]);
        assert!(eviction_cost(&stray, &kept, &w, &files, 3).unwrap_err().is_usage());
    }

    #[test]
    fn cold_cache_keeps_current() {
        let files = BTreeMap::from([(fid(0), 100)]);
        let cur = [triple(1, 0, &[(1, 10), (2, 20)])];
        let plan = plan_eviction(&[], &cur, 100, &QueryWeight::default(), &files, 1).unwrap();
        assert_eq!(plan.keep, cur.to_vec());
        assert!(plan.evict.is_empty());
        assert_eq!(plan.kept_bytes, 30);
    }

    #[test]
    fn greedy_keeps_two_highest_costs() {
        // ages 0, 1, 2 at now = 3 give weights 1, 0.5, 0.25
        let files = BTreeMap::from([(fid(1), 100), (fid(2), 400), (fid(3), 100)]);
        let hist = [
            triple(3, 1, &[(1, 50)]),
            triple(2, 2, &[(1, 50)]),
            triple(1, 3, &[(1, 100)]),
        ];
        let kept = BTreeSet::new();
        let w = QueryWeight::default();
        let costs: Vec<f64> = hist
            .iter()
            .map(|t| eviction_cost(t, &kept, &w, &files, 3).unwrap())
            .collect();
        assert_eq!(costs, vec![2.0, 4.0, 0.25]);

        let plan = plan_eviction(&hist, &[], 100, &w, &files, 3).unwrap();
        let order: Vec<usize> = plan.trace.iter().map(|a| a.triple).collect();
        assert_eq!(order, vec![1, 0]);
        assert_eq!(plan.evict, vec![hist[2].clone()]);
    }

    #[test]
    fn fully_cached_triple_wins_last_slot() {
        let files = BTreeMap::from([(fid(1), 1000), (fid(2), 10)]);
        // file 2's only chunk is also read by the current query, so its
        // historical triple adds no bytes and costs +inf
        let cur = [triple(5, 2, &[(1, 40)])];
        let hist = [triple(4, 1, &[(1, 60)]), triple(1, 2, &[(1, 40)])];
        let plan = plan_eviction(&hist, &cur, 50, &QueryWeight::default(), &files, 5).unwrap();
        assert_eq!(plan.trace[0].triple, 1);
        assert_eq!(plan.trace[0].cost, f64::INFINITY);
        assert!(plan.keep.contains(&hist[1]));
        assert!(plan.evict.contains(&hist[0]));
        assert_eq!(plan.kept_bytes, 40);
    }

    #[test]
    fn sharing_raises_cost_of_partner_triples() {
        // t0 and t1 share chunk 1 of file 0. Admitting t0 leaves t1 needing
        // only chunk 2, which lifts it above t2.
        let files = BTreeMap::from([(fid(0), 100), (fid(1), 100)]);
        let hist = [
            triple(9, 0, &[(1, 40)]),
            triple(8, 0, &[(1, 40), (2, 10)]),
            triple(9, 1, &[(1, 30)]),
        ];
        let w = QueryWeight::default();
        let plan = plan_eviction(&hist, &[], 60, &w, &files, 10).unwrap();
        let order: Vec<usize> = plan.trace.iter().map(|a| a.triple).collect();
        // t0: 0.5*100/40=1.25, t1: 0.25*100/50=0.5, t2: 0.5*100/30=1.67
        // t2 first (30 bytes), then t0 (70 > 60: skipped), then t1 (80: skipped)
        assert_eq!(order, vec![2]);
        let plan = plan_eviction(&hist, &[], 100, &w, &files, 10).unwrap();
        let order: Vec<usize> = plan.trace.iter().map(|a| a.triple).collect();
        // after t2 and t0, t1 needs 10 bytes: 0.25*100/10 = 2.5
        assert_eq!(order, vec![2, 0, 1]);
        assert_eq!(plan.trace[2].cost, 2.5);
        assert_eq!(plan.kept_bytes, 80);
    }

    #[test]
    fn oversized_current_query_is_admitted_by_size() {
        let files = BTreeMap::from([(fid(0), 100), (fid(1), 100)]);
        let cur = [triple(1, 0, &[(1, 60), (2, 30)]), triple(1, 1, &[(1, 50)])];
        let plan = plan_eviction(&[], &cur, 90, &QueryWeight::default(), &files, 1).unwrap();
        assert_eq!(plan.kept_bytes, 90);
        assert!(plan.keeps(cid(0, 1)) && plan.keeps(cid(0, 2)));
        assert!(!plan.keeps(cid(1, 1)));
        assert_eq!(plan.evict.len(), 1);
    }

    #[test]
    fn zero_budget_evicts_everything() {
        let files = BTreeMap::from([(fid(0), 100)]);
        let plan = plan_eviction(
            &[triple(1, 0, &[(1, 5)])],
            &[triple(2, 0, &[(2, 5)])],
            0,
            &QueryWeight::default(),
            &files,
            2,
        )
        .unwrap();
        assert!(plan.keep.is_empty());
        assert_eq!(plan.evict.len(), 2);
    }

    #[test]
    fn decayed_triples_are_evicted() {
        let files = BTreeMap::from([(fid(0), 100)]);
        let w = QueryWeight::new(2.0, 2).unwrap();
        let hist = [triple(1, 0, &[(1, 5)]), triple(4, 0, &[(2, 5)])];
        let plan = plan_eviction(&hist, &[], 1000, &w, &files, 5).unwrap();
        assert_eq!(plan.keep, vec![hist[1].clone()]);
    }

    fn lru(entries: &[(u32, u64, u64)]) -> Vec<LruEntry<ChunkId>> {
        entries
            .iter()
            .map(|&(s, bytes, t)| LruEntry { key: cid(0, s), bytes, last_access: t })
            .collect()
    }

    #[test]
    fn chunk_lru_examples() {
        let all_fit = plan_eviction_chunk_lru(&lru(&[(1, 10, 1), (2, 10, 2)]), 100);
        assert!(all_fit.evict.is_empty());

        let p = plan_eviction_chunk_lru(&lru(&[(1, 10, 1), (2, 10, 2), (3, 10, 3)]), 20);
        assert_eq!(p.evict, vec![cid(0, 1)]);
        assert_eq!(p.keep, vec![cid(0, 3), cid(0, 2)]);
    }

    #[test]
    fn chunk_lru_thrashes_on_alternation() {
        // queries A and B each read 2 chunks; budget holds only 3
        let mut cache: Vec<LruEntry<ChunkId>> = Vec::new();
        for q in 1..=6u64 {
            let set = if q % 2 == 1 { [1, 2] } else { [3, 4] };
            let mut misses = 0;
            for s in set {
                if !cache.iter().any(|e| e.key == cid(0, s)) {
                    misses += 1;
                }
                cache.retain(|e| e.key != cid(0, s));
                cache.push(LruEntry { key: cid(0, s), bytes: 10, last_access: q });
            }
            // every query misses at least one of its chunks, so its file is
            // rescanned every time
            assert!(misses >= 1, "query {q} hit fully");
            let p = plan_eviction_chunk_lru(&cache, 30);
            assert_eq!(p.keep.len(), cache.len().min(3));
            cache.retain(|e| p.keep.contains(&e.key));
        }
    }

    #[test]
    fn file_lru_examples() {
        let e = |f: u32, bytes, t| LruEntry { key: fid(f), bytes, last_access: t };
        assert_eq!(plan_eviction_file_lru(&[e(0, 10, 1)], 100).keep, vec![fid(0)]);
        let p = plan_eviction_file_lru(&[e(0, 500, 1)], 100);
        assert!(p.keep.is_empty());
        let p = plan_eviction_file_lru(&[e(0, 60, 1), e(1, 60, 2)], 100);
        assert_eq!(p.keep, vec![fid(1)]);
    }
}
