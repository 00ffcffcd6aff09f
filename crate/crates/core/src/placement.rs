//! Co-locality-aware placement of cached chunks.
//!
//! After a query runs, a cached chunk may exist on several nodes: its home
//! plus the copies shipped around for join tasks. Placement keeps exactly one
//! copy per chunk, choosing among the nodes that already hold one so that no
//! extra transfer is scheduled. The node chosen is the one holding the most
//! join partners of the chunk, weighted by how recently each pair was joined:
//!
//! ```text
//! cost(c, n) = sum over past queries Q of w(Q) * |{ c' homed on n : (c, c') joined in Q }|
//! ```
//!
//! Chunks with a single copy are fixed first; the others follow in increasing
//! order of copy count, since chunks with more copies have more options left
//! when node budgets run low.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eviction::QueryWeight;
use crate::ids::{ChunkId, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinEntry {
    pub query_id: u64,
    /// Unordered pairs stored as `(min, max)`, sorted and distinct.
    pub pairs: Vec<(ChunkId, ChunkId)>,
}

/// Chunk pairs joined by recent queries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinHistory {
    entries: VecDeque<JoinEntry>,
}

impl JoinHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> impl Iterator<Item = &JoinEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(&mut self, query_id: u64, pairs: impl IntoIterator<Item = (ChunkId, ChunkId)>) {
        let mut pairs: Vec<_> = pairs.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
        pairs.sort_unstable();
        pairs.dedup();
        self.entries.push_back(JoinEntry { query_id, pairs });
    }

    /// Drop entries whose weight at `now` is zero.
    pub fn purge(&mut self, now: u64, weights: &QueryWeight) {
        self.entries
            .retain(|e| weights.weight_at(now, e.query_id) > 0.0);
    }

    /// Rewrite chunk ids (after splits) and drop pairs touching chunks that
    /// no longer exist. `rename` returns the new id, or `None` to drop.
    pub fn remap(&mut self, rename: impl Fn(ChunkId) -> Option<ChunkId>) {
        for e in &mut self.entries {
            let mut pairs: Vec<_> = e
                .pairs
                .iter()
                .filter_map(|&(a, b)| {
                    let (a, b) = (rename(a)?, rename(b)?);
                    Some((a.min(b), a.max(b)))
                })
                .collect();
            pairs.sort_unstable();
            pairs.dedup();
            e.pairs = pairs;
        }
    }

    /// Accumulated pair weight for every chunk's partners (self pairs
    /// excluded).
    fn partner_index(&self, weights: &QueryWeight, now: u64) -> HashMap<ChunkId, Vec<(ChunkId, f64)>> {
        let mut acc: HashMap<ChunkId, HashMap<ChunkId, f64>> = HashMap::new();
        for e in &self.entries {
            let w = weights.weight_at(now, e.query_id);
            if w == 0.0 {
                continue;
            }
            for &(a, b) in &e.pairs {
                if a == b {
                    continue;
                }
                *acc.entry(a).or_default().entry(b).or_default() += w;
                *acc.entry(b).or_default().entry(a).or_default() += w;
            }
        }
        acc.into_iter()
            .map(|(c, m)| {
                let mut v: Vec<_> = m.into_iter().collect();
                v.sort_unstable_by_key(|(p, _)| *p);
                (c, v)
            })
            .collect()
    }
}

/// Where cached chunks currently have copies, and what each node can hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlacementState {
    pub locations: BTreeMap<ChunkId, BTreeSet<NodeId>>,
    pub sizes: BTreeMap<ChunkId, u64>,
    pub budgets: BTreeMap<NodeId, u64>,
    /// Retention priority used only when single-copy chunks overflow their
    /// node; higher survives. Missing entries count as 0.
    #[serde(default)]
    pub priority: BTreeMap<ChunkId, f64>,
}

impl PlacementState {
    pub fn add_copy(&mut self, chunk: ChunkId, node: NodeId, size: u64) {
        self.locations.entry(chunk).or_default().insert(node);
        self.sizes.insert(chunk, size);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub home: BTreeMap<ChunkId, NodeId>,
    /// Copies to delete, including every copy of a dropped chunk.
    pub drops: Vec<(ChunkId, NodeId)>,
    /// Chunks that fit on none of their copy nodes.
    pub dropped: Vec<ChunkId>,
    pub used: BTreeMap<NodeId, u64>,
}

/// Weighted number of `chunk`'s join partners already homed on `node`.
pub fn placement_cost(
    chunk: ChunkId,
    node: NodeId,
    placed: &BTreeMap<ChunkId, NodeId>,
    history: &JoinHistory,
    weights: &QueryWeight,
    now: u64,
) -> f64 {
    history
        .entries()
        .map(|e| {
            let partners = e
                .pairs
                .iter()
                .filter_map(|&(a, b)| match (a == chunk, b == chunk) {
                    (true, false) => Some(b),
                    (false, true) => Some(a),
                    _ => None,
                })
                .filter(|p| placed.get(p) == Some(&node))
                .count();
            weights.weight_at(now, e.query_id) * partners as f64
        })
        .sum()
}

/// Total weight of joined pairs whose chunks share a home.
pub fn collocation_score(
    home: &BTreeMap<ChunkId, NodeId>,
    history: &JoinHistory,
    weights: &QueryWeight,
    now: u64,
) -> f64 {
    history
        .entries()
        .map(|e| {
            let together = e
                .pairs
                .iter()
                .filter(|(a, b)| a != b)
                .filter(|(a, b)| matches!((home.get(a), home.get(b)), (Some(x), Some(y)) if x == y))
                .count();
            weights.weight_at(now, e.query_id) * together as f64
        })
        .sum()
}

/// Choose one home per cached chunk.
pub fn plan_placement(
    state: &PlacementState,
    history: &JoinHistory,
    weights: &QueryWeight,
    now: u64,
) -> Result<PlacementPlan> {
    for (c, nodes) in &state.locations {
        if nodes.is_empty() {
            return Err(Error::usage(format!("chunk {c} has no copies")));
        }
        if !state.sizes.contains_key(c) {
            return Err(Error::usage(format!("chunk {c} has no size")));
        }
        if let Some(n) = nodes.iter().find(|n| !state.budgets.contains_key(n)) {
            return Err(Error::usage(format!("node {n} has no budget")));
        }
    }

    let mut remaining = state.budgets.clone();
    let mut plan = PlacementPlan::default();
    let size = |c: &ChunkId| state.sizes[c];

    // Single-copy chunks stay put. Overflow only happens when a node already
    // holds more than its budget; lowest priority goes first.
    let mut singles: Vec<(ChunkId, NodeId)> = state
        .locations
        .iter()
        .filter(|(_, n)| n.len() == 1)
        .map(|(c, n)| (*c, *n.first().unwrap()))
        .collect();
    let prio = |c: &ChunkId| state.priority.get(c).copied().unwrap_or(0.0);
    singles.sort_by(|a, b| {
        a.1.cmp(&b.1)
            .then(prio(&b.0).total_cmp(&prio(&a.0)))
            .then(a.0.cmp(&b.0))
    });
    for (c, n) in singles {
        let room = remaining.get_mut(&n).unwrap();
        if *room >= size(&c) {
            *room -= size(&c);
            plan.home.insert(c, n);
        } else {
            plan.dropped.push(c);
            plan.drops.push((c, n));
        }
    }

    let mut multi: Vec<(&ChunkId, &BTreeSet<NodeId>)> =
        state.locations.iter().filter(|(_, n)| n.len() > 1).collect();
    multi.sort_by(|a, b| a.1.len().cmp(&b.1.len()).then(a.0.cmp(b.0)));

    let partners = history.partner_index(weights, now);
    for (&c, nodes) in multi {
        let sz = size(&c);
        let mut best: Option<(f64, f64, u64, NodeId)> = None;
        for &n in nodes {
            let room = remaining[&n];
            if room < sz {
                continue;
            }
            let mut cost = 0.0;
            // Weight of partners still to be placed that have a copy here and
            // would fit alongside; breaks cost ties toward nodes where the
            // pair can still end up together.
            let mut prospect = 0.0;
            for (p, w) in partners.get(&c).map(Vec::as_slice).unwrap_or(&[]) {
                match plan.home.get(p) {
                    Some(&h) if h == n => cost += w,
                    Some(_) => {}
                    None => {
                        let pending = !plan.dropped.contains(p)
                            && state.locations.get(p).is_some_and(|l| l.contains(&n));
                        if pending && room >= sz + size(p) {
                            prospect += w;
                        }
                    }
                }
            }
            let better = match best {
                None => true,
                Some((bc, bp, br, _)) => {
                    cost > bc
                        || (cost == bc && prospect > bp)
                        || (cost == bc && prospect == bp && room > br)
                }
            };
            if better {
                best = Some((cost, prospect, room, n));
            }
        }
        match best {
            Some((_, _, _, n)) => {
                *remaining.get_mut(&n).unwrap() -= sz;
                plan.home.insert(c, n);
                plan.drops.extend(nodes.iter().filter(|&&m| m != n).map(|&m| (c, m)));
            }
            None => {
                plan.dropped.push(c);
                plan.drops.extend(nodes.iter().map(|&m| (c, m)));
            }
        }
    }

    for (n, budget) in &state.budgets {
        plan.used.insert(*n, budget - remaining[n]);
    }
    plan.dropped.sort_unstable();
    plan.drops.sort_unstable();
    Ok(plan)
}
