//! Browser demo bindings.
//!
//! Every export takes and returns JSON strings so the page needs no
//! generated type glue. The plain Rust functions are the ones under test;
//! the `wasm_bindgen` wrappers only convert errors.

use std::sync::Arc;

use arraycache::cluster::{working_set_bytes, ClusterState, Dataset, Policy, SimConfig};
use arraycache::workload::{generate_synthetic_dataset, generate_workload, DatasetParams, Pattern, Skew, WorkloadParams};
use arraycache::{ArraySchema, AttrKind, Attribute, BoundingBox, Cell, Dimension, QuerySpec};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Demo arrays are square, `0..side` on both axes. Points drawn on the
/// canvas carry no attributes.
fn schema(side: i64, with_attr: bool) -> arraycache::Result<ArraySchema> {
    let attrs = if with_attr {
        vec![Attribute { name: "v".into(), kind: AttrKind::Float }]
    } else {
        vec![]
    };
    ArraySchema::with_default_record(
        vec![
            Dimension { name: "x".into(), lo: 0, hi: side - 1 },
            Dimension { name: "y".into(), lo: 0, hi: side - 1 },
        ],
        attrs,
    )
}

fn bad(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct PointsRequest {
    pub side: i64,
    pub points: usize,
    pub clusters: usize,
    pub seed: u64,
}

/// Gaussian-clustered points for the canvas, as `[[x, y], ...]`. Rounding
/// can land two draws on one cell, so fewer than `points` may come back.
pub fn points(req: &str) -> Result<String, String> {
    let r: PointsRequest = serde_json::from_str(req).map_err(bad)?;
    let s = schema(r.side, true).map_err(bad)?;
    let params = DatasetParams {
        n_points: r.points,
        n_files: 1,
        skew: Skew::GaussianCluster { clusters: r.clusters, sigma: r.side as f64 / 10.0 },
        seed: r.seed,
    };
    let parts = generate_synthetic_dataset(&s, &params).map_err(bad)?;
    let pts: Vec<&[i64]> = parts[0].iter().map(|c| c.coords.as_slice()).collect();
    serde_json::to_string(&pts).map_err(bad)
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChunkRequest {
    pub side: i64,
    pub points: Vec<[i64; 2]>,
    /// Query ranges in order, each `[x0, y0, x1, y1]` inclusive.
    pub queries: Vec<[i64; 4]>,
    pub min_cells: usize,
    pub radius: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkView {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
    pub cells: u64,
    /// Overlaps the last query.
    pub touched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkTrace {
    pub chunks: Vec<ChunkView>,
    /// Chunk count after each query.
    pub counts: Vec<usize>,
    /// Similarity join result cells of each query.
    pub results: Vec<u64>,
}

/// Replay `queries` over one file holding `points` and return the final
/// chunking.
pub fn chunk_trace(req: &str) -> Result<String, String> {
    let r: ChunkRequest = serde_json::from_str(req).map_err(bad)?;
    let trace = chunk_trace_of(&r)?;
    serde_json::to_string(&trace).map_err(bad)
}

fn chunk_trace_of(r: &ChunkRequest) -> Result<ChunkTrace, String> {
    let s = schema(r.side, false).map_err(bad)?;
    let mut cells: Vec<Cell> = r.points.iter().map(|p| Cell::at(p)).collect();
    cells.sort_by(|a, b| a.coords.cmp(&b.coords));
    cells.dedup_by(|a, b| a.coords == b.coords);
    if cells.is_empty() {
        return Err("no points".into());
    }
    let data = Arc::new(Dataset::from_partitions(s, vec![cells], 1).map_err(bad)?);
    let mut config = SimConfig::new(Policy::ChunkLru, 1, 0);
    config.min_cells = r.min_cells;
    let mut state = ClusterState::new(config, data).map_err(bad)?;

    let mut counts = Vec::new();
    let mut results = Vec::new();
    let mut last = None;
    for (i, q) in r.queries.iter().enumerate() {
        let range = BoundingBox::new(vec![q[0].min(q[2]), q[1].min(q[3])], vec![q[0].max(q[2]), q[1].max(q[3])])
            .map_err(bad)?;
        let spec = QuerySpec::new(i as u64 + 1, range.clone(), r.radius);
        let out = state.run_query(&spec).map_err(bad)?;
        counts.push(state.chunk_count());
        results.push(out.metrics.result_cell_count);
        last = Some(range);
    }
    let chunks = state
        .chunkings()
        .iter()
        .flat_map(|c| c.chunks())
        .map(|c| ChunkView {
            lo: c.bbox.lo.clone(),
            hi: c.bbox.hi.clone(),
            cells: c.cell_count,
            touched: last.as_ref().is_some_and(|q| q.intersects(&c.bbox)),
        })
        .collect();
    Ok(ChunkTrace { chunks, counts, results })
}

#[derive(Debug, Clone, Deserialize)]
pub struct CompareRequest {
    pub pattern: Pattern,
    /// Budget as a fraction of the bytes the workload reads.
    pub budget_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRun {
    pub policy: String,
    pub bytes_scanned: Vec<u64>,
    pub network_bytes: Vec<u64>,
    pub total_scanned: u64,
}

/// Run one workload on a small 4-node cluster under every policy.
pub fn compare_policies(req: &str) -> Result<String, String> {
    let r: CompareRequest = serde_json::from_str(req).map_err(bad)?;
    let runs = compare_runs(&r)?;
    serde_json::to_string(&runs).map_err(bad)
}

fn compare_runs(r: &CompareRequest) -> Result<Vec<PolicyRun>, String> {
    const SIDE: i64 = 1000;
    const NODES: u32 = 4;
    let s = schema(SIDE, true).map_err(bad)?;
    let params = DatasetParams {
        n_points: 40_000,
        n_files: 16,
        skew: Skew::GaussianCluster { clusters: 4, sigma: 80.0 },
        seed: r.seed,
    };
    let parts = generate_synthetic_dataset(&s, &params).map_err(bad)?;
    let data = Arc::new(Dataset::from_partitions(s.clone(), parts, NODES).map_err(bad)?);
    let centre = &data.files[0].meta.bbox;
    let (cx, cy) = ((centre.lo[0] + centre.hi[0]) / 2, (centre.lo[1] + centre.hi[1]) / 2);
    // leave room for nine 40-cell steps along x
    let lo = vec![(cx - 50).clamp(0, SIDE - 460), (cy - 50).clamp(0, SIDE - 100)];
    let hi = vec![lo[0] + 99, lo[1] + 99];
    let workload = WorkloadParams {
        pattern: r.pattern,
        base: BoundingBox::new(lo, hi).map_err(bad)?,
        shift: vec![40, 0],
        count: 10,
        shape_radius: 1,
        seed: r.seed,
    };
    let queries = generate_workload(&s, &workload).map_err(bad)?.queries;
    let min_cells = 200;
    let ws = working_set_bytes(&data, &queries, min_cells).map_err(bad)?;
    let budget = (ws as f64 * r.budget_fraction.max(0.0) / NODES as f64) as u64;

    Policy::ALL
        .iter()
        .map(|&p| {
            let mut config = SimConfig::new(p, NODES, budget);
            config.min_cells = min_cells;
            let mut state = ClusterState::new(config, Arc::clone(&data)).map_err(bad)?;
            for q in &queries {
                state.run_query(q).map_err(bad)?;
            }
            let rows = &state.metrics().rows;
            Ok(PolicyRun {
                policy: p.name().to_string(),
                bytes_scanned: rows.iter().map(|m| m.bytes_scanned).collect(),
                network_bytes: rows.iter().map(|m| m.network_bytes).collect(),
                total_scanned: rows.iter().map(|m| m.bytes_scanned).sum(),
            })
        })
        .collect()
}

#[wasm_bindgen(js_name = points)]
pub fn points_js(req: &str) -> Result<String, JsError> {
    points(req).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = chunkTrace)]
pub fn chunk_trace_js(req: &str) -> Result<String, JsError> {
    chunk_trace(req).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = comparePolicies)]
pub fn compare_policies_js(req: &str) -> Result<String, JsError> {
    compare_policies(req).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_are_in_range_and_reproducible() {
        let req = r#"{"side": 100, "points": 500, "clusters": 3, "seed": 7}"#;
        let a: Vec<[i64; 2]> = serde_json::from_str(&points(req).unwrap()).unwrap();
        assert!(a.len() > 400 && a.len() <= 500, "{}", a.len());
        assert!(a.iter().flatten().all(|&v| (0..100).contains(&v)));
        assert_eq!(points(req).unwrap(), points(req).unwrap());
    }

    #[test]
    fn chunk_trace_splits_and_joins() {
        let pts = [[1, 3], [1, 4], [2, 2], [2, 3], [3, 3], [4, 2], [5, 2], [40, 40], [41, 41]];
        let req = ChunkRequest {
            side: 50,
            points: pts.to_vec(),
            queries: vec![[0, 0, 10, 10]],
            min_cells: 5,
            radius: 1,
        };
        let t = chunk_trace_of(&req).unwrap();
        assert_eq!(t.counts, vec![2]);
        // the 7 cells near the origin join to 17 results
        assert_eq!(t.results, vec![17]);
        assert_eq!(t.chunks.iter().map(|c| c.cells).sum::<u64>(), 9);
        assert_eq!(t.chunks.iter().filter(|c| c.touched).count(), 1);
    }

    #[test]
    fn reversed_corners_and_duplicates_are_accepted() {
        let req = ChunkRequest {
            side: 10,
            points: vec![[1, 1], [1, 1], [8, 8]],
            queries: vec![[5, 5, 0, 0]],
            min_cells: 1,
            radius: 0,
        };
        let t = chunk_trace_of(&req).unwrap();
        assert_eq!(t.results, vec![1]);
    }

    #[test]
    fn errors_are_strings() {
        assert!(chunk_trace("{").is_err());
        let empty = r#"{"side": 10, "points": [], "queries": [], "min_cells": 1, "radius": 0}"#;
        assert_eq!(chunk_trace(empty).unwrap_err(), "no points");
    }

    #[test]
    fn compare_runs_every_policy() {
        let r = CompareRequest { pattern: Pattern::ShiftingReturn, budget_fraction: 0.25, seed: 1 };
        let runs = compare_runs(&r).unwrap();
        assert_eq!(runs.iter().map(|r| r.policy.as_str()).collect::<Vec<_>>(), ["cost", "chunk-lru", "file-lru"]);
        assert!(runs.iter().all(|r| r.bytes_scanned.len() == 10));
        for pattern in [Pattern::Shifting, Pattern::Alternating, Pattern::UniformRandom] {
            compare_runs(&CompareRequest { pattern, budget_fraction: 0.1, seed: 2 }).unwrap();
        }
    }
}
