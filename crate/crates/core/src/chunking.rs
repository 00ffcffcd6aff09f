//! Query-driven chunking of raw files.
//!
//! Each raw file starts as a single chunk whose box is the file's tight box.
//! Every query that overlaps a chunk may split it in two along one of the
//! query's faces, choosing the face that minimizes the combined volume of
//! the two halves' tight boxes. The leaf chunks of a file are always
//! pairwise disjoint and together hold every cell of the file.
//!
//! The coordinator only keeps [`ChunkSummary`] values (box, cell count,
//! size). Cell data is passed in by the caller when a refinement needs it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, QuerySpec};
use crate::ids::{ChunkId, FileId};

/// Default for `MinC`, the minimum cell count below which a chunk that holds
/// queried cells is left alone.
pub const DEFAULT_MIN_CELLS: usize = 1000;

/// Catalog entry for one raw file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFileMeta {
    pub file_id: FileId,
    pub cell_count: u64,
    /// Cost of one full scan, in bytes.
    pub file_bytes: u64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSummary {
    pub id: ChunkId,
    pub bbox: BoundingBox,
    pub cell_count: u64,
    pub size_bytes: u64,
    pub parent: Option<ChunkId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub query_id: u64,
    pub parent: ChunkId,
    pub children: [ChunkId; 2],
}

/// One half of a split: its tight box and the indices (into the slice handed
/// to [`split_chunk`]) of the cells it owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPart {
    pub bbox: BoundingBox,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitOutcome {
    Unchanged,
    Split {
        dim: usize,
        /// Cells with `coord[dim] <= boundary` go to `low`.
        boundary: i64,
        low: SplitPart,
        high: SplitPart,
    },
}

/// Split a chunk along the query face that minimizes the summed volume of the
/// two resulting tight boxes.
///
/// The chunk is left alone when it has fewer than `min_cells` cells and at
/// least one of them lies in the query, or when no query face cuts its box
/// into two non-empty sides. Candidate faces are visited by dimension, then
/// by coordinate; the first strictly smaller volume wins, which fixes ties.
pub fn split_chunk<P: AsRef<[i64]>>(
    bbox: &BoundingBox,
    cells: &[P],
    query: &BoundingBox,
    min_cells: usize,
) -> Result<SplitOutcome> {
    if cells.is_empty() {
        return Err(Error::Precondition("chunk cells are not loaded".into()));
    }
    if bbox.ndims() != query.ndims() {
        return Err(Error::usage("chunk and query dimensionality differ"));
    }
    if !bbox.intersects(query) {
        return Err(Error::usage(format!(
            "chunk box {bbox} does not intersect query {query}"
        )));
    }

    let has_queried = cells.iter().any(|c| query.contains_point(c.as_ref()));
    if cells.len() < min_cells && has_queried {
        return Ok(SplitOutcome::Unchanged);
    }

    let mut best: Option<(u128, usize, i64)> = None;
    for dim in 0..bbox.ndims() {
        // A face at `x` separates coordinates `<= x` from `> x`.
        for x in [query.lo[dim] - 1, query.hi[dim]] {
            if !(bbox.lo[dim] <= x && x < bbox.hi[dim]) {
                continue;
            }
            let Some(vol) = split_volume(cells, dim, x) else {
                continue;
            };
            if best.is_none_or(|(v, _, _)| vol < v) {
                best = Some((vol, dim, x));
            }
        }
    }

    let Some((_, dim, boundary)) = best else {
        return Ok(SplitOutcome::Unchanged);
    };
    let (low, high): (Vec<usize>, Vec<usize>) =
        (0..cells.len()).partition(|&i| cells[i].as_ref()[dim] <= boundary);
    let part = |members: Vec<usize>| SplitPart {
        bbox: crate::geometry::tight_box(members.iter().map(|&i| cells[i].as_ref()))
            .expect("split sides are non-empty"),
        members,
    };
    Ok(SplitOutcome::Split {
        dim,
        boundary,
        low: part(low),
        high: part(high),
    })
}

/// Combined tight-box volume of the two sides of a cut, or `None` if one
/// side would be empty.
fn split_volume<P: AsRef<[i64]>>(cells: &[P], dim: usize, x: i64) -> Option<u128> {
    let mut low: Option<BoundingBox> = None;
    let mut high: Option<BoundingBox> = None;
    for c in cells {
        let c = c.as_ref();
        let side = if c[dim] <= x { &mut low } else { &mut high };
        match side {
            Some(b) => b.include(c),
            None => *side = Some(BoundingBox::point(c)),
        }
    }
    Some(low?.volume() + high?.volume())
}

/// A chunk produced (or kept) by [`FileChunking::refine`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinedChunk {
    pub id: ChunkId,
    pub bbox: BoundingBox,
    pub cell_count: u64,
    /// Whether the chunk's box intersects the query range; only these chunks
    /// are candidates for caching.
    pub overlaps_query: bool,
    /// The chunk this one came from (itself when unchanged).
    pub parent: ChunkId,
    /// Indices into the parent's cell list, or `None` when the chunk was
    /// not split and owns all of them.
    pub members: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RefineOutput {
    pub chunks: Vec<RefinedChunk>,
}

impl RefineOutput {
    pub fn replaced(&self) -> impl Iterator<Item = &RefinedChunk> {
        self.chunks.iter().filter(|c| c.id != c.parent)
    }
}

/// Leaf chunks of one raw file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChunking {
    file_id: FileId,
    min_cells: usize,
    cell_record_bytes: u64,
    chunks: BTreeMap<ChunkId, ChunkSummary>,
    next_seq: u32,
    splits: Vec<SplitRecord>,
}

impl FileChunking {
    /// Root chunking: the whole file as a single chunk.
    pub fn new(meta: &RawFileMeta, min_cells: usize, cell_record_bytes: u64) -> Result<Self> {
        if min_cells == 0 {
            return Err(Error::usage("min_cells must be at least 1"));
        }
        let root = ChunkSummary {
            id: ChunkId::new(meta.file_id, 0),
            bbox: meta.bbox.clone(),
            cell_count: meta.cell_count,
            size_bytes: meta.cell_count * cell_record_bytes,
            parent: None,
        };
        Ok(FileChunking {
            file_id: meta.file_id,
            min_cells,
            cell_record_bytes,
            chunks: BTreeMap::from([(root.id, root)]),
            next_seq: 1,
            splits: Vec::new(),
        })
    }

    pub fn file_id(&self) -> FileId {
        self.file_id
    }

    pub fn min_cells(&self) -> usize {
        self.min_cells
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> impl Iterator<Item = &ChunkSummary> {
        self.chunks.values()
    }

    pub fn get(&self, id: ChunkId) -> Option<&ChunkSummary> {
        self.chunks.get(&id)
    }

    pub fn splits(&self) -> &[SplitRecord] {
        &self.splits
    }

    /// Chunks whose box intersects the query range, in id order.
    pub fn overlapping_chunks(&self, range: &BoundingBox) -> Vec<ChunkId> {
        self.chunks
            .values()
            .filter(|c| c.bbox.intersects(range))
            .map(|c| c.id)
            .collect()
    }

    /// Run every chunk overlapping `q` through [`split_chunk`] and install
    /// the results.
    ///
    /// `cells_by_chunk` must hold the cells of every overlapping chunk. The
    /// returned list has one entry per resulting chunk, in the order of the
    /// overlapping input chunks (low half before high half).
    pub fn refine<P: AsRef<[i64]>>(
        &mut self,
        q: &QuerySpec,
        cells_by_chunk: &BTreeMap<ChunkId, Vec<P>>,
    ) -> Result<RefineOutput> {
        let overlapping = self.overlapping_chunks(&q.range);
        for id in &overlapping {
            let cells = cells_by_chunk
                .get(id)
                .ok_or_else(|| Error::Precondition(format!("no cell data for chunk {id}")))?;
            if cells.len() as u64 != self.chunks[id].cell_count {
                return Err(Error::Precondition(format!(
                    "chunk {id} has {} cells, {} supplied",
                    self.chunks[id].cell_count,
                    cells.len()
                )));
            }
        }

        let mut out = RefineOutput::default();
        for id in overlapping {
            let cells = &cells_by_chunk[&id];
            let summary = &self.chunks[&id];
            match split_chunk(&summary.bbox, cells, &q.range, self.min_cells)? {
                SplitOutcome::Unchanged => out.chunks.push(RefinedChunk {
                    id,
                    bbox: summary.bbox.clone(),
                    cell_count: summary.cell_count,
                    overlaps_query: true,
                    parent: id,
                    members: None,
                }),
                SplitOutcome::Split { low, high, .. } => {
                    let ids = [self.alloc_id(), self.alloc_id()];
                    self.chunks.remove(&id);
                    for (child, part) in ids.into_iter().zip([low, high]) {
                        let count = part.members.len() as u64;
                        self.chunks.insert(
                            child,
                            ChunkSummary {
                                id: child,
                                bbox: part.bbox.clone(),
                                cell_count: count,
                                size_bytes: count * self.cell_record_bytes,
                                parent: Some(id),
                            },
                        );
                        out.chunks.push(RefinedChunk {
                            id: child,
                            overlaps_query: part.bbox.intersects(&q.range),
                            bbox: part.bbox,
                            cell_count: count,
                            parent: id,
                            members: Some(part.members),
                        });
                    }
                    self.splits.push(SplitRecord {
                        query_id: q.id,
                        parent: id,
                        children: ids,
                    });
                }
            }
        }
        Ok(out)
    }

    fn alloc_id(&mut self) -> ChunkId {
        let id = ChunkId::new(self.file_id, self.next_seq);
        self.next_seq += 1;
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tight_box;
    use proptest::prelude::*;

    fn bx(lo: &[i64], hi: &[i64]) -> BoundingBox {
        BoundingBox::new(lo.to_vec(), hi.to_vec()).unwrap()
    }

    fn pts(v: &[[i64; 2]]) -> Vec<Vec<i64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    fn file_of(cells: &[Vec<i64>]) -> FileChunking {
        let meta = RawFileMeta {
            file_id: FileId::new(0, 0),
            cell_count: cells.len() as u64,
            file_bytes: cells.len() as u64 * 16,
            bbox: tight_box(cells).unwrap(),
        };
        FileChunking::new(&meta, 5, 16).unwrap()
    }

    /// Independent enumeration of every query face crossing the box, scored
    /// by summed tight-box volume of both non-empty sides.
    fn oracle_best_split(cells: &[Vec<i64>], bbox: &BoundingBox, q: &BoundingBox) -> Option<u128> {
        let mut best = None;
        for k in 0..bbox.ndims() {
            for x in [q.lo[k] - 1, q.hi[k]] {
                if x < bbox.lo[k] || x >= bbox.hi[k] {
                    continue;
                }
                let a: Vec<&Vec<i64>> = cells.iter().filter(|c| c[k] <= x).collect();
                let b: Vec<&Vec<i64>> = cells.iter().filter(|c| c[k] > x).collect();
                if a.is_empty() || b.is_empty() {
                    continue;
                }
                let v = tight_box(a).unwrap().volume() + tight_box(b).unwrap().volume();
                best = Some(best.map_or(v, |m: u128| m.min(v)));
            }
        }
        best
    }

    #[test]
    fn small_chunk_with_queried_cell_is_kept() {
        let cells = pts(&[[1, 1], [1, 5], [6, 1], [6, 5]]);
        let b = tight_box(&cells).unwrap();
        let out = split_chunk(&b, &cells, &bx(&[1, 1], &[2, 5]), 5).unwrap();
        assert_eq!(out, SplitOutcome::Unchanged);
    }

    #[test]
    fn small_chunk_without_queried_cell_is_split() {
        let cells = pts(&[[1, 1], [1, 5], [6, 1], [6, 5]]);
        let b = tight_box(&cells).unwrap();
        // query touches the box but holds none of its cells
        let out = split_chunk(&b, &cells, &bx(&[2, 2], &[4, 4]), 5).unwrap();
        assert!(matches!(out, SplitOutcome::Split { .. }));
    }

    #[test]
    fn split_picks_minimum_volume_boundary() {
        let cells = pts(&[[1, 1], [1, 5], [6, 1], [6, 5]]);
        let b = bx(&[1, 1], &[6, 5]);
        let q = bx(&[1, 1], &[2, 5]);
        assert_eq!(oracle_best_split(&cells, &b, &q), Some(10));
        match split_chunk(&b, &cells, &q, 1).unwrap() {
            SplitOutcome::Split { dim, boundary, low, high } => {
                assert_eq!((dim, boundary), (0, 2));
                assert_eq!(low.bbox, bx(&[1, 1], &[1, 5]));
                assert_eq!(high.bbox, bx(&[6, 1], &[6, 5]));
                assert_eq!(low.bbox.volume() + high.bbox.volume(), 10);
            }
            other => panic!("expected split, got {other:?}"),
        }
    }

    #[test]
    fn empty_side_candidates_are_skipped() {
        // Tight boxes always have cells on both sides of an interior face, so
        // use a loose box: every face leaves one side empty.
        let cells = pts(&[[1, 1], [2, 2]]);
        let loose = bx(&[1, 1], &[10, 10]);
        let q = bx(&[5, 5], &[6, 6]);
        assert_eq!(split_chunk(&loose, &cells, &q, 1).unwrap(), SplitOutcome::Unchanged);

        // Equal-volume candidates: the lowest dimension, then lowest face wins.
        let cells = pts(&[[1, 1], [5, 5]]);
        let b = tight_box(&cells).unwrap();
        match split_chunk(&b, &cells, &bx(&[2, 2], &[3, 3]), 100).unwrap() {
            SplitOutcome::Split { dim, boundary, .. } => assert_eq!((dim, boundary), (0, 1)),
            o => panic!("{o:?}"),
        }
    }

    #[test]
    fn unloaded_cells_is_precondition_error() {
        let empty: Vec<Vec<i64>> = vec![];
        let err = split_chunk(&bx(&[1, 1], &[2, 2]), &empty, &bx(&[1, 1], &[1, 1]), 5).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn root_overlap_and_disjoint_query() {
        let cells = pts(&[[2, 2], [4, 4]]);
        let mut fc = file_of(&cells);
        assert_eq!(fc.overlapping_chunks(&bx(&[1, 1], &[9, 9])).len(), 1);
        assert!(fc.overlapping_chunks(&bx(&[6, 6], &[9, 9])).is_empty());
        let q = QuerySpec::new(1, bx(&[6, 6], &[9, 9]), 1);
        let out = fc.refine::<Vec<i64>>(&q, &BTreeMap::new()).unwrap();
        assert!(out.chunks.is_empty());
        assert_eq!(fc.len(), 1);
    }

    #[test]
    fn refine_requires_cells_for_overlapping_chunks() {
        let cells = pts(&[[2, 2], [4, 4]]);
        let mut fc = file_of(&cells);
        let q = QuerySpec::new(1, bx(&[1, 1], &[3, 3]), 1);
        let err = fc.refine::<Vec<i64>>(&q, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        assert_eq!(fc.len(), 1, "failed refine must not mutate");
    }

    /// Three-query walk-through: horizontal first split, a small chunk with
    /// a queried cell left alone, and a small chunk with no queried cell
    /// split anyway.
    #[test]
    fn three_query_trace_ends_with_four_chunks() {
        let upper = [[2, 14], [5, 18], [9, 15], [12, 19]];
        let lower = [[3, 2], [6, 5], [8, 8], [14, 3], [17, 7], [15, 9], [11, 1]];
        let cells: Vec<Vec<i64>> = pts(&upper).into_iter().chain(pts(&lower)).collect();
        let mut fc = file_of(&cells);
        let mut members: BTreeMap<ChunkId, Vec<Vec<i64>>> =
            BTreeMap::from([(ChunkId::new(FileId::new(0, 0), 0), cells.clone())]);

        let mut step = |fc: &mut FileChunking, q: QuerySpec| {
            let out = fc.refine(&q, &members).unwrap();
            for c in &out.chunks {
                if let Some(m) = &c.members {
                    let parent = &members[&c.parent];
                    let v: Vec<Vec<i64>> = m.iter().map(|&i| parent[i].clone()).collect();
                    members.insert(c.id, v);
                }
            }
            for c in out.replaced() {
                members.remove(&c.parent);
            }
            out
        };

        let q1 = QuerySpec::new(1, bx(&[10, 10], &[20, 20]), 1);
        step(&mut fc, q1);
        assert_eq!(fc.len(), 2);
        assert_eq!(fc.splits()[0].query_id, 1);
        let boxes: Vec<_> = fc.chunks().map(|c| c.bbox.clone()).collect();
        assert!(boxes.contains(&bx(&[3, 1], &[17, 9])));
        assert!(boxes.contains(&bx(&[2, 14], &[12, 19])));

        let q2 = QuerySpec::new(2, bx(&[1, 1], &[7, 16]), 1);
        step(&mut fc, q2);
        assert_eq!(fc.len(), 3);
        assert!(fc.chunks().any(|c| c.bbox == bx(&[2, 14], &[12, 19])), "upper chunk untouched");

        let q3 = QuerySpec::new(3, bx(&[6, 16], &[8, 17]), 1);
        assert_eq!(fc.overlapping_chunks(&q3.range).len(), 1);
        let out = step(&mut fc, q3);
        assert_eq!(fc.len(), 4);
        assert_eq!(fc.splits().last().unwrap().query_id, 3);
        assert!(out.chunks.iter().all(|c| !c.overlaps_query));
    }

    proptest! {
        #[test]
        fn split_matches_oracle_volume(
            raw in proptest::collection::vec((0i64..30, 0i64..30), 1..40),
            q in ((0i64..30, 0i64..30), (0i64..15, 0i64..15)),
            min_cells in 1usize..10,
        ) {
            let mut cells: Vec<Vec<i64>> = raw.iter().map(|&(x, y)| vec![x, y]).collect();
            cells.sort();
            cells.dedup();
            let b = tight_box(&cells).unwrap();
            let qb = bx(&[q.0.0, q.0.1], &[q.0.0 + q.1.0, q.0.1 + q.1.1]);
            prop_assume!(b.intersects(&qb));
            let outcome = split_chunk(&b, &cells, &qb, min_cells).unwrap();
            let queried = cells.iter().any(|c| qb.contains_point(c));
            if cells.len() < min_cells && queried {
                prop_assert_eq!(outcome, SplitOutcome::Unchanged);
            } else {
                let expect = oracle_best_split(&cells, &b, &qb);
                match outcome {
                    SplitOutcome::Unchanged => prop_assert_eq!(expect, None),
                    SplitOutcome::Split { low, high, .. } => {
                        prop_assert_eq!(Some(low.bbox.volume() + high.bbox.volume()), expect);
                        prop_assert!(b.contains_box(&low.bbox) && b.contains_box(&high.bbox));
                        prop_assert!(!low.bbox.intersects(&high.bbox));
                        prop_assert_eq!(low.members.len() + high.members.len(), cells.len());
                    }
                }
            }
        }
    }
}
