//! Similarity self-join over chunks.
//!
//! A query joins every pair of cells inside its range whose L1 distance is at
//! most `shape_radius`. At chunk level this means pairing every two chunks
//! whose boxes come within `shape_radius` of each other, then running the
//! cell-level join per pair on a node that holds both chunks.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{l1_distance, BoundingBox, QuerySpec};
use crate::ids::{ChunkId, NodeId};

/// Chunk pairs that may hold joinable cells, `(a, b)` with `a <= b`, self
/// pairs included, sorted.
///
/// A pair is included when `a`'s box grown by the query radius meets `b`'s
/// box and both boxes meet the query range. Any two cells within L1 distance
/// `r` are within `r` on every axis, so no joinable pair is missed.
pub fn generate_pairs(chunks: &[(ChunkId, BoundingBox)], q: &QuerySpec) -> Vec<(ChunkId, ChunkId)> {
    let mut live: Vec<(ChunkId, BoundingBox, BoundingBox)> = chunks
        .iter()
        .filter(|(_, b)| b.intersects(&q.range))
        .map(|(c, b)| (*c, b.clone(), b.expand_unclamped(q.shape_radius)))
        .collect();
    live.sort_by_key(|(c, _, _)| *c);
    let mut pairs = Vec::new();
    for i in 0..live.len() {
        for j in i..live.len() {
            if live[i].2.intersects(&live[j].1) {
                pairs.push((live[i].0, live[j].0));
            }
        }
    }
    pairs
}

/// Number of ordered cell pairs `(x, y)`, `x` from `a` and `y` from `b`, both
/// inside the query range, with `L1(x, y) <= shape_radius`.
///
/// Joining a set with itself counts each cell once with itself plus both
/// orders of every close pair.
pub fn similarity_join_cells<P: AsRef<[i64]>>(a: &[P], b: &[P], q: &QuerySpec) -> u64 {
    let a: Vec<&[i64]> = a
        .iter()
        .map(AsRef::as_ref)
        .filter(|c| q.range.contains_point(c))
        .collect();
    let b: Vec<&[i64]> = b
        .iter()
        .map(AsRef::as_ref)
        .filter(|c| q.range.contains_point(c))
        .collect();
    join_points(&a, &b, q.shape_radius)
}

fn join_points(a: &[&[i64]], b: &[&[i64]], radius: u64) -> u64 {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let dims = a[0].len();
    let ball = l1_ball_size(dims, radius);
    if (a.len() as u128) * (b.len() as u128) <= 4096 || ball.is_none_or(|s| s > b.len() as u128) {
        let mut n = 0;
        for x in a {
            n += b.iter().filter(|y| l1_distance(x, y) <= radius).count() as u64;
        }
        return n;
    }

    let mut index: HashMap<&[i64], u64> = HashMap::with_capacity(b.len());
    for y in b {
        *index.entry(*y).or_default() += 1;
    }
    let offsets = l1_ball(dims, radius as i64);
    let mut probe = vec![0i64; dims];
    let mut n = 0;
    for x in a {
        for off in &offsets {
            for k in 0..dims {
                probe[k] = x[k] + off[k];
            }
            if let Some(cnt) = index.get(probe.as_slice()) {
                n += cnt;
            }
        }
    }
    n
}

/// Lattice points with L1 norm at most `r` in `d` dimensions, or `None` if
/// the count overflows.
fn l1_ball_size(d: usize, r: u64) -> Option<u128> {
    // count(d, r) = sum over the last coordinate
    let r = usize::try_from(r).ok()?;
    if r > 1 << 16 {
        return None;
    }
    let mut prev: Vec<u128> = vec![1; r + 1];
    for _ in 1..=d {
        let mut cur = vec![0u128; r + 1];
        for rem in 0..=r {
            let mut s = prev[rem];
            for t in 1..=rem {
                s = s.checked_add(prev[rem - t].checked_mul(2)?)?;
            }
            cur[rem] = s;
        }
        prev = cur;
    }
    Some(prev[r])
}

fn l1_ball(d: usize, r: i64) -> Vec<Vec<i64>> {
    fn rec(d: usize, r: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        if cur.len() == d {
            out.push(cur.clone());
            return;
        }
        for v in -r..=r {
            cur.push(v);
            rec(d, r - v.abs(), cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, r, &mut Vec::with_capacity(d), &mut out);
    out
}

/// A chunk pair joined on one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinTask {
    pub pair: (ChunkId, ChunkId),
    pub node: NodeId,
    pub transfer_bytes: u64,
}

/// Assign each pair to the node where running it costs the fewest transfer
/// bytes, given the copies made by earlier assignments; then the node with
/// the fewest tasks; then the lowest node id. Copies shipped for a task are
/// added to `locations`.
pub fn assign_pairs(
    pairs: &[(ChunkId, ChunkId)],
    locations: &mut BTreeMap<ChunkId, BTreeSet<NodeId>>,
    sizes: &BTreeMap<ChunkId, u64>,
) -> Result<Vec<JoinTask>> {
    let mut load: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut tasks = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        for c in [a, b] {
            if locations.get(&c).is_none_or(BTreeSet::is_empty) {
                return Err(Error::usage(format!("chunk {c} has no location")));
            }
            if !sizes.contains_key(&c) {
                return Err(Error::usage(format!("chunk {c} has no size")));
            }
        }
        let candidates: BTreeSet<NodeId> = locations[&a].union(&locations[&b]).copied().collect();
        let need = |c: ChunkId, n: NodeId| {
            if locations[&c].contains(&n) {
                0
            } else {
                sizes[&c]
            }
        };
        let (node, transfer) = candidates
            .iter()
            .map(|&n| {
                let t = if a == b { need(a, n) } else { need(a, n) + need(b, n) };
                (n, t)
            })
            .min_by_key(|&(n, t)| (t, load.get(&n).copied().unwrap_or(0), n))
            .expect("pair has at least one location");
        locations.get_mut(&a).unwrap().insert(node);
        locations.get_mut(&b).unwrap().insert(node);
        *load.entry(node).or_default() += 1;
        tasks.push(JoinTask {
            pair: (a, b),
            node,
            transfer_bytes: transfer,
        });
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::FileId;
    use proptest::prelude::*;

    fn bx(lo: &[i64], hi: &[i64]) -> BoundingBox {
        BoundingBox::new(lo.to_vec(), hi.to_vec()).unwrap()
    }

    fn c(f: u32, s: u32) -> ChunkId {
        ChunkId::new(FileId::new(f, 0), s)
    }

    fn brute(a: &[Vec<i64>], b: &[Vec<i64>], q: &QuerySpec) -> u64 {
        let mut n = 0;
        for x in a {
            for y in b {
                if q.range.contains_point(x)
                    && q.range.contains_point(y)
                    && l1_distance(x, y) <= q.shape_radius
                {
                    n += 1;
                }
            }
        }
        n
    }

    fn query_cells() -> Vec<Vec<i64>> {
        [[1, 3], [1, 4], [2, 2], [2, 3], [3, 3], [4, 2], [5, 2]]
            .iter()
            .map(|p| p.to_vec())
            .collect()
    }

    #[test]
    fn seven_cell_self_join_has_17_results() {
        let cells = query_cells();
        let q = QuerySpec::new(1, bx(&[1, 2], &[5, 4]), 1);
        assert_eq!(similarity_join_cells(&cells, &cells, &q), 17);
        assert_eq!(brute(&cells, &cells, &q), 17);
    }

    #[test]
    fn radius_zero_counts_identity_pairs() {
        let cells = query_cells();
        let q = QuerySpec::new(1, bx(&[1, 1], &[6, 8]), 0);
        assert_eq!(similarity_join_cells(&cells, &cells, &q), 7);
    }

    #[test]
    fn ball_sizes() {
        assert_eq!(l1_ball_size(2, 1), Some(5));
        assert_eq!(l1_ball_size(2, 2), Some(13));
        assert_eq!(l1_ball_size(3, 1), Some(7));
        assert_eq!(l1_ball(2, 2).len(), 13);
        assert_eq!(l1_ball(3, 3).len() as u128, l1_ball_size(3, 3).unwrap());
    }

    #[test]
    fn hashed_path_matches_brute_force() {
        let cells: Vec<Vec<i64>> = (0..120).map(|i| vec![i % 11, i / 11]).collect();
        let q = QuerySpec::new(1, bx(&[0, 0], &[20, 20]), 2);
        assert_eq!(similarity_join_cells(&cells, &cells, &q), brute(&cells, &cells, &q));
    }

    #[test]
    fn pair_generation_examples() {
        let q = QuerySpec::new(1, bx(&[0, 0], &[10, 10]), 1);
        let one = [(c(0, 1), bx(&[1, 1], &[2, 2]))];
        assert_eq!(generate_pairs(&one, &q), vec![(c(0, 1), c(0, 1))]);

        // boxes two apart on dim 0: x=2 and x=5 leave a gap of 2 cells
        let two = [(c(0, 1), bx(&[1, 1], &[2, 2])), (c(1, 1), bx(&[5, 1], &[6, 2]))];
        let pairs = generate_pairs(&two, &q);
        assert!(!pairs.contains(&(c(0, 1), c(1, 1))));
        assert_eq!(pairs.len(), 2);
    }

    #[test]
    fn required_cell_pairs_are_covered() {
        // cells spread over four chunks; every close cell pair must fall in
        // some generated chunk pair
        let chunks: Vec<(ChunkId, Vec<Vec<i64>>)> = vec![
            (c(0, 0), vec![vec![1, 3], vec![1, 4]]),
            (c(1, 0), vec![vec![2, 2], vec![2, 3]]),
            (c(2, 0), vec![vec![3, 3]]),
            (c(2, 1), vec![vec![4, 2], vec![5, 2]]),
        ];
        let q = QuerySpec::new(1, bx(&[1, 2], &[5, 4]), 1);
        let boxes: Vec<_> = chunks
            .iter()
            .map(|(id, cells)| (*id, crate::geometry::tight_box(cells).unwrap()))
            .collect();
        let pairs: BTreeSet<_> = generate_pairs(&boxes, &q).into_iter().collect();
        let required = [([1, 3], [1, 4]), ([1, 3], [2, 3]), ([2, 2], [2, 3]), ([2, 3], [3, 3]), ([4, 2], [5, 2])];
        let owner = |p: [i64; 2]| chunks.iter().find(|(_, cs)| cs.contains(&p.to_vec())).unwrap().0;
        for (x, y) in required {
            let (a, b) = (owner(x), owner(y));
            assert!(pairs.contains(&(a.min(b), a.max(b))), "{x:?}-{y:?}");
        }
        // and the chunk-level total equals the cell-level self join
        let mut total = 0;
        for &(a, b) in &pairs {
            let ca = &chunks.iter().find(|x| x.0 == a).unwrap().1;
            let cb = &chunks.iter().find(|x| x.0 == b).unwrap().1;
            let n = similarity_join_cells(ca, cb, &q);
            total += if a == b { n } else { 2 * n };
        }
        assert_eq!(total, 17);
    }

    #[test]
    fn assignment_examples() {
        let sizes = BTreeMap::from([(c(0, 1), 10), (c(1, 1), 10)]);
        let mut locs = BTreeMap::from([
            (c(0, 1), BTreeSet::from([NodeId(0)])),
            (c(1, 1), BTreeSet::from([NodeId(0)])),
        ]);
        let t = assign_pairs(&[(c(0, 1), c(1, 1))], &mut locs, &sizes).unwrap();
        assert_eq!((t[0].node, t[0].transfer_bytes), (NodeId(0), 0));

        let mut locs = BTreeMap::from([
            (c(0, 1), BTreeSet::from([NodeId(1)])),
            (c(1, 1), BTreeSet::from([NodeId(2)])),
        ]);
        let t = assign_pairs(&[(c(0, 1), c(1, 1))], &mut locs, &sizes).unwrap();
        assert_eq!((t[0].node, t[0].transfer_bytes), (NodeId(1), 10));
        assert!(locs[&c(1, 1)].contains(&NodeId(1)), "transfer leaves a copy");

        let mut empty = BTreeMap::from([(c(0, 1), BTreeSet::new())]);
        assert!(assign_pairs(&[(c(0, 1), c(0, 1))], &mut empty, &sizes).is_err());
    }

    #[test]
    fn copies_are_reused_by_later_tasks() {
        let sizes = BTreeMap::from([(c(0, 1), 10), (c(1, 1), 50), (c(2, 1), 50)]);
        let mut locs = BTreeMap::from([
            (c(0, 1), BTreeSet::from([NodeId(0)])),
            (c(1, 1), BTreeSet::from([NodeId(1)])),
            (c(2, 1), BTreeSet::from([NodeId(1)])),
        ]);
        let pairs = [(c(0, 1), c(1, 1)), (c(0, 1), c(2, 1))];
        let t = assign_pairs(&pairs, &mut locs, &sizes).unwrap();
        // ship the small chunk once; the second task reuses the copy
        assert_eq!(t[0].node, NodeId(1));
        assert_eq!(t[0].transfer_bytes, 10);
        assert_eq!(t[1].transfer_bytes, 0);
    }

    proptest! {
        #[test]
        fn join_matches_double_loop(
            a in proptest::collection::vec(proptest::collection::vec(0i64..12, 2), 0..50),
            b in proptest::collection::vec(proptest::collection::vec(0i64..12, 2), 0..50),
            r in 0u64..4,
            lo in (0i64..6, 0i64..6),
        ) {
            let q = QuerySpec::new(1, bx(&[lo.0, lo.1], &[lo.0 + 6, lo.1 + 6]), r);
            prop_assert_eq!(similarity_join_cells(&a, &b, &q), brute(&a, &b, &q));
        }
    }
}
