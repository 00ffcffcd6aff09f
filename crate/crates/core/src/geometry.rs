//! Array schema, cells and integer bounding-box geometry.
//!
//! Dimensions are finite ranges of integers, so every extent is measured in
//! cells: a box `[lo..hi]` on one dimension has extent `hi - lo + 1 >= 1`,
//! and the volume of a box is the number of cell positions it covers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub lo: i64,
    pub hi: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    Int,
    Float,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub kind: AttrKind,
}

/// Dimensions, attributes and the per-cell byte charge used for budgets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySchema {
    pub dims: Vec<Dimension>,
    pub attrs: Vec<Attribute>,
    pub cell_record_bytes: u64,
}

impl ArraySchema {
    pub fn new(dims: Vec<Dimension>, attrs: Vec<Attribute>, cell_record_bytes: u64) -> Result<Self> {
        let schema = ArraySchema {
            dims,
            attrs,
            cell_record_bytes,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Schema whose `cell_record_bytes` is the width of one binary record,
    /// `8 * (d + m)`.
    pub fn with_default_record(dims: Vec<Dimension>, attrs: Vec<Attribute>) -> Result<Self> {
        let bytes = 8 * (dims.len() + attrs.len()) as u64;
        Self::new(dims, attrs, bytes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::usage("schema needs at least one dimension"));
        }
        if self.cell_record_bytes == 0 {
            return Err(Error::usage("cell_record_bytes must be positive"));
        }
        for (k, d) in self.dims.iter().enumerate() {
            if d.lo > d.hi {
                return Err(Error::usage(format!(
                    "dimension {} has lo {} > hi {}",
                    d.name, d.lo, d.hi
                )));
            }
            if self.dims[..k].iter().any(|o| o.name == d.name) {
                return Err(Error::usage(format!("duplicate dimension name {}", d.name)));
            }
        }
        for (k, a) in self.attrs.iter().enumerate() {
            if self.attrs[..k].iter().any(|o| o.name == a.name) {
                return Err(Error::usage(format!("duplicate attribute name {}", a.name)));
            }
        }
        Ok(())
    }

    pub fn ndims(&self) -> usize {
        self.dims.len()
    }

    pub fn nattrs(&self) -> usize {
        self.attrs.len()
    }

    /// The whole array domain as a box.
    pub fn domain(&self) -> BoundingBox {
        BoundingBox {
            lo: self.dims.iter().map(|d| d.lo).collect(),
            hi: self.dims.iter().map(|d| d.hi).collect(),
        }
    }

    pub fn contains(&self, coords: &[i64]) -> bool {
        coords.len() == self.dims.len()
            && self
                .dims
                .iter()
                .zip(coords)
                .all(|(d, &c)| d.lo <= c && c <= d.hi)
    }

    pub fn check_cell(&self, cell: &Cell) -> Result<()> {
        if cell.coords.len() != self.ndims() || cell.attrs.len() != self.nattrs() {
            return Err(Error::usage(format!(
                "cell has {} coords / {} attrs, schema expects {} / {}",
                cell.coords.len(),
                cell.attrs.len(),
                self.ndims(),
                self.nattrs()
            )));
        }
        if !self.contains(&cell.coords) {
            return Err(Error::usage(format!(
                "cell {:?} outside schema ranges",
                cell.coords
            )));
        }
        Ok(())
    }
}

/// An attribute value. Caching never looks inside these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub coords: Vec<i64>,
    pub attrs: Vec<AttrValue>,
}

impl Cell {
    pub fn new(coords: Vec<i64>, attrs: Vec<AttrValue>) -> Self {
        Cell { coords, attrs }
    }

    /// A cell with no attributes; handy in tests and demos.
    pub fn at(coords: &[i64]) -> Self {
        Cell {
            coords: coords.to_vec(),
            attrs: Vec::new(),
        }
    }
}

impl AsRef<[i64]> for Cell {
    fn as_ref(&self) -> &[i64] {
        &self.coords
    }
}

/// Axis-aligned integer hyper-rectangle with inclusive bounds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

impl BoundingBox {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::usage(format!(
                "box bounds have {} and {} dims",
                lo.len(),
                hi.len()
            )));
        }
        if let Some(k) = (0..lo.len()).find(|&k| lo[k] > hi[k]) {
            return Err(Error::usage(format!(
                "box lo {} > hi {} on dim {k}",
                lo[k], hi[k]
            )));
        }
        Ok(BoundingBox { lo, hi })
    }

    /// Single-cell box.
    pub fn point(coords: &[i64]) -> Self {
        BoundingBox {
            lo: coords.to_vec(),
            hi: coords.to_vec(),
        }
    }

    pub fn ndims(&self) -> usize {
        self.lo.len()
    }

    pub fn extent(&self, dim: usize) -> u64 {
        (self.hi[dim] - self.lo[dim]) as u64 + 1
    }

    /// Number of cell positions covered.
    pub fn volume(&self) -> u128 {
        (0..self.ndims()).map(|k| self.extent(k) as u128).product()
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        debug_assert_eq!(self.ndims(), other.ndims());
        (0..self.ndims()).all(|k| self.lo[k] <= other.hi[k] && other.lo[k] <= self.hi[k])
    }

    /// Component-wise max-lo / min-hi, or `None` when empty on some dimension.
    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        if !self.intersects(other) {
            return None;
        }
        Some(BoundingBox {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| *a.max(b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| *a.min(b)).collect(),
        })
    }

    pub fn contains_point(&self, coords: &[i64]) -> bool {
        debug_assert_eq!(self.ndims(), coords.len());
        coords
            .iter()
            .enumerate()
            .all(|(k, &c)| self.lo[k] <= c && c <= self.hi[k])
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        (0..self.ndims()).all(|k| self.lo[k] <= other.lo[k] && other.hi[k] <= self.hi[k])
    }

    /// Grow by `r` on every face, clamped to the schema domain.
    pub fn expand(&self, r: u64, schema: &ArraySchema) -> BoundingBox {
        let r = r.min(i64::MAX as u64) as i64;
        BoundingBox {
            lo: self
                .lo
                .iter()
                .zip(&schema.dims)
                .map(|(&l, d)| l.saturating_sub(r).max(d.lo))
                .collect(),
            hi: self
                .hi
                .iter()
                .zip(&schema.dims)
                .map(|(&h, d)| h.saturating_add(r).min(d.hi))
                .collect(),
        }
    }

    /// Grow by `r` on every face without clamping.
    pub fn expand_unclamped(&self, r: u64) -> BoundingBox {
        let r = r.min(i64::MAX as u64) as i64;
        BoundingBox {
            lo: self.lo.iter().map(|l| l.saturating_sub(r)).collect(),
            hi: self.hi.iter().map(|h| h.saturating_add(r)).collect(),
        }
    }

    /// Grow to include `coords`.
    pub fn include(&mut self, coords: &[i64]) {
        for (k, &c) in coords.iter().enumerate() {
            self.lo[k] = self.lo[k].min(c);
            self.hi[k] = self.hi[k].max(c);
        }
    }

    /// Translate by `delta` on every dimension.
    pub fn translate(&self, delta: &[i64]) -> BoundingBox {
        BoundingBox {
            lo: self.lo.iter().zip(delta).map(|(a, d)| a.saturating_add(*d)).collect(),
            hi: self.hi.iter().zip(delta).map(|(a, d)| a.saturating_add(*d)).collect(),
        }
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in 0..self.ndims() {
            if k > 0 {
                f.write_str("x")?;
            }
            write!(f, "[{}..{}]", self.lo[k], self.hi[k])?;
        }
        Ok(())
    }
}

/// Intersection with a dimensionality check.
pub fn box_intersect(a: &BoundingBox, b: &BoundingBox) -> Result<Option<BoundingBox>> {
    if a.ndims() != b.ndims() {
        return Err(Error::usage(format!(
            "cannot intersect {}-d box with {}-d box",
            a.ndims(),
            b.ndims()
        )));
    }
    Ok(a.intersection(b))
}

/// Minimal box containing every point.
pub fn tight_box<P: AsRef<[i64]>>(points: impl IntoIterator<Item = P>) -> Result<BoundingBox> {
    let mut iter = points.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::usage("tight box of an empty cell set"))?;
    let mut b = BoundingBox::point(first.as_ref());
    for p in iter {
        let p = p.as_ref();
        if p.len() != b.ndims() {
            return Err(Error::usage("cells of mixed dimensionality"));
        }
        b.include(p);
    }
    Ok(b)
}

/// L1 distance between two coordinate tuples.
pub fn l1_distance(a: &[i64], b: &[i64]) -> u64 {
    a.iter().zip(b).map(|(x, y)| x.abs_diff(*y)).sum()
}

/// A similarity self-join query: the subarray to read plus the L1 radius of
/// the join shape (`shape_radius = 1` is the cross-shaped L1(1) stencil).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: u64,
    pub range: BoundingBox,
    pub shape_radius: u64,
}

impl QuerySpec {
    pub fn new(id: u64, range: BoundingBox, shape_radius: u64) -> Self {
        QuerySpec {
            id,
            range,
            shape_radius,
        }
    }

    pub fn validate(&self, schema: &ArraySchema) -> Result<()> {
        if self.range.ndims() != schema.ndims() {
            return Err(Error::usage(format!(
                "query {} has {} dims, schema has {}",
                self.id,
                self.range.ndims(),
                schema.ndims()
            )));
        }
        if !schema.domain().contains_box(&self.range) {
            return Err(Error::usage(format!(
                "query {} range {} outside schema domain",
                self.id, self.range
            )));
        }
        Ok(())
    }
}
