//! Raw sparse-array files.
//!
//! Two encodings are supported, told apart by their first bytes:
//!
//! * CSV: one cell per line, `d` integer coordinates then `m` attribute
//!   values, no header. The schema lives in a TOML sidecar.
//! * SABF: a little-endian binary table. Header is the magic `SABF`, then
//!   `version: u32 = 1`, `d: u32`, `m: u32`, `count: u64`, `lo: [i64; d]`,
//!   `hi: [i64; d]`; then `count` records of `d` i64 coordinates followed by
//!   `m` attributes (f64 or i64 by attribute kind).
//!
//! Cells repeated within one file are collapsed; the last record wins.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chunking::RawFileMeta;
use crate::cluster::{Dataset, RawFile};
use crate::error::{Error, Result};
use crate::geometry::{tight_box, ArraySchema, AttrKind, AttrValue, Attribute, BoundingBox, Cell, Dimension};
use crate::ids::FileId;

pub const SABF_MAGIC: &[u8; 4] = b"SABF";
pub const SABF_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Sabf,
}

impl FileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FileFormat::Csv => "csv",
            FileFormat::Sabf => "sabf",
        }
    }

    pub fn detect(bytes: &[u8]) -> Self {
        if bytes.starts_with(SABF_MAGIC) {
            FileFormat::Sabf
        } else {
            FileFormat::Csv
        }
    }
}

/// On-disk layout of the schema sidecar. `cell_record_bytes` defaults to
/// the binary record width.
#[derive(Serialize, Deserialize)]
struct SchemaFile {
    dims: Vec<Dimension>,
    #[serde(default)]
    attrs: Vec<Attribute>,
    cell_record_bytes: Option<u64>,
}

pub fn schema_from_toml(text: &str) -> Result<ArraySchema> {
    let f: SchemaFile = toml::from_str(text).map_err(|e| Error::format(format!("schema: {e}")))?;
    match f.cell_record_bytes {
        Some(b) => ArraySchema::new(f.dims, f.attrs, b),
        None => ArraySchema::with_default_record(f.dims, f.attrs),
    }
    .map_err(|e| Error::format(format!("schema: {e}")))
}

pub fn schema_to_toml(schema: &ArraySchema) -> String {
    let f = SchemaFile {
        dims: schema.dims.clone(),
        attrs: schema.attrs.clone(),
        cell_record_bytes: Some(schema.cell_record_bytes),
    };
    toml::to_string(&f).expect("schema serializes")
}

pub fn read_schema(path: &Path) -> Result<ArraySchema> {
    let text = fs::read_to_string(path).map_err(Error::io_at(path))?;
    schema_from_toml(&text).map_err(|e| match e {
        Error::Format(msg) => Error::format_in(path, msg),
        e => e,
    })
}

pub fn write_schema(path: &Path, schema: &ArraySchema) -> Result<()> {
    fs::write(path, schema_to_toml(schema))?;
    Ok(())
}

fn ingest(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Collapse repeated coordinates, keeping the first position and the last
/// value.
fn dedup_last_wins(cells: Vec<Cell>) -> Vec<Cell> {
    let mut at: HashMap<Vec<i64>, usize> = HashMap::with_capacity(cells.len());
    let mut out: Vec<Cell> = Vec::with_capacity(cells.len());
    for c in cells {
        match at.get(&c.coords) {
            Some(&i) => out[i] = c,
            None => {
                at.insert(c.coords.clone(), out.len());
                out.push(c);
            }
        }
    }
    out
}

/// Parse CSV records. `path` only labels errors.
pub fn parse_csv<R: Read>(reader: R, schema: &ArraySchema, path: &Path) -> Result<Vec<Cell>> {
    let d = schema.ndims();
    let width = d + schema.nattrs();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut cells = Vec::new();
    let mut rec = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut rec).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            ingest(path, line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(ingest(path, line, format!("expected {width} fields, found {}", rec.len())));
        }
        let mut coords = Vec::with_capacity(d);
        for (k, field) in rec.iter().take(d).enumerate() {
            let v: i64 = field
                .parse()
                .map_err(|_| ingest(path, line, format!("coordinate {k} is not an integer: {field:?}")))?;
            coords.push(v);
        }
        if !schema.contains(&coords) {
            return Err(ingest(path, line, format!("coordinates {coords:?} outside the schema")));
        }
        let mut attrs = Vec::with_capacity(schema.nattrs());
        for (a, field) in schema.attrs.iter().zip(rec.iter().skip(d)) {
            let v = match a.kind {
                AttrKind::Int => field.parse().map(AttrValue::Int).ok(),
                AttrKind::Float => field.parse().map(AttrValue::Float).ok(),
            };
            attrs.push(v.ok_or_else(|| ingest(path, line, format!("bad value {field:?} for attribute {}", a.name)))?);
        }
        cells.push(Cell { coords, attrs });
    }
    Ok(dedup_last_wins(cells))
}

pub fn write_csv<W: Write>(writer: W, cells: &[Cell]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let mut fields: Vec<String> = Vec::new();
    for c in cells {
        fields.clear();
        fields.extend(c.coords.iter().map(i64::to_string));
        fields.extend(c.attrs.iter().map(|a| match a {
            AttrValue::Int(v) => v.to_string(),
            AttrValue::Float(v) => v.to_string(),
        }));
        w.write_record(&fields).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

fn check_attrs(schema: &ArraySchema, cell: &Cell) -> Result<()> {
    schema.check_cell(cell)?;
    for (a, v) in schema.attrs.iter().zip(&cell.attrs) {
        let ok = matches!((a.kind, v), (AttrKind::Int, AttrValue::Int(_)) | (AttrKind::Float, AttrValue::Float(_)));
        if !ok {
            return Err(Error::usage(format!("attribute {} has the wrong kind", a.name)));
        }
    }
    Ok(())
}

pub fn write_sabf<W: Write>(mut w: W, schema: &ArraySchema, cells: &[Cell]) -> Result<()> {
    if cells.is_empty() {
        return Err(Error::usage("a raw file must hold at least one cell"));
    }
    for c in cells {
        check_attrs(schema, c)?;
    }
    let bbox = tight_box(cells)?;
    let mut buf = Vec::with_capacity(32 + cells.len() * 8 * (schema.ndims() + schema.nattrs()));
    buf.extend_from_slice(SABF_MAGIC);
    buf.extend_from_slice(&SABF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(schema.ndims() as u32).to_le_bytes());
    buf.extend_from_slice(&(schema.nattrs() as u32).to_le_bytes());
    buf.extend_from_slice(&(cells.len() as u64).to_le_bytes());
    for v in bbox.lo.iter().chain(&bbox.hi) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in cells {
        for v in &c.coords {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for a in &c.attrs {
            match a {
                AttrValue::Int(v) => buf.extend_from_slice(&v.to_le_bytes()),
                AttrValue::Float(v) => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Bytes<'a> {
    data: &'a [u8],
    at: usize,
}

impl Bytes<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let s = self.data.get(self.at..self.at + N)?;
        self.at += N;
        s.try_into().ok()
    }

    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take().map(u64::from_le_bytes)
    }

    fn i64(&mut self) -> Option<i64> {
        self.take().map(i64::from_le_bytes)
    }

    fn f64(&mut self) -> Option<f64> {
        self.take().map(f64::from_le_bytes)
    }
}

/// Parse a SABF file. Errors carry the 1-based record number as the line
/// (0 for the header).
pub fn parse_sabf(data: &[u8], schema: &ArraySchema, path: &Path) -> Result<Vec<Cell>> {
    let mut r = Bytes { data, at: 0 };
    let short = |line| ingest(path, line, "file is truncated");
    if r.take::<4>().as_ref() != Some(SABF_MAGIC) {
        return Err(ingest(path, 0, "missing SABF magic"));
    }
    let version = r.u32().ok_or_else(|| short(0))?;
    if version != SABF_VERSION {
        return Err(ingest(path, 0, format!("unsupported SABF version {version}")));
    }
    let d = r.u32().ok_or_else(|| short(0))? as usize;
    let m = r.u32().ok_or_else(|| short(0))? as usize;
    if d != schema.ndims() || m != schema.nattrs() {
        return Err(ingest(
            path,
            0,
            format!("file has {d} dims / {m} attrs, schema has {} / {}", schema.ndims(), schema.nattrs()),
        ));
    }
    let count = r.u64().ok_or_else(|| short(0))?;
    let mut corners = Vec::with_capacity(2 * d);
    for _ in 0..2 * d {
        corners.push(r.i64().ok_or_else(|| short(0))?);
    }
    let record = 8 * (d + m) as u64;
    let left = (data.len() - r.at) as u64;
    if count.checked_mul(record) != Some(left) {
        return Err(ingest(path, 0, format!("header promises {count} records, body holds {left} bytes")));
    }
    let header_box = BoundingBox::new(corners[..d].to_vec(), corners[d..].to_vec())
        .map_err(|e| ingest(path, 0, format!("bad header box: {e}")))?;

    let mut cells = Vec::with_capacity(count as usize);
    for k in 1..=count {
        let coords: Vec<i64> = (0..d).map(|_| r.i64().unwrap()).collect();
        if !schema.contains(&coords) {
            return Err(ingest(path, k, format!("coordinates {coords:?} outside the schema")));
        }
        let attrs = schema
            .attrs
            .iter()
            .map(|a| match a.kind {
                AttrKind::Int => AttrValue::Int(r.i64().unwrap()),
                AttrKind::Float => AttrValue::Float(r.f64().unwrap()),
            })
            .collect();
        cells.push(Cell { coords, attrs });
    }
    if !cells.is_empty() && tight_box(&cells)? != header_box {
        return Err(ingest(path, 0, "header box is not the tight box of the records"));
    }
    Ok(dedup_last_wins(cells))
}

/// Read every cell of a raw file and its catalog entry. `file_bytes` is the
/// size on disk.
pub fn scan_file(path: &Path, schema: &ArraySchema, file_id: FileId) -> Result<(Vec<Cell>, RawFileMeta)> {
    let data = fs::read(path).map_err(Error::io_at(path))?;
    let cells = match FileFormat::detect(&data) {
        FileFormat::Sabf => parse_sabf(&data, schema, path)?,
        FileFormat::Csv => parse_csv(data.as_slice(), schema, path)?,
    };
    if cells.is_empty() {
        return Err(ingest(path, 0, "file holds no cells"));
    }
    let meta = RawFileMeta {
        file_id,
        cell_count: cells.len() as u64,
        file_bytes: data.len() as u64,
        bbox: tight_box(&cells)?,
    };
    Ok((cells, meta))
}

/// Raw files under `paths`, expanding directories to their `.csv` and
/// `.sabf` entries, sorted by name.
pub fn list_raw_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p).map_err(Error::io_at(p))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            found.retain(|f| {
                f.is_file()
                    && f.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e == "csv" || e == "sabf")
            });
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::usage("no raw files found"));
    }
    Ok(out)
}

/// Load raw files into a dataset. The `k`-th file (in the given order) is
/// stored on node `k mod nodes`.
pub fn load_dataset(files: &[PathBuf], schema: &ArraySchema, nodes: u32) -> Result<Dataset> {
    if nodes == 0 {
        return Err(Error::usage("cluster needs at least one node"));
    }
    let mut raw = Vec::with_capacity(files.len());
    for (k, path) in files.iter().enumerate() {
        let k = k as u32;
        let (cells, meta) = scan_file(path, schema, FileId::new(k % nodes, k / nodes))?;
        raw.push(RawFile { meta, cells });
    }
    Dataset::new(schema.clone(), raw)
}

/// Write one raw file per partition as `part-NNNNN.<ext>` under `dir`.
pub fn write_dataset(dir: &Path, schema: &ArraySchema, parts: &[Vec<Cell>], format: FileFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(parts.len());
    for (k, cells) in parts.iter().enumerate() {
        let path = dir.join(format!("part-{k:05}.{}", format.extension()));
        let file = std::io::BufWriter::new(fs::File::create(&path)?);
        match format {
            FileFormat::Csv => write_csv(file, cells)?,
            FileFormat::Sabf => write_sabf(file, schema, cells)?,
        }
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> ArraySchema {
        ArraySchema::with_default_record(
            vec![
                Dimension { name: "i".into(), lo: 1, hi: 6 },
                Dimension { name: "j".into(), lo: 1, hi: 8 },
            ],
            vec![
                Attribute { name: "mag".into(), kind: AttrKind::Float },
                Attribute { name: "n".into(), kind: AttrKind::Int },
            ],
        )
        .unwrap()
    }

    fn cell(i: i64, j: i64, mag: f64, n: i64) -> Cell {
        Cell::new(vec![i, j], vec![AttrValue::Float(mag), AttrValue::Int(n)])
    }

    fn sample() -> Vec<Cell> {
        vec![cell(1, 3, 0.1, 7), cell(2, 2, -3.25, 0), cell(5, 8, 1e-9, -4)]
    }

    fn p() -> &'static Path {
        Path::new("test.csv")
    }

    #[test]
    fn schema_toml_round_trip() {
        let s = schema();
        assert_eq!(schema_from_toml(&schema_to_toml(&s)).unwrap(), s);
        let text = "[[dims]]\nname = \"x\"\nlo = 0\nhi = 9\n";
        assert_eq!(schema_from_toml(text).unwrap().cell_record_bytes, 8);
        assert!(matches!(schema_from_toml("dims = 3"), Err(Error::Format(_))));
    }

    #[test]
    fn csv_scan_gives_tight_box() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        fs::write(&path, "1,3,0.5,1\n2,2,0.25,2\n").unwrap();
        let (cells, meta) = scan_file(&path, &schema(), FileId::new(0, 0)).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(meta.cell_count, 2);
        assert_eq!(meta.bbox, BoundingBox::new(vec![1, 2], vec![2, 3]).unwrap());
        assert_eq!(meta.file_bytes, fs::metadata(&path).unwrap().len());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let err = parse_csv("1,3,0.5,1\n9,3,0.5,1\n".as_bytes(), &schema(), p()).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 2, .. }), "{err}");
        let err = parse_csv("1,3,0.5,1\n1,4,0.5\n".as_bytes(), &schema(), p()).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 2, .. }), "{err}");
        let err = parse_csv("1,x,0.5,1\n".as_bytes(), &schema(), p()).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 1, .. }), "{err}");
        let err = parse_csv("1,3,0.5,1.5\n".as_bytes(), &schema(), p()).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 1, .. }), "{err}");
    }

    #[test]
    fn empty_file_is_an_ingest_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        fs::write(&path, "").unwrap();
        assert!(matches!(scan_file(&path, &schema(), FileId::new(0, 0)), Err(Error::Ingest { .. })));
    }

    #[test]
    fn repeated_cells_keep_last_value() {
        let cells = parse_csv("1,3,0.5,1\n2,2,0,0\n1,3,9.5,9\n".as_bytes(), &schema(), p()).unwrap();
        assert_eq!(cells, vec![cell(1, 3, 9.5, 9), cell(2, 2, 0.0, 0)]);
    }

    #[test]
    fn csv_and_sabf_round_trip() {
        let s = schema();
        let mut csv = Vec::new();
        write_csv(&mut csv, &sample()).unwrap();
        assert_eq!(parse_csv(csv.as_slice(), &s, p()).unwrap(), sample());

        let mut bin = Vec::new();
        write_sabf(&mut bin, &s, &sample()).unwrap();
        assert_eq!(FileFormat::detect(&bin), FileFormat::Sabf);
        assert_eq!(parse_sabf(&bin, &s, p()).unwrap(), sample());
        assert_eq!(bin.len(), 4 + 12 + 8 + 32 + 3 * 32);
    }

    #[test]
    fn both_encodings_give_same_meta() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema();
        let paths_csv = write_dataset(&dir.path().join("c"), &s, &[sample()], FileFormat::Csv).unwrap();
        let paths_bin = write_dataset(&dir.path().join("b"), &s, &[sample()], FileFormat::Sabf).unwrap();
        let (_, a) = scan_file(&paths_csv[0], &s, FileId::new(0, 0)).unwrap();
        let (_, b) = scan_file(&paths_bin[0], &s, FileId::new(0, 0)).unwrap();
        assert_eq!((a.bbox, a.cell_count), (b.bbox, b.cell_count));
        // rescanning is stable
        assert_eq!(scan_file(&paths_bin[0], &s, FileId::new(0, 0)).unwrap().0, sample());
    }

    #[test]
    fn corrupt_sabf_is_rejected() {
        let s = schema();
        let mut bin = Vec::new();
        write_sabf(&mut bin, &s, &sample()).unwrap();
        assert!(parse_sabf(&bin[..bin.len() - 3], &s, p()).is_err());
        let mut bad = bin.clone();
        bad[4] = 2;
        assert!(parse_sabf(&bad, &s, p()).is_err());
        // first record's i coordinate set to 40
        let mut bad = bin.clone();
        let first = 4 + 12 + 8 + 32;
        bad[first..first + 8].copy_from_slice(&40i64.to_le_bytes());
        assert!(matches!(parse_sabf(&bad, &s, p()), Err(Error::Ingest { line: 1, .. })));
    }

    #[test]
    fn sabf_checks_attr_kinds() {
        let wrong = vec![Cell::new(vec![1, 1], vec![AttrValue::Int(1), AttrValue::Int(1)])];
        assert!(write_sabf(Vec::new(), &schema(), &wrong).is_err());
    }

    #[test]
    fn dataset_round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema();
        let parts = vec![sample(), vec![cell(4, 4, 1.0, 1)], vec![cell(6, 1, 2.0, 2)]];
        write_dataset(dir.path(), &s, &parts, FileFormat::Sabf).unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let files = list_raw_files(&[dir.path().to_path_buf()]).unwrap();
        assert_eq!(files.len(), 3);
        let ds = load_dataset(&files, &s, 2).unwrap();
        let ids: Vec<_> = ds.files.iter().map(|f| f.meta.file_id.to_string()).collect();
        assert_eq!(ids, ["f0.0", "f1.0", "f0.1"]);
        assert_eq!(ds.files[0].cells, sample());
    }
}
