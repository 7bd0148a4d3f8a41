//! Image manifest and feature matrix loading.
//!
//! The binary matrix format is a single UTF-8 JSON header line
//!
//! ```text
//! {"n":<rows>,"dim":<cols>,"dtype":"f32","order":"row-major"}\n
//! ```
//!
//! followed by exactly `n * dim` little-endian `f32` values. The header may
//! carry extra keys (the KMeans model file uses this); readers ignore them.
//! Paths ending in `.csv` are read as headerless numeric CSV instead.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MANIFEST_HEADER: [&str; 4] = ["image_id", "file_path", "donor_id", "taken_at"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub file_path: String,
    pub donor_id: String,
    pub taken_at: DateTime<FixedOffset>,
}

/// Ordered image records. Row `i` of every matrix in the pipeline belongs to
/// `records[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    records: Vec<ImageRecord>,
    source_path: PathBuf,
}

impl Manifest {
    /// Validates id uniqueness and non-emptiness.
    pub fn new(records: Vec<ImageRecord>, source_path: impl Into<PathBuf>) -> Result<Self> {
        let source_path = source_path.into();
        if records.is_empty() {
            return Err(Error::Empty { path: source_path });
        }
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !is_valid_image_id(&r.image_id) {
                return Err(Error::InvalidId {
                    row: i + 1,
                    id: r.image_id.clone(),
                });
            }
            if let Some(first) = seen.insert(&r.image_id, i + 1) {
                return Err(Error::DuplicateId {
                    id: r.image_id.clone(),
                    first_row: first,
                    second_row: i + 1,
                });
            }
        }
        Ok(Manifest {
            records,
            source_path,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn source_path(&self) -> &Path {
        &self.source_path
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.image_id.clone()).collect()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }
}

pub fn is_valid_image_id(id: &str) -> bool {
    !id.is_empty() && !id.chars().any(|c| c.is_whitespace() || c == '/' || c == '\\')
}

/// Parses ISO-8601 timestamps that carry an explicit UTC offset. Seconds
/// are optional.
pub fn parse_timestamp(s: &str) -> Option<DateTime<FixedOffset>> {
    let s = s.trim();
    DateTime::parse_from_rfc3339(s)
        .or_else(|_| DateTime::parse_from_str(s, "%Y-%m-%dT%H:%M%:z"))
        .or_else(|_| DateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%:z"))
        .ok()
}

pub(crate) fn check_header(path: &Path, found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = found.iter().map(str::trim).collect();
    if found != expected {
        return Err(Error::format(
            path,
            format!(
                "expected CSV header `{}`, found `{}`",
                expected.join(","),
                found.join(",")
            ),
        ));
    }
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    if header.is_empty() {
        return Err(Error::Empty { path: path.into() });
    }
    check_header(path, &header, &MANIFEST_HEADER)?;

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let field = |k: usize| row.get(k).unwrap_or("").to_string();
        let taken_at_raw = field(3);
        let taken_at = parse_timestamp(&taken_at_raw).ok_or(Error::BadTimestamp {
            row: i + 1,
            value: taken_at_raw,
        })?;
        records.push(ImageRecord {
            image_id: field(0),
            file_path: field(1),
            donor_id: field(2),
            taken_at,
        });
    }
    Manifest::new(records, path)
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(MANIFEST_HEADER)
        .map_err(|e| Error::csv(path, e))?;
    for r in manifest.records() {
        w.write_record([
            r.image_id.as_str(),
            r.file_path.as_str(),
            r.donor_id.as_str(),
            &r.taken_at.to_rfc3339(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Feature matrix whose rows are keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub row_ids: Vec<String>,
    pub values: Matrix,
}

impl EmbeddingMatrix {
    pub fn new(row_ids: Vec<String>, values: Matrix) -> Result<Self> {
        if row_ids.len() != values.rows() {
            return Err(Error::RowCountMismatch {
                expected: row_ids.len(),
                found: values.rows(),
            });
        }
        if let Some((row, col)) = values.find_non_finite() {
            return Err(Error::NonFinite { row, col });
        }
        Ok(EmbeddingMatrix { row_ids, values })
    }

    pub fn n_rows(&self) -> usize {
        self.values.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.cols()
    }

    /// Checks that rows line up with `manifest`.
    pub fn check_aligned(&self, manifest: &Manifest) -> Result<()> {
        if self.row_ids.len() != manifest.len() {
            return Err(Error::RowCountMismatch {
                expected: manifest.len(),
                found: self.row_ids.len(),
            });
        }
        for (i, (id, r)) in self.row_ids.iter().zip(manifest.records()).enumerate() {
            if *id != r.image_id {
                return Err(Error::Dimension(format!(
                    "row {i} is {id:?} but manifest record {i} is {:?}",
                    r.image_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixHeader {
    pub n: usize,
    pub dim: usize,
    pub dtype: String,
    pub order: String,
}

impl MatrixHeader {
    pub fn f32_row_major(n: usize, dim: usize) -> Self {
        MatrixHeader {
            n,
            dim,
            dtype: "f32".into(),
            order: "row-major".into(),
        }
    }
}

/// Writes `header` as one JSON line followed by the little-endian `f32`
/// payload of `values`. `header` must serialize to an object containing at
/// least the [`MatrixHeader`] keys.
pub fn write_matrix_file<H: Serialize>(path: &Path, header: &H, values: &Matrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let line = serde_json::to_string(header)
        .map_err(|e| Error::format(path, format!("header: {e}")))?;
    let io = |e| Error::io(path, e);
    w.write_all(line.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    for v in values.as_slice() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Parses the binary matrix format from `bytes`, returning the raw JSON
/// header alongside the matrix.
pub fn parse_matrix_bytes(path: &Path, bytes: &[u8]) -> Result<(serde_json::Value, Matrix)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header_text = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let raw: serde_json::Value = serde_json::from_str(header_text)
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let header: MatrixHeader = serde_json::from_value(raw.clone())
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::format(path, format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.order != "row-major" {
        return Err(Error::format(path, format!("unsupported order {:?}", header.order)));
    }

    let payload = &bytes[newline + 1..];
    let count = header
        .n
        .checked_mul(header.dim)
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    let expected = count * 4;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::format(
            path,
            format!(
                "{} trailing bytes after {expected}-byte payload",
                payload.len() - expected
            ),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for (p, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: p / header.dim,
                col: p % header.dim,
            });
        }
        data.push(v as f64);
    }
    Ok((raw, Matrix::from_vec(header.n, header.dim, data)?))
}

/// Reads a matrix file (binary or `.csv`) without manifest checks.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    if is_csv(path) {
        return read_matrix_csv(path);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_matrix_bytes(path, &bytes)?.1)
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut data = Vec::new();
    let mut dim = None;
    let mut n = 0;
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let width = *dim.get_or_insert(row.len());
        if row.len() != width {
            return Err(Error::format(
                path,
                format!("row {i} has {} columns, expected {width}", row.len()),
            ));
        }
        for (j, cell) in row.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::format(path, format!("row {i}, col {j}: cannot parse {cell:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
            // Same precision as the binary format.
            data.push(v as f32 as f64);
        }
        n += 1;
    }
    Matrix::from_vec(n, dim.unwrap_or(0), data)
}

/// Loads the feature matrix for `manifest`, rows keyed by manifest order.
pub fn load_embeddings(path: impl AsRef<Path>, manifest: &Manifest) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let values = if is_csv(path) {
        read_matrix_csv(path)?
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        // Check the declared count before touching the payload so a
        // mismatched file reports the counts rather than a size error.
        if let Some(nl) = bytes.iter().position(|&b| b == b'\n') {
            if let Ok(h) = serde_json::from_slice::<MatrixHeader>(&bytes[..nl]) {
                if h.n != manifest.len() {
                    return Err(Error::RowCountMismatch {
                        expected: manifest.len(),
                        found: h.n,
                    });
                }
            }
        }
        parse_matrix_bytes(path, &bytes)?.1
    };
    if values.rows() != manifest.len() {
        return Err(Error::RowCountMismatch {
            expected: manifest.len(),
            found: values.rows(),
        });
    }
    EmbeddingMatrix::new(manifest.image_ids(), values)
}

pub fn save_embeddings(path: impl AsRef<Path>, embeddings: &EmbeddingMatrix) -> Result<()> {
    let v = &embeddings.values;
    write_matrix_file(
        path.as_ref(),
        &MatrixHeader::f32_row_major(v.rows(), v.cols()),
        v,
    )
}
