//! Caption datastore, `EMB1` embedding files and exact cosine retrieval.
//!
//! `EMB1` layout, little-endian:
//!
//! ```text
//! b"EMB1" | rows: u32 | dim: u32 | rows*dim f32, row-major | b"IDS\n" | rows x (utf-8 id, b'\n')
//! ```

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Caption;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
const IDS_MARKER: &[u8; 4] = b"IDS\n";
const NORM_TOLERANCE: f64 = 1e-5;

/// Row-normalized embeddings with one identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from raw rows, normalizing each to unit L2 norm.
    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f32>>) -> Result<EmbeddingMatrix> {
        if ids.len() != rows.len() {
            return Err(Error::contract(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::contract(format!(
                    "row {r} has width {}, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        let mut m = EmbeddingMatrix {
            rows: rows.len(),
            dim,
            data,
            ids,
        };
        m.normalize_rows(|r| Error::contract(format!("row {r} has zero or non-finite norm")))?;
        Ok(m)
    }

    fn normalize_rows(&mut self, on_bad: impl Fn(usize) -> Error) -> Result<()> {
        for r in 0..self.rows {
            let row = &mut self.data[r * self.dim..(r + 1) * self.dim];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(on_bad(r));
            }
            let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(on_bad(r));
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f32]> {
        self.ids.iter().position(|i| i == id).map(|r| self.row(r))
    }

    /// Decodes an `EMB1` buffer. Errors carry the byte offset of the first
    /// offending byte.
    pub fn from_emb1_bytes(bytes: &[u8]) -> Result<EmbeddingMatrix> {
        if bytes.len() < 4 || &bytes[..4] != EMB1_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"EMB1\""));
        }
        let rows = read_u32(bytes, 4)? as usize;
        let dim = read_u32(bytes, 8)? as usize;
        let header = 12usize;
        let count = rows
            .checked_mul(dim)
            .ok_or_else(|| Error::format(4, "rows*dim overflows"))?;
        let payload_end = count
            .checked_mul(4)
            .and_then(|b| b.checked_add(header))
            .ok_or_else(|| Error::format(4, "payload size overflows"))?;
        if bytes.len() < payload_end {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated payload: expected {count} f32 values ending at byte {payload_end}"),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let off = header + 4 * i;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(off as u64, "non-finite value"));
            }
            data.push(v);
        }
        let marker_end = payload_end + IDS_MARKER.len();
        if bytes.len() < marker_end || &bytes[payload_end..marker_end] != IDS_MARKER {
            return Err(Error::format(payload_end as u64, "missing \"IDS\\n\" marker"));
        }
        let mut ids = Vec::with_capacity(rows);
        let mut pos = marker_end;
        for r in 0..rows {
            let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                return Err(Error::format(
                    bytes.len() as u64,
                    format!("truncated id list: {r} of {rows} ids present"),
                ));
            };
            let id = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| Error::format(pos as u64, "id is not valid UTF-8"))?;
            ids.push(id.to_owned());
            pos += nl + 1;
        }
        if pos != bytes.len() {
            return Err(Error::format(pos as u64, "trailing bytes after id list"));
        }
        let mut m = EmbeddingMatrix {
            rows,
            dim,
            data,
            ids,
        };
        m.normalize_rows(|r| Error::format((header + 4 * r * dim) as u64, format!("row {r} has zero norm")))?;
        Ok(m)
    }

    pub fn to_emb1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4 + 4 + self.ids.len() * 8);
        out.extend_from_slice(EMB1_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(IDS_MARKER);
        for id in &self.ids {
            out.extend_from_slice(id.as_bytes());
            out.push(b'\n');
        }
        out
    }

    /// Largest deviation of any row norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        (0..self.rows)
            .map(|r| {
                let n = self.row(r).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
                (n - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(bytes.len() as u64, "truncated header"))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = EmbeddingMatrix::from_emb1_bytes(&bytes)?;
    debug_assert!(m.max_norm_error() <= NORM_TOLERANCE);
    Ok(m)
}

/// One line of the captions JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub captions: Vec<String>,
}

/// Id of the `index`-th caption of an image in a captions file.
pub fn caption_id(image_id: &str, index: usize) -> String {
    format!("{image_id}#{index}")
}

/// Captions keyed by caption id, plus ground-truth caption lists per image.
///
/// Caption `j` of image `img` in a captions file gets id `img#j`.
#[derive(Debug, Clone, Default)]
pub struct CaptionStore {
    captions: BTreeMap<String, Caption>,
    images: BTreeMap<String, Vec<Caption>>,
}

impl CaptionStore {
    pub fn new() -> CaptionStore {
        CaptionStore::default()
    }

    pub fn from_records(records: &[CaptionRecord]) -> Result<CaptionStore> {
        let mut store = CaptionStore::new();
        for rec in records {
            store.add_image(&rec.image_id, &rec.captions)?;
        }
        Ok(store)
    }

    pub fn add_image<S: AsRef<str>>(&mut self, image_id: &str, captions: &[S]) -> Result<()> {
        if self.images.contains_key(image_id) {
            return Err(Error::Input(format!("duplicate image id {image_id:?}")));
        }
        let caps: Vec<Caption> = captions.iter().map(|c| Caption::new(c.as_ref())).collect();
        for (j, c) in caps.iter().enumerate() {
            let id = caption_id(image_id, j);
            if self.captions.insert(id.clone(), c.clone()).is_some() {
                return Err(Error::Input(format!("duplicate caption id {id:?}")));
            }
        }
        self.images.insert(image_id.to_owned(), caps);
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<CaptionStore> {
        let records = read_caption_records(path)?;
        CaptionStore::from_records(&records)
    }

    pub fn caption(&self, id: &str) -> Option<&Caption> {
        self.captions.get(id)
    }

    pub fn references(&self, image_id: &str) -> Option<&[Caption]> {
        self.images.get(image_id).map(Vec::as_slice)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// Checks that every embedding id names a stored caption.
    pub fn check_index(&self, index: &EmbeddingMatrix) -> Result<()> {
        match index.ids().iter().find(|id| !self.captions.contains_key(*id)) {
            Some(id) => Err(Error::Input(format!(
                "embedding id {id:?} has no caption in the store"
            ))),
            None => Ok(()),
        }
    }
}

/// Reads a JSON Lines file of `{"image_id", "captions"}` records.
pub fn read_caption_records(path: &Path) -> Result<Vec<CaptionRecord>> {
    read_jsonl(path)
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            let rec = serde_json::from_str(&line).map_err(|e| {
                Error::format(
                    offset + e.column().saturating_sub(1) as u64,
                    format!("{}: line {}: {e}", path.display(), n + 1),
                )
            })?;
            out.push(rec);
        }
        offset += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEntry {
    pub caption_id: String,
    pub caption: Caption,
    pub similarity: f64,
    /// 1-based.
    pub rank: usize,
}

/// Captions ranked by descending cosine similarity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalList {
    pub entries: Vec<RetrievalEntry>,
}

impl RetrievalList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry with the given 1-based rank.
    pub fn rank(&self, rank: usize) -> Option<&RetrievalEntry> {
        rank.checked_sub(1).and_then(|i| self.entries.get(i))
    }

    /// Builds a list from (id, caption, similarity) triples, sorting by
    /// descending similarity with ties broken by ascending id.
    pub fn from_scored(mut scored: Vec<(String, Caption, f64)>) -> RetrievalList {
        scored.sort_by(|a, b| compare_scored(a.2, &a.0, b.2, &b.0));
        RetrievalList {
            entries: scored
                .into_iter()
                .enumerate()
                .map(|(i, (caption_id, caption, similarity))| RetrievalEntry {
                    caption_id,
                    caption,
                    similarity,
                    rank: i + 1,
                })
                .collect(),
        }
    }
}

fn compare_scored(sa: f64, ida: &str, sb: f64, idb: &str) -> Ordering {
    sb.total_cmp(&sa).then_with(|| ida.cmp(idb))
}

/// Exhaustive top-`n` cosine retrieval. The query is used as given, so it
/// should already be unit length.
pub fn cosine_retrieve(
    query: &[f32],
    index: &EmbeddingMatrix,
    store: &CaptionStore,
    n: usize,
) -> Result<RetrievalList> {
    if query.len() != index.dim() {
        return Err(Error::contract(format!(
            "query dimension {} does not match index dimension {}",
            query.len(),
            index.dim()
        )));
    }
    if n == 0 {
        return Err(Error::contract("retrieval depth n must be at least 1"));
    }
    let mut scored: Vec<(usize, f64)> = (0..index.rows())
        .map(|r| (r, dot(query, index.row(r))))
        .collect();
    scored.sort_by(|a, b| compare_scored(a.1, &index.ids[a.0], b.1, &index.ids[b.0]));
    scored.truncate(n);
    let entries = scored
        .into_iter()
        .enumerate()
        .map(|(i, (r, similarity))| {
            let id = &index.ids[r];
            let caption = store.caption(id).cloned().ok_or_else(|| {
                Error::Input(format!("embedding id {id:?} has no caption in the store"))
            })?;
            Ok(RetrievalEntry {
                caption_id: id.clone(),
                caption,
                similarity,
                rank: i + 1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalList { entries })
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}
