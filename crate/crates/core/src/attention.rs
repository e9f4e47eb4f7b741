//! Max-attention segment analysis over `ATT1` attention dumps.
//!
//! For every analysed query row the arg-max key index is mapped to its
//! segment and counted per (layer, head). Three analyses are supported:
//!
//! - `sa_text`: generated-token queries over text keys (5 text segments)
//! - `xa_text`: image patches over text positions (5 text segments)
//! - `xa_img`: generated-token queries over image keys (CLS vs patches)
//!
//! `ATT1` layout, little-endian:
//!
//! ```text
//! b"ATT1" | L u32 | H u32 | Q u32 | Z u32 | query kind u8 | key kind u8 | L*H*Q*Z f32
//! ```
//!
//! Axis kinds are `0` = text and `1` = image. Values are stored in
//! `[layer][head][query][key]` order.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{check_partition, PromptLayout, Segment};

pub const ATT1_MAGIC: &[u8; 4] = b"ATT1";
const ATT1_HEADER: usize = 22;
const ROW_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisKind {
    Text = 0,
    Image = 1,
}

impl AxisKind {
    fn from_byte(b: u8, offset: usize) -> Result<AxisKind> {
        match b {
            0 => Ok(AxisKind::Text),
            1 => Ok(AxisKind::Image),
            _ => Err(Error::format(offset as u64, format!("unknown axis kind {b}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub layers: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub query_axis: AxisKind,
    pub key_axis: AxisKind,
    scores: Vec<f32>,
}

/// Soft checks on attention values. The analyses only need the arg-max, so these
/// are reported, never fatal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RowCheck {
    pub negative_values: usize,
    /// Rows whose sum differs from 1 by more than 1e-3.
    pub unnormalized_rows: usize,
}

impl AttentionTensor {
    pub fn new(
        shape: [usize; 4],
        query_axis: AxisKind,
        key_axis: AxisKind,
        scores: Vec<f32>,
    ) -> Result<AttentionTensor> {
        let [layers, heads, queries, keys] = shape;
        if scores.len() != layers * heads * queries * keys {
            return Err(Error::contract(format!(
                "{} scores for shape {shape:?}",
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite attention score at flat index {i}")));
        }
        Ok(AttentionTensor {
            layers,
            heads,
            queries,
            keys,
            query_axis,
            key_axis,
            scores,
        })
    }

    pub fn from_att1_bytes(bytes: &[u8]) -> Result<AttentionTensor> {
        if bytes.len() < 4 || &bytes[..4] != ATT1_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"ATT1\""));
        }
        if bytes.len() < ATT1_HEADER {
            return Err(Error::format(bytes.len() as u64, "truncated header"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (layers, heads, queries, keys) = (dim(0), dim(1), dim(2), dim(3));
        let query_axis = AxisKind::from_byte(bytes[20], 20)?;
        let key_axis = AxisKind::from_byte(bytes[21], 21)?;
        let count = [layers, heads, queries, keys]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(4, "tensor size overflows"))?;
        let end = count
            .checked_mul(4)
            .and_then(|b| b.checked_add(ATT1_HEADER))
            .ok_or_else(|| Error::format(4, "tensor size overflows"))?;
        if bytes.len() < end {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated payload: expected {count} f32 values ending at byte {end}"),
            ));
        }
        if bytes.len() > end {
            return Err(Error::format(end as u64, "trailing bytes after payload"));
        }
        let mut scores = Vec::with_capacity(count);
        for i in 0..count {
            let off = ATT1_HEADER + 4 * i;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(off as u64, "non-finite attention score"));
            }
            scores.push(v);
        }
        Ok(AttentionTensor {
            layers,
            heads,
            queries,
            keys,
            query_axis,
            key_axis,
            scores,
        })
    }

    pub fn to_att1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ATT1_HEADER + 4 * self.scores.len());
        out.extend_from_slice(ATT1_MAGIC);
        for d in [self.layers, self.heads, self.queries, self.keys] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.query_axis as u8);
        out.push(self.key_axis as u8);
        for v in &self.scores {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn load(path: &Path) -> Result<AttentionTensor> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        AttentionTensor::from_att1_bytes(&bytes)
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let start = ((layer * self.heads + head) * self.queries + query) * self.keys;
        &self.scores[start..start + self.keys]
    }

    /// Flat scores in `[layer][head][query][key]` order.
    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f32 {
        self.row(layer, head, query)[key]
    }

    pub fn row_check(&self) -> RowCheck {
        let mut check = RowCheck::default();
        if self.keys == 0 {
            return check;
        }
        for row in self.scores.chunks(self.keys) {
            check.negative_values += row.iter().filter(|v| **v < 0.0).count();
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                check.unnormalized_rows += 1;
            }
        }
        check
    }
}

/// Partition of one attention axis into analysis segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentMap {
    /// The five prompt segments BOS, prefix, retrieval, suffix, generation.
    Text { spans: [Range<usize>; 5] },
    /// CLS output embedding (segment 1) and patch embeddings (segment 2).
    Image { len: usize, cls_index: usize },
}

impl SegmentMap {
    pub fn text(spans: [Range<usize>; 5]) -> Result<SegmentMap> {
        let len = spans[4].end;
        check_partition(&spans, len)?;
        Ok(SegmentMap::Text { spans })
    }

    pub fn from_layout(layout: &PromptLayout) -> SegmentMap {
        SegmentMap::Text {
            spans: layout.spans().clone(),
        }
    }

    pub fn image(len: usize, cls_index: usize) -> Result<SegmentMap> {
        if cls_index >= len {
            return Err(Error::Input(format!(
                "CLS index {cls_index} outside image axis of length {len}"
            )));
        }
        Ok(SegmentMap::Image { len, cls_index })
    }

    pub fn len(&self) -> usize {
        match self {
            SegmentMap::Text { spans } => spans[4].end,
            SegmentMap::Image { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment_count(&self) -> usize {
        match self {
            SegmentMap::Text { .. } => 5,
            SegmentMap::Image { .. } => 2,
        }
    }

    /// 1-based segment id of `index`.
    pub fn segment_of(&self, index: usize) -> Option<usize> {
        match self {
            SegmentMap::Text { spans } => spans.iter().position(|s| s.contains(&index)).map(|i| i + 1),
            SegmentMap::Image { len, cls_index } => {
                (index < *len).then_some(if index == *cls_index { 1 } else { 2 })
            }
        }
    }

    pub fn segment_names(&self) -> Vec<&'static str> {
        match self {
            SegmentMap::Text { .. } => Segment::ALL.iter().map(|s| s.name()).collect(),
            SegmentMap::Image { .. } => vec!["cls", "patches"],
        }
    }
}

/// Index of the maximum, ties broken by the lowest index.
pub fn argmax(row: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in row.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Segment holding the row's arg-max.
pub fn max_segment(row: &[f32], segmap: &SegmentMap) -> Result<usize> {
    if row.is_empty() {
        return Err(Error::contract("attention row is empty"));
    }
    if row.len() != segmap.len() {
        return Err(Error::contract(format!(
            "row of {} scores against a segment map of length {}",
            row.len(),
            segmap.len()
        )));
    }
    Ok(segmap.segment_of(argmax(row).unwrap()).expect("segment map covers the row"))
}

/// Per-sample segment information, as stored in the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sidecar {
    pub text_spans: [Range<usize>; 5],
    pub image_cls_index: usize,
}

#[derive(Deserialize)]
struct SidecarJson {
    spans: BTreeMap<String, [usize; 2]>,
    #[serde(default)]
    image_cls_index: usize,
}

impl Sidecar {
    pub fn from_layout(layout: &PromptLayout) -> Sidecar {
        Sidecar {
            text_spans: layout.spans().clone(),
            image_cls_index: 0,
        }
    }

    pub fn parse(json: &str) -> Result<Sidecar> {
        let raw: SidecarJson =
            serde_json::from_str(json).map_err(|e| Error::Input(format!("sidecar: {e}")))?;
        let mut spans: [Range<usize>; 5] = Default::default();
        for (i, span) in spans.iter_mut().enumerate() {
            let key = format!("S{}", i + 1);
            let [lo, hi] = *raw
                .spans
                .get(&key)
                .ok_or_else(|| Error::Input(format!("sidecar is missing span {key}")))?;
            *span = lo..hi;
        }
        if let Some(extra) = raw.spans.keys().find(|k| !matches!(k.as_str(), "S1" | "S2" | "S3" | "S4" | "S5")) {
            return Err(Error::Input(format!("sidecar has unknown span {extra:?}")));
        }
        let len = spans[4].end;
        check_partition(&spans, len)?;
        Ok(Sidecar {
            text_spans: spans,
            image_cls_index: raw.image_cls_index,
        })
    }

    pub fn load(path: &Path) -> Result<Sidecar> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Sidecar::parse(&text).map_err(|e| match e {
            Error::Input(m) => Error::Input(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let spans: BTreeMap<String, [usize; 2]> = self
            .text_spans
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("S{}", i + 1), [s.start, s.end]))
            .collect();
        serde_json::json!({ "spans": spans, "image_cls_index": self.image_cls_index })
    }

    pub fn text_len(&self) -> usize {
        self.text_spans[4].end
    }

    fn generation(&self) -> Range<usize> {
        self.text_spans[4].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeadCounts {
    pub layer: usize,
    pub head: usize,
    /// Arg-max occurrences per segment, index 0 = segment 1.
    pub counts: Vec<u64>,
}

impl HeadCounts {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Proportions per segment, `None` when no query was counted.
    pub fn proportions(&self) -> Option<Vec<f64>> {
        let total = self.total();
        (total > 0).then(|| self.counts.iter().map(|&c| c as f64 / total as f64).collect())
    }
}

/// Segment occurrence counts for every (layer, head), in layer-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentDistribution {
    pub segments: Vec<&'static str>,
    pub cells: Vec<HeadCounts>,
}

impl SegmentDistribution {
    fn zeros(layers: usize, heads: usize, segments: Vec<&'static str>) -> SegmentDistribution {
        let n = segments.len();
        SegmentDistribution {
            cells: (0..layers)
                .flat_map(|layer| (0..heads).map(move |head| (layer, head)))
                .map(|(layer, head)| HeadCounts {
                    layer,
                    head,
                    counts: vec![0; n],
                })
                .collect(),
            segments,
        }
    }

    pub fn cell(&self, layer: usize, head: usize) -> Option<&HeadCounts> {
        self.cells.iter().find(|c| c.layer == layer && c.head == head)
    }

    /// True when no query was counted anywhere.
    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|c| c.total() == 0)
    }

    fn merge(&mut self, other: &SegmentDistribution) -> Result<()> {
        if self.cells.len() != other.cells.len() || self.segments != other.segments {
            return Err(Error::Input(
                "samples disagree on layer/head counts or segment kind".into(),
            ));
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            for (x, y) in a.counts.iter_mut().zip(&b.counts) {
                *x += y;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Analysis {
    Sa,
    XaText,
    XaImg,
}

impl std::str::FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sa" => Ok(Analysis::Sa),
            "xa-text" => Ok(Analysis::XaText),
            "xa-img" => Ok(Analysis::XaImg),
            _ => Err(Error::Input(format!("unknown analysis {s:?}"))),
        }
    }
}

fn expect_axes(t: &AttentionTensor, q: AxisKind, k: AxisKind, what: &str) -> Result<()> {
    if t.query_axis != q || t.key_axis != k {
        return Err(Error::Input(format!(
            "{what} needs {q:?} queries over {k:?} keys, tensor has {:?} over {:?}",
            t.query_axis, t.key_axis
        )));
    }
    Ok(())
}

/// Query rows holding generated tokens: either the generation span of a
/// full-length text axis, or every row when only generated rows were dumped.
fn generated_rows(t: &AttentionTensor, sidecar: &Sidecar) -> Result<Range<usize>> {
    let generation = sidecar.generation();
    if t.queries == sidecar.text_len() {
        Ok(generation)
    } else if t.queries == generation.len() {
        Ok(0..t.queries)
    } else {
        Err(Error::Input(format!(
            "query axis of length {} matches neither the text length {} nor the generation span {}",
            t.queries,
            sidecar.text_len(),
            generation.len()
        )))
    }
}

fn key_len_matches(t: &AttentionTensor, expected: usize) -> Result<()> {
    if t.keys != expected {
        return Err(Error::Input(format!(
            "key axis of length {} does not match expected length {expected}",
            t.keys
        )));
    }
    Ok(())
}

fn count_rows(
    t: &AttentionTensor,
    rows: Range<usize>,
    segmap: &SegmentMap,
) -> Result<SegmentDistribution> {
    let mut dist = SegmentDistribution::zeros(t.layers, t.heads, segmap.segment_names());
    for cell in dist.cells.iter_mut() {
        for q in rows.clone() {
            let seg = max_segment(t.row(cell.layer, cell.head, q), segmap)?;
            cell.counts[seg - 1] += 1;
        }
    }
    Ok(dist)
}

fn sa_text_one(t: &AttentionTensor, sidecar: &Sidecar) -> Result<SegmentDistribution> {
    expect_axes(t, AxisKind::Text, AxisKind::Text, "sa_text")?;
    key_len_matches(t, sidecar.text_len())?;
    let rows = generated_rows(t, sidecar)?;
    count_rows(t, rows, &SegmentMap::text(sidecar.text_spans.clone())?)
}

fn xa_text_one(t: &AttentionTensor, sidecar: &Sidecar) -> Result<SegmentDistribution> {
    let segmap = SegmentMap::text(sidecar.text_spans.clone())?;
    match (t.query_axis, t.key_axis) {
        // Patch-major dump: rows are patches already.
        (AxisKind::Image, AxisKind::Text) => {
            key_len_matches(t, sidecar.text_len())?;
            count_rows(t, 0..t.queries, &segmap)
        }
        // Decoder dump: text queries over image keys, read column-wise.
        (AxisKind::Text, AxisKind::Image) => {
            if t.queries != sidecar.text_len() {
                return Err(Error::Input(format!(
                    "xa_text needs every text position on the query axis ({}), tensor has {}",
                    sidecar.text_len(),
                    t.queries
                )));
            }
            let mut dist = SegmentDistribution::zeros(t.layers, t.heads, segmap.segment_names());
            let mut column = vec![0f32; t.queries];
            for cell in dist.cells.iter_mut() {
                for patch in 0..t.keys {
                    for (q, v) in column.iter_mut().enumerate() {
                        *v = t.get(cell.layer, cell.head, q, patch);
                    }
                    let seg = max_segment(&column, &segmap)?;
                    cell.counts[seg - 1] += 1;
                }
            }
            Ok(dist)
        }
        _ => Err(Error::Input(
            "xa_text needs one text axis and one image axis".into(),
        )),
    }
}

fn xa_img_one(t: &AttentionTensor, sidecar: &Sidecar) -> Result<SegmentDistribution> {
    expect_axes(t, AxisKind::Text, AxisKind::Image, "xa_img")?;
    let rows = generated_rows(t, sidecar)?;
    count_rows(t, rows, &SegmentMap::image(t.keys, sidecar.image_cls_index)?)
}

fn over_dataset(
    samples: &[(AttentionTensor, Sidecar)],
    one: fn(&AttentionTensor, &Sidecar) -> Result<SegmentDistribution>,
) -> Result<SegmentDistribution> {
    let mut iter = samples.iter();
    let (t0, s0) = iter
        .next()
        .ok_or_else(|| Error::contract("attention analysis needs at least one sample"))?;
    let mut total = one(t0, s0)?;
    for (t, s) in iter {
        total.merge(&one(t, s)?)?;
    }
    Ok(total)
}

/// Self-attention of generated tokens over the five text segments, summed
/// over the dataset.
pub fn sa_text_distribution(samples: &[(AttentionTensor, Sidecar)]) -> Result<SegmentDistribution> {
    over_dataset(samples, sa_text_one)
}

/// For each image patch, the text segment receiving its highest
/// cross-attention score.
pub fn xa_text_distribution(samples: &[(AttentionTensor, Sidecar)]) -> Result<SegmentDistribution> {
    over_dataset(samples, xa_text_one)
}

/// Whether generated tokens cross-attend most to the CLS embedding or to a
/// patch embedding.
pub fn xa_img_distribution(samples: &[(AttentionTensor, Sidecar)]) -> Result<SegmentDistribution> {
    over_dataset(samples, xa_img_one)
}

pub fn analyse(analysis: Analysis, samples: &[(AttentionTensor, Sidecar)]) -> Result<SegmentDistribution> {
    match analysis {
        Analysis::Sa => sa_text_distribution(samples),
        Analysis::XaText => xa_text_distribution(samples),
        Analysis::XaImg => xa_img_distribution(samples),
    }
}
