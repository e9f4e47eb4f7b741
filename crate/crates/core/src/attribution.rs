//! Integrated-gradients attribution.
//!
//! [`integrated_gradients`] works over any [`DifferentiableScorer`]: a scalar
//! function of a `positions x dim` embedding matrix with an analytic
//! gradient. The path integral from baseline `x'` to input `x` is
//! approximated with an `m`-step right-endpoint Riemann sum:
//!
//! ```text
//! IG_i = (x_i - x'_i) * (1/m) * sum_{s=1..m} dF/dx_i (x' + (s/m)(x - x'))
//! ```
//!
//! [`BagCaptioner`] is a small linear stand-in for a captioning decoder so
//! the pairwise majority/other-token analysis can run end to end.

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::majority::MajorityReport;
use crate::prompt::{PromptLayout, Segment};
use crate::rng;

pub const DEFAULT_STEPS: usize = 256;

/// A scalar function of an embedded input with an analytic gradient.
///
/// Implementations must be safe to evaluate concurrently.
pub trait DifferentiableScorer: Sync {
    fn dim(&self) -> usize;
    fn forward(&self, x: ArrayView2<'_, f64>) -> f64;
    fn gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64>;
}

/// `F(x) = sum(w * x)`.
#[derive(Debug, Clone)]
pub struct LinearScorer {
    pub weights: Array2<f64>,
}

impl DifferentiableScorer for LinearScorer {
    fn dim(&self) -> usize {
        self.weights.ncols()
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> f64 {
        (&self.weights * &x).sum()
    }

    fn gradient(&self, _x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.weights.clone()
    }
}

/// `F(x) = sum(x^3)`. Its Riemann-sum error shrinks as `O(1/m)`.
#[derive(Debug, Clone, Copy)]
pub struct CubicScorer {
    pub dim: usize,
}

impl DifferentiableScorer for CubicScorer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> f64 {
        x.iter().map(|v| v * v * v).sum()
    }

    fn gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.mapv(|v| 3.0 * v * v)
    }
}

/// Bag-of-embeddings captioner. The score of target token `y` is
/// `dot(w_y, mean_p x_p)`, linear in the embedded input.
///
/// Embeddings are uniform in `[-1, 1)`; output weights are `w_y = e_y +
/// 0.1 * noise`, so a token scores highest when it already appears in the
/// input.
#[derive(Debug, Clone)]
pub struct BagCaptioner {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    embeddings: Array2<f64>,
    output: Array2<f64>,
    target: usize,
}

impl BagCaptioner {
    pub fn new<I, S>(vocab: I, dim: usize, seed: u64) -> Result<BagCaptioner>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut words: Vec<String> = vocab.into_iter().map(Into::into).collect();
        words.sort();
        words.dedup();
        if words.is_empty() || dim == 0 {
            return Err(Error::contract("captioner needs a non-empty vocabulary and dim >= 1"));
        }
        let mut r = rng::seeded(seed);
        let embeddings = Array2::from_shape_fn((words.len(), dim), |_| r.gen_range(-1.0..1.0));
        let noise = Array2::from_shape_fn((words.len(), dim), |_| r.gen_range(-1.0..1.0));
        let output = &embeddings + &(noise * 0.1);
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(BagCaptioner {
            vocab: words,
            index,
            embeddings,
            output,
            target: 0,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn set_target(&mut self, token: &str) -> Result<()> {
        self.target = self.token_index(token)?;
        Ok(())
    }

    pub fn target(&self) -> &str {
        &self.vocab[self.target]
    }

    fn token_index(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::contract(format!("token {token:?} is not in the captioner vocabulary")))
    }

    /// Embedding rows for `tokens`.
    pub fn embed<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((tokens.len(), self.embeddings.ncols()));
        for (p, t) in tokens.iter().enumerate() {
            let i = self.token_index(t.as_ref())?;
            x.row_mut(p).assign(&self.embeddings.row(i));
        }
        Ok(x)
    }
}

impl DifferentiableScorer for BagCaptioner {
    fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> f64 {
        if x.nrows() == 0 {
            return 0.0;
        }
        let mean: Array1<f64> = x.sum_axis(Axis(0)) / x.nrows() as f64;
        mean.dot(&self.output.row(self.target))
    }

    fn gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        if x.nrows() > 0 {
            let w = self.output.row(self.target).to_owned() / x.nrows() as f64;
            for mut row in g.rows_mut() {
                row.assign(&w);
            }
        }
        g
    }
}

/// Largest norm-wise relative error between the analytic gradient and
/// central finite differences of `forward` over `points`.
pub fn gradient_check<S: DifferentiableScorer + ?Sized>(
    scorer: &S,
    points: &[Array2<f64>],
    eps: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for x in points {
        let g = scorer.gradient(x.view());
        let mut fd = Array2::zeros(x.raw_dim());
        let mut probe = x.clone();
        for idx in ndarray::indices(x.raw_dim()) {
            let orig = probe[idx];
            probe[idx] = orig + eps;
            let up = scorer.forward(probe.view());
            probe[idx] = orig - eps;
            let down = scorer.forward(probe.view());
            probe[idx] = orig;
            fd[idx] = (up - down) / (2.0 * eps);
        }
        let diff = (&g - &fd).iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Per-position, per-dimension integrated gradients from `baseline` to `x`.
pub fn integrated_gradients<S: DifferentiableScorer + ?Sized>(
    scorer: &S,
    x: ArrayView2<'_, f64>,
    baseline: ArrayView2<'_, f64>,
    steps: usize,
) -> Result<Array2<f64>> {
    if x.shape() != baseline.shape() {
        return Err(Error::contract(format!(
            "input shape {:?} differs from baseline shape {:?}",
            x.shape(),
            baseline.shape()
        )));
    }
    if x.ncols() != scorer.dim() {
        return Err(Error::contract(format!(
            "input width {} differs from scorer dim {}",
            x.ncols(),
            scorer.dim()
        )));
    }
    if steps == 0 {
        return Err(Error::contract("integrated gradients needs at least one step"));
    }
    let delta = &x - &baseline;
    let grads: Vec<Array2<f64>> = (1..=steps)
        .into_par_iter()
        .map(|s| {
            let alpha = s as f64 / steps as f64;
            let point = &baseline + &(&delta * alpha);
            let g = scorer.gradient(point.view());
            if g.shape() != x.shape() || g.iter().any(|v| !v.is_finite()) {
                Err(Error::Numeric(format!(
                    "non-finite or misshapen gradient at step {s} of {steps}"
                )))
            } else {
                Ok(g)
            }
        })
        .collect::<Result<_>>()?;
    // Fixed summation order keeps results independent of thread scheduling.
    let mut total = Array2::zeros(x.raw_dim());
    for g in &grads {
        total += g;
    }
    Ok(delta * total / steps as f64)
}

/// Per-position scores: sum over the embedding dimension.
pub fn token_attribution(attr: ArrayView2<'_, f64>) -> Vec<f64> {
    attr.rows().into_iter().map(|r| r.sum()).collect()
}

/// Generation steps x input positions, aligned to a layout.
///
/// Row `t` scores the prompt plus the first `t` generated tokens; columns at
/// or beyond `prompt_len + t` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    pub values: Array2<f64>,
    pub layout: PromptLayout,
}

impl AttributionMatrix {
    pub fn new(values: Array2<f64>, layout: PromptLayout) -> Result<AttributionMatrix> {
        if values.nrows() != layout.generated().len() || values.ncols() != layout.len() {
            return Err(Error::contract(format!(
                "attribution shape {:?} does not match {} steps x {} positions",
                values.shape(),
                layout.generated().len(),
                layout.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite attribution value".into()));
        }
        Ok(AttributionMatrix { values, layout })
    }

    pub fn steps(&self) -> usize {
        self.values.nrows()
    }
}

/// Attributes every generated token of `layout` to its preceding input with
/// integrated gradients on `captioner`, using an all-zero baseline.
pub fn attribute_generation(
    captioner: &BagCaptioner,
    layout: &PromptLayout,
    steps: usize,
) -> Result<AttributionMatrix> {
    let prompt_len = layout.prompt_len();
    let generated = layout.generated();
    let mut values = Array2::zeros((generated.len(), layout.len()));
    let mut scorer = captioner.clone();
    for (t, target) in generated.iter().enumerate() {
        scorer.set_target(target)?;
        let input = &layout.tokens[..prompt_len + t];
        let x = scorer.embed(input)?;
        let baseline = Array2::zeros(x.raw_dim());
        let ig = integrated_gradients(&scorer, x.view(), baseline.view(), steps)?;
        for (p, v) in token_attribution(ig.view()).into_iter().enumerate() {
            values[[t, p]] = v;
        }
    }
    AttributionMatrix::new(values, layout.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BucketCell {
    pub count: usize,
    /// `None` for an empty cell.
    pub mean_signed: Option<f64>,
    pub mean_abs: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    count: usize,
    signed: f64,
    abs: f64,
}

impl Acc {
    fn add(&mut self, v: f64) {
        self.count += 1;
        self.signed += v;
        self.abs += v.abs();
    }

    fn cell(self) -> BucketCell {
        let n = self.count as f64;
        BucketCell {
            count: self.count,
            mean_signed: (self.count > 0).then(|| self.signed / n),
            mean_abs: (self.count > 0).then(|| self.abs / n),
        }
    }
}

/// Pairwise attribution between retrieved-caption positions and generated
/// tokens, split by whether the retrieved token is a majority token (MT) or
/// not (OT), and by whether the generated token occurs in the retrieved
/// captions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PairwiseBuckets {
    pub mt_present: BucketCell,
    pub mt_absent: BucketCell,
    pub ot_present: BucketCell,
    pub ot_absent: BucketCell,
}

pub fn pairwise_buckets(
    attr: &AttributionMatrix,
    report: &MajorityReport,
    generated: &[String],
) -> Result<PairwiseBuckets> {
    if generated != attr.layout.generated() || generated.len() != attr.steps() {
        return Err(Error::contract(
            "generated tokens are not aligned with the attribution matrix",
        ));
    }
    let (mut mtp, mut mta, mut otp, mut ota) = (Acc::default(), Acc::default(), Acc::default(), Acc::default());
    let retrieval = attr.layout.span(Segment::Retrieval);
    for (t, gen) in generated.iter().enumerate() {
        let present = report.contains_retrieved(gen);
        for col in retrieval.clone() {
            let v = attr.values[[t, col]];
            let mt = report.is_majority(&attr.layout.tokens[col]);
            match (mt, present) {
                (true, true) => mtp.add(v),
                (true, false) => mta.add(v),
                (false, true) => otp.add(v),
                (false, false) => ota.add(v),
            }
        }
    }
    Ok(PairwiseBuckets {
        mt_present: mtp.cell(),
        mt_absent: mta.cell(),
        ot_present: otp.cell(),
        ot_absent: ota.cell(),
    })
}

/// A heatmap as stored on disk: column labels, row labels, values.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub columns: Vec<String>,
    pub rows: Vec<String>,
    pub values: Array2<f64>,
}

impl From<&AttributionMatrix> for Heatmap {
    fn from(attr: &AttributionMatrix) -> Heatmap {
        Heatmap {
            columns: attr.layout.tokens.clone(),
            rows: attr.layout.generated().to_vec(),
            values: attr.values.clone(),
        }
    }
}

/// Writes the heatmap CSV: a header of input tokens after an empty corner
/// cell, then one row per step labelled with its generated token. Values use
/// six decimals. Lines in `comments` are written first, prefixed with `# `.
pub fn write_heatmap<W: Write>(heatmap: &Heatmap, comments: &[String], out: W) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<heatmap>", e);
    let mut out = out;
    for c in comments {
        writeln!(out, "# {c}").map_err(io)?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let csv_err = |e: csv::Error| Error::Input(format!("heatmap CSV: {e}"));
    let mut header = vec![String::new()];
    header.extend(heatmap.columns.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (label, row) in heatmap.rows.iter().zip(heatmap.values.rows()) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn export_heatmap(attr: &AttributionMatrix, comments: &[String]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_heatmap(&Heatmap::from(attr), comments, &mut buf)?;
    Ok(buf)
}

/// Parses a heatmap CSV, skipping leading `#` comment lines.
pub fn read_heatmap<R: Read>(mut input: R) -> Result<Heatmap> {
    let mut text = String::new();
    input
        .read_to_string(&mut text)
        .map_err(|e| Error::io("<heatmap>", e))?;
    let mut body = text.as_str();
    while body.starts_with('#') {
        body = body.find('\n').map_or("", |i| &body[i + 1..]);
    }
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(body.as_bytes());
    let mut records = r.records();
    let bad = |e: csv::Error| Error::Input(format!("heatmap CSV: {e}"));
    let header = records
        .next()
        .ok_or_else(|| Error::Input("heatmap CSV is empty".into()))?
        .map_err(bad)?;
    let columns: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut rows = Vec::new();
    let mut flat = Vec::new();
    for rec in records {
        let rec = rec.map_err(bad)?;
        rows.push(rec.get(0).unwrap_or_default().to_owned());
        for cell in rec.iter().skip(1) {
            flat.push(
                cell.parse::<f64>()
                    .map_err(|e| Error::Input(format!("heatmap value {cell:?}: {e}")))?,
            );
        }
    }
    let values = Array2::from_shape_vec((rows.len(), columns.len()), flat)
        .map_err(|e| Error::Input(format!("heatmap shape: {e}")))?;
    Ok(Heatmap { columns, rows, values })
}
