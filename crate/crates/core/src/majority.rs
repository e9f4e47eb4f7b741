//! Majority tokens and the statistics built on them.
//!
//! A token is a majority token of a context of `K` captions when it occurs
//! in strictly more than `K/2` of them and is not a stop word. Counting uses
//! set semantics per caption.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategy::RetrievalContext;
use crate::text::{Caption, GeneratedCaption, StopWordList};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MajorityReport {
    /// Number of captions in the context.
    pub k: usize,
    /// Captions containing each token. Stop words are kept here for
    /// diagnostics; they never enter `majority`.
    pub counts: BTreeMap<String, usize>,
    pub majority: BTreeSet<String>,
}

impl MajorityReport {
    pub fn from_captions<'a, I>(captions: I, stopwords: &StopWordList) -> MajorityReport
    where
        I: IntoIterator<Item = &'a Caption>,
    {
        let mut k = 0;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for caption in captions {
            k += 1;
            for token in caption.token_set() {
                *counts.entry(token.to_owned()).or_default() += 1;
            }
        }
        let majority = counts
            .iter()
            .filter(|(t, &c)| 2 * c > k && !stopwords.contains(t))
            .map(|(t, _)| t.clone())
            .collect();
        MajorityReport { k, counts, majority }
    }

    pub fn is_majority(&self, token: &str) -> bool {
        self.majority.contains(token)
    }

    /// Union of tokens over the context's captions.
    pub fn retrieved_tokens(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    pub fn contains_retrieved(&self, token: &str) -> bool {
        self.counts.contains_key(token)
    }
}

pub fn majority_report(ctx: &RetrievalContext, stopwords: &StopWordList) -> MajorityReport {
    MajorityReport::from_captions(ctx.entries.iter().map(|e| &e.caption), stopwords)
}

fn aligned(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::contract(format!("{what}: {a} reports but {b} aligned items")))
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VoteCounts {
    pub samples_total: usize,
    /// Samples whose context has a non-empty majority set.
    pub samples_with_majority: usize,
    /// Samples whose output contains at least one majority token.
    pub samples_hit: usize,
    /// `samples_hit / samples_with_majority`; `None` when no sample had a
    /// majority token.
    pub p_majority_vote: Option<f64>,
}

impl VoteCounts {
    fn add(&mut self, indicator: Option<bool>) {
        self.samples_total += 1;
        if let Some(hit) = indicator {
            self.samples_with_majority += 1;
            self.samples_hit += usize::from(hit);
        }
        self.p_majority_vote = ratio(self.samples_hit, self.samples_with_majority);
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OverlapStats {
    #[serde(flatten)]
    pub overall: VoteCounts,
    /// Breakdown by context size K.
    pub per_k: BTreeMap<usize, VoteCounts>,
    /// Per-sample indicator; `None` for samples without majority tokens.
    pub indicators: Vec<Option<bool>>,
}

impl OverlapStats {
    pub fn p_majority_vote(&self) -> Option<f64> {
        self.overall.p_majority_vote
    }
}

/// Per-sample indicator: `None` when the majority set is empty, otherwise
/// whether any majority token appears in `output`.
pub fn majority_indicator(report: &MajorityReport, output: &GeneratedCaption) -> Option<bool> {
    if report.majority.is_empty() {
        return None;
    }
    let out = output.token_set();
    Some(report.majority.iter().any(|t| out.contains(t.as_str())))
}

pub fn majority_vote_probability(
    reports: &[MajorityReport],
    outputs: &[GeneratedCaption],
) -> Result<OverlapStats> {
    aligned(reports.len(), outputs.len(), "majority vote probability")?;
    let mut stats = OverlapStats::default();
    for (report, output) in reports.iter().zip(outputs) {
        let ind = majority_indicator(report, output);
        stats.overall.add(ind);
        stats.per_k.entry(report.k).or_default().add(ind);
        stats.indicators.push(ind);
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceOverlapRow {
    pub samples_total: usize,
    pub samples_with_majority: usize,
    /// Samples where at least one majority token is in some reference.
    pub any_hits: usize,
    /// Samples where every majority token is in some reference.
    pub all_hits: usize,
    pub frac_any: Option<f64>,
    pub frac_all: Option<f64>,
}

impl ReferenceOverlapRow {
    fn add(&mut self, hit: Option<(bool, bool)>) {
        self.samples_total += 1;
        if let Some((any, all)) = hit {
            self.samples_with_majority += 1;
            self.any_hits += usize::from(any);
            self.all_hits += usize::from(all);
        }
        self.frac_any = ratio(self.any_hits, self.samples_with_majority);
        self.frac_all = ratio(self.all_hits, self.samples_with_majority);
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceOverlap {
    pub overall: ReferenceOverlapRow,
    pub per_k: BTreeMap<usize, ReferenceOverlapRow>,
}

/// How often majority tokens of the retrieved captions also occur in the
/// ground-truth references. Both the any-token and all-tokens readings are
/// reported.
pub fn overlap_with_references(
    reports: &[MajorityReport],
    references: &[Vec<Caption>],
) -> Result<ReferenceOverlap> {
    aligned(reports.len(), references.len(), "reference overlap")?;
    let mut out = ReferenceOverlap::default();
    for (report, refs) in reports.iter().zip(references) {
        let hit = (!report.majority.is_empty()).then(|| {
            let ref_tokens: BTreeSet<&str> = refs.iter().flat_map(|c| c.token_set()).collect();
            let present = |t: &String| ref_tokens.contains(t.as_str());
            (
                report.majority.iter().any(present),
                report.majority.iter().all(present),
            )
        });
        out.overall.add(hit);
        out.per_k.entry(report.k).or_default().add(hit);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CopyFractions {
    /// Mean fraction of non-stop output tokens found in the retrieved captions.
    pub from_retrieved: Option<f64>,
    /// Mean fraction of non-stop output tokens that are majority tokens.
    pub from_majority: Option<f64>,
    pub samples_counted: usize,
    /// Samples whose output has no non-stop tokens.
    pub samples_skipped: usize,
}

/// Per-sample `(from_retrieved, from_majority)`, or `None` when the output
/// has no non-stop tokens. Fractions are over token occurrences.
pub fn copied_fractions_for(
    report: &MajorityReport,
    output: &GeneratedCaption,
    stopwords: &StopWordList,
) -> Option<(f64, f64)> {
    let content: Vec<&str> = output
        .tokens
        .iter()
        .map(|t| t.as_str())
        .filter(|t| !stopwords.contains(t))
        .collect();
    if content.is_empty() {
        return None;
    }
    let n = content.len() as f64;
    let retrieved = content.iter().filter(|t| report.contains_retrieved(t)).count() as f64;
    let majority = content.iter().filter(|t| report.is_majority(t)).count() as f64;
    Some((retrieved / n, majority / n))
}

pub fn copied_token_fraction(
    ctxs: &[RetrievalContext],
    outputs: &[GeneratedCaption],
    stopwords: &StopWordList,
) -> Result<CopyFractions> {
    aligned(ctxs.len(), outputs.len(), "copied token fraction")?;
    let mut out = CopyFractions::default();
    let (mut sum_r, mut sum_m) = (0.0, 0.0);
    for (ctx, output) in ctxs.iter().zip(outputs) {
        let report = majority_report(ctx, stopwords);
        match copied_fractions_for(&report, output, stopwords) {
            Some((r, m)) => {
                out.samples_counted += 1;
                sum_r += r;
                sum_m += m;
            }
            None => out.samples_skipped += 1,
        }
    }
    out.from_retrieved = (out.samples_counted > 0).then(|| sum_r / out.samples_counted as f64);
    out.from_majority = (out.samples_counted > 0).then(|| sum_m / out.samples_counted as f64);
    Ok(out)
}

/// Number of samples per majority-set size.
pub fn majority_count_histogram(reports: &[MajorityReport]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for r in reports {
        *hist.entry(r.majority.len()).or_default() += 1;
    }
    hist
}
