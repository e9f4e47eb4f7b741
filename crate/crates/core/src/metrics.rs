//! Corpus-level BLEU-4 and CIDEr-D over word tokens.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::text::Caption;

pub const MAX_N: usize = 4;
/// Standard deviation of the CIDEr-D length penalty.
pub const CIDER_SIGMA: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub candidate: Caption,
    pub references: Vec<Caption>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    samples: Vec<Sample>,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>) -> Result<Corpus> {
        if let Some(i) = samples.iter().position(|s| s.references.is_empty()) {
            return Err(Error::contract(format!("sample {i} has no references")));
        }
        Ok(Corpus { samples })
    }

    pub fn from_raw<S: AsRef<str>>(pairs: &[(S, Vec<S>)]) -> Result<Corpus> {
        Corpus::new(
            pairs
                .iter()
                .map(|(c, refs)| Sample {
                    candidate: Caption::new(c.as_ref()),
                    references: refs.iter().map(|r| Caption::new(r.as_ref())).collect(),
                })
                .collect(),
        )
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn require_non_empty(&self) -> Result<()> {
        if self.samples.is_empty() {
            Err(Error::contract("metric needs a non-empty corpus"))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricScore {
    pub corpus_score: f64,
    pub per_sample: Vec<f64>,
}

/// N-gram counts of order `n`, keyed by the space-joined n-gram.
fn ngrams(c: &Caption, n: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    if c.tokens.len() >= n {
        for w in c.tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(|t| t.as_str()).collect();
            *out.entry(key.join(" ")).or_default() += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
struct BleuStats {
    clipped: [usize; MAX_N],
    total: [usize; MAX_N],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn of(sample: &Sample) -> BleuStats {
        let mut s = BleuStats {
            cand_len: sample.candidate.len(),
            ..BleuStats::default()
        };
        let c = s.cand_len;
        // closest reference length, ties to the shorter one
        s.ref_len = sample
            .references
            .iter()
            .map(Caption::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for n in 1..=MAX_N {
            let cand = ngrams(&sample.candidate, n);
            let mut max_ref: BTreeMap<&str, usize> = BTreeMap::new();
            let ref_grams: Vec<BTreeMap<String, usize>> =
                sample.references.iter().map(|r| ngrams(r, n)).collect();
            for g in &ref_grams {
                for (k, &v) in g {
                    let e = max_ref.entry(k.as_str()).or_default();
                    *e = (*e).max(v);
                }
            }
            s.clipped[n - 1] = cand
                .iter()
                .map(|(k, &v)| v.min(max_ref.get(k.as_str()).copied().unwrap_or(0)))
                .sum();
            s.total[n - 1] = c.saturating_sub(n - 1);
        }
        s
    }

    fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_N {
            self.clipped[n] += o.clipped[n];
            self.total[n] += o.total[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_N {
            if self.clipped[n] == 0 || self.total[n] == 0 {
                return 0.0;
            }
            log_sum += (self.clipped[n] as f64 / self.total[n] as f64).ln() / MAX_N as f64;
        }
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * log_sum.exp()
    }
}

/// Corpus BLEU-4 without smoothing. `per_sample` holds sentence-level scores
/// computed with the same formula.
pub fn bleu4(corpus: &Corpus) -> Result<MetricScore> {
    corpus.require_non_empty()?;
    let stats: Vec<BleuStats> = corpus.samples.iter().map(BleuStats::of).collect();
    let mut total = BleuStats::default();
    for s in &stats {
        total.add(s);
    }
    Ok(MetricScore {
        corpus_score: total.score(),
        per_sample: stats.iter().map(BleuStats::score).collect(),
    })
}

/// Image-level document frequencies of reference n-grams.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DocumentFrequency {
    pub counts: BTreeMap<String, f64>,
    /// Number of images the frequencies were counted over.
    pub images: usize,
}

impl DocumentFrequency {
    /// Counts each n-gram (n = 1..4) once per image over its reference set.
    pub fn from_corpus(corpus: &Corpus) -> DocumentFrequency {
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        for s in &corpus.samples {
            let mut seen = BTreeSet::new();
            for r in &s.references {
                for n in 1..=MAX_N {
                    seen.extend(ngrams(r, n).into_keys());
                }
            }
            for g in seen {
                *counts.entry(g).or_default() += 1.0;
            }
        }
        DocumentFrequency {
            counts,
            images: corpus.samples.len(),
        }
    }

    fn idf(&self, gram: &str) -> f64 {
        let df = self.counts.get(gram).copied().unwrap_or(0.0).max(1.0);
        (self.images as f64).ln() - df.ln()
    }
}

struct TfIdf {
    vecs: Vec<BTreeMap<String, f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf(c: &Caption, df: &DocumentFrequency) -> TfIdf {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let v: BTreeMap<String, f64> = ngrams(c, n)
            .into_iter()
            .map(|(g, tf)| {
                let w = tf as f64 * df.idf(&g);
                (g, w)
            })
            .collect();
        norms.push(v.values().map(|w| w * w).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        len: c.len(),
    }
}

fn cider_sim(hyp: &TfIdf, reference: &TfIdf) -> [f64; MAX_N] {
    let delta = hyp.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut out = [0.0; MAX_N];
    for (n, slot) in out.iter_mut().enumerate() {
        let (hn, rn) = (hyp.norms[n], reference.norms[n]);
        if hn == 0.0 || rn == 0.0 {
            continue;
        }
        let dot: f64 = hyp.vecs[n]
            .iter()
            .filter_map(|(g, &h)| reference.vecs[n].get(g).map(|&r| h.min(r) * r))
            .sum();
        *slot = dot / (hn * rn) * penalty;
    }
    out
}

/// CIDEr-D of one candidate against its references under `df`.
pub fn cider_d_sample(sample: &Sample, df: &DocumentFrequency) -> f64 {
    let hyp = tfidf(&sample.candidate, df);
    let mut total = 0.0;
    for r in &sample.references {
        let sims = cider_sim(&hyp, &tfidf(r, df));
        total += sims.iter().sum::<f64>() / MAX_N as f64;
    }
    10.0 * total / sample.references.len() as f64
}

/// CIDEr-D with document frequencies supplied by the caller.
pub fn cider_d_with_df(corpus: &Corpus, df: &DocumentFrequency) -> Result<MetricScore> {
    corpus.require_non_empty()?;
    let per_sample: Vec<f64> = corpus.samples.iter().map(|s| cider_d_sample(s, df)).collect();
    let corpus_score = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(MetricScore {
        corpus_score,
        per_sample,
    })
}

/// CIDEr-D with frequencies counted over the corpus references. A corpus of
/// one image has every IDF equal to zero and therefore scores 0.
pub fn cider_d(corpus: &Corpus) -> Result<MetricScore> {
    cider_d_with_df(corpus, &DocumentFrequency::from_corpus(corpus))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cider,
    Bleu4,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cider => "cider",
            Metric::Bleu4 => "bleu4",
        }
    }

    pub fn score(self, corpus: &Corpus) -> Result<MetricScore> {
        match self {
            Metric::Cider => cider_d(corpus),
            Metric::Bleu4 => bleu4(corpus),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cider" => Ok(Metric::Cider),
            "bleu4" => Ok(Metric::Bleu4),
            _ => Err(Error::Input(format!("unknown metric {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(pairs: &[(&str, &[&str])]) -> Corpus {
        Corpus::from_raw(
            &pairs
                .iter()
                .map(|(c, r)| (*c, r.to_vec()))
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn identical() -> Corpus {
        corpus(&[
            ("a man riding a brown horse", &["a man riding a brown horse"]),
            ("two dogs play with a red frisbee", &["two dogs play with a red frisbee"]),
            ("a plate of food on a wooden table", &["a plate of food on a wooden table"]),
        ])
    }

    #[test]
    fn perfect_match() {
        let c = identical();
        assert!((bleu4(&c).unwrap().corpus_score - 1.0).abs() < 1e-12);
        let cider = cider_d(&c).unwrap();
        assert!((cider.corpus_score - 10.0).abs() < 1e-6);
        assert!(cider.per_sample.iter().all(|s| (s - 10.0).abs() < 1e-6));
    }

    #[test]
    fn zero_overlap() {
        let c = corpus(&[
            ("zebra grazing tall grass", &["a man riding a brown horse"]),
            ("yellow taxi cab street", &["two dogs play with a red frisbee"]),
        ]);
        assert_eq!(bleu4(&c).unwrap().corpus_score, 0.0);
        assert_eq!(cider_d(&c).unwrap().corpus_score, 0.0);
    }

    #[test]
    fn brevity_penalty_closest_reference() {
        // candidate of 4 tokens, references of 3 and 5 tokens: tie -> 3, no penalty
        let s = Sample {
            candidate: Caption::new("a b c d"),
            references: vec![Caption::new("a b c"), Caption::new("a b c d e")],
        };
        assert_eq!(BleuStats::of(&s).ref_len, 3);
        let c = corpus(&[("a b c d", &["a b c d e f g h"])]);
        let expected = (1.0f64 - 8.0 / 4.0).exp();
        assert!((bleu4(&c).unwrap().corpus_score - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_corpus_and_missing_references() {
        let empty = Corpus::new(vec![]).unwrap();
        assert!(bleu4(&empty).is_err());
        assert!(cider_d(&empty).is_err());
        assert!(Corpus::new(vec![Sample {
            candidate: Caption::new("a"),
            references: vec![]
        }])
        .is_err());
    }

    #[test]
    fn single_image_corpus_scores_zero() {
        let c = corpus(&[("a man riding a horse", &["a man riding a horse"])]);
        assert_eq!(cider_d(&c).unwrap().corpus_score, 0.0);
    }

    #[test]
    fn reference_order_and_duplication_invariance() {
        let c = corpus(&[
            ("a man rides a horse", &["a man riding a horse", "a person on a horse"]),
            ("a dog with a frisbee", &["a dog catches a frisbee", "a brown dog in a park"]),
            ("a bowl of soup", &["a bowl of hot soup", "soup in a white bowl"]),
        ]);
        let swapped = corpus(&[
            ("a man rides a horse", &["a person on a horse", "a man riding a horse"]),
            ("a dog with a frisbee", &["a brown dog in a park", "a dog catches a frisbee"]),
            ("a bowl of soup", &["soup in a white bowl", "a bowl of hot soup"]),
        ]);
        let doubled = |c: &Corpus| {
            let mut d = c.samples().to_vec();
            d.extend(c.samples().iter().cloned());
            Corpus::new(d).unwrap()
        };
        // candidates built from reference words only, so no gram hits the df floor
        let seen = corpus(&[
            ("a man riding a horse", &["a man riding a horse", "a person on a horse"]),
            ("a dog catches a frisbee", &["a dog catches a frisbee", "a brown dog in a park"]),
            ("a bowl of hot soup", &["a bowl of hot soup", "soup in a white bowl"]),
        ]);
        let c_seen = cider_d(&seen).unwrap().corpus_score;
        assert!((c_seen - cider_d(&doubled(&seen)).unwrap().corpus_score).abs() < 1e-12);
        for m in [Metric::Cider, Metric::Bleu4] {
            let a = m.score(&c).unwrap().corpus_score;
            assert!((a - m.score(&swapped).unwrap().corpus_score).abs() < 1e-12);
            if m == Metric::Bleu4 {
                let d = m.score(&doubled(&c)).unwrap().corpus_score;
                assert!((a - d).abs() < 1e-12);
                let b = m.score(&seen).unwrap().corpus_score;
                assert!(b > 0.0);
                assert!((b - m.score(&doubled(&seen)).unwrap().corpus_score).abs() < 1e-12);
            } else {
                assert!(a > 0.0);
            }
        }
    }
}
