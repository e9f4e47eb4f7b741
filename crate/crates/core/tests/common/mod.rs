//! Independent reference implementations used by the integration tests.
//!
//! These are written from the definitions, with plain loops and linear
//! scans, and share no code with the library beyond its data types.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ragscope::attention::{AttentionTensor, AxisKind, Sidecar};
use ragscope::text::Caption;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const VOCAB: [&str; 14] = [
    "a", "the", "of", "on", "dog", "cat", "park", "red", "ball", "man", "horse", "tree", "runs", "big",
];

pub const ORACLE_STOPWORDS: [&str; 4] = ["a", "the", "of", "on"];

pub fn random_caption(r: &mut ChaCha8Rng, max_len: usize) -> Caption {
    let len = r.gen_range(0..=max_len);
    let words: Vec<&str> = (0..len).map(|_| VOCAB[r.gen_range(0..VOCAB.len())]).collect();
    Caption::new(words.join(" "))
}

fn has(c: &Caption, word: &str) -> bool {
    c.tokens.iter().any(|t| t.as_str() == word)
}

fn is_stop(word: &str) -> bool {
    ORACLE_STOPWORDS.contains(&word)
}

/// Number of captions containing `word`, by linear scan.
pub fn oracle_count(ctx: &[Caption], word: &str) -> usize {
    ctx.iter().filter(|c| has(c, word)).count()
}

pub fn oracle_majority(ctx: &[Caption]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for c in ctx {
        for t in &c.tokens {
            let w = t.as_str();
            if !is_stop(w) && oracle_count(ctx, w) * 2 > ctx.len() {
                out.insert(w.to_string());
            }
        }
    }
    out
}

/// (hits, samples with a majority token)
pub fn oracle_vote(ctxs: &[Vec<Caption>], outputs: &[Caption]) -> (usize, usize) {
    let (mut hits, mut with) = (0, 0);
    for (ctx, out) in ctxs.iter().zip(outputs) {
        let m = oracle_majority(ctx);
        if m.is_empty() {
            continue;
        }
        with += 1;
        if m.iter().any(|w| has(out, w)) {
            hits += 1;
        }
    }
    (hits, with)
}

/// (any hits, all hits, samples with a majority token)
pub fn oracle_reference_overlap(ctxs: &[Vec<Caption>], refs: &[Vec<Caption>]) -> (usize, usize, usize) {
    let (mut any, mut all, mut with) = (0, 0, 0);
    for (ctx, rs) in ctxs.iter().zip(refs) {
        let m = oracle_majority(ctx);
        if m.is_empty() {
            continue;
        }
        with += 1;
        let in_refs = |w: &String| rs.iter().any(|r| has(r, w));
        if m.iter().any(in_refs) {
            any += 1;
        }
        if m.iter().all(in_refs) {
            all += 1;
        }
    }
    (any, all, with)
}

/// Per-sample (from retrieved, from majority) over non-stop occurrences.
pub fn oracle_copied(ctx: &[Caption], out: &Caption) -> Option<(f64, f64)> {
    let m = oracle_majority(ctx);
    let mut n = 0usize;
    let mut retrieved = 0usize;
    let mut majority = 0usize;
    for t in &out.tokens {
        let w = t.as_str();
        if is_stop(w) {
            continue;
        }
        n += 1;
        if ctx.iter().any(|c| has(c, w)) {
            retrieved += 1;
        }
        if m.contains(w) {
            majority += 1;
        }
    }
    (n > 0).then(|| (retrieved as f64 / n as f64, majority as f64 / n as f64))
}

pub fn oracle_histogram(ctxs: &[Vec<Caption>]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for ctx in ctxs {
        *h.entry(oracle_majority(ctx).len()).or_insert(0) += 1;
    }
    h
}

/// A random partition of `0..len` into five half-open spans.
pub fn random_spans(r: &mut ChaCha8Rng, len: usize) -> [std::ops::Range<usize>; 5] {
    let mut cuts: Vec<usize> = (0..4).map(|_| r.gen_range(0..=len)).collect();
    cuts.sort_unstable();
    [
        0..cuts[0],
        cuts[0]..cuts[1],
        cuts[1]..cuts[2],
        cuts[2]..cuts[3],
        cuts[3]..len,
    ]
}

/// Scores drawn from a coarse grid so ties are common.
pub fn random_tensor(r: &mut ChaCha8Rng, shape: [usize; 4], q: AxisKind, k: AxisKind) -> AttentionTensor {
    let n = shape.iter().product();
    let scores = (0..n).map(|_| r.gen_range(0u8..16) as f32 / 16.0).collect();
    AttentionTensor::new(shape, q, k, scores).unwrap()
}

fn first_max(values: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

fn span_index(spans: &[std::ops::Range<usize>; 5], pos: usize) -> usize {
    for (i, s) in spans.iter().enumerate() {
        if s.start <= pos && pos < s.end {
            return i;
        }
    }
    panic!("position {pos} outside every span");
}

/// counts[layer][head][segment] for the text self-attention analysis.
pub fn oracle_sa(t: &AttentionTensor, side: &Sidecar) -> Vec<Vec<Vec<u64>>> {
    let mut out = vec![vec![vec![0u64; 5]; t.heads]; t.layers];
    let gen = side.text_spans[4].clone();
    let rows: Vec<usize> = if t.queries == side.text_len() { gen.collect() } else { (0..t.queries).collect() };
    for l in 0..t.layers {
        for h in 0..t.heads {
            for &q in &rows {
                let row: Vec<f32> = (0..t.keys).map(|z| t.get(l, h, q, z)).collect();
                out[l][h][span_index(&side.text_spans, first_max(&row))] += 1;
            }
        }
    }
    out
}

/// Text-segment arg-max per image patch. Handles both axis layouts.
pub fn oracle_xa_text(t: &AttentionTensor, side: &Sidecar) -> Vec<Vec<Vec<u64>>> {
    let mut out = vec![vec![vec![0u64; 5]; t.heads]; t.layers];
    for l in 0..t.layers {
        for h in 0..t.heads {
            if t.query_axis == AxisKind::Image {
                for q in 0..t.queries {
                    let row: Vec<f32> = (0..t.keys).map(|z| t.get(l, h, q, z)).collect();
                    out[l][h][span_index(&side.text_spans, first_max(&row))] += 1;
                }
            } else {
                for z in 0..t.keys {
                    let col: Vec<f32> = (0..t.queries).map(|q| t.get(l, h, q, z)).collect();
                    out[l][h][span_index(&side.text_spans, first_max(&col))] += 1;
                }
            }
        }
    }
    out
}

/// CLS-vs-patch arg-max per generated token: index 0 = cls, 1 = patches.
pub fn oracle_xa_img(t: &AttentionTensor, side: &Sidecar) -> Vec<Vec<Vec<u64>>> {
    let mut out = vec![vec![vec![0u64; 2]; t.heads]; t.layers];
    let gen = side.text_spans[4].clone();
    let rows: Vec<usize> = if t.queries == side.text_len() { gen.collect() } else { (0..t.queries).collect() };
    for l in 0..t.layers {
        for h in 0..t.heads {
            for &q in &rows {
                let row: Vec<f32> = (0..t.keys).map(|z| t.get(l, h, q, z)).collect();
                let seg = if first_max(&row) == side.image_cls_index { 0 } else { 1 };
                out[l][h][seg] += 1;
            }
        }
    }
    out
}

pub fn distribution_counts(d: &ragscope::attention::SegmentDistribution, layers: usize, heads: usize) -> Vec<Vec<Vec<u64>>> {
    let mut out = vec![vec![Vec::new(); heads]; layers];
    for c in &d.cells {
        out[c.layer][c.head] = c.counts.clone();
    }
    out
}

fn grams(c: &Caption, n: usize) -> Vec<Vec<String>> {
    let toks: Vec<String> = c.tokens.iter().map(|t| t.as_str().to_string()).collect();
    if toks.len() < n {
        return Vec::new();
    }
    (0..=toks.len() - n).map(|i| toks[i..i + n].to_vec()).collect()
}

fn count_of(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

/// Corpus BLEU-4, no smoothing, closest reference length (ties shorter).
pub fn oracle_bleu(corpus: &[(Caption, Vec<Caption>)]) -> f64 {
    let mut matched = [0usize; 4];
    let mut possible = [0usize; 4];
    let mut c_len = 0usize;
    let mut r_len = 0usize;
    for (cand, refs) in corpus {
        let c = cand.tokens.len();
        c_len += c;
        let mut best = refs[0].tokens.len();
        for r in refs {
            let l = r.tokens.len();
            let d = (l as i64 - c as i64).abs();
            let bd = (best as i64 - c as i64).abs();
            if d < bd || (d == bd && l < best) {
                best = l;
            }
        }
        r_len += best;
        for n in 1..=4 {
            let cg = grams(cand, n);
            possible[n - 1] += cg.len();
            for g in distinct(&cg) {
                let mut max_ref = 0;
                for r in refs {
                    max_ref = max_ref.max(count_of(&grams(r, n), &g));
                }
                matched[n - 1] += count_of(&cg, &g).min(max_ref);
            }
        }
    }
    if matched.contains(&0) {
        return 0.0;
    }
    let mut p = 1.0f64;
    for n in 0..4 {
        p *= matched[n] as f64 / possible[n] as f64;
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * p.powf(0.25)
}

/// Per-sample CIDEr-D given document frequencies (keyed by space-joined
/// n-gram) and the number of images they were counted over.
pub fn oracle_cider(corpus: &[(Caption, Vec<Caption>)], df: &BTreeMap<String, f64>, images: f64) -> Vec<f64> {
    let weight = |c: &Caption, n: usize| -> Vec<(Vec<String>, f64)> {
        let gs = grams(c, n);
        distinct(&gs)
            .into_iter()
            .map(|g| {
                let d = df.get(&g.join(" ")).copied().unwrap_or(0.0);
                let idf = images.ln() - d.max(1.0).ln();
                let tf = count_of(&gs, &g) as f64;
                (g, tf * idf)
            })
            .collect()
    };
    let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let mut scores = Vec::new();
    for (cand, refs) in corpus {
        let mut total = 0.0;
        for r in refs {
            let delta = cand.tokens.len() as f64 - r.tokens.len() as f64;
            let pen = (-delta * delta / 72.0).exp();
            let mut per_n = 0.0;
            for n in 1..=4 {
                let hv = weight(cand, n);
                let rv = weight(r, n);
                let mut dot = 0.0;
                for (g, h) in &hv {
                    for (g2, w) in &rv {
                        if g == g2 {
                            dot += h.min(*w) * w;
                        }
                    }
                }
                let (hn, rn) = (norm(&hv), norm(&rv));
                if hn > 0.0 && rn > 0.0 {
                    per_n += dot / (hn * rn) * pen;
                }
            }
            total += per_n / 4.0;
        }
        scores.push(10.0 * total / refs.len() as f64);
    }
    scores
}

/// The fixed three-sample toy corpus shared by the metric tests.
pub fn toy_corpus() -> Vec<(Caption, Vec<Caption>)> {
    let raw: [(&str, &[&str]); 3] = [
        ("a man rides a brown horse", &["a man riding a brown horse", "a person on a horse in a field"]),
        ("a dog catches a red frisbee", &["a dog catches a frisbee", "a brown dog jumps for a red frisbee"]),
        ("a bowl of soup on a table", &["a bowl of hot soup on a wooden table", "soup in a white bowl"]),
    ];
    raw.iter()
        .map(|(c, rs)| (Caption::new(*c), rs.iter().map(|r| Caption::new(*r)).collect()))
        .collect()
}

/// Hand-specified document frequencies, as if counted over ten images.
pub fn toy_df() -> (BTreeMap<String, f64>, f64) {
    let entries: [(&str, f64); 20] = [
        ("a", 10.0),
        ("man", 3.0),
        ("horse", 2.0),
        ("brown", 3.0),
        ("dog", 2.0),
        ("frisbee", 1.0),
        ("red", 4.0),
        ("bowl", 2.0),
        ("of", 6.0),
        ("soup", 1.0),
        ("on", 7.0),
        ("table", 3.0),
        ("a man", 3.0),
        ("a dog", 2.0),
        ("a brown", 2.0),
        ("brown horse", 1.0),
        ("a bowl", 2.0),
        ("bowl of", 2.0),
        ("a red", 2.0),
        ("red frisbee", 1.0),
    ];
    (entries.iter().map(|(g, d)| (g.to_string(), *d)).collect(), 10.0)
}

pub fn z_ok(observed: usize, trials: usize, p: f64) -> bool {
    let mean = trials as f64 * p;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    (observed as f64 - mean).abs() <= 3.0 * sd
}
