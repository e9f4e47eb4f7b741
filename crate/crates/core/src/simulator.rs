//! Seeded synthetic world and majority-copy caption generator.
//!
//! Each image owns a disjoint pool of topic tokens; all images share a small
//! pool of function words drawn from the default stop list. Captions are
//! embedded as L2-normalized bag-of-token count vectors, so retrieval quality
//! is a direct function of token overlap. The generator copies a majority
//! token of its retrieval context with probability `copy_rate` and otherwise
//! draws from the image's ground-truth tokens.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{caption_id, cosine_retrieve, CaptionRecord, CaptionStore, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::majority::{majority_report, majority_vote_probability, MajorityReport};
use crate::metrics::{Corpus, Metric, Sample};
use crate::rng::{self, derive_seed};
use crate::strategy::{build_context, ListMap, Order, RetrievalContext, StrategyKind, StrategySpec};
use crate::text::{Caption, GeneratedCaption, StopWordList};

pub const FUNCTION_WORDS: [&str; 8] = ["a", "the", "on", "in", "with", "of", "near", "at"];
const MAX_RETRIES: u64 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldParams {
    pub images: usize,
    pub captions_per_image: usize,
    pub vocab_per_image: usize,
    pub caption_len: usize,
    /// Probability that a caption position holds a function word.
    #[serde(default = "default_function_rate")]
    pub function_rate: f64,
}

fn default_function_rate() -> f64 {
    0.3
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            images: 20,
            captions_per_image: 7,
            vocab_per_image: 10,
            caption_len: 8,
            function_rate: default_function_rate(),
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if self.images < 2 {
            return Err(Error::contract("a world needs at least 2 images"));
        }
        if self.captions_per_image < 7 {
            return Err(Error::contract("captions_per_image must be at least 7"));
        }
        if self.vocab_per_image == 0 || self.caption_len == 0 {
            return Err(Error::contract("vocab_per_image and caption_len must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.function_rate) {
            return Err(Error::contract("function_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub topic_pool: Vec<String>,
    pub captions: Vec<Caption>,
}

impl SyntheticImage {
    /// Distinct ground-truth tokens in sorted order.
    pub fn gt_tokens(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.captions.iter().flat_map(|c| c.token_set()).collect();
        set.into_iter().map(str::to_owned).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    pub seed: u64,
    /// Seed actually used after any regeneration retries.
    pub effective_seed: u64,
    pub vocabulary: Vec<String>,
    pub images: Vec<SyntheticImage>,
    pub store: CaptionStore,
    /// Caption embeddings, ids in `image#j` form.
    pub index: EmbeddingMatrix,
    /// Image embeddings, ids are image ids.
    pub image_embeddings: EmbeddingMatrix,
}

fn image_id(i: usize) -> String {
    format!("img{i:04}")
}

fn topic_word(image: usize, j: usize) -> String {
    format!("t{image}x{j}")
}

pub fn gen_world(seed: u64, params: &WorldParams) -> Result<SyntheticWorld> {
    params.validate()?;
    for attempt in 0..MAX_RETRIES {
        let effective = if attempt == 0 { seed } else { derive_seed(seed, attempt) };
        let world = build_world(seed, effective, params)?;
        if world.self_retrieval_holds() {
            return Ok(world);
        }
    }
    Err(Error::Generation(format!(
        "self-retrieval invariant failed after {MAX_RETRIES} attempts"
    )))
}

fn build_world(seed: u64, effective: u64, params: &WorldParams) -> Result<SyntheticWorld> {
    let mut r = rng::seeded(effective);
    let mut vocabulary: Vec<String> = FUNCTION_WORDS.iter().map(|w| w.to_string()).collect();
    let mut images = Vec::with_capacity(params.images);
    for i in 0..params.images {
        let topic_pool: Vec<String> = (0..params.vocab_per_image).map(|j| topic_word(i, j)).collect();
        vocabulary.extend(topic_pool.iter().cloned());
        let captions = (0..params.captions_per_image)
            .map(|_| {
                let words: Vec<&str> = (0..params.caption_len)
                    .map(|_| {
                        if rng::unit(&mut r) < params.function_rate {
                            FUNCTION_WORDS[rng::index(&mut r, FUNCTION_WORDS.len())]
                        } else {
                            topic_pool[rng::index(&mut r, topic_pool.len())].as_str()
                        }
                    })
                    .collect();
                Caption::new(words.join(" "))
            })
            .collect();
        images.push(SyntheticImage {
            id: image_id(i),
            topic_pool,
            captions,
        });
    }
    let position: std::collections::HashMap<&str, usize> =
        vocabulary.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let bag = |c: &Caption| -> Vec<f32> {
        let mut v = vec![0f32; vocabulary.len()];
        for t in &c.tokens {
            v[position[t.as_str()]] += 1.0;
        }
        v
    };

    let mut store = CaptionStore::new();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut image_rows = Vec::new();
    for img in &images {
        let raws: Vec<&str> = img.captions.iter().map(|c| c.raw.as_str()).collect();
        store.add_image(&img.id, &raws)?;
        let mut mean = vec![0f64; vocabulary.len()];
        for (j, c) in img.captions.iter().enumerate() {
            let v = bag(c);
            let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            for (m, x) in mean.iter_mut().zip(&v) {
                *m += f64::from(*x) / norm;
            }
            ids.push(caption_id(&img.id, j));
            rows.push(v);
        }
        image_rows.push(mean.into_iter().map(|x| x as f32).collect());
    }
    let index = EmbeddingMatrix::from_rows(ids, rows)?;
    let image_embeddings =
        EmbeddingMatrix::from_rows(images.iter().map(|i| i.id.clone()).collect(), image_rows)?;
    Ok(SyntheticWorld {
        params: params.clone(),
        seed,
        effective_seed: effective,
        vocabulary,
        images,
        store,
        index,
        image_embeddings,
    })
}

impl SyntheticWorld {
    fn self_retrieval_holds(&self) -> bool {
        let own = self.params.captions_per_image;
        self.images.iter().enumerate().all(|(i, img)| {
            let q = self.image_embeddings.row(i);
            let list = match cosine_retrieve(q, &self.index, &self.store, own + 1) {
                Ok(l) => l,
                Err(_) => return false,
            };
            let prefix = format!("{}#", img.id);
            let own_ok = list.entries[..own].iter().all(|e| e.caption_id.starts_with(&prefix));
            // strict separation from the best foreign caption
            own_ok && list.entries[own - 1].similarity > list.entries[own].similarity
        })
    }

    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|i| i.id == id)
    }

    /// Top-`n` retrieval list of every image.
    pub fn retrieval_lists(&self, n: usize) -> Result<ListMap> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let list = cosine_retrieve(self.image_embeddings.row(i), &self.index, &self.store, n)?;
                Ok((img.id.clone(), list))
            })
            .collect()
    }

    pub fn caption_records(&self) -> Vec<CaptionRecord> {
        self.images
            .iter()
            .map(|img| CaptionRecord {
                image_id: img.id.clone(),
                captions: img.captions.iter().map(|c| c.raw.clone()).collect(),
            })
            .collect()
    }

    pub fn captions_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.caption_records() {
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorPolicy {
    /// Probability that a token is copied from the context's majority set.
    pub copy_rate: f64,
    /// Effective copy rate for tokens foreign to the image; `None` means
    /// `copy_rate`. Lower values model a model trained on sampled contexts.
    pub foreign_copy_rate: Option<f64>,
    pub length: usize,
    pub seed: u64,
}

impl GeneratorPolicy {
    pub fn new(copy_rate: f64, length: usize, seed: u64) -> GeneratorPolicy {
        GeneratorPolicy {
            copy_rate,
            foreign_copy_rate: None,
            length,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.copy_rate) {
            return Err(Error::contract("copy_rate must lie in [0, 1]"));
        }
        if let Some(f) = self.foreign_copy_rate {
            if !(0.0..=self.copy_rate).contains(&f) {
                return Err(Error::contract("foreign_copy_rate must lie in [0, copy_rate]"));
            }
        }
        if self.length == 0 {
            return Err(Error::contract("caption length must be at least 1"));
        }
        Ok(())
    }
}

/// Draws a caption token by token: with probability `copy_rate` from the
/// majority set of `ctx` (the union of retrieved tokens when that set is
/// empty), otherwise from the image's ground-truth tokens.
pub fn simulate_caption(
    image: &SyntheticImage,
    ctx: &RetrievalContext,
    policy: &GeneratorPolicy,
    stopwords: &StopWordList,
) -> Result<GeneratedCaption> {
    policy.validate()?;
    let report = majority_report(ctx, stopwords);
    let copy_pool: Vec<&str> = if report.majority.is_empty() {
        report.retrieved_tokens().collect()
    } else {
        report.majority.iter().map(String::as_str).collect()
    };
    let gt = image.gt_tokens();
    let gt_set: BTreeSet<&str> = gt.iter().map(String::as_str).collect();
    let foreign_accept = match policy.foreign_copy_rate {
        Some(f) if policy.copy_rate > 0.0 => f / policy.copy_rate,
        _ => 1.0,
    };
    let mut r = rng::seeded(policy.seed);
    let mut words = Vec::with_capacity(policy.length);
    for _ in 0..policy.length {
        let mut word = None;
        if rng::unit(&mut r) < policy.copy_rate && !copy_pool.is_empty() {
            let w = copy_pool[rng::index(&mut r, copy_pool.len())];
            if gt_set.contains(w) || foreign_accept >= 1.0 || rng::unit(&mut r) < foreign_accept {
                word = Some(w);
            }
        }
        words.push(word.unwrap_or_else(|| gt[rng::index(&mut r, gt.len())].as_str()));
    }
    Ok(Caption::new(words.join(" ")))
}

/// One strategy entry of an experiment grid; the seed comes from the grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyEntry {
    pub kind: StrategyKind,
    pub k: usize,
    #[serde(default = "default_pool")]
    pub pool: usize,
    #[serde(default)]
    pub order: Order,
}

fn default_pool() -> usize {
    crate::strategy::DEFAULT_POOL_SIZE
}

impl StrategyEntry {
    pub fn new(kind: StrategyKind, k: usize) -> StrategyEntry {
        StrategyEntry {
            kind,
            k,
            pool: default_pool(),
            order: Order::Default,
        }
    }

    pub fn with_order(mut self, order: Order) -> Self {
        self.order = order;
        self
    }

    fn spec(&self, seed: u64) -> StrategySpec {
        StrategySpec {
            kind: self.kind,
            k: self.k,
            pool_size: self.pool,
            order: self.order,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub strategies: Vec<StrategyEntry>,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub lambda_foreign: Option<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_length")]
    pub length: usize,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Cider, Metric::Bleu4]
}

fn default_length() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub strategy: StrategyKind,
    pub k: usize,
    pub order: Order,
    pub lambda: f64,
    pub seed: u64,
    pub cider: Option<f64>,
    pub bleu4: Option<f64>,
    pub p_majority_vote: Option<f64>,
}

/// Per-image seeds for one experiment seed. They depend only on the seed and
/// the image, never on the strategy or copy rate, so cells differing only in
/// those knobs share all randomness.
fn image_seeds(seed: u64, image: usize) -> (u64, u64) {
    let base = derive_seed(seed, image as u64);
    (derive_seed(base, 1), derive_seed(base, 2))
}

pub fn run_cell(
    world: &SyntheticWorld,
    lists: &ListMap,
    entry: &StrategyEntry,
    policy_template: &GeneratorPolicy,
    seed: u64,
    metrics: &[Metric],
    stopwords: &StopWordList,
) -> Result<ResultRow> {
    let mut samples = Vec::with_capacity(world.images.len());
    let mut reports: Vec<MajorityReport> = Vec::with_capacity(world.images.len());
    let mut outputs = Vec::with_capacity(world.images.len());
    for (i, img) in world.images.iter().enumerate() {
        let (strategy_seed, gen_seed) = image_seeds(seed, i);
        let ctx = build_context(&entry.spec(strategy_seed), lists, &img.id)?;
        let policy = GeneratorPolicy {
            seed: gen_seed,
            ..*policy_template
        };
        let out = simulate_caption(img, &ctx, &policy, stopwords)?;
        reports.push(majority_report(&ctx, stopwords));
        samples.push(Sample {
            candidate: out.clone(),
            references: img.captions.clone(),
        });
        outputs.push(out);
    }
    let corpus = Corpus::new(samples)?;
    let score = |m: Metric| -> Result<Option<f64>> {
        if metrics.contains(&m) {
            Ok(Some(m.score(&corpus)?.corpus_score))
        } else {
            Ok(None)
        }
    };
    Ok(ResultRow {
        strategy: entry.kind,
        k: entry.k,
        order: entry.order,
        lambda: policy_template.copy_rate,
        seed,
        cider: score(Metric::Cider)?,
        bleu4: score(Metric::Bleu4)?,
        p_majority_vote: majority_vote_probability(&reports, &outputs)?.p_majority_vote(),
    })
}

/// Runs every (strategy, lambda, seed) cell. Rows come back in grid order:
/// strategy-major, then lambda, then seed.
pub fn run_experiment(
    world: &SyntheticWorld,
    grid: &ExperimentGrid,
    stopwords: &StopWordList,
) -> Result<Vec<ResultRow>> {
    if grid.strategies.is_empty() || grid.lambdas.is_empty() || grid.seeds.is_empty() {
        return Err(Error::contract("experiment grid has an empty axis"));
    }
    let depth = grid
        .strategies
        .iter()
        .map(|s| s.k.max(s.pool))
        .max()
        .unwrap_or(1)
        .max(2)
        .min(world.index.rows());
    let lists = world.retrieval_lists(depth)?;
    let cells: Vec<(&StrategyEntry, f64, u64)> = grid
        .strategies
        .iter()
        .flat_map(|s| {
            grid.lambdas
                .iter()
                .flat_map(move |&l| grid.seeds.iter().map(move |&seed| (s, l, seed)))
        })
        .collect();
    cells
        .par_iter()
        .map(|&(entry, lambda, seed)| {
            let policy = GeneratorPolicy {
                copy_rate: lambda,
                foreign_copy_rate: grid.lambda_foreign.map(|f| f.min(lambda)),
                length: grid.length,
                seed: 0,
            };
            run_cell(world, &lists, entry, &policy, seed, &grid.metrics, stopwords)
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with a `#` provenance comment, a header and one line per row. LF line
/// endings, `.` decimal separator.
pub fn write_results_csv<W: Write>(rows: &[ResultRow], comment: &str, mut out: W) -> std::io::Result<()> {
    writeln!(out, "# {comment}")?;
    writeln!(out, "strategy,k,order,lambda,seed,cider,bleu4,p_majority_vote")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.strategy,
            r.k,
            r.order,
            r.lambda,
            r.seed,
            opt(r.cider),
            opt(r.bleu4),
            opt(r.p_majority_vote)
        )?;
    }
    Ok(())
}
