//! Retrieval-context construction.
//!
//! Each strategy turns one or more ranked [`RetrievalList`]s into the ordered
//! caption list that goes into a prompt. All randomness flows from an explicit
//! seed through [`crate::rng`], so every construction replays exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datastore::{RetrievalEntry, RetrievalList};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};
use crate::text::Caption;

/// Retrieval lists keyed by image id.
pub type ListMap = BTreeMap<String, RetrievalList>;

pub const DEFAULT_POOL_SIZE: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    #[serde(rename = "top")]
    TopK,
    #[serde(rename = "last")]
    LastK,
    #[serde(rename = "random")]
    RandomK,
    #[serde(rename = "sample")]
    SampleK,
    #[serde(rename = "csample")]
    CSampleK,
    #[serde(rename = "mixed")]
    MixedK,
    /// Two own-image captions plus one foreign caption (K = 3).
    #[serde(rename = "2g1b")]
    TwoGoodOneBad,
    /// Two foreign captions plus one own-image caption (K = 3).
    #[serde(rename = "2b1g")]
    TwoBadOneGood,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::TopK,
        StrategyKind::LastK,
        StrategyKind::RandomK,
        StrategyKind::SampleK,
        StrategyKind::CSampleK,
        StrategyKind::MixedK,
        StrategyKind::TwoGoodOneBad,
        StrategyKind::TwoBadOneGood,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::TopK => "top",
            StrategyKind::LastK => "last",
            StrategyKind::RandomK => "random",
            StrategyKind::SampleK => "sample",
            StrategyKind::CSampleK => "csample",
            StrategyKind::MixedK => "mixed",
            StrategyKind::TwoGoodOneBad => "2g1b",
            StrategyKind::TwoBadOneGood => "2b1g",
        }
    }

    /// Context length forced by the strategy, if any.
    pub fn fixed_k(self) -> Option<usize> {
        match self {
            StrategyKind::MixedK => Some(4),
            StrategyKind::TwoGoodOneBad | StrategyKind::TwoBadOneGood => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    #[default]
    Default,
    Permute,
    Reverse,
}

impl Order {
    pub fn name(self) -> &'static str {
        match self {
            Order::Default => "default",
            Order::Permute => "permute",
            Order::Reverse => "reverse",
        }
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Order::Default),
            "permute" => Ok(Order::Permute),
            "reverse" => Ok(Order::Reverse),
            _ => Err(Error::Input(format!("unknown order {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub k: usize,
    #[serde(default = "default_pool", rename = "pool")]
    pub pool_size: usize,
    #[serde(default)]
    pub order: Order,
    #[serde(default)]
    pub seed: u64,
}

fn default_pool() -> usize {
    DEFAULT_POOL_SIZE
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, k: usize) -> StrategySpec {
        StrategySpec {
            kind,
            k,
            pool_size: DEFAULT_POOL_SIZE,
            order: Order::Default,
            seed: 0,
        }
    }

    pub fn with_order(mut self, order: Order) -> Self {
        self.order = order;
        self
    }

    pub fn with_pool(mut self, pool_size: usize) -> Self {
        self.pool_size = pool_size;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        if let Some(fixed) = self.kind.fixed_k() {
            if self.k != fixed {
                return Err(Error::contract(format!(
                    "strategy {} requires k = {fixed}, got {}",
                    self.kind, self.k
                )));
            }
        }
        if matches!(
            self.kind,
            StrategyKind::LastK | StrategyKind::SampleK | StrategyKind::CSampleK | StrategyKind::MixedK
        ) && self.k > self.pool_size
        {
            return Err(Error::contract(format!(
                "k = {} exceeds pool size N = {}",
                self.k, self.pool_size
            )));
        }
        if self.kind == StrategyKind::MixedK && self.pool_size < 3 {
            return Err(Error::contract("mixed strategy needs a pool of at least 3"));
        }
        Ok(())
    }
}

/// Where a context caption came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Source {
    /// From the query image's own retrieval list.
    Own { rank: usize },
    /// From another image's retrieval list.
    Foreign { image_id: String, rank: usize },
}

impl Source {
    pub fn rank(&self) -> usize {
        match self {
            Source::Own { rank } | Source::Foreign { rank, .. } => *rank,
        }
    }

    pub fn is_foreign(&self) -> bool {
        matches!(self, Source::Foreign { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub caption_id: String,
    pub caption: Caption,
    #[serde(flatten)]
    pub source: Source,
}

/// Ordered captions handed to the prompt builder.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalContext {
    pub entries: Vec<ContextEntry>,
}

impl RetrievalContext {
    /// Wraps bare captions as own-image entries ranked 1..n.
    pub fn from_captions(captions: Vec<Caption>) -> RetrievalContext {
        RetrievalContext {
            entries: captions
                .into_iter()
                .enumerate()
                .map(|(i, caption)| ContextEntry {
                    caption_id: format!("#{i}"),
                    caption,
                    source: Source::Own { rank: i + 1 },
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn captions(&self) -> Vec<&Caption> {
        self.entries.iter().map(|e| &e.caption).collect()
    }

    pub fn sources(&self) -> Vec<&Source> {
        self.entries.iter().map(|e| &e.source).collect()
    }

    /// Ranks of own-image entries, in context order.
    pub fn own_ranks(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter_map(|e| match e.source {
                Source::Own { rank } => Some(rank),
                Source::Foreign { .. } => None,
            })
            .collect()
    }

    pub fn foreign_count(&self) -> usize {
        self.entries.iter().filter(|e| e.source.is_foreign()).count()
    }

    /// True when no (source image, rank) pair repeats.
    pub fn has_unique_sources(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.entries.iter().all(|e| seen.insert(&e.source))
    }
}

fn entry(e: &RetrievalEntry, foreign_image: Option<&str>) -> ContextEntry {
    ContextEntry {
        caption_id: e.caption_id.clone(),
        caption: e.caption.clone(),
        source: match foreign_image {
            None => Source::Own { rank: e.rank },
            Some(image_id) => Source::Foreign {
                image_id: image_id.to_owned(),
                rank: e.rank,
            },
        },
    }
}

fn need_len(list: &RetrievalList, n: usize, what: &str) -> Result<()> {
    if list.len() < n {
        Err(Error::contract(format!(
            "{what} needs a retrieval list of at least {n} entries, got {}",
            list.len()
        )))
    } else {
        Ok(())
    }
}

fn need_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::contract("k must be at least 1"))
    } else {
        Ok(())
    }
}

fn by_ranks(list: &RetrievalList, ranks: impl IntoIterator<Item = usize>) -> RetrievalContext {
    RetrievalContext {
        entries: ranks
            .into_iter()
            .map(|r| entry(list.rank(r).expect("rank checked by caller"), None))
            .collect(),
    }
}

/// Ranks `1..=k`.
pub fn top_k(list: &RetrievalList, k: usize) -> Result<RetrievalContext> {
    need_k(k)?;
    need_len(list, k, "top-k")?;
    Ok(by_ranks(list, 1..=k))
}

/// The final `k` entries of `list`, in ascending rank order. Pass the top-N
/// list to get ranks `N-k+1..=N`.
pub fn last_k(list: &RetrievalList, k: usize) -> Result<RetrievalContext> {
    need_k(k)?;
    need_len(list, k, "last-k")?;
    let n = list.len();
    Ok(by_ranks(list, n - k + 1..=n))
}

/// Uniformly picks an image other than `self_image`, iterating candidates in
/// ascending id order.
fn pick_foreign<'a>(
    all_lists: &'a ListMap,
    self_image: &str,
    seed: u64,
) -> Result<(&'a str, &'a RetrievalList)> {
    let others: Vec<(&String, &RetrievalList)> =
        all_lists.iter().filter(|(id, _)| id.as_str() != self_image).collect();
    if all_lists.len() < 2 || others.is_empty() {
        return Err(Error::contract(
            "foreign retrieval needs lists for at least two images",
        ));
    }
    let mut r = rng::seeded(seed);
    let (id, list) = others[rng::index(&mut r, others.len())];
    Ok((id.as_str(), list))
}

/// The top-`k` list of a uniformly chosen other image, marked foreign.
pub fn random_k(
    all_lists: &ListMap,
    self_image: &str,
    k: usize,
    seed: u64,
) -> Result<RetrievalContext> {
    need_k(k)?;
    let (image_id, list) = pick_foreign(all_lists, self_image, seed)?;
    need_len(list, k, "random-k")?;
    Ok(RetrievalContext {
        entries: list.entries[..k].iter().map(|e| entry(e, Some(image_id))).collect(),
    })
}

pub fn apply_order(ctx: RetrievalContext, order: Order, seed: u64) -> RetrievalContext {
    let mut entries = ctx.entries;
    match order {
        Order::Default => {}
        Order::Reverse => entries.reverse(),
        Order::Permute => rng::shuffle(&mut rng::seeded(seed), &mut entries),
    }
    RetrievalContext { entries }
}

fn check_pool(list: &RetrievalList, k: usize, pool: usize) -> Result<()> {
    need_k(k)?;
    if k > pool {
        return Err(Error::contract(format!("k = {k} exceeds pool size N = {pool}")));
    }
    need_len(list, pool, "sampling")
}

/// `k` distinct ranks drawn uniformly from `1..=pool`, returned in ascending
/// rank order.
pub fn sample_k(list: &RetrievalList, k: usize, pool: usize, seed: u64) -> Result<RetrievalContext> {
    check_pool(list, k, pool)?;
    let mut ranks: Vec<usize> = rng::sample_indices(&mut rng::seeded(seed), pool, k)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    ranks.sort_unstable();
    Ok(by_ranks(list, ranks))
}

/// Rank 1 plus `k-1` distinct ranks drawn uniformly from `2..=pool`, in
/// ascending rank order.
pub fn c_sample_k(
    list: &RetrievalList,
    k: usize,
    pool: usize,
    seed: u64,
) -> Result<RetrievalContext> {
    check_pool(list, k, pool)?;
    let mut ranks: Vec<usize> = rng::sample_indices(&mut rng::seeded(seed), pool - 1, k - 1)
        .into_iter()
        .map(|i| i + 2)
        .collect();
    ranks.push(1);
    ranks.sort_unstable();
    Ok(by_ranks(list, ranks))
}

/// `[rank 1, rank 2, rank pool, foreign rank 1]`.
pub fn mixed_k(
    self_list: &RetrievalList,
    all_lists: &ListMap,
    self_image: &str,
    pool: usize,
    seed: u64,
) -> Result<RetrievalContext> {
    if pool < 3 {
        return Err(Error::contract("mixed strategy needs a pool of at least 3"));
    }
    need_len(self_list, pool, "mixed-k")?;
    let (image_id, foreign) = pick_foreign(all_lists, self_image, seed)?;
    need_len(foreign, 1, "mixed-k foreign list")?;
    let mut ctx = by_ranks(self_list, [1, 2, pool]);
    ctx.entries.push(entry(&foreign.entries[0], Some(image_id)));
    Ok(ctx)
}

/// `[own rank 1, own rank 2, foreign rank 1]`.
pub fn build_2g1b(
    self_list: &RetrievalList,
    all_lists: &ListMap,
    self_image: &str,
    seed: u64,
) -> Result<RetrievalContext> {
    need_len(self_list, 2, "2G1B")?;
    let (image_id, foreign) = pick_foreign(all_lists, self_image, seed)?;
    need_len(foreign, 1, "2G1B foreign list")?;
    let mut ctx = by_ranks(self_list, [1, 2]);
    ctx.entries.push(entry(&foreign.entries[0], Some(image_id)));
    Ok(ctx)
}

/// `[foreign rank 1, foreign rank 2, own rank 1]`.
pub fn build_2b1g(
    self_list: &RetrievalList,
    all_lists: &ListMap,
    self_image: &str,
    seed: u64,
) -> Result<RetrievalContext> {
    need_len(self_list, 1, "2B1G")?;
    let (image_id, foreign) = pick_foreign(all_lists, self_image, seed)?;
    need_len(foreign, 2, "2B1G foreign list")?;
    let mut entries: Vec<ContextEntry> =
        foreign.entries[..2].iter().map(|e| entry(e, Some(image_id))).collect();
    entries.push(entry(&self_list.entries[0], None));
    Ok(RetrievalContext { entries })
}

const SELECT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;

/// Runs the strategy named by `spec` for `self_image`, then applies the
/// requested order. Selection and ordering use independent streams derived
/// from `spec.seed`, so changing the order never changes which captions are
/// selected.
pub fn build_context(
    spec: &StrategySpec,
    all_lists: &ListMap,
    self_image: &str,
) -> Result<RetrievalContext> {
    spec.validate()?;
    let own = || {
        all_lists
            .get(self_image)
            .ok_or_else(|| Error::contract(format!("no retrieval list for image {self_image:?}")))
    };
    let pool_prefix = |list: &RetrievalList| -> Result<RetrievalList> {
        need_len(list, spec.pool_size, "top-N pool")?;
        Ok(RetrievalList {
            entries: list.entries[..spec.pool_size].to_vec(),
        })
    };
    let select = derive_seed(spec.seed, SELECT_STREAM);
    let ctx = match spec.kind {
        StrategyKind::TopK => top_k(own()?, spec.k)?,
        StrategyKind::LastK => last_k(&pool_prefix(own()?)?, spec.k)?,
        StrategyKind::RandomK => random_k(all_lists, self_image, spec.k, select)?,
        StrategyKind::SampleK => sample_k(own()?, spec.k, spec.pool_size, select)?,
        StrategyKind::CSampleK => c_sample_k(own()?, spec.k, spec.pool_size, select)?,
        StrategyKind::MixedK => mixed_k(own()?, all_lists, self_image, spec.pool_size, select)?,
        StrategyKind::TwoGoodOneBad => build_2g1b(own()?, all_lists, self_image, select)?,
        StrategyKind::TwoBadOneGood => build_2b1g(own()?, all_lists, self_image, select)?,
    };
    Ok(apply_order(ctx, spec.order, derive_seed(spec.seed, ORDER_STREAM)))
}
