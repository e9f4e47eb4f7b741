#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::{BTreeMap, BTreeSet};

use ragscope::datastore::RetrievalList;
use ragscope::strategy::{self, ListMap};
use ragscope::text::Caption;

use common::z_ok;

fn ranked(image: &str, n: usize) -> RetrievalList {
    RetrievalList::from_scored(
        (0..n)
            .map(|i| (format!("{image}#{i}"), Caption::new(format!("{image} word{i}")), 1.0 - 0.001 * i as f64))
            .collect(),
    )
}

fn world_lists(images: usize) -> ListMap {
    (0..images).map(|i| (format!("img{i:03}"), ranked(&format!("img{i:03}"), 7))).collect()
}

#[test]
fn random_k_picks_other_images_uniformly() {
    let lists = world_lists(100);
    let draws = 19_800;
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for seed in 0..draws as u64 {
        let ctx = strategy::random_k(&lists, "img000", 2, seed).unwrap();
        assert_eq!(ctx.foreign_count(), 2);
        let first = ctx.entries[0].caption_id.split('#').next().unwrap().to_string();
        let second = ctx.entries[1].caption_id.split('#').next().unwrap();
        assert_eq!(first, second, "both captions come from one foreign image");
        assert_ne!(first, "img000");
        *seen.entry(first).or_default() += 1;
    }
    assert_eq!(seen.len(), 99);
    for (img, &c) in &seen {
        assert!(z_ok(c, draws, 1.0 / 99.0), "{img} chosen {c} times");
    }
}

#[test]
fn sample_one_is_uniform_over_the_pool() {
    let list = ranked("self", 7);
    let draws = 70_000;
    let mut counts = [0usize; 8];
    for seed in 0..draws as u64 {
        let ranks = strategy::sample_k(&list, 1, 7, seed).unwrap().own_ranks();
        counts[ranks[0]] += 1;
    }
    for rank in 1..=7 {
        assert!(z_ok(counts[rank], draws, 1.0 / 7.0), "rank {rank}: {}", counts[rank]);
    }
}

#[test]
fn sampling_covers_every_subset() {
    let list = ranked("self", 7);
    let mut subsets = BTreeSet::new();
    let mut c_subsets = BTreeSet::new();
    for seed in 0..2_000u64 {
        subsets.insert(strategy::sample_k(&list, 3, 7, seed).unwrap().own_ranks());
        c_subsets.insert(strategy::c_sample_k(&list, 3, 7, seed).unwrap().own_ranks());
    }
    // C(7,3) and C(6,2)
    assert_eq!(subsets.len(), 35);
    assert_eq!(c_subsets.len(), 15);
}

#[test]
fn c_sample_three_of_six_includes_ranks_uniformly() {
    let list = ranked("self", 6);
    let draws = 10_000;
    let mut counts = [0usize; 7];
    for seed in 0..draws as u64 {
        for r in strategy::c_sample_k(&list, 3, 6, seed).unwrap().own_ranks() {
            counts[r] += 1;
        }
    }
    assert_eq!(counts[1], draws);
    for rank in 2..=6 {
        assert!(z_ok(counts[rank], draws, 2.0 / 5.0), "rank {rank}: {}", counts[rank]);
    }
}

#[test]
fn last_k_takes_the_tail_of_the_pool() {
    let list = ranked("self", 7);
    assert_eq!(strategy::last_k(&list, 3).unwrap().own_ranks(), vec![5, 6, 7]);
    let lists = world_lists(3);
    let spec = strategy::StrategySpec::new(strategy::StrategyKind::MixedK, 4).with_seed(3);
    let ctx = strategy::build_context(&spec, &lists, "img001").unwrap();
    assert_eq!(ctx.foreign_count(), 1);
    assert_eq!(&ctx.own_ranks(), &[1, 2, 7]);
}
