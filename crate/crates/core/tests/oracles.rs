#![allow(clippy::needless_range_loop)]

mod common;

use ndarray::Array2;
use rand::Rng;
use ragscope::attribution::{self, AttributionMatrix, BagCaptioner};
use ragscope::datastore::{cosine_retrieve, CaptionStore, EmbeddingMatrix};
use ragscope::majority::MajorityReport;
use ragscope::prompt::{assemble_raw, Segment, Template};
use ragscope::provenance;
use ragscope::text::{Caption, StopWordList};
use sha2::{Digest, Sha256};

use common::{random_caption, rng, ORACLE_STOPWORDS};

/// Buckets by enumerating every (step, position) cell and asking the layout
/// which segment the position is in.
fn oracle_buckets(attr: &AttributionMatrix, report: &MajorityReport) -> [(usize, f64, f64); 4] {
    let mut cells = [(0usize, 0.0f64, 0.0f64); 4];
    let gen = attr.layout.generated().to_vec();
    for step in 0..attr.values.nrows() {
        for pos in 0..attr.values.ncols() {
            if attr.layout.segment_of(pos).unwrap() != Segment::Retrieval {
                continue;
            }
            let majority = report.majority.contains(&attr.layout.tokens[pos]);
            let present = report.counts.contains_key(&gen[step]);
            let idx = match (majority, present) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            let v = attr.values[[step, pos]];
            cells[idx].0 += 1;
            cells[idx].1 += v;
            cells[idx].2 += v.abs();
        }
    }
    cells
}

#[test]
fn pairwise_buckets_match_enumeration() {
    let sw = StopWordList::from_words(ORACLE_STOPWORDS);
    let mut r = rng(404);
    for trial in 0..40 {
        let k = r.gen_range(2..=5);
        let caps: Vec<Caption> = (0..k).map(|_| random_caption(&mut r, 6)).collect();
        let raws: Vec<String> = caps.iter().map(|c| c.raw.clone()).collect();
        let mut layout = assemble_raw(&raws, &Template::default()).unwrap();
        let gen = random_caption(&mut r, 5);
        for t in &gen.tokens {
            layout = layout.append_generated(t.as_str());
        }
        let values = Array2::from_shape_fn((gen.len(), layout.len()), |(t, p)| {
            if p < layout.prompt_len() + t {
                r.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        let attr = AttributionMatrix::new(values, layout.clone()).unwrap();
        let report = MajorityReport::from_captions(caps.iter(), &sw);
        let b = attribution::pairwise_buckets(&attr, &report, layout.generated()).unwrap();
        let o = oracle_buckets(&attr, &report);
        for (cell, (n, s, a)) in [b.mt_present, b.mt_absent, b.ot_present, b.ot_absent].iter().zip(o) {
            assert_eq!(cell.count, n, "trial {trial}");
            if n == 0 {
                assert!(cell.mean_signed.is_none() && cell.mean_abs.is_none());
            } else {
                assert!((cell.mean_signed.unwrap() - s / n as f64).abs() < 1e-12);
                assert!((cell.mean_abs.unwrap() - a / n as f64).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn config_hash_matches_external_sha256() {
    let config = serde_json::json!({"zeta": [3, 1], "alpha": {"b": true, "a": "x"}, "seed": 7});
    let canonical = r#"{"alpha":{"a":"x","b":true},"seed":7,"zeta":[3,1]}"#;
    assert_eq!(provenance::canonical_json(&config), canonical);
    let digest = Sha256::digest(canonical.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(provenance::config_hash(&config), hex);
}

#[test]
fn retrieval_matches_scan_after_emb1_round_trip() {
    let mut r = rng(505);
    let mut store = CaptionStore::new();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for img in 0..12 {
        let caps: Vec<String> = (0..3).map(|j| format!("image {img} caption {j}")).collect();
        store.add_image(&format!("i{img}"), &caps).unwrap();
        for j in 0..3 {
            ids.push(format!("i{img}#{j}"));
            rows.push((0..6).map(|_| r.gen_range(-1.0f32..1.0)).collect::<Vec<_>>());
        }
    }
    let index = EmbeddingMatrix::from_rows(ids, rows).unwrap();
    let index = EmbeddingMatrix::from_emb1_bytes(&index.to_emb1_bytes()).unwrap();
    for _ in 0..20 {
        let q: Vec<f32> = (0..6).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let norm = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        let q: Vec<f32> = q.iter().map(|v| v / norm).collect();
        let list = cosine_retrieve(&q, &index, &store, 5).unwrap();
        let mut scan: Vec<(f64, String)> = (0..index.rows())
            .map(|i| {
                let s: f64 = q.iter().zip(index.row(i)).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
                (s, index.ids()[i].clone())
            })
            .collect();
        scan.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let got: Vec<&str> = list.entries.iter().map(|e| e.caption_id.as_str()).collect();
        let want: Vec<&str> = scan[..5].iter().map(|s| s.1.as_str()).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn heatmap_round_trips_through_csv() {
    let layout = {
        let mut l = assemble_raw(&["a dog in a park"], &Template::default()).unwrap();
        for t in ["a", "dog"] {
            l = l.append_generated(t);
        }
        l
    };
    let cap = BagCaptioner::new(layout.tokens.iter().cloned(), 8, 1).unwrap();
    let attr = attribution::attribute_generation(&cap, &layout, 32).unwrap();
    let bytes = attribution::export_heatmap(&attr, &["provenance line".to_string()]).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert!(text.starts_with("# provenance line\n"));
    assert!(!text.contains('\r'));
    let back = attribution::read_heatmap(bytes.as_slice()).unwrap();
    assert_eq!(back.columns, layout.tokens);
    assert_eq!(back.rows, vec!["a", "dog"]);
    for (a, b) in back.values.iter().zip(attr.values.iter()) {
        assert!((a - b).abs() <= 5e-7);
    }
    // later steps see one more input position
    assert_eq!(attr.values[[0, layout.prompt_len()]], 0.0);
    assert_ne!(attr.values[[1, layout.prompt_len()]], 0.0);
}
