mod common;

use std::process::{Command, Output};

use serde_json::Value;

use common::{fixture, oracle_cider, toy_corpus};

fn ragscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragscope")).args(args).output().unwrap()
}

fn f(name: &str) -> String {
    fixture(name).to_string_lossy().into_owned()
}

fn stdout_json(o: &Output) -> Value {
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let o = ragscope(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert!(o.stdout.is_empty());
}

#[test]
fn unknown_subcommand_and_flag_exit_one() {
    assert_eq!(ragscope(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ragscope(&["evaluate", "--metric", "cider", "--nope"]).status.code(), Some(1));
    assert_eq!(ragscope(&["evaluate", "--metric", "rouge"]).status.code(), Some(1));
}

#[test]
fn help_documents_formats() {
    let o = ragscope(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for needle in ["EMB1", "ATT1", "Sidecar", "Heatmap CSV", "Exit codes"] {
        assert!(text.contains(needle), "help lacks {needle}");
    }
    assert_eq!(ragscope(&["--version"]).status.code(), Some(0));
}

#[test]
fn evaluate_fixture_matches_metric_oracle() {
    let doc = stdout_json(&ragscope(&[
        "evaluate",
        "--metric",
        "cider",
        "--candidates",
        &f("eval_candidates.jsonl"),
        "--references",
        &f("eval_references.jsonl"),
    ]));
    // df counted per image over its references
    let toy = toy_corpus();
    let mut df = std::collections::BTreeMap::new();
    for (_, refs) in &toy {
        let mut grams = std::collections::BTreeSet::new();
        for r in refs {
            let t: Vec<&str> = r.tokens.iter().map(|t| t.as_str()).collect();
            for n in 1..=4 {
                for w in t.windows(n) {
                    grams.insert(w.join(" "));
                }
            }
        }
        for g in grams {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let expected = oracle_cider(&toy, &df, 3.0);
    let mean = expected.iter().sum::<f64>() / 3.0;
    assert!((doc["corpus_score"].as_f64().unwrap() - mean).abs() < 1e-9);
    for (i, e) in expected.iter().enumerate() {
        assert!((doc["per_sample"][i]["score"].as_f64().unwrap() - e).abs() < 1e-9);
    }
    assert_eq!(doc["metric"], "cider");

    let bleu = stdout_json(&ragscope(&[
        "evaluate",
        "--metric",
        "bleu4",
        "--candidates",
        &f("eval_candidates.jsonl"),
        "--references",
        &f("eval_references.jsonl"),
    ]));
    assert!((bleu["corpus_score"].as_f64().unwrap() - common::oracle_bleu(&toy)).abs() < 1e-9);
}

#[test]
fn config_hash_is_stable_and_seed_sensitive() {
    let run = |seed: &str| {
        stdout_json(&ragscope(&["prompt", "--caption", "a dog", "--seed", seed]))["provenance"].clone()
    };
    let (a, b, c) = (run("1"), run("1"), run("2"));
    assert_eq!(a["config_hash"], b["config_hash"]);
    assert_ne!(a["config_hash"], c["config_hash"]);
    assert_eq!(c["seed"], 2);
    assert_eq!(a["tool"], "ragscope");
}

#[test]
fn prompt_output_is_a_valid_sidecar() {
    let o = ragscope(&["prompt", "--caption", "a dog", "--generated", "a dog runs"]);
    let doc = stdout_json(&o);
    assert_eq!(doc["spans"]["S3"], serde_json::json!([4, 6]));
    assert_eq!(doc["spans"]["S5"], serde_json::json!([9, 12]));
    let side = ragscope::attention::Sidecar::parse(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(side.text_len(), 12);
}

#[test]
fn flags_override_config_values() {
    let base = [
        "retrieve",
        "--config",
        &f("retrieve_config.json"),
        "--captions",
        &f("world/captions.jsonl"),
        "--index",
        &f("world/captions.emb1"),
        "--queries",
        &f("world/images.emb1"),
    ]
    .map(String::from);
    let args: Vec<&str> = base.iter().map(String::as_str).collect();
    let from_config = stdout_json(&ragscope(&args));
    assert_eq!(from_config["strategy"]["kind"], "csample");
    assert_eq!(from_config["results"][0]["context"].as_array().unwrap().len(), 3);
    let mut over = args.clone();
    over.extend(["--strategy", "top", "--k", "2"]);
    let overridden = stdout_json(&ragscope(&over));
    assert_eq!(overridden["strategy"]["kind"], "top");
    assert_eq!(overridden["results"][0]["context"].as_array().unwrap().len(), 2);
    assert_ne!(from_config["provenance"]["config_hash"], overridden["provenance"]["config_hash"]);
}

#[test]
fn retrieval_ranks_own_captions_first() {
    let doc = stdout_json(&ragscope(&[
        "retrieve",
        "--captions",
        &f("world/captions.jsonl"),
        "--index",
        &f("world/captions.emb1"),
        "--queries",
        &f("world/images.emb1"),
        "--n",
        "8",
    ]));
    for item in doc["results"].as_array().unwrap() {
        let id = item["image_id"].as_str().unwrap();
        let list = item["retrieval"].as_array().unwrap();
        assert_eq!(list.len(), 8);
        for e in &list[..7] {
            assert!(e["caption_id"].as_str().unwrap().starts_with(&format!("{id}#")));
        }
    }
}

#[test]
fn input_errors_exit_two_and_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.json");
    let out_s = out.to_string_lossy().into_owned();
    let missing = ragscope(&["majority", "--input", "/does/not/exist.jsonl", "--out", &out_s]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!out.exists());

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"retrieved\": [\"a dog\"]}\nnot json\n").unwrap();
    let o = ragscope(&["majority", "--input", &bad.to_string_lossy(), "--out", &out_s]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert!(!out.exists());

    let mismatched = ragscope(&[
        "attention",
        "--analysis",
        "xa-img",
        "--tensor",
        &f("sa.att1"),
        "--sidecar",
        &f("sidecar.json"),
    ]);
    assert_eq!(mismatched.status.code(), Some(2));
}

#[test]
fn contract_failures_exit_three() {
    let o = ragscope(&[
        "retrieve",
        "--captions",
        &f("world/captions.jsonl"),
        "--index",
        &f("world/captions.emb1"),
        "--queries",
        &f("world/images.emb1"),
        "--strategy",
        "sample",
        "--k",
        "9",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn majority_csv_matches_json() {
    let json = stdout_json(&ragscope(&["majority", "--input", &f("majority.jsonl")]));
    let csv = ragscope(&["majority", "--input", &f("majority.jsonl"), "--format", "csv"]);
    assert_eq!(csv.status.code(), Some(0));
    let text = String::from_utf8(csv.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), json["samples"].as_u64().unwrap() as usize);
    assert!(rows[0].starts_with("0,3,2,dog park,1,"));
    assert_eq!(json["p_majority_vote"].as_f64().unwrap(), 2.0 / 3.0);
}
