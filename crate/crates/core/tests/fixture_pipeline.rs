use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use sextortion::fixture::{generate_fixture, write_fixture, FixtureSpec, GroundTruth};
use sextortion::filters::{read_payments, FilterCombo};
use sextortion::pipeline::{run_in, run_stage, ErrorClass, Stage};
use sextortion::config::PipelineConfig;

fn setup(seed: u64) -> (tempfile::TempDir, PipelineConfig, GroundTruth) {
    let dir = tempfile::tempdir().unwrap();
    let fx = generate_fixture(&FixtureSpec::default(), seed).unwrap();
    write_fixture(&fx, dir.path()).unwrap();
    let cfg = PipelineConfig::load(&dir.path().join("pipeline.toml")).unwrap();
    (dir, cfg, fx.truth)
}

fn json(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

#[test]
fn pipeline_matches_ground_truth() {
    let (dir, cfg, truth) = setup(11);
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    run_in(&cfg, &out).unwrap();

    // buckets equal templates
    let membership = std::fs::read_to_string(out.join("bucket_membership.csv")).unwrap();
    let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for line in membership.lines().skip(1) {
        let (email, bucket) = line.split_once(',').unwrap();
        groups.entry(bucket.parse().unwrap()).or_default().insert(truth.template_of[email]);
    }
    assert_eq!(groups.len(), truth.templates);
    assert!(groups.values().all(|t| t.len() == 1));

    let expanded: BTreeSet<String> = std::fs::read_to_string(out.join("expanded_addresses.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(expanded, truth.expanded_addresses);

    let payments = read_payments(std::fs::File::open(out.join("payments.csv")).unwrap()).unwrap();
    for combo in FilterCombo::BOTH {
        let got: BTreeSet<_> = payments.iter().filter(|p| p.passes(combo)).map(|p| p.output_ref.clone()).collect();
        let want: BTreeSet<_> = truth
            .payments
            .iter()
            .filter(|p| match combo {
                FilterCombo::CollectorRange => p.in_combo_1_2,
                FilterCombo::All => p.in_combo_1_2_3,
            })
            .map(|p| p.output.clone())
            .collect();
        assert_eq!(got, want, "combo {}", combo.label());
    }

    let flows = json(&out, "trace_summary.json");
    assert_eq!(flows["tagged"]["sat"].as_u64().unwrap(), truth.tagged_received_sat);
    assert_eq!(flows["cashout"]["share"]["sat"].as_u64().unwrap(), truth.cashout_sat);

    let linkage = json(&out, "linkage_summary.json");
    let sizes: Vec<usize> = serde_json::from_value(linkage["component_sizes"].clone()).unwrap();
    let mut non_trivial: Vec<usize> = sizes.into_iter().filter(|&s| s > 1).collect();
    non_trivial.sort_unstable_by(|a, b| b.cmp(a));
    let want: Vec<usize> = truth.linkage_components.iter().copied().filter(|&s| s > 1).collect();
    assert_eq!(non_trivial, want);
    assert!(out.join("summary.json").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn empty_corpus_gives_valid_bundle() {
    let (dir, cfg, _) = setup(3);
    std::fs::write(dir.path().join("corpus.jsonl"), "").unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    run_in(&cfg, &out).unwrap();
    let s = json(&out, "summary.json");
    assert_eq!(s["bucketing"]["emails"], 0);
    assert_eq!(s["filters"]["records"], 0);
}

#[test]
fn missing_price_file_is_a_config_error() {
    let (dir, cfg, _) = setup(4);
    std::fs::remove_file(dir.path().join("prices.csv")).unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    let err = run_in(&cfg, &out).unwrap_err();
    assert_eq!(err.class, ErrorClass::Config);
    assert!(err.message.contains("paths.prices"), "{}", err.message);
    let failed = std::fs::read_to_string(out.join("FAILED")).unwrap();
    assert!(failed.contains("stage: cluster"), "{failed}");
}

#[test]
fn stage_without_prior_outputs_names_the_producer() {
    let (dir, cfg, _) = setup(5);
    let out = dir.path().join("out");
    let err = run_stage(Stage::Filter, &cfg, &out).unwrap_err();
    assert_eq!(err.class, ErrorClass::Config);
    assert!(err.message.contains("cluster stage"), "{}", err.message);
}
