use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sextort(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sextort")).args(args).output().unwrap()
}

fn fixture(dir: &Path) -> PathBuf {
    let out = sextort(&["fixture", "--out-dir", dir.to_str().unwrap(), "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("pipeline.toml")
}

fn run(config: &Path, root: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out-dir", root.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = sextort(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

#[test]
fn run_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixture(&tmp.path().join("fx"));
    let a = run(&config, &tmp.path().join("a"), &[]);
    let b = run(&config, &tmp.path().join("b"), &[]);
    assert_ne!(a, b);
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    let mb = std::fs::read(b.join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
    let c = run(&config, &tmp.path().join("c"), &["--seed", "12345"]);
    let mc = std::fs::read(c.join("manifest.json")).unwrap();
    assert_ne!(ma, mc, "the seed reaches the stats stage");
}

#[test]
fn stages_chain_through_the_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixture(&tmp.path().join("fx"));
    let out = tmp.path().join("stages");
    for stage in ["bucket", "extract", "cluster", "filter", "trace", "stats", "linkage", "report"] {
        let o = sextort(&[stage, "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(out.join("summary.json").is_file());
    assert!(out.join("depth_2_clusters.csv").is_file());
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = sextort(&["run", "--config", tmp.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));

    let config = fixture(&tmp.path().join("fx"));
    let bad_t = sextort(&["bucket", "--config", config.to_str().unwrap(), "--t", "1.5"]);
    assert_eq!(bad_t.status.code(), Some(2));

    std::fs::write(tmp.path().join("fx/ledger.jsonl"), "{not json}\n").unwrap();
    let out = tmp.path().join("o");
    let bad = sextort(&["run", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(3), "{}", String::from_utf8_lossy(&bad.stderr));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("stage cluster"), "{stderr}");
    let run_dir = std::fs::read_dir(&out).unwrap().next().unwrap().unwrap().path();
    assert!(run_dir.join("FAILED").is_file());
}
