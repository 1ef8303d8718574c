use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[synth]
posts_per_author = 40
authors_per_market = 8
migrants = 2

[tokenizer]
size = 300

[model]
token_dim = 8
text_dim = 16
time_dim = 4
context_dim = 8
filter_sizes = [2, 3]
filters = 8
output_dim = 16
max_tokens = 64

[train]
batch_size = 32
epochs = 2
runs = 1

[graph]
walks_per_user = 2
walk_length = 10
epochs = 1

[eval]
attribute_episodes = 1
ig_steps = 8
"#;

fn epistyle(work: &Path, args: &[&str]) -> Output {
    let cfg = work.join("config.toml");
    if !cfg.exists() {
        std::fs::create_dir_all(work).unwrap();
        std::fs::write(&cfg, CONFIG).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_epistyle"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--work")
        .arg(work.join("w"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    for args in [&["eval", "--help"][..], &["--help"], &["compare", "--help"]] {
        let o = Command::new(env!("CARGO_BIN_EXE_epistyle")).args(args).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{args:?}");
    }
}

#[test]
fn stages_chain_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    for stage in [
        "synth",
        "ingest",
        "preprocess",
        "split",
        "episodes",
        "pgp-pairs",
        "build-graph",
        "walk",
        "graph-embed",
        "train-tokenizer",
        "train",
        "eval",
        "sybil",
        "attribute",
    ] {
        let o = epistyle(dir.path(), &[stage, "--seed", "3"]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
        assert!(dir.path().join("w").join(stage).join("manifest.json").exists(), "{stage}");
    }
    let metrics = dir.path().join("w/eval/metrics.json");
    let manifest = std::fs::read_to_string(dir.path().join("w/train/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3") && manifest.contains("config_hash"), "{manifest}");

    let again = epistyle(dir.path(), &["train", "--seed", "3", "--skip-if-fresh"]);
    assert_eq!(String::from_utf8_lossy(&again.stdout).trim(), "up to date");
    let changed = epistyle(dir.path(), &["train", "--seed", "4", "--skip-if-fresh"]);
    assert!(changed.stdout.is_empty());

    let m = metrics.to_str().unwrap();
    let o = epistyle(dir.path(), &["compare", m, m, "--metric", "mrr"]);
    assert_eq!(o.status.code(), Some(2), "one run pairs two markets, too few for the test");
    assert!(stderr(&o).contains("at least 5"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_exits_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = epistyle(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("preprocess/posts.jsonl"), "{}", stderr(&o));
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = epistyle(dir.path(), &["synth", "--set", "synth.migrants=99"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = epistyle(dir.path(), &["synth", "--set", "bogus.key=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = epistyle(dir.path(), &["synth"]);
    assert_eq!(o.status.code(), Some(0));
    // A file where the stage directory should go.
    let w = dir.path().join("w");
    std::fs::remove_dir_all(w.join("ingest")).ok();
    std::fs::write(w.join("ingest"), "").unwrap();
    let o = epistyle(dir.path(), &["ingest"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn run_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for w in [&a, &b] {
        let o = epistyle(w, &["run", "--seed", "11"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("metrics.json"));
    }
    let read = |w: &Path| std::fs::read(w.join("w/eval/metrics.json")).unwrap();
    assert_eq!(read(&a), read(&b));
}
