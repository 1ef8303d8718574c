use std::path::Path;

use epistyle::config::{Config, ContextInit, TrainMode};
use epistyle::corpus::{MigrationLabel, UserRef};
use epistyle::eval::{IndexEntry, RetrievalIndex};
use epistyle::pipeline::{compare_metrics, read_metrics, sybil_report, Pipeline, StageStatus};
use epistyle::tokenize::VocabKind;
use epistyle::Error;

const FAST: &str = r#"
[synth]
posts_per_author = 40
authors_per_market = 8
migrants = 2

[tokenizer]
kind = "bpe"
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
scale = 16.0

[train]
batch_size = 32
epochs = 2
runs = 2
lr = 3e-3

[graph]
walks_per_user = 2
walk_length = 10
epochs = 1

[eval]
attribute_episodes = 1
ig_steps = 8
"#;

fn fast(overrides: &[&str]) -> Config {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    Config::from_toml(FAST, &o).unwrap()
}

#[test]
fn empty_config_is_the_default() {
    assert_eq!(Config::from_toml("", &[]).unwrap(), Config::default());
    assert_eq!(Config::load(None, &[]).unwrap(), Config::default());
}

#[test]
fn overrides_win_over_file_values() {
    let c = fast(&["train.epochs=7", "tokenizer.kind=char", "graph.init=random", "train.mode=single"]);
    assert_eq!(c.train.epochs, 7);
    assert_eq!(c.tokenizer.kind, VocabKind::Char);
    assert_eq!(c.graph.init, ContextInit::Random);
    assert_eq!(c.train.mode, TrainMode::Single);
    assert_eq!(c.model.token_dim, 8);
    let d = fast(&["model.filter_sizes=[4]", "synth.markets=[\"x\", \"y\", \"z\"]"]);
    assert_eq!(d.model.filter_sizes, vec![4]);
    assert_eq!(d.synth.markets.len(), 3);
}

#[test]
fn bad_configs_are_validation_errors() {
    for (text, o) in [
        ("[train]\nepisodes = 3", vec![]),
        ("[nonsense]\nx = 1", vec![]),
        ("", vec!["train.episode_len=0".to_string()]),
        ("", vec!["train.lr".to_string()]),
        ("", vec!["graph.schemes=[\"UXU\"]".to_string()]),
        ("", vec!["model.pooling=lstm".to_string()]),
        ("[train\n", vec![]),
    ] {
        let e = Config::from_toml(text, &o).unwrap_err();
        assert!(e.is_validation(), "{text:?} {o:?}: {e}");
    }
}

#[test]
fn config_file_paths_resolve_against_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "[corpus]\ninputs = [\"data/a.jsonl\", \"/abs/b.jsonl\"]\nlabels = \"l.csv\"\n").unwrap();
    let c = Config::load(Some(&path), &[]).unwrap();
    assert_eq!(c.corpus.inputs[0], dir.path().join("data/a.jsonl"));
    assert_eq!(c.corpus.inputs[1], Path::new("/abs/b.jsonl"));
    assert_eq!(c.corpus.labels.as_deref(), Some(dir.path().join("l.csv").as_path()));
    let missing = Config::load(Some(&dir.path().join("none.toml")), &[]).unwrap_err();
    assert!(matches!(missing, Error::Missing(_)));
}

#[test]
fn seed_and_hash() {
    let mut c = fast(&[]);
    let h = c.hash();
    assert_eq!(h, fast(&[]).hash());
    c.set_seed(9);
    assert_eq!((c.synth.seed, c.graph.seed, c.train.seed, c.eval.seed), (9, 9, 9, 9));
    assert_ne!(c.hash(), h);
    let round = Config::from_toml(&c.to_toml(), &[]).unwrap();
    assert_eq!(round, c);
}

#[test]
fn missing_upstream_artifact_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(dir.path(), fast(&[]));
    match p.preprocess().unwrap_err() {
        Error::Missing(path) => assert_eq!(path, dir.path().join("ingest/posts.jsonl")),
        e => panic!("{e}"),
    }
    assert!(p.train().unwrap_err().is_validation());
}

#[test]
fn full_pipeline_is_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let a = Pipeline::new(dir.path().join("a"), fast(&[]));
    let b = Pipeline::new(dir.path().join("b"), fast(&[]));
    let (ma, mb) = (a.run_all().unwrap(), b.run_all().unwrap());
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
    let m = read_metrics(&ma).unwrap();
    assert_eq!(m.runs.len(), 2);
    for run in &m.runs {
        assert_eq!(run.len(), 2);
        for mm in run.values() {
            assert!(mm.overall.mrr > 0.0 && mm.overall.mrr <= 1.0);
            assert_eq!(mm.authors, 8);
        }
    }
    for f in [
        "synth/labels.csv",
        "pgp-pairs/candidates.csv",
        "walk/alpha.walks",
        "graph-embed/bravo.nodes.tsv",
        "train/run1/multitask.model",
        "train/run0/multitask.log.jsonl",
        "eval/embeddings.tsv",
        "eval/si.json",
        "sybil/sybil.json",
        "attribute/attributions.jsonl",
        "attribute/manifest.json",
    ] {
        assert!(a.work.join(f).exists(), "{f}");
    }
    let other = Pipeline::new(dir.path().join("c"), fast(&["train.seed=5"]));
    let mc = other.run_all().unwrap();
    assert_ne!(std::fs::read(&ma).unwrap(), std::fs::read(&mc).unwrap());
}

#[test]
fn skip_if_fresh_reruns_only_changed_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(dir.path(), fast(&["train.runs=1"]));
    p.run_all().unwrap();
    let before = std::fs::read(p.path("train", "manifest.json")).unwrap();
    p.skip_if_fresh = true;
    assert_eq!(p.ingest().unwrap(), StageStatus::Skipped);
    assert_eq!(p.train().unwrap(), StageStatus::Skipped);
    assert_eq!(std::fs::read(p.path("train", "manifest.json")).unwrap(), before);

    p.cfg.eval.kappa = 50;
    assert_eq!(p.train().unwrap(), StageStatus::Skipped);
    assert_eq!(p.eval().unwrap(), StageStatus::Ran);

    p.cfg.train.epochs = 1;
    assert_eq!(p.train().unwrap(), StageStatus::Ran);

    std::fs::remove_file(p.path("split", "split.csv")).unwrap();
    assert_eq!(p.split().unwrap(), StageStatus::Ran);
    p.skip_if_fresh = false;
    assert_eq!(p.split().unwrap(), StageStatus::Ran);
}

#[test]
fn single_mode_serves_each_market_with_its_own_model() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(dir.path(), fast(&["train.mode=single", "train.runs=1", "graph.init=random"]));
    p.run_all().unwrap();
    assert!(!p.dir("build-graph").exists());
    let models = std::fs::read_to_string(p.path("train", "models.json")).unwrap();
    assert!(models.contains("alpha.model") && models.contains("bravo.model"), "{models}");
}

#[test]
fn compare_pairs_by_run_and_market() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(dir.path(), fast(&["train.runs=3", "eval.attribute_episodes=0"]));
    let m = p.run_all().unwrap();
    let same = compare_metrics(&read_metrics(&m).unwrap(), &read_metrics(&m).unwrap(), "mrr").unwrap();
    assert_eq!(same.pairs.len(), 6);
    assert_eq!(same.p_value, 1.0);
    let mut worse = read_metrics(&m).unwrap();
    for run in &mut worse.runs {
        for mm in run.values_mut() {
            mm.overall.recall.insert(5, mm.overall.recall[&5] / 2.0);
        }
    }
    let c = compare_metrics(&read_metrics(&m).unwrap(), &worse, "recall@5").unwrap();
    assert!((c.p_value - 2.0 / 64.0).abs() < 1e-12, "{}", c.p_value);
    assert!(compare_metrics(&worse, &worse, "recall@7").unwrap_err().is_validation());
    assert_eq!(p.compare(&m, &m, "mrr").unwrap(), StageStatus::Ran);
    assert!(p.path("compare", "compare.json").exists());
}

fn entry(id: &str, market: &str, author: &str, v: [f64; 2]) -> IndexEntry {
    IndexEntry {
        id: id.into(),
        market: market.into(),
        author: author.into(),
        embedding: v.to_vec(),
    }
}

#[test]
fn sybil_report_scores_labelled_aliases() {
    let index = RetrievalIndex::new(vec![
        entry("1", "a", "x", [1.0, 0.0]),
        entry("2", "a", "y", [0.0, 1.0]),
        entry("3", "b", "x2", [0.9, 0.1]),
        entry("4", "b", "y2", [0.1, 0.9]),
    ])
    .unwrap();
    let label = |a: &str, b: &str| MigrationLabel {
        user_a: UserRef::new("a", a),
        user_b: UserRef::new("b", b),
        same_author: true,
        evidence: String::new(),
    };
    let r = sybil_report(&index, &[label("x", "x2"), label("y", "x2")], 1).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert_eq!(r.labelled_authors, 3);
    assert_eq!(r.recovered, 2);
    assert_eq!(r.rows[0].candidate.author, "x2");
}
