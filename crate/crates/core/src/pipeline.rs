//! Stage runners over a work directory. Every stage reads its upstream
//! artifacts from `<work>/<stage>/`, writes into its own directory and
//! records a `manifest.json` there.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, ContextInit, TrainMode};
use crate::corpus::{
    assemble_episodes, chronological_split, extract_pgp_candidate_pairs, load_migration_labels, load_posts,
    read_episodes, read_posts, read_split_manifest, write_candidates, write_episodes, write_posts,
    write_split_manifest, Episode, EpisodeMode, Post, PostIndex, Preprocessor, Split, SplitSpec, UserRef,
};
use crate::error::{invalid, Error, Result};
use crate::eval::{
    centroid, integrated_gradients, metrics_report, read_embeddings_tsv, seen_novel_report, si_score, topk_sybil,
    attribution_records, wmw_paired, write_embeddings_tsv, write_json, write_jsonl, IgTarget, IndexEntry,
    MetricsReport, RetrievalIndex, SeenNovelReport, SybilCandidate,
};
use crate::hetgraph::{
    build_graph, derive_seed, export_context_init, read_walks, sample_walks, subforums_of, train_skipgram, write_walks,
    HetGraph, NodeEmbeddings, SkipGramConfig,
};
use crate::model::EpisodeModel;
use crate::synth::generate_corpus;
use crate::tokenize::{train_vocab, Vocab};
use crate::train::{build_registry, embed_all, train_multitask, write_run_log, MarketData, TrainConfig};

pub const STAGES: [&str; 15] = [
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
    "compare",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub inputs: Vec<InputDigest>,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    fn same_run(&self, other: &Manifest) -> bool {
        self.stage == other.stage
            && self.inputs == other.inputs
            && self.config_hash == other.config_hash
            && self.seed == other.seed
            && self.versions == other.versions
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn section_hash(cfg: &Config, sections: &[&str]) -> String {
    let full = serde_json::to_value(cfg).expect("config serialises");
    let picked: BTreeMap<&str, &serde_json::Value> = sections.iter().map(|s| (*s, &full[*s])).collect();
    let text = serde_json::to_string(&picked).expect("json");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn markets_of(posts: &[Post]) -> Vec<String> {
    let mut m: Vec<String> = posts.iter().map(|p| p.market.clone()).collect();
    m.sort();
    m.dedup();
    m
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(path.to_path_buf()))
    }
}

/// Per-run evaluation of one market.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketMetrics {
    pub overall: MetricsReport,
    pub groups: SeenNovelReport,
    pub episodes: usize,
    pub authors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub mode: TrainMode,
    /// One map of market metrics per replicate run.
    pub runs: Vec<BTreeMap<String, MarketMetrics>>,
    /// MRR averaged over runs, per market.
    pub mean_mrr: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SybilRow {
    pub market: String,
    pub author: String,
    pub candidate: SybilCandidate,
    /// Whether the candidate is a labelled alias of the author.
    pub labelled_match: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SybilReport {
    pub k: usize,
    pub rows: Vec<SybilRow>,
    pub labelled_authors: usize,
    pub recovered: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub pairs: Vec<(String, f64, f64)>,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
}

/// Which model file serves each market in each run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelIndex {
    pub runs: Vec<BTreeMap<String, PathBuf>>,
}

pub struct Pipeline {
    pub work: PathBuf,
    pub cfg: Config,
    pub skip_if_fresh: bool,
}

impl Pipeline {
    pub fn new(work: impl Into<PathBuf>, cfg: Config) -> Self {
        Self {
            work: work.into(),
            cfg,
            skip_if_fresh: false,
        }
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.work.join(stage)
    }

    pub fn path(&self, stage: &str, file: &str) -> PathBuf {
        self.work.join(stage).join(file)
    }

    /// Checks inputs, honours `skip_if_fresh`, runs `body` in a fresh stage
    /// directory and writes the manifest.
    fn run_stage<F>(&self, stage: &str, inputs: &[PathBuf], sections: &[&str], seed: Option<u64>, body: F) -> Result<StageStatus>
    where
        F: FnOnce(&Path) -> Result<()>,
    {
        for p in inputs {
            require(p)?;
        }
        let mut digests = Vec::with_capacity(inputs.len());
        for p in inputs {
            digests.push(InputDigest {
                path: p.clone(),
                sha256: file_digest(p)?,
            });
        }
        let versions = BTreeMap::from([("epistyle".to_string(), env!("CARGO_PKG_VERSION").to_string())]);
        let mut manifest = Manifest {
            stage: stage.to_string(),
            inputs: digests,
            config_hash: section_hash(&self.cfg, sections),
            seed,
            versions,
            outputs: Vec::new(),
        };
        let dir = self.dir(stage);
        let mpath = dir.join("manifest.json");
        if self.skip_if_fresh {
            if let Ok(text) = fs::read_to_string(&mpath) {
                if let Ok(old) = serde_json::from_str::<Manifest>(&text) {
                    if old.same_run(&manifest) && old.outputs.iter().all(|o| dir.join(o).exists()) {
                        info!("{stage}: up to date, skipped");
                        return Ok(StageStatus::Skipped);
                    }
                }
            }
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        body(&dir)?;
        manifest.outputs = list_files(&dir)?;
        write_json(&mpath, &manifest)?;
        info!("{stage}: wrote {} files", manifest.outputs.len());
        Ok(StageStatus::Ran)
    }

    pub fn synth(&self) -> Result<StageStatus> {
        let cfg = self.cfg.synth.clone();
        self.run_stage("synth", &[], &["synth"], Some(cfg.seed), |dir| {
            generate_corpus(&cfg)?.write(dir)
        })
    }

    /// Post files to ingest: the configured inputs, or the synth output.
    pub fn corpus_inputs(&self) -> Result<Vec<PathBuf>> {
        if !self.cfg.corpus.inputs.is_empty() {
            return Ok(self.cfg.corpus.inputs.clone());
        }
        let dir = self.dir("synth");
        let mut files: Vec<PathBuf> = self
            .cfg
            .synth
            .markets
            .iter()
            .map(|m| dir.join(format!("{m}.jsonl")))
            .collect();
        files.sort();
        if files.is_empty() {
            return invalid("corpus.inputs is empty and no synthetic markets are configured");
        }
        Ok(files)
    }

    /// The label file: configured, or the synth ground truth when the
    /// corpus is synthetic.
    pub fn labels_path(&self) -> Option<PathBuf> {
        match (&self.cfg.corpus.labels, self.cfg.corpus.inputs.is_empty()) {
            (Some(p), _) => Some(p.clone()),
            (None, true) => Some(self.path("synth", "labels.csv")),
            (None, false) => None,
        }
    }

    pub fn ingest(&self) -> Result<StageStatus> {
        let inputs = self.corpus_inputs()?;
        self.run_stage("ingest", &inputs, &["corpus"], None, |dir| {
            let mut posts = Vec::new();
            let mut skipped = BTreeMap::new();
            for path in &inputs {
                let Some(market) = path.file_stem().and_then(|s| s.to_str()) else {
                    return invalid(format!("cannot name a market after {}", path.display()));
                };
                let report = load_posts(path, market)?;
                if report.posts.is_empty() {
                    return invalid(format!("{} holds no valid posts", path.display()));
                }
                skipped.insert(market.to_string(), report.skipped.len());
                posts.extend(report.posts);
            }
            if markets_of(&posts).len() != inputs.len() {
                return invalid("two input files name the same market");
            }
            write_posts(&dir.join("posts.jsonl"), &posts)?;
            write_json(&dir.join("report.json"), &skipped)
        })
    }

    pub fn preprocess(&self) -> Result<StageStatus> {
        let input = self.path("ingest", "posts.jsonl");
        let rules = self.cfg.corpus.quote_rules.clone();
        self.run_stage("preprocess", &[input.clone()], &["corpus"], None, |dir| {
            let pre = Preprocessor::from_specs(&rules).map_err(Error::Invalid)?;
            let mut posts = read_posts(&input)?;
            for p in &mut posts {
                p.body = pre.apply(&p.body);
            }
            write_posts(&dir.join("posts.jsonl"), &posts)
        })
    }

    pub fn split(&self) -> Result<StageStatus> {
        let input = self.path("preprocess", "posts.jsonl");
        self.run_stage("split", &[input.clone()], &[], None, |dir| {
            let posts = read_posts(&input)?;
            let mut specs = Vec::new();
            for m in markets_of(&posts) {
                let own: Vec<Post> = posts.iter().filter(|p| p.market == m).cloned().collect();
                specs.push(chronological_split(&own)?);
            }
            write_split_manifest(&dir.join("split.csv"), &specs)
        })
    }

    fn clean_posts(&self) -> Result<Vec<Post>> {
        read_posts(&self.path("preprocess", "posts.jsonl"))
    }

    fn splits(&self, posts: &[Post]) -> Result<Vec<SplitSpec>> {
        read_split_manifest(&self.path("split", "split.csv"), posts)
    }

    fn side_posts(&self, posts: &[Post], specs: &[SplitSpec], market: &str, side: Split) -> Result<Vec<Post>> {
        let Some(spec) = specs.iter().find(|s| s.market == market) else {
            return invalid(format!("split manifest has no market {market}"));
        };
        Ok(spec.select(posts, side).into_iter().cloned().collect())
    }

    pub fn episodes(&self) -> Result<StageStatus> {
        let inputs = [self.path("preprocess", "posts.jsonl"), self.path("split", "split.csv")];
        let len = self.cfg.train.episode_len;
        let mode = if self.cfg.corpus.sampled_episodes {
            EpisodeMode::Sampled {
                seed: derive_seed(&[self.cfg.train.seed, 6]),
            }
        } else {
            EpisodeMode::Fixed
        };
        self.run_stage("episodes", &inputs, &["corpus", "train"], Some(self.cfg.train.seed), |dir| {
            let posts = self.clean_posts()?;
            let specs = self.splits(&posts)?;
            for (side, file) in [(Split::Train, "train.jsonl"), (Split::Test, "test.jsonl")] {
                let mut eps = Vec::new();
                for s in &specs {
                    eps.extend(assemble_episodes(&s.select(&posts, side), len, 1, mode));
                }
                write_episodes(&dir.join(file), &eps)?;
            }
            Ok(())
        })
    }

    pub fn pgp_pairs(&self) -> Result<StageStatus> {
        let input = self.path("ingest", "posts.jsonl");
        self.run_stage("pgp-pairs", &[input.clone()], &[], None, |dir| {
            let report = extract_pgp_candidate_pairs(&read_posts(&input)?);
            write_candidates(&dir.join("candidates.csv"), &report.candidates)?;
            write_json(
                &dir.join("report.json"),
                &serde_json::json!({"candidates": report.candidates.len(), "malformed_blocks": report.malformed_blocks}),
            )
        })
    }

    fn markets(&self) -> Result<Vec<String>> {
        Ok(markets_of(&self.clean_posts()?))
    }

    pub fn build_graph(&self) -> Result<StageStatus> {
        let inputs = [self.path("preprocess", "posts.jsonl"), self.path("split", "split.csv")];
        self.run_stage("build-graph", &inputs, &[], None, |dir| {
            let posts = self.clean_posts()?;
            let specs = self.splits(&posts)?;
            for s in &specs {
                let g = build_graph(&s.select(&posts, Split::Train));
                g.save(&dir.join(format!("{}.graph.json", s.market)))?;
            }
            Ok(())
        })
    }

    fn graph_files(&self, markets: &[String]) -> Vec<PathBuf> {
        markets
            .iter()
            .map(|m| self.path("build-graph", &format!("{m}.graph.json")))
            .collect()
    }

    pub fn walk(&self) -> Result<StageStatus> {
        require(&self.path("preprocess", "posts.jsonl"))?;
        let markets = self.markets()?;
        let inputs = self.graph_files(&markets);
        let g = &self.cfg.graph;
        self.run_stage("walk", &inputs, &["graph"], Some(g.seed), |dir| {
            let schemes = g.parsed_schemes()?;
            for (m, path) in markets.iter().zip(&inputs) {
                let graph = HetGraph::load(path)?;
                let walks = sample_walks(&graph, &schemes, g.walks_per_user, g.walk_length, derive_seed(&[g.seed, 7]))?;
                write_walks(&dir.join(format!("{m}.walks")), &graph, &walks)?;
            }
            Ok(())
        })
    }

    pub fn graph_embed(&self) -> Result<StageStatus> {
        require(&self.path("preprocess", "posts.jsonl"))?;
        let markets = self.markets()?;
        let mut inputs = self.graph_files(&markets);
        inputs.extend(markets.iter().map(|m| self.path("walk", &format!("{m}.walks"))));
        let g = &self.cfg.graph;
        let sg = SkipGramConfig {
            dim: self.cfg.model.context_dim,
            window: g.window,
            negatives: g.negatives,
            epochs: g.epochs,
            lr: g.lr,
            typed_negatives: g.typed_negatives,
            seed: derive_seed(&[g.seed, 8]),
        };
        self.run_stage("graph-embed", &inputs, &["graph", "model"], Some(g.seed), |dir| {
            for m in &markets {
                let graph = HetGraph::load(&self.path("build-graph", &format!("{m}.graph.json")))?;
                let walks = read_walks(&self.path("walk", &format!("{m}.walks")), &graph)?;
                let emb = train_skipgram(&graph, &walks, &sg)?;
                emb.save_tsv(&dir.join(format!("{m}.nodes.tsv")))?;
            }
            Ok(())
        })
    }

    pub fn train_tokenizer(&self) -> Result<StageStatus> {
        let inputs = [self.path("preprocess", "posts.jsonl"), self.path("split", "split.csv")];
        let t = &self.cfg.tokenizer;
        self.run_stage("train-tokenizer", &inputs, &["tokenizer"], None, |dir| {
            let posts = self.clean_posts()?;
            let specs = self.splits(&posts)?;
            let texts: Vec<&str> = specs
                .iter()
                .flat_map(|s| s.select(&posts, Split::Train))
                .map(|p| p.body.as_str())
                .collect();
            train_vocab(t.kind, &texts, t.size)?.save(&dir.join("vocab.txt"))
        })
    }

    fn market_data(&self, posts: &[Post], specs: &[SplitSpec], markets: &[String]) -> Result<Vec<MarketData>> {
        let mut out = Vec::new();
        for m in markets {
            let train_posts = self.side_posts(posts, specs, m, Split::Train)?;
            let context_init = match self.cfg.graph.init {
                ContextInit::Random => None,
                ContextInit::Pretrained => {
                    let graph = HetGraph::load(&self.path("build-graph", &format!("{m}.graph.json")))?;
                    let emb = NodeEmbeddings::load_tsv(&self.path("graph-embed", &format!("{m}.nodes.tsv")))?;
                    let refs: Vec<&Post> = train_posts.iter().collect();
                    Some(export_context_init(&emb, &graph, &subforums_of(&refs), self.cfg.model.context_dim)?)
                }
            };
            out.push(MarketData {
                name: m.clone(),
                posts: train_posts,
                context_init,
            });
        }
        Ok(out)
    }

    fn train_inputs(&self, markets: &[String]) -> Vec<PathBuf> {
        let mut inputs = vec![
            self.path("preprocess", "posts.jsonl"),
            self.path("split", "split.csv"),
            self.path("train-tokenizer", "vocab.txt"),
        ];
        if self.cfg.graph.init == ContextInit::Pretrained {
            inputs.extend(self.graph_files(markets));
            inputs.extend(markets.iter().map(|m| self.path("graph-embed", &format!("{m}.nodes.tsv"))));
        }
        if self.cfg.train.mode == TrainMode::Multitask {
            inputs.extend(self.labels_path());
        }
        inputs
    }

    /// Trains `runs` replicates. Run `r` uses seed `derive(seed, r)`.
    pub fn train(&self) -> Result<StageStatus> {
        require(&self.path("preprocess", "posts.jsonl"))?;
        let markets = self.markets()?;
        let inputs = self.train_inputs(&markets);
        let base = self.cfg.train.trainer();
        self.run_stage("train", &inputs, &["model", "train", "graph", "tokenizer"], Some(base.seed), |dir| {
            let posts = self.clean_posts()?;
            let specs = self.splits(&posts)?;
            let vocab = Vocab::load(&self.path("train-tokenizer", "vocab.txt"))?;
            let data = self.market_data(&posts, &specs, &markets)?;
            let labels = match (self.cfg.train.mode, self.labels_path()) {
                (TrainMode::Multitask, Some(p)) => load_migration_labels(&p)?,
                _ => Vec::new(),
            };
            let mut index = ModelIndex::default();
            for r in 0..base.runs.max(1) {
                let cfg = TrainConfig {
                    seed: derive_seed(&[base.seed, r as u64]),
                    ..base.clone()
                };
                let run_dir = dir.join(format!("run{r}"));
                fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
                let mut served = BTreeMap::new();
                let groups: Vec<(String, Vec<MarketData>)> = match self.cfg.train.mode {
                    TrainMode::Multitask => vec![("multitask".to_string(), data.clone())],
                    TrainMode::Single => data.iter().map(|d| (d.name.clone(), vec![d.clone()])).collect(),
                };
                for (name, group) in groups {
                    let cfg = match self.cfg.train.mode {
                        TrainMode::Single => TrainConfig { p_cross: 0.0, ..cfg.clone() },
                        TrainMode::Multitask => cfg.clone(),
                    };
                    info!("run {r}: training {name}");
                    let (model, registry) = build_registry(&group, &labels, &vocab, &self.cfg.model, &cfg)?;
                    let outcome = train_multitask(model, &registry, &cfg)?;
                    let file = PathBuf::from(format!("run{r}")).join(format!("{name}.model"));
                    outcome.model.save(&dir.join(&file))?;
                    write_run_log(&run_dir.join(format!("{name}.log.jsonl")), &outcome.log)?;
                    for d in &group {
                        served.insert(d.name.clone(), file.clone());
                    }
                }
                index.runs.push(served);
            }
            write_json(&dir.join("models.json"), &index)
        })
    }

    fn model_index(&self) -> Result<ModelIndex> {
        let path = self.path("train", "models.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Embeds `episodes` with the model serving their market in run `r`.
    fn embed_episodes(
        &self,
        run: &BTreeMap<String, PathBuf>,
        vocab: &Vocab,
        posts: &PostIndex<'_>,
        episodes: &[Episode],
    ) -> Result<Vec<IndexEntry>> {
        let mut by_model: BTreeMap<&PathBuf, Vec<usize>> = BTreeMap::new();
        for (i, e) in episodes.iter().enumerate() {
            let Some(file) = run.get(&e.market) else {
                return invalid(format!("no trained model serves market {}", e.market));
            };
            by_model.entry(file).or_default().push(i);
        }
        let mut out: Vec<Option<IndexEntry>> = vec![None; episodes.len()];
        for (file, idx) in by_model {
            let model = EpisodeModel::load(&self.dir("train").join(file))?;
            let mut inputs = Vec::with_capacity(idx.len());
            for &i in &idx {
                let e = &episodes[i];
                let Some(m) = model.market_index(&e.market) else {
                    return invalid(format!("model {} has no market {}", file.display(), e.market));
                };
                inputs.push(model.prepare_episode(vocab, &posts.resolve(e)?, m));
            }
            let embs = embed_all(&model, &inputs)?;
            for (&i, emb) in idx.iter().zip(embs) {
                let e = &episodes[i];
                out[i] = Some(IndexEntry {
                    id: episode_id(e),
                    market: e.market.clone(),
                    author: e.author.clone(),
                    embedding: emb,
                });
            }
        }
        Ok(out.into_iter().map(|e| e.expect("every episode embedded")).collect())
    }

    fn eval_inputs(&self) -> Vec<PathBuf> {
        vec![
            self.path("preprocess", "posts.jsonl"),
            self.path("episodes", "train.jsonl"),
            self.path("episodes", "test.jsonl"),
            self.path("train-tokenizer", "vocab.txt"),
            self.path("train", "models.json"),
        ]
    }

    /// Test-period retrieval metrics per market and run; also exports the
    /// run-0 test embeddings and SI scores.
    pub fn eval(&self) -> Result<StageStatus> {
        let inputs = self.eval_inputs();
        let e = &self.cfg.eval;
        self.run_stage("eval", &inputs, &["eval", "train"], Some(e.seed), |dir| {
            let posts = self.clean_posts()?;
            let index = PostIndex::new(&posts);
            let vocab = Vocab::load(&self.path("train-tokenizer", "vocab.txt"))?;
            let test = read_episodes(&self.path("episodes", "test.jsonl"))?;
            let seen: HashSet<String> = read_episodes(&self.path("episodes", "train.jsonl"))?
                .into_iter()
                .map(|e| e.author)
                .collect();
            let models = self.model_index()?;
            let mut file = MetricsFile {
                mode: self.cfg.train.mode,
                runs: Vec::new(),
                mean_mrr: BTreeMap::new(),
            };
            for (r, run) in models.runs.iter().enumerate() {
                let entries = self.embed_episodes(run, &vocab, &index, &test)?;
                let mut per_market = BTreeMap::new();
                for m in markets_of(&posts) {
                    let own: Vec<IndexEntry> = entries.iter().filter(|x| x.market == m).cloned().collect();
                    if own.is_empty() {
                        warn!("market {m} has no test episodes");
                        continue;
                    }
                    let idx = RetrievalIndex::new(own)?;
                    let all: Vec<usize> = (0..idx.len()).collect();
                    let seed = derive_seed(&[e.seed, r as u64]);
                    let seen_here: HashSet<String> = seen.clone();
                    per_market.insert(
                        m.clone(),
                        MarketMetrics {
                            overall: metrics_report(&idx, &all, e.kappa, seed)?,
                            groups: seen_novel_report(&idx, &seen_here, e.kappa, seed),
                            episodes: idx.len(),
                            authors: idx.entries().iter().map(|x| &x.author).collect::<HashSet<_>>().len(),
                        },
                    );
                }
                if r == 0 {
                    let joint = RetrievalIndex::new(entries)?;
                    write_embeddings_tsv(&dir.join("embeddings.tsv"), &joint)?;
                    let mut si = BTreeMap::new();
                    for x in joint.entries() {
                        let key = format!("{}:{}", x.market, x.author);
                        if si.contains_key(&key) {
                            continue;
                        }
                        let own: Vec<IndexEntry> = joint
                            .entries()
                            .iter()
                            .filter(|y| y.market == x.market)
                            .cloned()
                            .collect();
                        if let Ok(s) = RetrievalIndex::new(own).and_then(|i| si_score(&i, &x.author, e.si_normalize)) {
                            si.insert(key, s);
                        }
                    }
                    write_json(&dir.join("si.json"), &si)?;
                }
                file.runs.push(per_market);
            }
            let n = file.runs.len() as f64;
            for run in &file.runs {
                for (m, mm) in run {
                    *file.mean_mrr.entry(m.clone()).or_default() += mm.overall.mrr / n;
                }
            }
            write_json(&dir.join("metrics.json"), &file)
        })
    }

    /// Top-k cross-market candidates for every author in the run-0 test
    /// embeddings, scored against the labels when present.
    pub fn sybil(&self) -> Result<StageStatus> {
        let mut inputs = vec![self.path("eval", "embeddings.tsv")];
        let labels = self.labels_path().filter(|p| p.exists());
        inputs.extend(labels.clone());
        let k = self.cfg.eval.sybil_k;
        self.run_stage("sybil", &inputs, &["eval"], None, |dir| {
            let index = RetrievalIndex::new(read_embeddings_tsv(&inputs[0])?)?;
            let labels = match &labels {
                Some(p) => load_migration_labels(p)?,
                None => Vec::new(),
            };
            let report = sybil_report(&index, &labels, k)?;
            write_json(&dir.join("sybil.json"), &report)
        })
    }

    /// Integrated gradients for the first test episodes, targeting the
    /// author's test-centroid cosine under the run-0 model.
    pub fn attribute(&self) -> Result<StageStatus> {
        let mut inputs = self.eval_inputs();
        inputs.push(self.path("eval", "embeddings.tsv"));
        let e = &self.cfg.eval;
        self.run_stage("attribute", &inputs, &["eval"], None, |dir| {
            let posts = self.clean_posts()?;
            let pindex = PostIndex::new(&posts);
            let vocab = Vocab::load(&self.path("train-tokenizer", "vocab.txt"))?;
            let test = read_episodes(&self.path("episodes", "test.jsonl"))?;
            let joint = RetrievalIndex::new(read_embeddings_tsv(&self.path("eval", "embeddings.tsv"))?)?;
            let models = self.model_index()?;
            let Some(run) = models.runs.first() else {
                return invalid("models.json lists no runs");
            };
            let mut records = Vec::new();
            let mut summary = Vec::new();
            let mut loaded: BTreeMap<PathBuf, EpisodeModel> = BTreeMap::new();
            for ep in test.iter().take(e.attribute_episodes) {
                let Some(file) = run.get(&ep.market) else {
                    return invalid(format!("no trained model serves market {}", ep.market));
                };
                if !loaded.contains_key(file) {
                    loaded.insert(file.clone(), EpisodeModel::load(&self.dir("train").join(file))?);
                }
                let model = &loaded[file];
                let m = model.market_index(&ep.market).expect("model serves market");
                let ps = pindex.resolve(ep)?;
                let input = model.prepare_episode(&vocab, &ps, m);
                let own: Vec<IndexEntry> = joint.entries().iter().filter(|x| x.market == ep.market).cloned().collect();
                let Some(c) = centroid(&RetrievalIndex::new(own)?, &ep.author) else {
                    return invalid(format!("no embeddings for {}:{}", ep.market, ep.author));
                };
                let attr = integrated_gradients(model, &input, &IgTarget::Cosine(c), e.ig_steps)?;
                let ids: Vec<String> = ps.iter().map(|p| p.post_id.clone()).collect();
                records.extend(attribution_records(&ids, &input, &attr, &vocab));
                summary.push(serde_json::json!({
                    "episode_id": episode_id(ep),
                    "target": attr.target,
                    "baseline_target": attr.baseline_target,
                    "total": attr.total(),
                    "completeness_error": attr.completeness_error(),
                }));
            }
            write_jsonl(&dir.join("attributions.jsonl"), &records)?;
            write_json(&dir.join("summary.json"), &summary)
        })
    }

    /// Paired signed-rank test of `metric` (`mrr` or `recall@k`) between two
    /// metrics files, pairing by run and market.
    pub fn compare(&self, a: &Path, b: &Path, metric: &str) -> Result<StageStatus> {
        let inputs = [a.to_path_buf(), b.to_path_buf()];
        self.run_stage("compare", &inputs, &[], None, |dir| {
            let cmp = compare_metrics(&read_metrics(a)?, &read_metrics(b)?, metric)?;
            write_json(&dir.join("compare.json"), &cmp)
        })
    }

    /// Every stage but `compare`, in order; returns the metrics path.
    pub fn run_all(&self) -> Result<PathBuf> {
        if self.cfg.corpus.inputs.is_empty() {
            self.synth()?;
        }
        self.ingest()?;
        self.preprocess()?;
        self.split()?;
        self.episodes()?;
        self.pgp_pairs()?;
        if self.cfg.graph.init == ContextInit::Pretrained {
            self.build_graph()?;
            self.walk()?;
            self.graph_embed()?;
        }
        self.train_tokenizer()?;
        self.train()?;
        self.eval()?;
        self.sybil()?;
        self.attribute()?;
        Ok(self.path("eval", "metrics.json"))
    }
}

fn episode_id(e: &Episode) -> String {
    format!("{}:{}", e.market, e.post_ids.first().map(String::as_str).unwrap_or(""))
}

pub fn read_metrics(path: &Path) -> Result<MetricsFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn metric_value(m: &MetricsReport, metric: &str) -> Result<f64> {
    if metric == "mrr" {
        return Ok(m.mrr);
    }
    let k = metric
        .strip_prefix("recall@")
        .and_then(|k| k.parse::<usize>().ok())
        .and_then(|k| m.recall.get(&k));
    match k {
        Some(&v) => Ok(v),
        None => invalid(format!("unknown metric {metric:?} (expected mrr or recall@k)")),
    }
}

pub fn compare_metrics(a: &MetricsFile, b: &MetricsFile, metric: &str) -> Result<Comparison> {
    if a.runs.len() != b.runs.len() {
        return invalid(format!("run counts differ: {} vs {}", a.runs.len(), b.runs.len()));
    }
    let mut pairs = Vec::new();
    for (r, (ra, rb)) in a.runs.iter().zip(&b.runs).enumerate() {
        for (m, ma) in ra {
            let Some(mb) = rb.get(m) else {
                return invalid(format!("market {m} missing from the second metrics file"));
            };
            pairs.push((
                format!("run{r}:{m}"),
                metric_value(&ma.overall, metric)?,
                metric_value(&mb.overall, metric)?,
            ));
        }
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let n = pairs.len().max(1) as f64;
    Ok(Comparison {
        metric: metric.to_string(),
        p_value: wmw_paired(&xs, &ys)?,
        mean_a: xs.iter().sum::<f64>() / n,
        mean_b: ys.iter().sum::<f64>() / n,
        pairs,
    })
}

/// Sybil candidates for every (market, author) in `index`. An author with a
/// same-author label counts as recovered when the candidate is one of its
/// labelled aliases.
pub fn sybil_report(index: &RetrievalIndex, labels: &[crate::corpus::MigrationLabel], k: usize) -> Result<SybilReport> {
    let mut aliases: BTreeMap<UserRef, Vec<UserRef>> = BTreeMap::new();
    for l in labels.iter().filter(|l| l.same_author) {
        aliases.entry(l.user_a.clone()).or_default().push(l.user_b.clone());
        aliases.entry(l.user_b.clone()).or_default().push(l.user_a.clone());
    }
    let mut users: Vec<(String, String)> = index
        .entries()
        .iter()
        .map(|e| (e.market.clone(), e.author.clone()))
        .collect();
    users.sort();
    users.dedup();
    let mut rows = Vec::new();
    let (mut labelled, mut recovered) = (0, 0);
    for (market, author) in users {
        let candidate = topk_sybil(index, &market, &author, k)?;
        let labelled_match = aliases.get(&UserRef::new(&market, &author)).map(|a| {
            a.contains(&UserRef::new(&candidate.market, &candidate.author))
        });
        if let Some(hit) = labelled_match {
            labelled += 1;
            recovered += hit as usize;
        }
        rows.push(SybilRow {
            market,
            author,
            candidate,
            labelled_match,
        });
    }
    Ok(SybilReport {
        k,
        rows,
        labelled_authors: labelled,
        recovered,
    })
}
