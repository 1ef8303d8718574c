//! Pipeline configuration: one TOML file with a section per stage group.
//! Command-line overrides are applied to the parsed TOML tree before it is
//! deserialised, so they go through the same validation as file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::hetgraph::{MetapathScheme, DEFAULT_SCHEMES};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::tokenize::VocabKind;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// JSONL post files; each file's stem names its market.
    pub inputs: Vec<PathBuf>,
    /// Migration-label CSV. Optional.
    pub labels: Option<PathBuf>,
    /// Quote stripping rules, `bbcode:TAG` or `regex:PATTERN`.
    pub quote_rules: Vec<String>,
    /// Episodes drawn at random offsets instead of consecutive windows.
    pub sampled_episodes: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            labels: None,
            quote_rules: vec!["bbcode:quote".into()],
            sampled_episodes: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub kind: VocabKind,
    pub size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            kind: VocabKind::Bpe,
            size: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextInit {
    Pretrained,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// How the subforum context tables are initialised.
    pub init: ContextInit,
    pub schemes: Vec<String>,
    pub walks_per_user: usize,
    pub walk_length: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub typed_negatives: bool,
    pub seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            init: ContextInit::Pretrained,
            schemes: DEFAULT_SCHEMES.iter().map(|s| s.to_string()).collect(),
            walks_per_user: 10,
            walk_length: 40,
            window: 7,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            typed_negatives: true,
            seed: 0,
        }
    }
}

impl GraphConfig {
    pub fn parsed_schemes(&self) -> Result<Vec<MetapathScheme>> {
        if self.schemes.is_empty() {
            return invalid("graph.schemes is empty");
        }
        self.schemes.iter().map(|s| s.parse()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// One model per market.
    Single,
    /// One model over every market plus the cross-market task.
    Multitask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub kappa: usize,
    pub sybil_k: usize,
    pub ig_steps: usize,
    /// Number of test episodes to attribute.
    pub attribute_episodes: usize,
    pub si_normalize: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kappa: 1000,
            sybil_k: 10,
            ig_steps: 50,
            attribute_episodes: 10,
            si_normalize: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

/// `[train]`: the trainer settings plus the single/multitask switch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub runs: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub val_fraction: f64,
    pub episode_len: usize,
    pub min_episodes: usize,
    pub p_cross: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from_trainer(TrainMode::Multitask, &TrainConfig::default())
    }
}

impl TrainSection {
    pub fn from_trainer(mode: TrainMode, t: &TrainConfig) -> Self {
        Self {
            mode,
            batch_size: t.batch_size,
            epochs: t.epochs,
            runs: t.runs,
            lr: t.lr,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            val_fraction: t.val_fraction,
            episode_len: t.episode_len,
            min_episodes: t.min_episodes,
            p_cross: t.p_cross,
            clip_norm: t.clip_norm,
            seed: t.seed,
        }
    }

    pub fn trainer(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            runs: self.runs,
            lr: self.lr,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            val_fraction: self.val_fraction,
            episode_len: self.episode_len,
            min_episodes: self.min_episodes,
            p_cross: self.p_cross,
            clip_norm: self.clip_norm,
            seed: self.seed,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Config = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults when `None`) and applies the
    /// `section.key=value` overrides in order. Relative corpus paths are
    /// resolved against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let Some(path) = path else {
            return Self::from_toml("", overrides);
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.corpus.inputs.iter_mut().chain(cfg.corpus.labels.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Sets every seed in the config.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.graph.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.trainer().validate()?;
        self.graph.parsed_schemes()?;
        if self.graph.walks_per_user == 0 || self.graph.walk_length < 2 {
            return invalid("graph.walks_per_user must be positive and graph.walk_length at least 2");
        }
        if self.eval.kappa == 0 || self.eval.sybil_k == 0 || self.eval.ig_steps == 0 {
            return invalid("eval.kappa, eval.sybil_k and eval.ig_steps must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form (sorted keys).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        return invalid(format!("override {spec:?} is not key=value"));
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return invalid(format!("override key {key:?} is malformed"));
    }
    let value = parse_value(raw.trim());
    let mut table = tree;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return invalid(format!("override {key:?}: {part} is not a section")),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A TOML literal when the text parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
