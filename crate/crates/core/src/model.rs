//! Episode embedding network and metric-learning heads.
//!
//! A post is embedded as `[text | weekday | subforum]`. An episode's post
//! rows are pooled by a mean or by a small transformer without positional
//! information. Heads map a batch of episode embeddings to a scalar loss.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use epistyle_numcore::nn::{linear, multihead_attention, AttentionWeights};
use epistyle_numcore::{checkpoint, Graph, Margin, MultiSimilarity, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Post;
use crate::error::{invalid, Error, Result};
use crate::hetgraph::derive_seed;
use crate::tokenize::{Vocab, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Sm,
    Cf,
    Af,
    Ms,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "transformer" => Ok(Pooling::Transformer),
            _ => invalid(format!("unknown pooling {s:?} (expected mean|transformer)")),
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sm" => Ok(HeadKind::Sm),
            "cf" => Ok(HeadKind::Cf),
            "af" => Ok(HeadKind::Af),
            "ms" => Ok(HeadKind::Ms),
            _ => invalid(format!("unknown loss {s:?} (expected sm|cf|af|ms)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub context_dim: usize,
    pub filter_sizes: Vec<usize>,
    pub filters: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub transformer_dim: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_ff: usize,
    pub output_dim: usize,
    pub max_tokens: usize,
    pub loss: HeadKind,
    pub cf_margin: f64,
    pub af_margin_degrees: f64,
    pub scale: f64,
    pub ms_alpha: f64,
    pub ms_beta: f64,
    pub ms_base: f64,
    pub ms_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_dim: 32,
            text_dim: 128,
            time_dim: 64,
            context_dim: 128,
            filter_sizes: vec![2, 3, 4, 5],
            filters: 32,
            dropout: 0.1,
            pooling: Pooling::Mean,
            transformer_dim: 128,
            transformer_layers: 4,
            transformer_heads: 4,
            transformer_ff: 128,
            output_dim: 32,
            max_tokens: 512,
            loss: HeadKind::Sm,
            cf_margin: 0.35,
            af_margin_degrees: 28.6,
            scale: 64.0,
            ms_alpha: 2.0,
            ms_beta: 50.0,
            ms_base: 0.5,
            ms_epsilon: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("token_dim", self.token_dim),
            ("text_dim", self.text_dim),
            ("time_dim", self.time_dim),
            ("context_dim", self.context_dim),
            ("filters", self.filters),
            ("transformer_dim", self.transformer_dim),
            ("transformer_heads", self.transformer_heads),
            ("transformer_ff", self.transformer_ff),
            ("output_dim", self.output_dim),
            ("max_tokens", self.max_tokens),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return invalid(format!("model.{name} must be positive"));
        }
        if self.filter_sizes.is_empty() || self.filter_sizes.contains(&0) {
            return invalid("model.filter_sizes must be non-empty and positive");
        }
        if self.max_tokens < self.max_filter_width() {
            return invalid("model.max_tokens is below the widest filter");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("model.dropout {} outside [0, 1)", self.dropout));
        }
        if self.transformer_dim % self.transformer_heads != 0 {
            return invalid("model.transformer_dim must be divisible by transformer_heads");
        }
        if !(self.scale > 0.0) {
            return invalid("model.scale must be positive");
        }
        Ok(())
    }

    pub fn max_filter_width(&self) -> usize {
        self.filter_sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn cnn_width(&self) -> usize {
        self.filter_sizes.len() * self.filters
    }

    pub fn post_dim(&self) -> usize {
        self.text_dim + self.time_dim + self.context_dim
    }

    pub fn episode_dim(&self) -> usize {
        match self.pooling {
            Pooling::Mean => self.post_dim(),
            Pooling::Transformer => self.output_dim,
        }
    }

    pub fn margin(&self, kind: HeadKind) -> Option<Margin> {
        match kind {
            HeadKind::Cf => Some(Margin::Additive(self.cf_margin)),
            HeadKind::Af => Some(Margin::Angular(self.af_margin_degrees.to_radians())),
            _ => None,
        }
    }

    pub fn multi_similarity(&self) -> MultiSimilarity {
        MultiSimilarity {
            alpha: self.ms_alpha,
            beta: self.ms_beta,
            base: self.ms_base,
            epsilon: self.ms_epsilon,
        }
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    attn: [ParamId; 8],
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct TransformerIds {
    input: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    final_ln: (ParamId, ParamId),
    output: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct SharedIds {
    tokens: ParamId,
    convs: Vec<(ParamId, ParamId)>,
    fc: (ParamId, ParamId),
    time: ParamId,
    transformer: Option<TransformerIds>,
}

/// Per-market subforum table; the last row stands for unseen subforums.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarketContext {
    pub name: String,
    pub subforums: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    table: Option<ParamId>,
}

impl MarketContext {
    pub fn row_of(&self, subforum: &str) -> usize {
        self.index.get(subforum).copied().unwrap_or(self.subforums.len())
    }

    pub fn unknown_row(&self) -> usize {
        self.subforums.len()
    }

    pub fn table(&self) -> ParamId {
        self.table.expect("registered market")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Head {
    pub name: String,
    pub kind: HeadKind,
    pub classes: usize,
    #[serde(skip)]
    weight: Option<ParamId>,
}

impl Head {
    /// Class weight matrix `[classes, E]`; multi-similarity heads have none.
    pub fn weight(&self) -> Option<ParamId> {
        self.weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostInput {
    pub tokens: Vec<usize>,
    pub weekday: usize,
    pub context_row: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeInput {
    pub market: usize,
    pub posts: Vec<PostInput>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    vocab_size: usize,
    markets: Vec<MarketContext>,
    heads: Vec<Head>,
}

#[derive(Clone, Debug)]
pub struct EpisodeModel {
    cfg: ModelConfig,
    vocab_size: usize,
    store: ParamStore,
    shared: SharedIds,
    markets: Vec<MarketContext>,
    heads: Vec<Head>,
    seed: u64,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

fn add_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<(ParamId, ParamId)> {
    let w = store.add(format!("{name}.w"), uniform(&[fan_in, fan_out], fan_in, rng))?;
    let b = store.add(format!("{name}.b"), uniform(&[fan_out], fan_in, rng))?;
    Ok((w, b))
}

fn add_norm(store: &mut ParamStore, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
    let g = store.add(format!("{name}.gain"), Tensor::new(vec![d], vec![1.0; d])?)?;
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?;
    Ok((g, b))
}

impl EpisodeModel {
    /// Shared parameters only; markets and heads are registered afterwards.
    pub fn new(cfg: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab_size <= PAD_ID as usize {
            return invalid("vocabulary is empty");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tokens = store.add("text.tokens", Tensor::randn(&[vocab_size, cfg.token_dim], 1.0, &mut rng))?;
        let mut convs = Vec::new();
        for &w in &cfg.filter_sizes {
            let fan_in = w * cfg.token_dim;
            let k = store.add(format!("text.conv{w}.w"), uniform(&[cfg.filters, fan_in], fan_in, &mut rng))?;
            let b = store.add(format!("text.conv{w}.b"), uniform(&[cfg.filters], fan_in, &mut rng))?;
            convs.push((k, b));
        }
        let fc = add_linear(&mut store, "text.fc", cfg.cnn_width(), cfg.text_dim, &mut rng)?;
        let time = store.add("time.weekday", Tensor::randn(&[7, cfg.time_dim], 1.0, &mut rng))?;
        let transformer = match cfg.pooling {
            Pooling::Mean => None,
            Pooling::Transformer => {
                let d = cfg.transformer_dim;
                let input = add_linear(&mut store, "pool.in", cfg.post_dim(), d, &mut rng)?;
                let mut layers = Vec::new();
                for l in 0..cfg.transformer_layers {
                    let p = format!("pool.layer{l}");
                    let ln1 = add_norm(&mut store, &format!("{p}.ln1"), d)?;
                    let mut attn = Vec::new();
                    for n in ["q", "k", "v", "o"] {
                        let (w, b) = add_linear(&mut store, &format!("{p}.attn.{n}"), d, d, &mut rng)?;
                        attn.extend([w, b]);
                    }
                    let ln2 = add_norm(&mut store, &format!("{p}.ln2"), d)?;
                    let ff1 = add_linear(&mut store, &format!("{p}.ff1"), d, cfg.transformer_ff, &mut rng)?;
                    let ff2 = add_linear(&mut store, &format!("{p}.ff2"), cfg.transformer_ff, d, &mut rng)?;
                    layers.push(LayerIds {
                        ln1,
                        attn: attn.try_into().unwrap(),
                        ln2,
                        ff1,
                        ff2,
                    });
                }
                let final_ln = add_norm(&mut store, "pool.ln", d)?;
                let output = add_linear(&mut store, "pool.out", d, cfg.output_dim, &mut rng)?;
                Some(TransformerIds {
                    input,
                    layers,
                    final_ln,
                    output,
                })
            }
        };
        Ok(Self {
            cfg,
            vocab_size,
            store,
            shared: SharedIds {
                tokens,
                convs,
                fc,
                time,
                transformer,
            },
            markets: Vec::new(),
            heads: Vec::new(),
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn markets(&self) -> &[MarketContext] {
        &self.markets
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn market_index(&self, name: &str) -> Option<usize> {
        self.markets.iter().position(|m| m.name == name)
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name)
    }

    pub fn token_table(&self) -> ParamId {
        self.shared.tokens
    }

    /// Parameters used by every task.
    pub fn shared_params(&self) -> Vec<ParamId> {
        let s = &self.shared;
        let mut ids = vec![s.tokens, s.fc.0, s.fc.1, s.time];
        for (w, b) in &s.convs {
            ids.extend([*w, *b]);
        }
        if let Some(t) = &s.transformer {
            ids.extend([t.input.0, t.input.1, t.final_ln.0, t.final_ln.1, t.output.0, t.output.1]);
            for l in &t.layers {
                ids.extend([l.ln1.0, l.ln1.1, l.ln2.0, l.ln2.1, l.ff1.0, l.ff1.1, l.ff2.0, l.ff2.1]);
                ids.extend(l.attn);
            }
        }
        ids.sort();
        ids
    }

    /// Registers a market's subforum table. `init` supplies one row per
    /// subforum (for example skip-gram subforum vectors); without it rows
    /// are drawn from N(0, 1). The unknown-subforum row is always random.
    pub fn add_market(&mut self, name: &str, subforums: &[String], init: Option<&Tensor>) -> Result<usize> {
        if self.market_index(name).is_some() {
            return invalid(format!("market {name} registered twice"));
        }
        let d = self.cfg.context_dim;
        let n = subforums.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 1, self.markets.len() as u64]));
        let mut table = Tensor::randn(&[n + 1, d], 1.0, &mut rng);
        if let Some(init) = init {
            if init.shape() != [n, d] {
                return invalid(format!("context init has shape {:?}, expected [{n}, {d}]", init.shape()));
            }
            table.data_mut()[..n * d].copy_from_slice(init.data());
        }
        let id = self.store.add(format!("context.{name}"), table)?;
        self.markets.push(MarketContext {
            name: name.to_string(),
            subforums: subforums.to_vec(),
            index: subforums.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect(),
            table: Some(id),
        });
        Ok(self.markets.len() - 1)
    }

    pub fn add_head(&mut self, name: &str, kind: HeadKind, classes: usize) -> Result<usize> {
        if self.head_index(name).is_some() {
            return invalid(format!("head {name} registered twice"));
        }
        if classes == 0 {
            return invalid(format!("head {name} has no classes"));
        }
        let e = self.cfg.episode_dim();
        let weight = match kind {
            HeadKind::Ms => None,
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 2, self.heads.len() as u64]));
                Some(self.store.add(format!("head.{name}"), uniform(&[classes, e], e, &mut rng))?)
            }
        };
        self.heads.push(Head {
            name: name.to_string(),
            kind,
            classes,
            weight,
        });
        Ok(self.heads.len() - 1)
    }

    pub fn prepare_post(&self, vocab: &Vocab, post: &Post, market: usize) -> PostInput {
        let mut tokens: Vec<usize> = vocab
            .encode(&post.body)
            .into_iter()
            .take(self.cfg.max_tokens)
            .map(|t| t as usize)
            .collect();
        while tokens.len() < self.cfg.max_filter_width() {
            tokens.push(PAD_ID as usize);
        }
        PostInput {
            tokens,
            weekday: post.weekday() as usize,
            context_row: self.markets[market].row_of(&post.subforum),
        }
    }

    pub fn prepare_episode(&self, vocab: &Vocab, posts: &[&Post], market: usize) -> EpisodeInput {
        EpisodeInput {
            market,
            posts: posts.iter().map(|p| self.prepare_post(vocab, p, market)).collect(),
        }
    }

    fn check_input(&self, ep: &EpisodeInput) -> Result<()> {
        if ep.market >= self.markets.len() {
            return invalid(format!("episode refers to market {} of {}", ep.market, self.markets.len()));
        }
        if ep.posts.is_empty() {
            return invalid("episode has no posts");
        }
        for p in &ep.posts {
            if let Some(t) = p.tokens.iter().find(|&&t| t >= self.vocab_size) {
                return invalid(format!("token id {t} out of range for vocabulary of {}", self.vocab_size));
            }
            if p.weekday > 6 || p.context_row > self.markets[ep.market].unknown_row() {
                return invalid("post weekday or context row out of range");
            }
        }
        Ok(())
    }

    /// Token embedding matrix `[n, token_dim]` for one post.
    pub fn token_embeddings(&self, g: &mut Graph<'_>, tokens: &[usize]) -> Result<Var> {
        let table = g.param(self.shared.tokens);
        Ok(g.embedding(table, tokens)?)
    }

    /// CNN text vector from a token embedding matrix.
    pub fn text_from_embeddings(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut pooled = Vec::with_capacity(self.shared.convs.len());
        for &(w, b) in &self.shared.convs {
            let (w, b) = (g.param(w), g.param(b));
            let c = g.conv1d(x, w, b)?;
            let r = g.relu(c);
            pooled.push(g.max_over_time(r)?);
        }
        let h = g.concat(&pooled, 0)?;
        let h = g.dropout(h, self.cfg.dropout)?;
        let (w, b) = (g.param(self.shared.fc.0), g.param(self.shared.fc.1));
        Ok(linear(g, h, w, b)?)
    }

    /// Convolution outputs before the ReLU, one `[n - w + 1, filters]`
    /// matrix per filter width.
    pub fn conv_preactivations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(&self.store);
        let xv = g.input(x.clone());
        let mut out = Vec::with_capacity(self.shared.convs.len());
        for &(w, b) in &self.shared.convs {
            let (w, b) = (g.param(w), g.param(b));
            let c = g.conv1d(xv, w, b)?;
            out.push(g.value(c).clone());
        }
        Ok(out)
    }

    /// Post rows `[L, post_dim]`. `token_inputs` optionally replaces each
    /// post's token embedding matrix.
    pub fn embed_posts(&self, g: &mut Graph<'_>, ep: &EpisodeInput, token_inputs: Option<&[Var]>) -> Result<Var> {
        self.check_input(ep)?;
        let mut text_rows = Vec::with_capacity(ep.posts.len());
        for (i, p) in ep.posts.iter().enumerate() {
            let x = match token_inputs {
                Some(xs) => xs[i],
                None => self.token_embeddings(g, &p.tokens)?,
            };
            let t = self.text_from_embeddings(g, x)?;
            text_rows.push(g.reshape(t, &[1, self.cfg.text_dim])?);
        }
        let text = g.concat(&text_rows, 0)?;
        let days: Vec<usize> = ep.posts.iter().map(|p| p.weekday).collect();
        let time_table = g.param(self.shared.time);
        let time = g.embedding(time_table, &days)?;
        let rows: Vec<usize> = ep.posts.iter().map(|p| p.context_row).collect();
        let ctx_table = g.param(self.markets[ep.market].table());
        let ctx = g.embedding(ctx_table, &rows)?;
        Ok(g.concat(&[text, time, ctx], 1)?)
    }

    /// Reorders rows by value so pooling reductions run in an order that
    /// does not depend on the order of the posts.
    fn canonical_rows(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let t = g.value(x);
        let mut order: Vec<usize> = (0..t.rows()).collect();
        order.sort_by(|&a, &b| {
            t.row(a)
                .iter()
                .zip(t.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        if order.iter().enumerate().all(|(i, &j)| i == j) {
            return Ok(x);
        }
        Ok(g.embedding(x, &order)?)
    }

    pub fn pool(&self, g: &mut Graph<'_>, rows: Var) -> Result<Var> {
        let x = self.canonical_rows(g, rows)?;
        match &self.shared.transformer {
            None => Ok(g.mean(x, 0)?),
            Some(t) => {
                let p = self.cfg.dropout;
                let (w, b) = (g.param(t.input.0), g.param(t.input.1));
                let mut h = linear(g, x, w, b)?;
                for l in &t.layers {
                    let (lg, lb) = (g.param(l.ln1.0), g.param(l.ln1.1));
                    let a = g.layer_norm(h, lg, lb)?;
                    let v: Vec<Var> = l.attn.iter().map(|&id| g.param(id)).collect();
                    let aw = AttentionWeights {
                        wq: v[0],
                        bq: v[1],
                        wk: v[2],
                        bk: v[3],
                        wv: v[4],
                        bv: v[5],
                        wo: v[6],
                        bo: v[7],
                    };
                    let a = multihead_attention(g, a, &aw, self.cfg.transformer_heads)?;
                    let a = g.dropout(a, p)?;
                    h = g.add(h, a)?;
                    let (lg, lb) = (g.param(l.ln2.0), g.param(l.ln2.1));
                    let f = g.layer_norm(h, lg, lb)?;
                    let (w1, b1) = (g.param(l.ff1.0), g.param(l.ff1.1));
                    let f = linear(g, f, w1, b1)?;
                    let f = g.relu(f);
                    let (w2, b2) = (g.param(l.ff2.0), g.param(l.ff2.1));
                    let f = linear(g, f, w2, b2)?;
                    let f = g.dropout(f, p)?;
                    h = g.add(h, f)?;
                }
                let (lg, lb) = (g.param(t.final_ln.0), g.param(t.final_ln.1));
                let h = g.layer_norm(h, lg, lb)?;
                let m = g.mean(h, 0)?;
                let (w, b) = (g.param(t.output.0), g.param(t.output.1));
                Ok(linear(g, m, w, b)?)
            }
        }
    }

    /// Episode embedding, a vector of `episode_dim()`.
    pub fn embed_episode(&self, g: &mut Graph<'_>, ep: &EpisodeInput) -> Result<Var> {
        let rows = self.embed_posts(g, ep, None)?;
        self.pool(g, rows)
    }

    /// Evaluation-mode embedding.
    pub fn embed(&self, ep: &EpisodeInput) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let v = self.embed_episode(&mut g, ep)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Scalar loss of `head` on episode embeddings `x: [B, E]`.
    pub fn head_loss(&self, g: &mut Graph<'_>, head: usize, x: Var, labels: &[usize]) -> Result<Var> {
        let h = self
            .heads
            .get(head)
            .ok_or_else(|| Error::Invalid(format!("no head {head}")))?;
        if let Some(&y) = labels.iter().find(|&&y| y >= h.classes) {
            return invalid(format!("label {y} out of range for head {} with {} classes", h.name, h.classes));
        }
        match h.kind {
            HeadKind::Sm => {
                let w = g.param(h.weight.unwrap());
                let wt = g.transpose(w)?;
                let logits = g.matmul(x, wt)?;
                Ok(g.cross_entropy(logits, labels)?)
            }
            HeadKind::Cf | HeadKind::Af => {
                let xn = g.l2_normalize(x)?;
                let w = g.param(h.weight.unwrap());
                let wn = g.l2_normalize(w)?;
                let wt = g.transpose(wn)?;
                let cos = g.matmul(xn, wt)?;
                let logits = g.margin_logits(cos, labels, self.cfg.margin(h.kind).unwrap(), self.cfg.scale)?;
                Ok(g.cross_entropy(logits, labels)?)
            }
            HeadKind::Ms => {
                if labels.len() < 2 {
                    return invalid("multi-similarity needs a batch of at least 2");
                }
                let xn = g.l2_normalize(x)?;
                let xt = g.transpose(xn)?;
                let sim = g.matmul(xn, xt)?;
                Ok(g.multi_similarity(sim, labels, self.cfg.multi_similarity())?)
            }
        }
    }

    /// Writes `path` (parameters) and `path` with a `.json` extension
    /// (configuration, markets and heads).
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        checkpoint::write_checkpoint(&self.store, std::io::BufWriter::new(f))?;
        let meta = ModelMeta {
            config: self.cfg.clone(),
            vocab_size: self.vocab_size,
            markets: self.markets.clone(),
            heads: self.heads.clone(),
        };
        let mpath = meta_path(path);
        std::fs::write(&mpath, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mpath = meta_path(path);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        let mut model = Self::new(meta.config, meta.vocab_size, 0)?;
        for m in &meta.markets {
            model.add_market(&m.name, &m.subforums, None)?;
        }
        for h in &meta.heads {
            model.add_head(&h.name, h.kind, h.classes)?;
        }
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let loaded = checkpoint::read_checkpoint(std::io::BufReader::new(f))?;
        checkpoint::restore_into(&mut model.store, &loaded)?;
        Ok(model)
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}
