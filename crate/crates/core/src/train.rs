//! Single-task and multitask training.
//!
//! Every step draws one task (a market, or the cross-market identity task),
//! draws a batch of random contiguous windows from that task's authors and
//! takes one Adam step on the task head's loss. Episodes in a batch are
//! embedded on separate tapes in parallel; their gradients are summed in
//! batch order so a run is reproducible for a given seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use epistyle_numcore::{Adam, Gradients, Graph, PlateauScheduler, Tensor};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_episodes, build_cross_dataset, EpisodeMode, MigrationLabel, Post, UserRef};
use crate::error::{invalid, Error, Result};
use crate::hetgraph::{derive_seed, subforums_of};
use crate::model::{EpisodeInput, EpisodeModel, ModelConfig, PostInput};
use crate::tokenize::Vocab;

pub const CROSS_TASK: &str = "cross";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
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

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 30,
            runs: 5,
            lr: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 5,
            val_fraction: 0.1,
            episode_len: 5,
            min_episodes: 2,
            p_cross: 0.01,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.runs == 0 {
            return invalid("train.batch_size, epochs and runs must be positive");
        }
        if !(1..=9).contains(&self.episode_len) {
            return invalid(format!("train.episode_len {} outside 1..=9", self.episode_len));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return invalid("train.lr and clip_norm must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return invalid("train.plateau_factor must be in (0, 1)");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return invalid("train.val_fraction must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.p_cross) {
            return invalid("train.p_cross must be in [0, 1]");
        }
        Ok(())
    }
}

/// One market's training-period posts.
#[derive(Clone, Debug)]
pub struct MarketData {
    pub name: String,
    pub posts: Vec<Post>,
    /// Subforum rows for the context table, in `subforums_of` order.
    pub context_init: Option<Tensor>,
}

/// Training posts of one identity, with its task-local label.
#[derive(Clone, Debug)]
struct Unit {
    label: usize,
    market: usize,
    posts: Vec<PostInput>,
    /// Number of non-overlapping episodes the posts hold.
    weight: usize,
}

#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub head: usize,
    pub classes: usize,
    units: Vec<Unit>,
    cumulative: Vec<usize>,
    pub validation: Vec<(EpisodeInput, usize)>,
}

impl Task {
    pub fn is_cross(&self) -> bool {
        self.name == CROSS_TASK
    }

    /// Training episodes the task holds.
    pub fn episode_count(&self) -> usize {
        self.cumulative.last().copied().unwrap_or(0)
    }

    /// Training episodes per label.
    pub fn label_weights(&self) -> Vec<usize> {
        let mut w = vec![0; self.classes];
        for u in &self.units {
            w[u.label] += u.weight;
        }
        w
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub episodes: Vec<EpisodeInput>,
    pub labels: Vec<usize>,
}

/// Market tasks plus an optional cross-market task.
#[derive(Clone, Debug)]
pub struct TaskRegistry {
    pub tasks: Vec<Task>,
    pub p_cross: f64,
}

impl TaskRegistry {
    fn cross_index(&self) -> Option<usize> {
        self.tasks.iter().position(Task::is_cross)
    }

    /// The cross task with probability `p_cross`, otherwise a market task
    /// with probability proportional to its episode count.
    pub fn sample_task<R: Rng>(&self, rng: &mut R) -> usize {
        let cross = self.cross_index();
        if let Some(c) = cross {
            if rng.gen::<f64>() < self.p_cross {
                return c;
            }
        }
        let markets: Vec<usize> = (0..self.tasks.len()).filter(|&i| Some(i) != cross).collect();
        let total: usize = markets.iter().map(|&i| self.tasks[i].episode_count()).sum();
        let mut x = rng.gen_range(0..total);
        for &i in &markets {
            let n = self.tasks[i].episode_count();
            if x < n {
                return i;
            }
            x -= n;
        }
        unreachable!("weights sum to total")
    }

    pub fn total_episodes(&self) -> usize {
        self.tasks.iter().map(Task::episode_count).sum()
    }
}

/// `n` random windows of `len` posts; identities are drawn in proportion to
/// how many episodes they hold, so authors may repeat.
pub fn sample_batch<R: Rng>(task: &Task, n: usize, len: usize, rng: &mut R) -> Result<Batch> {
    let total = task.episode_count();
    if total == 0 {
        return invalid(format!("task {} has no training episodes", task.name));
    }
    let mut episodes = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen_range(0..total);
        let u = &task.units[task.cumulative.partition_point(|&c| c <= x)];
        let start = rng.gen_range(0..=u.posts.len() - len);
        episodes.push(EpisodeInput {
            market: u.market,
            posts: u.posts[start..start + len].to_vec(),
        });
        labels.push(u.label);
    }
    Ok(Batch { episodes, labels })
}

fn sort_by_time(posts: &mut [&Post]) {
    posts.sort_by(|a, b| (a.timestamp, &a.post_id).cmp(&(b.timestamp, &b.post_id)));
}

/// Splits an identity's posts into validation episodes (a random
/// `val_fraction` of its fixed episodes, at least one episode left for
/// training) and the remaining training posts.
fn split_identity<'a>(posts: &[&'a Post], len: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<Vec<&'a Post>>, Vec<&'a Post>) {
    let count = posts.len() / len;
    let n_val = ((count as f64 * val_fraction).round() as usize).min(count.saturating_sub(1));
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, count, n_val).into_vec();
    chosen.sort_unstable();
    let mut val = Vec::new();
    let mut train = Vec::new();
    let mut k = 0;
    for e in 0..count {
        if chosen.get(k) == Some(&e) {
            val.push(posts[e * len..(e + 1) * len].to_vec());
            k += 1;
        } else {
            train.extend_from_slice(&posts[e * len..(e + 1) * len]);
        }
    }
    train.extend_from_slice(&posts[count * len..]);
    sort_by_time(&mut train);
    (val, train)
}

fn make_task(
    name: &str,
    head: usize,
    identities: Vec<(usize, usize, Vec<&Post>)>,
    classes: usize,
    model: &EpisodeModel,
    vocab: &Vocab,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Task {
    let mut units = Vec::new();
    let mut validation = Vec::new();
    for (label, market, posts) in identities {
        let (val, train) = split_identity(&posts, cfg.episode_len, cfg.val_fraction, rng);
        for ep in val {
            validation.push((model.prepare_episode(vocab, &ep, market), label));
        }
        let weight = train.len() / cfg.episode_len;
        units.push(Unit {
            label,
            market,
            posts: train.iter().map(|p| model.prepare_post(vocab, p, market)).collect(),
            weight,
        });
    }
    let cumulative = units
        .iter()
        .scan(0, |acc, u| {
            *acc += u.weight;
            Some(*acc)
        })
        .collect();
    Task {
        name: name.to_string(),
        head,
        classes,
        units,
        cumulative,
        validation,
    }
}

/// Author labels of a market task: eligible authors in name order.
pub fn eligible_authors(posts: &[Post], cfg: &TrainConfig) -> Vec<String> {
    let refs: Vec<&Post> = posts.iter().collect();
    let mut authors: Vec<String> = assemble_episodes(&refs, cfg.episode_len, cfg.min_episodes, EpisodeMode::Fixed)
        .into_iter()
        .map(|e| e.author)
        .collect();
    authors.dedup();
    authors
}

/// Builds the model (shared modules, one context table and head per
/// market, a head for the cross task) and the task registry.
pub fn build_registry(
    markets: &[MarketData],
    labels: &[MigrationLabel],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(EpisodeModel, TaskRegistry)> {
    cfg.validate()?;
    if markets.is_empty() {
        return invalid("no markets to train on");
    }
    let mut model = EpisodeModel::new(model_cfg.clone(), vocab.len(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 3]));
    let mut tasks = Vec::new();
    let mut all_episodes = Vec::new();
    for m in markets {
        let refs: Vec<&Post> = m.posts.iter().collect();
        if refs.iter().any(|p| p.market != m.name) {
            return invalid(format!("market {} holds posts from another market", m.name));
        }
        let subforums = subforums_of(&refs);
        let mi = model.add_market(&m.name, &subforums, m.context_init.as_ref())?;
        let authors = eligible_authors(&m.posts, cfg);
        if authors.is_empty() {
            return invalid(format!(
                "market {} has no author with {} episodes of {} posts",
                m.name, cfg.min_episodes, cfg.episode_len
            ));
        }
        let head = model.add_head(&m.name, model_cfg.loss, authors.len())?;
        let mut by_author: BTreeMap<&str, Vec<&Post>> = BTreeMap::new();
        for p in &refs {
            by_author.entry(&p.author).or_default().push(p);
        }
        let identities = authors
            .iter()
            .enumerate()
            .map(|(label, a)| {
                let mut posts = by_author.remove(a.as_str()).unwrap();
                sort_by_time(&mut posts);
                (label, mi, posts)
            })
            .collect();
        tasks.push(make_task(&m.name, head, identities, authors.len(), &model, vocab, cfg, &mut rng));
        all_episodes.extend(assemble_episodes(&refs, cfg.episode_len, cfg.min_episodes, EpisodeMode::Fixed));
    }

    let mut p_cross = cfg.p_cross;
    let cross = build_cross_dataset(labels, &all_episodes);
    if cross.is_empty() || cross.classes.len() < 2 {
        if p_cross > 0.0 {
            warn!("cross-market dataset is empty; cross task disabled");
        }
        p_cross = 0.0;
    } else if p_cross > 0.0 {
        let head = model.add_head(CROSS_TASK, model_cfg.loss, cross.classes.len())?;
        let mut identities = Vec::new();
        for (c, members) in cross.classes.iter().enumerate() {
            for UserRef { market, username } in members {
                let mi = markets.iter().position(|m| &m.name == market).unwrap();
                let mut posts: Vec<&Post> = markets[mi].posts.iter().filter(|p| &p.author == username).collect();
                sort_by_time(&mut posts);
                identities.push((c, model.market_index(market).unwrap(), posts));
            }
        }
        tasks.push(make_task(CROSS_TASK, head, identities, cross.classes.len(), &model, vocab, cfg, &mut rng));
    }
    Ok((model, TaskRegistry { tasks, p_cross }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub task_losses: BTreeMap<String, f64>,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: EpisodeModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged(format!("{what} is {v}")))
    }
}

/// Gradients of the task loss on one batch, and the loss.
pub fn batch_gradients(model: &EpisodeModel, head: usize, batch: &Batch, seed: u64) -> Result<(f64, Gradients)> {
    let store = model.store();
    let e = model.config().episode_dim();
    let tapes: Vec<(Graph<'_>, epistyle_numcore::Var)> = batch
        .episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut g = Graph::with_mode(store, true, derive_seed(&[seed, i as u64]));
            let v = model.embed_episode(&mut g, ep)?;
            Ok((g, v))
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(tapes.len() * e);
    for (g, v) in &tapes {
        data.extend_from_slice(g.value(*v).data());
    }
    let mut lg = Graph::new(store);
    let x = lg.input(Tensor::new(vec![tapes.len(), e], data)?);
    let loss = model.head_loss(&mut lg, head, x, &batch.labels)?;
    let loss_value = check_finite(lg.value(loss).item(), "training loss")?;
    let back = lg.backward(loss)?;
    let dx = back.wrt(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tapes.len() * e]);
    let mut grads = back.into_params();
    let parts: Vec<Gradients> = tapes
        .par_iter()
        .enumerate()
        .map(|(i, (g, v))| Ok(g.backward_with(*v, &dx[i * e..(i + 1) * e])?.into_params()))
        .collect::<Result<_>>()?;
    for p in &parts {
        grads.accumulate(p);
    }
    Ok((loss_value, grads))
}

/// Evaluation-mode embeddings, computed in parallel.
pub fn embed_all(model: &EpisodeModel, episodes: &[EpisodeInput]) -> Result<Vec<Vec<f64>>> {
    episodes.par_iter().map(|ep| model.embed(ep)).collect()
}

/// Mean loss of a task head over its validation episodes, in batches.
pub fn validation_loss(model: &EpisodeModel, task: &Task, batch_size: usize) -> Result<Option<f64>> {
    if task.validation.is_empty() {
        return Ok(None);
    }
    let inputs: Vec<EpisodeInput> = task.validation.iter().map(|(e, _)| e.clone()).collect();
    let embs = embed_all(model, &inputs)?;
    let e = model.config().episode_dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for (chunk, labels) in embs.chunks(batch_size.max(2)).zip(task.validation.chunks(batch_size.max(2))) {
        if chunk.len() < 2 && model.heads()[task.head].kind == crate::model::HeadKind::Ms {
            continue;
        }
        let labels: Vec<usize> = labels.iter().map(|(_, l)| *l).collect();
        let mut g = Graph::new(model.store());
        let x = g.input(Tensor::new(vec![chunk.len(), e], chunk.concat())?);
        let loss = model.head_loss(&mut g, task.head, x, &labels)?;
        total += g.value(loss).item() * chunk.len() as f64;
        count += chunk.len();
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Runs `epochs` epochs of `ceil(total episodes / batch)` steps each and
/// keeps the parameters of the epoch with the lowest task-averaged
/// validation loss (earliest on ties).
pub fn train_multitask(mut model: EpisodeModel, registry: &TaskRegistry, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if registry.tasks.is_empty() || registry.total_episodes() == 0 {
        return invalid("no training episodes");
    }
    let steps = registry.total_episodes().div_ceil(cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 4]));
    let mut adam = Adam::default();
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut best: Option<(f64, usize, epistyle_numcore::ParamStore)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_index = 0u64;
    for epoch in 1..=cfg.epochs {
        let lr = sched.lr();
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for _ in 0..steps {
            let t = registry.sample_task(&mut rng);
            let task = &registry.tasks[t];
            let batch = sample_batch(task, cfg.batch_size, cfg.episode_len, &mut rng)?;
            let (loss, mut grads) = batch_gradients(&model, task.head, &batch, derive_seed(&[cfg.seed, 5, step_index]))?;
            step_index += 1;
            grads.clip_global_norm(cfg.clip_norm);
            adam.step(model.store_mut(), &grads, lr)?;
            let s = sums.entry(task.name.clone()).or_default();
            s.0 += loss;
            s.1 += 1;
        }
        let task_losses: BTreeMap<String, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        let mut vals = Vec::new();
        for task in &registry.tasks {
            if let Some(v) = validation_loss(&model, task, cfg.batch_size)? {
                vals.push(v);
            }
        }
        let val_loss = if vals.is_empty() {
            warn!("no validation episodes; selecting on training loss");
            task_losses.values().sum::<f64>() / task_losses.len().max(1) as f64
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        check_finite(val_loss, "validation loss")?;
        info!("epoch {epoch}: val {val_loss:.4} lr {lr:.2e} {task_losses:?}");
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, model.store().clone()));
        }
        sched.observe(val_loss);
        log.push(EpochLog {
            epoch,
            task_losses,
            val_loss,
            lr,
        });
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    *model.store_mut() = store;
    Ok(TrainOutcome { model, log, best_epoch })
}

/// Training on one market: the multitask loop with a single market task.
pub fn train_single(market: &MarketData, vocab: &Vocab, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let single = TrainConfig { p_cross: 0.0, ..cfg.clone() };
    let (model, registry) = build_registry(std::slice::from_ref(market), &[], vocab, model_cfg, &single)?;
    train_multitask(model, &registry, &single)
}

pub fn write_run_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for entry in log {
        serde_json::to_writer(&mut w, entry)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_run_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
