//! Typed forum graph, meta-path random walks and skip-gram node embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Post;
use crate::error::{invalid, Error, Result};
use epistyle_numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeType {
    U,
    S,
    T,
    P,
}

impl NodeType {
    pub const ALL: [NodeType; 4] = [NodeType::U, NodeType::S, NodeType::T, NodeType::P];

    fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            NodeType::U => 'U',
            NodeType::S => 'S',
            NodeType::T => 'T',
            NodeType::P => 'P',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        match c {
            'U' => Some(NodeType::U),
            'S' => Some(NodeType::S),
            'T' => Some(NodeType::T),
            'P' => Some(NodeType::P),
            _ => None,
        }
    }

    /// Whether an edge type joins `self` and `other`.
    pub fn links(self, other: NodeType) -> bool {
        use NodeType::*;
        matches!(
            (self, other),
            (U, T) | (T, U) | (U, P) | (P, U) | (T, P) | (P, T) | (S, T) | (T, S)
        )
    }
}

/// A node-type sequence that starts and ends at a user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetapathScheme(Vec<NodeType>);

pub const DEFAULT_SCHEMES: [&str; 7] = ["UPTSTPU", "UTSTPU", "UPTSTU", "UTSTU", "UPTPU", "UPTU", "UTPU"];

impl MetapathScheme {
    pub fn types(&self) -> &[NodeType] {
        &self.0
    }

    /// Type required at step `i` when the scheme is repeated, sharing each
    /// terminal `U` with the next repetition's start.
    pub fn type_at(&self, i: usize) -> NodeType {
        let period = self.0.len() - 1;
        self.0[i % period]
    }

    pub fn defaults() -> Vec<MetapathScheme> {
        DEFAULT_SCHEMES.iter().map(|s| s.parse().unwrap()).collect()
    }
}

impl FromStr for MetapathScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let types: Option<Vec<NodeType>> = s.trim().chars().map(NodeType::from_letter).collect();
        let Some(types) = types else {
            return invalid(format!("scheme {s:?} uses letters other than U S T P"));
        };
        if types.len() < 3 || types[0] != NodeType::U || *types.last().unwrap() != NodeType::U {
            return invalid(format!("scheme {s:?} must start and end with U and have an inner node"));
        }
        if let Some(w) = types.windows(2).find(|w| !w[0].links(w[1])) {
            return invalid(format!("scheme {s:?}: no {}-{} edge type", w[0].letter(), w[1].letter()));
        }
        Ok(Self(types))
    }
}

impl fmt::Display for MetapathScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|t| write!(f, "{}", t.letter()))
    }
}

/// Serialised form: node names per type and the undirected edge list.
#[derive(Serialize, Deserialize)]
struct GraphFile {
    users: Vec<String>,
    subforums: Vec<String>,
    threads: Vec<String>,
    posts: Vec<String>,
    edges: Vec<(u32, u32)>,
}

/// Nodes are numbered by type (all users, then subforums, threads, posts),
/// sorted by name within a type.
#[derive(Clone, Debug, Default)]
pub struct HetGraph {
    names: [Vec<String>; 4],
    offsets: [usize; 5],
    neighbors: Vec<[Vec<u32>; 4]>,
    edges: Vec<(u32, u32)>,
}

impl HetGraph {
    fn from_parts(names: [Vec<String>; 4], mut edges: Vec<(u32, u32)>) -> Result<Self> {
        let mut offsets = [0usize; 5];
        for t in 0..4 {
            offsets[t + 1] = offsets[t] + names[t].len();
        }
        let n = offsets[4];
        for (k, list) in names.iter().enumerate() {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return invalid(format!("{} node names not sorted and unique", NodeType::ALL[k].letter()));
            }
        }
        edges.iter_mut().for_each(|e| *e = (e.0.min(e.1), e.0.max(e.1)));
        edges.sort_unstable();
        edges.dedup();
        let mut g = HetGraph {
            names,
            offsets,
            neighbors: vec![Default::default(); n],
            edges,
        };
        for &(a, b) in &g.edges {
            if a as usize >= n || b as usize >= n {
                return invalid(format!("edge ({a}, {b}) refers to a missing node"));
            }
            let (ta, tb) = (g.node_type(a), g.node_type(b));
            if !ta.links(tb) {
                return invalid(format!("edge ({a}, {b}) joins {ta:?} and {tb:?}"));
            }
            g.neighbors[a as usize][tb.index()].push(b);
            g.neighbors[b as usize][ta.index()].push(a);
        }
        for buckets in &mut g.neighbors {
            buckets.iter_mut().for_each(|b| b.sort_unstable());
        }
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets[4]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.num_nodes() == 0
    }

    pub fn count(&self, t: NodeType) -> usize {
        self.names[t.index()].len()
    }

    pub fn nodes_of(&self, t: NodeType) -> std::ops::Range<u32> {
        self.offsets[t.index()] as u32..self.offsets[t.index() + 1] as u32
    }

    pub fn node_type(&self, id: u32) -> NodeType {
        let id = id as usize;
        NodeType::ALL[(0..4).rev().find(|&k| id >= self.offsets[k]).unwrap()]
    }

    pub fn name(&self, id: u32) -> &str {
        let t = self.node_type(id);
        &self.names[t.index()][id as usize - self.offsets[t.index()]]
    }

    /// Walk-file label such as `U12`.
    pub fn label(&self, id: u32) -> String {
        let t = self.node_type(id);
        format!("{}{}", t.letter(), id as usize - self.offsets[t.index()])
    }

    pub fn parse_label(&self, label: &str) -> Result<u32> {
        let mut chars = label.chars();
        let t = chars.next().and_then(NodeType::from_letter);
        let idx = chars.as_str().parse::<usize>().ok();
        match (t, idx) {
            (Some(t), Some(i)) if i < self.count(t) => Ok((self.offsets[t.index()] + i) as u32),
            _ => invalid(format!("bad node label {label:?}")),
        }
    }

    pub fn lookup(&self, t: NodeType, name: &str) -> Option<u32> {
        self.names[t.index()]
            .binary_search_by(|n| n.as_str().cmp(name))
            .ok()
            .map(|i| (self.offsets[t.index()] + i) as u32)
    }

    pub fn neighbors(&self, id: u32, t: NodeType) -> &[u32] {
        &self.neighbors[id as usize][t.index()]
    }

    pub fn degree(&self, id: u32) -> usize {
        self.neighbors[id as usize].iter().map(Vec::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let [users, subforums, threads, posts] = self.names.clone();
        let file = GraphFile {
            users,
            subforums,
            threads,
            posts,
            edges: self.edges.clone(),
        };
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(f), &file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let file: GraphFile = serde_json::from_reader(std::io::BufReader::new(f))?;
        Self::from_parts([file.users, file.subforums, file.threads, file.posts], file.edges)
    }
}

/// Graph over one market's posts. Post nodes are keyed by post id; a
/// thread is linked to every subforum its posts were filed under.
pub fn build_graph(posts: &[&Post]) -> HetGraph {
    let mut names: [BTreeSet<&str>; 4] = Default::default();
    for p in posts {
        names[0].insert(&p.author);
        names[1].insert(&p.subforum);
        names[2].insert(&p.thread_id);
        names[3].insert(&p.post_id);
    }
    let names: [Vec<String>; 4] = names.map(|s| s.into_iter().map(str::to_string).collect());
    let mut offsets = [0usize; 4];
    for t in 1..4 {
        offsets[t] = offsets[t - 1] + names[t - 1].len();
    }
    let id = |t: usize, name: &str| (offsets[t] + names[t].binary_search_by(|n| n.as_str().cmp(name)).unwrap()) as u32;
    let mut edges = Vec::with_capacity(posts.len() * 3);
    for p in posts {
        let (u, s, t, q) = (id(0, &p.author), id(1, &p.subforum), id(2, &p.thread_id), id(3, &p.post_id));
        edges.push((u, q));
        edges.push((t, q));
        edges.push((s, t));
        if p.is_thread_start {
            edges.push((u, t));
        }
    }
    HetGraph::from_parts(names, edges).expect("graph built from consistent parts")
}

pub type Walk = Vec<u32>;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &p| mix(acc ^ mix(p)))
}

/// One walk following `scheme` from `start`. Stops early when the next
/// required type has no neighbour.
pub fn walk_from<R: Rng>(graph: &HetGraph, scheme: &MetapathScheme, start: u32, length: usize, rng: &mut R) -> Walk {
    let mut walk = Vec::with_capacity(length);
    if length == 0 {
        return walk;
    }
    walk.push(start);
    let mut cur = start;
    for step in 1..length {
        let next = graph.neighbors(cur, scheme.type_at(step));
        if next.is_empty() {
            break;
        }
        cur = next[rng.gen_range(0..next.len())];
        walk.push(cur);
    }
    walk
}

/// `walks_per_user` walks from every user. Walk `j` of the `i`-th user
/// follows scheme `(i + j) mod k`, so each user gets an even share of the
/// schemes and remainders rotate across users.
pub fn sample_walks(
    graph: &HetGraph,
    schemes: &[MetapathScheme],
    walks_per_user: usize,
    walk_length: usize,
    seed: u64,
) -> Result<Vec<Walk>> {
    if schemes.is_empty() {
        return invalid("no meta-path schemes");
    }
    if graph.count(NodeType::U) == 0 {
        return invalid("graph has no user nodes");
    }
    let users: Vec<u32> = graph.nodes_of(NodeType::U).collect();
    let isolated = users.iter().filter(|&&u| graph.degree(u) == 0).count();
    if isolated > 0 {
        warn!("{isolated} isolated user nodes; their walks have length 1");
    }
    let k = schemes.len();
    let walks = users
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, &u)| {
            (0..walks_per_user).map(move |j| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, u as u64, j as u64]));
                walk_from(graph, &schemes[(i + j) % k], u, walk_length, &mut rng)
            })
        })
        .collect();
    Ok(walks)
}

pub fn write_walks(path: &Path, graph: &HetGraph, walks: &[Walk]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for walk in walks {
        let line: Vec<String> = walk.iter().map(|&n| graph.label(n)).collect();
        writeln!(w, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_walks(path: &Path, graph: &HetGraph) -> Result<Vec<Walk>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut walks = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        walks.push(line.split_whitespace().map(|l| graph.parse_label(l)).collect::<Result<_>>()?);
    }
    Ok(walks)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Draw negatives only among nodes of the context node's type.
    pub typed_negatives: bool,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            window: 7,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            typed_negatives: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeEmbeddings {
    pub dim: usize,
    /// Node labels (`U0`, `S3`, ...) in graph order.
    pub labels: Vec<String>,
    /// Row-major `[labels.len(), dim]`.
    pub vectors: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

impl NodeEmbeddings {
    pub fn vector(&self, node: u32) -> &[f64] {
        &self.vectors[node as usize * self.dim..(node as usize + 1) * self.dim]
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        write!(w, "node").map_err(io)?;
        for d in 0..self.dim {
            write!(w, "\tdim{d}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        for (i, label) in self.labels.iter().enumerate() {
            write!(w, "{label}").map_err(io)?;
            for x in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                write!(w, "\t{x:e}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Invalid(format!("{}: empty", path.display())))?;
        let dim = header.split('\t').count() - 1;
        let mut labels = Vec::new();
        let mut vectors = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let mut cols = line.split('\t');
            labels.push(cols.next().unwrap_or_default().to_string());
            let row: std::result::Result<Vec<f64>, _> = cols.map(str::parse::<f64>).collect();
            let row = row.map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
            if row.len() != dim {
                return invalid(format!("{}: row width {} != {dim}", path.display(), row.len()));
            }
            vectors.extend(row);
        }
        Ok(Self {
            dim,
            labels,
            vectors,
            epoch_losses: Vec::new(),
        })
    }

    fn row_of(&self, label: &str) -> Option<&[f64]> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(-x)`, stable for large `|x|`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub loss: f64,
    pub center: Vec<f64>,
    pub context: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Negative-sampling loss `-ln σ(u_c·v) - Σ ln σ(-u_n·v)` for center vector
/// `v`, with its gradients.
pub fn pair_loss_and_grad(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> PairGrad {
    let s = dot(context, center);
    let mut loss = softplus(-s);
    let gc = sigmoid(s) - 1.0;
    let mut g_center: Vec<f64> = context.iter().map(|u| gc * u).collect();
    let g_context: Vec<f64> = center.iter().map(|v| gc * v).collect();
    let mut g_neg = Vec::with_capacity(negatives.len());
    for n in negatives {
        let s = dot(n, center);
        loss += softplus(s);
        let g = sigmoid(s);
        for (o, u) in g_center.iter_mut().zip(n.iter()) {
            *o += g * u;
        }
        g_neg.push(center.iter().map(|v| g * v).collect());
    }
    PairGrad {
        loss,
        center: g_center,
        context: g_context,
        negatives: g_neg,
    }
}

/// Cumulative unigram^0.75 table over a node subset.
struct NoiseTable {
    nodes: Vec<u32>,
    cumulative: Vec<f64>,
}

impl NoiseTable {
    fn new(counts: &[u64], nodes: impl Iterator<Item = u32>) -> Self {
        let mut out = Self {
            nodes: Vec::new(),
            cumulative: Vec::new(),
        };
        let mut acc = 0.0;
        for n in nodes {
            let c = counts[n as usize];
            if c > 0 {
                acc += (c as f64).powf(0.75);
                out.nodes.push(n);
                out.cumulative.push(acc);
            }
        }
        out
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Option<u32> {
        let total = *self.cumulative.last()?;
        let x = rng.gen::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= x).min(self.nodes.len() - 1);
        Some(self.nodes[i])
    }
}

/// Skip-gram with negative sampling over walk windows, single-threaded and
/// deterministic for a given seed. Returns the input (center) vectors.
pub fn train_skipgram(graph: &HetGraph, walks: &[Walk], cfg: &SkipGramConfig) -> Result<NodeEmbeddings> {
    if cfg.dim == 0 || cfg.window == 0 {
        return invalid("skip-gram dim and window must be positive");
    }
    if cfg.epochs == 0 || cfg.lr <= 0.0 {
        return invalid("skip-gram epochs and lr must be positive");
    }
    if walks.iter().all(|w| w.len() < 2) {
        return invalid("no walk has two or more nodes");
    }
    let n = graph.num_nodes();
    let d = cfg.dim;
    let mut counts = vec![0u64; n];
    for w in walks {
        for &v in w {
            counts[v as usize] += 1;
        }
    }
    let tables: Vec<NoiseTable> = if cfg.typed_negatives {
        NodeType::ALL
            .iter()
            .map(|&t| NoiseTable::new(&counts, graph.nodes_of(t)))
            .collect()
    } else {
        vec![NoiseTable::new(&counts, 0..n as u32)]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 0.5 / d as f64;
    let mut input: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut output = vec![0.0; n * d];

    let pairs_per_epoch: usize = walks
        .iter()
        .map(|w| {
            let l = w.len();
            (0..l).map(|i| i.min(cfg.window) + (l - 1 - i).min(cfg.window)).sum::<usize>()
        })
        .sum();
    let total = (pairs_per_epoch * cfg.epochs).max(1) as f64;
    let mut done = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut neg_ids = Vec::with_capacity(cfg.negatives);
    let mut g_center = vec![0.0; d];

    for _ in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for walk in walks {
            for (i, &center) in walk.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(walk.len() - 1);
                for (j, &ctx) in walk.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = cfg.lr * (1.0 - done as f64 / total).max(1e-4);
                    done += 1;
                    let table = if cfg.typed_negatives { &tables[graph.node_type(ctx).index()] } else { &tables[0] };
                    neg_ids.clear();
                    for _ in 0..cfg.negatives {
                        match table.sample(&mut rng) {
                            Some(x) if x != ctx => neg_ids.push(x),
                            _ => {}
                        }
                    }
                    let c = center as usize * d;
                    g_center.iter_mut().for_each(|x| *x = 0.0);
                    let mut step = |target: usize, label: f64, input: &[f64], output: &mut [f64]| -> f64 {
                        let v = &input[c..c + d];
                        let u = &mut output[target * d..(target + 1) * d];
                        let s = dot(u, v);
                        let g = sigmoid(s) - label;
                        for k in 0..d {
                            g_center[k] += g * u[k];
                            u[k] -= lr * g * v[k];
                        }
                        if label > 0.5 {
                            softplus(-s)
                        } else {
                            softplus(s)
                        }
                    };
                    loss_sum += step(ctx as usize, 1.0, &input, &mut output);
                    for &ng in &neg_ids {
                        loss_sum += step(ng as usize, 0.0, &input, &mut output);
                    }
                    for (x, g) in input[c..c + d].iter_mut().zip(&g_center) {
                        *x -= lr * g;
                    }
                }
            }
        }
        let mean = loss_sum / pairs_per_epoch.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged(format!("skip-gram loss became {mean}")));
        }
        epoch_losses.push(mean);
    }
    Ok(NodeEmbeddings {
        dim: d,
        labels: (0..n as u32).map(|v| graph.label(v)).collect(),
        vectors: input,
        epoch_losses,
    })
}

/// Rows of S-node vectors for `subforums`, in the given order. Subforums
/// missing from the graph get a zero row.
pub fn export_context_init(
    embeddings: &NodeEmbeddings,
    graph: &HetGraph,
    subforums: &[String],
    expected_dim: usize,
) -> Result<Tensor> {
    if embeddings.dim != expected_dim {
        return invalid(format!(
            "graph embeddings have dimension {}, model context dimension is {expected_dim}",
            embeddings.dim
        ));
    }
    let mut data = Vec::with_capacity(subforums.len() * expected_dim);
    for s in subforums {
        let row = graph
            .lookup(NodeType::S, s)
            .and_then(|id| embeddings.row_of(&graph.label(id)));
        match row {
            Some(r) => data.extend_from_slice(r),
            None => {
                warn!("subforum {s:?} has no graph embedding; using a zero row");
                data.extend(std::iter::repeat(0.0).take(expected_dim));
            }
        }
    }
    Ok(Tensor::new(vec![subforums.len(), expected_dim], data)?)
}

/// Subforum names of a post set, sorted.
pub fn subforums_of(posts: &[&Post]) -> Vec<String> {
    let set: BTreeMap<&str, ()> = posts.iter().map(|p| (p.subforum.as_str(), ())).collect();
    set.into_keys().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(author: &str, sub: &str, thread: &str, id: &str, start: bool) -> Post {
        Post {
            market: "M".into(),
            subforum: sub.into(),
            thread_id: thread.into(),
            post_id: id.into(),
            author: author.into(),
            timestamp: 100,
            is_thread_start: start,
            body: String::new(),
        }
    }

    #[test]
    fn hand_built_graph() {
        let posts = [post("u1", "s", "t", "p1", true), post("u2", "s", "t", "p2", false)];
        let refs: Vec<&Post> = posts.iter().collect();
        let g = build_graph(&refs);
        assert_eq!([g.count(NodeType::U), g.count(NodeType::S), g.count(NodeType::T), g.count(NodeType::P)], [2, 1, 1, 2]);
        assert_eq!(g.num_edges(), 6);
        let u1 = g.lookup(NodeType::U, "u1").unwrap();
        let t = g.lookup(NodeType::T, "t").unwrap();
        assert_eq!(g.neighbors(u1, NodeType::T), &[t]);
        let u2 = g.lookup(NodeType::U, "u2").unwrap();
        assert!(g.neighbors(u2, NodeType::T).is_empty());
        assert_eq!(g.neighbors(t, NodeType::P).len(), 2);
    }

    #[test]
    fn empty_graph() {
        let g = build_graph(&[]);
        assert!(g.is_empty());
        assert!(sample_walks(&g, &MetapathScheme::defaults(), 1, 5, 0).is_err());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!(MetapathScheme::defaults().len(), 7);
        assert!("USU".parse::<MetapathScheme>().is_err());
        assert!("UTS".parse::<MetapathScheme>().is_err());
        let s: MetapathScheme = "UTSTU".parse().unwrap();
        let cycled: String = (0..9).map(|i| s.type_at(i).letter()).collect();
        assert_eq!(cycled, "UTSTUTSTU");
    }

    #[test]
    fn star_walk_is_determined() {
        let posts = [post("u", "s", "t", "p", true)];
        let refs: Vec<&Post> = posts.iter().collect();
        let g = build_graph(&refs);
        let s: MetapathScheme = "UTSTU".parse().unwrap();
        let walks = sample_walks(&g, &[s], 3, 5, 9).unwrap();
        let labels: Vec<String> = walks[0].iter().map(|&v| g.label(v)).collect();
        assert_eq!(labels, ["U0", "T0", "S0", "T0", "U0"]);
        assert!(walks.iter().all(|w| w == &walks[0]));
        let short = sample_walks(&g, &MetapathScheme::defaults(), 2, 1, 9).unwrap();
        assert!(short.iter().all(|w| w.len() == 1));
    }

    #[test]
    fn dead_end_truncates() {
        let posts = [post("u", "s", "t", "p", false)];
        let refs: Vec<&Post> = posts.iter().collect();
        let g = build_graph(&refs);
        let s: MetapathScheme = "UTSTU".parse().unwrap();
        let w = sample_walks(&g, &[s], 1, 10, 0).unwrap();
        assert_eq!(w[0].len(), 1);
    }

    #[test]
    fn zero_vectors_give_six_ln_two() {
        let z = vec![0.0; 8];
        let negs: Vec<&[f64]> = (0..5).map(|_| z.as_slice()).collect();
        let r = pair_loss_and_grad(&z, &z, &negs);
        assert!((r.loss - 6.0 * 2f64.ln()).abs() < 1e-12);
        let big = vec![1e3; 8];
        let neg = vec![-1e3; 8];
        let r = pair_loss_and_grad(&big, &big, &[neg.as_slice(); 5]);
        assert!(r.loss < 1e-12);
    }

    #[test]
    fn export_rows_match_stored_vectors() {
        let posts = [post("u", "a", "t1", "p1", true), post("u", "b", "t2", "p2", true)];
        let refs: Vec<&Post> = posts.iter().collect();
        let g = build_graph(&refs);
        let walks = sample_walks(&g, &MetapathScheme::defaults(), 4, 10, 1).unwrap();
        let cfg = SkipGramConfig {
            dim: 4,
            epochs: 1,
            ..Default::default()
        };
        let e = train_skipgram(&g, &walks, &cfg).unwrap();
        let subs = vec!["a".to_string(), "zzz".to_string(), "b".to_string()];
        let t = export_context_init(&e, &g, &subs, 4).unwrap();
        assert_eq!(t.shape(), &[3, 4]);
        assert_eq!(t.row(0), e.vector(g.lookup(NodeType::S, "a").unwrap()));
        assert_eq!(t.row(1), &[0.0; 4]);
        assert!(export_context_init(&e, &g, &subs, 5).is_err());
    }

    #[test]
    fn files_round_trip() {
        let posts = [post("u", "a", "t1", "p1", true), post("v", "a", "t1", "p2", false)];
        let refs: Vec<&Post> = posts.iter().collect();
        let g = build_graph(&refs);
        let dir = tempfile::tempdir().unwrap();
        g.save(&dir.path().join("g.json")).unwrap();
        let g2 = HetGraph::load(&dir.path().join("g.json")).unwrap();
        assert_eq!(g2.edges(), g.edges());
        let walks = sample_walks(&g, &MetapathScheme::defaults(), 3, 6, 2).unwrap();
        write_walks(&dir.path().join("w.txt"), &g, &walks).unwrap();
        assert_eq!(read_walks(&dir.path().join("w.txt"), &g2).unwrap(), walks);
        let e = train_skipgram(&g, &walks, &SkipGramConfig { dim: 3, epochs: 1, ..Default::default() }).unwrap();
        e.save_tsv(&dir.path().join("e.tsv")).unwrap();
        let e2 = NodeEmbeddings::load_tsv(&dir.path().join("e.tsv")).unwrap();
        assert_eq!(e2.labels, e.labels);
        assert_eq!(e2.vectors, e.vectors);
    }
}
