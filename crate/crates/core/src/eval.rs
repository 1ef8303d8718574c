//! Retrieval metrics, the paired signed-rank test, identifiability scores,
//! sybil search and integrated-gradients attribution.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use epistyle_numcore::{Graph, Tensor};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::model::{EpisodeInput, EpisodeModel, HeadKind};
use crate::tokenize::{Vocab, PAD_ID};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub market: String,
    pub author: String,
    pub embedding: Vec<f64>,
}

/// Episode embeddings with author and market maps. Entry order is the
/// tie-break order for equal similarities.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    unit: Vec<Vec<f64>>,
    author_counts: HashMap<String, usize>,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RetrievalIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        if let Some(first) = entries.first() {
            let d = first.embedding.len();
            if let Some(e) = entries.iter().find(|e| e.embedding.len() != d) {
                return invalid(format!("embedding of {} has dimension {}, expected {d}", e.id, e.embedding.len()));
            }
            if entries.iter().any(|e| e.embedding.iter().any(|x| !x.is_finite())) {
                return invalid("non-finite embedding in index");
            }
        }
        let unit = entries.iter().map(|e| normalized(&e.embedding)).collect();
        let mut author_counts = HashMap::new();
        for e in &entries {
            *author_counts.entry(e.author.clone()).or_insert(0) += 1;
        }
        Ok(Self {
            entries,
            unit,
            author_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Cosine similarity rounded to a 2^-40 grid, so that rounding noise
    /// from rescaling an embedding does not reorder exact ties.
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        const GRID: f64 = (1u64 << 40) as f64;
        (dot(&self.unit[i], &self.unit[j]) * GRID).round() / GRID
    }

    /// Whether entry `i`'s author has another episode in the index.
    pub fn is_queryable(&self, i: usize) -> bool {
        self.author_counts[&self.entries[i].author] >= 2
    }

    /// 1-based rank of the first same-author episode when all other
    /// entries are sorted by cosine descending, ties by entry order.
    pub fn first_hit_rank(&self, q: usize) -> Option<usize> {
        let author = &self.entries[q].author;
        let sims: Vec<f64> = (0..self.len()).map(|j| self.cosine(q, j)).collect();
        let mut best: Option<usize> = None;
        for j in (0..self.len()).filter(|&j| j != q && &self.entries[j].author == author) {
            if best.is_none_or(|b| sims[j] > sims[b]) {
                best = Some(j);
            }
        }
        let b = best?;
        let ahead = (0..self.len())
            .filter(|&j| j != q && &self.entries[j].author != author)
            .filter(|&j| sims[j] > sims[b] || (sims[j] == sims[b] && j < b))
            .count();
        Some(ahead + 1)
    }

    /// Entries other than `q` in retrieval order.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).filter(|&j| j != q).collect();
        order.sort_by(|&a, &b| self.cosine(q, b).total_cmp(&self.cosine(q, a)).then(a.cmp(&b)));
        order
    }
}

/// Seeded sample of up to `kappa` queryable entries from `candidates`,
/// without replacement. Returns the sample and the number of candidates
/// excluded because their author has a single episode.
pub fn sample_queries(index: &RetrievalIndex, candidates: &[usize], kappa: usize, seed: u64) -> (Vec<usize>, usize) {
    let pool: Vec<usize> = candidates.iter().copied().filter(|&i| index.is_queryable(i)).collect();
    let excluded = candidates.len() - pool.len();
    if kappa >= pool.len() {
        if kappa > pool.len() {
            warn!("kappa {kappa} exceeds the {} available queries; using all", pool.len());
        }
        return (pool, excluded);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), kappa)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    (picked, excluded)
}

fn hit_ranks(index: &RetrievalIndex, queries: &[usize]) -> Result<Vec<usize>> {
    let ranks: Vec<usize> = queries.par_iter().filter_map(|&q| index.first_hit_rank(q)).collect();
    if ranks.is_empty() {
        return invalid("no query has another episode by the same author");
    }
    Ok(ranks)
}

/// Mean reciprocal rank; queries without a same-author episode are skipped.
pub fn mrr(index: &RetrievalIndex, queries: &[usize]) -> Result<f64> {
    let r = hit_ranks(index, queries)?;
    Ok(r.iter().map(|&x| 1.0 / x as f64).sum::<f64>() / r.len() as f64)
}

pub fn recall_at_k(index: &RetrievalIndex, queries: &[usize], k: usize) -> Result<f64> {
    let r = hit_ranks(index, queries)?;
    Ok(r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64)
}

/// Probability that none of `m` same-author items is among the first `r`
/// of `n` uniformly shuffled items.
fn miss_probability(n: usize, m: usize, r: usize) -> f64 {
    (0..r.min(n)).map(|i| (n - m).saturating_sub(i) as f64 / (n - i) as f64).product()
}

/// Expected reciprocal rank and R@k of a query under uniformly random
/// ranking, with `n` other entries of which `m` share the author.
pub fn random_query_metrics(n: usize, m: usize, ks: &[usize]) -> (f64, Vec<f64>) {
    let mut rr = 0.0;
    let mut prev = 1.0;
    for r in 1..=n - m + 1 {
        let cur = miss_probability(n, m, r);
        rr += (prev - cur) / r as f64;
        prev = cur;
    }
    let recalls = ks.iter().map(|&k| 1.0 - miss_probability(n, m, k)).collect();
    (rr, recalls)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    /// R@k keyed by k.
    pub recall: BTreeMap<usize, f64>,
    pub random_mrr: f64,
    pub random_recall: BTreeMap<usize, f64>,
    pub queries: usize,
    pub excluded: usize,
    pub kappa: usize,
    pub seed: u64,
}

/// Metrics over a seeded query sample drawn from `candidates`, with the
/// random-ranking baseline for the same queries.
pub fn metrics_report(index: &RetrievalIndex, candidates: &[usize], kappa: usize, seed: u64) -> Result<MetricsReport> {
    let (queries, excluded) = sample_queries(index, candidates, kappa, seed);
    let ranks = hit_ranks(index, &queries)?;
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|&x| 1.0 / x as f64).sum::<f64>() / n;
    let recall = RECALL_KS
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&x| x <= k).count() as f64 / n))
        .collect();
    let mut random_mrr = 0.0;
    let mut random_recall = vec![0.0; RECALL_KS.len()];
    for &q in &queries {
        let m = index.author_counts[&index.entries[q].author] - 1;
        let (rr, rk) = random_query_metrics(index.len() - 1, m, &RECALL_KS);
        random_mrr += rr / n;
        for (acc, v) in random_recall.iter_mut().zip(rk) {
            *acc += v / n;
        }
    }
    Ok(MetricsReport {
        mrr,
        recall,
        random_mrr,
        random_recall: RECALL_KS.iter().copied().zip(random_recall).collect(),
        queries: ranks.len(),
        excluded,
        kappa,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeenNovelReport {
    pub seen: Option<MetricsReport>,
    pub novel: Option<MetricsReport>,
}

/// Metrics for queries whose author is in `seen_authors` and for the rest,
/// both retrieving against the whole index. A group without queries is
/// reported as `None`.
pub fn seen_novel_report(index: &RetrievalIndex, seen_authors: &HashSet<String>, kappa: usize, seed: u64) -> SeenNovelReport {
    let (seen, novel): (Vec<usize>, Vec<usize>) =
        (0..index.len()).partition(|&i| seen_authors.contains(&index.entries[i].author));
    let run = |c: &[usize], s: u64| {
        let r = metrics_report(index, c, kappa, s);
        if let Err(e) = &r {
            warn!("group omitted: {e}");
        }
        r.ok()
    };
    SeenNovelReport {
        seen: run(&seen, seed),
        novel: run(&novel, seed.wrapping_add(1)),
    }
}

/// Average ranks of `|d|`, ties sharing the mean rank; returned doubled so
/// they stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, times two.
        let r = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Largest number of nonzero differences for which the null distribution is
/// enumerated.
pub const EXACT_LIMIT: usize = 12;

/// Two-sided p-value of the Wilcoxon signed-rank test on paired samples.
pub fn wmw_paired(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 5 {
        return invalid(format!("paired test needs at least 5 pairs, got {}", a.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return invalid("non-finite paired difference");
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(1.0);
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let total: u64 = ranks.iter().sum();
    let w: u64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    // Everything below is in doubled units; the null mean is total / 2.
    let dev = (2 * w).abs_diff(total);
    if n <= EXACT_LIMIT {
        let extreme = (0u32..1 << n)
            .filter(|mask| {
                let s: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
                (2 * s).abs_diff(total) >= dev
            })
            .count();
        return Ok(extreme as f64 / (1u64 << n) as f64);
    }
    let nf = n as f64;
    let mut ties = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    for chunk in sorted.chunk_by(|x, y| x == y) {
        let t = chunk.len() as f64;
        ties += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = ((dev as f64 / 4.0) - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    Ok((2.0 * (1.0 - normal.cdf(z))).min(1.0))
}

/// Mean pairwise Euclidean distance between an author's episode embeddings;
/// lower means more identifiable. `normalize` measures unit vectors instead.
pub fn si_score(index: &RetrievalIndex, author: &str, normalize: bool) -> Result<f64> {
    let rows: Vec<&[f64]> = (0..index.len())
        .filter(|&i| index.entries[i].author == author)
        .map(|i| {
            if normalize {
                index.unit[i].as_slice()
            } else {
                index.entries[i].embedding.as_slice()
            }
        })
        .collect();
    if rows.len() < 2 {
        return invalid(format!("author {author} has {} episodes; 2 needed", rows.len()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            sum += rows[i].iter().zip(rows[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SybilCandidate {
    pub author: String,
    pub market: String,
    pub support: usize,
    pub mean_similarity: f64,
}

/// The foreign-market author most often among the `k` nearest
/// other-market episodes of `author`'s episodes in `market`. Ties go to the
/// higher mean similarity, then to the name.
pub fn topk_sybil(index: &RetrievalIndex, market: &str, author: &str, k: usize) -> Result<SybilCandidate> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    let own: Vec<usize> = (0..index.len())
        .filter(|&i| index.entries[i].author == author && index.entries[i].market == market)
        .collect();
    if own.is_empty() {
        return invalid(format!("no episodes for {market}:{author}"));
    }
    let foreign: Vec<usize> = (0..index.len()).filter(|&i| index.entries[i].market != market).collect();
    if foreign.is_empty() {
        return invalid(format!("no episodes outside market {market}"));
    }
    let mut pooled: BTreeMap<(&str, &str), (usize, f64)> = BTreeMap::new();
    for &q in &own {
        let mut near: Vec<(f64, usize)> = foreign.iter().map(|&j| (index.cosine(q, j), j)).collect();
        near.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(s, j) in near.iter().take(k) {
            let e = &index.entries[j];
            let slot = pooled.entry((e.author.as_str(), e.market.as_str())).or_default();
            slot.0 += 1;
            slot.1 += s;
        }
    }
    let ((a, m), (support, sum)) = pooled
        .into_iter()
        .max_by(|x, y| {
            let (mx, my) = (x.1 .1 / x.1 .0 as f64, y.1 .1 / y.1 .0 as f64);
            x.1 .0.cmp(&y.1 .0).then(mx.total_cmp(&my)).then(y.0.cmp(&x.0))
        })
        .expect("k >= 1 and foreign episodes exist");
    Ok(SybilCandidate {
        author: a.to_string(),
        market: m.to_string(),
        support,
        mean_similarity: sum / support as f64,
    })
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push(((1.0 - x) / 2.0, w / 2.0));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Quadrature nodes on `[0, 1]`: a Gauss-Legendre rule on each piece
/// between consecutive `breaks`, with `steps` nodes per unit length and at
/// least one per piece. Without breaks this is the plain `steps`-node rule.
pub fn path_nodes(steps: usize, breaks: &[f64]) -> Vec<(f64, f64)> {
    let mut edges = vec![0.0];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|b| *b > 0.0 && *b < 1.0).collect();
    inner.sort_by(f64::total_cmp);
    for b in inner {
        if b - edges.last().unwrap() > 1e-12 {
            edges.push(b);
        }
    }
    if 1.0 - edges.last().unwrap() <= 1e-12 && edges.len() > 1 {
        edges.pop();
    }
    edges.push(1.0);
    let mut rules: HashMap<usize, Vec<(f64, f64)>> = HashMap::new();
    let mut out = Vec::new();
    for w in edges.windows(2) {
        let len = w[1] - w[0];
        let n = ((steps as f64 * len).ceil() as usize).clamp(1, steps);
        let rule = rules.entry(n).or_insert_with(|| gauss_legendre(n));
        out.extend(rule.iter().map(|&(x, wt)| (w[0] + len * x, len * wt)));
    }
    out
}

fn integrate_path<F>(x: &[f64], baseline: &[f64], nodes: &[(f64, f64)], grad: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if x.len() != baseline.len() {
        return invalid("input and baseline differ in length");
    }
    let grads: Vec<Vec<f64>> = nodes
        .par_iter()
        .map(|&(a, _)| {
            let p: Vec<f64> = baseline.iter().zip(x).map(|(b, x)| b + a * (x - b)).collect();
            grad(&p)
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; x.len()];
    for (g, &(_, w)) in grads.iter().zip(nodes) {
        if g.len() != x.len() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("non-finite gradient in integrated gradients".into()));
        }
        for (a, v) in acc.iter_mut().zip(g) {
            *a += w * v;
        }
    }
    Ok(acc.iter().zip(x.iter().zip(baseline)).map(|(g, (x, b))| g * (x - b)).collect())
}

/// Integrated gradients of a scalar function along the straight path from
/// `baseline` to `x`, per input coordinate, with a `steps`-node
/// Gauss-Legendre rule. `grad` returns the gradient at a point.
pub fn integrated_gradients_fn<F>(x: &[f64], baseline: &[f64], steps: usize, grad: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if steps == 0 {
        return invalid("integrated gradients needs at least one step");
    }
    integrate_path(x, baseline, &gauss_legendre(steps), grad)
}

/// Positions in `(0, 1)` where `max(0, max_t a_t + α s_t)` changes its
/// maximising line.
fn envelope_breaks(a: &[f64], s: &[f64], out: &mut Vec<f64>) {
    // Index `a.len()` is the zero line of the ReLU.
    let n = a.len();
    let line = |i: usize| if i == n { (0.0, 0.0) } else { (a[i], s[i]) };
    let mut cur = (0..=n)
        .max_by(|&i, &j| {
            let (li, lj) = (line(i), line(j));
            li.0.total_cmp(&lj.0).then(li.1.total_cmp(&lj.1))
        })
        .unwrap();
    let mut alpha = 0.0;
    loop {
        let (ac, sc) = line(cur);
        let mut next: Option<(f64, usize)> = None;
        for i in 0..=n {
            let (ai, si) = line(i);
            if si <= sc {
                continue;
            }
            let x = (ac - ai) / (si - sc);
            if x <= alpha {
                continue;
            }
            if next.is_none_or(|(bx, bi)| x < bx || (x == bx && si > line(bi).1)) {
                next = Some((x, i));
            }
        }
        match next {
            Some((x, i)) if x < 1.0 => {
                out.push(x);
                alpha = x;
                cur = i;
            }
            _ => break,
        }
    }
}

/// Points on the path where a convolution filter's ReLU or max-over-time
/// switches. Convolutions are affine in the path position, so these are
/// exact; the attribution integrand jumps there.
fn conv_breaks(model: &EpisodeModel, x: &[Tensor], baseline: &[Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (xp, bp) in x.iter().zip(baseline) {
        let (p1, p0) = (model.conv_preactivations(xp)?, model.conv_preactivations(bp)?);
        for (c1, c0) in p1.iter().zip(&p0) {
            let (t, f) = (c1.rows(), c1.cols());
            for j in 0..f {
                let a: Vec<f64> = (0..t).map(|r| c0.data()[r * f + j]).collect();
                let s: Vec<f64> = (0..t).map(|r| c1.data()[r * f + j] - a[r]).collect();
                envelope_breaks(&a, &s, &mut out);
            }
        }
    }
    Ok(out)
}

/// Scalar of the episode embedding that attributions explain.
#[derive(Clone, Debug)]
pub enum IgTarget {
    /// Cosine similarity to a reference embedding, e.g. the author centroid.
    Cosine(Vec<f64>),
    /// Logit of `class` under `head`: a dot product for softmax heads, a
    /// cosine for margin heads.
    HeadLogit { head: usize, class: usize },
}

fn resolve_target(model: &EpisodeModel, target: &IgTarget) -> Result<(Vec<f64>, bool)> {
    match target {
        IgTarget::Cosine(c) => Ok((c.clone(), true)),
        IgTarget::HeadLogit { head, class } => {
            let h = model.heads().get(*head).ok_or_else(|| Error::Invalid(format!("no head {head}")))?;
            let Some(w) = h.weight() else {
                return invalid(format!("head {} has no class weights", h.name));
            };
            if *class >= h.classes {
                return invalid(format!("class {class} out of range for head {}", h.name));
            }
            let row = model.store().get(w).row(*class).to_vec();
            Ok((row, h.kind != HeadKind::Sm))
        }
    }
}

/// Value and gradient of `r·e` or `cos(e, r)`.
fn target_value(e: &[f64], r: &[f64], cosine: bool) -> (f64, Vec<f64>) {
    if !cosine {
        return (dot(e, r), r.to_vec());
    }
    let (ne, nr) = (dot(e, e).sqrt(), dot(r, r).sqrt());
    if ne == 0.0 || nr == 0.0 {
        return (0.0, vec![0.0; e.len()]);
    }
    let c = dot(e, r) / (ne * nr);
    let g = e.iter().zip(r).map(|(x, y)| y / (ne * nr) - c * x / (ne * ne)).collect();
    (c, g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// Score per token, per post.
    pub scores: Vec<Vec<f64>>,
    pub target: f64,
    pub baseline_target: f64,
}

impl Attribution {
    pub fn total(&self) -> f64 {
        self.scores.iter().flatten().sum()
    }

    /// `|Σ scores − (f(x) − f(x'))|` relative to `|f(x) − f(x')|`.
    pub fn completeness_error(&self) -> f64 {
        let delta = self.target - self.baseline_target;
        (self.total() - delta).abs() / delta.abs().max(1e-12)
    }
}

/// Token-level integrated gradients of `target` for one episode, from the
/// all-[PAD] baseline. The path is split where convolution filters switch
/// and each piece gets Gauss-Legendre nodes at `steps` per unit length.
pub fn integrated_gradients(model: &EpisodeModel, ep: &EpisodeInput, target: &IgTarget, steps: usize) -> Result<Attribution> {
    let (reference, cosine) = resolve_target(model, target)?;
    if reference.len() != model.config().episode_dim() {
        return invalid("target reference has the wrong dimension");
    }
    let dim = model.config().token_dim;
    let table = model.store().get(model.token_table());
    let pad = table.row(PAD_ID as usize);
    let mut x = Vec::new();
    for p in &ep.posts {
        for &t in &p.tokens {
            if t >= table.rows() {
                return invalid(format!("token id {t} outside the vocabulary"));
            }
            x.extend_from_slice(table.row(t));
        }
    }
    let baseline: Vec<f64> = (0..x.len() / dim).flat_map(|_| pad.iter().copied()).collect();
    let lengths: Vec<usize> = ep.posts.iter().map(|p| p.tokens.len()).collect();
    let eval = |point: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new(model.store());
        let mut vars = Vec::with_capacity(lengths.len());
        let mut off = 0;
        for &n in &lengths {
            let t = Tensor::new(vec![n, dim], point[off..off + n * dim].to_vec())?;
            vars.push(g.input(t));
            off += n * dim;
        }
        let rows = model.embed_posts(&mut g, ep, Some(&vars))?;
        let e = model.pool(&mut g, rows)?;
        let (value, seed) = target_value(g.value(e).data(), &reference, cosine);
        let back = g.backward_with(e, &seed)?;
        let mut grad = Vec::with_capacity(point.len());
        for (v, &n) in vars.iter().zip(&lengths) {
            match back.wrt(*v) {
                Some(d) => grad.extend_from_slice(d),
                None => grad.extend(std::iter::repeat_n(0.0, n * dim)),
            }
        }
        Ok((value, grad))
    };
    if steps == 0 {
        return invalid("integrated gradients needs at least one step");
    }
    let split = |v: &[f64]| -> Result<Vec<Tensor>> {
        let mut off = 0;
        let mut out = Vec::with_capacity(lengths.len());
        for &n in &lengths {
            out.push(Tensor::new(vec![n, dim], v[off..off + n * dim].to_vec())?);
            off += n * dim;
        }
        Ok(out)
    };
    let breaks = conv_breaks(model, &split(&x)?, &split(&baseline)?)?;
    let nodes = path_nodes(steps, &breaks);
    let per_coord = integrate_path(&x, &baseline, &nodes, |p| eval(p).map(|r| r.1))?;
    let (target_v, _) = eval(&x)?;
    let (baseline_v, _) = eval(&baseline)?;
    let mut scores = Vec::with_capacity(lengths.len());
    let mut off = 0;
    for &n in &lengths {
        scores.push((0..n).map(|t| per_coord[off + t * dim..off + (t + 1) * dim].iter().sum()).collect());
        off += n * dim;
    }
    Ok(Attribution {
        scores,
        target: target_v,
        baseline_target: baseline_v,
    })
}

/// Mean embedding of the entries by `author`.
pub fn centroid(index: &RetrievalIndex, author: &str) -> Option<Vec<f64>> {
    let rows: Vec<&IndexEntry> = index.entries.iter().filter(|e| e.author == author).collect();
    let first = rows.first()?;
    let mut c = vec![0.0; first.embedding.len()];
    for r in &rows {
        for (a, v) in c.iter_mut().zip(&r.embedding) {
            *a += v / rows.len() as f64;
        }
    }
    Some(c)
}

pub fn write_embeddings_tsv(path: &Path, index: &RetrievalIndex) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let dim = index.entries.first().map_or(0, |e| e.embedding.len());
    let mut header = vec!["episode_id".to_string(), "market".into(), "author".into()];
    header.extend((0..dim).map(|i| format!("dim{i}")));
    let mut lines = vec![header.join("\t")];
    for e in &index.entries {
        let mut cols = vec![e.id.clone(), e.market.clone(), e.author.clone()];
        cols.extend(e.embedding.iter().map(|v| v.to_string()));
        lines.push(cols.join("\t"));
    }
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings_tsv(path: &Path) -> Result<Vec<IndexEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return invalid(format!("{}:{}: expected at least 3 columns", path.display(), n + 1));
        }
        let embedding = cols[3..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), n + 1))))
            .collect::<Result<_>>()?;
        out.push(IndexEntry {
            id: cols[0].into(),
            market: cols[1].into(),
            author: cols[2].into(),
            embedding,
        });
    }
    Ok(out)
}

/// Pretty JSON with object keys in sorted order.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let v: serde_json::Value = serde_json::to_value(value)?;
    let text = serde_json::to_string_pretty(&v)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub post_id: String,
    pub token: String,
    pub score: f64,
}

/// One record per non-padding token.
pub fn attribution_records(post_ids: &[String], ep: &EpisodeInput, attr: &Attribution, vocab: &Vocab) -> Vec<AttributionRecord> {
    let mut out = Vec::new();
    for ((id, p), scores) in post_ids.iter().zip(&ep.posts).zip(&attr.scores) {
        for (&t, &s) in p.tokens.iter().zip(scores) {
            if t as u32 != PAD_ID {
                out.push(AttributionRecord {
                    post_id: id.clone(),
                    token: vocab.token_str(t as u32),
                    score: s,
                });
            }
        }
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
