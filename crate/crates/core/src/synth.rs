//! Synthetic multi-market forums with planted author styles and
//! cross-market migrants.
//!
//! Every author has a unigram word mixture, punctuation quirks, a weekday
//! profile and subforum affinities. Migrants reuse their profile (and PGP
//! key) under a second username in another market. Output is fully
//! determined by the config.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_migration_labels, write_posts, MigrationLabel, Post, UserRef};
use crate::error::{invalid, Result};
use crate::hetgraph::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub markets: Vec<String>,
    pub authors_per_market: usize,
    /// Authors of the first market who reappear elsewhere under a new name.
    pub migrants: usize,
    pub posts_per_author: usize,
    /// Of the non-migrant authors per market, how many write template spam.
    pub spam_authors: usize,
    pub subforums: usize,
    /// Author communities per market, each tied to a block of subforums.
    /// Zero spreads every author over all subforums.
    pub communities: usize,
    /// Probability that a post goes to the author's community block.
    pub community_affinity: f64,
    pub word_pool: usize,
    pub favourite_words: usize,
    /// Share of an author's word mass on their favourite words.
    pub style_strength: f64,
    /// Relative jitter of a migrant's word weights in the second market.
    pub migrant_drift: f64,
    pub words_per_post: (usize, usize),
    /// Fraction of non-migrant authors per market who only post in the
    /// final `late_window` of the date range.
    pub late_authors: f64,
    pub late_window: f64,
    pub start_timestamp: i64,
    pub days: u32,
    pub thread_start_rate: f64,
    pub quote_rate: f64,
    pub link_rate: f64,
    pub image_rate: f64,
    pub pubkey_rate: f64,
    pub signed_rate: f64,
    pub encrypted_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            markets: vec!["alpha".into(), "bravo".into()],
            authors_per_market: 20,
            migrants: 5,
            posts_per_author: 100,
            spam_authors: 1,
            subforums: 12,
            communities: 3,
            community_affinity: 0.85,
            word_pool: 400,
            favourite_words: 25,
            style_strength: 0.5,
            migrant_drift: 0.05,
            words_per_post: (6, 30),
            late_authors: 0.0,
            late_window: 0.15,
            // 2014-01-01
            start_timestamp: 1_388_534_400,
            days: 365,
            thread_start_rate: 0.15,
            quote_rate: 0.05,
            link_rate: 0.04,
            image_rate: 0.02,
            pubkey_rate: 0.03,
            signed_rate: 0.02,
            encrypted_rate: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.markets.is_empty() || self.authors_per_market == 0 || self.posts_per_author == 0 {
            return invalid("synth needs markets, authors and posts");
        }
        let names: BTreeSet<&String> = self.markets.iter().collect();
        if names.len() != self.markets.len() || self.markets.iter().any(|m| m.is_empty() || m.contains(':')) {
            return invalid("synth market names must be unique, nonempty and free of ':'");
        }
        if self.migrants > 0 && self.markets.len() < 2 {
            return invalid("migrants need at least two markets");
        }
        if self.migrants > self.authors_per_market {
            return invalid(format!(
                "{} migrants exceed {} authors per market",
                self.migrants, self.authors_per_market
            ));
        }
        if self.migrants + self.spam_authors > self.authors_per_market {
            return invalid("migrants plus spam authors exceed authors per market");
        }
        if self.subforums == 0 || self.communities > self.subforums {
            return invalid("need at least one subforum per community");
        }
        if self.word_pool > 10_000 {
            return invalid("word_pool is limited to 10000 words");
        }
        if self.favourite_words == 0 || self.favourite_words > self.word_pool {
            return invalid("favourite_words must be in 1..=word_pool");
        }
        let (lo, hi) = self.words_per_post;
        if lo == 0 || lo > hi {
            return invalid("words_per_post must be a nonempty positive range");
        }
        if self.days == 0 || self.start_timestamp <= 0 {
            return invalid("date range must be positive");
        }
        let rates = [
            self.community_affinity,
            self.style_strength,
            self.thread_start_rate,
            self.quote_rate,
            self.link_rate,
            self.image_rate,
            self.pubkey_rate,
            self.signed_rate,
            self.encrypted_rate,
            self.late_authors,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || !(0.0..1.0).contains(&self.migrant_drift)
            || !(self.late_window > 0.0 && self.late_window <= 1.0)
        {
            return invalid("synth rates must lie in [0, 1]");
        }
        Ok(())
    }
}

const ENDINGS: [&str; 6] = [".", "!", "...", "?", "!!", ""];
const EMOTICONS: [&str; 5] = [":)", ":D", ";)", ":(", "xD"];
const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "ze", "bo", "da", "fu", "gi", "ha", "jo", "ku", "le", "mo", "nu",
    "pa", "qi", "re", "su", "ty",
];

/// Style of one author, shared by a migrant's identities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuthorProfile {
    pub word_weights: Vec<f64>,
    pub ending_weights: Vec<f64>,
    pub ellipsis_rate: f64,
    pub currency: Option<char>,
    pub currency_rate: f64,
    pub emoticon: Option<usize>,
    pub capitalise: bool,
    pub weekday_weights: [f64; 7],
    pub community: usize,
    pub spam: bool,
    pub pgp_key: String,
}

/// One username in one market.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub market: String,
    pub username: String,
    pub profile: usize,
    /// Word weights actually used, after migrant drift.
    pub word_weights: Vec<f64>,
    /// Posts only near the end of the date range.
    pub late: bool,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub words: Vec<String>,
    pub profiles: Vec<AuthorProfile>,
    pub identities: Vec<Identity>,
    /// Posts per market, in config order.
    pub posts: Vec<(String, Vec<Post>)>,
    pub labels: Vec<MigrationLabel>,
}

fn normalise(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}

fn word_pool(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.gen_range(1..=3);
        let w: String = (0..k).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn username(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    loop {
        let k = rng.gen_range(2..=3);
        let mut name: String = (0..k).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if rng.gen_bool(0.5) {
            name.push_str(&rng.gen_range(1..100).to_string());
        }
        if taken.insert(name.clone()) {
            return name;
        }
    }
}

fn pgp_key(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let b64: String = (0..128).map(|_| ALPHABET[rng.gen_range(0..64)] as char).collect();
    let body: Vec<&str> = b64.as_bytes().chunks(64).map(|c| std::str::from_utf8(c).unwrap()).collect();
    format!(
        "-----BEGIN PGP PUBLIC KEY BLOCK-----\nVersion: GnuPG v2\n\n{}\n=AbCd\n-----END PGP PUBLIC KEY BLOCK-----",
        body.join("\n")
    )
}

fn profile(cfg: &SynthConfig, spam: bool, rng: &mut ChaCha8Rng) -> AuthorProfile {
    let n = cfg.word_pool;
    let mut word_weights: Vec<f64> = (0..n).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    normalise(&mut word_weights);
    word_weights.iter_mut().for_each(|w| *w *= 1.0 - cfg.style_strength);
    let favs = rand::seq::index::sample(rng, n, cfg.favourite_words);
    let raw: Vec<f64> = (0..cfg.favourite_words).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    for (i, r) in favs.iter().zip(&raw) {
        word_weights[i] += cfg.style_strength * r / total;
    }
    let mut ending_weights: Vec<f64> = (0..ENDINGS.len()).map(|_| rng.gen_range(0.05..1.0)).collect();
    ending_weights[rng.gen_range(0..ENDINGS.len())] += 2.0;
    normalise(&mut ending_weights);
    let mut weekday_weights = [0.0; 7];
    for w in weekday_weights.iter_mut() {
        *w = rng.gen_range(0.2..1.0);
    }
    for _ in 0..2 {
        weekday_weights[rng.gen_range(0..7)] += 1.5;
    }
    normalise(&mut weekday_weights);
    AuthorProfile {
        word_weights,
        ending_weights,
        ellipsis_rate: if rng.gen_bool(0.3) { rng.gen_range(0.1..0.4) } else { 0.0 },
        currency: if rng.gen_bool(0.3) { Some(*['£', '$', '€'].choose(rng).unwrap()) } else { None },
        currency_rate: rng.gen_range(0.05..0.3),
        emoticon: if rng.gen_bool(0.4) { Some(rng.gen_range(0..EMOTICONS.len())) } else { None },
        capitalise: rng.gen_bool(0.5),
        weekday_weights,
        community: if cfg.communities == 0 { 0 } else { rng.gen_range(0..cfg.communities) },
        spam,
        pgp_key: pgp_key(rng),
    }
}

fn drifted(weights: &[f64], drift: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w: Vec<f64> = weights.iter().map(|x| x * (1.0 + drift * rng.gen_range(-1.0..1.0))).collect();
    normalise(&mut w);
    w
}

/// A post's body before thread assignment.
struct Draft {
    identity: usize,
    timestamp: i64,
    subforum: usize,
    body: String,
}

struct Writer<'a> {
    cfg: &'a SynthConfig,
    words: &'a [String],
    base: WeightedIndex<f64>,
}

impl Writer<'_> {
    fn sentence(&self, p: &AuthorProfile, dist: &WeightedIndex<f64>, n: usize, rng: &mut ChaCha8Rng) -> String {
        let mut words: Vec<String> = (0..n).map(|_| self.words[dist.sample(rng)].clone()).collect();
        if p.capitalise {
            let first = &mut words[0];
            *first = first[..1].to_uppercase() + &first[1..];
        }
        if let Some(c) = p.currency {
            if rng.gen_bool(p.currency_rate) {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, format!("{c}{}", rng.gen_range(1..500)));
            }
        }
        let ending = ENDINGS[WeightedIndex::new(&p.ending_weights).unwrap().sample(rng)];
        let mut s = words.join(" ") + ending;
        if rng.gen_bool(p.ellipsis_rate) {
            s.push_str("...");
        }
        if let Some(e) = p.emoticon {
            if rng.gen_bool(0.3) {
                s.push(' ');
                s.push_str(EMOTICONS[e]);
            }
        }
        s
    }

    fn body(&self, p: &AuthorProfile, dist: &WeightedIndex<f64>, others: &[String], rng: &mut ChaCha8Rng) -> String {
        let cfg = self.cfg;
        let mut parts = Vec::new();
        if rng.gen_bool(cfg.quote_rate) {
            let who = others.choose(rng).map_or("anon", String::as_str);
            let quoted: Vec<&str> = (0..rng.gen_range(3..10)).map(|_| self.words[self.base.sample(rng)].as_str()).collect();
            parts.push(format!("[quote={who}]{}[/quote]", quoted.join(" ")));
        }
        if p.spam {
            let w = |i: usize| self.words[i % self.words.len()].as_str();
            parts.push(format!(
                "new vendor here selling {} and {} best price pm me now!!! {} {}",
                w(3),
                w(7),
                w(11),
                rng.gen_range(1..4)
            ));
        } else {
            let (lo, hi) = cfg.words_per_post;
            let mut left = rng.gen_range(lo..=hi);
            while left > 0 {
                let n = left.min(rng.gen_range(3..=12));
                parts.push(self.sentence(p, dist, n, rng));
                left -= n;
            }
        }
        if rng.gen_bool(cfg.link_rate) {
            parts.push(format!("http://{}.onion/{}", self.words[rng.gen_range(0..self.words.len())], rng.gen_range(1..999)));
        }
        if rng.gen_bool(cfg.image_rate) {
            parts.push(format!("[img]http://img.example/{}.jpg[/img]", rng.gen_range(1..999)));
        }
        if rng.gen_bool(cfg.pubkey_rate) {
            parts.push(p.pgp_key.clone());
        }
        let mut text = parts.join(" ");
        if rng.gen_bool(cfg.signed_rate) {
            let sig: String = (0..40).map(|_| rng.sample(rand::distributions::Alphanumeric) as char).collect();
            text = format!(
                "-----BEGIN PGP SIGNED MESSAGE-----\nHash: SHA256\n\n{text}\n-----BEGIN PGP SIGNATURE-----\n{sig}\n-----END PGP SIGNATURE-----"
            );
        }
        if rng.gen_bool(cfg.encrypted_rate) {
            let msg: String = (0..60).map(|_| rng.sample(rand::distributions::Alphanumeric) as char).collect();
            text.push_str(&format!("\n-----BEGIN PGP MESSAGE-----\n{msg}\n-----END PGP MESSAGE-----"));
        }
        text
    }
}

fn subforum_of(cfg: &SynthConfig, community: usize, rng: &mut ChaCha8Rng) -> usize {
    if cfg.communities == 0 || !rng.gen_bool(cfg.community_affinity) {
        return rng.gen_range(0..cfg.subforums);
    }
    // Contiguous blocks; the last community takes any remainder.
    let size = cfg.subforums / cfg.communities;
    let start = community * size;
    let end = if community + 1 == cfg.communities { cfg.subforums } else { start + size };
    rng.gen_range(start..end)
}

fn timestamp(cfg: &SynthConfig, weekdays: &[f64; 7], late: bool, rng: &mut ChaCha8Rng) -> i64 {
    let days = cfg.days as i64;
    let first = if late { days - ((days as f64 * cfg.late_window).ceil() as i64).max(7).min(days) } else { 0 };
    let day = rng.gen_range(first..days);
    let wanted = WeightedIndex::new(weekdays).unwrap().sample(rng) as i64;
    let base = cfg.start_timestamp + day * 86_400;
    let have = crate::corpus::day_of_week(base) as i64;
    let mut shifted = day + (wanted - have).rem_euclid(7);
    if shifted >= days {
        shifted -= 7;
    }
    cfg.start_timestamp + shifted.max(first) * 86_400 + rng.gen_range(0..86_400)
}

fn is_migrant(identities: &[Identity], i: usize) -> bool {
    identities.iter().filter(|o| o.profile == identities[i].profile).count() > 1
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0]));
    let words = word_pool(cfg.word_pool, &mut rng);
    let mut taken = BTreeSet::new();
    let mut profiles = Vec::new();
    let mut identities = Vec::new();
    let mut labels = Vec::new();
    let m = cfg.markets.len();
    // Home authors of every market; the first `migrants` of market 0 get a
    // second identity that takes a slot in another market.
    let mut slots: Vec<usize> = vec![cfg.authors_per_market; m];
    let mut migrant_of: Vec<(usize, usize)> = Vec::new();
    for i in 0..cfg.migrants {
        let target = 1 + i % (m - 1);
        slots[target] -= 1;
        migrant_of.push((i, target));
    }
    for (mi, market) in cfg.markets.iter().enumerate() {
        for a in 0..slots[mi] {
            let spam = a >= slots[mi] - cfg.spam_authors.min(slots[mi]) && !(mi == 0 && a < cfg.migrants);
            let p = profile(cfg, spam, &mut rng);
            let word_weights = p.word_weights.clone();
            profiles.push(p);
            identities.push(Identity {
                market: market.clone(),
                username: username(&mut rng, &mut taken),
                profile: profiles.len() - 1,
                word_weights,
                late: false,
            });
        }
    }
    for &(i, target) in &migrant_of {
        let home = identities[i].clone();
        let alias = Identity {
            market: cfg.markets[target].clone(),
            username: username(&mut rng, &mut taken),
            profile: home.profile,
            word_weights: drifted(&home.word_weights, cfg.migrant_drift, &mut rng),
            late: false,
        };
        labels.push(MigrationLabel {
            user_a: UserRef::new(&home.market, &home.username),
            user_b: UserRef::new(&alias.market, &alias.username),
            same_author: true,
            evidence: "synthetic migrant".into(),
        });
        identities.push(alias);
    }

    for market in &cfg.markets {
        let pool: Vec<usize> = (0..identities.len())
            .filter(|&i| &identities[i].market == market && !is_migrant(&identities, i))
            .collect();
        let k = ((cfg.late_authors * cfg.authors_per_market as f64).round() as usize).min(pool.len());
        for i in rand::seq::index::sample(&mut rng, pool.len(), k) {
            identities[pool[i]].late = true;
        }
    }

    let base_weights: Vec<f64> = (0..cfg.word_pool).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let writer = Writer {
        cfg,
        words: &words,
        base: WeightedIndex::new(&base_weights).unwrap(),
    };
    let mut posts = Vec::with_capacity(m);
    for (mi, market) in cfg.markets.iter().enumerate() {
        let mut mrng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 1, mi as u64]));
        let members: Vec<usize> = (0..identities.len()).filter(|&i| &identities[i].market == market).collect();
        let names: Vec<String> = members.iter().map(|&i| identities[i].username.clone()).collect();
        let mut drafts = Vec::new();
        for &id in &members {
            let p = &profiles[identities[id].profile];
            let dist = WeightedIndex::new(&identities[id].word_weights).unwrap();
            for _ in 0..cfg.posts_per_author {
                drafts.push(Draft {
                    identity: id,
                    timestamp: timestamp(cfg, &p.weekday_weights, identities[id].late, &mut mrng),
                    subforum: subforum_of(cfg, p.community, &mut mrng),
                    body: writer.body(p, &dist, &names, &mut mrng),
                });
            }
        }
        drafts.sort_by(|a, b| (a.timestamp, a.identity).cmp(&(b.timestamp, b.identity)));
        let mut open: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        let mut next_thread = 0usize;
        let mut out = Vec::with_capacity(drafts.len());
        for (n, d) in drafts.into_iter().enumerate() {
            let threads = open.entry(d.subforum).or_default();
            let start = threads.is_empty() || mrng.gen_bool(cfg.thread_start_rate);
            let thread_id = if start {
                next_thread += 1;
                let t = format!("{market}-t{next_thread:05}");
                threads.push(t.clone());
                t
            } else {
                let recent = &threads[threads.len().saturating_sub(5)..];
                recent.choose(&mut mrng).unwrap().clone()
            };
            out.push(Post {
                market: market.clone(),
                subforum: format!("sub{:02}", d.subforum),
                thread_id,
                post_id: format!("{market}-p{n:06}"),
                author: identities[d.identity].username.clone(),
                timestamp: d.timestamp,
                is_thread_start: start,
                body: d.body,
            });
        }
        posts.push((market.clone(), out));
    }
    Ok(SynthCorpus {
        words,
        profiles,
        identities,
        posts,
        labels,
    })
}

impl SynthCorpus {
    /// Writes `<market>.jsonl` per market and `labels.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        for (market, posts) in &self.posts {
            write_posts(&dir.join(format!("{market}.jsonl")), posts)?;
        }
        write_migration_labels(&dir.join("labels.csv"), &self.labels)
    }

    pub fn all_posts(&self) -> Vec<Post> {
        self.posts.iter().flat_map(|(_, p)| p.iter().cloned()).collect()
    }

    pub fn identity(&self, market: &str, username: &str) -> Option<&Identity> {
        self.identities.iter().find(|i| i.market == market && i.username == username)
    }
}
