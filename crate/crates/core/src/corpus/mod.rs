//! Forum posts: ingestion, text normalisation, chronological splitting,
//! episode assembly and the cross-market label set.

mod episodes;
mod migration;
mod preprocess;
mod split;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, Datelike};
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use episodes::{assemble_episodes, read_episodes, write_episodes, Episode, EpisodeMode};
pub use migration::{
    build_cross_dataset, extract_pgp_candidate_pairs, load_migration_labels, read_candidates, write_candidates,
    write_migration_labels, CandidatePair, CrossDataset, MigrationLabel, PgpReport, UserRef,
};
pub use preprocess::{preprocess_text, Preprocessor, QuoteRule, SPECIAL_TOKENS};
pub use split::{chronological_split, read_split_manifest, write_split_manifest, Split, SplitSpec};

/// One forum message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub market: String,
    pub subforum: String,
    pub thread_id: String,
    pub post_id: String,
    pub author: String,
    /// Seconds since the epoch, UTC.
    pub timestamp: i64,
    pub is_thread_start: bool,
    pub body: String,
}

impl Post {
    /// Day of the week of the post's UTC calendar date, Monday = 0.
    pub fn weekday(&self) -> u8 {
        day_of_week(self.timestamp)
    }
}

/// Monday = 0 … Sunday = 6 for a UTC timestamp. Only the calendar date is
/// used; time of day is ignored.
pub fn day_of_week(timestamp: i64) -> u8 {
    DateTime::from_timestamp(timestamp, 0)
        .map(|d| d.weekday().num_days_from_monday() as u8)
        .unwrap_or(0)
}

/// Posts read from one file, plus the lines that were rejected.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub posts: Vec<Post>,
    pub skipped: Vec<(usize, String)>,
}

fn field_str(obj: &serde_json::Map<String, Value>, key: &str) -> Option<String> {
    match obj.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_post(line: &str, market: &str) -> std::result::Result<Post, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("not JSON: {e}"))?;
    let obj = value.as_object().ok_or("not a JSON object")?;
    let need = |key: &str| field_str(obj, key).ok_or_else(|| format!("missing field `{key}`"));
    let author = need("author")?;
    if author.is_empty() {
        return Err("empty author".into());
    }
    let timestamp = obj
        .get("timestamp")
        .and_then(Value::as_i64)
        .ok_or("missing field `timestamp`")?;
    if timestamp <= 0 {
        return Err(format!("non-positive timestamp {timestamp}"));
    }
    let body = match obj.get("body") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err("missing field `body`".into()),
    };
    Ok(Post {
        market: market.to_string(),
        subforum: need("subforum")?,
        thread_id: need("thread_id")?,
        post_id: need("post_id")?,
        author,
        timestamp,
        is_thread_start: obj.get("is_thread_start").and_then(Value::as_bool).unwrap_or(false),
        body,
    })
}

/// Reads a JSONL post file. Every post is assigned `market`. Lines that are
/// malformed, lack a required field or repeat a `post_id` are skipped and
/// reported.
pub fn load_posts(path: &Path, market: &str) -> Result<LoadReport> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_post(&line, market) {
            Ok(post) if !seen.insert(post.post_id.clone()) => {
                report.skipped.push((i + 1, format!("duplicate post_id {}", post.post_id)));
            }
            Ok(post) => report.posts.push(post),
            Err(reason) => report.skipped.push((i + 1, reason)),
        }
    }
    for (line, reason) in &report.skipped {
        warn!("{}:{line}: skipped: {reason}", path.display());
    }
    Ok(report)
}

pub fn write_posts(path: &Path, posts: &[Post]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for p in posts {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads posts that carry their own `market` field (files written by
/// [`write_posts`]).
pub fn read_posts(path: &Path) -> Result<Vec<Post>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Posts keyed by `(market, post_id)`.
#[derive(Debug, Default)]
pub struct PostIndex<'a> {
    map: HashMap<(&'a str, &'a str), &'a Post>,
}

impl<'a> PostIndex<'a> {
    pub fn new(posts: &'a [Post]) -> Self {
        Self {
            map: posts
                .iter()
                .map(|p| ((p.market.as_str(), p.post_id.as_str()), p))
                .collect(),
        }
    }

    pub fn get(&self, market: &str, post_id: &str) -> Option<&'a Post> {
        self.map.get(&(market, post_id)).copied()
    }

    pub fn resolve(&self, episode: &Episode) -> Result<Vec<&'a Post>> {
        episode
            .post_ids
            .iter()
            .map(|id| {
                self.get(&episode.market, id).ok_or_else(|| {
                    Error::Invalid(format!("episode references unknown post {}:{id}", episode.market))
                })
            })
            .collect()
    }
}
