use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::Post;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Chronological partition of one market's posts.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub market: String,
    pub split_timestamp: i64,
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitSpec {
    pub fn side(&self, post_id: &str) -> Option<Split> {
        if self.train.contains(post_id) {
            Some(Split::Train)
        } else if self.test.contains(post_id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    /// The posts of `posts` that fall on `side`, in input order.
    pub fn select<'a>(&self, posts: &'a [Post], side: Split) -> Vec<&'a Post> {
        let set = match side {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        posts
            .iter()
            .filter(|p| p.market == self.market && set.contains(&p.post_id))
            .collect()
    }
}

/// Splits one market at its median timestamp (the lower middle element for
/// even counts). Posts at or before the median go to train.
pub fn chronological_split(posts: &[Post]) -> Result<SplitSpec> {
    let Some(first) = posts.first() else {
        return invalid("cannot split an empty post list");
    };
    if posts.iter().any(|p| p.market != first.market) {
        return invalid("chronological_split expects posts from a single market");
    }
    let mut times: Vec<i64> = posts.iter().map(|p| p.timestamp).collect();
    times.sort_unstable();
    let median = times[(times.len() - 1) / 2];
    let mut spec = SplitSpec {
        market: first.market.clone(),
        split_timestamp: median,
        train: BTreeSet::new(),
        test: BTreeSet::new(),
    };
    for p in posts {
        if p.timestamp <= median {
            spec.train.insert(p.post_id.clone());
        } else {
            spec.test.insert(p.post_id.clone());
        }
    }
    if spec.test.is_empty() {
        warn!("{}: degenerate split, every post is in train", spec.market);
    }
    Ok(spec)
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    market: String,
    post_id: String,
    split: Split,
}

/// Writes `market,post_id,split` rows, train before test, ids sorted.
pub fn write_split_manifest(path: &Path, specs: &[SplitSpec]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("{other:?}")),
    })?;
    for spec in specs {
        for (side, ids) in [(Split::Train, &spec.train), (Split::Test, &spec.test)] {
            for id in ids {
                w.serialize(ManifestRow {
                    market: spec.market.clone(),
                    post_id: id.clone(),
                    split: side,
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a split manifest back into per-market specs. The split timestamp
/// is recovered as the latest train timestamp found in `posts`.
pub fn read_split_manifest(path: &Path, posts: &[Post]) -> Result<Vec<SplitSpec>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("{other:?}")),
    })?;
    let mut specs: Vec<SplitSpec> = Vec::new();
    for row in r.deserialize::<ManifestRow>() {
        let row = row?;
        let idx = match specs.iter().position(|s| s.market == row.market) {
            Some(i) => i,
            None => {
                specs.push(SplitSpec {
                    market: row.market.clone(),
                    split_timestamp: 0,
                    train: BTreeSet::new(),
                    test: BTreeSet::new(),
                });
                specs.len() - 1
            }
        };
        match row.split {
            Split::Train => specs[idx].train.insert(row.post_id),
            Split::Test => specs[idx].test.insert(row.post_id),
        };
    }
    for spec in &mut specs {
        spec.split_timestamp = posts
            .iter()
            .filter(|p| p.market == spec.market && spec.train.contains(&p.post_id))
            .map(|p| p.timestamp)
            .max()
            .unwrap_or(0);
    }
    Ok(specs)
}
