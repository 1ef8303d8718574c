use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Post;
use crate::error::{Error, Result};

/// An ordered bundle of same-author posts from one market.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub market: String,
    pub author: String,
    /// Post ids in ascending time order.
    pub post_ids: Vec<String>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.post_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.post_ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpisodeMode {
    /// Consecutive non-overlapping windows; the trailing remainder is dropped.
    Fixed,
    /// As many windows as `Fixed` would emit, each starting at a random
    /// offset.
    Sampled { seed: u64 },
}

/// Groups posts by `(market, author)`, orders them by time and cuts them
/// into episodes of `len` posts. Authors with fewer than
/// `min_episodes * len` posts are dropped. Output is ordered by market,
/// then author, then time.
pub fn assemble_episodes(posts: &[&Post], len: usize, min_episodes: usize, mode: EpisodeMode) -> Vec<Episode> {
    assert!(len >= 1, "episode length must be at least 1");
    let mut by_author: BTreeMap<(&str, &str), Vec<&Post>> = BTreeMap::new();
    for p in posts {
        by_author.entry((&p.market, &p.author)).or_default().push(p);
    }
    let mut rng = match mode {
        EpisodeMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        EpisodeMode::Fixed => None,
    };
    let mut out = Vec::new();
    for ((market, author), mut list) in by_author {
        if list.len() < min_episodes * len {
            continue;
        }
        list.sort_by(|a, b| (a.timestamp, &a.post_id).cmp(&(b.timestamp, &b.post_id)));
        let count = list.len() / len;
        for k in 0..count {
            let start = match rng.as_mut() {
                Some(r) => r.gen_range(0..=list.len() - len),
                None => k * len,
            };
            out.push(Episode {
                market: market.to_string(),
                author: author.to_string(),
                post_ids: list[start..start + len].iter().map(|p| p.post_id.clone()).collect(),
            });
        }
    }
    out
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for e in episodes {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn posts(author: &str, n: usize) -> Vec<Post> {
        (0..n)
            .map(|i| Post {
                market: "M".into(),
                subforum: "s".into(),
                thread_id: "t".into(),
                post_id: format!("{author}{i}"),
                author: author.into(),
                timestamp: 1000 - i as i64,
                is_thread_start: false,
                body: String::new(),
            })
            .collect()
    }

    fn refs(p: &[Post]) -> Vec<&Post> {
        p.iter().collect()
    }

    #[test]
    fn ten_posts_make_two_episodes_of_five() {
        let p = posts("a", 10);
        let e = assemble_episodes(&refs(&p), 5, 2, EpisodeMode::Fixed);
        assert_eq!(e.len(), 2);
        // Sorted by time: the last-created post id comes first.
        assert_eq!(e[0].post_ids[0], "a9");
        assert!(e.iter().all(|x| x.len() == 5));
    }

    #[test]
    fn nine_posts_fall_below_the_threshold() {
        let p = posts("a", 9);
        assert!(assemble_episodes(&refs(&p), 5, 2, EpisodeMode::Fixed).is_empty());
    }

    #[test]
    fn unit_windows() {
        let p = posts("a", 5);
        assert_eq!(assemble_episodes(&refs(&p), 1, 2, EpisodeMode::Fixed).len(), 5);
    }

    #[test]
    fn sampled_windows_are_contiguous_and_seeded() {
        let p = posts("a", 23);
        let r = refs(&p);
        let a = assemble_episodes(&r, 5, 2, EpisodeMode::Sampled { seed: 3 });
        let b = assemble_episodes(&r, 5, 2, EpisodeMode::Sampled { seed: 3 });
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let fixed = assemble_episodes(&r, 23, 1, EpisodeMode::Fixed);
        let order: Vec<&String> = fixed[0].post_ids.iter().collect();
        for e in &a {
            let start = order.iter().position(|id| **id == e.post_ids[0]).unwrap();
            for (k, id) in e.post_ids.iter().enumerate() {
                assert_eq!(order[start + k], id);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn fixed_windows_are_disjoint_and_full(counts in proptest::collection::vec(0usize..30, 1..6), len in 1usize..7) {
            let all: Vec<Post> = counts.iter().enumerate().flat_map(|(i, &n)| posts(&format!("u{i}_"), n)).collect();
            let eps = assemble_episodes(&refs(&all), len, 2, EpisodeMode::Fixed);
            let mut seen = HashSet::new();
            for e in &eps {
                proptest::prop_assert_eq!(e.len(), len);
                for id in &e.post_ids {
                    proptest::prop_assert!(seen.insert(id.clone()));
                }
            }
            let expected: usize = counts.iter().filter(|&&n| n >= 2 * len).map(|n| n / len).sum();
            proptest::prop_assert_eq!(eps.len(), expected);
        }
    }
}
