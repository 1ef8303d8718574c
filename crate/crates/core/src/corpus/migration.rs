use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Episode, Post};
use crate::error::{invalid, Error, Result};

/// A username within a market.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UserRef {
    pub market: String,
    pub username: String,
}

impl UserRef {
    pub fn new(market: impl Into<String>, username: impl Into<String>) -> Self {
        Self {
            market: market.into(),
            username: username.into(),
        }
    }

    /// Parses `market:username`.
    pub fn parse(s: &str) -> Option<Self> {
        let (m, u) = s.split_once(':')?;
        (!m.is_empty() && !u.is_empty()).then(|| Self::new(m, u))
    }
}

impl fmt::Display for UserRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.market, self.username)
    }
}

/// An adjudicated cross-market identity pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MigrationLabel {
    pub user_a: UserRef,
    pub user_b: UserRef,
    pub same_author: bool,
    pub evidence: String,
}

/// A cross-market pair awaiting adjudication, with the key fingerprints
/// that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidatePair {
    pub user_a: UserRef,
    pub user_b: UserRef,
    pub fingerprints: Vec<String>,
}

#[derive(Debug, Default)]
pub struct PgpReport {
    pub candidates: Vec<CandidatePair>,
    pub malformed_blocks: usize,
}

fn key_block() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| {
        Regex::new(r"(?s)-----BEGIN PGP PUBLIC KEY BLOCK-----(.*?)-----END PGP PUBLIC KEY BLOCK-----").unwrap()
    })
}

/// Base64 payload of an armored key: armor headers (up to the first blank
/// line) and the `=` checksum line are dropped, whitespace removed.
fn key_payload(inner: &str) -> Option<String> {
    let lines: Vec<&str> = inner.lines().map(str::trim).collect();
    let body_start = if lines.iter().any(|l| l.contains(": ")) {
        lines.iter().position(|l| l.is_empty()).map_or(0, |i| i + 1)
    } else {
        0
    };
    let mut payload = String::new();
    for line in &lines[body_start.min(lines.len())..] {
        if line.is_empty() || line.contains(": ") {
            continue;
        }
        if line.starts_with('=') && line.len() <= 6 {
            continue;
        }
        payload.push_str(line);
    }
    let valid = !payload.is_empty()
        && payload
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'+' || b == b'/' || b == b'=');
    valid.then_some(payload)
}

/// SHA-256 of a key block's normalised base64 payload, hex encoded.
pub fn key_fingerprint(block_inner: &str) -> Option<String> {
    key_payload(block_inner).map(|p| hex::encode(Sha256::digest(p.as_bytes())))
}

/// Pairs identities from different markets that posted the same PGP public
/// key. Must run on raw bodies, before key blocks are replaced by tokens.
pub fn extract_pgp_candidate_pairs(posts: &[Post]) -> PgpReport {
    let mut owners: BTreeMap<String, BTreeSet<UserRef>> = BTreeMap::new();
    let mut report = PgpReport::default();
    for p in posts {
        for cap in key_block().captures_iter(&p.body) {
            match key_fingerprint(&cap[1]) {
                Some(fp) => {
                    owners.entry(fp).or_default().insert(UserRef::new(&p.market, &p.author));
                }
                None => {
                    report.malformed_blocks += 1;
                    warn!("{}:{}: malformed PGP key block ignored", p.market, p.post_id);
                }
            }
        }
    }
    let mut pairs: BTreeMap<(UserRef, UserRef), Vec<String>> = BTreeMap::new();
    for (fp, ids) in owners {
        let ids: Vec<UserRef> = ids.into_iter().collect();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                if ids[i].market != ids[j].market {
                    pairs.entry((ids[i].clone(), ids[j].clone())).or_default().push(fp.clone());
                }
            }
        }
    }
    report.candidates = pairs
        .into_iter()
        .map(|((a, b), fingerprints)| CandidatePair {
            user_a: a,
            user_b: b,
            fingerprints,
        })
        .collect();
    report
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    market_a: String,
    user_a: String,
    market_b: String,
    user_b: String,
    same_author: String,
    #[serde(default)]
    evidence: String,
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Invalid(format!("{other:?}")),
        })
}

fn open_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("{other:?}")),
    })
}

/// Candidates written in the label-file layout with `same_author` empty,
/// ready for manual adjudication.
pub fn write_candidates(path: &Path, candidates: &[CandidatePair]) -> Result<()> {
    let mut w = open_writer(path)?;
    for c in candidates {
        w.serialize(LabelRow {
            market_a: c.user_a.market.clone(),
            user_a: c.user_a.username.clone(),
            market_b: c.user_b.market.clone(),
            user_b: c.user_b.username.clone(),
            same_author: String::new(),
            evidence: format!("pgp:{}", c.fingerprints.join(";")),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidatePair>> {
    let mut r = open_reader(path)?;
    let mut out = Vec::new();
    for row in r.deserialize::<LabelRow>() {
        let row = row?;
        let fingerprints = row
            .evidence
            .strip_prefix("pgp:")
            .map(|s| s.split(';').map(str::to_string).collect())
            .unwrap_or_default();
        out.push(CandidatePair {
            user_a: UserRef::new(row.market_a, row.user_a),
            user_b: UserRef::new(row.market_b, row.user_b),
            fingerprints,
        });
    }
    Ok(out)
}

pub fn write_migration_labels(path: &Path, labels: &[MigrationLabel]) -> Result<()> {
    let mut w = open_writer(path)?;
    for l in labels {
        w.serialize(LabelRow {
            market_a: l.user_a.market.clone(),
            user_a: l.user_a.username.clone(),
            market_b: l.user_b.market.clone(),
            user_b: l.user_b.username.clone(),
            same_author: l.same_author.to_string(),
            evidence: l.evidence.clone(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads adjudicated labels. Pairs are unordered; repeated pairs collapse
/// to one label, and a pair labelled both ways is an error. Output keeps
/// first-appearance order.
pub fn load_migration_labels(path: &Path) -> Result<Vec<MigrationLabel>> {
    let mut r = open_reader(path)?;
    let mut out: Vec<MigrationLabel> = Vec::new();
    let mut index: HashMap<(UserRef, UserRef), usize> = HashMap::new();
    for (line, row) in r.deserialize::<LabelRow>().enumerate() {
        let row = row?;
        let same_author = match row.same_author.to_ascii_lowercase().as_str() {
            "true" => true,
            "false" => false,
            other => return invalid(format!("label row {}: same_author must be true|false, got {other:?}", line + 2)),
        };
        let a = UserRef::new(row.market_a, row.user_a);
        let b = UserRef::new(row.market_b, row.user_b);
        if a.market == b.market {
            return invalid(format!("label row {}: {a} and {b} are in the same market", line + 2));
        }
        let key = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
        match index.get(&key) {
            Some(&i) if out[i].same_author != same_author => {
                return invalid(format!("conflicting labels for {} / {}", key.0, key.1));
            }
            Some(_) => {}
            None => {
                index.insert(key, out.len());
                out.push(MigrationLabel {
                    user_a: a,
                    user_b: b,
                    same_author,
                    evidence: row.evidence,
                });
            }
        }
    }
    Ok(out)
}

/// Episodes of every labelled user, relabelled by identity cluster.
#[derive(Clone, Debug, Default)]
pub struct CrossDataset {
    /// Members of each class, sorted; classes ordered by first member.
    pub classes: Vec<Vec<UserRef>>,
    pub episodes: Vec<Episode>,
    /// Class of each entry in `episodes`.
    pub labels: Vec<usize>,
}

impl CrossDataset {
    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn class_of(&self, user: &UserRef) -> Option<usize> {
        self.classes.iter().position(|c| c.contains(user))
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Union-find over `same_author = true` pairs; users only in distinct pairs
/// become singleton classes. Labels naming a user without episodes are
/// skipped with a warning.
pub fn build_cross_dataset(labels: &[MigrationLabel], episodes: &[Episode]) -> CrossDataset {
    let mut by_user: BTreeMap<UserRef, Vec<&Episode>> = BTreeMap::new();
    for e in episodes {
        by_user.entry(UserRef::new(&e.market, &e.author)).or_default().push(e);
    }
    let mut users: Vec<UserRef> = Vec::new();
    let mut kept: Vec<&MigrationLabel> = Vec::new();
    for l in labels {
        let missing: Vec<&UserRef> = [&l.user_a, &l.user_b]
            .into_iter()
            .filter(|u| !by_user.contains_key(*u))
            .collect();
        if !missing.is_empty() {
            warn!("label {} / {} skipped: no episodes for {}", l.user_a, l.user_b, missing[0]);
            continue;
        }
        users.push(l.user_a.clone());
        users.push(l.user_b.clone());
        kept.push(l);
    }
    users.sort();
    users.dedup();
    let pos = |u: &UserRef| users.binary_search(u).expect("user registered");
    let mut parent: Vec<usize> = (0..users.len()).collect();
    for l in kept.iter().filter(|l| l.same_author) {
        let (a, b) = (find(&mut parent, pos(&l.user_a)), find(&mut parent, pos(&l.user_b)));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    for l in kept.iter().filter(|l| !l.same_author) {
        if find(&mut parent, pos(&l.user_a)) == find(&mut parent, pos(&l.user_b)) {
            warn!("{} / {} labelled distinct but linked through other pairs", l.user_a, l.user_b);
        }
    }
    let mut groups: BTreeMap<usize, Vec<UserRef>> = BTreeMap::new();
    for (i, u) in users.iter().enumerate() {
        groups.entry(find(&mut parent, i)).or_default().push(u.clone());
    }
    let classes: Vec<Vec<UserRef>> = groups.into_values().collect();
    let mut data = CrossDataset {
        classes,
        ..Default::default()
    };
    for (c, members) in data.classes.iter().enumerate() {
        for u in members {
            for e in &by_user[u] {
                data.episodes.push((*e).clone());
                data.labels.push(c);
            }
        }
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const KEY_A: &str = "-----BEGIN PGP PUBLIC KEY BLOCK-----\nVersion: GnuPG v1\n\nmQENBFAKEKEYAAAB\nCAAAAAAA+/==\n=AbCd\n-----END PGP PUBLIC KEY BLOCK-----";

    fn post(market: &str, author: &str, id: &str, body: &str) -> Post {
        Post {
            market: market.into(),
            subforum: "s".into(),
            thread_id: "t".into(),
            post_id: id.into(),
            author: author.into(),
            timestamp: 10,
            is_thread_start: false,
            body: body.into(),
        }
    }

    #[test]
    fn shared_key_across_markets_gives_one_pair() {
        let posts = vec![
            post("M1", "alice", "1", &format!("my key {KEY_A}")),
            post("M2", "alicia", "2", KEY_A),
            post("M2", "alicia", "3", KEY_A),
        ];
        let r = extract_pgp_candidate_pairs(&posts);
        assert_eq!(r.candidates.len(), 1);
        assert_eq!(r.candidates[0].user_a, UserRef::new("M1", "alice"));
        assert_eq!(r.candidates[0].user_b, UserRef::new("M2", "alicia"));
    }

    #[test]
    fn whitespace_and_headers_do_not_change_the_fingerprint() {
        let reflowed = "-----BEGIN PGP PUBLIC KEY BLOCK-----\n\nmQENBFAKEKEY\nAAABCAAAAAAA+/==\n=AbCd\n-----END PGP PUBLIC KEY BLOCK-----";
        let inner = |s: &str| key_block().captures(s).unwrap()[1].to_string();
        assert_eq!(key_fingerprint(&inner(KEY_A)), key_fingerprint(&inner(reflowed)));
    }

    #[test]
    fn same_market_or_single_owner_gives_nothing() {
        let same_market = vec![post("M1", "alice", "1", KEY_A), post("M1", "alice2", "2", KEY_A)];
        assert!(extract_pgp_candidate_pairs(&same_market).candidates.is_empty());
        let once = vec![post("M1", "alice", "1", KEY_A)];
        assert!(extract_pgp_candidate_pairs(&once).candidates.is_empty());
    }

    #[test]
    fn malformed_blocks_are_counted() {
        let bad = "-----BEGIN PGP PUBLIC KEY BLOCK-----\n\n!!not base64!!\n-----END PGP PUBLIC KEY BLOCK-----";
        let r = extract_pgp_candidate_pairs(&[post("M1", "a", "1", bad)]);
        assert_eq!(r.malformed_blocks, 1);
    }

    fn label_file(rows: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "market_a,user_a,market_b,user_b,same_author").unwrap();
        for r in rows {
            writeln!(f, "{r}").unwrap();
        }
        f
    }

    #[test]
    fn thirty_three_positive_rows() {
        let rows: Vec<String> = (0..33).map(|i| format!("SR,u{i},SR2,v{i},true")).collect();
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        let labels = load_migration_labels(label_file(&refs).path()).unwrap();
        assert_eq!(labels.len(), 33);
        assert!(labels.iter().all(|l| l.same_author));
    }

    #[test]
    fn empty_label_file() {
        assert!(load_migration_labels(label_file(&[]).path()).unwrap().is_empty());
    }

    #[test]
    fn duplicates_collapse_and_conflicts_fail() {
        let dup = label_file(&["A,x,B,y,true", "B,y,A,x,true"]);
        assert_eq!(load_migration_labels(dup.path()).unwrap().len(), 1);
        let conflict = label_file(&["A,x,B,y,true", "A,x,B,y,false"]);
        let err = load_migration_labels(conflict.path()).unwrap_err();
        assert!(err.is_validation(), "{err}");
        let same_market = label_file(&["A,x,A,y,true"]);
        assert!(load_migration_labels(same_market.path()).is_err());
    }

    fn ep(market: &str, author: &str) -> Episode {
        Episode {
            market: market.into(),
            author: author.into(),
            post_ids: vec![format!("{market}{author}")],
        }
    }

    fn label(a: (&str, &str), b: (&str, &str), same: bool) -> MigrationLabel {
        MigrationLabel {
            user_a: UserRef::new(a.0, a.1),
            user_b: UserRef::new(b.0, b.1),
            same_author: same,
            evidence: String::new(),
        }
    }

    #[test]
    fn transitive_pairs_form_one_class() {
        let eps = vec![ep("M1", "a"), ep("M2", "b"), ep("M3", "c"), ep("M1", "z")];
        let labels = vec![label(("M1", "a"), ("M2", "b"), true), label(("M2", "b"), ("M3", "c"), true)];
        let d = build_cross_dataset(&labels, &eps);
        assert_eq!(d.classes.len(), 1);
        assert_eq!(d.classes[0].len(), 3);
        assert_eq!(d.episodes.len(), 3);
        assert!(d.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn distinct_pair_gives_two_singletons() {
        let eps = vec![ep("M1", "a"), ep("M2", "b")];
        let d = build_cross_dataset(&[label(("M1", "a"), ("M2", "b"), false)], &eps);
        assert_eq!(d.classes.len(), 2);
        assert_eq!(d.labels, vec![0, 1]);
    }

    #[test]
    fn no_labels_and_unknown_users() {
        let eps = vec![ep("M1", "a")];
        assert!(build_cross_dataset(&[], &eps).is_empty());
        let d = build_cross_dataset(&[label(("M1", "a"), ("M2", "ghost"), true)], &eps);
        assert!(d.is_empty());
    }

    proptest::proptest! {
        #[test]
        fn classes_partition_labelled_users(pairs in proptest::collection::vec((0usize..6, 0usize..6, proptest::bool::ANY), 0..12)) {
            let eps: Vec<Episode> = (0..6).flat_map(|i| [ep("M1", &format!("u{i}")), ep("M2", &format!("u{i}"))]).collect();
            let labels: Vec<MigrationLabel> = pairs
                .iter()
                .map(|&(a, b, s)| label(("M1", &format!("u{a}")), ("M2", &format!("u{b}")), s))
                .collect();
            let d = build_cross_dataset(&labels, &eps);
            let mut seen = BTreeSet::new();
            for c in &d.classes {
                for u in c {
                    proptest::prop_assert!(seen.insert(u.clone()));
                }
            }
            let expected: BTreeSet<UserRef> = labels.iter().flat_map(|l| [l.user_a.clone(), l.user_b.clone()]).collect();
            proptest::prop_assert_eq!(seen, expected);
        }
    }
}
