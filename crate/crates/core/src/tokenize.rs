//! Character and byte-level BPE vocabularies.
//!
//! Ids 0 and 1 are `[PAD]` and `[UNK]`; the six corpus special tokens
//! follow. Specials are matched atomically in text and never take part in
//! training counts. In BPE vocabularies ids 8..264 are the raw bytes.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::SPECIAL_TOKENS;
use crate::error::{invalid, Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const NUM_SPECIALS: usize = 2 + SPECIAL_TOKENS.len();
const BYTE_BASE: usize = NUM_SPECIALS;
pub const MIN_BPE_SIZE: usize = NUM_SPECIALS + 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Char,
    Bpe,
}

impl std::str::FromStr for VocabKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(VocabKind::Char),
            "bpe" => Ok(VocabKind::Bpe),
            other => invalid(format!("unknown tokenizer kind {other:?} (expected char|bpe)")),
        }
    }
}

impl VocabKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VocabKind::Char => "char",
            VocabKind::Bpe => "bpe",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vocab {
    kind: VocabKind,
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    chars: HashMap<char, u32>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

fn special_pattern() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| {
        let alts: Vec<String> = SPECIAL_TOKENS.iter().map(|t| regex::escape(t)).collect();
        Regex::new(&alts.join("|")).unwrap()
    })
}

fn pretokenizer() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| Regex::new(r" ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+").unwrap())
}

enum Segment<'a> {
    Special(u32),
    Text(&'a str),
}

fn segments(text: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut last = 0;
    for m in special_pattern().find_iter(text) {
        if m.start() > last {
            out.push(Segment::Text(&text[last..m.start()]));
        }
        let k = SPECIAL_TOKENS.iter().position(|t| *t == m.as_str()).unwrap();
        out.push(Segment::Special((2 + k) as u32));
        last = m.end();
    }
    if last < text.len() {
        out.push(Segment::Text(&text[last..]));
    }
    out
}

fn special_tokens() -> Vec<Vec<u8>> {
    let mut v = vec![PAD.as_bytes().to_vec(), UNK.as_bytes().to_vec()];
    v.extend(SPECIAL_TOKENS.iter().map(|t| t.as_bytes().to_vec()));
    v
}

impl Vocab {
    fn build(kind: VocabKind, tokens: Vec<Vec<u8>>, merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut chars = HashMap::new();
        let mut ranks = HashMap::new();
        match kind {
            VocabKind::Char => {
                for (i, t) in tokens.iter().enumerate().skip(NUM_SPECIALS) {
                    let s = std::str::from_utf8(t).map_err(|_| Error::Invalid(format!("char token {i} is not UTF-8")))?;
                    let mut it = s.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => {
                            chars.insert(c, i as u32);
                        }
                        _ => return invalid(format!("char token {i} is not a single character")),
                    }
                }
            }
            VocabKind::Bpe => {
                if tokens.len() != MIN_BPE_SIZE + merges.len() {
                    return invalid(format!("{} tokens for {} merges", tokens.len(), merges.len()));
                }
                for (r, &(a, b)) in merges.iter().enumerate() {
                    let id = (MIN_BPE_SIZE + r) as u32;
                    if a >= id || b >= id {
                        return invalid(format!("merge {r} refers to a later token"));
                    }
                    ranks.insert((a, b), (r, id));
                }
            }
        }
        Ok(Self {
            kind,
            tokens,
            merges,
            chars,
            ranks,
        })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> &[u8] {
        &self.tokens[id as usize]
    }

    /// Printable form of a token, lossy for partial UTF-8 sequences.
    pub fn token_str(&self, id: u32) -> String {
        String::from_utf8_lossy(&self.tokens[id as usize]).into_owned()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == token.as_bytes()).map(|i| i as u32)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for seg in segments(text) {
            match seg {
                Segment::Special(id) => out.push(id),
                Segment::Text(t) => match self.kind {
                    VocabKind::Char => out.extend(t.chars().map(|c| *self.chars.get(&c).unwrap_or(&UNK_ID))),
                    VocabKind::Bpe => {
                        for piece in pretokenizer().find_iter(t) {
                            self.encode_piece(piece.as_str().as_bytes(), &mut out);
                        }
                    }
                },
            }
        }
        out
    }

    fn encode_piece(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = bytes.iter().map(|b| (BYTE_BASE + *b as usize) as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(r, id)| (r, w[0], w[1], id)))
                .min();
            let Some((_, a, b, id)) = best else { break };
            ids = merge_word(&ids, a, b, id);
        }
        out.extend(ids);
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id == PAD_ID {
                continue;
            }
            bytes.extend_from_slice(&self.tokens[id as usize]);
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = format!("{} {}\n", self.kind.as_str(), self.tokens.len());
        for t in &self.tokens {
            s.push_str(&escape(t));
            s.push('\n');
        }
        if self.kind == VocabKind::Bpe {
            s.push_str("#MERGES\n");
            for (a, b) in &self.merges {
                let _ = writeln!(s, "{a} {b}");
            }
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Invalid("empty vocab file".into()))?;
        let (kind, size) = header
            .split_once(' ')
            .ok_or_else(|| Error::Invalid(format!("bad vocab header {header:?}")))?;
        let kind: VocabKind = kind.parse()?;
        let size: usize = size
            .trim()
            .parse()
            .map_err(|_| Error::Invalid(format!("bad vocab size in {header:?}")))?;
        let mut tokens = Vec::with_capacity(size);
        for _ in 0..size {
            let line = lines.next().ok_or_else(|| Error::Invalid("vocab file truncated".into()))?;
            tokens.push(unescape(line)?);
        }
        if tokens[..NUM_SPECIALS.min(tokens.len())] != special_tokens()[..NUM_SPECIALS.min(tokens.len())] {
            return invalid("vocab specials out of place");
        }
        let mut merges = Vec::new();
        if kind == VocabKind::Bpe {
            match lines.next() {
                Some("#MERGES") => {}
                other => return invalid(format!("expected #MERGES, got {other:?}")),
            }
            for line in lines.filter(|l| !l.is_empty()) {
                let mut it = line.split(' ').map(str::parse::<u32>);
                match (it.next(), it.next(), it.next()) {
                    (Some(Ok(a)), Some(Ok(b)), None) => merges.push((a, b)),
                    _ => return invalid(format!("bad merge line {line:?}")),
                }
            }
        }
        Self::build(kind, tokens, merges)
    }
}

fn escape(token: &[u8]) -> String {
    let mut out = String::new();
    let push_bytes = |out: &mut String, bs: &[u8]| {
        for b in bs {
            let _ = write!(out, "\\x{b:02x}");
        }
    };
    match std::str::from_utf8(token) {
        Ok(s) => {
            for c in s.chars() {
                if c == '\\' || c == '#' || c.is_whitespace() || c.is_control() {
                    let mut buf = [0u8; 4];
                    push_bytes(&mut out, c.encode_utf8(&mut buf).as_bytes());
                } else {
                    out.push(c);
                }
            }
        }
        Err(_) => {
            for &b in token {
                if b.is_ascii_graphic() && b != b'\\' && b != b'#' {
                    out.push(b as char);
                } else {
                    push_bytes(&mut out, &[b]);
                }
            }
        }
    }
    out
}

fn unescape(line: &str) -> Result<Vec<u8>> {
    let bytes = line.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            let hex = line
                .get(i + 2..i + 4)
                .filter(|_| bytes.get(i + 1) == Some(&b'x'))
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| Error::Invalid(format!("bad escape in vocab line {line:?}")))?;
            out.push(hex);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Ok(out)
}

fn merge_word(ids: &[u32], a: u32, b: u32, new: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
            out.push(new);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Keeps the `size - 8` most frequent characters; ties go to the lower
/// code point.
pub fn train_char_vocab<S: AsRef<str>>(texts: &[S], size: usize) -> Result<Vocab> {
    if size < NUM_SPECIALS {
        return invalid(format!("char vocab size {size} is below the {NUM_SPECIALS} reserved tokens"));
    }
    let mut counts: HashMap<char, u64> = HashMap::new();
    for text in texts {
        for seg in segments(text.as_ref()) {
            if let Segment::Text(t) = seg {
                for c in t.chars() {
                    *counts.entry(c).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(char, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut tokens = special_tokens();
    let mut buf = [0u8; 4];
    tokens.extend(
        ranked
            .into_iter()
            .take(size - NUM_SPECIALS)
            .map(|(c, _)| c.encode_utf8(&mut buf).as_bytes().to_vec()),
    );
    Vocab::build(VocabKind::Char, tokens, Vec::new())
}

/// Byte-level BPE. Merges the most frequent adjacent pair (ties to the
/// lexicographically smallest byte pair) until the vocabulary holds `size`
/// tokens or no pair occurs at least twice.
pub fn train_bpe<S: AsRef<str>>(texts: &[S], size: usize) -> Result<Vocab> {
    if size < MIN_BPE_SIZE {
        return invalid(format!("bpe vocab size {size} is below the {MIN_BPE_SIZE} base tokens"));
    }
    let mut word_counts: HashMap<&str, i64> = HashMap::new();
    for text in texts {
        for seg in segments(text.as_ref()) {
            if let Segment::Text(t) = seg {
                for piece in pretokenizer().find_iter(t) {
                    *word_counts.entry(piece.as_str()).or_default() += 1;
                }
            }
        }
    }
    let mut entries: Vec<(&str, i64)> = word_counts.into_iter().collect();
    entries.sort_unstable();
    let freqs: Vec<i64> = entries.iter().map(|e| e.1).collect();
    let mut words: Vec<Vec<u32>> = entries
        .iter()
        .map(|(w, _)| w.bytes().map(|b| (BYTE_BASE + b as usize) as u32).collect())
        .collect();

    let mut tokens = special_tokens();
    tokens.extend((0..=255u8).map(|b| vec![b]));

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += freqs[wi];
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }
    type Entry = (i64, Reverse<(Vec<u8>, Vec<u8>)>, (u32, u32));
    let key = |tokens: &[Vec<u8>], p: (u32, u32), c: i64| -> Entry {
        (c, Reverse((tokens[p.0 as usize].clone(), tokens[p.1 as usize].clone())), p)
    };
    let mut heap: BinaryHeap<Entry> = pair_counts.iter().map(|(&p, &c)| key(&tokens, p, c)).collect();

    let mut merges = Vec::new();
    while tokens.len() < size {
        let Some((count, _, pair)) = heap.pop() else { break };
        if pair_counts.get(&pair).copied().unwrap_or(0) != count {
            continue;
        }
        if count < 2 {
            break;
        }
        let new_id = tokens.len() as u32;
        let mut merged = tokens[pair.0 as usize].clone();
        merged.extend_from_slice(&tokens[pair.1 as usize]);
        tokens.push(merged);
        merges.push(pair);

        let mut touched: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        touched.sort_unstable();
        let mut changed: HashSet<(u32, u32)> = HashSet::new();
        for wi in touched {
            let f = freqs[wi];
            let old = &words[wi];
            if !old.windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1) {
                continue;
            }
            for p in old.windows(2) {
                let k = (p[0], p[1]);
                *pair_counts.get_mut(&k).unwrap() -= f;
                changed.insert(k);
            }
            let new = merge_word(old, pair.0, pair.1, new_id);
            for p in new.windows(2) {
                let k = (p[0], p[1]);
                *pair_counts.entry(k).or_default() += f;
                where_.entry(k).or_default().insert(wi);
                changed.insert(k);
            }
            words[wi] = new;
        }
        pair_counts.remove(&pair);
        let mut changed: Vec<(u32, u32)> = changed.into_iter().collect();
        changed.sort_unstable();
        for p in changed {
            match pair_counts.get(&p).copied() {
                Some(c) if c > 0 => heap.push(key(&tokens, p, c)),
                Some(_) => {
                    pair_counts.remove(&p);
                }
                None => {}
            }
        }
    }
    Vocab::build(VocabKind::Bpe, tokens, merges)
}

pub fn train_vocab<S: AsRef<str>>(kind: VocabKind, texts: &[S], size: usize) -> Result<Vocab> {
    match kind {
        VocabKind::Char => train_char_vocab(texts, size),
        VocabKind::Bpe => train_bpe(texts, size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_counts_and_tie_order() {
        let v = train_char_vocab(&["aab"], 100).unwrap();
        assert_eq!(v.len(), NUM_SPECIALS + 2);
        assert_eq!(v.token_str(NUM_SPECIALS as u32), "a");
        assert_eq!(v.token_str(NUM_SPECIALS as u32 + 1), "b");
        let tie = train_char_vocab(&["ba"], 100).unwrap();
        assert_eq!(tie.token_str(NUM_SPECIALS as u32), "a");
    }

    #[test]
    fn char_vocab_truncates_to_size() {
        let text: String = (0..100u32).map(|i| char::from_u32(0x100 + i).unwrap()).collect();
        let v = train_char_vocab(&[text.as_str(), ""], 8).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.encode("ā"), vec![UNK_ID]);
        assert!(train_char_vocab(&["x"], 7).is_err());
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = train_bpe(&["abab abab"], MIN_BPE_SIZE + 1).unwrap();
        let (a, b) = v.merges()[0];
        assert_eq!(v.token_bytes(a), b"a");
        assert_eq!(v.token_bytes(b), b"b");
        assert_eq!(v.encode("abab").len(), 2);
    }

    #[test]
    fn base_size_has_no_merges() {
        let v = train_bpe(&["hello hello"], MIN_BPE_SIZE).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), 264);
        assert!(train_bpe(&["x"], MIN_BPE_SIZE - 1).is_err());
    }

    #[test]
    fn specials_are_atomic() {
        for v in [train_char_vocab(&["abc"], 50).unwrap(), train_bpe(&["abc"], 300).unwrap()] {
            assert_eq!(v.encode(""), Vec::<u32>::new());
            assert_eq!(v.encode("[LINK]"), vec![v.id_of("[LINK]").unwrap()]);
            let ids = v.encode("a [PGP PUBKEY] b");
            assert!(ids.contains(&3));
        }
    }

    #[test]
    fn bpe_never_emits_unk_or_pad() {
        let v = train_bpe(&["the cat sat on the mat"], 300).unwrap();
        let ids = v.encode("ünïcødé ✓ \u{0} tabs\tand\nnewlines");
        assert!(!ids.contains(&UNK_ID) && !ids.contains(&PAD_ID));
    }

    #[test]
    fn vocab_file_round_trip() {
        let corpus = ["lol... £50 for #1 \\o/ [LINK]", "  spaced\tout\n# tags"];
        let dir = tempfile::tempdir().unwrap();
        for v in [train_char_vocab(&corpus, 40).unwrap(), train_bpe(&corpus, 290).unwrap()] {
            let path = dir.path().join("vocab.txt");
            v.save(&path).unwrap();
            let back = Vocab::load(&path).unwrap();
            assert_eq!(back.tokens, v.tokens);
            assert_eq!(back.merges, v.merges);
            assert_eq!(back.encode(corpus[0]), v.encode(corpus[0]));
        }
    }

    proptest::proptest! {
        #[test]
        fn bpe_round_trip(s in "\\PC{0,40}", extra in "[a-z £.]{0,30}") {
            let v = train_bpe(&["ab ab abc £££ ... lol", extra.as_str()], 300).unwrap();
            proptest::prop_assert_eq!(v.decode(&v.encode(&s)), s.clone());
            proptest::prop_assert_eq!(v.encode(&s), v.encode(&s));
        }
    }
}
