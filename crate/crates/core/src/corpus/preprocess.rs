use std::sync::OnceLock;

use regex::Regex;

/// Tokens substituted for quoted posts, PGP material, links and images.
pub const SPECIAL_TOKENS: [&str; 6] = [
    "[QUOTE]",
    "[PGP PUBKEY]",
    "[PGP SIGNATURE]",
    "[PGP ENCMSG]",
    "[LINK]",
    "[IMAGE]",
];

const QUOTE: &str = "[QUOTE]";

pub const URL_PATTERN: &str = r"(https?://|www\.)[^\s]+";

struct Patterns {
    pubkey: Regex,
    signed_header: Regex,
    signature: Regex,
    encrypted: Regex,
    bb_image: Regex,
    html_image: Regex,
    url: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        pubkey: Regex::new(r"(?s)-----BEGIN PGP PUBLIC KEY BLOCK-----.*?-----END PGP PUBLIC KEY BLOCK-----")
            .unwrap(),
        signed_header: Regex::new(r"-----BEGIN PGP SIGNED MESSAGE-----[ \t]*\r?\n(?:Hash:[^\n]*\n)?(?:[ \t]*\r?\n)?").unwrap(),
        signature: Regex::new(r"(?s)-----BEGIN PGP SIGNATURE-----.*?-----END PGP SIGNATURE-----").unwrap(),
        encrypted: Regex::new(r"(?s)-----BEGIN PGP MESSAGE-----.*?-----END PGP MESSAGE-----").unwrap(),
        bb_image: Regex::new(r"(?is)\[img[^\]]*\].*?\[/img\]").unwrap(),
        html_image: Regex::new(r"(?i)<img\b[^>]*>").unwrap(),
        url: Regex::new(URL_PATTERN).unwrap(),
    })
}

/// How a forum marks up quoted posts.
#[derive(Clone, Debug)]
pub enum QuoteRule {
    /// Nesting-aware `[tag]…[/tag]` / `[tag=…]…[/tag]` blocks.
    BbCode(String),
    /// Any match of the pattern is one quoted region.
    Pattern(Regex),
}

impl QuoteRule {
    /// Parses `bbcode:<tag>` or `regex:<pattern>`.
    pub fn parse(spec: &str) -> Result<Self, String> {
        if let Some(tag) = spec.strip_prefix("bbcode:") {
            if tag.is_empty() || !tag.chars().all(|c| c.is_ascii_alphanumeric()) {
                return Err(format!("bad bbcode tag {tag:?}"));
            }
            Ok(QuoteRule::BbCode(tag.to_string()))
        } else if let Some(p) = spec.strip_prefix("regex:") {
            Regex::new(p).map(QuoteRule::Pattern).map_err(|e| e.to_string())
        } else {
            Err(format!("quote rule must start with bbcode: or regex:, got {spec:?}"))
        }
    }

    fn apply(&self, text: &str) -> String {
        match self {
            QuoteRule::BbCode(tag) => replace_bbcode(text, tag),
            QuoteRule::Pattern(re) => re.replace_all(text, QUOTE).into_owned(),
        }
    }
}

/// Replaces each outermost matched `[tag]…[/tag]` region with `[QUOTE]`.
/// Unbalanced tags are left alone.
fn replace_bbcode(text: &str, tag: &str) -> String {
    let re = Regex::new(&format!(r"(?i)\[(/?){}(?:=[^\]]*)?\]", regex::escape(tag))).unwrap();
    let mut stack: Vec<usize> = Vec::new();
    let mut regions: Vec<(usize, usize)> = Vec::new();
    for cap in re.captures_iter(text) {
        let m = cap.get(0).unwrap();
        if SPECIAL_TOKENS.contains(&m.as_str()) {
            continue;
        }
        if cap[1].is_empty() {
            stack.push(m.start());
        } else if let Some(start) = stack.pop() {
            regions.retain(|&(s, _)| s < start);
            regions.push((start, m.end()));
        }
    }
    if regions.is_empty() {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut pos = 0;
    for (s, e) in regions {
        out.push_str(&text[pos..s]);
        out.push_str(QUOTE);
        pos = e;
    }
    out.push_str(&text[pos..]);
    out
}

/// Text normaliser with per-market quote rules.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    quote_rules: Vec<QuoteRule>,
}

impl Default for Preprocessor {
    /// BBCode `[quote]` blocks and runs of `>`-prefixed lines.
    fn default() -> Self {
        Self {
            quote_rules: vec![
                QuoteRule::BbCode("quote".into()),
                QuoteRule::Pattern(Regex::new(r"(?m)^>[^\n]*(?:\n>[^\n]*)*").unwrap()),
            ],
        }
    }
}

impl Preprocessor {
    pub fn new(quote_rules: Vec<QuoteRule>) -> Self {
        Self { quote_rules }
    }

    pub fn from_specs<S: AsRef<str>>(specs: &[S]) -> Result<Self, String> {
        specs
            .iter()
            .map(|s| QuoteRule::parse(s.as_ref()))
            .collect::<Result<Vec<_>, _>>()
            .map(Self::new)
    }

    /// PGP blocks first, then quotes, images and finally links, so that
    /// URLs inside image markup become `[IMAGE]` rather than `[LINK]`.
    pub fn apply(&self, raw: &str) -> String {
        let p = patterns();
        let mut text = p.pubkey.replace_all(raw, "[PGP PUBKEY]").into_owned();
        text = p.signed_header.replace_all(&text, "").into_owned();
        text = p.signature.replace_all(&text, "[PGP SIGNATURE]").into_owned();
        text = p.encrypted.replace_all(&text, "[PGP ENCMSG]").into_owned();
        for rule in &self.quote_rules {
            text = rule.apply(&text);
        }
        text = p.bb_image.replace_all(&text, "[IMAGE]").into_owned();
        text = p.html_image.replace_all(&text, "[IMAGE]").into_owned();
        p.url.replace_all(&text, "[LINK]").into_owned()
    }
}

/// Normalises a post body with the default quote rules.
pub fn preprocess_text(raw: &str) -> String {
    Preprocessor::default().apply(raw)
}
