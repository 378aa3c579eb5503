//! Word-level normalization of short social-media texts.
//!
//! Texts are lowercased, emojis from the configured [`EmojiSet`] are pulled
//! out as labels, and URLs, user mentions and numbers are replaced by
//! special tokens. Repeated-character runs are collapsed so that spelling
//! variants such as `loool` and `looooool` land on one token.

use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

pub const PAD_TOK: &str = "<PAD>";
pub const UNKNOWN_TOK: &str = "<UNK>";
pub const URL_TOK: &str = "<URL>";
pub const MENTION_TOK: &str = "<MENTION>";
pub const NUM_TOK: &str = "<NUM>";

/// Reserved tokens, in vocabulary index order.
pub const SPECIAL_TOKENS: [&str; 5] = [PAD_TOK, UNKNOWN_TOK, URL_TOK, MENTION_TOK, NUM_TOK];

/// Minimum run length that gets collapsed, and the length it collapses to.
const COLLAPSE_TARGET: usize = 2;

static PIECE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\d+\.\d+\b|@\w+|[\w']+|[^\w\s]+").expect("static regex"));
static NUMBER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+(\.\d+)?$").expect("static regex"));

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("emoji set line {line}: {reason}")]
    MalformedEmojiSet { line: usize, reason: String },
    #[error("emoji set line {line}: index {found} does not match line position {line}")]
    IndexMismatch { line: usize, found: usize },
    #[error("emoji set line {line}: duplicate emoji sequence")]
    DuplicateEmoji { line: usize },
    #[error("reading emoji set: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EmojiId(pub usize);

impl fmt::Display for EmojiId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmojiEntry {
    pub id: EmojiId,
    pub sequence: String,
    pub name: String,
}

/// Ordered emoji inventory. Label indices are the entry positions, so the
/// order is part of the data format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmojiSet {
    entries: Vec<EmojiEntry>,
    /// Entry indices sorted by sequence length, longest first.
    match_order: Vec<usize>,
}

impl EmojiSet {
    pub fn new(entries: Vec<(String, String)>) -> Result<Self, TokenizerError> {
        let mut out = Vec::with_capacity(entries.len());
        for (i, (sequence, name)) in entries.into_iter().enumerate() {
            if sequence.is_empty() {
                return Err(TokenizerError::MalformedEmojiSet { line: i, reason: "empty codepoint sequence".into() });
            }
            if out.iter().any(|e: &EmojiEntry| e.sequence == sequence) {
                return Err(TokenizerError::DuplicateEmoji { line: i });
            }
            out.push(EmojiEntry { id: EmojiId(i), sequence, name });
        }
        let mut match_order: Vec<usize> = (0..out.len()).collect();
        match_order.sort_by_key(|&i| (std::cmp::Reverse(out[i].sequence.chars().count()), i));
        Ok(Self { entries: out, match_order })
    }

    /// Parses `<index>\t<hex codepoints, space-separated>\t<name>` records.
    /// Lines starting with `#` are comments.
    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        let mut entries = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(idx), Some(cps), Some(name), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(TokenizerError::MalformedEmojiSet {
                    line: line_no,
                    reason: "expected three tab-separated fields".into(),
                });
            };
            let idx: usize = idx.trim().parse().map_err(|_| TokenizerError::MalformedEmojiSet {
                line: line_no,
                reason: format!("bad index {idx:?}"),
            })?;
            if idx != entries.len() {
                return Err(TokenizerError::IndexMismatch { line: line_no, found: idx });
            }
            let mut sequence = String::new();
            for cp in cps.split_whitespace() {
                let ch = u32::from_str_radix(cp, 16).ok().and_then(char::from_u32).ok_or_else(|| {
                    TokenizerError::MalformedEmojiSet { line: line_no, reason: format!("bad codepoint {cp:?}") }
                })?;
                sequence.push(ch);
            }
            entries.push((sequence, name.trim().to_string()));
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Inverse of [`EmojiSet::parse`].
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let cps: Vec<String> = e.sequence.chars().map(|c| format!("{:X}", c as u32)).collect();
            s.push_str(&format!("{}\t{}\t{}\n", e.id.0, cps.join(" "), e.name));
        }
        s
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[EmojiEntry] {
        &self.entries
    }

    pub fn get(&self, id: EmojiId) -> Option<&EmojiEntry> {
        self.entries.get(id.0)
    }

    pub fn name(&self, id: EmojiId) -> &str {
        self.entries.get(id.0).map(|e| e.name.as_str()).unwrap_or("?")
    }

    fn match_at(&self, rest: &str) -> Option<&EmojiEntry> {
        self.match_order.iter().map(|&i| &self.entries[i]).find(|e| rest.starts_with(e.sequence.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawText {
    pub id: String,
    pub text: String,
}

impl RawText {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub had_url: bool,
    /// Every in-set emoji occurrence, in text order (repeats kept).
    pub emojis_found: Vec<EmojiId>,
    pub content_token_count: usize,
}

impl TokenSequence {
    /// Builds a sequence from already-normalized tokens (e.g. read back from
    /// a split file). Emoji information is not recoverable from tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let content_token_count = tokens.iter().filter(|t| is_content_token(t)).count();
        let had_url = tokens.iter().any(|t| t == URL_TOK);
        Self { tokens, had_url, emojis_found: Vec::new(), content_token_count }
    }

    /// Distinct emoji types in order of first appearance.
    pub fn unique_emojis(&self) -> Vec<EmojiId> {
        let mut seen = Vec::new();
        for e in &self.emojis_found {
            if !seen.contains(e) {
                seen.push(*e);
            }
        }
        seen
    }
}

pub fn is_special_token(tok: &str) -> bool {
    SPECIAL_TOKENS.contains(&tok)
}

/// A token carries content unless it is a special token or made entirely
/// of punctuation/symbol characters.
pub fn is_content_token(tok: &str) -> bool {
    !is_special_token(tok) && tok.chars().any(char::is_alphanumeric)
}

/// Collapses every maximal run of one repeated character of length ≥ 3 to
/// length 2. Idempotent.
pub fn normalize_token(word: &str) -> String {
    let mut out = String::with_capacity(word.len());
    let mut prev: Option<char> = None;
    let mut run = 0usize;
    for c in word.chars() {
        if Some(c) == prev {
            run += 1;
        } else {
            prev = Some(c);
            run = 1;
        }
        if run <= COLLAPSE_TARGET {
            out.push(c);
        }
    }
    out
}

fn is_url(chunk: &str) -> bool {
    chunk.starts_with("http://") || chunk.starts_with("https://") || chunk.starts_with("www.")
}

/// Tokenizes one text against an emoji inventory.
pub fn tokenize(raw: &RawText, emoji_set: &EmojiSet) -> TokenSequence {
    tokenize_str(&raw.text, emoji_set)
}

pub fn tokenize_str(text: &str, emoji_set: &EmojiSet) -> TokenSequence {
    let lowered = text.to_lowercase();

    // Pull emojis out first; each occurrence becomes a word separator.
    let mut stripped = String::with_capacity(lowered.len());
    let mut emojis_found = Vec::new();
    let mut i = 0;
    while i < lowered.len() {
        let rest = &lowered[i..];
        if let Some(entry) = emoji_set.match_at(rest) {
            emojis_found.push(entry.id);
            stripped.push(' ');
            i += entry.sequence.len();
        } else {
            let c = rest.chars().next().expect("non-empty remainder");
            stripped.push(c);
            i += c.len_utf8();
        }
    }

    let mut tokens = Vec::new();
    let mut had_url = false;
    for chunk in stripped.split_whitespace() {
        if is_url(chunk) {
            had_url = true;
            tokens.push(URL_TOK.to_string());
            continue;
        }
        for piece in PIECE_RE.find_iter(chunk) {
            let p = piece.as_str();
            let tok = if p.starts_with('@') && p.len() > 1 {
                MENTION_TOK.to_string()
            } else if NUMBER_RE.is_match(p) {
                NUM_TOK.to_string()
            } else {
                normalize_token(p)
            };
            tokens.push(tok);
        }
    }
    let content_token_count = tokens.iter().filter(|t| is_content_token(t)).count();
    TokenSequence { tokens, had_url, emojis_found, content_token_count }
}

/// Pretraining filter: no URL, at least one content token, at least one
/// emoji label.
pub fn is_pretrainable(seq: &TokenSequence) -> bool {
    !seq.had_url && seq.content_token_count >= 1 && !seq.emojis_found.is_empty()
}

/// Language predicate applied before tokenization.
pub trait LanguageFilter: Send + Sync {
    fn accept(&self, text: &str) -> bool;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptAll;

impl LanguageFilter for AcceptAll {
    fn accept(&self, _text: &str) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set() -> EmojiSet {
        EmojiSet::new(vec![
            ("\u{1F602}".into(), "joy".into()),
            ("\u{2764}\u{FE0F}".into(), "heart".into()),
            ("\u{2764}".into(), "heart_bare".into()),
        ])
        .unwrap()
    }

    #[test]
    fn mentions_collapse_to_one_token() {
        let a = tokenize_str("@acl2017 rocks", &set());
        let b = tokenize_str("@emnlp2017 rocks", &set());
        assert_eq!(a.tokens, vec![MENTION_TOK, "rocks"]);
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn repeated_letters_share_a_token() {
        assert_eq!(normalize_token("loool"), "lool");
        assert_eq!(normalize_token("looooool"), "lool");
        assert_eq!(normalize_token("cool"), "cool");
        assert_eq!(normalize_token(&normalize_token("loool")), "lool");
        let a = tokenize_str("loool", &set());
        let b = tokenize_str("looooool", &set());
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn empty_input() {
        let t = tokenize_str("", &set());
        assert!(t.tokens.is_empty());
        assert_eq!(t.content_token_count, 0);
        assert!(!is_pretrainable(&t));
    }

    #[test]
    fn special_tokens_and_case() {
        let t = tokenize_str("WOW check https://x.co/a 42 and 3.14 @Bob!", &set());
        assert_eq!(t.tokens, vec!["wow", "check", URL_TOK, NUM_TOK, "and", NUM_TOK, MENTION_TOK, "!"]);
        assert!(t.had_url);
        assert_eq!(t.content_token_count, 3);
    }

    #[test]
    fn www_prefix_is_url() {
        let t = tokenize_str("go www.example.com now", &set());
        assert_eq!(t.tokens, vec!["go", URL_TOK, "now"]);
        assert!(t.had_url);
    }

    #[test]
    fn emojis_are_extracted_longest_first() {
        let t = tokenize_str("love it\u{2764}\u{FE0F}\u{1F602}\u{1F602} \u{2764}", &set());
        assert_eq!(t.tokens, vec!["love", "it"]);
        assert_eq!(t.emojis_found, vec![EmojiId(1), EmojiId(0), EmojiId(0), EmojiId(2)]);
        assert_eq!(t.unique_emojis(), vec![EmojiId(1), EmojiId(0), EmojiId(2)]);
    }

    #[test]
    fn pretrainable_rules() {
        let only_punct = tokenize_str(":) \u{1F602}", &set());
        assert_eq!(only_punct.tokens, vec![":)"]);
        assert_eq!(only_punct.content_token_count, 0);
        assert!(!is_pretrainable(&only_punct));

        let with_url = tokenize_str("great day http://t.co \u{1F602}", &set());
        assert!(!is_pretrainable(&with_url));

        let ok = tokenize_str("great day \u{1F602}", &set());
        assert_eq!(ok.tokens, vec!["great", "day"]);
        assert!(is_pretrainable(&ok));

        let no_emoji = tokenize_str("great day", &set());
        assert!(!is_pretrainable(&no_emoji));
    }

    #[test]
    fn emoji_set_file_round_trip() {
        let s = set();
        let text = format!("# seed=1\n{}", s.to_file_string());
        assert_eq!(EmojiSet::parse(&text).unwrap(), s);
    }

    #[test]
    fn emoji_set_rejects_bad_index() {
        let err = EmojiSet::parse("1\t1F602\tjoy\n").unwrap_err();
        assert!(matches!(err, TokenizerError::IndexMismatch { line: 0, found: 1 }));
        let err = EmojiSet::parse("0\tZZZZ\tjoy\n").unwrap_err();
        assert!(matches!(err, TokenizerError::MalformedEmojiSet { .. }));
        let err = EmojiSet::parse("0\t1F602\tjoy\n1\t1F602\tjoy2\n").unwrap_err();
        assert!(matches!(err, TokenizerError::DuplicateEmoji { line: 1 }));
    }

    const JOY: char = '\u{1F602}';

    proptest! {
        #[test]
        fn normalize_is_idempotent(w in "[a-z!]{0,12}") {
            let once = normalize_token(&w);
            prop_assert_eq!(normalize_token(&once), once);
        }

        #[test]
        fn run_length_classes_collide(stem in "[a-z]{1,3}", c in "[a-z]", n in 2usize..9, m in 2usize..9) {
            let a = format!("{stem}{}", c.repeat(n));
            let b = format!("{stem}{}", c.repeat(m));
            prop_assert_eq!(normalize_token(&a), normalize_token(&b));
        }

        #[test]
        fn retokenizing_is_stable(text in "[a-zA-Z!?.,' ]{0,40}") {
            let s = set();
            let first = tokenize_str(&text, &s);
            let again = tokenize_str(&first.tokens.join(" "), &s);
            prop_assert_eq!(first.tokens, again.tokens);
        }

        #[test]
        fn no_raw_specials_survive(words in proptest::collection::vec(
            prop_oneof![
                "[a-z]{1,6}",
                "@[a-z0-9]{1,6}",
                "[0-9]{1,5}",
                "https://[a-z]{1,5}\\.com",
                Just("\u{1F602}".to_string()),
            ], 0..8)) {
            let s = set();
            let t = tokenize_str(&words.join(" "), &s);
            for tok in &t.tokens {
                prop_assert!(!tok.starts_with('@'));
                prop_assert!(!tok.starts_with("http"));
                prop_assert!(!tok.chars().all(|c| c.is_ascii_digit()) || tok.is_empty());
                prop_assert!(!tok.contains(JOY));
                prop_assert!(t.content_token_count <= t.tokens.len());
            }
        }
    }
}
