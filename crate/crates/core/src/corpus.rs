//! Dataset construction: label expansion, balanced splits, upsampling,
//! vocabularies, word coverage and label projections.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tokenizer::{
    is_pretrainable, is_special_token, tokenize, EmojiSet, LanguageFilter, RawText, TokenSequence, SPECIAL_TOKENS,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("class {class} has {have} examples, need {need}")]
    InsufficientClassCount { class: usize, have: usize, need: usize },
    #[error("class {0} has no training examples")]
    EmptyClass(usize),
    #[error("record {record} has fewer than {MIN_RATERS} ratings")]
    TooFewRaters { record: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub tokens: TokenSequence,
    pub label: usize,
}

impl Example {
    fn dedup_key(&self) -> String {
        self.tokens.tokens.join("\u{1f}")
    }
}

/// Counters for texts seen by [`build_examples`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub texts_seen: usize,
    pub rejected_language: usize,
    pub rejected_url: usize,
    pub rejected_no_content: usize,
    pub rejected_no_emoji: usize,
    pub examples_emitted: usize,
    pub per_class: Vec<usize>,
}

impl BuildStats {
    pub fn rejected(&self) -> usize {
        self.rejected_language + self.rejected_url + self.rejected_no_content + self.rejected_no_emoji
    }
}

enum TextOutcome {
    Language,
    Url,
    NoContent,
    NoEmoji,
    Kept(Vec<Example>),
}

fn expand_text(raw: &RawText, emoji_set: &EmojiSet, filter: &dyn LanguageFilter) -> TextOutcome {
    if !filter.accept(&raw.text) {
        return TextOutcome::Language;
    }
    let seq = tokenize(raw, emoji_set);
    if !is_pretrainable(&seq) {
        return if seq.had_url {
            TextOutcome::Url
        } else if seq.content_token_count == 0 {
            TextOutcome::NoContent
        } else {
            TextOutcome::NoEmoji
        };
    }
    // One example per distinct emoji type, however often it repeats.
    let examples = seq
        .unique_emojis()
        .into_iter()
        .map(|e| Example { id: raw.id.clone(), tokens: seq.clone(), label: e.0 })
        .collect();
    TextOutcome::Kept(examples)
}

/// Turns emoji-bearing texts into single-label examples. Output order
/// follows input order regardless of how many threads do the work.
pub fn build_examples(
    texts: &[RawText],
    emoji_set: &EmojiSet,
    filter: &dyn LanguageFilter,
) -> (Vec<Example>, BuildStats) {
    let outcomes: Vec<TextOutcome> = texts.par_iter().map(|t| expand_text(t, emoji_set, filter)).collect();
    let mut stats = BuildStats { per_class: vec![0; emoji_set.len()], ..Default::default() };
    let mut out = Vec::new();
    for o in outcomes {
        stats.texts_seen += 1;
        match o {
            TextOutcome::Language => stats.rejected_language += 1,
            TextOutcome::Url => stats.rejected_url += 1,
            TextOutcome::NoContent => stats.rejected_no_content += 1,
            TextOutcome::NoEmoji => stats.rejected_no_emoji += 1,
            TextOutcome::Kept(ex) => {
                for e in ex {
                    stats.per_class[e.label] += 1;
                    stats.examples_emitted += 1;
                    out.push(e);
                }
            }
        }
    }
    (out, stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    /// Examples sharing a normalized text with a held-out example. Kept
    /// out of training to avoid leakage.
    pub excluded: Vec<Example>,
    pub class_count: usize,
    pub seed: u64,
}

pub fn class_counts(examples: &[Example], class_count: usize) -> Vec<usize> {
    let mut counts = vec![0; class_count];
    for e in examples {
        counts[e.label] += 1;
    }
    counts
}

fn check_labels(examples: &[Example], class_count: usize) -> Result<(), CorpusError> {
    match examples.iter().find(|e| e.label >= class_count) {
        Some(e) => Err(CorpusError::LabelOutOfRange { label: e.label, classes: class_count }),
        None => Ok(()),
    }
}

/// Samples validation and test sets with exactly `per_class_val` and
/// `per_class_test` examples of every class; the rest is training data.
pub fn balanced_split(
    examples: Vec<Example>,
    class_count: usize,
    per_class_val: usize,
    per_class_test: usize,
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    check_labels(&examples, class_count)?;
    let need = per_class_val + per_class_test;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, e) in examples.iter().enumerate() {
        by_class[e.label].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < need {
            return Err(CorpusError::InsufficientClassCount { class, have: members.len(), need });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
    }

    let keys: Vec<String> = examples.iter().map(Example::dedup_key).collect();
    let mut assignment = vec![Slot::Train; examples.len()];
    let mut val_keys: HashSet<&str> = HashSet::new();
    let mut test_keys: HashSet<&str> = HashSet::new();

    for (slot, quota) in [(Slot::Validation, per_class_val), (Slot::Test, per_class_test)] {
        for (class, members) in by_class.iter().enumerate() {
            let mut taken = 0;
            for &i in members {
                if taken == quota {
                    break;
                }
                if assignment[i] != Slot::Train {
                    continue;
                }
                let other = if slot == Slot::Validation { &test_keys } else { &val_keys };
                if other.contains(keys[i].as_str()) {
                    continue;
                }
                assignment[i] = slot;
                taken += 1;
            }
            if taken < quota {
                let have = members.len();
                return Err(CorpusError::InsufficientClassCount { class, have, need });
            }
            for &i in members {
                if assignment[i] == slot {
                    if slot == Slot::Validation {
                        val_keys.insert(keys[i].as_str());
                    } else {
                        test_keys.insert(keys[i].as_str());
                    }
                }
            }
        }
    }

    let held_out: Vec<bool> =
        keys.iter().map(|k| val_keys.contains(k.as_str()) || test_keys.contains(k.as_str())).collect();
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        excluded: Vec::new(),
        class_count,
        seed,
    };
    for (i, e) in examples.into_iter().enumerate() {
        match assignment[i] {
            Slot::Validation => split.validation.push(e),
            Slot::Test => split.test.push(e),
            Slot::Train if held_out[i] => split.excluded.push(e),
            Slot::Train => split.train.push(e),
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Train,
    Validation,
    Test,
}

/// Duplicates minority-class examples (uniformly, with replacement) until
/// every class matches the majority count. Originals come first, in order.
pub fn upsample(train: Vec<Example>, class_count: usize, seed: u64) -> Result<Vec<Example>, CorpusError> {
    check_labels(&train, class_count)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, e) in train.iter().enumerate() {
        by_class[e.label].push(i);
    }
    if let Some(class) = by_class.iter().position(Vec::is_empty) {
        return Err(CorpusError::EmptyClass(class));
    }
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extra = Vec::new();
    for members in &by_class {
        for _ in members.len()..target {
            let pick = members[rng.random_range(0..members.len())];
            extra.push(train[pick].clone());
        }
    }
    let mut out = train;
    out.extend(extra);
    Ok(out)
}

/// Token-to-index map. Indices `0..SPECIAL_TOKENS.len()` are reserved;
/// indices below `base_size` belong to the pretrained region and never move.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    base_size: usize,
}

pub const PAD_INDEX: u32 = 0;
pub const UNKNOWN_INDEX: u32 = 1;

impl Vocabulary {
    /// Reserved tokens only.
    pub fn reserved() -> Self {
        Self::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(), None)
            .expect("reserved tokens are valid")
    }

    /// Rebuilds a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, base_size: Option<usize>) -> Result<Self, CorpusError> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(CorpusError::Malformed { line: i, reason: format!("expected reserved token {s}") });
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CorpusError::Malformed { line: i, reason: format!("duplicate token {t}") });
            }
        }
        let base_size = base_size.unwrap_or(tokens.len());
        if base_size > tokens.len() || base_size < SPECIAL_TOKENS.len() {
            return Err(CorpusError::Malformed { line: 0, reason: "bad base size".into() });
        }
        Ok(Self { tokens, index, base_size })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == SPECIAL_TOKENS.len()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn extended_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, idx: u32) -> Option<&str> {
        self.tokens.get(idx as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.get(t).unwrap_or(UNKNOWN_INDEX)).collect()
    }

    /// Hex SHA-256 over the index-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("# base_size={}\n", self.base_size);
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut base = None;
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# base_size=") {
                base = Some(
                    rest.trim()
                        .parse()
                        .map_err(|_| CorpusError::Malformed { line: line_no + 1, reason: "bad base_size".into() })?,
                );
            } else if line.starts_with("# ") || line.is_empty() {
                // Tokens never contain spaces, so `# ` only starts comments;
                // a bare `#` is a real token.
                continue;
            } else {
                tokens.push(line.to_string());
            }
        }
        Self::from_tokens(tokens, base)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }
}

fn ranked_counts<'a>(
    sequences: impl IntoIterator<Item = &'a [String]>,
    skip: impl Fn(&str) -> bool,
) -> Vec<(String, usize)> {
    let mut counts: HashMap<&'a str, usize> = HashMap::new();
    for seq in sequences {
        for t in seq {
            if !is_special_token(t) && !skip(t) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Frequency-ranked vocabulary (lexicographic tie-break) holding at most
/// `max_size` tokens after the reserved ones.
pub fn build_vocab<'a>(sequences: impl IntoIterator<Item = &'a [String]>, max_size: usize) -> Vocabulary {
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked_counts(sequences, |_| false).into_iter().take(max_size).map(|(t, _)| t));
    Vocabulary::from_tokens(tokens, None).expect("ranked tokens are unique")
}

pub fn build_vocab_from_examples(examples: &[Example], max_size: usize) -> Vocabulary {
    build_vocab(examples.iter().map(|e| e.tokens.tokens.as_slice()), max_size)
}

pub const DEFAULT_EXTENSION_LIMIT: usize = 10_000;

/// Appends up to `limit` unseen training tokens after the existing region.
pub fn extend_vocab<'a>(
    base: &Vocabulary,
    sequences: impl IntoIterator<Item = &'a [String]>,
    limit: usize,
) -> Vocabulary {
    let mut tokens = base.tokens.clone();
    tokens.extend(ranked_counts(sequences, |t| base.contains(t)).into_iter().take(limit).map(|(t, _)| t));
    Vocabulary::from_tokens(tokens, Some(base.base_size)).expect("new tokens are unseen")
}

/// Fraction of non-reserved token occurrences in `sequences` present in
/// `vocab`. Returns 0 when there are no such occurrences.
pub fn word_coverage<'a>(vocab: &Vocabulary, sequences: impl IntoIterator<Item = &'a [String]>) -> f64 {
    let mut seen = 0usize;
    let mut total = 0usize;
    for seq in sequences {
        for t in seq {
            if is_special_token(t) {
                continue;
            }
            total += 1;
            if vocab.contains(t) {
                seen += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Neg = 0,
    Pos = 1,
}

impl Polarity {
    pub fn label(self) -> usize {
        self as usize
    }
}

/// Keeps examples whose label is in `polarity_map` and relabels them
/// `0 = NEG`, `1 = POS`.
pub fn project_binary(examples: &[Example], polarity_map: &BTreeMap<usize, Polarity>) -> Vec<Example> {
    examples
        .iter()
        .filter_map(|e| polarity_map.get(&e.label).map(|p| Example { label: p.label(), ..e.clone() }))
        .collect()
}

/// Average rater scores per affect class on the Low=1/Medium=2/High=3 scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffectAverages {
    pub low_valence: f64,
    pub high_valence: f64,
    pub low_arousal: f64,
    pub high_arousal: f64,
}

pub const AFFECT_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Low,
    High,
}

/// Valence × arousal quadrant; `class()` gives the label in `0..4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Quadrant {
    pub valence: Level,
    pub arousal: Level,
}

impl Quadrant {
    pub fn class(self) -> usize {
        let bit = |l| usize::from(l == Level::High);
        2 * bit(self.valence) + bit(self.arousal)
    }
}

fn pick_side(low: f64, high: f64, threshold: f64) -> Option<Level> {
    match (low >= threshold, high >= threshold) {
        (false, false) => None,
        (true, false) => Some(Level::Low),
        (false, true) => Some(Level::High),
        (true, true) if high > low => Some(Level::High),
        (true, true) if low > high => Some(Level::Low),
        _ => None,
    }
}

/// Returns `None` when either axis has no side at or above `threshold`,
/// or both sides tie.
pub fn valence_arousal_class(avg: &AffectAverages, threshold: f64) -> Option<Quadrant> {
    let valence = pick_side(avg.low_valence, avg.high_valence, threshold)?;
    let arousal = pick_side(avg.low_arousal, avg.high_arousal, threshold)?;
    Some(Quadrant { valence, arousal })
}

/// Converts a batch, returning per-text classes and the number dropped.
pub fn valence_arousal_classes(averages: &[AffectAverages], threshold: f64) -> (Vec<Option<usize>>, usize) {
    let classes: Vec<Option<usize>> =
        averages.iter().map(|a| valence_arousal_class(a, threshold).map(Quadrant::class)).collect();
    let dropped = classes.iter().filter(|c| c.is_none()).count();
    (classes, dropped)
}

pub const MIN_RATERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rating {
    Score(u8),
    DoNotKnow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingRecord {
    pub id: String,
    pub scores: Vec<Rating>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub kept: usize,
    pub dropped_do_not_know: usize,
    pub dropped_neutral: usize,
    /// Agreement of the held-out rater with the consensus of the others.
    pub rater_agreement: f64,
    /// Agreement of the supplied predictions, if any.
    pub prediction_agreement: Option<f64>,
}

const NEUTRAL_BAND: (f64, f64) = (4.5, 5.5);

fn binarize(score: f64) -> Option<Polarity> {
    if score > 5.0 {
        Some(Polarity::Pos)
    } else if score < 5.0 {
        Some(Polarity::Neg)
    } else {
        None
    }
}

/// Rater-consensus agreement. One numeric rating per record is held out
/// at random as the "human" rater; the mean of the rest is the consensus.
/// `predictions`, if given, must align with `records`.
pub fn consensus_agreement(
    records: &[RatingRecord],
    predictions: Option<&[Polarity]>,
    seed: u64,
) -> Result<AgreementReport, CorpusError> {
    if let Some(r) = records.iter().find(|r| r.scores.len() < MIN_RATERS) {
        return Err(CorpusError::TooFewRaters { record: r.id.clone() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AgreementReport {
        kept: 0,
        dropped_do_not_know: 0,
        dropped_neutral: 0,
        rater_agreement: 0.0,
        prediction_agreement: None,
    };
    let mut rater_hits = 0usize;
    let mut pred_hits = 0usize;
    for (i, r) in records.iter().enumerate() {
        let dnk = r.scores.iter().filter(|s| matches!(s, Rating::DoNotKnow)).count();
        if 2 * dnk > r.scores.len() {
            report.dropped_do_not_know += 1;
            continue;
        }
        let numeric: Vec<f64> = r
            .scores
            .iter()
            .filter_map(|s| match s {
                Rating::Score(v) => Some(*v as f64),
                Rating::DoNotKnow => None,
            })
            .collect();
        let held = rng.random_range(0..numeric.len());
        let rest: Vec<f64> = numeric.iter().enumerate().filter(|(j, _)| *j != held).map(|(_, v)| *v).collect();
        if rest.is_empty() {
            report.dropped_do_not_know += 1;
            continue;
        }
        let mean = rest.iter().sum::<f64>() / rest.len() as f64;
        if mean >= NEUTRAL_BAND.0 && mean <= NEUTRAL_BAND.1 {
            report.dropped_neutral += 1;
            continue;
        }
        let truth = binarize(mean);
        report.kept += 1;
        if binarize(numeric[held]) == truth {
            rater_hits += 1;
        }
        if let Some(p) = predictions {
            if p.get(i).copied() == truth {
                pred_hits += 1;
            }
        }
    }
    if report.kept > 0 {
        report.rater_agreement = rater_hits as f64 / report.kept as f64;
        if predictions.is_some() {
            report.prediction_agreement = Some(pred_hits as f64 / report.kept as f64);
        }
    }
    Ok(report)
}

/// One line of a corpus or split file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl CorpusRecord {
    pub fn raw(&self) -> RawText {
        RawText::new(self.id.clone(), self.text.clone())
    }

    /// Stored tokens if present, otherwise the tokenized text.
    pub fn token_sequence(&self, emoji_set: &EmojiSet) -> TokenSequence {
        match &self.tokens {
            Some(t) => TokenSequence::from_tokens(t.clone()),
            None => tokenize(&self.raw(), emoji_set),
        }
    }

    pub fn from_example(e: &Example) -> Self {
        Self {
            id: e.id.clone(),
            text: e.tokens.tokens.join(" "),
            tokens: Some(e.tokens.tokens.clone()),
            label: Some(e.label),
        }
    }
}

/// Reads a JSON-lines corpus. Blank lines and lines starting with `#` are
/// skipped; line numbers in errors are 1-based.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(trimmed).map_err(|e| CorpusError::Malformed { line: i + 1, reason: e.to_string() })?;
        if rec.text.trim().is_empty() && rec.tokens.is_none() {
            return Err(CorpusError::Malformed { line: i + 1, reason: "empty text".into() });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Labeled examples from a corpus; every record must carry a label.
pub fn labeled_examples(
    records: &[CorpusRecord],
    emoji_set: &EmojiSet,
    class_count: Option<usize>,
) -> Result<Vec<Example>, CorpusError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let label = r.label.ok_or_else(|| CorpusError::Malformed {
                line: i + 1,
                reason: format!("record {} has no label", r.id),
            })?;
            if let Some(c) = class_count {
                if label >= c {
                    return Err(CorpusError::LabelOutOfRange { label, classes: c });
                }
            }
            Ok(Example { id: r.id.clone(), tokens: r.token_sequence(emoji_set), label })
        })
        .collect()
}

pub fn write_examples(path: impl AsRef<Path>, header: &str, examples: &[Example]) -> Result<(), CorpusError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header.lines() {
        writeln!(f, "# {line}")?;
    }
    for e in examples {
        let json = serde_json::to_string(&CorpusRecord::from_example(e))
            .map_err(|e| CorpusError::Malformed { line: 0, reason: e.to_string() })?;
        writeln!(f, "{json}")?;
    }
    f.flush()?;
    Ok(())
}

/// Human-readable manifest of a split: seed plus per-class counts.
pub fn split_manifest(split: &DatasetSplit, upsampled_train: Option<&[Example]>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed\t{}", split.seed);
    let _ = writeln!(s, "classes\t{}", split.class_count);
    let _ = writeln!(s, "excluded\t{}", split.excluded.len());
    let train = class_counts(&split.train, split.class_count);
    let val = class_counts(&split.validation, split.class_count);
    let test = class_counts(&split.test, split.class_count);
    let up = upsampled_train.map(|u| class_counts(u, split.class_count));
    let _ = writeln!(s, "class\ttrain\ttrain_upsampled\tvalidation\ttest");
    for c in 0..split.class_count {
        let u = up.as_ref().map(|u| u[c].to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{c}\t{}\t{u}\t{}\t{}", train[c], val[c], test[c]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::tokenize_str;
    use proptest::prelude::*;

    fn ex(id: &str, words: &str, label: usize) -> Example {
        let tokens = TokenSequence::from_tokens(words.split_whitespace().map(String::from).collect());
        Example { id: id.into(), tokens, label }
    }

    fn emoji_set() -> EmojiSet {
        EmojiSet::new(vec![
            ("\u{1F602}".into(), "joy".into()),
            ("\u{2764}".into(), "heart".into()),
            ("\u{1F62D}".into(), "sob".into()),
        ])
        .unwrap()
    }

    #[test]
    fn one_example_per_unique_emoji() {
        let set = emoji_set();
        let texts = vec![
            RawText::new("a", "so happy \u{1F602}\u{1F602}\u{2764}"),
            RawText::new("b", "ok \u{1F62D}"),
            RawText::new("c", "no emoji here"),
            RawText::new("d", "link http://x.y \u{1F602}"),
            RawText::new("e", "!!! \u{1F602}"),
        ];
        let (out, stats) = build_examples(&texts, &set, &crate::tokenizer::AcceptAll);
        let labels: Vec<(String, usize)> = out.iter().map(|e| (e.id.clone(), e.label)).collect();
        assert_eq!(labels, vec![("a".into(), 0), ("a".into(), 1), ("b".into(), 2)]);
        assert_eq!(stats.rejected_no_emoji, 1);
        assert_eq!(stats.rejected_url, 1);
        assert_eq!(stats.rejected_no_content, 1);
        assert_eq!(stats.per_class, vec![1, 1, 1]);
    }

    #[test]
    fn split_small_case() {
        let mut v = Vec::new();
        for i in 0..5 {
            v.push(ex(&format!("a{i}"), &format!("w{i}"), 0));
            v.push(ex(&format!("b{i}"), &format!("x{i}"), 1));
        }
        let s = balanced_split(v, 2, 1, 1, 7).unwrap();
        assert_eq!(s.validation.len(), 2);
        assert_eq!(s.test.len(), 2);
        assert_eq!(s.train.len(), 6);
        assert_eq!(class_counts(&s.validation, 2), vec![1, 1]);
        assert_eq!(class_counts(&s.test, 2), vec![1, 1]);
    }

    #[test]
    fn split_insufficient() {
        let v = vec![ex("a", "w", 0), ex("b", "x", 1), ex("c", "y", 1)];
        let err = balanced_split(v, 2, 1, 1, 0).unwrap_err();
        assert!(matches!(err, CorpusError::InsufficientClassCount { class: 0, have: 1, need: 2 }));
    }

    #[test]
    fn split_keeps_shared_texts_out_of_train() {
        // Every text carries both labels; held-out texts must not leak.
        let mut v = Vec::new();
        for i in 0..6 {
            v.push(ex(&format!("t{i}"), &format!("w{i}"), 0));
            v.push(ex(&format!("t{i}"), &format!("w{i}"), 1));
        }
        let s = balanced_split(v, 2, 1, 1, 3).unwrap();
        let held: HashSet<&str> = s.validation.iter().chain(&s.test).map(|e| e.id.as_str()).collect();
        assert!(s.train.iter().all(|e| !held.contains(e.id.as_str())));
        let val_ids: HashSet<&str> = s.validation.iter().map(|e| e.id.as_str()).collect();
        assert!(s.test.iter().all(|e| !val_ids.contains(e.id.as_str())));
        assert_eq!(s.train.len() + s.validation.len() + s.test.len() + s.excluded.len(), 12);
    }

    #[test]
    fn upsample_cases() {
        let mut v = Vec::new();
        for (class, n) in [(0, 100), (1, 40), (2, 60)] {
            for i in 0..n {
                v.push(ex(&format!("{class}-{i}"), "w", class));
            }
        }
        let up = upsample(v.clone(), 3, 1).unwrap();
        assert_eq!(class_counts(&up, 3), vec![100, 100, 100]);
        assert_eq!(&up[..200], &v[..]);

        let balanced = vec![ex("a", "w", 0), ex("b", "w", 1)];
        assert_eq!(upsample(balanced.clone(), 2, 1).unwrap(), balanced);
        let single = vec![ex("a", "w", 0), ex("b", "v", 0)];
        assert_eq!(upsample(single.clone(), 1, 1).unwrap(), single);
        assert!(matches!(upsample(single, 2, 1), Err(CorpusError::EmptyClass(1))));
    }

    #[test]
    fn vocab_ranking() {
        let v = build_vocab_from_examples(&[ex("1", "a a b", 0)], 1);
        assert_eq!(&v.tokens()[5..], &["a".to_string()]);
        let v = build_vocab_from_examples(&[ex("1", "a a b", 0)], 100);
        assert_eq!(v.len(), 7);
        let v = build_vocab_from_examples(&[ex("1", "y x y x y x", 0)], 1);
        assert_eq!(&v.tokens()[5..], &["x".to_string()]);
        assert_eq!(v.encode(&["x".into(), "zzz".into()]), vec![5, UNKNOWN_INDEX]);
    }

    #[test]
    fn vocab_extension() {
        let base = build_vocab_from_examples(&[ex("1", "a b", 0)], 10);
        let same = extend_vocab(&base, [ex("2", "a b a", 0).tokens.tokens.as_slice()], 10);
        assert_eq!(same, base);

        let train = ex("3", "c c c d d e a", 0);
        let ext = extend_vocab(&base, [train.tokens.tokens.as_slice()], 2);
        assert_eq!(ext.len(), base.len() + 2);
        assert_eq!(ext.get("c"), Some(base.extended_size() as u32));
        assert_eq!(ext.get("d"), Some(base.extended_size() as u32 + 1));
        assert!(!ext.contains("e"));
        assert_eq!(ext.base_size(), base.base_size());
        for (i, t) in base.tokens().iter().enumerate() {
            assert_eq!(ext.get(t), Some(i as u32));
        }
    }

    #[test]
    fn coverage_counts_occurrences() {
        let vocab = build_vocab_from_examples(&[ex("1", "a b", 0)], 10);
        let test = ex("t", "a a b c", 0);
        assert_eq!(word_coverage(&vocab, [test.tokens.tokens.as_slice()]), 0.75);
        assert_eq!(word_coverage(&Vocabulary::reserved(), [test.tokens.tokens.as_slice()]), 0.0);
        let full = build_vocab_from_examples(std::slice::from_ref(&test), 10);
        assert_eq!(word_coverage(&full, [test.tokens.tokens.as_slice()]), 1.0);
    }

    #[test]
    fn vocab_file_round_trip() {
        let base = build_vocab_from_examples(&[ex("1", "a b # #x", 0)], 10);
        let ext = extend_vocab(&base, [ex("2", "q", 0).tokens.tokens.as_slice()], 10);
        let back = Vocabulary::parse(&format!("# seed=3\n{}", ext.to_file_string())).unwrap();
        assert_eq!(back, ext);
        assert_eq!(back.hash(), ext.hash());
        assert_ne!(base.hash(), ext.hash());
    }

    #[test]
    fn binary_projection() {
        let map: BTreeMap<usize, Polarity> = [(0, Polarity::Pos), (2, Polarity::Neg)].into();
        let v = vec![ex("a", "w", 0), ex("b", "w", 1), ex("c", "w", 2)];
        let p = project_binary(&v, &map);
        assert_eq!(p.iter().map(|e| (e.id.as_str(), e.label)).collect::<Vec<_>>(), vec![("a", 1), ("c", 0)]);
        assert!(project_binary(&v, &BTreeMap::new()).is_empty());
    }

    #[test]
    fn affect_quadrants() {
        let a = AffectAverages { low_valence: 1.2, high_valence: 2.5, low_arousal: 1.0, high_arousal: 2.1 };
        let q = valence_arousal_class(&a, AFFECT_THRESHOLD).unwrap();
        assert_eq!(q, Quadrant { valence: Level::High, arousal: Level::High });
        assert_eq!(q.class(), 3);
        let none = AffectAverages { low_valence: 1.9, high_valence: 1.0, low_arousal: 1.5, high_arousal: 1.99 };
        assert!(valence_arousal_class(&none, AFFECT_THRESHOLD).is_none());
        // Exactly "Medium" meets the threshold.
        let medium = AffectAverages { low_valence: 2.0, high_valence: 1.0, low_arousal: 1.0, high_arousal: 3.0 };
        assert_eq!(valence_arousal_class(&medium, AFFECT_THRESHOLD).unwrap().class(), 1);
        let both = AffectAverages { low_valence: 2.4, high_valence: 2.6, low_arousal: 2.2, high_arousal: 2.2 };
        assert!(valence_arousal_class(&both, AFFECT_THRESHOLD).is_none());
        let (classes, dropped) = valence_arousal_classes(&[a, none, medium], AFFECT_THRESHOLD);
        assert_eq!(classes, vec![Some(3), None, Some(1)]);
        assert_eq!(dropped, 1);
    }

    fn record(id: &str, scores: &[u8], dnk: usize) -> RatingRecord {
        let mut s: Vec<Rating> = scores.iter().map(|&v| Rating::Score(v)).collect();
        s.extend(std::iter::repeat_n(Rating::DoNotKnow, dnk));
        RatingRecord { id: id.into(), scores: s }
    }

    #[test]
    fn agreement_protocol() {
        let recs = vec![
            record("pos", &[9; 10], 0),
            record("neutral", &[5; 10], 0),
            record("dnk", &[9; 4], 6),
            record("neg", &[1, 2, 1, 2, 1, 2, 1, 2, 1, 2], 0),
        ];
        let preds = [Polarity::Pos, Polarity::Pos, Polarity::Pos, Polarity::Pos];
        let r = consensus_agreement(&recs, Some(&preds), 5).unwrap();
        assert_eq!(r.kept, 2);
        assert_eq!(r.dropped_neutral, 1);
        assert_eq!(r.dropped_do_not_know, 1);
        assert_eq!(r.rater_agreement, 1.0);
        assert_eq!(r.prediction_agreement, Some(0.5));

        let short = vec![record("x", &[9; 9], 0)];
        assert!(matches!(consensus_agreement(&short, None, 0), Err(CorpusError::TooFewRaters { .. })));
    }

    #[test]
    fn corpus_records_tokenize_or_reuse_tokens() {
        let set = emoji_set();
        let r: CorpusRecord = serde_json::from_str(r#"{"id":"1","text":"Sooo good ❤"}"#).unwrap();
        assert_eq!(r.token_sequence(&set).tokens, tokenize_str("soo good", &set).tokens);
        let r: CorpusRecord =
            serde_json::from_str(r#"{"id":"1","text":"x","tokens":["<MENTION>","hi"],"label":1}"#).unwrap();
        assert_eq!(r.token_sequence(&set).tokens, vec!["<MENTION>", "hi"]);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(counts in proptest::collection::vec(4usize..12, 1..5), seed in 0u64..1000) {
            let mut v = Vec::new();
            for (c, n) in counts.iter().enumerate() {
                for i in 0..*n {
                    v.push(ex(&format!("{c}-{i}"), &format!("w{c} t{i}"), c));
                }
            }
            let total = v.len();
            let s = balanced_split(v.clone(), counts.len(), 2, 1, seed).unwrap();
            prop_assert!(class_counts(&s.validation, counts.len()).iter().all(|&n| n == 2));
            prop_assert!(class_counts(&s.test, counts.len()).iter().all(|&n| n == 1));
            prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len() + s.excluded.len(), total);
            let mut ids: Vec<&str> = s.train.iter().chain(&s.validation).chain(&s.test).chain(&s.excluded).map(|e| e.id.as_str()).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), total);
            let again = balanced_split(v, counts.len(), 2, 1, seed).unwrap();
            prop_assert_eq!(again, s);
        }

        #[test]
        fn upsample_equalizes(counts in proptest::collection::vec(1usize..20, 1..5), seed in 0u64..1000) {
            let mut v = Vec::new();
            for (c, n) in counts.iter().enumerate() {
                for i in 0..*n {
                    v.push(ex(&format!("{c}-{i}"), "w", c));
                }
            }
            let up = upsample(v.clone(), counts.len(), seed).unwrap();
            let max = *counts.iter().max().unwrap();
            prop_assert!(class_counts(&up, counts.len()).iter().all(|&n| n == max));
            let distinct: HashSet<&str> = up.iter().map(|e| e.id.as_str()).collect();
            prop_assert_eq!(distinct.len(), v.len());
        }

        #[test]
        fn extension_never_lowers_coverage(train in "[a-e ]{0,30}", test in "[a-h ]{0,30}") {
            let base = build_vocab_from_examples(&[ex("b", "a b", 0)], 10);
            let train = ex("t", &train, 0);
            let test = ex("u", &test, 0);
            let ext = extend_vocab(&base, [train.tokens.tokens.as_slice()], 3);
            prop_assert!(word_coverage(&base, [test.tokens.tokens.as_slice()]) <= word_coverage(&ext, [test.tokens.tokens.as_slice()]));
        }
    }
}
