//! Synthetic corpora and prediction sets with known structure, used by the
//! test suites and by `mojidistill synth` for trying the pipeline end to
//! end without real data.

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{CorpusRecord, Example};
use crate::eval::PredictionSet;
use crate::tokenizer::{EmojiSet, TokenSequence};

fn example(id: String, tokens: Vec<String>, label: usize) -> Example {
    Example { id, tokens: TokenSequence::from_tokens(tokens), label }
}

/// Two-class task decided by word order alone. Every text holds one
/// sentiment word and one `not`. `not` directly before the word flips its
/// polarity; `not` directly after it does not. Both classes therefore have
/// the same bag of words.
#[derive(Debug, Clone)]
pub struct NegationTask {
    pub sentiment_words: usize,
    pub filler_words: usize,
    pub min_fillers: usize,
    pub max_fillers: usize,
}

impl Default for NegationTask {
    fn default() -> Self {
        Self { sentiment_words: 6, filler_words: 20, min_fillers: 2, max_fillers: 5 }
    }
}

impl NegationTask {
    pub const NEGATOR: &'static str = "not";

    pub fn generate(&self, n: usize, seed: u64, id_prefix: &str) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let positive = rng.random_bool(0.5);
                let negated = rng.random_bool(0.5);
                let word =
                    format!("{}{}", if positive { "good" } else { "bad" }, rng.random_range(0..self.sentiment_words));
                let phrase =
                    if negated { vec![Self::NEGATOR.to_string(), word] } else { vec![word, Self::NEGATOR.to_string()] };
                let fillers = rng.random_range(self.min_fillers..=self.max_fillers);
                let mut tokens: Vec<String> =
                    (0..fillers).map(|_| format!("w{}", rng.random_range(0..self.filler_words))).collect();
                let at = rng.random_range(0..=tokens.len());
                tokens.splice(at..at, phrase);
                example(format!("{id_prefix}{i}"), tokens, (positive != negated) as usize)
            })
            .collect()
    }
}

/// Texts whose class is a combination of hidden binary attributes.
///
/// Each attribute value has its own pool of cue words, and a text carries
/// one cue per attribute plus filler. Pretraining predicts the full
/// combination (`2^bits` classes). The target task predicts attribute 0
/// alone; some target texts drop the attribute-0 cue and carry a
/// target-only word for the label instead, which a model can only use if
/// its vocabulary was extended.
#[derive(Debug, Clone)]
pub struct LatentTask {
    pub bits: usize,
    pub cues_per_value: usize,
    pub filler_words: usize,
    pub max_fillers: usize,
    /// Target-only words per target class.
    pub target_words: usize,
    /// Chance that a target text keeps its attribute-0 cue.
    pub shared_cue_rate: f64,
}

impl Default for LatentTask {
    fn default() -> Self {
        Self { bits: 4, cues_per_value: 60, filler_words: 20, max_fillers: 3, target_words: 4, shared_cue_rate: 0.85 }
    }
}

impl LatentTask {
    pub fn pretraining_classes(&self) -> usize {
        1 << self.bits
    }

    fn cue(&self, bit: usize, value: usize, rng: &mut ChaCha8Rng) -> String {
        format!("a{bit}v{value}c{}", rng.random_range(0..self.cues_per_value))
    }

    fn text(&self, values: &[usize], rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut tokens: Vec<String> = values.iter().enumerate().map(|(b, &v)| self.cue(b, v, rng)).collect();
        for _ in 0..rng.random_range(0..=self.max_fillers) {
            tokens.push(format!("f{}", rng.random_range(0..self.filler_words)));
        }
        tokens.shuffle(rng);
        tokens
    }

    pub fn pretraining(&self, n: usize, seed: u64, id_prefix: &str) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let class = i % self.pretraining_classes();
                let values: Vec<usize> = (0..self.bits).map(|b| (class >> b) & 1).collect();
                example(format!("{id_prefix}{i}"), self.text(&values, &mut rng), class)
            })
            .collect()
    }

    /// Binary target: the label is attribute 0, flipped with probability
    /// `label_noise`.
    pub fn target(&self, n: usize, label_noise: f64, seed: u64, id_prefix: &str) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let mut values: Vec<usize> = (0..self.bits).map(|_| rng.random_range(0..2)).collect();
                values[0] = label;
                let mut tokens = self.text(&values, &mut rng);
                if !rng.random_bool(self.shared_cue_rate) {
                    let word = format!("t{label}w{}", rng.random_range(0..self.target_words));
                    let cue = tokens.iter().position(|t| t.starts_with("a0v")).expect("every text has a cue");
                    tokens[cue] = word;
                }
                let noisy = if rng.random_bool(label_noise) { 1 - label } else { label };
                example(format!("{id_prefix}{i}"), tokens, noisy)
            })
            .collect()
    }
}

/// Probabilities from scores drawn uniformly at random, with uniform
/// labels.
pub fn uniform_random_predictions(n: usize, classes: usize, seed: u64) -> PredictionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Array2::<f64>::zeros((n, classes));
    for mut row in probs.rows_mut() {
        row.mapv_inplace(|_| rng.random::<f64>());
        let s = row.sum();
        row /= s;
    }
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    PredictionSet::new(probs, labels).expect("rows normalized")
}

/// Binary predictions that are right on exactly `round(accuracy · n)`
/// examples, placed at random.
pub fn fixed_accuracy_predictions(labels: &[usize], accuracy: f64, seed: u64) -> PredictionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = labels.len();
    let correct = (accuracy * n as f64).round() as usize;
    let mut right: Vec<bool> = (0..n).map(|i| i < correct).collect();
    right.shuffle(&mut rng);
    let mut probs = Array2::<f64>::zeros((n, 2));
    for (i, (&l, &ok)) in labels.iter().zip(&right).enumerate() {
        let p = rng.random_range(0.55..0.95);
        let predicted = if ok { l } else { 1 - l };
        probs[[i, predicted]] = p;
        probs[[i, 1 - predicted]] = 1.0 - p;
    }
    PredictionSet::new(probs, labels.to_vec()).expect("rows normalized")
}

/// Predictions over `groups × per_group` classes where classes in the same
/// group rise and fall together. Class `c` belongs to group `c % groups`,
/// so group members are not adjacent in index order.
pub fn grouped_predictions(groups: usize, per_group: usize, n: usize, seed: u64) -> PredictionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = groups * per_group;
    let mut probs = Array2::<f64>::zeros((n, classes));
    let mut labels = Vec::with_capacity(n);
    for mut row in probs.rows_mut() {
        let shared: Vec<f64> = (0..groups).map(|_| StandardNormal.sample(&mut rng)).collect();
        for c in 0..classes {
            let own: f64 = StandardNormal.sample(&mut rng);
            row[c] = (2.0 * shared[c % groups] + 0.5 * own).exp();
        }
        let s = row.sum();
        row /= s;
        let best = row.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
        labels.push(best);
    }
    PredictionSet::new(probs, labels).expect("rows normalized")
}

/// Group of each class in [`grouped_predictions`].
pub fn group_of(class: usize, groups: usize) -> usize {
    class % groups
}

const DEMO_EMOJIS: [(&str, &str, [&str; 6]); 4] = [
    ("\u{1F602}", "face_with_tears_of_joy", ["lol", "haha", "funny", "hilarious", "joke", "laughing"]),
    ("\u{2764}\u{FE0F}", "red_heart", ["love", "adore", "sweet", "darling", "forever", "hug"]),
    ("\u{1F62D}", "loudly_crying_face", ["sad", "miss", "crying", "hurts", "lonely", "tears"]),
    ("\u{1F621}", "pouting_face", ["angry", "hate", "annoying", "furious", "worst", "stupid"]),
];

const DEMO_FILLER: [&str; 12] = ["i", "you", "this", "so", "that", "is", "it", "my", "the", "day", "just", "really"];

/// The emoji inventory used by [`demo_corpus`].
pub fn demo_emoji_set() -> EmojiSet {
    EmojiSet::new(DEMO_EMOJIS.iter().map(|(e, n, _)| (e.to_string(), n.to_string())).collect())
        .expect("distinct emojis")
}

/// Raw emoji-bearing texts in the style of short social-media posts. A
/// share of them carry URLs, mentions, elongated words or several emojis
/// so that every preprocessing path is exercised.
pub fn demo_corpus(n: usize, seed: u64) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = rng.random_range(0..DEMO_EMOJIS.len());
            let (emoji, _, cues) = DEMO_EMOJIS[class];
            let mut words: Vec<String> = (0..rng.random_range(2..6))
                .map(|_| DEMO_FILLER.choose(&mut rng).expect("nonempty").to_string())
                .collect();
            let mut cue = cues.choose(&mut rng).expect("nonempty").to_string();
            if rng.random_bool(0.1) {
                let last = cue.pop().expect("nonempty");
                cue.extend(std::iter::repeat_n(last, 4));
            }
            words.insert(rng.random_range(0..=words.len()), cue);
            if rng.random_bool(0.1) {
                words.insert(0, format!("@user{}", rng.random_range(0..50)));
            }
            if rng.random_bool(0.05) {
                words.push(format!("https://example.com/{i}"));
            }
            let mut text = words.join(" ");
            text.push(' ');
            text.push_str(emoji);
            if rng.random_bool(0.1) {
                text.push_str(emoji);
            }
            if rng.random_bool(0.1) {
                let other = DEMO_EMOJIS[(class + 1) % DEMO_EMOJIS.len()].0;
                text.push_str(other);
            }
            CorpusRecord { id: format!("t{i}"), text, tokens: None, label: None }
        })
        .collect()
}

/// Labelled sentiment texts (0 negative, 1 positive) in the demo style,
/// for trying fine-tuning.
pub fn demo_target(n: usize, seed: u64) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let pool =
                if label == 1 { [DEMO_EMOJIS[0].2, DEMO_EMOJIS[1].2] } else { [DEMO_EMOJIS[2].2, DEMO_EMOJIS[3].2] };
            let mut words: Vec<String> = (0..rng.random_range(2..5))
                .map(|_| DEMO_FILLER.choose(&mut rng).expect("nonempty").to_string())
                .collect();
            let cue = pool[rng.random_range(0..2)].choose(&mut rng).expect("nonempty");
            words.insert(rng.random_range(0..=words.len()), cue.to_string());
            if rng.random_bool(0.3) {
                words.push(if label == 1 { "great" } else { "awful" }.to_string());
            }
            CorpusRecord { id: format!("s{i}"), text: words.join(" "), tokens: None, label: Some(label) }
        })
        .collect()
}
