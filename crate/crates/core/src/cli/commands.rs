use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mojidistill::corpus::{
    balanced_split, build_examples, build_vocab_from_examples, class_counts, extend_vocab, labeled_examples,
    read_corpus, split_manifest, upsample, word_coverage, write_examples, CorpusRecord, Example, Vocabulary,
    DEFAULT_EXTENSION_LIMIT,
};
use mojidistill::eval::{
    bootstrap_compare, cluster_classes, macro_f1, per_class_f1, prediction_correlation, ranked, top_k_accuracy, Metric,
    PredictionSet, Sided, DEFAULT_BOOTSTRAP_SAMPLES,
};
use mojidistill::model::checkpoint::Checkpoint;
use mojidistill::model::{Model, INIT_RECIPE};
use mojidistill::synthetic::{demo_corpus, demo_emoji_set, demo_target};
use mojidistill::tokenizer::{tokenize_str, AcceptAll, EmojiSet, RawText};
use mojidistill::train::{encode_examples, evaluate, train_until_converged, EncodedExample};
use mojidistill::transfer::{finetune, lookup_strategy, FinetuneOptions, TargetData};

use super::settings::{sha256_file, Outputs, Settings, Stamp};
use super::{Cli, Command, EmptyOutput, Global};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth { out, size } => synth(g, out, *size),
        Command::Preprocess { corpus, emoji_set, out, labeled } => {
            preprocess(g, corpus, emoji_set.as_deref(), out, *labeled)
        }
        Command::Pretrain { corpus, out } => pretrain(g, corpus, out),
        Command::Finetune { checkpoint, vocab, corpus, strategy, out } => {
            finetune_cmd(g, checkpoint, vocab, corpus, strategy, out)
        }
        Command::Evaluate { checkpoint, vocab, corpus, out, k, against } => {
            evaluate_cmd(g, checkpoint, vocab, corpus, out, *k, against.as_deref())
        }
        Command::Score { checkpoint, vocab, emoji_set, text } => score(checkpoint, vocab, emoji_set.as_deref(), text),
        Command::Cluster { predictions, out, emoji_set } => cluster(g, predictions, out, emoji_set.as_deref()),
        Command::Coverage { corpus, vocab, out } => coverage(g, corpus, vocab, out),
    }
}

fn settings(g: &Global, command: &str) -> Result<Settings> {
    let s = Settings::load(g.config.as_deref(), &g.set)?;
    s.note("command", command);
    s.note("seed", g.seed);
    Ok(s)
}

fn load_emoji_set(path: Option<&Path>) -> Result<EmojiSet> {
    match path {
        Some(p) => EmojiSet::load(p).with_context(|| format!("emoji set {}", p.display())),
        None => Ok(EmojiSet::new(Vec::new())?),
    }
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("vocabulary {}", path.display()))
}

fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
    ensure!(
        vocab.hash() == ckpt.vocab_hash && vocab.len() == ckpt.model.config.vocab_size,
        "vocabulary does not match checkpoint (hash {} vs {})",
        vocab.hash(),
        ckpt.vocab_hash
    );
    Ok(ckpt)
}

/// Class names from `labels.tsv` in a preprocessed directory.
fn read_labels(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("labels.tsv");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut names = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (idx, name) =
            line.split_once('\t').with_context(|| format!("{}:{}: expected index<TAB>name", path.display(), i + 1))?;
        ensure!(idx.parse::<usize>().ok() == Some(names.len()), "{}:{}: labels out of order", path.display(), i + 1);
        names.push(name.to_string());
    }
    ensure!(!names.is_empty(), "{}: no labels", path.display());
    Ok(names)
}

fn labels_file(stamp: &Stamp, names: &[String]) -> String {
    let mut s = stamp.commented();
    for (i, n) in names.iter().enumerate() {
        let _ = writeln!(s, "{i}\t{n}");
    }
    s
}

fn read_labeled(path: &Path, classes: usize) -> Result<Vec<Example>> {
    let records = read_corpus(path).with_context(|| format!("reading {}", path.display()))?;
    let no_emojis = EmojiSet::new(Vec::new())?;
    labeled_examples(&records, &no_emojis, Some(classes)).with_context(|| format!("in {}", path.display()))
}

fn vocab_file(stamp: &Stamp, vocab: &Vocabulary) -> String {
    stamp.commented() + &vocab.to_file_string()
}

fn synth(g: &Global, out: &Path, size: usize) -> Result<()> {
    let s = settings(g, "synth")?;
    s.note("size", size);
    let stamp = s.finish()?;
    let mut o = Outputs::create(out)?;
    let jsonl = |records: &[CorpusRecord]| -> Result<String> {
        let mut text = stamp.commented();
        for r in records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        Ok(text)
    };
    o.write("corpus.jsonl", jsonl(&demo_corpus(size, g.seed))?)?;
    o.write("target.jsonl", jsonl(&demo_target((size / 4).max(100), g.seed.wrapping_add(1)))?)?;
    o.write("emoji_set.tsv", stamp.commented() + &demo_emoji_set().to_file_string())?;
    o.finish("synth", &stamp, &[])
}

fn preprocess(g: &Global, corpus: &Path, emoji_set: Option<&Path>, out: &Path, labeled: bool) -> Result<()> {
    let s = settings(g, "preprocess")?;
    s.note("labeled", labeled);
    let per_val: usize = s.get("per_class_val", 10)?;
    let per_test: usize = s.get("per_class_test", 10)?;
    let vocab_size: usize = s.get("vocab_size", 50_000)?;
    let do_upsample: bool = s.get("upsample", !labeled)?;
    let stamp = s.finish()?;

    let records = read_corpus(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let mut stats = stamp.commented();
    let (examples, names) = if labeled {
        let emojis = load_emoji_set(emoji_set)?;
        let examples = labeled_examples(&records, &emojis, None)?;
        let classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
        let _ = writeln!(stats, "texts_seen\t{}", records.len());
        (examples, (0..classes).map(|c| c.to_string()).collect::<Vec<_>>())
    } else {
        let Some(path) = emoji_set else { bail!("--emoji-set is required unless --labeled") };
        let emojis = load_emoji_set(Some(path))?;
        let raws: Vec<RawText> = records.iter().map(CorpusRecord::raw).collect();
        let (examples, st) = build_examples(&raws, &emojis, &AcceptAll);
        for (k, v) in [
            ("texts_seen", st.texts_seen),
            ("rejected_language", st.rejected_language),
            ("rejected_url", st.rejected_url),
            ("rejected_no_content", st.rejected_no_content),
            ("rejected_no_emoji", st.rejected_no_emoji),
            ("examples_emitted", st.examples_emitted),
        ] {
            let _ = writeln!(stats, "{k}\t{v}");
        }
        (examples, emojis.entries().iter().map(|e| e.name.clone()).collect())
    };
    let counts = class_counts(&examples, names.len());
    let _ = writeln!(stats, "class\tname\texamples");
    for (c, n) in names.iter().enumerate() {
        let _ = writeln!(stats, "{c}\t{n}\t{}", counts[c]);
    }

    let mut o = Outputs::create(out)?;
    o.write("stats.tsv", &stats)?;
    if examples.is_empty() {
        o.finish("preprocess", &stamp, &[])?;
        eprintln!("warning: no examples survived filtering");
        return Err(EmptyOutput(format!("{}: no usable examples", corpus.display())).into());
    }

    let split = balanced_split(examples, names.len(), per_val, per_test, g.seed)?;
    let upsampled = if do_upsample { Some(upsample(split.train.clone(), names.len(), g.seed)?) } else { None };
    let vocab = build_vocab_from_examples(&split.train, vocab_size);

    let header = stamp.header();
    for (name, examples) in [
        ("train.jsonl", upsampled.as_deref().unwrap_or(&split.train)),
        ("val.jsonl", &split.validation),
        ("test.jsonl", &split.test),
    ] {
        write_examples(o.path(name), &header, examples)?;
        o.record(name);
    }
    o.write("vocab.txt", vocab_file(&stamp, &vocab))?;
    o.write("labels.tsv", labels_file(&stamp, &names))?;
    o.write("manifest.tsv", stamp.commented() + &split_manifest(&split, upsampled.as_deref()))?;
    println!(
        "{} train / {} val / {} test examples, vocabulary {}",
        upsampled.as_ref().map_or(split.train.len(), Vec::len),
        split.validation.len(),
        split.test.len(),
        vocab.len()
    );
    o.finish("preprocess", &stamp, &[("vocab_hash", vocab.hash())])
}

fn pretrain(g: &Global, corpus: &Path, out: &Path) -> Result<()> {
    let names = read_labels(corpus)?;
    let vocab = load_vocab(&corpus.join("vocab.txt"))?;
    let train = read_labeled(&corpus.join("train.jsonl"), names.len())?;
    let val = read_labeled(&corpus.join("val.jsonl"), names.len())?;

    let s = settings(g, "pretrain")?;
    let mc = s.model_config(vocab.len(), names.len())?;
    let tc = s.train_config(g.seed)?;
    let stamp = s.finish()?;

    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let model = Model::<f32>::init(mc, &mut rng)?;
    let max_len = model.config.max_len;
    let (tr, va) = (encode_examples(&train, &vocab, max_len), encode_examples(&val, &vocab, max_len));
    let trainable = vec![true; model.params.len()];
    let lr = vec![tc.lr_new; model.params.len()];
    let outcome = train_until_converged(&model, &tr, &va, &tc, &trainable, &lr)?;

    let ckpt = Checkpoint {
        model: outcome.model,
        init_recipe: INIT_RECIPE.into(),
        vocab_hash: vocab.hash(),
        seed: g.seed,
        config_hash: stamp.config_hash.clone(),
    };
    let bytes = ckpt.to_bytes();
    let mut o = Outputs::create(out)?;
    o.write("model.ckpt", &bytes)?;
    o.write("vocab.txt", vocab_file(&stamp, &vocab))?;
    o.write("labels.tsv", labels_file(&stamp, &names))?;
    o.write("curve.tsv", stamp.commented() + &outcome.curve.to_tsv())?;
    println!(
        "best val loss {:.4} ({} {:.4}) at step {} of {}",
        outcome.best.loss, tc.metric, outcome.best.metric, outcome.best_step, outcome.steps
    );
    o.finish("pretrain", &stamp, &[("checkpoint_hash", sha256_bytes(&bytes)), ("vocab_hash", vocab.hash())])
}

fn sha256_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn finetune_cmd(g: &Global, checkpoint: &Path, vocab: &Path, corpus: &Path, strategy: &str, out: &Path) -> Result<()> {
    let vocab = load_vocab(vocab)?;
    let ckpt = load_checkpoint(checkpoint, &vocab)?;
    let strategy = lookup_strategy(strategy)?;
    let names = read_labels(corpus)?;
    let target = TargetData {
        train: read_labeled(&corpus.join("train.jsonl"), names.len())?,
        validation: read_labeled(&corpus.join("val.jsonl"), names.len())?,
        test: read_labeled(&corpus.join("test.jsonl"), names.len())?,
        classes: names.len(),
    };

    let s = settings(g, "finetune")?;
    s.note("strategy", strategy.name());
    let extend: String = s.get("extend_vocab", "auto".to_string())?;
    let opts = FinetuneOptions {
        extend_vocab: match extend.as_str() {
            "auto" => None,
            v => Some(bool::from_str(v).map_err(|_| anyhow!("extend_vocab {v:?}: expected auto, true or false"))?),
        },
        extension_limit: s.get("extension_limit", DEFAULT_EXTENSION_LIMIT)?,
        train: s.train_config(g.seed)?,
    };
    let stamp = s.finish()?;

    let outcome = finetune(&ckpt, &vocab, &target, strategy.as_ref(), &opts)?;
    let tuned = Checkpoint {
        model: outcome.model,
        init_recipe: ckpt.init_recipe.clone(),
        vocab_hash: outcome.vocab.hash(),
        seed: g.seed,
        config_hash: stamp.config_hash.clone(),
    };
    let bytes = tuned.to_bytes();
    let mut o = Outputs::create(out)?;
    o.write("model.ckpt", &bytes)?;
    o.write("vocab.txt", vocab_file(&stamp, &outcome.vocab))?;
    o.write("labels.tsv", labels_file(&stamp, &names))?;
    o.write("stages.tsv", stamp.commented() + &outcome.report.to_tsv(false))?;
    for (i, st) in outcome.report.stages.iter().enumerate() {
        o.write(&format!("curve-{i}-{}.tsv", st.name), stamp.commented() + &st.curve.to_tsv())?;
    }
    // Timing varies run to run, so it is written but not digested.
    std::fs::write(o.path("timing.tsv"), stamp.commented() + &outcome.report.to_tsv(true))?;
    for st in &outcome.report.stages {
        println!("{}: val loss {:.4} -> {:.4} in {} steps", st.name, st.start_val_loss, st.end_val_loss, st.steps);
    }
    o.finish(
        "finetune",
        &stamp,
        &[("checkpoint_hash", sha256_bytes(&bytes)), ("input_checkpoint_hash", sha256_file(checkpoint)?)],
    )
}

fn evaluate_cmd(
    g: &Global,
    checkpoint: &Path,
    vocab: &Path,
    corpus: &Path,
    out: &Path,
    k: usize,
    against: Option<&Path>,
) -> Result<()> {
    let vocab = load_vocab(vocab)?;
    let ckpt = load_checkpoint(checkpoint, &vocab)?;
    let classes = ckpt.model.config.classes;
    let examples = read_labeled(corpus, classes)?;

    let s = settings(g, "evaluate")?;
    s.note("k", k);
    let metric: String = s.get("metric", Metric::Accuracy.name().to_string())?;
    let metric = Metric::from_str(&metric)?;
    let samples: usize = s.get("bootstrap_samples", DEFAULT_BOOTSTRAP_SAMPLES)?;
    let stamp = s.finish()?;

    let data: Vec<EncodedExample> = encode_examples(&examples, &vocab, ckpt.model.config.max_len);
    let (point, preds) = evaluate(&ckpt.model, &data, metric)?;
    let mut report = stamp.commented();
    let _ = writeln!(report, "examples\t{}", preds.len());
    let _ = writeln!(report, "classes\t{classes}");
    let _ = writeln!(report, "cross_entropy\t{:.6}", point.loss);
    let _ = writeln!(report, "accuracy\t{:.6}", top_k_accuracy(&preds, 1)?);
    let _ = writeln!(report, "top_{k}_accuracy\t{:.6}", top_k_accuracy(&preds, k.min(classes))?);
    let _ = writeln!(report, "macro_f1\t{:.6}", macro_f1(&preds));
    for (c, f1) in per_class_f1(&preds.argmax(), preds.labels(), classes).iter().enumerate() {
        let _ = writeln!(report, "f1_class_{c}\t{f1:.6}");
    }
    if let Some(path) = against {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let other = PredictionSet::parse_tsv(&text).with_context(|| format!("in {}", path.display()))?;
        let p = bootstrap_compare(&preds, &other, metric, samples, g.seed, Sided::One)?;
        let _ = writeln!(report, "against_{}\t{:.6}", metric.name(), metric.score(&other));
        let _ = writeln!(report, "bootstrap_p\t{p:.6}");
    }
    print!("{}", report.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect::<String>());

    let mut o = Outputs::create(out)?;
    o.write("predictions.tsv", stamp.commented() + &preds.to_tsv())?;
    o.write("report.tsv", report)?;
    o.finish("evaluate", &stamp, &[("checkpoint_hash", sha256_file(checkpoint)?)])
}

fn score(checkpoint: &Path, vocab: &Path, emoji_set: Option<&Path>, text: &str) -> Result<()> {
    if text.trim().is_empty() {
        bail!("usage: TEXT must not be empty");
    }
    let vocab = load_vocab(vocab)?;
    let ckpt = load_checkpoint(checkpoint, &vocab)?;
    let emojis = load_emoji_set(emoji_set)?;
    let example = Example { id: "input".into(), tokens: tokenize_str(text, &emojis), label: 0 };
    let encoded = encode_examples(std::slice::from_ref(&example), &vocab, ckpt.model.config.max_len);
    let probs = ckpt.model.predict(&encoded[0].tokens)?.mapv(f64::from);
    for (rank, c) in ranked(probs.view()).into_iter().take(5).enumerate() {
        let name = emojis.entries().get(c).map_or_else(|| c.to_string(), |e| format!("{} {}", e.sequence, e.name));
        println!("{}\t{:.6}\t{name}", rank + 1, probs[c]);
    }
    Ok(())
}

fn cluster(g: &Global, predictions: &Path, out: &Path, emoji_set: Option<&Path>) -> Result<()> {
    let s = settings(g, "cluster")?;
    let stamp = s.finish()?;
    let text = std::fs::read_to_string(predictions).with_context(|| format!("reading {}", predictions.display()))?;
    let preds = PredictionSet::parse_tsv(&text).with_context(|| format!("in {}", predictions.display()))?;
    let names: Vec<String> = match emoji_set {
        Some(p) => load_emoji_set(Some(p))?.entries().iter().map(|e| e.name.clone()).collect(),
        None => (0..preds.classes()).map(|c| c.to_string()).collect(),
    };
    ensure!(names.len() == preds.classes(), "{} names for {} classes", names.len(), preds.classes());

    let corr = prediction_correlation(&preds)?;
    let tree = cluster_classes(corr.view())?;
    let mut table = stamp.commented();
    let _ = writeln!(table, "class\t{}", names.join("\t"));
    for (i, row) in corr.rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(table, "{}\t{}", names[i], cells.join("\t"));
    }
    let mut o = Outputs::create(out)?;
    o.write("correlation.tsv", table)?;
    o.write("dendrogram.tsv", stamp.commented() + &tree.to_merge_list())?;
    // Newick has no line comments; bracketed text is its comment syntax.
    o.write("dendrogram.nwk", format!("[{}]\n{}\n", stamp.header().replace('\n', " "), tree.to_newick(&names)))?;
    o.finish("cluster", &stamp, &[("predictions_hash", sha256_file(predictions)?)])
}

fn coverage(g: &Global, corpus: &Path, vocab: &Path, out: &Path) -> Result<()> {
    let pretrained = load_vocab(vocab)?;
    let own = load_vocab(&corpus.join("vocab.txt"))?;
    let names = read_labels(corpus)?;
    let splits: Vec<(&str, Vec<Example>)> = ["train", "val", "test"]
        .into_iter()
        .map(|n| Ok((n, read_labeled(&corpus.join(format!("{n}.jsonl")), names.len())?)))
        .collect::<Result<_>>()?;

    let s = settings(g, "coverage")?;
    let limit: usize = s.get("extension_limit", DEFAULT_EXTENSION_LIMIT)?;
    let stamp = s.finish()?;

    let extended = extend_vocab(&pretrained, splits[0].1.iter().map(|e| e.tokens.tokens.as_slice()), limit);
    let mut table = stamp.commented();
    let _ = writeln!(table, "split\town\tlast\tfull_chain_thaw");
    for (name, examples) in &splits {
        let seqs = || examples.iter().map(|e| e.tokens.tokens.as_slice());
        let _ = writeln!(
            table,
            "{name}\t{:.4}\t{:.4}\t{:.4}",
            word_coverage(&own, seqs()),
            word_coverage(&pretrained, seqs()),
            word_coverage(&extended, seqs())
        );
    }
    print!("{}", table.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect::<String>());
    let mut o = Outputs::create(out)?;
    o.write("coverage.tsv", table)?;
    o.finish("coverage", &stamp, &[("vocab_hash", pretrained.hash())])
}
