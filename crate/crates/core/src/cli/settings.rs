//! `key = value` configuration with flag overrides, and the bookkeeping
//! that stamps every artifact with the seed and a hash of the resolved
//! configuration.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use mojidistill::eval::Metric;
use mojidistill::model::ModelConfig;
use mojidistill::train::{Selection, TrainConfig};

pub struct Settings {
    given: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Settings {
    /// Reads `config` (if any), then applies `--set key=value` overrides.
    pub fn load(config: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut given = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected key = value", path.display(), i + 1))?;
                given.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("--set {o:?}: expected key=value"))?;
            given.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { given, resolved: RefCell::new(BTreeMap::new()) })
    }

    pub fn get<T: FromStr + ToString>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let value = match self.given.get(key) {
            Some(raw) => raw.parse::<T>().map_err(|e| anyhow::anyhow!("config {key} = {raw:?}: {e}"))?,
            None => default,
        };
        self.resolved.borrow_mut().insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Records a value that shapes the outputs but does not come from the
    /// config file (seed, strategy, input digests).
    pub fn note(&self, key: &str, value: impl ToString) {
        self.resolved.borrow_mut().insert(key.to_string(), value.to_string());
    }

    /// Fails on keys that no command option consumed.
    pub fn finish(&self) -> Result<Stamp> {
        let resolved = self.resolved.borrow();
        let unknown: Vec<&String> = self.given.keys().filter(|k| !resolved.contains_key(*k)).collect();
        if !unknown.is_empty() {
            bail!("unknown config keys: {unknown:?}");
        }
        let mut canonical = String::new();
        for (k, v) in resolved.iter() {
            let _ = writeln!(canonical, "{k}={v}");
        }
        let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
        Ok(Stamp { config_hash: hash, resolved: resolved.clone() })
    }

    pub fn model_config(&self, vocab_size: usize, classes: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            architecture: self.get("architecture", "deepmoji".to_string())?,
            vocab_size,
            embed_dim: self.get("embed_dim", 32)?,
            units: self.get("units", 32)?,
            classes,
            max_len: self.get("max_len", 64)?,
        })
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let eval_interval: String = self.get("eval_interval", "epoch".to_string())?;
        let selection: String = self.get("selection", "val-loss".to_string())?;
        let metric: String = self.get("metric", d.metric.name().to_string())?;
        let cfg = TrainConfig {
            lr_new: self.get("lr_new", d.lr_new)?,
            lr_pretrained: self.get("lr_pretrained", d.lr_pretrained)?,
            clip_norm: self.get("clip_norm", d.clip_norm)?,
            embed_channel_dropout: self.get("embed_dropout", d.embed_channel_dropout)?,
            penultimate_dropout: self.get("penultimate_dropout", d.penultimate_dropout)?,
            l2_embed: self.get("l2_embed", d.l2_embed)?,
            batch_size: self.get("batch_size", d.batch_size)?,
            patience: self.get("patience", d.patience)?,
            eval_interval: match eval_interval.as_str() {
                "epoch" => None,
                s => Some(s.parse().with_context(|| format!("eval_interval {s:?}"))?),
            },
            max_epochs: self.get("max_epochs", d.max_epochs)?,
            selection: match selection.as_str() {
                "val-loss" => Selection::ValLoss,
                "val-metric" => Selection::ValMetric,
                s => bail!("selection {s:?}: expected val-loss or val-metric"),
            },
            metric: Metric::from_str(&metric)?,
            seed,
            workers: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Seed-and-config identity of one run.
pub struct Stamp {
    pub config_hash: String,
    resolved: BTreeMap<String, String>,
}

impl Stamp {
    pub fn seed(&self) -> &str {
        self.resolved.get("seed").map(String::as_str).unwrap_or("?")
    }

    /// Header lines for text artifacts, without comment markers.
    pub fn header(&self) -> String {
        format!("seed={}\nconfig_hash={}", self.seed(), self.config_hash)
    }

    /// `header` with each line prefixed by `# `.
    pub fn commented(&self) -> String {
        self.header().lines().map(|l| format!("# {l}\n")).collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Output directory plus the primary artifacts written into it.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers a file written by other code as a primary artifact.
    pub fn record(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        self.record(name);
        Ok(())
    }

    /// Writes `run.meta`: command, resolved configuration, and a digest of
    /// every primary artifact.
    pub fn finish(self, command: &str, stamp: &Stamp, extra: &[(&str, String)]) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "command={command}");
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "seed={}", stamp.seed());
        let _ = writeln!(s, "config_hash={}", stamp.config_hash);
        for (k, v) in extra {
            let _ = writeln!(s, "{k}={v}");
        }
        for (k, v) in &stamp.resolved {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for name in &self.written {
            let _ = writeln!(s, "sha256.{name}={}", sha256_file(&self.path(name))?);
        }
        let p = self.path("run.meta");
        std::fs::write(&p, s).with_context(|| format!("writing {}", p.display()))
    }
}
