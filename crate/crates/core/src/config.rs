//! Line-based `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors. Every
//! key has a default:
//!
//! | key | default |
//! |-----|---------|
//! | `seed` | 0 |
//! | `dim` | 128 |
//! | `input_dim` | `auto` (taken from the training data) |
//! | `batch_size` | 4000 |
//! | `samples_per_class` | 4 |
//! | `tau1` | 1 |
//! | `tau2` | 0.01 |
//! | `k_set` | `1,2,4,8,16`, or `1,2,4,8,12,16,20,24,28,32` with `simix` |
//! | `simix` | false |
//! | `lr` | 0.001 |
//! | `iterations` | 1000 |
//! | `chunk_size` | 64 |
//! | `encoder` | `linear` (or `mlp:<hidden>`) |
//! | `loss` | `rsk` (or `contrastive`) |
//! | `lr_decay_factor` | 1 |
//! | `lr_decay_steps` | empty |
//! | `eval_every` | 25 |

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::Architecture;
use crate::numerics::Temperature;
use crate::rsloss::{KSet, LossConfig};
use crate::trainer::{Objective, TrainConfig};
use crate::{Error, Result};

pub const KEYS: &[&str] = &[
    "seed",
    "dim",
    "input_dim",
    "batch_size",
    "samples_per_class",
    "tau1",
    "tau2",
    "k_set",
    "simix",
    "lr",
    "iterations",
    "chunk_size",
    "encoder",
    "loss",
    "lr_decay_factor",
    "lr_decay_steps",
    "eval_every",
];

/// A parsed configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Expected raw feature width; `None` means take it from the data.
    pub input_dim: Option<usize>,
    /// Whether `k_set` was given explicitly (otherwise it follows `simix`).
    pub explicit_ks: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                batch_size: 4000,
                samples_per_class: 4,
                iterations: 1000,
                simix: false,
                loss: LossConfig::default(),
                objective: Objective::RsK,
                encoder: Architecture::Linear,
                embed_dim: 128,
                lr: 1e-3,
                lr_decay_factor: 1.0,
                lr_decay_steps: Vec::new(),
                chunk_size: 64,
                eval_every: 25,
                seed: 0,
            },
            input_dim: None,
            explicit_ks: false,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|t| value(key, t.trim())).collect()
}

/// Parses a comma-separated k set such as `1,2,4,8`.
pub fn parse_kset(raw: &str) -> Result<KSet> {
    KSet::new(list("k_set", raw)?).map_err(|e| Error::Config(format!("k_set: {e}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {raw:?} for {key}"))),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let t = &mut self.train;
        let raw = raw.trim();
        match key {
            "seed" => t.seed = value(key, raw)?,
            "dim" => t.embed_dim = value(key, raw)?,
            "input_dim" => {
                self.input_dim = if raw == "auto" { None } else { Some(value(key, raw)?) };
            }
            "batch_size" => t.batch_size = value(key, raw)?,
            "samples_per_class" => t.samples_per_class = value(key, raw)?,
            "tau1" => {
                t.loss.tau1 = Temperature::new(value(key, raw)?).map_err(|e| Error::Config(format!("tau1: {e}")))?
            }
            "tau2" => {
                t.loss.tau2 = Temperature::new(value(key, raw)?).map_err(|e| Error::Config(format!("tau2: {e}")))?
            }
            "k_set" => {
                t.loss.ks = parse_kset(raw)?;
                self.explicit_ks = true;
            }
            "simix" => {
                t.simix = parse_bool(key, raw)?;
                if !self.explicit_ks {
                    t.loss.ks = TrainConfig::default_ks(t.simix);
                }
            }
            "lr" => t.lr = value(key, raw)?,
            "iterations" => t.iterations = value(key, raw)?,
            "chunk_size" => t.chunk_size = value(key, raw)?,
            "encoder" => {
                t.encoder = raw.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            }
            "loss" => {
                t.objective = match raw {
                    "rsk" => Objective::RsK,
                    "contrastive" => Objective::Contrastive,
                    _ => return Err(Error::Config(format!("unknown loss {raw:?} (rsk|contrastive)"))),
                }
            }
            "lr_decay_factor" => t.lr_decay_factor = value(key, raw)?,
            "lr_decay_steps" => t.lr_decay_steps = list(key, raw)?,
            "eval_every" => t.eval_every = value(key, raw)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
            cfg.set(key, raw)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Renders the config back to `key = value` form.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "dim = {}", t.embed_dim);
        match self.input_dim {
            Some(d) => {
                let _ = writeln!(s, "input_dim = {d}");
            }
            None => {
                let _ = writeln!(s, "input_dim = auto");
            }
        }
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "samples_per_class = {}", t.samples_per_class);
        let _ = writeln!(s, "tau1 = {}", t.loss.tau1.get());
        let _ = writeln!(s, "tau2 = {}", t.loss.tau2.get());
        let _ = writeln!(s, "simix = {}", t.simix);
        let _ = writeln!(s, "k_set = {}", join(t.loss.ks.as_slice()));
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "iterations = {}", t.iterations);
        let _ = writeln!(s, "chunk_size = {}", t.chunk_size);
        let _ = writeln!(s, "encoder = {}", t.encoder);
        let loss = match t.objective {
            Objective::RsK => "rsk",
            Objective::Contrastive => "contrastive",
        };
        let _ = writeln!(s, "loss = {loss}");
        let _ = writeln!(s, "lr_decay_factor = {}", t.lr_decay_factor);
        let steps: Vec<String> = t.lr_decay_steps.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "lr_decay_steps = {}", steps.join(","));
        let _ = writeln!(s, "eval_every = {}", t.eval_every);
        s
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
