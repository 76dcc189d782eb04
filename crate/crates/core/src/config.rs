//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file overrides defaults and command-line
//! flags override the file. The fully resolved set is written as `run.meta`,
//! which is itself a valid config file (plus the `command` key).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::decompose::DecompositionConfig;
use crate::sim::WorldConfig;
use crate::train::TrainConfig;

pub const RUN_META_FILE: &str = "run.meta";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key {key:?}{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    UnknownKey { key: String, line: Option<usize> },
    #[error("missing config key {0:?}")]
    Missing(&'static str),
    #[error("key {key:?}: cannot parse {value:?}: {message}")]
    Value { key: String, value: String, message: String },
    #[error("conflicting values for {key:?}: {first:?} vs {second:?}")]
    Conflict { key: String, first: String, second: String },
}

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($name:literal = $default:literal : $help:literal),* $(,)?) => {
        &[$(KeySpec { name: $name, default: $default, help: $help }),*]
    };
}

/// Every recognised key. An empty default means "unset".
pub const KEYS: &[KeySpec] = keys![
    "store" = "": "dataset root holding manifest.tsv",
    "out" = "": "output directory (report file for eval)",
    "vocab" = "": "IND vocabulary file",
    "params" = "": "projection network checkpoint",
    "centers" = "": "center bank checkpoint",
    "scores" = "": "comma-separated score files for eval",
    "metric" = "cosine": "cosine|euclidean|kl|tag_score|mean_cs|all",
    "seed" = "0": "seed for world generation and training",
    // decomposition
    "tau" = "0.5": "attention threshold",
    "score_tau" = "": "threshold at scoring time (defaults to tau)",
    "max_tokens" = "256": "cap on selected cells per record",
    "normalize" = "true": "normalize attention maps to [0, 1] before thresholding",
    // training
    "alpha" = "1": "cross-entropy weight",
    "beta" = "0.1": "center-pull weight",
    "lr0" = "0.01": "initial learning rate",
    "epochs" = "100": "training epochs",
    "batch_size" = "256": "samples per optimizer step",
    "gamma2" = "0.0001": "EMA rate of the class centers",
    "width" = "512": "projected feature dimension",
    "n_blocks" = "2": "self-attention blocks",
    "n_heads" = "4": "attention heads per block",
    "mlp_ratio" = "2": "MLP hidden size as a multiple of width",
    "ema_mode" = "sample": "sample|batch",
    "ema_source" = "same_pass": "same_pass|recompute",
    // world
    "k_ind" = "8": "IND classes",
    "k_ood" = "8": "OOD classes",
    "n_nuisance" = "6": "background prototypes",
    "d" = "32": "feature dimension",
    "h" = "8": "grid rows",
    "w" = "8": "grid columns",
    "separation" = "4": "prototype norm",
    "sigma" = "0.5": "per-cell feature noise",
    "attention_noise" = "0.05": "attention cell flip probability",
    "tag_miss_rate" = "0.02": "probability an object goes untagged",
    "false_tag_rate" = "0.3": "probability the background is tagged",
    "ood_confusion_rate" = "0.8": "probability an OOD object gets its closest IND tag",
    "background_affinity" = "1": "probability an IND image shows its class's usual background",
    "modes_per_class" = "2": "appearance modes per object class",
    "objects_min" = "1": "fewest objects per image",
    "objects_max" = "1": "most objects per image",
    "object_side_min" = "2": "smallest object side in cells",
    "object_side_max" = "4": "largest object side in cells",
    "n_train" = "2000": "train records",
    "n_test_ind" = "500": "IND test records",
    "n_test_ood" = "500": "OOD test records",
];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

/// Parses `key = value` lines; `#` starts a comment. Later duplicates of a
/// key in the same file are a syntax error.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax { line, message: format!("expected `key = value`, got {content:?}") });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { line, message: "empty key".into() });
        }
        if key != "command" && key_spec(key).is_none() {
            return Err(ConfigError::UnknownKey { key: key.into(), line: Some(line) });
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(ConfigError::Syntax { line, message: format!("key {key:?} set twice") });
        }
    }
    Ok(out)
}

/// Resolved configuration: defaults < file < flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect() }
    }
}

impl RunConfig {
    /// Layers `file` (already parsed) and `flags` over the defaults. The
    /// `command` key, if present in the file, is dropped.
    pub fn resolve(file: &BTreeMap<String, String>, flags: &[(String, String)]) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (k, v) in file.iter().filter(|(k, _)| k.as_str() != "command") {
            cfg.set(k, v)?;
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in flags {
            if let Some(first) = seen.insert(k, v) {
                if first != v {
                    return Err(ConfigError::Conflict { key: k.clone(), first: first.into(), second: v.clone() });
                }
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, flags: &[(String, String)]) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        RunConfig::resolve(&parse_config(&text)?, flags)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if key_spec(key).is_none() {
            return Err(ConfigError::UnknownKey { key: key.into(), line: None });
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let value = self.raw(key);
        value.parse().map_err(|e: T::Err| ConfigError::Value {
            key: key.into(),
            value: value.into(),
            message: e.to_string(),
        })
    }

    /// A path-valued key that the current command needs.
    pub fn path(&self, key: &'static str) -> Result<PathBuf, ConfigError> {
        match self.raw(key) {
            "" => Err(ConfigError::Missing(key)),
            v => Ok(PathBuf::from(v)),
        }
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        Some(self.raw(key)).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    pub fn world(&self) -> Result<WorldConfig, ConfigError> {
        Ok(WorldConfig {
            k_ind: self.get("k_ind")?,
            k_ood: self.get("k_ood")?,
            n_nuisance: self.get("n_nuisance")?,
            d: self.get("d")?,
            h: self.get("h")?,
            w: self.get("w")?,
            separation: self.get("separation")?,
            sigma: self.get("sigma")?,
            attention_noise: self.get("attention_noise")?,
            tag_miss_rate: self.get("tag_miss_rate")?,
            false_tag_rate: self.get("false_tag_rate")?,
            ood_confusion_rate: self.get("ood_confusion_rate")?,
            background_affinity: self.get("background_affinity")?,
            modes_per_class: self.get("modes_per_class")?,
            objects_min: self.get("objects_min")?,
            objects_max: self.get("objects_max")?,
            object_side_min: self.get("object_side_min")?,
            object_side_max: self.get("object_side_max")?,
            n_train: self.get("n_train")?,
            n_test_ind: self.get("n_test_ind")?,
            n_test_ood: self.get("n_test_ood")?,
            seed: self.get("seed")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            alpha: self.get("alpha")?,
            beta: self.get("beta")?,
            lr0: self.get("lr0")?,
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            tau: self.get("tau")?,
            max_tokens: self.get("max_tokens")?,
            gamma2: self.get("gamma2")?,
            seed: self.get("seed")?,
            width: self.get("width")?,
            n_blocks: self.get("n_blocks")?,
            n_heads: self.get("n_heads")?,
            mlp_ratio: self.get("mlp_ratio")?,
            ema_mode: self.get("ema_mode")?,
            ema_source: self.get("ema_source")?,
        })
    }

    /// Decomposition settings at scoring time (`score_tau` overrides `tau`).
    pub fn score_decomposition(&self) -> Result<DecompositionConfig, ConfigError> {
        let tau = if self.raw("score_tau").is_empty() { self.get("tau")? } else { self.get("score_tau")? };
        Ok(DecompositionConfig { tau, max_tokens: self.get("max_tokens")?, normalize: self.get("normalize")? })
    }

    /// `run.meta` text: the command followed by every key in sorted order.
    pub fn to_meta(&self, command: &str) -> String {
        let mut out = format!("command = {command}\n");
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Reads a `run.meta` file back into its command and configuration.
pub fn read_run_meta(path: &Path) -> Result<(String, RunConfig), ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    let parsed = parse_config(&text)?;
    let command = parsed.get("command").cloned().ok_or(ConfigError::Missing("command"))?;
    Ok((command, RunConfig::resolve(&parsed, &[])?))
}
