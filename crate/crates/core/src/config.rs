//! `key = value` configuration text shared by config files and checkpoints.
//!
//! Blank lines and lines starting with `#` are ignored. Model keys:
//! `modalities`, `dim`, `heads`, `unimodal_layers`, `fusion_layers`,
//! `bottleneck_tokens`, `weight_layers`, `global_layers`, `tau`, `topk`,
//! `lambda`, `cross_transformer`, `weighting`, `fixed_tokens` (`none` or a
//! count), `tcc`. Training keys: `epochs`, `batch_size`, `learning_rate`,
//! `momentum`, `weight_decay`, `grad_clip` (`none` or a norm), `seed`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::modality::{format_modalities, parse_modalities};
use crate::trainer::TrainConfig;

/// Ordered `key = value` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    pub entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim().to_string();
            if entries.iter().any(|(e, _)| *e == k) {
                return Err(Error::config(format!("line {}: `{k}` set twice", i + 1)));
            }
            entries.push((k, v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn fmt_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl ModelConfig {
    /// Applies one key; returns `false` when the key is not a model key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "modalities" => self.modalities = parse_modalities(value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "unimodal_layers" => self.unimodal_layers = parse_value(key, value)?,
            "fusion_layers" => self.fusion_layers = parse_value(key, value)?,
            "bottleneck_tokens" => self.bottleneck_tokens = parse_value(key, value)?,
            "weight_layers" => self.weight_layers = parse_value(key, value)?,
            "global_layers" => self.global_layers = parse_value(key, value)?,
            "tau" => self.loss.tau = parse_value(key, value)?,
            "topk" => self.loss.k = parse_value(key, value)?,
            "lambda" => self.loss.lambda = parse_value(key, value)?,
            "cross_transformer" => self.cross_transformer = parse_bool(key, value)?,
            "weighting" => self.weighting = parse_bool(key, value)?,
            "fixed_tokens" => self.fixed_tokens = parse_optional(key, value)?,
            "tcc" => self.tcc = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_key_values(&self, kv: &mut KeyValues) {
        kv.push("modalities", format_modalities(&self.modalities));
        kv.push("dim", self.dim);
        kv.push("heads", self.heads);
        kv.push("unimodal_layers", self.unimodal_layers);
        kv.push("fusion_layers", self.fusion_layers);
        kv.push("bottleneck_tokens", self.bottleneck_tokens);
        kv.push("weight_layers", self.weight_layers);
        kv.push("global_layers", self.global_layers);
        kv.push("tau", self.loss.tau);
        kv.push("topk", self.loss.k);
        kv.push("lambda", self.loss.lambda);
        kv.push("cross_transformer", self.cross_transformer);
        kv.push("weighting", self.weighting);
        kv.push("fixed_tokens", fmt_optional(&self.fixed_tokens));
        kv.push("tcc", self.tcc);
    }
}

impl TrainConfig {
    /// Applies one key; returns `false` when the key is not a training key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_optional(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_key_values(&self, kv: &mut KeyValues) {
        kv.push("epochs", self.epochs);
        kv.push("batch_size", self.batch_size);
        kv.push("learning_rate", self.learning_rate);
        kv.push("momentum", self.momentum);
        kv.push("weight_decay", self.weight_decay);
        kv.push("grad_clip", fmt_optional(&self.grad_clip));
        kv.push("seed", self.seed);
    }
}

/// Applies every entry to the model or training config; unknown keys are errors.
pub fn apply_all(kv: &KeyValues, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
    for (k, v) in &kv.entries {
        if !model.apply(k, v)? && !train.apply(k, v)? {
            return Err(Error::config(format!("unknown configuration key `{k}`")));
        }
    }
    Ok(())
}
