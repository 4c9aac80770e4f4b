//! Text checkpoints in the same `key = value` grammar as the config.
//!
//! ```text
//! format = spiketok-checkpoint-1
//! config.frames.timesteps = 8
//! ...
//! sten.down0.kernel.0 = 0.5123
//! sten.down0.hilif.w.0 = -0.03
//! ```
//!
//! Shape-defining settings are stored under `config.`; every scalar of every
//! parameter block follows as `<block>.<index>`. Loading rebuilds the model
//! from the stored shape and requires each parameter exactly once.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Blocks;

pub const FORMAT_TAG: &str = "spiketok-checkpoint-1";

const MODEL_PREFIXES: [&str; 7] = ["frames.", "sten.", "hilif.", "surrogate.", "msp.", "stsg.", "sc."];

fn is_model_key(key: &str) -> bool {
    MODEL_PREFIXES.iter().any(|p| key.starts_with(p)) && !key.starts_with("hilif.feedback")
}

pub fn serialize_checkpoint(model: &Model) -> String {
    let mut out = format!("format = {FORMAT_TAG}\n");
    let cfg = PipelineConfig {
        model: model.config.clone(),
        ..PipelineConfig::default()
    };
    for (k, v) in cfg.entries() {
        if is_model_key(k) {
            let _ = writeln!(out, "config.{k} = {v}");
        }
    }
    let _ = writeln!(out, "config.hilif.v_reset = {:?}", model.encoder.conv_neuron.v_reset);
    for (name, block) in model.blocks() {
        for (i, v) in block.iter().enumerate() {
            let _ = writeln!(out, "{name}.{i} = {v:?}");
        }
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Model> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format("checkpoint is not UTF-8"))?;
    let mut config = PipelineConfig::default();
    let mut v_reset = 0.0;
    let mut values: BTreeMap<String, f64> = BTreeMap::new();
    let mut tagged = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| Error::format(format!("checkpoint line {}: {msg}", lineno + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at("expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "format" {
            if value != FORMAT_TAG || tagged {
                return Err(at(format!("unsupported format `{value}`")));
            }
            tagged = true;
        } else if !tagged {
            return Err(at("missing `format` header".into()));
        } else if key == "config.hilif.v_reset" {
            v_reset = value.parse().map_err(|_| at(format!("bad number `{value}`")))?;
        } else if let Some(k) = key.strip_prefix("config.") {
            if !is_model_key(k) {
                return Err(at(format!("unknown config key `{k}`")));
            }
            config.set(k, value).map_err(|e| at(e.to_string()))?;
        } else {
            let v: f64 = value.parse().map_err(|_| at(format!("bad number `{value}`")))?;
            if !v.is_finite() {
                return Err(Error::Numeric {
                    block: key.to_string(),
                    message: "non-finite parameter in checkpoint".into(),
                });
            }
            if values.insert(key.to_string(), v).is_some() {
                return Err(at(format!("duplicate key `{key}`")));
            }
        }
    }
    if !tagged {
        return Err(Error::format("empty checkpoint"));
    }
    config.model.validate()?;
    let mut model = Model::init(config.model, 0)?;
    for (name, block) in model.blocks_mut() {
        for (i, slot) in block.iter_mut().enumerate() {
            let key = format!("{name}.{i}");
            *slot = values
                .remove(&key)
                .ok_or_else(|| Error::format(format!("checkpoint lacks `{key}`")))?;
        }
    }
    if let Some(extra) = values.keys().next() {
        return Err(Error::format(format!("unknown checkpoint key `{extra}`")));
    }
    for n in model.encoder.neurons_mut() {
        n.v_reset = v_reset;
    }
    for (prefix, n) in model.encoder.neuron_prefixes().iter().zip(model.encoder.neurons()) {
        n.validate().map_err(|e| Error::validation(format!("{prefix}: {e}")))?;
    }
    Ok(model)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Model> {
    parse_checkpoint(&std::fs::read(path)?)
}
