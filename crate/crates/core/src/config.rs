//! Flat `key = value` pipeline configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys are namespaced by module (`hilif.mu_tau`, `stsg.k_min`, ...). Unknown
//! or repeated keys are rejected, and the assembled configuration is
//! validated before it is returned.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::neuron::{FeedbackState, ResetMode};
use crate::surrogate::Surrogate;
use crate::temporal::CueAblation;
use crate::train::{Task, TrainConfig};

/// Parameters of the `synth` subcommand's moving-bar recordings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: u16,
    pub height: u16,
    pub duration_us: u32,
    pub velocity_px_per_s: f64,
    pub noise_rate_hz: f64,
    pub samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            duration_us: 100_000,
            velocity_px_per_s: 200.0,
            noise_rate_hz: 0.5,
            samples: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub feedback: FeedbackState,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::validation(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl PipelineConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        vec![
            ("seed", self.seed.to_string()),
            ("frames.timesteps", m.timesteps.to_string()),
            ("frames.height", m.height.to_string()),
            ("frames.width", m.width.to_string()),
            ("sten.in_channels", m.encoder.in_channels.to_string()),
            ("sten.stages", m.encoder.stages.to_string()),
            ("sten.channels", m.encoder.channels.to_string()),
            ("sten.widths", m.encoder.widths.map(|w| w.to_string()).join(",")),
            ("hilif.mu_tau", format!("{:?}", m.priors.mu_tau)),
            ("hilif.sigma_tau", format!("{:?}", m.priors.sigma_tau)),
            ("hilif.mu_vth", format!("{:?}", m.priors.mu_vth)),
            ("hilif.sigma_vth", format!("{:?}", m.priors.sigma_vth)),
            ("hilif.reset", m.reset_mode.to_string()),
            ("hilif.feedback_decay", format!("{:?}", self.feedback.decay)),
            ("hilif.feedback_gain", format!("{:?}", self.feedback.gain)),
            ("hilif.feedback_target", format!("{:?}", self.feedback.target_rate)),
            ("hilif.feedback_init", format!("{:?}", self.feedback.ema_activity)),
            ("surrogate.kind", m.surrogate.kind().to_string()),
            ("surrogate.width", format!("{:?}", m.surrogate.width())),
            ("msp.heads", m.msp_heads.to_string()),
            ("stsg.k_min", m.k_min.to_string()),
            ("stsg.predictor_hidden", m.predictor_hidden.to_string()),
            ("stsg.fusion_hidden", m.fusion_hidden.to_string()),
            ("stsg.n_target", opt_str(&m.n_target)),
            ("sc.heads", m.sc_heads.to_string()),
            ("sc.layers", m.sc_layers.to_string()),
            ("sc.ffn", m.sc_ffn.to_string()),
            ("sc.classes", m.classes.to_string()),
            ("train.task", t.task.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.train_samples", t.train_samples.to_string()),
            ("train.test_samples", t.test_samples.to_string()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.rho_target", format!("{:?}", t.rho_target)),
            ("train.rho_weight", format!("{:?}", t.rho_weight)),
            ("train.fixed_k", opt_str(&t.fixed_k)),
            ("train.ablation", t.ablation.to_string()),
            ("train.feedback", t.feedback.to_string()),
            ("synth.width", s.width.to_string()),
            ("synth.height", s.height.to_string()),
            ("synth.duration_us", s.duration_us.to_string()),
            ("synth.velocity", format!("{:?}", s.velocity_px_per_s)),
            ("synth.noise_hz", format!("{:?}", s.noise_rate_hz)),
            ("synth.samples", s.samples.to_string()),
            ("io.input", path_str(&self.input)),
            ("io.output", path_str(&self.output)),
        ]
    }

    /// Sets one key without validating cross-field constraints.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "frames.timesteps" => m.timesteps = parse(key, value)?,
            "frames.height" => m.height = parse(key, value)?,
            "frames.width" => m.width = parse(key, value)?,
            "sten.in_channels" => m.encoder.in_channels = parse(key, value)?,
            "sten.stages" => m.encoder.stages = parse(key, value)?,
            "sten.channels" => m.encoder.channels = parse(key, value)?,
            "sten.widths" => {
                let parts: Vec<usize> = value.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                m.encoder.widths = parts
                    .try_into()
                    .map_err(|_| Error::validation(format!("{key}: expected three comma-separated widths")))?;
            }
            "hilif.mu_tau" => m.priors.mu_tau = parse(key, value)?,
            "hilif.sigma_tau" => m.priors.sigma_tau = parse(key, value)?,
            "hilif.mu_vth" => m.priors.mu_vth = parse(key, value)?,
            "hilif.sigma_vth" => m.priors.sigma_vth = parse(key, value)?,
            "hilif.reset" => m.reset_mode = parse::<ResetMode>(key, value)?,
            "hilif.feedback_decay" => self.feedback.decay = parse(key, value)?,
            "hilif.feedback_gain" => self.feedback.gain = parse(key, value)?,
            "hilif.feedback_target" => self.feedback.target_rate = parse(key, value)?,
            "hilif.feedback_init" => self.feedback.ema_activity = parse(key, value)?,
            "surrogate.kind" => m.surrogate = Surrogate::new(value, m.surrogate.width())?,
            "surrogate.width" => m.surrogate = Surrogate::new(m.surrogate.kind(), parse(key, value)?)?,
            "msp.heads" => m.msp_heads = parse(key, value)?,
            "stsg.k_min" => m.k_min = parse(key, value)?,
            "stsg.predictor_hidden" => m.predictor_hidden = parse(key, value)?,
            "stsg.fusion_hidden" => m.fusion_hidden = parse(key, value)?,
            "stsg.n_target" => m.n_target = parse_opt(key, value)?,
            "sc.heads" => m.sc_heads = parse(key, value)?,
            "sc.layers" => m.sc_layers = parse(key, value)?,
            "sc.ffn" => m.sc_ffn = parse(key, value)?,
            "sc.classes" => m.classes = parse(key, value)?,
            "train.task" => t.task = parse::<Task>(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.train_samples" => t.train_samples = parse(key, value)?,
            "train.test_samples" => t.test_samples = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.rho_target" => t.rho_target = parse(key, value)?,
            "train.rho_weight" => t.rho_weight = parse(key, value)?,
            "train.fixed_k" => t.fixed_k = parse_opt(key, value)?,
            "train.ablation" => t.ablation = parse::<CueAblation>(key, value)?,
            "train.feedback" => t.feedback = parse(key, value)?,
            "synth.width" => s.width = parse(key, value)?,
            "synth.height" => s.height = parse(key, value)?,
            "synth.duration_us" => s.duration_us = parse(key, value)?,
            "synth.velocity" => s.velocity_px_per_s = parse(key, value)?,
            "synth.noise_hz" => s.noise_rate_hz = parse(key, value)?,
            "synth.samples" => s.samples = parse(key, value)?,
            "io.input" => self.input = parse_opt(key, value)?,
            "io.output" => self.output = parse_opt(key, value)?,
            _ => return Err(Error::validation(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.feedback.validate()?;
        self.train.validate()?;
        let s = &self.synth;
        if s.width == 0 || s.height == 0 || s.duration_us == 0 {
            return Err(Error::validation("synth geometry and duration must be > 0"));
        }
        if !(s.velocity_px_per_s.is_finite() && s.noise_rate_hz >= 0.0 && s.noise_rate_hz.is_finite()) {
            return Err(Error::validation(
                "synth velocity and noise rate must be finite, noise >= 0",
            ));
        }
        if self.model.classes != self.train.task.classes() {
            return Err(Error::validation(format!(
                "sc.classes = {} but task {} has {} classes",
                self.model.classes,
                self.train.task,
                self.train.task.classes()
            )));
        }
        if let Some(k) = self.train.fixed_k {
            if k == 0 || k > self.model.tokens() {
                return Err(Error::validation(format!(
                    "train.fixed_k = {k} must lie in [1, N = {}]",
                    self.model.tokens()
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::validation(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Validation(m) => Error::validation(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let text =
            std::str::from_utf8(&bytes).map_err(|_| Error::format(format!("{} is not UTF-8", path.display())))?;
        Self::parse(text)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.serialize();
        assert_eq!(PipelineConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn edited_config_round_trips() {
        let text = "# desk run\nseed = 42\nhilif.mu_tau = 2.25\nsten.widths = 4, 2, 2\n\
                    stsg.n_target = 100\nsurrogate.kind = fast-sigmoid\nsurrogate.width = 0.3\n\
                    train.ablation = timing,rate\nio.output = runs/a # trailing comment\n";
        let cfg = PipelineConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.model.priors.mu_tau, 2.25);
        assert_eq!(cfg.model.encoder.widths, [4, 2, 2]);
        assert_eq!(cfg.model.n_target, Some(100));
        assert_eq!(cfg.model.surrogate, Surrogate::FastSigmoid { width: 0.3 });
        assert!(cfg.train.ablation.timing && cfg.train.ablation.rate);
        assert_eq!(cfg.output, Some(PathBuf::from("runs/a")));
        assert_eq!(PipelineConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "hilif.speed = 3\n",
            "seed = -1\n",
            "seed = 1\nseed = 2\n",
            "just words\n",
            "sten.widths = 1,2\n",
            "stsg.k_min = 0\n",
            "stsg.k_min = 65\n",
            "hilif.mu_tau = 0.5\n",
            "msp.heads = 3\n",
            "sc.classes = 3\n",
            "train.fixed_k = 65\n",
            "surrogate.width = 0\n",
        ] {
            let err = PipelineConfig::parse(text).unwrap_err();
            assert!(err.is_validation(), "{text}: {err}");
        }
    }
}
