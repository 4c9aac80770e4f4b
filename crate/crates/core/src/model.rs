//! The full pipeline: frames to logits on one tape.

use crate::autodiff::{SpikeMode, Tape, Var};
use crate::classifier::{
    classify_tape, hard_select_indices, priority_scores_tape, priority_triad, sparse_attention_stack_tape, ScParams,
    ScVars,
};
use crate::cues::{extract_cues, SpikeInfo};
use crate::encoder::{encode_tape, timing_attention_tape, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::gating::{
    gate_tape, k_from_sparsity, patch_group_indices, predict_sparsity_tape, spatial_scores_tape, stack_scores,
    GateParams, GateVars, Mlp, MlpVars, SparsityDecision,
};
use crate::neuron::{NeuronPriors, ResetMode};
use crate::params::{bind, Blocks, Initializer};
use crate::surrogate::Surrogate;
use crate::temporal::{bias_attention_tape, temporal_weights_tape, CueAblation, MspParams, MspVars};
use crate::tensor::SpikeTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub encoder: EncoderConfig,
    pub priors: NeuronPriors,
    pub reset_mode: ResetMode,
    pub surrogate: Surrogate,
    pub msp_heads: usize,
    pub k_min: usize,
    pub predictor_hidden: usize,
    pub fusion_hidden: usize,
    /// Regroup to this many tokens after the temporal attention.
    pub n_target: Option<usize>,
    pub sc_heads: usize,
    pub sc_layers: usize,
    pub sc_ffn: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            timesteps: 8,
            height: 32,
            width: 32,
            encoder: EncoderConfig::default(),
            priors: NeuronPriors::default(),
            reset_mode: ResetMode::Soft,
            surrogate: Surrogate::default(),
            msp_heads: 2,
            k_min: 16,
            predictor_hidden: 16,
            fusion_hidden: 16,
            n_target: None,
            sc_heads: 4,
            sc_layers: 2,
            sc_ffn: 16,
            classes: 2,
        }
    }
}

impl ModelConfig {
    /// Token grid produced by the encoder.
    pub fn grid(&self) -> (usize, usize) {
        self.encoder.token_grid(self.height, self.width)
    }

    /// Tokens entering selection.
    pub fn tokens(&self) -> usize {
        let (r, c) = self.grid();
        self.n_target.unwrap_or(r * c)
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::validation("frames.timesteps must be >= 1"));
        }
        self.encoder.validate(self.height, self.width)?;
        self.priors.validate()?;
        let d = self.feature_dim();
        if self.msp_heads == 0 || !d.is_multiple_of(self.msp_heads) {
            return Err(Error::validation(format!(
                "msp.heads = {} must divide the token width {d}",
                self.msp_heads
            )));
        }
        if self.sc_heads == 0 || !d.is_multiple_of(self.sc_heads) {
            return Err(Error::validation(format!(
                "sc.heads = {} must divide the token width {d}",
                self.sc_heads
            )));
        }
        if self.n_target == Some(0) {
            return Err(Error::validation("stsg.n_target must be >= 1"));
        }
        if self.k_min == 0 || self.k_min > self.tokens() {
            return Err(Error::validation(format!(
                "stsg.k_min = {} must lie in [1, N = {}]",
                self.k_min,
                self.tokens()
            )));
        }
        if self.predictor_hidden == 0 || self.fusion_hidden == 0 || self.sc_ffn == 0 {
            return Err(Error::validation("hidden widths must be >= 1"));
        }
        if self.classes < 2 {
            return Err(Error::validation("sc.classes must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub msp: MspParams,
    pub predictor: Mlp,
    pub fusion: Mlp,
    pub gate: GateParams,
    pub sc: ScParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let d = config.feature_dim();
        let encoder = EncoderParams::init(config.encoder.clone(), config.priors, config.reset_mode, &mut init)?;
        let msp = MspParams::init(d, config.msp_heads, &mut init)?;
        let predictor = Mlp::init("stsg.predictor", 3, config.predictor_hidden, 0.0, &mut init);
        let fusion = Mlp::init("stsg.fusion", 3, config.fusion_hidden, 0.5, &mut init);
        let sc = ScParams::init(
            d,
            config.sc_heads,
            config.sc_layers,
            config.sc_ffn,
            config.classes,
            &mut init,
        )?;
        Ok(Self {
            config,
            encoder,
            msp,
            predictor,
            fusion,
            gate: GateParams::default(),
            sc,
        })
    }

    fn parts(&self) -> [&dyn Blocks; 6] {
        [
            &self.encoder,
            &self.msp,
            &self.predictor,
            &self.fusion,
            &self.gate,
            &self.sc,
        ]
    }

    pub fn vars(&self, vars: &[Var]) -> ModelVars {
        let counts: Vec<usize> = self.parts().iter().map(|p| p.blocks().len()).collect();
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &vars[at..at + n];
            at += n;
            s
        };
        let enc = take(counts[0]);
        let msp = take(counts[1]);
        let pred = take(counts[2]);
        let fus = take(counts[3]);
        let gate = take(counts[4]);
        let sc = take(counts[5]);
        ModelVars {
            encoder: self.encoder.vars(enc),
            msp: self.msp.vars(msp),
            predictor: Mlp::vars(pred),
            fusion: Mlp::vars(fus),
            gate: GateVars {
                enh_raw: gate[0],
                sup_raw: gate[1],
            },
            sc: self.sc.vars(sc),
        }
    }

    /// Re-applies the neuron floors after an update.
    pub fn clamp_constraints(&mut self) {
        for n in self.encoder.neurons_mut() {
            n.clamp_thresholds();
        }
    }
}

impl Blocks for Model {
    fn blocks(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = self.encoder.blocks();
        out.extend(self.msp.blocks());
        out.extend(self.predictor.blocks());
        out.extend(self.fusion.blocks());
        out.extend(self.gate.blocks());
        out.extend(self.sc.blocks());
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = self.encoder.blocks_mut();
        out.extend(self.msp.blocks_mut());
        out.extend(self.predictor.blocks_mut());
        out.extend(self.fusion.blocks_mut());
        out.extend(self.gate.blocks_mut());
        out.extend(self.sc.blocks_mut());
        out
    }
}

pub struct ModelVars {
    pub encoder: EncoderVars,
    pub msp: MspVars,
    pub predictor: MlpVars,
    pub fusion: MlpVars,
    pub gate: GateVars,
    pub sc: ScVars,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub fixed_k: Option<usize>,
    pub ablation: CueAblation,
}

pub struct Forward {
    pub logits: Var,
    pub rho: Var,
    pub decision: SparsityDecision,
    /// Token indices (after any regrouping) that reached the classifier.
    pub selected: Vec<usize>,
    /// Source token on the encoder grid of every regrouped token.
    pub sources: Vec<usize>,
    /// Cues on the encoder grid, after ablation.
    pub cues: SpikeInfo,
    pub layer_rates: Vec<f64>,
    pub msp_probs: Vec<Var>,
    pub sc_probs: Vec<Vec<Var>>,
    pub n: usize,
    pub k: usize,
}

pub fn forward(
    tape: &mut Tape,
    model: &Model,
    v: &ModelVars,
    frames: &SpikeTensor,
    opts: ForwardOptions,
) -> Result<Forward> {
    let cfg = &model.config;
    if frames.timesteps() != cfg.timesteps || frames.height() != cfg.height || frames.width() != cfg.width {
        return Err(Error::validation(format!(
            "frames {:?} do not match the configured ({}, {}, {}, {})",
            frames.shape(),
            cfg.timesteps,
            cfg.encoder.in_channels,
            cfg.height,
            cfg.width
        )));
    }
    let enc = encode_tape(tape, &model.encoder, &v.encoder, frames)?;
    let cues = opts.ablation.apply(&extract_cues(&enc.spikes, (1, 1))?);
    let d = enc.d;

    let (x, _) = timing_attention_tape(tape, enc.features, enc.n, d, &cues, v.encoder.timing);
    tape.set_stage("msp.weights");
    let w = temporal_weights_tape(tape, &cues, &v.msp);
    let (x, msp_probs) = bias_attention_tape(tape, x, enc.n, d, model.msp.heads, &v.msp.attn, w);
    let spatial = spatial_scores_tape(tape, &cues.f_rate, enc.grid)?;

    let (x, w, spatial, group_cues, sources, n) = match cfg.n_target {
        Some(target) if target != enc.n => {
            let idx = patch_group_indices(&cues.f_rate, target)?;
            tape.set_stage("stsg.group");
            let x = tape.gather_rows(x, &idx, d);
            let w = tape.gather(w, &idx);
            let s = tape.gather(spatial, &idx);
            (x, w, s, cues.gather(&idx), idx, target)
        }
        _ => (x, w, spatial, cues.clone(), (0..enc.n).collect(), enc.n),
    };

    let rho = predict_sparsity_tape(tape, &group_cues, &model.predictor, &v.predictor);
    let rho_value = tape.scalar(rho);
    let k = match opts.fixed_k {
        Some(k) if k == 0 || k > n => return Err(Error::validation(format!("fixed K = {k} must lie in [1, N = {n}]"))),
        Some(k) => k,
        None => k_from_sparsity(n, rho_value, cfg.k_min)?,
    };

    tape.set_stage("stsg.fusion");
    let temporal = tape.constant(priority_triad(&group_cues));
    let stacked = stack_scores(tape, spatial, w, temporal, n);
    let combined = model.fusion.forward_tape(tape, &v.fusion, stacked, n);
    let (x, mask) = gate_tape(tape, x, n, d, combined, k, &v.gate);

    let u = priority_scores_tape(tape, &group_cues, &v.sc);
    let selected = hard_select_indices(tape.value(u), k)?;
    tape.set_stage("sc.select");
    let x_sel = tape.gather_rows(x, &selected, d);
    let u_sel = tape.gather(u, &selected);
    let stack = sparse_attention_stack_tape(tape, x_sel, u_sel, k, &model.sc, &v.sc);
    let logits = classify_tape(tape, stack.out, k, &model.sc, &v.sc);

    for (name, var) in [("sc.head", logits), ("stsg.predictor", rho)] {
        if tape.value(var).iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                block: name.into(),
                message: "non-finite forward value".into(),
            });
        }
    }

    let decision = SparsityDecision {
        f_input: crate::gating::sparsity_features(&group_cues),
        rho: rho_value,
        k,
        s_spatial: tape.value(spatial).to_vec(),
        s_msp: tape.value(w).to_vec(),
        s_temporal: tape.value(temporal).to_vec(),
        s_combined: tape.value(combined).to_vec(),
        mask,
    };
    Ok(Forward {
        logits,
        rho,
        decision,
        selected,
        sources,
        cues,
        layer_rates: enc.layer_rates,
        msp_probs,
        sc_probs: stack.probs,
        n,
        k,
    })
}

/// Result of a gradient-free forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub decision: SparsityDecision,
    pub selected: Vec<usize>,
    pub sources: Vec<usize>,
    pub cues: SpikeInfo,
    pub layer_rates: Vec<f64>,
    /// Mean attention mass each encoder-grid token receives, averaged over
    /// heads, layers and queries of both attention stages.
    pub attention_received: Vec<f64>,
    pub macs: Vec<(&'static str, u64)>,
}

pub fn infer(model: &Model, frames: &SpikeTensor, opts: ForwardOptions) -> Result<Inference> {
    let mut tape = Tape::new(SpikeMode {
        surrogate: model.config.surrogate,
        smooth: false,
    });
    let vars = bind(&mut tape, model, false);
    let mv = model.vars(&vars);
    let f = forward(&mut tape, model, &mv, frames, opts)?;
    let logits = tape.value(f.logits).to_vec();
    let predicted = argmax(&logits);

    let grid_n = f.cues.len();
    let mut received = vec![0.0; grid_n];
    let mut maps = 0usize;
    let mut add = |probs: &[f64], n: usize, token_of: &dyn Fn(usize) -> usize| {
        for row in probs.chunks(n) {
            for (j, p) in row.iter().enumerate() {
                received[token_of(j)] += p;
            }
        }
        maps += n;
    };
    for &p in &f.msp_probs {
        add(tape.value(p), grid_n, &|j| j);
    }
    for layer in &f.sc_probs {
        for &p in layer {
            add(tape.value(p), f.k, &|j| f.sources[f.selected[j]]);
        }
    }
    if maps > 0 {
        received.iter_mut().for_each(|r| *r /= maps as f64);
    }

    Ok(Inference {
        logits,
        predicted,
        decision: f.decision,
        selected: f.selected,
        sources: f.sources,
        cues: f.cues,
        layer_rates: f.layer_rates,
        attention_received: received,
        macs: tape.macs().to_vec(),
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{bin_to_frames, synth_moving_bar};

    fn small() -> ModelConfig {
        ModelConfig {
            timesteps: 6,
            height: 16,
            width: 16,
            k_min: 4,
            ..ModelConfig::default()
        }
    }

    fn frames(cfg: &ModelConfig, seed: u64) -> SpikeTensor {
        let s = synth_moving_bar(cfg.width as u16, cfg.height as u16, 4000.0, 60_000, 2000.0, seed).unwrap();
        bin_to_frames(&s, cfg.timesteps, cfg.height, cfg.width).unwrap()
    }

    #[test]
    fn forward_shapes_and_counts() {
        let cfg = small();
        let m = Model::init(cfg.clone(), 1).unwrap();
        let inf = infer(&m, &frames(&cfg, 1), ForwardOptions::default()).unwrap();
        assert_eq!(inf.logits.len(), 2);
        assert_eq!(inf.decision.n(), 16);
        assert!(inf.decision.k >= 4);
        assert_eq!(inf.selected.len(), inf.decision.k);
        assert_eq!(inf.decision.mask.iter().filter(|&&b| b).count(), inf.decision.k);
        let total: f64 = inf.attention_received.iter().sum();
        assert!(total > 0.0);
    }

    #[test]
    fn fixed_k_and_regrouping() {
        let mut cfg = small();
        cfg.n_target = Some(32);
        let m = Model::init(cfg.clone(), 2).unwrap();
        let f = frames(&cfg, 2);
        let inf = infer(
            &m,
            &f,
            ForwardOptions {
                fixed_k: Some(24),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(inf.decision.n(), 32);
        assert_eq!(inf.decision.k, 24);
        assert_eq!(inf.decision.sparsity(), 0.25);
        assert_eq!(inf.sources.len(), 32);
        assert!(infer(
            &m,
            &f,
            ForwardOptions {
                fixed_k: Some(33),
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn deterministic() {
        let cfg = small();
        let m = Model::init(cfg.clone(), 3).unwrap();
        let f = frames(&cfg, 3);
        let a = infer(&m, &f, ForwardOptions::default()).unwrap();
        let b = infer(&m, &f, ForwardOptions::default()).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.decision, b.decision);
        assert_eq!(Model::init(cfg.clone(), 3).unwrap(), m);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small();
        cfg.k_min = 17;
        assert!(Model::init(cfg, 0).is_err());
        let mut cfg = small();
        cfg.sc_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.height = 18;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wrong_frame_shape_rejected() {
        let cfg = small();
        let m = Model::init(cfg, 0).unwrap();
        let f = SpikeTensor::zeros(6, 2, 32, 32).unwrap();
        assert!(infer(&m, &f, ForwardOptions::default()).unwrap_err().is_validation());
    }
}
