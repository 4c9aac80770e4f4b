//! Exponential spike-timing weights and cue-biased token attention.

use crate::attention::{multi_head, AttentionVars, ScoreMods, Stages};
use crate::autodiff::{Tape, Var};
use crate::cues::SpikeInfo;
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::neuron::logistic;
use crate::params::{bind, Blocks, Initializer};

/// Floor inside the log of the key bias.
pub const BIAS_EPS: f64 = 1e-8;

const STAGES: Stages = Stages {
    proj: "msp.proj",
    score_mix: "msp.score_mix",
};

/// Which cues are replaced by their neutral value before any consumer sees
/// them. A neutralized cue is zero for every token: `first = 0` makes the
/// timing factor 1, `interval = 0` makes the interval factor 1 (burstiness
/// goes with it since it is derived from the same intervals) and `rate = 0`
/// makes the rate factor `logistic(0) = 0.5`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CueAblation {
    pub timing: bool,
    pub interval: bool,
    pub rate: bool,
}

impl CueAblation {
    pub const NONE: Self = Self {
        timing: false,
        interval: false,
        rate: false,
    };

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }

    pub fn apply(&self, cues: &SpikeInfo) -> SpikeInfo {
        let mut out = cues.clone();
        if self.timing {
            out.t_first.iter_mut().for_each(|v| *v = 0.0);
        }
        if self.interval {
            out.t_interval.iter_mut().for_each(|v| *v = 0.0);
            out.t_burst.iter_mut().for_each(|v| *v = 0.0);
        }
        if self.rate {
            out.f_rate.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }
}

impl std::str::FromStr for CueAblation {
    type Err = Error;

    /// Comma-separated subset of `timing`, `interval`, `rate`, or `none`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "timing" => out.timing = true,
                "interval" => out.interval = true,
                "rate" => out.rate = true,
                other => return Err(Error::validation(format!("unknown cue ablation `{other}`"))),
            }
        }
        Ok(out)
    }
}

impl std::fmt::Display for CueAblation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = [
            (self.timing, "timing"),
            (self.interval, "interval"),
            (self.rate, "rate"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MspParams {
    /// `alpha = exp(alpha_raw)`.
    pub alpha_raw: Vec<f64>,
    /// `beta = exp(beta_raw)`.
    pub beta_raw: Vec<f64>,
    pub gamma: Vec<f64>,
    pub heads: usize,
    pub d: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
}

impl MspParams {
    pub fn init(d: usize, heads: usize, init: &mut Initializer) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::validation(format!(
                "msp.heads = {heads} must divide the token width {d}"
            )));
        }
        Ok(Self {
            alpha_raw: vec![0.0],
            beta_raw: vec![0.5f64.ln()],
            gamma: vec![1.0],
            heads,
            d,
            wq: init.glorot(d, d),
            wk: init.glorot(d, d),
            wv: init.glorot(d, d),
            wo: init.uniform(d * d, -0.1, 0.1),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_raw[0].exp()
    }

    pub fn beta(&self) -> f64 {
        self.beta_raw[0].exp()
    }

    pub fn vars(&self, vars: &[Var]) -> MspVars {
        MspVars {
            alpha_raw: vars[0],
            beta_raw: vars[1],
            gamma: vars[2],
            attn: AttentionVars {
                wq: vars[3],
                wk: vars[4],
                wv: vars[5],
                wo: vars[6],
            },
        }
    }
}

impl Blocks for MspParams {
    fn blocks(&self) -> Vec<(String, &Vec<f64>)> {
        vec![
            ("msp.alpha_raw".into(), &self.alpha_raw),
            ("msp.beta_raw".into(), &self.beta_raw),
            ("msp.gamma".into(), &self.gamma),
            ("msp.wq".into(), &self.wq),
            ("msp.wk".into(), &self.wk),
            ("msp.wv".into(), &self.wv),
            ("msp.wo".into(), &self.wo),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        vec![
            ("msp.alpha_raw".into(), &mut self.alpha_raw),
            ("msp.beta_raw".into(), &mut self.beta_raw),
            ("msp.gamma".into(), &mut self.gamma),
            ("msp.wq".into(), &mut self.wq),
            ("msp.wk".into(), &mut self.wk),
            ("msp.wv".into(), &mut self.wv),
            ("msp.wo".into(), &mut self.wo),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MspVars {
    pub alpha_raw: Var,
    pub beta_raw: Var,
    pub gamma: Var,
    pub attn: AttentionVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalWeights {
    pub w_timing: Vec<f64>,
    pub w_interval: Vec<f64>,
    pub w_combined: Vec<f64>,
}

pub fn temporal_weights(cues: &SpikeInfo, params: &MspParams) -> TemporalWeights {
    let (a, b, g) = (params.alpha(), params.beta(), params.gamma[0]);
    let w_timing: Vec<f64> = cues.t_first.iter().map(|&t| (-a * t).exp()).collect();
    let w_interval: Vec<f64> = cues.t_interval.iter().map(|&t| (-b * t).exp()).collect();
    let w_combined = (0..cues.len())
        .map(|i| w_timing[i] * w_interval[i] * logistic(g * cues.f_rate[i]))
        .collect();
    TemporalWeights {
        w_timing,
        w_interval,
        w_combined,
    }
}

/// Tape form of [`temporal_weights`]; returns `w_combined`.
pub fn temporal_weights_tape(tape: &mut Tape, cues: &SpikeInfo, vars: &MspVars) -> Var {
    let tf = tape.constant(cues.t_first.clone());
    let ti = tape.constant(cues.t_interval.clone());
    let fr = tape.constant(cues.f_rate.clone());
    let alpha = tape.exp(vars.alpha_raw);
    let beta = tape.exp(vars.beta_raw);
    let a = tape.scalar_mul(tf, alpha);
    let b = tape.scalar_mul(ti, beta);
    let sum = tape.add(a, b);
    let neg = tape.scale(sum, -1.0);
    let decay = tape.exp(neg);
    let gr = tape.scalar_mul(fr, vars.gamma);
    let rate = tape.logistic(gr);
    tape.mul(decay, rate)
}

/// Residual attention over all `n` tokens with key bias `ln(w + eps)`.
/// Returns `(x + attention(x), per-head attention rows)`.
pub fn bias_attention_tape(
    tape: &mut Tape,
    x: Var,
    n: usize,
    d: usize,
    heads: usize,
    attn: &AttentionVars,
    w_combined: Var,
) -> (Var, Vec<Var>) {
    tape.set_stage("msp.bias");
    let shifted = tape.offset(w_combined, BIAS_EPS);
    let bias = tape.ln(shifted);
    let mods = ScoreMods {
        key_bias: Some(bias),
        row_gain: None,
    };
    let a = multi_head(tape, x, n, d, heads, attn, mods, STAGES);
    (tape.add(x, a.out), a.probs)
}

/// Non-differentiable [`bias_attention_tape`] over a token grid.
pub fn bias_attention(
    tokens: &TokenGrid,
    weights: &TemporalWeights,
    params: &MspParams,
) -> Result<(TokenGrid, Vec<Vec<f64>>)> {
    if weights.w_combined.len() != tokens.n {
        return Err(Error::validation(format!(
            "{} temporal weights for {} tokens",
            weights.w_combined.len(),
            tokens.n
        )));
    }
    if tokens.d != params.d {
        return Err(Error::validation(format!(
            "token width {} does not match msp width {}",
            tokens.d, params.d
        )));
    }
    if tokens.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite token features"));
    }
    let mut tape = Tape::default();
    let vars = bind(&mut tape, params, false);
    let mv = params.vars(&vars);
    let x = tape.constant(tokens.features.clone());
    let w = tape.constant(weights.w_combined.clone());
    let (out, probs) = bias_attention_tape(&mut tape, x, tokens.n, tokens.d, params.heads, &mv.attn, w);
    let grid = TokenGrid::new(tokens.n, tokens.d, tape.value(out).to_vec(), tokens.grid)?;
    Ok((grid, probs.iter().map(|&p| tape.value(p).to_vec()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cues(tf: &[f64], ti: &[f64], fr: &[f64]) -> SpikeInfo {
        SpikeInfo {
            timesteps: 10,
            grid: (1, tf.len()),
            t_first: tf.to_vec(),
            t_interval: ti.to_vec(),
            t_burst: vec![0.0; tf.len()],
            f_rate: fr.to_vec(),
        }
    }

    fn params(d: usize, heads: usize) -> MspParams {
        MspParams::init(d, heads, &mut Initializer::new(3)).unwrap()
    }

    #[test]
    fn weight_examples() {
        let mut p = params(2, 1);
        p.alpha_raw = vec![0.0];
        p.beta_raw = vec![0.0];
        p.gamma = vec![0.0];
        let w = temporal_weights(&cues(&[0.0, 2f64.ln()], &[0.0, 1.0], &[0.3, 0.9]), &p);
        assert_eq!(w.w_timing[0], 1.0);
        assert!((w.w_timing[1] - 0.5).abs() < 1e-15);
        for i in 0..2 {
            assert_eq!(w.w_combined[i], 0.5 * w.w_timing[i] * w.w_interval[i]);
        }
        p.alpha_raw = vec![5.0];
        let w = temporal_weights(&cues(&[0.0], &[0.0], &[0.0]), &p);
        assert_eq!(w.w_timing[0], 1.0);
    }

    #[test]
    fn tape_weights_match_plain() {
        let mut p = params(2, 1);
        p.alpha_raw = vec![0.3];
        p.beta_raw = vec![-0.7];
        p.gamma = vec![1.7];
        let c = cues(&[0.1, 0.5, 1.0], &[1.0, 3.0, 10.0], &[0.9, 0.2, 0.0]);
        let plain = temporal_weights(&c, &p);
        let mut t = Tape::default();
        let vars = bind(&mut t, &p, false);
        let w = temporal_weights_tape(&mut t, &c, &p.vars(&vars));
        for (a, b) in t.value(w).iter().zip(&plain.w_combined) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ablation_neutralizes_factors() {
        let p = params(2, 1);
        let c = cues(&[0.4, 0.7], &[2.0, 5.0], &[0.5, 0.1]);
        let w = temporal_weights(
            &CueAblation {
                timing: true,
                ..CueAblation::NONE
            }
            .apply(&c),
            &p,
        );
        assert!(w.w_timing.iter().all(|&v| v == 1.0));
        let w = temporal_weights(
            &CueAblation {
                interval: true,
                ..CueAblation::NONE
            }
            .apply(&c),
            &p,
        );
        assert!(w.w_interval.iter().all(|&v| v == 1.0));
        let all = CueAblation {
            timing: true,
            interval: true,
            rate: true,
        };
        let w = temporal_weights(&all.apply(&c), &p);
        assert!(w.w_combined.iter().all(|&v| v == 0.5));
        assert_eq!(
            "timing, rate".parse::<CueAblation>().unwrap().to_string(),
            "timing,rate"
        );
        assert!("speed".parse::<CueAblation>().is_err());
    }

    fn zero_qk(p: &mut MspParams) {
        p.wq = vec![0.0; p.d * p.d];
        p.wk = vec![0.0; p.d * p.d];
    }

    #[test]
    fn two_token_hand_softmax() {
        let mut p = params(2, 1);
        zero_qk(&mut p);
        let tokens = TokenGrid::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], (1, 2)).unwrap();
        let w = TemporalWeights {
            w_timing: vec![1.0; 2],
            w_interval: vec![1.0; 2],
            w_combined: vec![1.0, (-1.0f64).exp()],
        };
        let (_, probs) = bias_attention(&tokens, &w, &p).unwrap();
        let e = (1.0f64).exp();
        for row in probs[0].chunks(2) {
            assert!((row[0] - e / (e + 1.0)).abs() < 1e-8);
            assert!((row[1] - 1.0 / (e + 1.0)).abs() < 1e-8);
        }
        assert!((probs[0][0] - 0.731).abs() < 5e-4);
    }

    #[test]
    fn vanishing_weight_starves_column() {
        let p = params(4, 2);
        let tokens = TokenGrid::new(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect(), (1, 3)).unwrap();
        let w = TemporalWeights {
            w_timing: vec![1.0; 3],
            w_interval: vec![1.0; 3],
            w_combined: vec![0.8, 0.0, 0.6],
        };
        let (out, probs) = bias_attention(&tokens, &w, &p).unwrap();
        assert_eq!(out.features.len(), 12);
        for head in &probs {
            for row in head.chunks(3) {
                assert!(row[1] < 1e-7);
            }
        }
    }

    #[test]
    fn validation_errors() {
        let p = params(2, 1);
        let tokens = TokenGrid::new(2, 2, vec![0.0; 4], (1, 2)).unwrap();
        let w = TemporalWeights {
            w_timing: vec![1.0; 3],
            w_interval: vec![1.0; 3],
            w_combined: vec![1.0; 3],
        };
        assert!(bias_attention(&tokens, &w, &p).is_err());
        let mut bad = tokens.clone();
        bad.features[0] = f64::NAN;
        let w = TemporalWeights {
            w_timing: vec![1.0; 2],
            w_interval: vec![1.0; 2],
            w_combined: vec![1.0; 2],
        };
        assert!(bias_attention(&bad, &w, &p).is_err());
        assert!(MspParams::init(6, 4, &mut Initializer::new(0)).is_err());
    }

    proptest! {
        #[test]
        fn weights_in_unit_interval_and_monotone(
            tf in proptest::collection::vec(0.0f64..=1.0, 1..12),
            dt in 0.01f64..0.5,
            raw in -2.0f64..2.0,
            g in 0.01f64..3.0,
        ) {
            let n = tf.len();
            let mut p = params(2, 1);
            p.alpha_raw = vec![raw];
            p.gamma = vec![g];
            let ti: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
            let fr: Vec<f64> = (0..n).map(|i| (i as f64 * 0.13) % 1.0).collect();
            let c = cues(&tf, &ti, &fr);
            let w = temporal_weights(&c, &p);
            for i in 0..n {
                prop_assert!(w.w_combined[i] > 0.0 && w.w_combined[i] <= 1.0);
                let recomputed = w.w_timing[i] * w.w_interval[i] * logistic(g * fr[i]);
                prop_assert_eq!(w.w_combined[i], recomputed);
            }
            let mut later = c.clone();
            later.t_first[0] += dt;
            prop_assert!(temporal_weights(&later, &p).w_combined[0] < w.w_combined[0]);
            let mut longer = c.clone();
            longer.t_interval[0] += dt;
            prop_assert!(temporal_weights(&longer, &p).w_combined[0] < w.w_combined[0]);
            let mut faster = c.clone();
            faster.f_rate[0] += dt;
            prop_assert!(temporal_weights(&faster, &p).w_combined[0] > w.w_combined[0]);
        }

        #[test]
        fn weights_permute_with_tokens(
            tf in proptest::collection::vec(0.0f64..=1.0, 2..10),
            seed in 0u64..1000,
        ) {
            let n = tf.len();
            let p = params(2, 1);
            let ti: Vec<f64> = (0..n).map(|i| 1.0 + ((i as u64 * 7 + seed) % 9) as f64).collect();
            let fr: Vec<f64> = (0..n).map(|i| ((i as u64 * 3 + seed) % 10) as f64 / 10.0).collect();
            let c = cues(&tf, &ti, &fr);
            let perm: Vec<usize> = (0..n).rev().collect();
            let w = temporal_weights(&c, &p);
            let wp = temporal_weights(&c.gather(&perm), &p);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(wp.w_combined[k], w.w_combined[i]);
            }
        }

        #[test]
        fn positive_rescale_leaves_attention_unchanged(
            ws in proptest::collection::vec(0.01f64..1.0, 2..8),
            c in 0.05f64..20.0,
        ) {
            let n = ws.len();
            let p = params(4, 2);
            let tokens = TokenGrid::new(n, 4, (0..n * 4).map(|i| (i as f64 * 0.71).cos()).collect(), (1, n)).unwrap();
            let mk = |w: Vec<f64>| TemporalWeights { w_timing: w.clone(), w_interval: w.clone(), w_combined: w };
            let (_, a) = bias_attention(&tokens, &mk(ws.clone()), &p).unwrap();
            let (_, b) = bias_attention(&tokens, &mk(ws.iter().map(|w| w * c).collect()), &p).unwrap();
            for (ha, hb) in a.iter().zip(&b) {
                for (x, y) in ha.iter().zip(hb) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
                for row in ha.chunks(n) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
