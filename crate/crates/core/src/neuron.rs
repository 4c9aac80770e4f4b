//! Heterogeneous leaky integrate-and-fire layer with per-channel time
//! constants and thresholds, plus the activity-driven threshold controller.
//!
//! The time constant is stored as `w = -ln(tau - 1)`, so
//! `1 / tau = logistic(w)` stays inside `(0, 1)` for every finite `w`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Lower clamp applied to sampled time constants.
pub const TAU_FLOOR: f64 = 1.01;
/// Lower clamp applied to thresholds after sampling and after feedback.
pub const VTH_FLOOR: f64 = 0.01;

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResetMode {
    Hard,
    #[default]
    Soft,
}

impl std::str::FromStr for ResetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(ResetMode::Hard),
            "soft" => Ok(ResetMode::Soft),
            _ => Err(Error::validation(format!("unknown reset mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for ResetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResetMode::Hard => "hard",
            ResetMode::Soft => "soft",
        })
    }
}

/// Normal priors the per-channel parameters are drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronPriors {
    pub mu_tau: f64,
    pub sigma_tau: f64,
    pub mu_vth: f64,
    pub sigma_vth: f64,
}

impl Default for NeuronPriors {
    fn default() -> Self {
        Self {
            mu_tau: 2.0,
            sigma_tau: 0.3,
            mu_vth: 1.0,
            sigma_vth: 0.2,
        }
    }
}

impl NeuronPriors {
    pub const HOMOGENEOUS: NeuronPriors = NeuronPriors {
        mu_tau: 2.0,
        sigma_tau: 0.0,
        mu_vth: 1.0,
        sigma_vth: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_tau > TAU_FLOOR) {
            return Err(Error::validation(format!(
                "mu_tau {} must exceed {TAU_FLOOR}",
                self.mu_tau
            )));
        }
        if !(self.sigma_tau >= 0.0 && self.sigma_vth >= 0.0) {
            return Err(Error::validation("prior standard deviations must be >= 0"));
        }
        if !(self.mu_vth > 0.0) {
            return Err(Error::validation("mu_vth must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronParams {
    /// Reparameterized time constant per channel.
    pub w: Vec<f64>,
    /// Firing threshold per channel.
    pub v_th: Vec<f64>,
    pub priors: NeuronPriors,
    pub reset_mode: ResetMode,
    pub v_reset: f64,
}

impl NeuronParams {
    /// Samples per-channel parameters from the priors.
    pub fn init_heterogeneous(channels: usize, priors: NeuronPriors, reset_mode: ResetMode, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::validation("channel count must be > 0"));
        }
        priors.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau_dist =
            Normal::new(priors.mu_tau, priors.sigma_tau).map_err(|e| Error::validation(format!("tau prior: {e}")))?;
        let vth_dist = Normal::new(priors.mu_vth, priors.sigma_vth)
            .map_err(|e| Error::validation(format!("threshold prior: {e}")))?;
        let mut w = Vec::with_capacity(channels);
        let mut v_th = Vec::with_capacity(channels);
        for _ in 0..channels {
            let tau = tau_dist.sample(&mut rng).max(TAU_FLOOR);
            w.push(-(tau - 1.0).ln());
            v_th.push(vth_dist.sample(&mut rng).max(VTH_FLOOR));
        }
        Ok(Self {
            w,
            v_th,
            priors,
            reset_mode,
            v_reset: 0.0,
        })
    }

    /// Keeps thresholds at or above the floor and `w` in a range where
    /// `logistic(w)` stays strictly inside (0, 1) in `f64`.
    pub fn clamp_thresholds(&mut self) {
        for v in &mut self.v_th {
            *v = v.max(VTH_FLOOR);
        }
        for w in &mut self.w {
            *w = w.clamp(-30.0, 30.0);
        }
    }

    pub fn channels(&self) -> usize {
        self.w.len()
    }

    pub fn tau_inv(&self, c: usize) -> f64 {
        logistic(self.w[c])
    }

    pub fn tau(&self, c: usize) -> f64 {
        1.0 + (-self.w[c]).exp()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.is_empty() || self.w.len() != self.v_th.len() {
            return Err(Error::validation(
                "neuron parameters need matching non-empty w and v_th",
            ));
        }
        if let Some(c) = self.w.iter().position(|w| !w.is_finite()) {
            return Err(Error::validation(format!("w[{c}] is not finite")));
        }
        if let Some(c) = self.v_th.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::validation(format!(
                "v_th[{c}] = {} must be positive",
                self.v_th[c]
            )));
        }
        Ok(())
    }
}

/// Membrane potentials, `(C, H*W)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub channels: usize,
    pub plane: usize,
    pub v: Vec<f64>,
}

impl NeuronState {
    pub fn zeros(channels: usize, plane: usize) -> Self {
        Self {
            channels,
            plane,
            v: vec![0.0; channels * plane],
        }
    }
}

/// Advances the layer by one timestep and returns the binary spikes.
///
/// Charge is `v += (x - v) * logistic(w)`; a neuron fires when `v >= v_th`.
pub fn step(state: &mut NeuronState, input: &[f64], params: &NeuronParams) -> Result<Vec<u8>> {
    if params.channels() != state.channels || params.v_th.len() != state.channels {
        return Err(Error::validation(format!(
            "state has {} channels, parameters have {}",
            state.channels,
            params.channels()
        )));
    }
    if input.len() != state.v.len() {
        return Err(Error::validation(format!(
            "input length {} does not match state length {}",
            input.len(),
            state.v.len()
        )));
    }
    let mut spikes = vec![0u8; input.len()];
    for c in 0..state.channels {
        let k = params.tau_inv(c);
        let th = params.v_th[c];
        let range = c * state.plane..(c + 1) * state.plane;
        for i in range {
            let v = state.v[i] + (input[i] - state.v[i]) * k;
            let fired = v >= th;
            spikes[i] = u8::from(fired);
            state.v[i] = match (fired, params.reset_mode) {
                (false, _) => v,
                (true, ResetMode::Hard) => params.v_reset,
                (true, ResetMode::Soft) => v - th,
            };
            if !state.v[i].is_finite() {
                return Err(Error::Numeric {
                    block: "neuron.v".into(),
                    message: format!("membrane potential at {i} became {}", state.v[i]),
                });
            }
        }
    }
    Ok(spikes)
}

/// Output of [`run_sequence`]: spikes and membrane after each step (after reset).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceOutput {
    pub spikes: Vec<Vec<u8>>,
    pub trace: Vec<Vec<f64>>,
}

/// Runs `inputs` (one `(C, plane)` frame per timestep) from `v = 0`.
pub fn run_sequence(inputs: &[Vec<f64>], plane: usize, params: &NeuronParams) -> Result<SequenceOutput> {
    if inputs.is_empty() {
        return Err(Error::validation("sequence needs T >= 1"));
    }
    let mut state = NeuronState::zeros(params.channels(), plane);
    let mut out = SequenceOutput {
        spikes: Vec::with_capacity(inputs.len()),
        trace: Vec::with_capacity(inputs.len()),
    };
    for x in inputs {
        out.spikes.push(step(&mut state, x, params)?);
        out.trace.push(state.v.clone());
    }
    Ok(out)
}

/// Exponential moving average of firing activity that rescales thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedbackState {
    pub ema_activity: f64,
    pub decay: f64,
    pub gain: f64,
    pub target_rate: f64,
}

impl Default for FeedbackState {
    fn default() -> Self {
        Self {
            ema_activity: 0.2,
            decay: 0.9,
            gain: 0.05,
            target_rate: 0.2,
        }
    }
}

impl FeedbackState {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::validation("feedback decay must lie in (0, 1)"));
        }
        if !(self.gain >= 0.0) {
            return Err(Error::validation("feedback gain must be >= 0"));
        }
        if !(self.target_rate > 0.0 && self.target_rate < 1.0) {
            return Err(Error::validation("target rate must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.ema_activity) {
            return Err(Error::validation("ema activity must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Updates the activity average and scales every threshold by the shared
/// factor `1 + gain * (ema - target)`, floored at [`VTH_FLOOR`].
pub fn feedback_adjust(params: &mut NeuronParams, observed_rate: f64, fb: &mut FeedbackState) {
    let observed = observed_rate.clamp(0.0, 1.0);
    fb.ema_activity = (fb.decay * fb.ema_activity + (1.0 - fb.decay) * observed).clamp(0.0, 1.0);
    let factor = 1.0 + fb.gain * (fb.ema_activity - fb.target_rate);
    if fb.gain != 0.0 {
        for v in &mut params.v_th {
            *v = (*v * factor).max(VTH_FLOOR);
        }
    }
}


/// Tape-side handles of a layer's trainable blocks.
#[derive(Clone, Copy, Debug)]
pub struct NeuronVars {
    pub w: Var,
    pub v_th: Var,
}

/// One layer unrolled on a [`Tape`]; the same charge/fire/reset rule as
/// [`step`], differentiable through the surrogate.
pub struct TapeNeuron {
    tau_inv: Var,
    v_th: Var,
    neg_vth: Var,
    channels: usize,
    plane: usize,
    reset_mode: ResetMode,
    v_reset: f64,
}

impl TapeNeuron {
    pub fn new(tape: &mut Tape, vars: NeuronVars, params: &NeuronParams, plane: usize) -> Self {
        let tau_inv = tape.logistic(vars.w);
        let neg_vth = tape.scale(vars.v_th, -1.0);
        Self {
            tau_inv,
            v_th: vars.v_th,
            neg_vth,
            channels: params.channels(),
            plane,
            reset_mode: params.reset_mode,
            v_reset: params.v_reset,
        }
    }

    pub fn initial_state(&self, tape: &mut Tape) -> Var {
        tape.constant(vec![0.0; self.channels * self.plane])
    }

    /// Returns `(spikes, new membrane, hard spike bits)`. The hard bits are
    /// the Heaviside pattern even when the tape runs the smoothed forward.
    pub fn step(&self, tape: &mut Tape, v: Var, x: Var) -> (Var, Var, Vec<bool>) {
        let (c, p) = (self.channels, self.plane);
        let diff = tape.sub(x, v);
        let charge = tape.row_scale(diff, self.tau_inv, c, p);
        let charged = tape.add(v, charge);
        let offset = tape.add_per_row(charged, self.neg_vth, c, p);
        let hard: Vec<bool> = tape.value(offset).iter().map(|&o| o >= 0.0).collect();
        let s = tape.spike(offset);
        let next = match self.reset_mode {
            ResetMode::Soft => {
                let sub = tape.row_scale(s, self.v_th, c, p);
                tape.sub(charged, sub)
            }
            ResetMode::Hard => {
                let keep = tape.mul(charged, s);
                let dropped = tape.sub(charged, keep);
                if self.v_reset == 0.0 {
                    dropped
                } else {
                    let r = tape.scale(s, self.v_reset);
                    tape.add(dropped, r)
                }
            }
        };
        (s, next, hard)
    }
}
