//! Spatio-temporal spike encoder.
//!
//! Binary frames pass through `stages` stride-2 downsampling blocks
//! (2x2 cross-correlation followed by a heterogeneous LIF layer). The last
//! block's spikes feed three parallel branches:
//!
//! * pointwise: 1x1 channel mixing,
//! * conv: 3x3 cross-correlation followed by another LIF layer,
//! * pool: 1x1 mixing, global average pool, broadcast back to every cell.
//!
//! Branch outputs are stacked on the feature axis and averaged over time into
//! an `N x D` token grid, one token per cell of the downsampled grid.

use crate::autodiff::{Tape, Var};
use crate::cues::SpikeInfo;
use crate::error::{Error, Result};
use crate::neuron::{NeuronParams, NeuronPriors, NeuronVars, ResetMode, TapeNeuron};
use crate::params::{bind, Blocks, Initializer};
use crate::tensor::SpikeTensor;

/// Real-valued token features, row-major `[n, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub n: usize,
    pub d: usize,
    pub features: Vec<f64>,
    /// Spatial layout `(rows, cols)` of the tokens before any regrouping.
    pub grid: (usize, usize),
}

impl TokenGrid {
    pub fn new(n: usize, d: usize, features: Vec<f64>, grid: (usize, usize)) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::validation("token grid needs N >= 1 and D >= 1"));
        }
        if features.len() != n * d {
            return Err(Error::validation(format!(
                "token grid {n}x{d} given {} values",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("token features must be finite"));
        }
        Ok(Self { n, d, features, grid })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stages: usize,
    pub channels: usize,
    /// Feature widths of the pointwise, conv and pool branches.
    pub widths: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            stages: 2,
            channels: 4,
            widths: [2, 4, 2],
        }
    }
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        self.widths.iter().sum()
    }

    /// Channels seen by the branches.
    pub fn branch_channels(&self) -> usize {
        if self.stages == 0 {
            self.in_channels
        } else {
            self.channels
        }
    }

    pub fn token_grid(&self, height: usize, width: usize) -> (usize, usize) {
        (height >> self.stages, width >> self.stages)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.in_channels == 0 || (self.stages > 0 && self.channels == 0) {
            return Err(Error::validation("encoder channel counts must be > 0"));
        }
        if self.widths.contains(&0) {
            return Err(Error::validation("every branch width must be > 0"));
        }
        let div = 1usize << self.stages;
        if height == 0 || width == 0 || !height.is_multiple_of(div) || !width.is_multiple_of(div) {
            return Err(Error::validation(format!(
                "frame {height}x{width} is not divisible by 2^{} downsampling",
                self.stages
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownStage {
    /// `[c_out, c_in, 2, 2]`.
    pub kernel: Vec<f64>,
    pub neuron: NeuronParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub down: Vec<DownStage>,
    /// `[d_pointwise, c]`.
    pub pointwise: Vec<f64>,
    /// `[d_conv, c, 3, 3]`.
    pub conv: Vec<f64>,
    pub conv_neuron: NeuronParams,
    /// `[d_pool, c]`.
    pub pool: Vec<f64>,
    /// Weights of the timing gate over `(rate, 1 - first, burst)`.
    pub timing: Vec<f64>,
}

impl EncoderParams {
    pub fn init(
        config: EncoderConfig,
        priors: NeuronPriors,
        reset_mode: ResetMode,
        init: &mut Initializer,
    ) -> Result<Self> {
        let mut down = Vec::with_capacity(config.stages);
        let mut cin = config.in_channels;
        for _ in 0..config.stages {
            let cout = config.channels;
            down.push(DownStage {
                kernel: init.uniform(cout * cin * 4, 0.3, 0.9),
                neuron: NeuronParams::init_heterogeneous(cout, priors, reset_mode, init.next_seed())?,
            });
            cin = cout;
        }
        let c = config.branch_channels();
        let [d1, d2, d3] = config.widths;
        Ok(Self {
            pointwise: init.uniform(d1 * c, 0.0, 2.0 / c as f64),
            conv: init.uniform(d2 * c * 9, -0.1, 0.5),
            conv_neuron: NeuronParams::init_heterogeneous(d2, priors, reset_mode, init.next_seed())?,
            pool: init.uniform(d3 * c, 0.0, 2.0 / c as f64),
            timing: init.uniform(3, -0.5, 0.5),
            down,
            config,
        })
    }

    pub fn neurons(&self) -> impl Iterator<Item = &NeuronParams> {
        self.down
            .iter()
            .map(|s| &s.neuron)
            .chain(std::iter::once(&self.conv_neuron))
    }

    pub fn neurons_mut(&mut self) -> impl Iterator<Item = &mut NeuronParams> {
        self.down
            .iter_mut()
            .map(|s| &mut s.neuron)
            .chain(std::iter::once(&mut self.conv_neuron))
    }

    /// Neuron layer prefixes in [`EncoderParams::neurons`] order.
    pub fn neuron_prefixes(&self) -> Vec<String> {
        (0..self.down.len())
            .map(|i| format!("sten.down{i}"))
            .chain(std::iter::once("sten.conv".to_string()))
            .collect()
    }

    /// Splits block handles produced by [`bind`] in [`Blocks`] order.
    pub fn vars(&self, vars: &[Var]) -> EncoderVars {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("encoder block count");
        let down = (0..self.down.len())
            .map(|_| {
                let k = next();
                let w = next();
                let v_th = next();
                (k, NeuronVars { w, v_th })
            })
            .collect();
        let pointwise = next();
        let conv = next();
        let conv_neuron = NeuronVars {
            w: next(),
            v_th: next(),
        };
        EncoderVars {
            down,
            pointwise,
            conv,
            conv_neuron,
            pool: next(),
            timing: next(),
        }
    }
}

impl Blocks for EncoderParams {
    fn blocks(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (i, s) in self.down.iter().enumerate() {
            out.push((format!("sten.down{i}.kernel"), &s.kernel));
            out.push((format!("sten.down{i}.hilif.w"), &s.neuron.w));
            out.push((format!("sten.down{i}.hilif.vth"), &s.neuron.v_th));
        }
        out.push(("sten.pointwise".into(), &self.pointwise));
        out.push(("sten.conv".into(), &self.conv));
        out.push(("sten.conv.hilif.w".into(), &self.conv_neuron.w));
        out.push(("sten.conv.hilif.vth".into(), &self.conv_neuron.v_th));
        out.push(("sten.pool".into(), &self.pool));
        out.push(("sten.timing".into(), &self.timing));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, s) in self.down.iter_mut().enumerate() {
            out.push((format!("sten.down{i}.kernel"), &mut s.kernel));
            out.push((format!("sten.down{i}.hilif.w"), &mut s.neuron.w));
            out.push((format!("sten.down{i}.hilif.vth"), &mut s.neuron.v_th));
        }
        out.push(("sten.pointwise".into(), &mut self.pointwise));
        out.push(("sten.conv".into(), &mut self.conv));
        out.push(("sten.conv.hilif.w".into(), &mut self.conv_neuron.w));
        out.push(("sten.conv.hilif.vth".into(), &mut self.conv_neuron.v_th));
        out.push(("sten.pool".into(), &mut self.pool));
        out.push(("sten.timing".into(), &mut self.timing));
        out
    }
}

pub struct EncoderVars {
    pub down: Vec<(Var, NeuronVars)>,
    pub pointwise: Var,
    pub conv: Var,
    pub conv_neuron: NeuronVars,
    pub pool: Var,
    pub timing: Var,
}

pub struct Encoded {
    /// `[n, d]` time-averaged branch features.
    pub features: Var,
    pub n: usize,
    pub d: usize,
    pub grid: (usize, usize),
    /// Hard spikes of the last downsampling stage, `(T, C, rows, cols)`.
    pub spikes: SpikeTensor,
    /// Mean firing rate of every LIF layer, in [`EncoderParams::neurons`] order.
    pub layer_rates: Vec<f64>,
}

pub fn encode_tape(
    tape: &mut Tape,
    params: &EncoderParams,
    vars: &EncoderVars,
    frames: &SpikeTensor,
) -> Result<Encoded> {
    let cfg = &params.config;
    let [t_steps, cin, h, w] = frames.shape();
    if cin != cfg.in_channels {
        return Err(Error::validation(format!(
            "encoder expects {} input channels, got {cin}",
            cfg.in_channels
        )));
    }
    cfg.validate(h, w)?;
    let (rows, cols) = cfg.token_grid(h, w);
    let plane = rows * cols;
    let c = cfg.branch_channels();
    let [d1, d2, d3] = cfg.widths;
    let d = d1 + d2 + d3;

    let mut layers = Vec::new();
    let (mut sh, mut sw) = (h, w);
    for (stage, (_, nv)) in params.down.iter().zip(&vars.down) {
        sh /= 2;
        sw /= 2;
        layers.push(TapeNeuron::new(tape, *nv, &stage.neuron, sh * sw));
    }
    let conv_layer = TapeNeuron::new(tape, vars.conv_neuron, &params.conv_neuron, plane);
    let mut states: Vec<Var> = layers.iter().map(|l| l.initial_state(tape)).collect();
    let mut conv_state = conv_layer.initial_state(tape);

    let mut fired = vec![0usize; layers.len() + 1];
    let mut totals = vec![0usize; layers.len() + 1];
    let mut last_spikes = vec![0.0; t_steps * c * plane];
    let mut acc: Option<Var> = None;

    for t in 0..t_steps {
        tape.set_stage("sten.down");
        let mut x = tape.constant(frames.frame(t).iter().map(|&b| f64::from(b)).collect());
        let (mut ch, mut xh, mut xw) = (cin, h, w);
        let mut hard_last: Option<Vec<bool>> = None;
        for (i, layer) in layers.iter().enumerate() {
            let cout = cfg.channels;
            let (cur, ho, wo) = tape.conv2d(x, vars.down[i].0, (ch, xh, xw), (cout, 2, 2), 2, 0);
            let (s, v, hard) = layer.step(tape, states[i], cur);
            states[i] = v;
            fired[i] += hard.iter().filter(|&&b| b).count();
            totals[i] += hard.len();
            hard_last = Some(hard);
            x = s;
            (ch, xh, xw) = (cout, ho, wo);
        }
        let hard = hard_last.unwrap_or_else(|| frames.frame(t).iter().map(|&b| b != 0).collect());
        for (dst, b) in last_spikes[t * c * plane..(t + 1) * c * plane].iter_mut().zip(hard) {
            *dst = f64::from(u8::from(b));
        }

        tape.set_stage("sten.pointwise");
        let a = tape.matmul(vars.pointwise, x, d1, c, plane);
        tape.set_stage("sten.conv");
        let (cur, _, _) = tape.conv2d(x, vars.conv, (c, rows, cols), (d2, 3, 3), 1, 1);
        let (b, v, hard) = conv_layer.step(tape, conv_state, cur);
        conv_state = v;
        let last = fired.len() - 1;
        fired[last] += hard.iter().filter(|&&s| s).count();
        totals[last] += hard.len();
        tape.set_stage("sten.pool");
        let mixed = tape.matmul(vars.pool, x, d3, c, plane);
        let pooled = tape.mean_cols(mixed, d3, plane);
        let g = tape.broadcast_cols(pooled, d3, plane);
        let stacked = tape.concat(&[a, b, g]);
        acc = Some(match acc {
            None => stacked,
            Some(prev) => tape.add(prev, stacked),
        });
    }
    let mean = tape.scale(acc.expect("T >= 1"), 1.0 / t_steps as f64);
    let features = tape.transpose(mean, d, plane);
    let layer_rates = fired
        .iter()
        .zip(&totals)
        .map(|(&f, &n)| if n == 0 { 0.0 } else { f as f64 / n as f64 })
        .collect();
    Ok(Encoded {
        features,
        n: plane,
        d,
        grid: (rows, cols),
        spikes: SpikeTensor::from_f64([t_steps, c, rows, cols], &last_spikes)?,
        layer_rates,
    })
}

/// Runs the encoder without gradients.
pub fn encode_multiscale(frames: &SpikeTensor, params: &EncoderParams) -> Result<(TokenGrid, SpikeTensor)> {
    let mut tape = Tape::default();
    let vars = bind(&mut tape, params, false);
    let ev = params.vars(&vars);
    let enc = encode_tape(&mut tape, params, &ev, frames)?;
    let grid = TokenGrid::new(enc.n, enc.d, tape.value(enc.features).to_vec(), enc.grid)?;
    Ok((grid, enc.spikes))
}

/// `[n, 3]` gate inputs `(rate, 1 - first, burst)`.
pub fn timing_inputs(cues: &SpikeInfo) -> Vec<f64> {
    (0..cues.len())
        .flat_map(|i| [cues.f_rate[i], 1.0 - cues.t_first[i], cues.t_burst[i]])
        .collect()
}

/// Scales token rows by `logistic(theta . (rate, 1 - first, burst))`.
pub fn timing_attention_tape(
    tape: &mut Tape,
    features: Var,
    n: usize,
    d: usize,
    cues: &SpikeInfo,
    theta: Var,
) -> (Var, Var) {
    tape.set_stage("sten.timing_gate");
    let inputs = tape.constant(timing_inputs(cues));
    let logits = tape.matmul(inputs, theta, n, 3, 1);
    let gate = tape.logistic(logits);
    (tape.row_scale(features, gate, n, d), gate)
}

pub fn timing_attention(features: &TokenGrid, cues: &SpikeInfo, theta: [f64; 3]) -> Result<TokenGrid> {
    if cues.len() != features.n {
        return Err(Error::validation(format!(
            "{} cue rows for {} tokens",
            cues.len(),
            features.n
        )));
    }
    let mut tape = Tape::default();
    let f = tape.constant(features.features.clone());
    let th = tape.constant(theta.to_vec());
    let (out, _) = timing_attention_tape(&mut tape, f, features.n, features.d, cues, th);
    TokenGrid::new(features.n, features.d, tape.value(out).to_vec(), features.grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::logistic;

    fn params(stages: usize, in_channels: usize, widths: [usize; 3]) -> EncoderParams {
        let cfg = EncoderConfig {
            in_channels,
            stages,
            channels: 3,
            widths,
        };
        EncoderParams::init(cfg, NeuronPriors::default(), ResetMode::Soft, &mut Initializer::new(7)).unwrap()
    }

    #[test]
    fn silent_input_and_zero_bias_give_zero_features() {
        let p = params(2, 2, [2, 4, 2]);
        let frames = SpikeTensor::zeros(5, 2, 8, 8).unwrap();
        let (g, spikes) = encode_multiscale(&frames, &p).unwrap();
        assert_eq!((g.n, g.d, g.grid), (4, 8, (2, 2)));
        assert!(g.features.iter().all(|&v| v == 0.0));
        assert_eq!(spikes.count_ones(), 0);
    }

    #[test]
    fn identity_pointwise_branch_is_time_mean() {
        let mut p = params(0, 1, [1, 1, 1]);
        p.pointwise = vec![1.0];
        p.conv = vec![0.0; 9];
        p.pool = vec![0.0];
        let mut frames = SpikeTensor::zeros(4, 1, 2, 2).unwrap();
        frames.set(0, 0, 0, 0, true);
        frames.set(1, 0, 0, 0, true);
        frames.set(3, 0, 1, 1, true);
        let (g, _) = encode_multiscale(&frames, &p).unwrap();
        let col0: Vec<f64> = (0..4).map(|i| g.row(i)[0]).collect();
        assert_eq!(col0, vec![0.5, 0.0, 0.0, 0.25]);
        assert!((0..4).all(|i| g.row(i)[1] == 0.0 && g.row(i)[2] == 0.0));
    }

    #[test]
    fn pool_branch_of_constant_input_is_constant() {
        let mut p = params(0, 1, [1, 1, 1]);
        p.pointwise = vec![0.0];
        p.conv = vec![0.0; 9];
        p.pool = vec![1.0];
        let mut frames = SpikeTensor::zeros(3, 1, 4, 4).unwrap();
        for t in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    frames.set(t, 0, y, x, true);
                }
            }
        }
        let (g, _) = encode_multiscale(&frames, &p).unwrap();
        assert!((0..16).all(|i| g.row(i)[2] == 1.0));
    }

    #[test]
    fn output_width_is_branch_sum() {
        for widths in [[1, 1, 1], [2, 4, 2], [3, 1, 5]] {
            let p = params(1, 2, widths);
            let frames = SpikeTensor::zeros(2, 2, 4, 8).unwrap();
            let (g, _) = encode_multiscale(&frames, &p).unwrap();
            assert_eq!(g.d, widths.iter().sum::<usize>());
            assert_eq!(g.n, 2 * 4);
        }
    }

    #[test]
    fn bad_geometry_rejected() {
        let p = params(2, 2, [2, 4, 2]);
        let frames = SpikeTensor::zeros(2, 2, 6, 8).unwrap();
        assert!(encode_multiscale(&frames, &p).is_err());
        let frames = SpikeTensor::zeros(2, 1, 8, 8).unwrap();
        assert!(encode_multiscale(&frames, &p).is_err());
    }

    #[test]
    fn dense_input_drives_spikes() {
        let p = params(2, 2, [2, 4, 2]);
        let mut frames = SpikeTensor::zeros(4, 2, 8, 8).unwrap();
        for t in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    frames.set(t, 1, y, x, true);
                }
            }
        }
        let (_, spikes) = encode_multiscale(&frames, &p).unwrap();
        assert!(spikes.count_ones() > 0);
    }

    fn cues(rates: &[f64]) -> SpikeInfo {
        SpikeInfo {
            timesteps: 10,
            grid: (1, rates.len()),
            t_first: vec![0.3; rates.len()],
            t_interval: vec![2.0; rates.len()],
            t_burst: vec![0.5; rates.len()],
            f_rate: rates.to_vec(),
        }
    }

    #[test]
    fn timing_gate_zero_theta_halves() {
        let f = TokenGrid::new(2, 2, vec![1.0, -2.0, 4.0, 0.5], (1, 2)).unwrap();
        let g = timing_attention(&f, &cues(&[0.9, 0.1]), [0.0; 3]).unwrap();
        assert_eq!(g.features, vec![0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn timing_gate_monotone_in_rate() {
        let f = TokenGrid::new(2, 1, vec![1.0, 1.0], (1, 2)).unwrap();
        let g = timing_attention(&f, &cues(&[0.9, 0.1]), [2.0, 0.5, 0.5]).unwrap();
        assert!(g.features[0] > g.features[1]);
    }

    #[test]
    fn timing_gate_scalar_value() {
        let mut c = cues(&[0.3]);
        c.t_first = vec![1.0];
        c.t_burst = vec![0.0];
        let f = TokenGrid::new(1, 1, vec![1.0], (1, 1)).unwrap();
        let g = timing_attention(&f, &c, [1.0, 0.0, 0.0]).unwrap();
        assert!((g.features[0] - 0.574_442_516_811_659_9).abs() < 1e-12);
        assert_eq!(g.features[0], logistic(0.3));
    }
}
