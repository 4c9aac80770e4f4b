//! Token scoring, dynamic sparsity and soft gating ahead of the hard cut.
//!
//! Three per-token scores are fused by a small MLP: a center-surround
//! contrast of the firing-rate map, the temporal weight from
//! [`crate::temporal`] and the unit-weight priority triad from
//! [`crate::classifier`]. A predictor maps summary cue statistics to a
//! sparsity fraction `rho`, which fixes `K`. The top-`K` tokens by fused score
//! are amplified and the rest damped; nothing is removed here.

use std::cmp::Ordering;

use crate::autodiff::{softplus, Tape, Var};
use crate::cues::{mean, population_variance, SpikeInfo};
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::neuron::logistic;
use crate::params::{Blocks, Initializer};

/// Side length of the center-surround kernel.
pub const DOG_SIZE: usize = 5;
pub const DOG_SIGMA_CENTER: f64 = 0.8;
pub const DOG_SIGMA_SURROUND: f64 = 1.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// Per-row `in -> hidden -> 1` perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub name: &'static str,
    pub inputs: usize,
    pub hidden: usize,
    pub activation: Activation,
    /// `[inputs, hidden]`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[hidden, 1]`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    pub fn zeros(name: &'static str, inputs: usize, hidden: usize) -> Self {
        Self {
            name,
            inputs,
            hidden,
            activation: Activation::Tanh,
            w1: vec![0.0; inputs * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: vec![0.0],
        }
    }

    /// Random first layer, output layer scaled by `out_scale` (0 gives a
    /// constant map).
    pub fn init(name: &'static str, inputs: usize, hidden: usize, out_scale: f64, init: &mut Initializer) -> Self {
        let mut m = Self::zeros(name, inputs, hidden);
        m.w1 = init.glorot(inputs, hidden);
        if out_scale > 0.0 {
            m.w2 = init.uniform(hidden, -out_scale, out_scale);
        }
        m
    }

    /// Sums its inputs exactly: one identity hidden unit with unit weights.
    pub fn sum(name: &'static str, inputs: usize) -> Self {
        Self {
            name,
            inputs,
            hidden: 1,
            activation: Activation::Identity,
            w1: vec![1.0; inputs],
            b1: vec![0.0],
            w2: vec![1.0],
            b2: vec![0.0],
        }
    }

    pub fn vars(vars: &[Var]) -> MlpVars {
        MlpVars {
            w1: vars[0],
            b1: vars[1],
            w2: vars[2],
            b2: vars[3],
        }
    }

    /// `x` is `[rows, inputs]`; returns `[rows]`.
    pub fn forward_tape(&self, tape: &mut Tape, v: &MlpVars, x: Var, rows: usize) -> Var {
        let h = tape.matmul(x, v.w1, rows, self.inputs, self.hidden);
        let h = tape.add_bias(h, v.b1, rows, self.hidden);
        let h = match self.activation {
            Activation::Tanh => tape.tanh(h),
            Activation::Identity => h,
        };
        let o = tape.matmul(h, v.w2, rows, self.hidden, 1);
        tape.add_bias(o, v.b2, rows, 1)
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.inputs);
        let mut out = self.b2[0];
        for j in 0..self.hidden {
            let mut h = self.b1[j];
            for (i, &xi) in x.iter().enumerate() {
                h += xi * self.w1[i * self.hidden + j];
            }
            if self.activation == Activation::Tanh {
                h = h.tanh();
            }
            out += h * self.w2[j];
        }
        out
    }
}

impl Blocks for Mlp {
    fn blocks(&self) -> Vec<(String, &Vec<f64>)> {
        vec![
            (format!("{}.w1", self.name), &self.w1),
            (format!("{}.b1", self.name), &self.b1),
            (format!("{}.w2", self.name), &self.w2),
            (format!("{}.b2", self.name), &self.b2),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        vec![
            (format!("{}.w1", self.name), &mut self.w1),
            (format!("{}.b1", self.name), &mut self.b1),
            (format!("{}.w2", self.name), &mut self.w2),
            (format!("{}.b2", self.name), &mut self.b2),
        ]
    }
}

/// Enhancement `1 + softplus(raw)` and suppression `logistic(raw)` factors.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub enh_raw: Vec<f64>,
    pub sup_raw: Vec<f64>,
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            enh_raw: vec![crate::autodiff::softplus_inv(0.5)],
            sup_raw: vec![1.0],
        }
    }
}

impl GateParams {
    pub fn factors(&self) -> GateFactors {
        GateFactors {
            g_enh: 1.0 + softplus(self.enh_raw[0]),
            g_sup: logistic(self.sup_raw[0]),
        }
    }
}

impl Blocks for GateParams {
    fn blocks(&self) -> Vec<(String, &Vec<f64>)> {
        vec![
            ("stsg.gate.enh_raw".into(), &self.enh_raw),
            ("stsg.gate.sup_raw".into(), &self.sup_raw),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        vec![
            ("stsg.gate.enh_raw".into(), &mut self.enh_raw),
            ("stsg.gate.sup_raw".into(), &mut self.sup_raw),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateFactors {
    pub g_enh: f64,
    pub g_sup: f64,
}

impl GateFactors {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_enh >= 1.0) || !(0.0..=1.0).contains(&self.g_sup) {
            return Err(Error::validation(format!(
                "gate factors need g_enh >= 1 and g_sup in [0, 1], got {} / {}",
                self.g_enh, self.g_sup
            )));
        }
        Ok(())
    }
}

/// Everything the selection stage decided for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityDecision {
    pub f_input: [f64; 3],
    pub rho: f64,
    pub k: usize,
    pub s_spatial: Vec<f64>,
    pub s_msp: Vec<f64>,
    pub s_temporal: Vec<f64>,
    pub s_combined: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SparsityDecision {
    pub fn n(&self) -> usize {
        self.mask.len()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.k as f64 / self.n() as f64
    }

    /// `index,s_spatial,s_msp,s_temporal,s_combined,selected` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,s_spatial,s_msp,s_temporal,s_combined,selected\n");
        for i in 0..self.n() {
            out.push_str(&format!(
                "{i},{:?},{:?},{:?},{:?},{}\n",
                self.s_spatial[i],
                self.s_msp[i],
                self.s_temporal[i],
                self.s_combined[i],
                u8::from(self.mask[i])
            ));
        }
        out
    }
}

/// `[mean rate, population std of first-spike time, mean interval]`.
pub fn sparsity_features(cues: &SpikeInfo) -> [f64; 3] {
    [
        mean(&cues.f_rate),
        population_variance(&cues.t_first).sqrt(),
        mean(&cues.t_interval),
    ]
}

pub fn predict_sparsity(cues: &SpikeInfo, predictor: &Mlp) -> Result<([f64; 3], f64)> {
    if cues.is_empty() {
        return Err(Error::validation("sparsity prediction needs N >= 1"));
    }
    let f = sparsity_features(cues);
    Ok((f, logistic(predictor.forward(&f))))
}

/// Returns `rho` as a length-1 tape value.
pub fn predict_sparsity_tape(tape: &mut Tape, cues: &SpikeInfo, predictor: &Mlp, v: &MlpVars) -> Var {
    tape.set_stage("stsg.predictor");
    let f = tape.constant(sparsity_features(cues).to_vec());
    let o = predictor.forward_tape(tape, v, f, 1);
    tape.logistic(o)
}

/// `max(k_min, round_half_up(n * (1 - rho)))`, never above `n`.
pub fn k_from_sparsity(n: usize, rho: f64, k_min: usize) -> Result<usize> {
    if k_min == 0 || n < k_min {
        return Err(Error::validation(format!(
            "need N >= K_min >= 1, got N = {n}, K_min = {k_min}"
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::validation(format!("sparsity {rho} outside [0, 1]")));
    }
    let k = (n as f64 * (1.0 - rho) + 0.5).floor() as usize;
    Ok(k.clamp(k_min, n))
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut keep = order[..k.min(scores.len())].to_vec();
    keep.sort_unstable();
    keep
}

/// Same ranking as [`top_k_indices`] but the full order, best first.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

pub fn select_topk(scores: &[f64], rho: f64, k_min: usize) -> Result<(usize, Vec<bool>)> {
    let k = k_from_sparsity(scores.len(), rho, k_min)?;
    Ok((k, mask_from_indices(scores.len(), &top_k_indices(scores, k))))
}

pub fn mask_from_indices(n: usize, keep: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; n];
    for &i in keep {
        mask[i] = true;
    }
    mask
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (DOG_SIZE / 2) as f64;
    let mut k: Vec<f64> = (0..DOG_SIZE * DOG_SIZE)
        .map(|i| {
            let dy = (i / DOG_SIZE) as f64 - r;
            let dx = (i % DOG_SIZE) as f64 - r;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Center minus surround, each lobe normalized to unit sum.
pub fn dog_kernel() -> Vec<f64> {
    gaussian_kernel(DOG_SIGMA_CENTER)
        .iter()
        .zip(gaussian_kernel(DOG_SIGMA_SURROUND))
        .map(|(c, s)| c - s)
        .collect()
}

pub fn spatial_scores_tape(tape: &mut Tape, f_rate: &[f64], grid: (usize, usize)) -> Result<Var> {
    let (rows, cols) = grid;
    if rows * cols != f_rate.len() || f_rate.is_empty() {
        return Err(Error::validation(format!(
            "{} rates do not fill a {rows}x{cols} grid",
            f_rate.len()
        )));
    }
    tape.set_stage("stsg.spatial");
    let x = tape.constant(f_rate.to_vec());
    let k = tape.constant(dog_kernel());
    let pad = DOG_SIZE / 2;
    let (s, _, _) = tape.conv2d(x, k, (1, rows, cols), (1, DOG_SIZE, DOG_SIZE), 1, pad);
    Ok(s)
}

/// Zero-padded 5x5 DoG response of the rate map.
pub fn spatial_scores(f_rate: &[f64], grid: (usize, usize)) -> Result<Vec<f64>> {
    let mut tape = Tape::default();
    let s = spatial_scores_tape(&mut tape, f_rate, grid)?;
    Ok(tape.value(s).to_vec())
}

/// `[n, 3]` rows of `(spatial, msp, temporal)`.
pub fn stack_scores(tape: &mut Tape, spatial: Var, msp: Var, temporal: Var, n: usize) -> Var {
    let cols = tape.concat_cols(&[(spatial, 1), (msp, 1), (temporal, 1)], n);
    debug_assert_eq!(tape.value(cols).len(), n * 3);
    cols
}

pub fn fuse_scores(s_spatial: &[f64], s_msp: &[f64], s_temporal: &[f64], fusion: &Mlp) -> Result<Vec<f64>> {
    let n = s_spatial.len();
    if s_msp.len() != n || s_temporal.len() != n {
        return Err(Error::validation(format!(
            "score lengths differ: {n} / {} / {}",
            s_msp.len(),
            s_temporal.len()
        )));
    }
    Ok((0..n)
        .map(|i| fusion.forward(&[s_spatial[i], s_msp[i], s_temporal[i]]))
        .collect())
}

pub fn gate(f: &TokenGrid, mask: &[bool], factors: GateFactors) -> Result<TokenGrid> {
    if mask.len() != f.n {
        return Err(Error::validation(format!(
            "mask length {} for {} tokens",
            mask.len(),
            f.n
        )));
    }
    let mut out = f.features.clone();
    for (i, row) in out.chunks_mut(f.d).enumerate() {
        let g = if mask[i] { factors.g_enh } else { factors.g_sup };
        row.iter_mut().for_each(|v| *v *= g);
    }
    TokenGrid::new(f.n, f.d, out, f.grid)
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub enh_raw: Var,
    pub sup_raw: Var,
}

/// Scales each row of `x` by `g_sup + m * (g_enh - g_sup)`.
///
/// `m` is the hard top-`k` mask of `scores` in the forward pass. Its backward
/// is the surrogate of `score - threshold`, where the threshold sits halfway
/// between the `k`-th and `(k+1)`-th best scores, so the score MLP receives
/// gradient from how far each token sits from the cut.
pub fn gate_tape(tape: &mut Tape, x: Var, n: usize, d: usize, scores: Var, k: usize, g: &GateVars) -> (Var, Vec<bool>) {
    tape.set_stage("stsg.gate");
    let values = tape.value(scores).to_vec();
    let order = rank_order(&values);
    let mask = mask_from_indices(n, &order[..k]);
    let m = if k >= n {
        tape.constant(vec![1.0; n])
    } else {
        let pair = tape.gather(scores, &[order[k - 1], order[k]]);
        let mid = tape.sum(pair);
        let thr = tape.scale(mid, 0.5);
        let ones = tape.constant(vec![1.0; n]);
        let thr_n = tape.scalar_mul(ones, thr);
        let margin = tape.sub(scores, thr_n);
        let hard = mask.iter().map(|&b| f64::from(u8::from(b))).collect();
        tape.spike_forced(margin, hard)
    };
    let sp = tape.softplus(g.enh_raw);
    let enh = tape.offset(sp, 1.0);
    let sup = tape.logistic(g.sup_raw);
    let span = tape.sub(enh, sup);
    let lift = tape.scalar_mul(m, span);
    let ones = tape.constant(vec![1.0; n]);
    let base = tape.scalar_mul(ones, sup);
    let factor = tape.add(base, lift);
    (tape.row_scale(x, factor, n, d), mask)
}

/// Source index of every output token when regrouping to `n_target`.
///
/// Shrinking keeps the highest-rate tokens (ties to the lower index) in their
/// original order. Growing keeps every original in order, then appends
/// copies one at a time, each going to the token whose rate-proportional
/// quota `n_target * rate / total` is furthest from being met (ties to the
/// higher rate, then lower index). With all rates zero the quotas are equal.
pub fn patch_group_indices(f_rate: &[f64], n_target: usize) -> Result<Vec<usize>> {
    let n = f_rate.len();
    if n_target == 0 || n == 0 {
        return Err(Error::validation("patch grouping needs N >= 1 and N_target >= 1"));
    }
    if n >= n_target {
        return Ok(top_k_indices(f_rate, n_target));
    }
    let total: f64 = f_rate.iter().sum();
    let share: Vec<f64> = if total > 0.0 {
        f_rate.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    let mut copies = vec![1usize; n];
    let mut out: Vec<usize> = (0..n).collect();
    while out.len() < n_target {
        let deficit = |i: usize| n_target as f64 * share[i] - copies[i] as f64;
        let best = (0..n)
            .max_by(|&a, &b| {
                deficit(a)
                    .total_cmp(&deficit(b))
                    .then(f_rate[a].total_cmp(&f_rate[b]))
                    .then(b.cmp(&a))
            })
            .expect("n >= 1");
        copies[best] += 1;
        out.push(best);
    }
    Ok(out)
}

pub fn patch_group(tokens: &TokenGrid, f_rate: &[f64], n_target: usize) -> Result<(TokenGrid, Vec<usize>)> {
    if f_rate.len() != tokens.n {
        return Err(Error::validation(format!(
            "{} rates for {} tokens",
            f_rate.len(),
            tokens.n
        )));
    }
    let idx = patch_group_indices(f_rate, n_target)?;
    let features = idx.iter().flat_map(|&i| tokens.row(i).to_vec()).collect();
    let grid = if idx.len() == tokens.n {
        tokens.grid
    } else {
        (1, idx.len())
    };
    Ok((TokenGrid::new(idx.len(), tokens.d, features, grid)?, idx))
}
