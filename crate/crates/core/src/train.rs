//! Surrogate-gradient training on synthetic temporal tasks.
//!
//! Each sample gets its own tape. Batches fan out over rayon and the
//! per-sample gradients are summed in sample order, so results do not depend
//! on the thread count. Threshold feedback runs between epochs only.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{SpikeMode, Tape, Var};
use crate::error::{Error, Result};
use crate::events::{bin_to_frames, synth_pattern, PatternSpec};
use crate::model::{argmax, forward, ForwardOptions, Model};
use crate::neuron::{feedback_adjust, FeedbackState};
use crate::params::{bind, Blocks};
use crate::temporal::CueAblation;
use crate::tensor::SpikeTensor;

/// Synthetic two-class problems, each separable by one cue family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Task {
    /// Same stimulus early (bins 1, 2) or late (bins 5, 6) in the window.
    #[default]
    EarlyLate,
    /// Three pulses back to back (bins 1, 2, 3) or spread (bins 1, 4, 7).
    BurstRegular,
    /// Four pulses at half pixel density or two at full density, so the
    /// expected event count matches.
    DenseSparse,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::EarlyLate, Task::BurstRegular, Task::DenseSparse];

    pub fn classes(&self) -> usize {
        2
    }

    /// `(fractional bin positions, pixel fraction)` of each class, on an
    /// 8-bin reference timeline.
    fn class_pattern(&self, label: usize) -> (&'static [usize], f64) {
        match (self, label) {
            (Task::EarlyLate, 0) => (&[1, 2], 0.5),
            (Task::EarlyLate, _) => (&[5, 6], 0.5),
            (Task::BurstRegular, 0) => (&[1, 2, 3], 0.5),
            (Task::BurstRegular, _) => (&[1, 4, 7], 0.5),
            (Task::DenseSparse, 0) => (&[1, 3, 5, 7], 0.5),
            (Task::DenseSparse, _) => (&[1, 3], 1.0),
        }
    }

    /// The cue whose removal should hurt this task.
    pub fn key_ablation(&self) -> CueAblation {
        let mut a = CueAblation::NONE;
        match self {
            Task::EarlyLate => a.timing = true,
            Task::BurstRegular => a.interval = true,
            Task::DenseSparse => a.rate = true,
        }
        a
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::EarlyLate => "early-vs-late",
            Task::BurstRegular => "burst-vs-regular",
            Task::DenseSparse => "dense-vs-sparse",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early-vs-late" => Ok(Task::EarlyLate),
            "burst-vs-regular" => Ok(Task::BurstRegular),
            "dense-vs-sparse" => Ok(Task::DenseSparse),
            _ => Err(Error::validation(format!("unknown task `{s}`"))),
        }
    }
}

/// Microseconds per reference bin of the synthetic recordings.
pub const BIN_US: u32 = 1000;
const TASK_NOISE_HZ: f64 = 5.0;

/// Event stream of one labelled sample. The stimulus is a rectangle of
/// random size and position; `timesteps` must be a multiple of 8 or equal
/// to 8 for the class timelines to align with frame bins.
pub fn task_events(
    task: Task,
    label: usize,
    width: u16,
    height: u16,
    timesteps: usize,
    seed: u64,
) -> Result<crate::events::EventStream> {
    if label >= task.classes() {
        return Err(Error::validation(format!("label {label} out of range for {task}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rw = (width * 3 / 8).max(1);
    let rh = (height * 3 / 8).max(1);
    let x0 = rng.random_range(0..=width - rw);
    let y0 = rng.random_range(0..=height - rh);
    let (bins8, fraction) = task.class_pattern(label);
    let scale = timesteps.div_ceil(8).max(1);
    let pattern = PatternSpec {
        width,
        height,
        bins: 8 * scale,
        duration_us: 8 * scale as u32 * BIN_US,
        rect: (x0, y0, rw, rh),
        active_bins: bins8.iter().map(|b| b * scale).collect(),
        pixel_fraction: fraction,
        noise_rate_hz: TASK_NOISE_HZ,
    };
    synth_pattern(&pattern, rng.random())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frames: Vec<SpikeTensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Balanced, alternating labels; sample `i` depends only on `(seed, i)`.
    pub fn generate(task: Task, samples: usize, model: &crate::model::ModelConfig, seed: u64) -> Result<Self> {
        let (w, h) = (model.width as u16, model.height as u16);
        let items: Vec<(SpikeTensor, usize)> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let label = i % task.classes();
                let s = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let ev = task_events(task, label, w, h, model.timesteps, s)?;
                Ok((bin_to_frames(&ev, model.timesteps, model.height, model.width)?, label))
            })
            .collect::<Result<_>>()?;
        let (frames, labels) = items.into_iter().unzip();
        Ok(Self { frames, labels })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub rho_target: f64,
    pub rho_weight: f64,
    pub fixed_k: Option<usize>,
    pub ablation: CueAblation,
    /// Run the threshold feedback controller between epochs.
    pub feedback: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::EarlyLate,
            epochs: 10,
            batch_size: 16,
            train_samples: 128,
            test_samples: 64,
            lr: 1e-2,
            weight_decay: 1e-4,
            rho_target: 0.654,
            rho_weight: 1.0,
            fixed_k: None,
            ablation: CueAblation::NONE,
            feedback: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.train_samples == 0 {
            return Err(Error::validation(
                "train.epochs, batch_size and train_samples must be >= 1",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::validation("train.lr must be > 0 and weight_decay >= 0"));
        }
        if !(0.0..1.0).contains(&self.rho_target) || !(self.rho_weight >= 0.0) {
            return Err(Error::validation(
                "train.rho_target must lie in [0, 1) and rho_weight >= 0",
            ));
        }
        Ok(())
    }

    pub fn options(&self) -> ForwardOptions {
        ForwardOptions {
            fixed_k: self.fixed_k,
            ablation: self.ablation,
        }
    }
}

/// Loss terms of one sample.
#[derive(Clone, Debug)]
pub struct SampleResult {
    pub loss: f64,
    pub cross_entropy: f64,
    pub correct: bool,
    pub rho: f64,
    pub k: usize,
    pub layer_rates: Vec<f64>,
    /// One vector per parameter block, in [`Blocks`] order.
    pub grads: Option<Vec<Vec<f64>>>,
}

/// `cross_entropy + rho_weight * (rho - rho_target)^2`.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    model: &Model,
    frames: &SpikeTensor,
    label: usize,
    opts: ForwardOptions,
    rho_target: f64,
    rho_weight: f64,
    smooth: bool,
    want_grad: bool,
) -> Result<SampleResult> {
    let mut tape = Tape::new(SpikeMode {
        surrogate: model.config.surrogate,
        smooth,
    });
    let vars = bind(&mut tape, model, want_grad);
    let mv = model.vars(&vars);
    let f = forward(&mut tape, model, &mv, frames, opts)?;
    if label >= model.config.classes {
        return Err(Error::validation(format!("label {label} >= class count")));
    }
    let lsm = tape.log_softmax(f.logits);
    let pick = tape.gather(lsm, &[label]);
    let ce = tape.scale(pick, -1.0);
    let gap = tape.offset(f.rho, -rho_target);
    let sq = tape.mul(gap, gap);
    let reg = tape.scale(sq, rho_weight);
    let loss = tape.add(ce, reg);
    let loss_value = tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(Error::Numeric {
            block: "loss".into(),
            message: format!("loss is {loss_value}"),
        });
    }
    let grads = if want_grad {
        Some(collect_grads(&tape, model, &vars, loss)?)
    } else {
        None
    };
    Ok(SampleResult {
        loss: loss_value,
        cross_entropy: tape.scalar(ce),
        correct: argmax(tape.value(f.logits)) == label,
        rho: tape.scalar(f.rho),
        k: f.k,
        layer_rates: f.layer_rates,
        grads,
    })
}

fn collect_grads(tape: &Tape, model: &Model, vars: &[Var], loss: Var) -> Result<Vec<Vec<f64>>> {
    let g = tape.backward(loss);
    model
        .blocks()
        .iter()
        .zip(vars)
        .map(|((name, block), &v)| {
            let grad = g.get(v).map_or_else(|| vec![0.0; block.len()], <[f64]>::to_vec);
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    block: name.clone(),
                    message: "non-finite gradient".into(),
                });
            }
            Ok(grad)
        })
        .collect()
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.blocks().iter().map(|(_, b)| vec![0.0; b.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((_, p), g), (m, v)) in model
            .blocks_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= lr * (update + weight_decay * p[i]);
            }
        }
        model.clamp_constraints();
    }
}

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_rho: f64,
    pub mean_k: f64,
}

fn summarize(epoch: usize, split: Split, results: &[SampleResult]) -> EpochMetrics {
    let n = results.len().max(1) as f64;
    EpochMetrics {
        epoch,
        split,
        loss: results.iter().map(|r| r.loss).sum::<f64>() / n,
        accuracy: results.iter().filter(|r| r.correct).count() as f64 / n,
        mean_rho: results.iter().map(|r| r.rho).sum::<f64>() / n,
        mean_k: results.iter().map(|r| r.k as f64).sum::<f64>() / n,
    }
}

pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy,mean_rho,mean_K\n");
    for m in history {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.4}\n",
            m.epoch, m.split, m.loss, m.accuracy, m.mean_rho, m.mean_k
        ));
    }
    out
}

/// Gradient-free pass over a dataset.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<EpochMetrics> {
    let results: Vec<SampleResult> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            sample_loss(
                model,
                &data.frames[i],
                data.labels[i],
                cfg.options(),
                cfg.rho_target,
                cfg.rho_weight,
                false,
                false,
            )
        })
        .collect::<Result<_>>()?;
    Ok(summarize(epoch, Split::Test, &results))
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    pub feedback: Vec<FeedbackState>,
}

impl TrainOutcome {
    pub fn final_test(&self) -> Option<&EpochMetrics> {
        self.history.iter().rev().find(|m| m.split == Split::Test)
    }
}

/// Trains `model` in place on pre-generated data.
pub fn train(
    mut model: Model,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    feedback: FeedbackState,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let mut opt = AdamW::new(&model);
    let mut fb = vec![feedback; model.encoder.neurons().count()];
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
        order.shuffle(&mut rng);
        let mut epoch_results = Vec::with_capacity(train_set.len());
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<SampleResult> = batch
                .par_iter()
                .map(|&i| {
                    sample_loss(
                        &model,
                        &train_set.frames[i],
                        train_set.labels[i],
                        cfg.options(),
                        cfg.rho_target,
                        cfg.rho_weight,
                        false,
                        true,
                    )
                })
                .collect::<Result<_>>()?;
            let mut sum: Vec<Vec<f64>> = model.blocks().iter().map(|(_, b)| vec![0.0; b.len()]).collect();
            for r in &results {
                for (acc, g) in sum.iter_mut().zip(r.grads.as_ref().expect("gradients requested")) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
            }
            let scale = 1.0 / results.len() as f64;
            sum.iter_mut().flatten().for_each(|g| *g *= scale);
            opt.step(&mut model, &sum, cosine_lr(cfg.lr, step, total), cfg.weight_decay);
            step += 1;
            epoch_results.extend(results.into_iter().map(|mut r| {
                r.grads = None;
                r
            }));
        }
        if cfg.feedback {
            let layers = fb.len();
            let mut rates = vec![0.0; layers];
            for r in &epoch_results {
                for (acc, x) in rates.iter_mut().zip(&r.layer_rates) {
                    *acc += x / epoch_results.len() as f64;
                }
            }
            for ((params, state), rate) in model.encoder.neurons_mut().zip(&mut fb).zip(rates) {
                feedback_adjust(params, rate, state);
            }
        }
        history.push(summarize(epoch, Split::Train, &epoch_results));
        if !test_set.is_empty() {
            history.push(evaluate(&model, test_set, cfg, epoch)?);
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        feedback: fb,
    })
}

/// Generates the task data from `seed` and trains a fresh model.
pub fn train_synthetic(cfg: &crate::config::PipelineConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let train_set = Dataset::generate(t.task, t.train_samples, &cfg.model, cfg.seed)?;
    let test_set = Dataset::generate(t.task, t.test_samples, &cfg.model, cfg.seed ^ 0x5EED_7E57)?;
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    train(model, &train_set, &test_set, t, cfg.feedback, cfg.seed)
}

/// Worst relative error of one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub block: String,
    pub params: usize,
    pub max_rel_error: f64,
}

/// Denominator floor of the relative error, so entries whose gradient is
/// numerically zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares backpropagated gradients of the smoothed forward against
/// central differences with step `h`, for every parameter.
pub fn gradient_check(
    model: &Model,
    frames: &SpikeTensor,
    label: usize,
    opts: ForwardOptions,
    h: f64,
) -> Result<Vec<BlockCheck>> {
    let (target, weight) = (0.6, 1.0);
    let base = sample_loss(model, frames, label, opts, target, weight, true, true)?;
    let grads = base.grads.expect("gradients requested");
    let names: Vec<String> = model.blocks().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (b, name) in names.iter().enumerate() {
        let len = grads[b].len();
        let mut worst: f64 = 0.0;
        for i in 0..len {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.blocks_mut()[b].1[i] += delta;
                Ok(sample_loss(&m, frames, label, opts, target, weight, true, false)?.loss)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            let an = grads[b][i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(rel);
        }
        out.push(BlockCheck {
            block: name.clone(),
            params: len,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
