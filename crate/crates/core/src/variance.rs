//! Spatial variance of spike-timing cues over the encoder's output tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cues::{extract_cues, mean, population_variance};
use crate::encoder::{encode_multiscale, EncoderParams};
use crate::error::{Error, Result};
use crate::neuron::{run_sequence, NeuronParams, NeuronPriors, ResetMode};
use crate::tensor::SpikeTensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceReport {
    pub samples: usize,
    /// Dataset mean of the per-sample variance of `T_first` across tokens.
    pub timing: f64,
    /// Same for `T_interval`.
    pub interval: f64,
}

/// Per-sample `(timing, interval)` variances, in input order.
pub fn sample_variances(encoder: &EncoderParams, frames: &[SpikeTensor]) -> Result<Vec<(f64, f64)>> {
    frames
        .par_iter()
        .map(|f| {
            let (_, spikes) = encode_multiscale(f, encoder)?;
            Ok(extract_cues(&spikes, (1, 1))?.timing_variance())
        })
        .collect()
}

pub fn dataset_variance(encoder: &EncoderParams, frames: &[SpikeTensor]) -> Result<VarianceReport> {
    if frames.is_empty() {
        return Err(Error::validation("variance needs at least one sample"));
    }
    let per = sample_variances(encoder, frames)?;
    let timing: Vec<f64> = per.iter().map(|p| p.0).collect();
    let interval: Vec<f64> = per.iter().map(|p| p.1).collect();
    Ok(VarianceReport {
        samples: per.len(),
        timing: mean(&timing),
        interval: mean(&interval),
    })
}

/// Variance of the normalized first-spike step over every `(channel, unit)`
/// of one HI-LIF layer. Silent units count as `1.0`.
pub fn layer_timing_variance(params: &NeuronParams, inputs: &[Vec<f64>], plane: usize) -> Result<f64> {
    let out = run_sequence(inputs, plane, params)?;
    let t = inputs.len();
    let first: Vec<f64> = (0..params.channels() * plane)
        .map(|i| out.spikes.iter().position(|s| s[i] != 0).unwrap_or(t) as f64 / t as f64)
        .collect();
    Ok(population_variance(&first))
}

/// `samples` input sequences of shape `(T, C, plane)` where every channel of
/// a unit receives the same current, drawn uniformly from `[lo, hi)`.
pub fn shared_random_currents(
    samples: usize,
    timesteps: usize,
    channels: usize,
    plane: usize,
    (lo, hi): (f64, f64),
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::validation(format!("current range [{lo}, {hi}) is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..samples)
        .map(|_| {
            (0..timesteps)
                .map(|_| {
                    let unit: Vec<f64> = (0..plane).map(|_| rng.random_range(lo..hi)).collect();
                    (0..channels).flat_map(|_| unit.iter().copied()).collect()
                })
                .collect()
        })
        .collect())
}

/// Mean layer timing variance for heterogeneous and homogeneous layers
/// built from the same seed and driven by the same inputs.
pub fn paired_layer_variance(
    heterogeneous: NeuronPriors,
    inputs: &[Vec<Vec<f64>>],
    channels: usize,
    plane: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if inputs.is_empty() {
        return Err(Error::validation("variance needs at least one sample"));
    }
    let het = NeuronParams::init_heterogeneous(channels, heterogeneous, ResetMode::Soft, seed)?;
    let homogeneous = NeuronPriors {
        sigma_tau: 0.0,
        sigma_vth: 0.0,
        ..heterogeneous
    };
    let hom = NeuronParams::init_heterogeneous(channels, homogeneous, ResetMode::Soft, seed)?;
    let mut sums = (0.0, 0.0);
    for x in inputs {
        sums.0 += layer_timing_variance(&het, x, plane)?;
        sums.1 += layer_timing_variance(&hom, x, plane)?;
    }
    let n = inputs.len() as f64;
    Ok((sums.0 / n, sums.1 / n))
}

/// Independent Bernoulli spikes with probability `density` per cell.
pub fn random_frames(shape: [usize; 4], density: f64, seed: u64) -> Result<SpikeTensor> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::validation(format!("density {density} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| u8::from(rng.random::<f64>() < density)).collect();
    SpikeTensor::from_vec(shape, data)
}
