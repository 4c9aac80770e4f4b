//! Per-token spike-timing cues: first-spike time, mean inter-spike interval,
//! burstiness and firing rate.

use crate::error::{Error, Result};
use crate::tensor::SpikeTensor;

/// ISIs at or below this many steps count as bursts.
pub const BURST_ISI: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeInfo {
    pub timesteps: usize,
    /// Token grid `(rows, cols)`; `rows * cols` equals the token count unless
    /// the tokens were regrouped.
    pub grid: (usize, usize),
    /// First spike step divided by `T`; 1.0 for silent tokens.
    pub t_first: Vec<f64>,
    /// Mean inter-spike interval in steps; `T` with fewer than two spikes.
    pub t_interval: Vec<f64>,
    /// Fraction of inter-spike intervals `<= BURST_ISI`; 0 with fewer than two spikes.
    pub t_burst: Vec<f64>,
    /// Spike count divided by `T`.
    pub f_rate: Vec<f64>,
}

impl SpikeInfo {
    pub fn len(&self) -> usize {
        self.f_rate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_rate.is_empty()
    }

    /// Cues of one token from its spike train.
    pub fn from_trains<I>(timesteps: usize, grid: (usize, usize), trains: I) -> Self
    where
        I: IntoIterator<Item = Vec<bool>>,
    {
        let mut info = SpikeInfo {
            timesteps,
            grid,
            t_first: Vec::new(),
            t_interval: Vec::new(),
            t_burst: Vec::new(),
            f_rate: Vec::new(),
        };
        let t = timesteps as f64;
        for train in trains {
            let times: Vec<usize> = train.iter().enumerate().filter_map(|(i, &s)| s.then_some(i)).collect();
            info.t_first.push(times.first().map_or(1.0, |&first| first as f64 / t));
            info.f_rate.push(times.len() as f64 / t);
            if times.len() >= 2 {
                let gaps: Vec<usize> = times.windows(2).map(|w| w[1] - w[0]).collect();
                let n = gaps.len() as f64;
                info.t_interval.push(gaps.iter().sum::<usize>() as f64 / n);
                info.t_burst
                    .push(gaps.iter().filter(|&&g| g <= BURST_ISI).count() as f64 / n);
            } else {
                info.t_interval.push(t);
                info.t_burst.push(0.0);
            }
        }
        info
    }

    /// Reorders or duplicates tokens.
    pub fn gather(&self, index: &[usize]) -> SpikeInfo {
        let pick = |v: &[f64]| index.iter().map(|&i| v[i]).collect();
        SpikeInfo {
            timesteps: self.timesteps,
            grid: if index.len() == self.len() {
                self.grid
            } else {
                (1, index.len())
            },
            t_first: pick(&self.t_first),
            t_interval: pick(&self.t_interval),
            t_burst: pick(&self.t_burst),
            f_rate: pick(&self.f_rate),
        }
    }

    /// Variance across tokens of `(t_first, t_interval)`.
    pub fn timing_variance(&self) -> (f64, f64) {
        (
            population_variance(&self.t_first),
            population_variance(&self.t_interval),
        )
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn population_variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Splits `(T, C, H, W)` spikes into non-overlapping `patch` tokens and
/// computes their cues. A token spikes at `t` when any of its cells does.
pub fn extract_cues(spikes: &SpikeTensor, patch: (usize, usize)) -> Result<SpikeInfo> {
    let [t, c, h, w] = spikes.shape();
    extract_cues_from(t, c, h, w, patch, |i| spikes.as_slice()[i] != 0)
}

/// Same as [`extract_cues`] over real activations (spike iff `>= 0.5`).
pub fn extract_cues_f64(values: &[f64], shape: [usize; 4], patch: (usize, usize)) -> Result<SpikeInfo> {
    let [t, c, h, w] = shape;
    if values.len() != t * c * h * w {
        return Err(Error::validation("activation length does not match shape"));
    }
    extract_cues_from(t, c, h, w, patch, |i| values[i] >= 0.5)
}

fn extract_cues_from(
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    (ph, pw): (usize, usize),
    spike: impl Fn(usize) -> bool,
) -> Result<SpikeInfo> {
    if t == 0 {
        return Err(Error::validation("cue extraction needs T >= 1"));
    }
    if ph == 0 || pw == 0 || !h.is_multiple_of(ph) || !w.is_multiple_of(pw) {
        return Err(Error::validation(format!("patch {ph}x{pw} does not divide {h}x{w}")));
    }
    let (rows, cols) = (h / ph, w / pw);
    let trains = (0..rows * cols).map(|tok| {
        let (r, q) = (tok / cols, tok % cols);
        (0..t)
            .map(|step| {
                (0..c).any(|ch| {
                    (r * ph..(r + 1) * ph)
                        .any(|y| (q * pw..(q + 1) * pw).any(|x| spike(((step * c + ch) * h + y) * w + x)))
                })
            })
            .collect::<Vec<bool>>()
    });
    Ok(SpikeInfo::from_trains(t, (rows, cols), trains))
}
