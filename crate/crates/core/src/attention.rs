//! Multi-head self-attention on the tape, shared by the cue-biased token
//! mixer and the sparse classifier stack.

use crate::autodiff::{Tape, Var};

/// Projection matrices, each `[d, d]` and applied as `x @ w`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Optional modulations of the pre-softmax scores.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScoreMods {
    /// Added to every score in key column `j`, length `n`.
    pub key_bias: Option<Var>,
    /// Multiplies every score in query row `i`, length `n`.
    pub row_gain: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Stages {
    pub proj: &'static str,
    pub score_mix: &'static str,
}

pub struct AttentionOut {
    /// `[n, d]`, before any residual connection.
    pub out: Var,
    /// Row-stochastic `[n, n]` attention per head.
    pub probs: Vec<Var>,
}

pub fn multi_head(
    tape: &mut Tape,
    x: Var,
    n: usize,
    d: usize,
    heads: usize,
    w: &AttentionVars,
    mods: ScoreMods,
    stages: Stages,
) -> AttentionOut {
    assert!(heads >= 1 && d.is_multiple_of(heads), "head count must divide width");
    let dh = d / heads;
    tape.set_stage(stages.proj);
    let q = tape.matmul(x, w.wq, n, d, d);
    let k = tape.matmul(x, w.wk, n, d, d);
    let v = tape.matmul(x, w.wv, n, d, d);

    let mut head_out = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, n, d, h * dh, dh),
                tape.slice_cols(k, n, d, h * dh, dh),
                tape.slice_cols(v, n, d, h * dh, dh),
            )
        };
        tape.set_stage(stages.score_mix);
        let raw = tape.matmul_bt(qh, kh, n, dh, n);
        let mut scores = tape.scale(raw, 1.0 / (dh as f64).sqrt());
        if let Some(b) = mods.key_bias {
            scores = tape.add_bias(scores, b, n, n);
        }
        if let Some(g) = mods.row_gain {
            scores = tape.row_scale(scores, g, n, n);
        }
        let p = tape.softmax_rows(scores, n, n);
        head_out.push((tape.matmul(p, vh, n, n, dh), dh));
        probs.push(p);
    }
    let merged = if heads == 1 {
        head_out[0].0
    } else {
        tape.concat_cols(&head_out, n)
    };
    tape.set_stage(stages.proj);
    let out = tape.matmul(merged, w.wo, n, d, d);
    AttentionOut { out, probs }
}

/// MACs of one attention layer: `(projections, scores + value mixing)`.
pub fn layer_macs(tokens: u64, width: u64) -> (u64, u64) {
    (4 * tokens * width * width, 2 * tokens * tokens * width)
}
