//! Urgency-ranked hard token cut and the attention classifier that runs on
//! the survivors only.

use crate::attention::{multi_head, AttentionVars, ScoreMods, Stages};
use crate::autodiff::{softplus, softplus_inv, Tape, Var};
use crate::cues::SpikeInfo;
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::gating::top_k_indices;
use crate::params::{bind, Blocks, Initializer};

const STAGES: Stages = Stages {
    proj: "sc.attn.proj",
    score_mix: "sc.attn.score_mix",
};

/// `(1 - first) + (1 - interval / T) + rate`, the unit-weight urgency.
pub fn priority_triad(cues: &SpikeInfo) -> Vec<f64> {
    let t = cues.timesteps as f64;
    (0..cues.len())
        .map(|i| (1.0 - cues.t_first[i]) + (1.0 - cues.t_interval[i] / t) + cues.f_rate[i])
        .collect()
}

/// `[n, 3]` rows of the triad terms.
pub fn triad_terms(cues: &SpikeInfo) -> Vec<f64> {
    let t = cues.timesteps as f64;
    (0..cues.len())
        .flat_map(|i| [1.0 - cues.t_first[i], 1.0 - cues.t_interval[i] / t, cues.f_rate[i]])
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScLayer {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    /// `[d, ffn]`.
    pub ffn_w1: Vec<f64>,
    pub ffn_b1: Vec<f64>,
    /// `[ffn, d]`.
    pub ffn_w2: Vec<f64>,
    pub ffn_b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScParams {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub classes: usize,
    /// Softplus-reparameterized weights of the three triad terms.
    pub prio_raw: Vec<f64>,
    /// Per-token residual `r_w * burst + r_b`.
    pub resid: Vec<f64>,
    /// `kappa = softplus(kappa_raw)`.
    pub kappa_raw: Vec<f64>,
    pub layers: Vec<ScLayer>,
    /// `[d, classes]`.
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl ScParams {
    pub fn init(
        d: usize,
        heads: usize,
        layers: usize,
        ffn: usize,
        classes: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::validation(format!(
                "sc.heads = {heads} must divide the token width {d}"
            )));
        }
        if classes < 2 || ffn == 0 {
            return Err(Error::validation("sc needs >= 2 classes and ffn width >= 1"));
        }
        let layers = (0..layers)
            .map(|_| ScLayer {
                wq: init.glorot(d, d),
                wk: init.glorot(d, d),
                wv: init.glorot(d, d),
                wo: init.uniform(d * d, -0.1, 0.1),
                ffn_w1: init.glorot(d, ffn),
                ffn_b1: vec![0.0; ffn],
                ffn_w2: init.uniform(ffn * d, -0.1, 0.1),
                ffn_b2: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            d,
            heads,
            ffn,
            classes,
            // jittered around unit weights so distinct cue triples rarely tie
            prio_raw: init
                .uniform(3, -0.05, 0.05)
                .into_iter()
                .map(|j| softplus_inv(1.0) + j)
                .collect(),
            resid: vec![0.0; 2],
            kappa_raw: vec![0.0],
            layers,
            head_w: init.uniform(d * classes, -0.05, 0.05),
            head_b: vec![0.0; classes],
        })
    }

    pub fn priority_weights(&self) -> [f64; 3] {
        [
            softplus(self.prio_raw[0]),
            softplus(self.prio_raw[1]),
            softplus(self.prio_raw[2]),
        ]
    }

    pub fn kappa(&self) -> f64 {
        softplus(self.kappa_raw[0])
    }

    pub fn vars(&self, vars: &[Var]) -> ScVars {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("sc block count");
        let prio_raw = next();
        let resid = next();
        let kappa_raw = next();
        let layers = (0..self.layers.len())
            .map(|_| ScLayerVars {
                attn: AttentionVars {
                    wq: next(),
                    wk: next(),
                    wv: next(),
                    wo: next(),
                },
                ffn_w1: next(),
                ffn_b1: next(),
                ffn_w2: next(),
                ffn_b2: next(),
            })
            .collect();
        ScVars {
            prio_raw,
            resid,
            kappa_raw,
            layers,
            head_w: next(),
            head_b: next(),
        }
    }
}

impl Blocks for ScParams {
    fn blocks(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = vec![
            ("sc.prio_raw".into(), &self.prio_raw),
            ("sc.resid".into(), &self.resid),
            ("sc.kappa_raw".into(), &self.kappa_raw),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("sc.layer{i}.wq"), &l.wq));
            out.push((format!("sc.layer{i}.wk"), &l.wk));
            out.push((format!("sc.layer{i}.wv"), &l.wv));
            out.push((format!("sc.layer{i}.wo"), &l.wo));
            out.push((format!("sc.layer{i}.ffn_w1"), &l.ffn_w1));
            out.push((format!("sc.layer{i}.ffn_b1"), &l.ffn_b1));
            out.push((format!("sc.layer{i}.ffn_w2"), &l.ffn_w2));
            out.push((format!("sc.layer{i}.ffn_b2"), &l.ffn_b2));
        }
        out.push(("sc.head_w".into(), &self.head_w));
        out.push(("sc.head_b".into(), &self.head_b));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = vec![
            ("sc.prio_raw".into(), &mut self.prio_raw),
            ("sc.resid".into(), &mut self.resid),
            ("sc.kappa_raw".into(), &mut self.kappa_raw),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("sc.layer{i}.wq"), &mut l.wq));
            out.push((format!("sc.layer{i}.wk"), &mut l.wk));
            out.push((format!("sc.layer{i}.wv"), &mut l.wv));
            out.push((format!("sc.layer{i}.wo"), &mut l.wo));
            out.push((format!("sc.layer{i}.ffn_w1"), &mut l.ffn_w1));
            out.push((format!("sc.layer{i}.ffn_b1"), &mut l.ffn_b1));
            out.push((format!("sc.layer{i}.ffn_w2"), &mut l.ffn_w2));
            out.push((format!("sc.layer{i}.ffn_b2"), &mut l.ffn_b2));
        }
        out.push(("sc.head_w".into(), &mut self.head_w));
        out.push(("sc.head_b".into(), &mut self.head_b));
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScLayerVars {
    pub attn: AttentionVars,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

#[derive(Clone, Debug)]
pub struct ScVars {
    pub prio_raw: Var,
    pub resid: Var,
    pub kappa_raw: Var,
    pub layers: Vec<ScLayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

pub fn priority_scores_tape(tape: &mut Tape, cues: &SpikeInfo, v: &ScVars) -> Var {
    tape.set_stage("sc.priority");
    let n = cues.len();
    let terms = tape.constant(triad_terms(cues));
    let w = tape.softplus(v.prio_raw);
    let weighted = tape.matmul(terms, w, n, 3, 1);
    let mut burst1 = Vec::with_capacity(2 * n);
    for &b in &cues.t_burst {
        burst1.extend([b, 1.0]);
    }
    let burst1 = tape.constant(burst1);
    let resid = tape.matmul(burst1, v.resid, n, 2, 1);
    tape.add(weighted, resid)
}

pub fn priority_scores(cues: &SpikeInfo, params: &ScParams) -> Vec<f64> {
    let [we, wi, wr] = params.priority_weights();
    let t = cues.timesteps as f64;
    (0..cues.len())
        .map(|i| {
            we * (1.0 - cues.t_first[i])
                + wi * (1.0 - cues.t_interval[i] / t)
                + wr * cues.f_rate[i]
                + params.resid[0] * cues.t_burst[i]
                + params.resid[1]
        })
        .collect()
}

/// Indices of the `k` highest-urgency tokens in original order.
pub fn hard_select_indices(u: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > u.len() {
        return Err(Error::validation(format!(
            "hard selection needs 1 <= K <= N, got K = {k}, N = {}",
            u.len()
        )));
    }
    Ok(top_k_indices(u, k))
}

pub fn hard_select(tokens: &TokenGrid, u: &[f64], k: usize) -> Result<(TokenGrid, Vec<usize>)> {
    if u.len() != tokens.n {
        return Err(Error::validation(format!(
            "{} urgency scores for {} tokens",
            u.len(),
            tokens.n
        )));
    }
    let idx = hard_select_indices(u, k)?;
    let features = idx.iter().flat_map(|&i| tokens.row(i).to_vec()).collect();
    let grid = if k == tokens.n { tokens.grid } else { (1, k) };
    Ok((TokenGrid::new(k, tokens.d, features, grid)?, idx))
}

pub struct StackOut {
    pub out: Var,
    /// Attention rows per layer, then per head.
    pub probs: Vec<Vec<Var>>,
}

/// `L` residual attention + feed-forward layers over `k` tokens. Query `i`
/// has its logits multiplied by `1 + kappa * minmax(u)[i]`.
pub fn sparse_attention_stack_tape(
    tape: &mut Tape,
    x: Var,
    u_sel: Var,
    k: usize,
    params: &ScParams,
    v: &ScVars,
) -> StackOut {
    let d = params.d;
    tape.set_stage("sc.priority");
    let uh = tape.min_max_normalize(u_sel);
    let kappa = tape.softplus(v.kappa_raw);
    let scaled = tape.scalar_mul(uh, kappa);
    let gain = tape.offset(scaled, 1.0);
    let mut x = x;
    let mut probs = Vec::with_capacity(v.layers.len());
    for l in &v.layers {
        let mods = ScoreMods {
            key_bias: None,
            row_gain: Some(gain),
        };
        let a = multi_head(tape, x, k, d, params.heads, &l.attn, mods, STAGES);
        probs.push(a.probs);
        x = tape.add(x, a.out);
        tape.set_stage("sc.ffn");
        let h = tape.matmul(x, l.ffn_w1, k, d, params.ffn);
        let h = tape.add_bias(h, l.ffn_b1, k, params.ffn);
        let h = tape.tanh(h);
        let o = tape.matmul(h, l.ffn_w2, k, params.ffn, d);
        let o = tape.add_bias(o, l.ffn_b2, k, d);
        x = tape.add(x, o);
    }
    StackOut { out: x, probs }
}

/// Mean-pool over tokens then affine map to class logits.
pub fn classify_tape(tape: &mut Tape, x: Var, k: usize, params: &ScParams, v: &ScVars) -> Var {
    tape.set_stage("sc.head");
    let pooled = tape.mean_rows(x, k, params.d);
    let logits = tape.matmul(pooled, v.head_w, 1, params.d, params.classes);
    tape.add_bias(logits, v.head_b, 1, params.classes)
}

pub fn sparse_attention_stack(
    selected: &TokenGrid,
    u_sel: &[f64],
    params: &ScParams,
) -> Result<(TokenGrid, Vec<Vec<Vec<f64>>>)> {
    if selected.d != params.d || u_sel.len() != selected.n {
        return Err(Error::validation("selected tokens do not match the classifier shape"));
    }
    let mut tape = Tape::default();
    let vars = bind(&mut tape, params, false);
    let v = params.vars(&vars);
    let x = tape.constant(selected.features.clone());
    let u = tape.constant(u_sel.to_vec());
    let s = sparse_attention_stack_tape(&mut tape, x, u, selected.n, params, &v);
    let probs = s
        .probs
        .iter()
        .map(|layer| layer.iter().map(|&p| tape.value(p).to_vec()).collect())
        .collect();
    Ok((
        TokenGrid::new(selected.n, selected.d, tape.value(s.out).to_vec(), selected.grid)?,
        probs,
    ))
}

pub fn classify(features: &TokenGrid, params: &ScParams) -> Result<Vec<f64>> {
    if features.d != params.d {
        return Err(Error::validation("feature width does not match the classifier head"));
    }
    let mut tape = Tape::default();
    let vars = bind(&mut tape, params, false);
    let v = params.vars(&vars);
    let x = tape.constant(features.features.clone());
    let l = classify_tape(&mut tape, x, features.n, params, &v);
    Ok(tape.value(l).to_vec())
}

/// Hard top-`k` selection on `u`, the attention stack, then the head.
pub fn sc_forward(tokens: &TokenGrid, u: &[f64], k: usize, params: &ScParams) -> Result<Vec<f64>> {
    let (selected, idx) = hard_select(tokens, u, k)?;
    let u_sel: Vec<f64> = idx.iter().map(|&i| u[i]).collect();
    let (out, _) = sparse_attention_stack(&selected, &u_sel, params)?;
    classify(&out, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(d: usize, heads: usize, layers: usize) -> ScParams {
        ScParams::init(d, heads, layers, 6, 3, &mut Initializer::new(5)).unwrap()
    }

    fn info(t: usize, tf: &[f64], ti: &[f64], fr: &[f64]) -> SpikeInfo {
        SpikeInfo {
            timesteps: t,
            grid: (1, tf.len()),
            t_first: tf.to_vec(),
            t_interval: ti.to_vec(),
            t_burst: vec![0.0; tf.len()],
            f_rate: fr.to_vec(),
        }
    }

    #[test]
    fn urgency_examples() {
        let mut p = params(4, 1, 1);
        p.prio_raw = vec![softplus_inv(1.0); 3];
        let w = p.priority_weights();
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let c = info(10, &[1.0, 0.0], &[10.0, 1.0], &[0.0, 1.0]);
        let u = priority_scores(&c, &p);
        assert!(u[0].abs() < 1e-12);
        assert!((u[1] - 2.9).abs() < 1e-12);
        assert_eq!(priority_triad(&c)[1], 2.9);
        let c = info(10, &[0.2, 0.5], &[3.0, 3.0], &[0.4, 0.4]);
        let u = priority_scores(&c, &p);
        assert!(u[0] > u[1]);
    }

    #[test]
    fn urgency_tape_matches_plain() {
        let mut p = params(4, 1, 1);
        p.prio_raw = vec![0.3, -1.0, 2.0];
        p.resid = vec![0.7, -0.2];
        let mut c = info(8, &[0.125, 0.5, 1.0], &[1.5, 3.0, 8.0], &[0.75, 0.25, 0.0]);
        c.t_burst = vec![1.0, 0.5, 0.0];
        let plain = priority_scores(&c, &p);
        let mut t = Tape::default();
        let vars = bind(&mut t, &p, false);
        let u = priority_scores_tape(&mut t, &c, &p.vars(&vars));
        for (a, b) in t.value(u).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn hard_select_examples() {
        let g = TokenGrid::new(4, 1, vec![10.0, 11.0, 12.0, 13.0], (2, 2)).unwrap();
        let u = [0.1, 0.9, 0.5, 0.9];
        assert_eq!(hard_select(&g, &u, 4).unwrap().0, g);
        let (s, idx) = hard_select(&g, &u, 2).unwrap();
        assert_eq!(idx, vec![1, 3]);
        assert_eq!(s.features, vec![11.0, 13.0]);
        assert_eq!(hard_select(&g, &u, 1).unwrap().1, vec![1]);
        assert_eq!(hard_select(&g, &[0.3; 4], 2).unwrap().1, vec![0, 1]);
        assert!(hard_select(&g, &u, 5).is_err());
        assert!(hard_select(&g, &u, 0).is_err());
    }

    fn sort_oracle(u: &[f64], k: usize) -> Vec<usize> {
        let mut pairs: Vec<(f64, usize)> = u.iter().copied().zip(0..).collect();
        // descending score, ascending index: compare (-score, index) pairs
        pairs.sort_by(|a, b| (-a.0, a.1).partial_cmp(&(-b.0, b.1)).unwrap());
        let mut keep: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
        keep.sort_unstable();
        keep
    }

    #[test]
    fn exhaustive_three_value_patterns() {
        for n in 1..=12usize {
            let total = 3usize.pow(n as u32);
            for code in 0..total {
                let mut c = code;
                let u: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = (c % 3) as f64 * 0.5;
                        c /= 3;
                        v
                    })
                    .collect();
                for k in [1, n.div_ceil(2), n] {
                    assert_eq!(hard_select_indices(&u, k).unwrap(), sort_oracle(&u, k));
                }
            }
        }
    }

    #[test]
    fn kappa_zero_and_two_token_tie() {
        let mut p = params(4, 2, 1);
        let x = TokenGrid::new(3, 4, (0..12).map(|i| (i as f64 * 0.4).sin()).collect(), (1, 3)).unwrap();
        p.kappa_raw = vec![-60.0];
        let (_, a) = sparse_attention_stack(&x, &[0.1, 0.9, 0.4], &p).unwrap();
        let (_, b) = sparse_attention_stack(&x, &[0.0, 0.0, 0.0], &p).unwrap();
        for (ha, hb) in a[0].iter().zip(&b[0]) {
            for (u, v) in ha.iter().zip(hb) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        p.kappa_raw = vec![5.0];
        let same = TokenGrid::new(2, 4, vec![0.3, -0.2, 0.5, 0.1, 0.3, -0.2, 0.5, 0.1], (1, 2)).unwrap();
        let (_, pr) = sparse_attention_stack(&same, &[1.0, 0.0], &p).unwrap();
        for head in &pr[0] {
            assert!(head.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn large_kappa_sharpens_urgent_rows() {
        let mut p = params(2, 1, 1);
        p.layers[0].wq = vec![1.0, 0.0, 0.0, 1.0];
        p.layers[0].wk = vec![1.0, 0.0, 0.0, 1.0];
        let x = TokenGrid::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5], (1, 3)).unwrap();
        p.kappa_raw = vec![200.0];
        let (_, pr) = sparse_attention_stack(&x, &[1.0, 0.0, 0.2], &p).unwrap();
        let row0 = &pr[0][0][..3];
        assert!(row0[0] > 0.999_999, "{row0:?}");
        let row1 = &pr[0][0][3..6];
        assert!(row1.iter().all(|&v| v < 0.99));
    }

    #[test]
    fn classify_examples() {
        let mut p = params(2, 1, 1);
        let zeros = TokenGrid::new(3, 2, vec![0.0; 6], (1, 3)).unwrap();
        p.head_w = vec![0.0; 6];
        assert_eq!(classify(&zeros, &p).unwrap(), vec![0.0; 3]);
        p.head_w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        p.head_b = vec![0.5, 0.0, -0.5];
        let one = TokenGrid::new(1, 2, vec![1.0, -1.0], (1, 1)).unwrap();
        assert_eq!(
            classify(&one, &p).unwrap(),
            vec![1.0 - 4.0 + 0.5, 2.0 - 5.0, 3.0 - 6.0 - 0.5]
        );
        let two = TokenGrid::new(2, 2, vec![0.25, 0.5, -1.0, 2.0], (1, 2)).unwrap();
        let dup = TokenGrid::new(4, 2, vec![0.25, 0.5, -1.0, 2.0, 0.25, 0.5, -1.0, 2.0], (1, 4)).unwrap();
        assert_eq!(classify(&two, &p).unwrap(), classify(&dup, &p).unwrap());
    }

    #[test]
    fn stack_macs_depend_only_on_shape() {
        let p = params(4, 2, 2);
        let mut t = Tape::default();
        let vars = bind(&mut t, &p, false);
        let v = p.vars(&vars);
        let x = t.constant(vec![0.1; 5 * 4]);
        let u = t.constant(vec![0.0, 1.0, 0.5, 0.2, 0.3]);
        sparse_attention_stack_tape(&mut t, x, u, 5, &p, &v);
        let (proj, mix) = crate::attention::layer_macs(5, 4);
        assert_eq!(t.stage_macs("sc.attn.proj"), 2 * proj);
        assert_eq!(t.stage_macs("sc.attn.score_mix"), 2 * mix);
    }

    proptest! {
        #[test]
        fn urgency_monotone(
            tf in 0.0f64..0.9, ti in 1.0f64..7.0, fr in 0.0f64..0.9,
            dt in 0.001f64..0.1, raw in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let mut p = params(2, 1, 1);
            p.prio_raw = raw;
            let base = priority_scores(&info(8, &[tf], &[ti], &[fr]), &p)[0];
            prop_assert!(base.is_finite());
            prop_assert!(priority_scores(&info(8, &[tf], &[ti], &[fr + dt]), &p)[0] >= base);
            prop_assert!(priority_scores(&info(8, &[tf + dt], &[ti], &[fr]), &p)[0] <= base);
            prop_assert!(priority_scores(&info(8, &[tf], &[ti + dt], &[fr]), &p)[0] <= base);
        }

        #[test]
        fn attention_rows_are_distributions(
            u in proptest::collection::vec(-2.0f64..2.0, 1..7),
            kraw in -5.0f64..8.0,
        ) {
            let mut p = params(4, 2, 2);
            p.kappa_raw = vec![kraw];
            let k = u.len();
            let x = TokenGrid::new(k, 4, (0..k * 4).map(|i| (i as f64 * 0.9).cos()).collect(), (1, k)).unwrap();
            let (_, pr) = sparse_attention_stack(&x, &u, &p).unwrap();
            for layer in &pr {
                for head in layer {
                    for row in head.chunks(k) {
                        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                        prop_assert!(row.iter().all(|&v| v >= 0.0));
                    }
                }
            }
        }
    }
}
