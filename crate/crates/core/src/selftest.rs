//! Fast invariant suite run by the `selftest` subcommand.
//!
//! Each check is self-contained and deterministic. Names are dotted so a
//! substring filter such as `hilif` picks a family.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head, ScoreMods, Stages};
use crate::autodiff::Tape;
use crate::checkpoint::{parse_checkpoint, serialize_checkpoint};
use crate::classifier::{hard_select_indices, sc_forward, ScParams};
use crate::cues::{mean, population_variance};
use crate::encoder::{EncoderConfig, TokenGrid};
use crate::gating::{gate, k_from_sparsity, mask_from_indices, select_topk, GateFactors};
use crate::model::{infer, ForwardOptions, Model, ModelConfig};
use crate::neuron::{logistic, run_sequence, NeuronParams, NeuronPriors, ResetMode};
use crate::opcount::{count_ops, loglog_slope, measured_report, SCALING_STAGE};
use crate::params::{bind, Blocks, Initializer};
use crate::temporal::{bias_attention, MspParams, TemporalWeights};
use crate::tensor::SpikeTensor;
use crate::train::gradient_check;

type Outcome = std::result::Result<String, String>;

pub struct Check {
    pub name: &'static str,
    /// Acceptance criterion the check covers.
    pub criterion: u8,
    pub run: fn() -> Outcome,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub criterion: u8,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

pub fn checks() -> Vec<Check> {
    vec![
        Check {
            name: "hilif.membrane_closed_form",
            criterion: 1,
            run: membrane_closed_form,
        },
        Check {
            name: "hilif.homogeneous_reduction",
            criterion: 2,
            run: homogeneous_reduction,
        },
        Check {
            name: "hilif.prior_statistics",
            criterion: 3,
            run: prior_statistics,
        },
        Check {
            name: "topk.tie_oracle",
            criterion: 4,
            run: topk_tie_oracle,
        },
        Check {
            name: "topk.k_arithmetic",
            criterion: 4,
            run: k_arithmetic,
        },
        Check {
            name: "gate.identities",
            criterion: 5,
            run: gate_identities,
        },
        Check {
            name: "msp.shift_invariance",
            criterion: 6,
            run: shift_invariance,
        },
        Check {
            name: "opcount.slope",
            criterion: 7,
            run: opcount_slope,
        },
        Check {
            name: "train.gradient_check",
            criterion: 8,
            run: gradient_check_micro,
        },
        Check {
            name: "sc.isolation",
            criterion: 9,
            run: sparsity_isolation,
        },
        Check {
            name: "checkpoint.round_trip",
            criterion: 0,
            run: checkpoint_round_trip,
        },
    ]
}

/// Runs every check whose name contains `filter`.
pub fn run_selftest(filter: Option<&str>) -> Vec<CheckResult> {
    checks()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| {
            let start = Instant::now();
            let outcome = (c.run)();
            let elapsed = start.elapsed();
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name: c.name,
                criterion: c.criterion,
                passed,
                detail,
                elapsed,
            }
        })
        .collect()
}

/// The smallest full pipeline: every block present, under 200 parameters.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        timesteps: 4,
        height: 4,
        width: 4,
        encoder: EncoderConfig {
            in_channels: 2,
            stages: 1,
            channels: 1,
            widths: [1, 1, 1],
        },
        msp_heads: 1,
        k_min: 1,
        predictor_hidden: 2,
        fusion_hidden: 2,
        n_target: None,
        sc_heads: 1,
        sc_layers: 1,
        sc_ffn: 2,
        classes: 2,
        ..ModelConfig::default()
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn membrane_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x: f64 = rng.random_range(0.1..5.0);
        let k: f64 = rng.random_range(0.01..0.99);
        let params = NeuronParams {
            w: vec![(k / (1.0 - k)).ln()],
            v_th: vec![1e9],
            priors: NeuronPriors::default(),
            reset_mode: ResetMode::Soft,
            v_reset: 0.0,
        };
        let k = logistic(params.w[0]);
        let out = run_sequence(&vec![vec![x]; 100], 1, &params).map_err(|e| e.to_string())?;
        for (t, v) in out.trace.iter().enumerate() {
            let expect = x * (1.0 - (1.0 - k).powi(t as i32 + 1));
            worst = worst.max((v[0] - expect).abs());
        }
        ensure(out.spikes.iter().all(|s| s[0] == 0), || "unexpected spike".into())?;
    }
    ensure(worst <= 1e-10, || format!("max deviation {worst:e} > 1e-10"))?;
    Ok(format!("50 pairs x 100 steps, max deviation {worst:.1e}"))
}

fn homogeneous_reduction() -> Outcome {
    let priors = NeuronPriors {
        sigma_tau: 0.0,
        sigma_vth: 0.0,
        ..NeuronPriors::default()
    };
    let (channels, plane) = (8, 16);
    for reset in [ResetMode::Soft, ResetMode::Hard] {
        let p = NeuronParams::init_heterogeneous(channels, priors, reset, 3).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let unit: Vec<f64> = (0..plane).map(|_| rng.random_range(0.0..2.5)).collect();
                (0..channels).flat_map(|_| unit.iter().copied()).collect()
            })
            .collect();
        let out = run_sequence(&inputs, plane, &p).map_err(|e| e.to_string())?;
        for (spikes, trace) in out.spikes.iter().zip(&out.trace) {
            for c in 1..channels {
                let r = c * plane..(c + 1) * plane;
                ensure(spikes[r.clone()] == spikes[..plane], || {
                    format!("channel {c} spikes differ")
                })?;
                ensure(
                    trace[r]
                        .iter()
                        .zip(&trace[..plane])
                        .all(|(a, b)| a.to_bits() == b.to_bits()),
                    || format!("channel {c} membrane differs"),
                )?;
            }
        }
    }
    Ok(format!(
        "{channels} channels bit-identical over 30 steps, both reset modes"
    ))
}

fn prior_statistics() -> Outcome {
    let priors = NeuronPriors {
        mu_tau: 2.0,
        sigma_tau: 0.3,
        ..NeuronPriors::default()
    };
    let p = NeuronParams::init_heterogeneous(10_000, priors, ResetMode::Soft, 5).map_err(|e| e.to_string())?;
    let tau: Vec<f64> = (0..p.channels()).map(|c| p.tau(c)).collect();
    let (m, s) = (mean(&tau), population_variance(&tau).sqrt());
    ensure((m - 2.0).abs() <= 0.01 && (s - 0.3).abs() <= 0.01, || {
        format!("tau mean {m:.4}, std {s:.4}")
    })?;
    Ok(format!("tau mean {m:.4}, std {s:.4}"))
}

/// Repeatedly takes the highest remaining score, lowest index on ties.
fn greedy_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        taken[best.expect("k <= n")] = true;
    }
    (0..scores.len()).filter(|&i| taken[i]).collect()
}

fn topk_tie_oracle() -> Outcome {
    let mut cases = 0usize;
    for n in 1..=12usize {
        for bits in 0u32..(1 << n) {
            let scores: Vec<f64> = (0..n).map(|i| f64::from((bits >> i) & 1)).collect();
            for k in 1..=n {
                let expect = greedy_oracle(&scores, k);
                let got = hard_select_indices(&scores, k).map_err(|e| e.to_string())?;
                ensure(got == expect, || {
                    format!("hard_select {scores:?} K={k}: {got:?} vs {expect:?}")
                })?;
                let rho = 1.0 - k as f64 / n as f64;
                let (kk, mask) = select_topk(&scores, rho, 1).map_err(|e| e.to_string())?;
                ensure(kk == k && mask == mask_from_indices(n, &expect), || {
                    format!("select_topk {scores:?} K={k}")
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} tie patterns agree with the greedy oracle"))
}

fn k_arithmetic() -> Outcome {
    let a = k_from_sparsity(256, 0.25, 1).map_err(|e| e.to_string())?;
    let b = k_from_sparsity(256, 0.75, 1).map_err(|e| e.to_string())?;
    ensure((a, b) == (192, 64), || format!("got K = {a}, {b}"))?;
    Ok("N=256: 25% -> K=192, 75% -> K=64".into())
}

fn random_grid(n: usize, d: usize, seed: u64) -> TokenGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    TokenGrid::new(n, d, f, (1, n)).expect("consistent shape")
}

fn gate_identities() -> Outcome {
    let f = random_grid(10, 6, 7);
    let mask: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
    let same = gate(&f, &mask, GateFactors { g_enh: 1.0, g_sup: 1.0 }).map_err(|e| e.to_string())?;
    ensure(same == f, || "(1, 1) changed the features".into())?;
    let cut = gate(&f, &mask, GateFactors { g_enh: 1.0, g_sup: 0.0 }).map_err(|e| e.to_string())?;
    for i in 0..10 {
        let ok = if mask[i] {
            cut.row(i) == f.row(i)
        } else {
            cut.row(i).iter().all(|&v| v == 0.0)
        };
        ensure(ok, || format!("row {i} wrong under g_sup = 0"))?;
    }
    Ok("identity at (1, 1); masked-out rows exactly zero at g_sup = 0".into())
}

fn shift_invariance() -> Outcome {
    let (n, d, heads) = (9, 4, 2);
    let tokens = random_grid(n, d, 8);
    let params = MspParams::init(d, heads, &mut Initializer::new(9)).map_err(|e| e.to_string())?;
    let mut tape = Tape::default();
    let vars = bind(&mut tape, &params, false);
    let mv = params.vars(&vars);
    let x = tape.constant(tokens.features.clone());
    let mods = ScoreMods {
        key_bias: None,
        row_gain: None,
    };
    let stages = Stages {
        proj: "msp.proj",
        score_mix: "msp.score_mix",
    };
    let plain = multi_head(&mut tape, x, n, d, heads, &mv.attn, mods, stages);
    let mut worst: f64 = 0.0;
    for w in [1e-3, 0.37, 1.0, 42.0] {
        let weights = TemporalWeights {
            w_timing: vec![1.0; n],
            w_interval: vec![1.0; n],
            w_combined: vec![w; n],
        };
        let (_, probs) = bias_attention(&tokens, &weights, &params).map_err(|e| e.to_string())?;
        for (h, row) in probs.iter().enumerate() {
            for (a, b) in row.iter().zip(tape.value(plain.probs[h])) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "uniform weights match unbiased attention, max deviation {worst:.1e}"
    ))
}

fn opcount_slope() -> Outcome {
    let cfg = ModelConfig {
        timesteps: 2,
        height: 16,
        width: 16,
        k_min: 1,
        n_target: Some(128),
        ..ModelConfig::default()
    };
    let sweep = [16usize, 32, 64, 128];
    let mut analytic = Vec::new();
    let mut measured = Vec::new();
    let model = Model::init(cfg.clone(), 1).map_err(|e| e.to_string())?;
    let frames = crate::variance::random_frames([2, 2, 16, 16], 0.3, 2).map_err(|e| e.to_string())?;
    for &k in &sweep {
        let a = count_ops(&cfg, k).map_err(|e| e.to_string())?;
        analytic.push((k as f64, a.stage_macs(SCALING_STAGE) as f64));
        let opts = ForwardOptions {
            fixed_k: Some(k),
            ..Default::default()
        };
        let inf = infer(&model, &frames, opts).map_err(|e| e.to_string())?;
        let m = measured_report(&cfg, k, &inf.macs).map_err(|e| e.to_string())?;
        measured.push((k as f64, m.stage_macs(SCALING_STAGE) as f64));
    }
    let sa = loglog_slope(&analytic).ok_or("degenerate analytic fit")?;
    let sm = loglog_slope(&measured).ok_or("degenerate measured fit")?;
    ensure((sa - 2.0).abs() < 5e-4 && (sm - 2.0).abs() <= 0.05, || {
        format!("slopes analytic {sa:.4}, measured {sm:.4}")
    })?;
    Ok(format!("slope analytic {sa:.3}, measured {sm:.3}"))
}

fn gradient_check_micro() -> Outcome {
    let cfg = micro_config();
    let model = Model::init(cfg.clone(), 3).map_err(|e| e.to_string())?;
    let params = model.param_count();
    ensure(params <= 200, || format!("micro pipeline has {params} parameters"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut frames = SpikeTensor::zeros(cfg.timesteps, 2, cfg.height, cfg.width).map_err(|e| e.to_string())?;
    for t in 0..cfg.timesteps {
        for c in 0..2 {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    frames.set(t, c, y, x, rng.random::<f64>() < 0.4);
                }
            }
        }
    }
    let report = gradient_check(&model, &frames, 1, ForwardOptions::default(), 1e-4).map_err(|e| e.to_string())?;
    let worst = report
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("no parameter blocks")?;
    ensure(worst.max_rel_error < 1e-4, || {
        format!("{} has relative error {:.2e}", worst.block, worst.max_rel_error)
    })?;
    Ok(format!(
        "{} blocks, {params} parameters, worst {} at {:.1e}",
        report.len(),
        worst.block,
        worst.max_rel_error
    ))
}

fn sparsity_isolation() -> Outcome {
    let (n, d, k) = (12, 4, 5);
    let params = ScParams::init(d, 2, 2, 6, 3, &mut Initializer::new(10)).map_err(|e| e.to_string())?;
    let tokens = random_grid(n, d, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
    let base = sc_forward(&tokens, &u, k, &params).map_err(|e| e.to_string())?;
    let selected = hard_select_indices(&u, k).map_err(|e| e.to_string())?;
    let perturb = |i: usize| -> std::result::Result<Vec<f64>, String> {
        let mut t = tokens.clone();
        for v in &mut t.features[i * d..(i + 1) * d] {
            *v += 10.0;
        }
        sc_forward(&t, &u, k, &params).map_err(|e| e.to_string())
    };
    for i in (0..n).filter(|i| !selected.contains(i)) {
        ensure(perturb(i)? == base, || format!("dropped token {i} moved the logits"))?;
    }
    ensure(perturb(selected[0])? != base, || {
        "a selected token had no effect".into()
    })?;
    Ok(format!("{} dropped tokens leave logits bit-identical", n - k))
}

fn checkpoint_round_trip() -> Outcome {
    let model = Model::init(micro_config(), 4).map_err(|e| e.to_string())?;
    let text = serialize_checkpoint(&model);
    let back = parse_checkpoint(text.as_bytes()).map_err(|e| e.to_string())?;
    ensure(back == model, || "checkpoint round trip changed the model".into())?;
    let broken = text.replacen("sc.head_b.0", "sc.head_b.x", 1);
    ensure(parse_checkpoint(broken.as_bytes()).is_err(), || {
        "corrupt checkpoint accepted".into()
    })?;
    Ok(format!("{} parameters round-trip exactly", model.param_count()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_selects_family() {
        let names: Vec<_> = checks()
            .into_iter()
            .filter(|c| c.name.contains("hilif"))
            .map(|c| c.name)
            .collect();
        assert_eq!(names.len(), 3);
        assert!(names.iter().all(|n| n.starts_with("hilif.")));
    }

    #[test]
    fn every_check_passes() {
        for r in run_selftest(None) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
