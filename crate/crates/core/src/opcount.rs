//! Multiply-accumulate accounting, analytic and measured.
//!
//! Only multiplies are counted. Convolutions count every kernel tap,
//! including taps that fall on zero padding, so the count is a function of
//! shapes alone.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Stage whose cost grows with `K^2`.
pub const SCALING_STAGE: &str = "sc.attn.score_mix";

#[derive(Clone, Debug, PartialEq)]
pub struct StageOps {
    pub stage: String,
    pub macs: u64,
    pub tokens_in: usize,
    pub tokens_out: usize,
}

impl StageOps {
    pub fn sparsity(&self) -> f64 {
        if self.tokens_in == 0 {
            0.0
        } else {
            1.0 - self.tokens_out as f64 / self.tokens_in as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCountReport {
    pub stages: Vec<StageOps>,
    pub n: usize,
    pub k: usize,
}

impl OpCountReport {
    pub fn total(&self) -> u64 {
        self.stages.iter().map(|s| s.macs).sum()
    }

    pub fn stage(&self, name: &str) -> Option<&StageOps> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn stage_macs(&self, name: &str) -> u64 {
        self.stage(name).map_or(0, |s| s.macs)
    }

    /// Nonzero stages only, keyed by name.
    pub fn as_map(&self) -> BTreeMap<String, u64> {
        self.stages
            .iter()
            .filter(|s| s.macs > 0)
            .map(|s| (s.stage.clone(), s.macs))
            .collect()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.k as f64 / self.n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# MACs count multiplies only; FLOPs are about 2 x MACs\n");
        out.push_str("stage,macs,tokens_in,tokens_out,sparsity\n");
        for s in &self.stages {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                s.stage,
                s.macs,
                s.tokens_in,
                s.tokens_out,
                s.sparsity()
            ));
        }
        out.push_str(&format!(
            "total,{},{},{},{:.6}\n",
            self.total(),
            self.n,
            self.k,
            self.sparsity()
        ));
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "N={} K={} sparsity={:.1}% total_macs={} attention_score_mix_macs={}",
            self.n,
            self.k,
            100.0 * self.sparsity(),
            self.total(),
            self.stage_macs(SCALING_STAGE)
        )
    }
}

/// Analytic counts for one forward pass with `k` tokens reaching the
/// classifier.
pub fn count_ops(cfg: &ModelConfig, k: usize) -> Result<OpCountReport> {
    cfg.validate()?;
    let n = cfg.tokens();
    if k == 0 || k > n {
        return Err(Error::validation(format!("K = {k} must lie in [1, N = {n}]")));
    }
    let (rows, cols) = cfg.grid();
    let n0 = rows * cols;
    let enc = &cfg.encoder;
    let t = cfg.timesteps as u64;
    let c = enc.branch_channels() as u64;
    let p = n0 as u64;
    let [d1, d2, d3] = enc.widths.map(|w| w as u64);
    let d = cfg.feature_dim() as u64;
    let (nu, ku) = (n as u64, k as u64);
    let l = cfg.sc_layers as u64;

    let mut down = 0u64;
    let (mut h, mut w, mut cin) = (cfg.height as u64, cfg.width as u64, enc.in_channels as u64);
    for _ in 0..enc.stages {
        h /= 2;
        w /= 2;
        down += enc.channels as u64 * h * w * cin * 4;
        cin = enc.channels as u64;
    }
    let ph = cfg.predictor_hidden as u64;
    let fh = cfg.fusion_hidden as u64;
    let row = |stage: &str, macs: u64, tin: usize, tout: usize| StageOps {
        stage: stage.to_string(),
        macs,
        tokens_in: tin,
        tokens_out: tout,
    };
    let stages = vec![
        row("sten.down", t * down, n0, n0),
        row("sten.pointwise", t * d1 * c * p, n0, n0),
        row("sten.conv", t * d2 * c * 9 * p, n0, n0),
        row("sten.pool", t * d3 * c * p, n0, n0),
        row("sten.timing_gate", 3 * p, n0, n0),
        row("msp.proj", 4 * p * d * d, n0, n0),
        row("msp.score_mix", 2 * p * p * d, n0, n0),
        row("stsg.spatial", 25 * p, n0, n0),
        row("stsg.predictor", 4 * ph, n0, n),
        row("stsg.fusion", nu * 4 * fh, n, n),
        row("sc.priority", 5 * nu, n, n),
        row("sc.attn.proj", l * 4 * ku * d * d, n, k),
        row(SCALING_STAGE, l * 2 * ku * ku * d, n, k),
        row("sc.ffn", l * 2 * ku * d * cfg.sc_ffn as u64, n, k),
        row("sc.head", d * cfg.classes as u64, k, 1),
    ];
    Ok(OpCountReport { stages, n, k })
}

/// Counts recorded by the tape, laid over the analytic stage list so token
/// columns line up. Stages the tape saw but the analytic list lacks are
/// appended.
pub fn measured_report(cfg: &ModelConfig, k: usize, macs: &[(&'static str, u64)]) -> Result<OpCountReport> {
    let mut report = count_ops(cfg, k)?;
    for s in &mut report.stages {
        s.macs = 0;
    }
    for &(name, m) in macs {
        match report.stages.iter_mut().find(|s| s.stage == name) {
            Some(s) => s.macs += m,
            None => report.stages.push(StageOps {
                stage: name.to_string(),
                macs: m,
                tokens_in: report.n,
                tokens_out: report.n,
            }),
        }
    }
    Ok(report)
}

/// Least-squares slope of `ln y` against `ln x`. `None` with fewer than two
/// distinct `x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|&(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::layer_macs;
    use crate::model::{infer, ForwardOptions, Model};
    use crate::tensor::SpikeTensor;

    #[test]
    fn attention_formula_examples() {
        assert_eq!(layer_macs(64, 32).1, 262_144);
        assert_eq!(layer_macs(128, 32).1, 4 * layer_macs(64, 32).1);
        assert_eq!(layer_macs(1, 32).1, 64);
    }

    #[test]
    fn analytic_slope_is_two() {
        let cfg = ModelConfig {
            n_target: Some(128),
            ..ModelConfig::default()
        };
        let pts: Vec<(f64, f64)> = [16, 32, 64, 128]
            .iter()
            .map(|&k| (k as f64, count_ops(&cfg, k).unwrap().stage_macs(SCALING_STAGE) as f64))
            .collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&pts[..1]), None);
    }

    #[test]
    fn totals_and_bounds() {
        let cfg = ModelConfig::default();
        let r = count_ops(&cfg, 20).unwrap();
        assert_eq!(r.total(), r.stages.iter().map(|s| s.macs).sum::<u64>());
        assert!(count_ops(&cfg, 0).is_err());
        assert!(count_ops(&cfg, 65).is_err());
        let csv = r.to_csv();
        assert!(csv.lines().nth(1).unwrap() == "stage,macs,tokens_in,tokens_out,sparsity");
        assert!(csv.lines().last().unwrap().starts_with("total,"));
    }

    #[test]
    fn measured_equals_analytic() {
        for n_target in [None, Some(40), Some(100)] {
            let cfg = ModelConfig {
                timesteps: 3,
                height: 16,
                width: 16,
                k_min: 4,
                n_target,
                ..ModelConfig::default()
            };
            let m = Model::init(cfg.clone(), 9).unwrap();
            let mut f = SpikeTensor::zeros(3, 2, 16, 16).unwrap();
            for i in 0..40 {
                f.set(i % 3, i % 2, (i * 7) % 16, (i * 5) % 16, true);
            }
            for k in [4, 9, 16] {
                let inf = infer(
                    &m,
                    &f,
                    ForwardOptions {
                        fixed_k: Some(k),
                        ..Default::default()
                    },
                )
                .unwrap();
                let measured = measured_report(&cfg, k, &inf.macs).unwrap();
                assert_eq!(measured.as_map(), count_ops(&cfg, k).unwrap().as_map());
            }
        }
    }
}
