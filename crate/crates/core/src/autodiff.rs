//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints. Matrices are row-major `[rows, cols]`; most ops take the shape
//! they need explicitly.
//!
//! Matrix products and convolutions add their multiply count to the stage
//! label active when they were recorded, which is how the op counter
//! instruments a real forward pass.

use crate::neuron::logistic;
use crate::surrogate::Surrogate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub struct SpikeMode {
    pub surrogate: Surrogate,
    /// Replace Heaviside with the surrogate's antiderivative in the forward.
    pub smooth: bool,
}


#[derive(Clone, Debug)]
struct Conv {
    x: Var,
    k: Var,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Logistic(Var),
    Softplus(Var),
    Tanh(Var),
    ScalarMul(Var, Var),
    MatMul(Var, Var, usize, usize, usize),
    MatMulBt(Var, Var, usize, usize, usize),
    AddBias(Var, Var, usize, usize),
    AddPerRow(Var, Var, usize, usize),
    RowScale(Var, Var, usize, usize),
    Spike(Var, Surrogate),
    SoftmaxRows(Var, usize, usize),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>, usize),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize, usize, usize, usize),
    ConcatCols(Vec<(Var, usize)>, usize),
    Transpose(Var, usize, usize),
    Sum(Var),
    MeanRows(Var, usize, usize),
    MeanCols(Var, usize, usize),
    BroadcastCols(Var, usize, usize),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Conv2d(Box<Conv>),
    MinMax(Var, Option<(usize, usize)>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    stage: &'static str,
    macs: Vec<(&'static str, u64)>,
    spike_mode: SpikeMode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(SpikeMode::default())
    }
}

impl Tape {
    pub fn new(spike_mode: SpikeMode) -> Self {
        Self {
            nodes: Vec::new(),
            stage: "other",
            macs: Vec::new(),
            spike_mode,
        }
    }

    pub fn spike_mode(&self) -> SpikeMode {
        self.spike_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn set_stage(&mut self, stage: &'static str) {
        self.stage = stage;
    }

    /// Multiply counts per stage, in order of first use.
    pub fn macs(&self) -> &[(&'static str, u64)] {
        &self.macs
    }

    pub fn stage_macs(&self, stage: &str) -> u64 {
        self.macs.iter().filter(|(s, _)| *s == stage).map(|(_, m)| m).sum()
    }

    fn count(&mut self, macs: u64) {
        match self.macs.iter_mut().find(|(s, _)| *s == self.stage) {
            Some((_, m)) => *m += macs,
            None => self.macs.push((self.stage, macs)),
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "elementwise length mismatch");
        let value = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.unary(a, Op::Logistic(a), logistic)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// `a * s` where `s` has length 1.
    pub fn scalar_mul(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(a).iter().map(|x| x * k).collect();
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::ScalarMul(a, s), ng)
    }

    /// `a[m,k] @ b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var, m: usize, k: usize, n: usize) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), m * k, "matmul lhs shape");
        assert_eq!(vb.len(), k * n, "matmul rhs shape");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = va[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&vb[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        self.count((m * k * n) as u64);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b, m, k, n), ng)
    }

    /// `a[m,k] @ b[n,k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var, m: usize, k: usize, n: usize) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), m * k, "matmul_bt lhs shape");
        assert_eq!(vb.len(), n * k, "matmul_bt rhs shape");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ra = &va[i * k..(i + 1) * k];
            for j in 0..n {
                let rb = &vb[j * k..(j + 1) * k];
                out[i * n + j] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            }
        }
        self.count((m * k * n) as u64);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulBt(a, b, m, k, n), ng)
    }

    /// `a[m,n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var, m: usize, n: usize) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.len(), vb.len()), (m * n, n), "add_bias shape");
        let value = va.iter().enumerate().map(|(i, x)| x + vb[i % n]).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddBias(a, b, m, n), ng)
    }

    /// `a[m,n] + b[m]` broadcast over columns.
    pub fn add_per_row(&mut self, a: Var, b: Var, m: usize, n: usize) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.len(), vb.len()), (m * n, m), "add_per_row shape");
        let value = va.iter().enumerate().map(|(i, x)| x + vb[i / n]).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddPerRow(a, b, m, n), ng)
    }

    /// Multiplies row `i` of `a[m,n]` by `g[i]`.
    pub fn row_scale(&mut self, a: Var, g: Var, m: usize, n: usize) -> Var {
        let (va, vg) = (self.value(a), self.value(g));
        assert_eq!((va.len(), vg.len()), (m * n, m), "row_scale shape");
        let value = va.iter().enumerate().map(|(i, x)| x * vg[i / n]).collect();
        let ng = self.ng(a) || self.ng(g);
        self.push(value, Op::RowScale(a, g, m, n), ng)
    }

    /// Heaviside of `x` (or its smoothed stand-in), surrogate in the backward.
    pub fn spike(&mut self, x: Var) -> Var {
        let mode = self.spike_mode;
        let value = self
            .value(x)
            .iter()
            .map(|&v| {
                if mode.smooth {
                    mode.surrogate.soft(v)
                } else if v >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let ng = self.ng(x);
        self.push(value, Op::Spike(x, mode.surrogate), ng)
    }

    /// Like [`Tape::spike`] but with a caller-provided hard forward value.
    /// Smooth mode still uses the surrogate's antiderivative of `x`.
    pub fn spike_forced(&mut self, x: Var, hard: Vec<f64>) -> Var {
        let mode = self.spike_mode;
        let value = if mode.smooth {
            self.value(x).iter().map(|&v| mode.surrogate.soft(v)).collect()
        } else {
            assert_eq!(hard.len(), self.value(x).len());
            hard
        };
        let ng = self.ng(x);
        self.push(value, Op::Spike(x, mode.surrogate), ng)
    }

    pub fn softmax_rows(&mut self, a: Var, m: usize, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), m * n);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &va[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= z;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a, m, n), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mx = va.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + va.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        let value = va.iter().map(|x| x - lse).collect();
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// Rows `index` of `a[_, n]`, in that order.
    pub fn gather_rows(&mut self, a: Var, index: &[usize], n: usize) -> Var {
        let va = self.value(a);
        let mut value = Vec::with_capacity(index.len() * n);
        for &r in index {
            value.extend_from_slice(&va[r * n..(r + 1) * n]);
        }
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, index.to_vec(), n), ng)
    }

    pub fn gather(&mut self, a: Var, index: &[usize]) -> Var {
        let va = self.value(a);
        let value = index.iter().map(|&i| va[i]).collect();
        let ng = self.ng(a);
        self.push(value, Op::Gather(a, index.to_vec()), ng)
    }

    /// Columns `start..start + len` of `a[m,n]`.
    pub fn slice_cols(&mut self, a: Var, m: usize, n: usize, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let mut value = Vec::with_capacity(m * len);
        for i in 0..m {
            value.extend_from_slice(&va[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, m, n, start, len), ng)
    }

    /// Horizontal concatenation of `[m, n_i]` blocks.
    pub fn concat_cols(&mut self, parts: &[(Var, usize)], m: usize) -> Var {
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut value = vec![0.0; m * total];
        let mut off = 0;
        for &(v, w) in parts {
            let vv = self.value(v);
            assert_eq!(vv.len(), m * w, "concat_cols part shape");
            for i in 0..m {
                value[i * total + off..i * total + off + w].copy_from_slice(&vv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(value, Op::ConcatCols(parts.to_vec(), m), ng)
    }

    pub fn transpose(&mut self, a: Var, m: usize, n: usize) -> Var {
        let va = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = va[i * n + j];
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a, m, n), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![s], Op::Sum(a), ng)
    }

    /// Column means of `a[m,n]` -> `[n]`.
    pub fn mean_rows(&mut self, a: Var, m: usize, n: usize) -> Var {
        let va = self.value(a);
        let mut value = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                value[j] += va[i * n + j];
            }
        }
        for v in &mut value {
            *v /= m as f64;
        }
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a, m, n), ng)
    }

    /// Row means of `a[m,n]` -> `[m]`.
    pub fn mean_cols(&mut self, a: Var, m: usize, n: usize) -> Var {
        let va = self.value(a);
        let value = (0..m)
            .map(|i| va[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let ng = self.ng(a);
        self.push(value, Op::MeanCols(a, m, n), ng)
    }

    /// Repeats `a[m]` across `n` columns -> `[m,n]`.
    pub fn broadcast_cols(&mut self, a: Var, m: usize, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), m);
        let value = (0..m * n).map(|i| va[i / n]).collect();
        let ng = self.ng(a);
        self.push(value, Op::BroadcastCols(a, m, n), ng)
    }

    /// Flat concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    /// Flat slice `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a)[start..start + len].to_vec();
        let ng = self.ng(a);
        self.push(value, Op::Slice(a, start), ng)
    }

    /// Zero-padded 2-D cross-correlation of `x[cin,h,w]` with
    /// `k[cout,cin,kh,kw]`. Returns the output and its `(ho, wo)`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        (cin, h, w): (usize, usize, usize),
        (cout, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> (Var, usize, usize) {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let (vx, vk) = (self.value(x), self.value(k));
        assert_eq!(vx.len(), cin * h * w, "conv input shape");
        assert_eq!(vk.len(), cout * cin * kh * kw, "conv kernel shape");
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for i in 0..cin {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let kv = vk[((o * cin + i) * kh + dy) * kw + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        for y in 0..ho {
                            let sy = (y * stride + dy) as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let xrow = &vx[(i * h + sy as usize) * w..(i * h + sy as usize + 1) * w];
                            let orow = &mut out[(o * ho + y) * wo..(o * ho + y + 1) * wo];
                            for (xo, ov) in orow.iter_mut().enumerate() {
                                let sx = (xo * stride + dx) as isize - pad as isize;
                                if sx >= 0 && sx < w as isize {
                                    *ov += kv * xrow[sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.count((cout * ho * wo * cin * kh * kw) as u64);
        let ng = self.ng(x) || self.ng(k);
        let conv = Conv {
            x,
            k,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        (self.push(out, Op::Conv2d(Box::new(conv)), ng), ho, wo)
    }

    /// `(a - min) / (max - min)`, all zeros when the range is empty.
    pub fn min_max_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (mut lo, mut hi) = (0, 0);
        for (i, &x) in va.iter().enumerate() {
            if x < va[lo] {
                lo = i;
            }
            if x > va[hi] {
                hi = i;
            }
        }
        let range = if va.is_empty() { 0.0 } else { va[hi] - va[lo] };
        if range > 0.0 {
            let value = va.iter().map(|x| (x - va[lo]) / range).collect();
            let ng = self.ng(a);
            self.push(value, Op::MinMax(a, Some((lo, hi))), ng)
        } else {
            let value = vec![0.0; va.len()];
            self.push(value, Op::MinMax(a, None), false)
        }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0; self.nodes[output.0].value.len()]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, *c);
                }
            }
            Op::Offset(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, 1.0);
                }
            }
            Op::Exp(a) => self.elementwise(grads, *a, g, |i, _| y[i]),
            Op::Log(a) => {
                let va = self.value(*a);
                self.elementwise(grads, *a, g, |i, _| 1.0 / va[i])
            }
            Op::Logistic(a) => self.elementwise(grads, *a, g, |i, _| y[i] * (1.0 - y[i])),
            Op::Softplus(a) => {
                let va = self.value(*a);
                self.elementwise(grads, *a, g, |i, _| logistic(va[i]))
            }
            Op::Tanh(a) => self.elementwise(grads, *a, g, |i, _| 1.0 - y[i] * y[i]),
            Op::Spike(x, s) => {
                let vx = self.value(*x);
                self.elementwise(grads, *x, g, |i, _| s.grad(vx[i]))
            }
            Op::ScalarMul(a, s) => {
                let k = self.scalar(*s);
                let va = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, k);
                }
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += g.iter().zip(va).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            &Op::MatMul(a, b, m, k, n) => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    // dA = dC @ B^T
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            ga[i * k + p] += g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    // dB = A^T @ dC
                    for i in 0..m {
                        for p in 0..k {
                            let x = va[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += x * gv;
                            }
                        }
                    }
                }
            }
            &Op::MatMulBt(a, b, m, k, n) => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * vb[j * k + p];
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                gb[j * k + p] += gij * va[i * k + p];
                            }
                        }
                    }
                }
            }
            &Op::AddBias(a, b, _m, n) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.acc(grads, b) {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                }
            }
            &Op::AddPerRow(a, b, _m, n) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.acc(grads, b) {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i / n] += gv;
                    }
                }
            }
            &Op::RowScale(a, s, _m, n) => {
                let (va, vs) = (self.value(a), self.value(s));
                if let Some(ga) = self.acc(grads, a) {
                    for (i, gv) in g.iter().enumerate() {
                        ga[i] += gv * vs[i / n];
                    }
                }
                if let Some(gs) = self.acc(grads, s) {
                    for (i, gv) in g.iter().enumerate() {
                        gs[i / n] += gv * va[i];
                    }
                }
            }
            &Op::SoftmaxRows(a, m, n) => {
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(x, z)| x * z).sum();
                        for j in r {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let total: f64 = g.iter().sum();
                    for i in 0..g.len() {
                        ga[i] += g[i] - y[i].exp() * total;
                    }
                }
            }
            Op::GatherRows(a, index, n) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (row, &src) in index.iter().enumerate() {
                        for j in 0..*n {
                            ga[src * n + j] += g[row * n + j];
                        }
                    }
                }
            }
            Op::Gather(a, index) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &src) in index.iter().enumerate() {
                        ga[src] += g[i];
                    }
                }
            }
            &Op::SliceCols(a, m, n, start, len) => {
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        for j in 0..len {
                            ga[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts, m) => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(v, w) in parts {
                    if let Some(gv) = self.acc(grads, v) {
                        for i in 0..*m {
                            for j in 0..w {
                                gv[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::Transpose(a, m, n) => {
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            &Op::MeanRows(a, m, n) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i % n] / m as f64;
                    }
                }
            }
            &Op::MeanCols(a, _m, n) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i / n] / n as f64;
                    }
                }
            }
            &Op::BroadcastCols(a, _m, n) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (i, gv) in g.iter().enumerate() {
                        ga[i / n] += gv;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        axpy(gp, &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            &Op::Slice(a, start) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(&mut ga[start..start + g.len()], g, 1.0);
                }
            }
            Op::Conv2d(c) => self.conv_backward(c, g, grads),
            &Op::MinMax(a, Some((lo, hi))) => {
                let va = self.value(a);
                let range = va[hi] - va[lo];
                if let Some(ga) = self.acc(grads, a) {
                    let mut to_lo = 0.0;
                    let mut to_hi = 0.0;
                    for i in 0..g.len() {
                        ga[i] += g[i] / range;
                        to_lo += g[i] * (y[i] - 1.0) / range;
                        to_hi -= g[i] * y[i] / range;
                    }
                    ga[lo] += to_lo;
                    ga[hi] += to_hi;
                }
            }
            Op::MinMax(_, None) => {}
        }
    }

    fn elementwise(&self, grads: &mut [Option<Vec<f64>>], a: Var, g: &[f64], d: impl Fn(usize, f64) -> f64) {
        if let Some(ga) = self.acc(grads, a) {
            for i in 0..g.len() {
                ga[i] += g[i] * d(i, g[i]);
            }
        }
    }

    fn conv_backward(&self, c: &Conv, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (vx, vk) = (self.value(c.x), self.value(c.k));
        let tap = |y: usize, d: usize, size: usize| -> Option<usize> {
            let s = (y * c.stride + d) as isize - c.pad as isize;
            (s >= 0 && s < size as isize).then_some(s as usize)
        };
        if let Some(gx) = self.acc(grads, c.x) {
            for o in 0..c.cout {
                for i in 0..c.cin {
                    for dy in 0..c.kh {
                        for dx in 0..c.kw {
                            let kv = vk[((o * c.cin + i) * c.kh + dy) * c.kw + dx];
                            if kv == 0.0 {
                                continue;
                            }
                            for y in 0..c.ho {
                                let Some(sy) = tap(y, dy, c.h) else { continue };
                                for x in 0..c.wo {
                                    let Some(sx) = tap(x, dx, c.w) else { continue };
                                    gx[(i * c.h + sy) * c.w + sx] += kv * g[(o * c.ho + y) * c.wo + x];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(gk) = self.acc(grads, c.k) {
            for o in 0..c.cout {
                for i in 0..c.cin {
                    for dy in 0..c.kh {
                        for dx in 0..c.kw {
                            let mut s = 0.0;
                            for y in 0..c.ho {
                                let Some(sy) = tap(y, dy, c.h) else { continue };
                                for x in 0..c.wo {
                                    let Some(sx) = tap(x, dx, c.w) else { continue };
                                    s += vx[(i * c.h + sy) * c.w + sx] * g[(o * c.ho + y) * c.wo + x];
                                }
                            }
                            gk[((o * c.cin + i) * c.kh + dy) * c.kw + dx] += s;
                        }
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Adjoints from [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, `None` if it does not
    /// depend on `v`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around `x0` against the tape gradient.
    fn check(x0: &[f64], build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::default();
        let x = tape.param(x0.to_vec());
        let out = build(&mut tape, x);
        let out = tape.sum(out);
        let g = tape
            .backward(out)
            .get(x)
            .map(<[f64]>::to_vec)
            .unwrap_or(vec![0.0; x0.len()]);
        let eval = |xs: Vec<f64>| {
            let mut t = Tape::default();
            let v = t.param(xs);
            let o = build(&mut t, v);
            let o = t.sum(o);
            t.scalar(o)
        };
        for i in 0..x0.len() {
            let h = 1e-6;
            let mut p = x0.to_vec();
            p[i] += h;
            let mut m = x0.to_vec();
            m[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "component {i}: fd {fd} vs tape {}",
                g[i]
            );
        }
    }

    const X6: [f64; 6] = [0.3, -1.2, 0.7, 2.1, -0.4, 0.05];

    #[test]
    fn elementwise_ops() {
        check(&X6, |t, x| {
            let a = t.exp(x);
            let b = t.logistic(x);
            let c = t.mul(a, b);
            let d = t.tanh(c);
            let e = t.softplus(d);
            let sq = t.mul(x, x);
            let f = t.offset(sq, 1.0);
            let g = t.ln(f);
            let h = t.sub(e, g);
            t.scale(h, 1.7)
        });
    }

    #[test]
    fn matmul_and_transpose_ops() {
        check(&X6, |t, x| {
            let w = t.constant(vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7]);
            let a = t.matmul(x, w, 2, 3, 2);
            let b = t.matmul_bt(x, x, 2, 3, 2);
            let s = t.add(a, b);
            let tr = t.transpose(s, 2, 2);
            let sq = t.mul(tr, s);
            let bias = t.slice(x, 1, 2);
            t.add_bias(sq, bias, 2, 2)
        });
    }

    #[test]
    fn softmax_and_reductions() {
        check(&X6, |t, x| {
            let s = t.softmax_rows(x, 2, 3);
            let w = t.constant(vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
            let sw = t.mul(s, w);
            let l = t.log_softmax(x);
            let mr = t.mean_rows(sw, 2, 3);
            let mc = t.mean_cols(x, 2, 3);
            let bc = t.broadcast_cols(mc, 2, 3);
            let mix = t.mul(bc, l);
            let parts = t.concat(&[mr, mix]);
            let sc = t.slice(x, 0, 1);
            t.scalar_mul(parts, sc)
        });
    }

    #[test]
    fn gathers_slices_and_scales() {
        check(&X6, |t, x| {
            let rows = t.gather_rows(x, &[2, 0, 2], 2);
            let g = t.gather(x, &[5, 1, 1]);
            let rs = t.row_scale(rows, g, 3, 2);
            let sl = t.slice_cols(x, 3, 2, 1, 1);
            let pr = t.add_per_row(rs, sl, 3, 2);
            let cat = t.concat_cols(&[(pr, 2), (sl, 1)], 3);
            let sq = t.mul(cat, cat);
            t.sum(sq)
        });
    }

    #[test]
    fn min_max_normalize_grad() {
        check(&X6, |t, x| {
            let n = t.min_max_normalize(x);
            let w = t.constant(vec![0.2, 1.0, -0.5, 0.3, 2.0, 0.7]);
            t.mul(n, w)
        });
    }

    #[test]
    fn conv_grad_with_stride_and_padding() {
        let x0: Vec<f64> = (0..2 * 4 * 4).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
        for (k, stride, pad) in [(3, 1, 1), (2, 2, 0)] {
            let kern: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 5 % 7) as f64 - 3.0) / 5.0).collect();
            check(&x0, |t, x| {
                let kv = t.constant(kern.clone());
                let (y, _, _) = t.conv2d(x, kv, (2, 4, 4), (3, k, k), stride, pad);
                let y2 = t.mul(y, y);
                t.sum(y2)
            });
            check(&kern, |t, kv| {
                let x = t.constant(x0.clone());
                let (y, _, _) = t.conv2d(x, kv, (2, 4, 4), (3, k, k), stride, pad);
                let y2 = t.mul(y, y);
                t.sum(y2)
            });
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut t = Tape::default();
        let x = t.constant((0..9).map(f64::from).collect());
        let k = t.constant(vec![1.0, 0.0, 0.0, -1.0]);
        let (y, ho, wo) = t.conv2d(x, k, (1, 3, 3), (1, 2, 2), 1, 0);
        assert_eq!((ho, wo), (2, 2));
        assert_eq!(t.value(y), &[-4.0, -4.0, -4.0, -4.0]);
        assert_eq!(t.macs(), &[("other", 16)]);
    }

    #[test]
    fn smooth_spike_grad_matches() {
        let xs = [0.3, -0.2, 0.05, -0.45, 1.3, -2.0];
        let mut t = Tape::new(SpikeMode {
            surrogate: Surrogate::FastSigmoid { width: 0.5 },
            smooth: true,
        });
        let x = t.param(xs.to_vec());
        let s = t.spike(x);
        let o = t.sum(s);
        let g = t.backward(o).get(x).unwrap().to_vec();
        for (i, &v) in xs.iter().enumerate() {
            assert_eq!(g[i], Surrogate::FastSigmoid { width: 0.5 }.grad(v));
        }
    }

    #[test]
    fn hard_spike_forward_is_heaviside() {
        let mut t = Tape::default();
        let x = t.param(vec![-0.1, 0.0, 0.2]);
        let s = t.spike(x);
        assert_eq!(t.value(s), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn stage_counter_accumulates() {
        let mut t = Tape::default();
        let a = t.constant(vec![1.0; 6]);
        t.set_stage("first");
        t.matmul(a, a, 2, 3, 2);
        t.set_stage("second");
        t.matmul_bt(a, a, 3, 2, 3);
        t.set_stage("first");
        t.matmul(a, a, 3, 2, 3);
        assert_eq!(t.macs(), &[("first", 12 + 18), ("second", 18)]);
        assert_eq!(t.stage_macs("second"), 18);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::default();
        let c = t.constant(vec![1.0, 2.0]);
        let p = t.param(vec![3.0, 4.0]);
        let m = t.mul(c, p);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softplus_inverse() {
        for y in [0.01, 0.5, 1.0, 3.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12);
        }
    }
}
