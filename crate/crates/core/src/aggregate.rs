//! Temporal aggregation of per-frame descriptors into one sequence descriptor.
//!
//! SeqGeM is the generalized (power) mean taken along the time axis, independently per
//! dimension, with a single learnable exponent `p`:
//!
//! ```text
//! out_j = ( (1/L) * sum_i d_ij^p )^(1/p)
//! ```
//!
//! `p = 1` is average pooling and `p -> inf` approaches max pooling. Each dimension's
//! values are summed in sorted order, so the output is bitwise independent of frame
//! order.

use std::fmt;
use std::str::FromStr;

use crate::diffcore::DiffOp;
use crate::error::{Error, Result};

/// Above this exponent the power mean is evaluated in log space.
pub const LOG_SPACE_P: f64 = 20.0;
pub const DEFAULT_P: f64 = 3.0;
pub const DEFAULT_CLAMP_EPS: f64 = 1e-6;

/// How non-positive frame entries are fed to the power mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// Entries are clamped to `[clamp_eps, inf)`.
    Clamp,
    /// `sign(x)|x|^p` inside the mean, the matching signed root outside.
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqGemParams {
    pub p: f64,
    pub input_mode: InputMode,
    pub clamp_eps: f64,
}

impl Default for SeqGemParams {
    fn default() -> Self {
        Self { p: DEFAULT_P, input_mode: InputMode::Clamp, clamp_eps: DEFAULT_CLAMP_EPS }
    }
}

impl SeqGemParams {
    pub fn with_p(p: f64) -> Self {
        Self { p, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.p > 0.0) || !self.p.is_finite() {
            return Err(Error::invalid(format!("SeqGeM exponent must be positive and finite, got {}", self.p)));
        }
        if !(self.clamp_eps > 0.0) {
            return Err(Error::invalid("clamp_eps must be positive"));
        }
        Ok(())
    }
}

/// `L` frame descriptors of a common dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    data: Vec<f64>,
    len: usize,
    dim: usize,
}

impl FrameStack {
    pub fn new(frames: &[Vec<f64>]) -> Result<Self> {
        let dim = frames.first().map(Vec::len).unwrap_or(0);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::invalid("frames of differing dimension"));
        }
        Self::from_flat(frames.concat(), frames.len(), dim)
    }

    pub fn from_flat(data: Vec<f64>, len: usize, dim: usize) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::invalid("empty frame stack"));
        }
        if data.len() != len * dim {
            return Err(Error::invalid(format!("{} values cannot form {len} frames of dim {dim}", data.len())));
        }
        Ok(Self { data, len, dim })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn reversed(&self) -> Self {
        let data = (0..self.len).rev().flat_map(|i| self.frame(i).iter().copied()).collect();
        Self { data, len: self.len, dim: self.dim }
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        let data = order.iter().flat_map(|&i| self.frame(i).iter().copied()).collect();
        Self { data, len: self.len, dim: self.dim }
    }

    fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(move |i| self.data[i * self.dim + j])
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Clamped power mean of one column, values already clamped and sorted.
fn power_mean(sorted_vals: &[f64], p: f64) -> f64 {
    let l = sorted_vals.len() as f64;
    if p > LOG_SPACE_P {
        let logs: Vec<f64> = sorted_vals.iter().map(|c| c.ln()).collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = logs.iter().map(|lc| (p * (lc - m)).exp()).sum::<f64>().ln();
        (m + (lse - l.ln()) / p).exp()
    } else {
        let s = sorted_vals.iter().map(|c| c.powf(p)).sum::<f64>() / l;
        s.powf(1.0 / p)
    }
}

fn signed_pow(x: f64, p: f64) -> f64 {
    x.signum() * x.abs().powf(p)
}

fn signed_sum(sorted_vals: &[f64], p: f64) -> f64 {
    sorted_vals.iter().map(|&x| signed_pow(x, p)).sum::<f64>() / sorted_vals.len() as f64
}

pub fn seqgem_forward(stack: &FrameStack, params: &SeqGemParams) -> Result<Vec<f64>> {
    params.validate()?;
    let p = params.p;
    let mut out = Vec::with_capacity(stack.dim);
    for j in 0..stack.dim {
        let v = match params.input_mode {
            InputMode::Clamp => {
                let col = sorted(stack.column(j).map(|x| x.max(params.clamp_eps)).collect());
                power_mean(&col, p)
            }
            InputMode::Signed => {
                let col = sorted(stack.column(j).collect());
                signed_pow(signed_sum(&col, p), 1.0 / p)
            }
        };
        if !v.is_finite() {
            return Err(Error::NumericOverflow(format!("SeqGeM output non-finite at dim {j} with p = {p}")));
        }
        out.push(v);
    }
    Ok(out)
}

/// Gradients of SeqGeM w.r.t. the frames (row-major, same layout as the stack) and `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqGemGrads {
    pub frames: Vec<f64>,
    pub p: f64,
}

/// Vector-Jacobian product of [`seqgem_forward`]. Clamped entries receive zero gradient.
pub fn seqgem_backward(stack: &FrameStack, params: &SeqGemParams, upstream: &[f64]) -> Result<SeqGemGrads> {
    params.validate()?;
    if upstream.len() != stack.dim {
        return Err(Error::invalid("upstream dimension differs from the stack dimension"));
    }
    let out = seqgem_forward(stack, params)?;
    let p = params.p;
    let l = stack.len as f64;
    let mut frames = vec![0.0; stack.data.len()];
    let mut grad_p = 0.0;
    for j in 0..stack.dim {
        let g = out[j];
        let up = upstream[j];
        match params.input_mode {
            InputMode::Clamp => {
                let ln_g = g.ln();
                let logs: Vec<f64> = stack.column(j).map(|x| x.max(params.clamp_eps).ln()).collect();
                for (i, (x, lc)) in stack.column(j).zip(&logs).enumerate() {
                    if x >= params.clamp_eps {
                        // d out / d c_i = (1/L) (c_i / g)^(p-1)
                        frames[i * stack.dim + j] = up * ((p - 1.0) * (lc - ln_g)).exp() / l;
                    }
                }
                // d out / d p = (g/p) (sum_i w_i ln c_i - ln g), w = softmax(p ln c)
                let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logs.iter().map(|lc| (p * (lc - m)).exp()).collect();
                let z: f64 = weights.iter().sum();
                let mean_log: f64 = weights.iter().zip(&logs).map(|(w, lc)| w * lc).sum::<f64>() / z;
                grad_p += up * g / p * (mean_log - ln_g);
            }
            InputMode::Signed => {
                let s = signed_sum(&sorted(stack.column(j).collect()), p);
                if s == 0.0 {
                    continue;
                }
                let scale = s.abs().powf(1.0 / p - 1.0) / l;
                for (i, x) in stack.column(j).enumerate() {
                    if x != 0.0 {
                        frames[i * stack.dim + j] = up * x.abs().powf(p - 1.0) * scale;
                    }
                }
                let ds_dp: f64 = stack
                    .column(j)
                    .filter(|x| *x != 0.0)
                    .map(|x| signed_pow(x, p) * x.abs().ln())
                    .sum::<f64>()
                    / l;
                grad_p += up * g * (-s.abs().ln() / (p * p) + ds_dp / (p * s));
            }
        }
    }
    Ok(SeqGemGrads { frames, p: grad_p })
}

/// Fixed aggregators used for comparison with SeqGeM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Avg,
    Max,
    Concat,
}

pub fn baseline_aggregate(kind: BaselineKind, stack: &FrameStack) -> Result<Vec<f64>> {
    if stack.is_empty() {
        return Err(Error::invalid("empty frame stack"));
    }
    Ok(match kind {
        BaselineKind::Avg => (0..stack.dim)
            .map(|j| stack.column(j).sum::<f64>() / stack.len as f64)
            .collect(),
        BaselineKind::Max => (0..stack.dim)
            .map(|j| stack.column(j).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        BaselineKind::Concat => stack.data.clone(),
    })
}

/// Aggregator selection used by evaluation and the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    SeqGem,
    Avg,
    Max,
    Concat,
}

impl Aggregator {
    /// Output dimension for `len` frames of dimension `dim`.
    pub fn output_dim(&self, len: usize, dim: usize) -> usize {
        match self {
            Aggregator::Concat => len * dim,
            _ => dim,
        }
    }

    pub fn is_order_invariant(&self) -> bool {
        !matches!(self, Aggregator::Concat)
    }
}

impl FromStr for Aggregator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seqgem" => Ok(Aggregator::SeqGem),
            "avg" => Ok(Aggregator::Avg),
            "max" => Ok(Aggregator::Max),
            "concat" => Ok(Aggregator::Concat),
            other => Err(Error::invalid(format!("unknown aggregator '{other}'"))),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::SeqGem => "seqgem",
            Aggregator::Avg => "avg",
            Aggregator::Max => "max",
            Aggregator::Concat => "concat",
        })
    }
}

/// SeqGeM over a flat input `[frames (L x dim, row-major)..., p]`.
pub struct SeqGemOp {
    pub len: usize,
    pub dim: usize,
    pub input_mode: InputMode,
    pub clamp_eps: f64,
}

impl SeqGemOp {
    fn split(&self, x: &[f64]) -> Result<(FrameStack, SeqGemParams)> {
        let n = self.len * self.dim;
        let stack = FrameStack::from_flat(x[..n].to_vec(), self.len, self.dim)?;
        let params = SeqGemParams { p: x[n], input_mode: self.input_mode, clamp_eps: self.clamp_eps };
        Ok((stack, params))
    }
}

impl DiffOp for SeqGemOp {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (stack, params) = self.split(x)?;
        seqgem_forward(&stack, &params)
    }

    fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let (stack, params) = self.split(x)?;
        let g = seqgem_backward(&stack, &params, upstream)?;
        let mut out = g.frames;
        out.push(g.p);
        Ok(out)
    }

    fn smoothness_margin(&self, x: &[f64]) -> f64 {
        let n = self.len * self.dim;
        match self.input_mode {
            InputMode::Clamp => x[..n].iter().map(|v| (v - self.clamp_eps).abs()).fold(f64::INFINITY, f64::min),
            InputMode::Signed => x[..n].iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{fd_check, seeded_rng};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn stack(frames: &[&[f64]]) -> FrameStack {
        FrameStack::new(&frames.iter().map(|f| f.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_stack(rng: &mut impl Rng, len: usize, dim: usize, lo: f64, hi: f64) -> FrameStack {
        FrameStack::from_flat((0..len * dim).map(|_| rng.gen_range(lo..hi)).collect(), len, dim).unwrap()
    }

    #[test]
    fn forward_examples() {
        let s = stack(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(seqgem_forward(&s, &SeqGemParams::with_p(1.0)).unwrap(), vec![2.0, 3.0]);

        let same = stack(&[&[5.0, 7.0], &[5.0, 7.0], &[5.0, 7.0]]);
        for p in [0.5, 1.0, 3.0, 10.0, 50.0] {
            let out = seqgem_forward(&same, &SeqGemParams::with_p(p)).unwrap();
            assert!((out[0] - 5.0).abs() < 1e-12 && (out[1] - 7.0).abs() < 1e-12, "p={p} {out:?}");
        }

        // ((1 + 8) / 2)^(1/3) = 4.5^(1/3), evaluated independently in high precision.
        let out = seqgem_forward(&stack(&[&[1.0], &[2.0]]), &SeqGemParams::with_p(3.0)).unwrap();
        assert!((out[0] - 1.650_963_624_447_314_4).abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn forward_errors() {
        assert!(FrameStack::new(&[]).is_err());
        assert!(FrameStack::new(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let s = stack(&[&[1.0]]);
        assert!(seqgem_forward(&s, &SeqGemParams::with_p(0.0)).is_err());
        assert!(seqgem_forward(&s, &SeqGemParams::with_p(-1.0)).is_err());
        let huge = stack(&[&[1e300], &[1e300]]);
        assert!(matches!(
            seqgem_forward(&huge, &SeqGemParams::with_p(2.0)),
            Err(Error::NumericOverflow(_))
        ));
        // Log-space evaluation handles the same values at large p.
        assert!(seqgem_forward(&huge, &SeqGemParams::with_p(40.0)).is_ok());
    }

    #[test]
    fn clamp_mode_clamps_negatives() {
        let s = stack(&[&[-2.0, 4.0]]);
        let out = seqgem_forward(&s, &SeqGemParams::default()).unwrap();
        assert!((out[0] - DEFAULT_CLAMP_EPS).abs() < 1e-18);
        assert!((out[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn signed_mode_keeps_sign() {
        let params = SeqGemParams { p: 3.0, input_mode: InputMode::Signed, clamp_eps: 1e-6 };
        let out = seqgem_forward(&stack(&[&[-1.0], &[-2.0]]), &params).unwrap();
        assert!((out[0] + 4.5f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn backward_examples() {
        let s = stack(&[&[1.0, 2.0], &[3.0, 4.0], &[0.5, 0.1]]);
        let up = [0.7, -1.3];
        let g = seqgem_backward(&s, &SeqGemParams::with_p(1.0), &up).unwrap();
        for i in 0..3 {
            assert!((g.frames[2 * i] - 0.7 / 3.0).abs() < 1e-14);
            assert!((g.frames[2 * i + 1] + 1.3 / 3.0).abs() < 1e-14);
        }
        let same = stack(&[&[5.0, 7.0], &[5.0, 7.0]]);
        let g = seqgem_backward(&same, &SeqGemParams::with_p(3.0), &up).unwrap();
        assert!(g.p.abs() < 1e-12, "{}", g.p);

        let clamped = stack(&[&[-1.0], &[2.0]]);
        let g = seqgem_backward(&clamped, &SeqGemParams::default(), &[1.0]).unwrap();
        assert_eq!(g.frames[0], 0.0);
        assert!(g.frames[1] > 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded_rng(3);
        for (mode, p_lo, p_hi) in [(InputMode::Clamp, 0.5, 8.0), (InputMode::Clamp, 21.0, 40.0), (InputMode::Signed, 1.0, 5.0)] {
            let op = SeqGemOp { len: 4, dim: 3, input_mode: mode, clamp_eps: 1e-6 };
            let mut checked = 0;
            while checked < 20 {
                let mut x: Vec<f64> = random_stack(&mut rng, 4, 3, 0.1, 2.0).as_flat().to_vec();
                if mode == InputMode::Signed {
                    for v in x.iter_mut() {
                        if rng.gen_bool(0.3) {
                            *v = -*v;
                        }
                    }
                }
                x.push(rng.gen_range(p_lo..p_hi));
                let r = fd_check(&op, &x, 1e-5, 1e-4).unwrap();
                if r.skipped {
                    continue;
                }
                assert!(r.passed, "{mode:?}: {r:?}");
                checked += 1;
            }
        }
    }

    #[test]
    fn baseline_examples() {
        let a = stack(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(baseline_aggregate(BaselineKind::Avg, &a).unwrap(), vec![2.0, 3.0]);
        assert_eq!(baseline_aggregate(BaselineKind::Concat, &a).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let b = stack(&[&[1.0, 5.0], &[3.0, 2.0]]);
        assert_eq!(baseline_aggregate(BaselineKind::Max, &b).unwrap(), vec![3.0, 5.0]);
    }

    #[test]
    fn permutation_invariance_is_bitwise() {
        let mut rng = seeded_rng(9);
        for _ in 0..200 {
            let len = rng.gen_range(1..10);
            let s = random_stack(&mut rng, len, 6, -1.0, 3.0);
            let mut order: Vec<usize> = (0..len).collect();
            order.shuffle(&mut rng);
            let params = SeqGemParams::with_p(rng.gen_range(0.5..30.0));
            assert_eq!(seqgem_forward(&s, &params).unwrap(), seqgem_forward(&s.permuted(&order), &params).unwrap());
            assert_eq!(
                baseline_aggregate(BaselineKind::Max, &s).unwrap(),
                baseline_aggregate(BaselineKind::Max, &s.permuted(&order)).unwrap()
            );
        }
    }

    #[test]
    fn single_frame_identity_and_monotone_in_p() {
        let mut rng = seeded_rng(17);
        for _ in 0..100 {
            let one = random_stack(&mut rng, 1, 5, 0.01, 4.0);
            for p in [0.5, 3.0, 25.0] {
                let out = seqgem_forward(&one, &SeqGemParams::with_p(p)).unwrap();
                for (a, b) in out.iter().zip(one.frame(0)) {
                    assert!((a - b).abs() <= 1e-12 * b.abs());
                }
            }
            let s = random_stack(&mut rng, 5, 4, 0.1, 5.0);
            let outs: Vec<Vec<f64>> = [0.5, 1.0, 2.0, 3.0, 8.0]
                .iter()
                .map(|&p| seqgem_forward(&s, &SeqGemParams::with_p(p)).unwrap())
                .collect();
            for w in outs.windows(2) {
                for j in 0..4 {
                    assert!(w[1][j] >= w[0][j] - 1e-12);
                }
            }
        }
    }
}
