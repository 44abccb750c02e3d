//! Vector primitives with hand-written gradients, a finite-difference gradient
//! checker, and the repository's deterministic random stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// The random generator used everywhere in the toolkit: ChaCha with 8 rounds, seeded
/// from a 64-bit value through `SeedableRng::seed_from_u64`. Its output is specified
/// independently of platform and word size.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::Evaluation("non-finite vector norm".into()));
    }
    if n == 0.0 {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Vector-Jacobian product of `v / ||v||`: `(g - u (u.g)) / ||v||` with `u` the normalized
/// vector.
pub fn l2_normalize_backward(v: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    let ug: f64 = v.iter().zip(upstream).map(|(x, g)| x * g).sum::<f64>() / n;
    Ok(v.iter().zip(upstream).map(|(x, g)| (g - x / n * ug) / n).collect())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Gradients of `||a - b||` scaled by `upstream`, w.r.t. `a` and `b`. At `a == b` the
/// subgradient 0 is returned.
pub fn euclidean_backward(a: &[f64], b: &[f64], upstream: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = euclidean(a, b)?;
    if d == 0.0 {
        return Ok((vec![0.0; a.len()], vec![0.0; b.len()]));
    }
    let ga: Vec<f64> = a.iter().zip(b).map(|(x, y)| upstream * (x - y) / d).collect();
    let gb = ga.iter().map(|g| -g).collect();
    Ok((ga, gb))
}

/// A differentiable map from a flat input vector to a flat output vector.
pub trait DiffOp {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Vector-Jacobian product at `x` with cotangent `upstream`.
    fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>>;

    /// Distance from `x` to the nearest point where the op is not differentiable.
    fn smoothness_margin(&self, _x: &[f64]) -> f64 {
        f64::INFINITY
    }
}

/// Points closer than this to a kink are not gradient-checked.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Worst relative error per input coordinate, over all outputs.
    pub per_parameter_errors: Vec<f64>,
    pub passed: bool,
    /// The point lies within [`KINK_MARGIN`] of a non-smooth point and was not checked.
    pub skipped: bool,
}

/// Compares the analytic Jacobian (one backward pass per output coordinate) against
/// central differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every input coordinate.
/// Relative error is `|analytic - numeric| / max(1, |analytic|)`.
pub fn fd_check(op: &dyn DiffOp, point: &[f64], eps: f64, tol: f64) -> Result<FdReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    if op.smoothness_margin(point) < KINK_MARGIN {
        return Ok(FdReport {
            max_rel_error: 0.0,
            per_parameter_errors: vec![0.0; point.len()],
            passed: true,
            skipped: true,
        });
    }
    let y0 = op.forward(point)?;
    check_finite(&y0)?;
    let n_out = y0.len();

    let mut jac = Vec::with_capacity(n_out);
    let mut basis = vec![0.0; n_out];
    for k in 0..n_out {
        basis[k] = 1.0;
        jac.push(op.backward(point, &basis)?);
        basis[k] = 0.0;
    }

    let mut per_parameter_errors = vec![0.0f64; point.len()];
    let mut x = point.to_vec();
    for j in 0..point.len() {
        let orig = x[j];
        x[j] = orig + eps;
        let plus = op.forward(&x)?;
        x[j] = orig - eps;
        let minus = op.forward(&x)?;
        x[j] = orig;
        check_finite(&plus)?;
        check_finite(&minus)?;
        for k in 0..n_out {
            let numeric = (plus[k] - minus[k]) / (2.0 * eps);
            let analytic = jac[k][j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            per_parameter_errors[j] = per_parameter_errors[j].max(rel);
        }
    }
    let max_rel_error = per_parameter_errors.iter().copied().fold(0.0, f64::max);
    Ok(FdReport { max_rel_error, per_parameter_errors, passed: max_rel_error <= tol, skipped: false })
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Evaluation("non-finite forward value".into()))
    }
}

/// `x -> x / ||x||` as a [`DiffOp`].
pub struct NormalizeOp;

impl DiffOp for NormalizeOp {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        l2_normalize(x)
    }
    fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        l2_normalize_backward(x, upstream)
    }
}

/// `[a; b] -> ||a - b||` over a concatenated input of two equal halves.
pub struct EuclideanOp;

impl DiffOp for EuclideanOp {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (a, b) = x.split_at(x.len() / 2);
        Ok(vec![euclidean(a, b)?])
    }
    fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let (a, b) = x.split_at(x.len() / 2);
        let (mut ga, gb) = euclidean_backward(a, b, upstream[0])?;
        ga.extend(gb);
        Ok(ga)
    }
    fn smoothness_margin(&self, x: &[f64]) -> f64 {
        let (a, b) = x.split_at(x.len() / 2);
        euclidean(a, b).unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    struct Linear(Vec<f64>);
    impl DiffOp for Linear {
        fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![dot(&self.0, x)])
        }
        fn backward(&self, _x: &[f64], up: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.iter().map(|w| w * up[0]).collect())
        }
    }

    struct Constant;
    impl DiffOp for Constant {
        fn forward(&self, _x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![4.0])
        }
        fn backward(&self, x: &[f64], _up: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; x.len()])
        }
    }

    struct Blowup;
    impl DiffOp for Blowup {
        fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![1.0 / (x[0] - 1.0)])
        }
        fn backward(&self, x: &[f64], up: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![-up[0] / (x[0] - 1.0).powi(2)])
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::Degenerate(_))));
        let r = fd_check(&NormalizeOp, &[1.0, 1.0], 1e-6, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn normalize_unit_norm_property() {
        let mut rng = seeded_rng(11);
        for _ in 0..1000 {
            let dim = rng.gen_range(1..40);
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-100.0..100.0)).collect();
            if norm(&v) == 0.0 {
                continue;
            }
            let u = l2_normalize(&v).unwrap();
            assert!((norm(&u) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(euclidean(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(euclidean(&[0.0], &[0.0, 1.0]).is_err());
        let mut rng = seeded_rng(5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = fd_check(&EuclideanOp, &x, 1e-6, 1e-6).unwrap();
            assert!(r.passed && !r.skipped, "{r:?}");
        }
    }

    #[test]
    fn fd_check_linear_and_constant() {
        let r = fd_check(&Linear(vec![2.0, -3.0, 0.5]), &[0.3, 7.0, -1.0], 1e-5, 1e-9).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        let r = fd_check(&Constant, &[1.0, 2.0], 1e-5, 1e-12).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn fd_check_flags_wrong_gradient_and_non_finite() {
        struct Wrong;
        impl DiffOp for Wrong {
            fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![x[0] * x[0]])
            }
            fn backward(&self, x: &[f64], up: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![x[0] * up[0]])
            }
        }
        assert!(!fd_check(&Wrong, &[2.0], 1e-5, 1e-4).unwrap().passed);
        assert!(matches!(fd_check(&Blowup, &[1.0], 1e-5, 1e-4), Err(Error::Evaluation(_))));
    }

    #[test]
    fn fd_check_skips_kinks() {
        let r = fd_check(&EuclideanOp, &[1.0, 1.0 + 1e-4], 1e-5, 1e-4).unwrap();
        assert!(r.skipped);
    }

    #[test]
    fn rng_determinism_and_uniform_mean() {
        let a: Vec<u64> = (0..1000).scan(seeded_rng(42), |r, _| Some(r.gen())).collect();
        let b: Vec<u64> = (0..1000).scan(seeded_rng(42), |r, _| Some(r.gen())).collect();
        assert_eq!(a, b);
        let c: Vec<u64> = (0..1000).scan(seeded_rng(1), |r, _| Some(r.gen())).collect();
        let d: Vec<u64> = (0..1000).scan(seeded_rng(2), |r, _| Some(r.gen())).collect();
        assert_ne!(c, d);
        let mut rng = seeded_rng(7);
        let mean = (0..1_000_000).map(|_| rng.gen::<f64>()).sum::<f64>() / 1e6;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }
}
