//! Log-space primitives shared by every other module, plus a central
//! difference gradient checker.
//!
//! Probabilities are carried as log-probabilities wherever possible and only
//! materialized at interfaces; inverse temperatures up to ~50 make direct
//! exponentiation overflow-prone otherwise.

use std::ops::Deref;

use crate::error::{domain, Error, Result};

/// Default central-difference step for [`grad_check`].
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// A vector of unnormalized log-odds indexed by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        if values.is_empty() {
            return domain("empty logit vector");
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for LogitVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A probability vector over token ids. Entries lie in `[0, 1]` and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Tolerance on the total mass accepted by [`ProbVector::new`].
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return domain("empty probability vector");
        }
        for (i, &p) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return domain(format!("probability {p} at index {i} outside [0, 1]"));
            }
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return domain(format!("probabilities sum to {total}, not 1"));
        }
        Ok(Self(values))
    }

    /// Exponentiates a log-softmax output.
    pub fn from_logprobs(logprobs: &[f64]) -> Result<Self> {
        Self::new(logprobs.iter().map(|l| l.exp()).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => domain(format!("non-finite entry {} at index {i}", v[i])),
        None => Ok(()),
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// `log Σ exp(v_i)` with a max shift. Requires a nonempty, finite vector.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return domain("log_sum_exp of an empty vector");
    }
    check_finite(v)?;
    Ok(lse(v))
}

/// Unchecked variant tolerating `-inf` entries (an all `-inf` input yields `-inf`).
pub(crate) fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    // Summing in index order keeps the result reproducible; permutations
    // only perturb the last ulp.
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let z = log_sum_exp(v)?;
    Ok(v.iter().map(|&x| x - z).collect())
}

pub(crate) fn log_softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let z = lse(v);
    v.iter().map(|&x| x - z).collect()
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    Ok(log_softmax(v)?.into_iter().map(f64::exp).collect())
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    log_softmax_unchecked(v).into_iter().map(f64::exp).collect()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `-Σ target_v · logprobs_v`. Zero-mass target entries contribute nothing.
pub fn soft_cross_entropy(target: &[f64], model_logprobs: &[f64]) -> Result<f64> {
    check_len(target.len(), model_logprobs.len())?;
    Ok(-target
        .iter()
        .zip(model_logprobs)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &l)| t * l)
        .sum::<f64>())
}

/// `KL(p ‖ q) = Σ p_v ln(p_v / q_v)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p.len(), q.len())?;
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::Support { index: i, p: pi });
            }
            acc += pi * (pi.ln() - qi.ln());
        }
    }
    Ok(acc.max(0.0))
}

/// KL between two distributions given as log-probabilities.
pub(crate) fn kl_logspace(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p > 0.0 {
                p * (lp - lq)
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Total variation distance `½ Σ |p_v − q_v|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p.len(), q.len())?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `|analytic_i − numeric_i| / max(1, |analytic_i|)` per coordinate.
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

/// Compares the analytic gradient returned by `f` at `params` against
/// central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h`.
///
/// `f` returns `(loss, gradient)`; only the loss is used at the perturbed points.
pub fn grad_check<F>(mut f: F, params: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-4).contains(&step) {
        return domain(format!(
            "finite-difference step {step} outside [1e-7, 1e-4]"
        ));
    }
    let (loss0, analytic) = f(params)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    check_len(params.len(), analytic.len())?;

    let mut theta = params.to_vec();
    let mut relative_errors = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let (plus, _) = f(&theta)?;
        theta[i] = orig - step;
        let (minus, _) = f(&theta)?;
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        let numeric = (plus - minus) / (2.0 * step);
        relative_errors.push((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
    }
    let (worst_index, max_relative_error) =
        relative_errors
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, 0.0),
                |best, (i, e)| if e > best.1 { (i, e) } else { best },
            );
    Ok(GradCheckReport {
        relative_errors,
        max_relative_error,
        worst_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - LN_2).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + LN_2)).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0, 3f64.ln()]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(log_sum_exp(&[]).is_err());
        assert!(log_sum_exp(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let third = -(3f64.ln());
        for x in log_softmax(&[0.0, 0.0, 0.0]).unwrap() {
            assert!((x - third).abs() < 1e-15);
        }
        for c in [-7.5, 0.0, 123.0] {
            let out = log_softmax(&[c, c + LN_2]).unwrap();
            assert!((out[0] - third).abs() < 1e-12);
            assert!((out[1] - (LN_2 + third)).abs() < 1e-12);
        }
        let out = log_softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((out[0] + 4f64.ln()).abs() < 1e-15);
        assert!((out[1] - (3f64.ln() - 4f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn soft_cross_entropy_examples() {
        let eps: f64 = 1e-300;
        let logprobs = log_softmax(&[0.0, eps.ln(), eps.ln()]).unwrap();
        assert!(
            soft_cross_entropy(&[1.0, 0.0, 0.0], &logprobs)
                .unwrap()
                .abs()
                < 1e-12
        );

        let uniform = vec![-(4f64.ln()); 4];
        let ce = soft_cross_entropy(&[0.25; 4], &uniform).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);

        let t = [0.5, 0.25, 0.25];
        let lt: Vec<f64> = t.iter().map(|x: &f64| x.ln()).collect();
        let ce = soft_cross_entropy(&t, &lt).unwrap();
        assert!((ce - (0.5 * LN_2 + 0.5 * 4f64.ln())).abs() < 1e-15);
        assert!((ce - 1.039721).abs() < 1e-6);

        assert!(matches!(
            soft_cross_entropy(&[1.0], &[0.0, 0.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-15);
        let kl = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap();
        assert!((kl - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);
        assert!((kl - 0.130812).abs() < 1e-6);
        match kl_divergence(&[0.5, 0.5], &[1.0, 0.0]) {
            Err(Error::Support { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected support violation, got {other:?}"),
        }
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(LogitVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let params = [0.3, -1.7, 2.5, 10.0];
        let quad = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((
                p.iter().map(|x| x * x).sum(),
                p.iter().map(|x| 2.0 * x).collect(),
            ))
        };
        let report = grad_check(quad, &params, DEFAULT_FD_STEP).unwrap();
        assert!(report.max_relative_error <= 1e-7, "{report:?}");

        let constant = |p: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((3.0, vec![0.0; p.len()])) };
        let report = grad_check(constant, &params, DEFAULT_FD_STEP).unwrap();
        assert!(report.max_relative_error <= 1e-9);
    }

    #[test]
    fn grad_check_reports_non_finite_coordinate() {
        let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let loss = if p[1] > 1.0 { f64::NAN } else { p[0] };
            Ok((loss, vec![1.0, 0.0]))
        };
        match grad_check(f, &[0.0, 1.0], 1e-6) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        assert!(grad_check(|_| Ok((0.0, vec![0.0])), &[0.0], 1e-2).is_err());
    }

    proptest! {
        #[test]
        fn log_softmax_normalizes(v in prop::collection::vec(-30.0f64..30.0, 1..40)) {
            let total: f64 = log_softmax(&v).unwrap().iter().map(|x| x.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn lse_shift(v in prop::collection::vec(-30.0f64..30.0, 1..40), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = log_sum_exp(&shifted).unwrap();
            let rhs = log_sum_exp(&v).unwrap() + c;
            prop_assert!((lhs - rhs).abs() <= 1e-10);
        }

        #[test]
        fn cross_entropy_of_self_is_entropy(v in prop::collection::vec(-5.0f64..5.0, 2..20)) {
            let lt = log_softmax(&v).unwrap();
            let t: Vec<f64> = lt.iter().map(|x| x.exp()).collect();
            let ce = soft_cross_entropy(&t, &lt).unwrap();
            prop_assert!((ce - entropy(&t)).abs() <= 1e-10);
        }
    }

    #[test]
    fn kl_nonnegative_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let n = rng.gen_range(2..10);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let p = softmax(&a).unwrap();
            let q = softmax(&b).unwrap();
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
        }
    }
}
