//! Utility and order-violation measurements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::query::Query;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub theoretical_utility: f64,
    pub empirical_mse: f64,
    pub relative_utility: f64,
    pub violation_rate: f64,
}

/// Utility of the per-query mechanism at `eps`: `2 / Var = ε²`.
pub fn theoretical_utility_benchmark(eps: f64) -> f64 {
    eps * eps
}

/// Lower bound `ε′² / |Ω|` on the utility of atom sums, attained by a query
/// covering every atom when truncation is ignored.
pub fn theoretical_utility_sigma_bound(eps_atom: f64, omega_size: usize) -> f64 {
    eps_atom * eps_atom / omega_size as f64
}

/// `2 / Var`.
pub fn utility_from_variance(var: f64) -> f64 {
    2.0 / var
}

/// `2 / Var` from repeated answers to one query at fixed data.
pub fn empirical_utility(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::ZeroDivisor("sample variance is zero".into()));
    }
    Ok(utility_from_variance(var))
}

pub fn mse(responses: &[f64], truths: &[f64]) -> Result<f64> {
    if responses.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} responses for {} truths",
            responses.len(),
            truths.len()
        )));
    }
    if responses.is_empty() {
        return Err(Error::InvalidArgument("no responses".into()));
    }
    let s: f64 = responses
        .iter()
        .zip(truths)
        .map(|(r, t)| (r - t) * (r - t))
        .sum();
    Ok(s / responses.len() as f64)
}

/// `MSE(a) / MSE(b)`; above 1 when `b` is the more accurate method.
pub fn empirical_relative_utility(a: &[f64], b: &[f64], truths: &[f64]) -> Result<f64> {
    let ma = mse(a, truths)?;
    let mb = mse(b, truths)?;
    if mb == 0.0 {
        return Err(Error::ZeroDivisor(
            "second response set has zero error".into(),
        ));
    }
    Ok(ma / mb)
}

/// Fraction of nested pairs `(q1 ⊆ q2)` whose answers satisfy
/// `answer(q1) > answer(q2)`. Every pair must actually be nested.
pub fn violation_rate(pairs: &[(Query, Query)], responses: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() != responses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} pairs for {} responses",
            pairs.len(),
            responses.len()
        )));
    }
    if pairs.is_empty() {
        return Ok(0.0);
    }
    if let Some(i) = pairs.iter().position(|(a, b)| !a.is_subset(b)) {
        return Err(Error::Validation(format!("pair {i} is not nested")));
    }
    let v = responses.iter().filter(|(r1, r2)| r1 > r2).count();
    Ok(v as f64 / pairs.len() as f64)
}

/// Bias and second moment of `max(N + Z, 0) − N` for `Z ~ Lap(scale)`.
pub fn truncated_laplace_moments(count: f64, scale: f64) -> (f64, f64) {
    let tail = (-count / scale).exp();
    let mean = 0.5 * scale * tail;
    let second = 2.0 * scale * scale - tail * (count * scale + scale * scale);
    (mean, second)
}

/// Expected squared error of a sum of independently truncated atoms.
pub fn expected_cover_mse(atom_counts: impl IntoIterator<Item = u64>, scale: f64) -> f64 {
    let (mut var, mut bias) = (0.0, 0.0);
    for c in atom_counts {
        let (m, s) = truncated_laplace_moments(c as f64, scale);
        var += s - m * m;
        bias += m;
    }
    var + bias * bias
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Schema;
    use crate::mechanism::{benchmark_from_count, LaplaceSampler, PrivacyAccountant};

    #[test]
    fn closed_forms() {
        assert!((theoretical_utility_benchmark(0.1) - 0.01).abs() < 1e-15);
        assert_eq!(theoretical_utility_benchmark(1.0), 1.0);
        let eps: f64 = 0.37;
        assert!((utility_from_variance(2.0 / (eps * eps)) - eps * eps).abs() < 1e-12);
        assert_eq!(theoretical_utility_sigma_bound(0.3, 1), 0.3 * 0.3);
        assert!((theoretical_utility_sigma_bound(0.1, 4) - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn relative_utility_edge_cases() {
        let t = [1.0, 2.0, 3.0];
        let r = [1.5, 2.5, 2.0];
        assert_eq!(empirical_relative_utility(&r, &r, &t).unwrap(), 1.0);
        assert!(matches!(
            empirical_relative_utility(&r, &t, &t),
            Err(Error::ZeroDivisor(_))
        ));
        assert!(empirical_relative_utility(&r, &r[..2], &t).is_err());
    }

    #[test]
    fn violations_require_nesting() {
        let s = Schema::binary(2).unwrap();
        let inner = Query::parse("c1 IN {1} AND c2 IN {1}", &s).unwrap();
        let outer = Query::parse("c1 IN {1}", &s).unwrap();
        let pairs = vec![
            (inner.clone(), outer.clone()),
            (inner.clone(), outer.clone()),
        ];
        assert_eq!(
            violation_rate(&pairs, &[(1.0, 2.0), (3.0, 2.0)]).unwrap(),
            0.5
        );
        assert_eq!(
            violation_rate(&pairs, &[(2.0, 2.0), (0.0, 2.0)]).unwrap(),
            0.0
        );
        let bad = vec![(outer, inner)];
        assert!(violation_rate(&bad, &[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn benchmark_utility_converges_to_eps_squared() {
        for eps in [0.1, 1.0] {
            let mut acct = PrivacyAccountant::new(1e6).unwrap();
            let mut s = LaplaceSampler::new(17);
            let xs: Vec<f64> = (0..100_000)
                .map(|_| {
                    benchmark_from_count(50, eps, &mut acct, &mut s)
                        .unwrap()
                        .value
                })
                .collect();
            let u = empirical_utility(&xs).unwrap();
            assert!((u - eps * eps).abs() / (eps * eps) < 0.03, "eps {eps}: {u}");
        }
    }

    #[test]
    fn truncated_moments_match_simulation() {
        let mut s = LaplaceSampler::new(23);
        for (count, scale) in [(0.0, 1.0), (1.0, 2.0), (5.0, 1.5), (200.0, 1.0)] {
            let n = 400_000;
            let (mut m1, mut m2) = (0.0, 0.0);
            for _ in 0..n {
                let y = (count + s.sample(scale).unwrap()).max(0.0) - count;
                m1 += y;
                m2 += y * y;
            }
            let (e1, e2) = truncated_laplace_moments(count, scale);
            assert!((m1 / n as f64 - e1).abs() < 0.02 * scale, "{count} {scale}");
            assert!((m2 / n as f64 - e2).abs() / e2 < 0.02, "{count} {scale}");
        }
        // Large counts recover the untruncated variance.
        assert!((expected_cover_mse([1000, 1000], 1.0) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn sigma_bound_is_below_worst_case_measurement() {
        // Four atoms with large counts, all summed: the bound ε′²/|Ω| is
        // half of the measured 2/Var = 2ε′²/|Ω|.
        let eps_atom = 0.5;
        let mut s = LaplaceSampler::new(31);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                (0..4)
                    .map(|_| (1000.0 + s.sample(1.0 / eps_atom).unwrap()).max(0.0))
                    .sum()
            })
            .collect();
        let u = empirical_utility(&xs).unwrap();
        assert!(theoretical_utility_sigma_bound(eps_atom, 4) <= u);
    }
}
