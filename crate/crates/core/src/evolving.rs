//! Repeated answers to one query over a changing table: a single noisy
//! baseline plus exact deltas, paid for once up front for the whole horizon.

use crate::dataset::Database;
use crate::error::{Error, Result};
use crate::mechanism::{LaplaceSampler, NoisyCount, PrivacyAccountant};
use crate::query::{exact_count, Query};

fn check(eps: f64, rho: f64, t: u32) -> Result<()> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive and finite, got {eps}"
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "rho must lie in [0, 1], got {rho}"
        )));
    }
    if t < 1 {
        return Err(Error::InvalidArgument(
            "horizon T must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Privacy loss of a `T`-step trajectory when each individual leaves with
/// probability `rho`: `log((1−ρ)e^ε + ρe^{Tε})`.
pub fn epsilon0(eps: f64, rho: f64, t: u32) -> Result<f64> {
    check(eps, rho, t)?;
    let t_eps = t as f64 * eps;
    if rho == 0.0 || t == 1 {
        return Ok(eps);
    }
    if rho == 1.0 {
        return Ok(t_eps);
    }
    // ε + log(1 + ρ(e^{(T−1)ε} − 1)), falling back to log-sum-exp when the
    // exponent would overflow.
    let tail = (t as f64 - 1.0) * eps;
    let v = if tail < 700.0 {
        eps + (rho * tail.exp_m1()).ln_1p()
    } else {
        let a = (1.0 - rho).ln() + eps;
        let b = rho.ln() + t_eps;
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    };
    Ok(v.clamp(eps, t_eps))
}

/// First-order expansion `ε(1 + ρ(T−1))` of [`epsilon0`] for small `Tε`.
pub fn epsilon0_approx(eps: f64, rho: f64, t: u32) -> f64 {
    eps * (1.0 + rho * (t as f64 - 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolvingSession {
    query: Query,
    baseline_noisy: f64,
    baseline_exact: u64,
    eps_used: f64,
    charged: f64,
    rho: f64,
    t: u32,
    t_max: u32,
}

impl EvolvingSession {
    /// Draws the `t = 1` answer `N(A_1) + Lap(1/eps)` and charges
    /// `epsilon0(eps, rho, t_max)`.
    pub fn open(
        db: &Database,
        query: &Query,
        eps: f64,
        rho: f64,
        t_max: u32,
        acct: &mut PrivacyAccountant,
        sampler: &mut LaplaceSampler,
    ) -> Result<Self> {
        let charged = epsilon0(eps, rho, t_max)?;
        acct.charge("session", charged)?;
        let exact = exact_count(db, query);
        let noise = sampler.sample(1.0 / eps)?;
        Ok(EvolvingSession {
            query: query.clone(),
            baseline_noisy: exact as f64 + noise,
            baseline_exact: exact,
            eps_used: eps,
            charged,
            rho,
            t: 1,
            t_max,
        })
    }

    /// Advances to the next step and answers with the baseline shifted by
    /// the exact change in count. No further charge.
    pub fn respond_t(&mut self, db_t: &Database) -> Result<NoisyCount> {
        let next = self.t + 1;
        if next > self.t_max {
            return Err(Error::HorizonExceeded {
                step: next,
                horizon: self.t_max,
            });
        }
        let now = exact_count(db_t, &self.query);
        self.t = next;
        let delta = now as i64 - self.baseline_exact as i64;
        Ok(NoisyCount {
            value: self.baseline_noisy + delta as f64,
            epsilon_charged: 0.0,
            truncated: false,
        })
    }

    pub fn query(&self) -> &Query {
        &self.query
    }

    pub fn baseline(&self) -> NoisyCount {
        NoisyCount {
            value: self.baseline_noisy,
            epsilon_charged: self.charged,
            truncated: false,
        }
    }

    pub fn baseline_exact(&self) -> u64 {
        self.baseline_exact
    }

    pub fn eps_used(&self) -> f64 {
        self.eps_used
    }

    pub fn charged(&self) -> f64 {
        self.charged
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn t_max(&self) -> u32 {
        self.t_max
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{RowDelta, Schema};

    #[test]
    fn formula_examples() {
        assert_eq!(epsilon0(0.01, 0.0, 10).unwrap(), 0.01);
        assert!((epsilon0(0.01, 1.0, 10).unwrap() - 0.1).abs() < 1e-15);
        let direct = (0.9f64 * 0.01f64.exp() + 0.1 * 0.1f64.exp()).ln();
        let v = epsilon0(0.01, 0.1, 10).unwrap();
        assert!((v - direct).abs() < 1e-15);
        assert!((v - 0.019373).abs() < 1e-6);
        assert!(epsilon0(0.01, 1.5, 10).is_err());
        assert!(epsilon0(0.01, 0.5, 0).is_err());
        assert!(epsilon0(0.0, 0.5, 3).is_err());
    }

    #[test]
    fn large_exponents_do_not_overflow() {
        let v = epsilon0(10.0, 0.5, 200).unwrap();
        assert!(v.is_finite());
        assert!((v - (2000.0 + 0.5f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn approximation_examples() {
        assert_eq!(epsilon0_approx(0.3, 0.0, 9), 0.3);
        assert_eq!(epsilon0_approx(0.3, 0.7, 1), 0.3);
        let a = epsilon0_approx(0.01, 0.1, 10);
        assert!((a - 0.019).abs() < 1e-15);
        let e = epsilon0(0.01, 0.1, 10).unwrap();
        assert!((a - e).abs() / e < 0.02);
    }

    fn schema() -> Schema {
        Schema::binary(2).unwrap()
    }

    fn row(a: &str, b: &str) -> Vec<String> {
        vec![a.to_string(), b.to_string()]
    }

    #[test]
    fn session_tracks_exact_deltas() {
        let s = schema();
        let mut db = Database::from_labels(s.clone(), vec![row("1", "0"), row("0", "0")]).unwrap();
        let q = Query::parse("c1 IN {1}", &s).unwrap();
        let mut acct = PrivacyAccountant::new(1.0).unwrap();
        let mut smp = LaplaceSampler::new(3);
        let mut sess = EvolvingSession::open(&db, &q, 0.01, 0.1, 10, &mut acct, &mut smp).unwrap();
        assert!((acct.spent() - epsilon0(0.01, 0.1, 10).unwrap()).abs() < 1e-15);
        assert_eq!(sess.t(), 1);
        let base = sess.baseline().value;

        let same = sess.respond_t(&db).unwrap();
        assert_eq!(same.value, base);
        assert_eq!(sess.t(), 2);

        for _ in 0..5 {
            db = db.apply_delta(&RowDelta::insert(row("1", "1"), 3)).unwrap();
        }
        let v = sess.respond_t(&db).unwrap();
        assert_eq!(v.value, base + 5.0);
        assert_eq!(v.epsilon_charged, 0.0);
        assert_eq!(acct.ledger().len(), 1);
    }

    #[test]
    fn horizon_is_enforced() {
        let s = schema();
        let db = Database::empty(s.clone());
        let mut acct = PrivacyAccountant::new(1.0).unwrap();
        let mut smp = LaplaceSampler::new(3);
        let mut sess = EvolvingSession::open(
            &db,
            &Query::unconstrained(),
            0.1,
            0.0,
            2,
            &mut acct,
            &mut smp,
        )
        .unwrap();
        sess.respond_t(&db).unwrap();
        assert!(matches!(
            sess.respond_t(&db),
            Err(Error::HorizonExceeded {
                step: 3,
                horizon: 2
            })
        ));
    }

    #[test]
    fn zero_rho_charges_eps_and_huge_eps_is_exact() {
        let s = schema();
        let db = Database::from_labels(s.clone(), vec![row("1", "1"); 7]).unwrap();
        let mut acct = PrivacyAccountant::new(2e9).unwrap();
        let mut smp = LaplaceSampler::new(3);
        let sess = EvolvingSession::open(
            &db,
            &Query::unconstrained(),
            1e9,
            0.0,
            5,
            &mut acct,
            &mut smp,
        )
        .unwrap();
        assert_eq!(acct.spent(), 1e9);
        assert!((sess.baseline().value - 7.0).abs() < 1e-6);
    }

    #[test]
    fn nested_sessions_move_by_exact_delta_difference() {
        let s = schema();
        let mut db = Database::from_labels(s.clone(), vec![row("1", "1"), row("1", "0")]).unwrap();
        let outer = Query::parse("c1 IN {1}", &s).unwrap();
        let inner = Query::parse("c1 IN {1} AND c2 IN {1}", &s).unwrap();
        let mut acct = PrivacyAccountant::new(10.0).unwrap();
        let mut smp = LaplaceSampler::new(9);
        let mut so = EvolvingSession::open(&db, &outer, 0.5, 0.1, 5, &mut acct, &mut smp).unwrap();
        let mut si = EvolvingSession::open(&db, &inner, 0.5, 0.1, 5, &mut acct, &mut smp).unwrap();
        let gap0 = so.baseline().value - si.baseline().value;
        let deltas = [
            RowDelta::insert(row("1", "1"), 2),
            RowDelta::insert(row("1", "0"), 3),
            RowDelta::delete(row("1", "1"), 4),
            RowDelta::insert(row("0", "1"), 5),
        ];
        for d in &deltas {
            db = db.apply_delta(d).unwrap();
            let gap = so.respond_t(&db).unwrap().value - si.respond_t(&db).unwrap().value;
            let true_gap = exact_count(&db, &outer) as f64 - exact_count(&db, &inner) as f64;
            assert_eq!(gap - gap0, true_gap - 1.0);
        }
    }
}
