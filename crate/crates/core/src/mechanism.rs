//! Laplace noise, the per-query benchmark mechanism and the privacy ledger.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Database;
use crate::error::{Error, Result};
use crate::query::{exact_count, Query};

/// Seeded Laplace sampler on a ChaCha20 stream.
///
/// `(seed, stream)` fixes the whole sample sequence; `position` counts the
/// draws taken so far.
#[derive(Debug, Clone)]
pub struct LaplaceSampler {
    seed: u64,
    stream: u64,
    position: u64,
    rng: ChaCha20Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl LaplaceSampler {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        LaplaceSampler {
            seed,
            stream,
            position: 0,
            rng,
        }
    }

    /// Independent sampler on a stream derived from this one's and `tag`.
    pub fn fork(&self, tag: u64) -> LaplaceSampler {
        let stream = splitmix64(self.stream ^ splitmix64(tag.wrapping_add(1)));
        LaplaceSampler::with_stream(self.seed, stream)
    }

    /// Fork on a tag drawn from this sampler, advancing it by one position.
    /// Repeated splits yield distinct child streams.
    pub fn split(&mut self) -> LaplaceSampler {
        let tag = self.rng.gen::<u64>();
        self.position += 1;
        self.fork(tag)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// One draw from Lap(scale), by inverse CDF.
    pub fn sample(&mut self, scale: f64) -> Result<f64> {
        if scale <= 0.0 || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "Laplace scale must be positive and finite, got {scale}"
            )));
        }
        let u = loop {
            let u = self.rng.gen::<f64>() - 0.5;
            if u != -0.5 {
                break u;
            }
        };
        self.position += 1;
        Ok(-scale * u.signum() * (-2.0 * u.abs()).ln_1p())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Charge {
    pub label: String,
    pub epsilon: f64,
}

/// Relative slack that absorbs rounding when a budget is split into equal
/// shares, so that `Q` charges of `B / Q` fit into `B`.
const BUDGET_REL_TOL: f64 = 1e-12;

/// Running total of charges against a fixed budget. A charge that does not
/// fit is rejected before anything is recorded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyAccountant {
    budget: f64,
    ledger: Vec<Charge>,
    #[serde(skip)]
    sum: NeumaierSum,
}

impl PrivacyAccountant {
    pub fn new(budget: f64) -> Result<Self> {
        if budget < 0.0 || !budget.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "budget must be a non-negative finite number, got {budget}"
            )));
        }
        Ok(PrivacyAccountant {
            budget,
            ledger: Vec::new(),
            sum: NeumaierSum::default(),
        })
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn spent(&self) -> f64 {
        self.sum.value()
    }

    pub fn remaining(&self) -> f64 {
        (self.budget - self.spent()).max(0.0)
    }

    pub fn ledger(&self) -> &[Charge] {
        &self.ledger
    }

    pub fn can_afford(&self, eps: f64) -> bool {
        let mut s = self.sum.clone();
        s.add(eps);
        s.value() <= self.budget * (1.0 + BUDGET_REL_TOL)
    }

    pub fn charge(&mut self, label: impl Into<String>, eps: f64) -> Result<()> {
        self.charge_all([(label.into(), eps)])
    }

    /// Records all charges or none of them.
    pub fn charge_all<L: Into<String>>(
        &mut self,
        charges: impl IntoIterator<Item = (L, f64)>,
    ) -> Result<()> {
        let charges: Vec<(String, f64)> = charges.into_iter().map(|(l, e)| (l.into(), e)).collect();
        let mut s = self.sum.clone();
        for (label, eps) in &charges {
            if *eps <= 0.0 || !eps.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "charge `{label}` must be positive and finite, got {eps}"
                )));
            }
            s.add(*eps);
        }
        if s.value() > self.budget * (1.0 + BUDGET_REL_TOL) {
            return Err(Error::BudgetExhausted {
                requested: s.value() - self.spent(),
                remaining: self.remaining(),
            });
        }
        self.sum = s;
        self.ledger.extend(
            charges
                .into_iter()
                .map(|(label, epsilon)| Charge { label, epsilon }),
        );
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("accountant serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let mut acct: PrivacyAccountant = serde_json::from_value(value.clone())?;
        if acct.budget < 0.0 || !acct.budget.is_finite() {
            return Err(Error::Validation("budget must be non-negative".into()));
        }
        for c in &acct.ledger {
            if c.epsilon <= 0.0 || !c.epsilon.is_finite() {
                return Err(Error::Validation(format!(
                    "ledger entry `{}` has a non-positive charge",
                    c.label
                )));
            }
            acct.sum.add(c.epsilon);
        }
        if acct.sum.value() > acct.budget * (1.0 + BUDGET_REL_TOL) {
            return Err(Error::Validation("ledger exceeds budget".into()));
        }
        Ok(acct)
    }
}

/// Compensated summation.
#[derive(Debug, Clone, Default)]
struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Total privacy loss of sequentially composed mechanisms.
pub fn compose(charges: &[f64]) -> f64 {
    let mut s = NeumaierSum::default();
    for &c in charges {
        s.add(c);
    }
    s.value()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyCount {
    pub value: f64,
    pub epsilon_charged: f64,
    /// Set when the value was clamped at zero.
    pub truncated: bool,
}

/// Answers `q` with `N(q) + Lap(1/eps)`. The charge is taken before any
/// noise is drawn; a refused request consumes neither budget nor randomness.
pub fn benchmark_respond(
    db: &Database,
    q: &Query,
    eps: f64,
    acct: &mut PrivacyAccountant,
    sampler: &mut LaplaceSampler,
) -> Result<NoisyCount> {
    benchmark_from_count(exact_count(db, q), eps, acct, sampler)
}

/// [`benchmark_respond`] for a count that is already known.
pub fn benchmark_from_count(
    count: u64,
    eps: f64,
    acct: &mut PrivacyAccountant,
    sampler: &mut LaplaceSampler,
) -> Result<NoisyCount> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive and finite, got {eps}"
        )));
    }
    acct.charge("benchmark", eps)?;
    let noise = sampler.sample(1.0 / eps)?;
    Ok(NoisyCount {
        value: count as f64 + noise,
        epsilon_charged: eps,
        truncated: false,
    })
}

/// Output-layer rounding; internal arithmetic never rounds.
pub fn round_output(value: f64, round: bool) -> f64 {
    if round {
        value.round()
    } else {
        value
    }
}
