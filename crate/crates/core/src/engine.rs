//! Online routing: covered queries are answered from materialized algebras
//! at no cost, everything else goes to the per-query mechanism until the
//! budget runs out.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Database, RowDelta};
use crate::error::{Error, Result};
use crate::evolving::EvolvingSession;
use crate::grouping::{induce_plan, perturb_all_with_counts, plan, ClusterPlan};
use crate::mechanism::{
    benchmark_from_count, round_output, LaplaceSampler, NoisyCount, PrivacyAccountant,
};
use crate::query::{exact_count, ActiveSet, Query};
use crate::sigma::{Cover, SigmaAlgebra, DEFAULT_CELL_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub epsilon_budget: f64,
    /// ε for each query answered by the per-query mechanism.
    pub epsilon_per_query: f64,
    /// ε′ per atom at refresh; defaults to `epsilon_per_query`.
    pub epsilon_atom: Option<f64>,
    pub seed: u64,
    pub round_output: bool,
    pub threshold_u: usize,
    pub history_capacity: usize,
    pub cell_cap: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            epsilon_budget: 1.0,
            epsilon_per_query: 0.01,
            epsilon_atom: None,
            seed: 0,
            round_output: false,
            threshold_u: 3,
            history_capacity: 1_000_000,
            cell_cap: DEFAULT_CELL_CAP,
        }
    }
}

impl EngineConfig {
    pub fn eps_atom(&self) -> f64 {
        self.epsilon_atom.unwrap_or(self.epsilon_per_query)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    Sigma,
    Benchmark,
    Refused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub value: f64,
    pub charged: f64,
    pub path: Path,
    pub remaining_budget: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub covered: u64,
    pub uncovered: u64,
    pub rejected: u64,
    pub algebras: usize,
    pub atoms: usize,
    pub spent: f64,
    pub remaining: f64,
    pub budget: f64,
}

impl Stats {
    /// Observed fraction of answered queries that needed the per-query
    /// mechanism.
    pub fn p(&self) -> f64 {
        let answered = self.covered + self.uncovered;
        if answered == 0 {
            0.0
        } else {
            self.uncovered as f64 / answered as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshReport {
    pub new_algebras: usize,
    pub atoms: usize,
    pub charged: f64,
    /// Set when the refresh was skipped.
    pub warning: Option<String>,
}

#[derive(Default)]
struct Registry {
    algebras: Vec<Arc<SigmaAlgebra>>,
    by_mask: HashMap<ActiveSet, Vec<usize>>,
}

impl Registry {
    fn push(&mut self, sa: SigmaAlgebra) {
        let idx = self.algebras.len();
        self.by_mask.entry(sa.mask().clone()).or_default().push(idx);
        self.algebras.push(Arc::new(sa));
    }

    /// Prefers algebras split on exactly the query's active columns, then
    /// any superset, smallest grid first.
    fn route(&self, q: &Query) -> Option<(Arc<SigmaAlgebra>, Cover)> {
        let active = q.active_set();
        if let Some(idxs) = self.by_mask.get(&active) {
            for &i in idxs {
                if let Some(c) = self.algebras[i].cover(q) {
                    return Some((Arc::clone(&self.algebras[i]), c));
                }
            }
        }
        let mut wider: Vec<&Arc<SigmaAlgebra>> = self
            .algebras
            .iter()
            .filter(|sa| sa.mask() != &active && active.is_subset(sa.mask()))
            .collect();
        wider.sort_by_key(|sa| sa.cell_count());
        wider
            .into_iter()
            .find_map(|sa| sa.cover(q).map(|c| (Arc::clone(sa), c)))
    }
}

struct Privacy {
    acct: PrivacyAccountant,
    fallback: LaplaceSampler,
    atoms: LaplaceSampler,
    sessions: LaplaceSampler,
}

pub struct Engine {
    config: EngineConfig,
    db: RwLock<Arc<Database>>,
    registry: RwLock<Registry>,
    privacy: Mutex<Privacy>,
    covered: AtomicU64,
    uncovered: AtomicU64,
    rejected: AtomicU64,
    history: Mutex<VecDeque<Query>>,
    sessions: Mutex<HashMap<u64, EvolvingSession>>,
    next_session: AtomicU64,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Engine {
    pub fn new(db: Database, config: EngineConfig) -> Result<Self> {
        let acct = PrivacyAccountant::new(config.epsilon_budget)?;
        Self::with_accountant(db, config, acct)
    }

    /// Resumes from an existing ledger, e.g. one persisted between runs.
    pub fn with_accountant(
        db: Database,
        config: EngineConfig,
        acct: PrivacyAccountant,
    ) -> Result<Self> {
        if config.epsilon_per_query <= 0.0 || !config.epsilon_per_query.is_finite() {
            return Err(Error::InvalidArgument(
                "epsilon_per_query must be positive and finite".into(),
            ));
        }
        if config.eps_atom() <= 0.0 || !config.eps_atom().is_finite() {
            return Err(Error::InvalidArgument(
                "epsilon_atom must be positive and finite".into(),
            ));
        }
        // Streams are keyed by the number of ledger entries so that a resumed
        // engine never replays noise from an earlier run.
        let root = LaplaceSampler::with_stream(config.seed, acct.ledger().len() as u64);
        Ok(Engine {
            privacy: Mutex::new(Privacy {
                acct,
                fallback: root.fork(1),
                atoms: root.fork(2),
                sessions: root.fork(3),
            }),
            config,
            db: RwLock::new(Arc::new(db)),
            registry: RwLock::new(Registry::default()),
            covered: AtomicU64::new(0),
            uncovered: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
            history: Mutex::new(VecDeque::new()),
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn database(&self) -> Arc<Database> {
        Arc::clone(&self.db.read().unwrap_or_else(|e| e.into_inner()))
    }

    /// Replaces the current snapshot with the next one. Perturbed atom
    /// counts are kept as they are.
    pub fn apply_delta(&self, delta: &RowDelta) -> Result<u64> {
        let mut guard = self.db.write().unwrap_or_else(|e| e.into_inner());
        let next = guard.apply_delta(delta)?;
        let v = next.version();
        *guard = Arc::new(next);
        Ok(v)
    }

    pub fn accountant(&self) -> PrivacyAccountant {
        lock(&self.privacy).acct.clone()
    }

    pub fn remaining_budget(&self) -> f64 {
        lock(&self.privacy).acct.remaining()
    }

    pub fn algebras(&self) -> Vec<Arc<SigmaAlgebra>> {
        self.registry
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .algebras
            .clone()
    }

    pub fn stats(&self) -> Stats {
        let (algebras, atoms) = {
            let r = self.registry.read().unwrap_or_else(|e| e.into_inner());
            (
                r.algebras.len(),
                r.algebras.iter().map(|a| a.n_atoms()).sum(),
            )
        };
        let acct = &lock(&self.privacy).acct;
        Stats {
            covered: self.covered.load(Ordering::Relaxed),
            uncovered: self.uncovered.load(Ordering::Relaxed),
            rejected: self.rejected.load(Ordering::Relaxed),
            algebras,
            atoms,
            spent: acct.spent(),
            remaining: acct.remaining(),
            budget: acct.budget(),
        }
    }

    pub fn history_len(&self) -> usize {
        lock(&self.history).len()
    }

    fn record(&self, q: &Query) {
        if self.config.history_capacity == 0 {
            return;
        }
        let mut h = lock(&self.history);
        if h.len() == self.config.history_capacity {
            h.pop_front();
        }
        h.push_back(q.clone());
    }

    /// Adds an already-perturbed algebra, e.g. one reloaded from disk. Its
    /// charge is not taken again.
    pub fn install(&self, sa: SigmaAlgebra) -> Result<()> {
        if !sa.is_perturbed() {
            return Err(Error::NotPerturbed);
        }
        self.registry
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .push(sa);
        Ok(())
    }

    /// Induces and perturbs every cluster of `plan` against the engine's
    /// ledger, all or nothing.
    pub fn materialize(&self, plan: &ClusterPlan, eps_atom: f64) -> Result<RefreshReport> {
        let algebras = induce_plan(plan, self.database().schema(), self.config.cell_cap)?;
        self.materialize_induced(algebras, eps_atom)
    }

    /// Perturbs freshly induced algebras against the engine's ledger, all or
    /// nothing, and adds them to the routing table.
    pub fn materialize_induced(
        &self,
        algebras: Vec<SigmaAlgebra>,
        eps_atom: f64,
    ) -> Result<RefreshReport> {
        let db = self.database();
        let counts: Vec<Vec<u64>> = algebras.par_iter().map(|sa| sa.atom_counts(&db)).collect();
        self.materialize_counted(algebras, &counts, eps_atom)
    }

    /// [`Engine::materialize_induced`] with exact atom counts supplied by the
    /// caller.
    pub(crate) fn materialize_counted(
        &self,
        mut algebras: Vec<SigmaAlgebra>,
        counts: &[Vec<u64>],
        eps_atom: f64,
    ) -> Result<RefreshReport> {
        let charged: f64 = algebras.iter().map(|sa| sa.charge_for(eps_atom)).sum();
        {
            let mut pv = lock(&self.privacy);
            let Privacy { acct, atoms, .. } = &mut *pv;
            perturb_all_with_counts(&mut algebras, counts, eps_atom, acct, atoms)?;
        }
        let report = RefreshReport {
            new_algebras: algebras.len(),
            atoms: algebras.iter().map(|a| a.n_atoms()).sum(),
            charged,
            warning: None,
        };
        let mut reg = self.registry.write().unwrap_or_else(|e| e.into_inner());
        for sa in algebras {
            reg.push(sa);
        }
        Ok(report)
    }

    /// Re-plans from the history queries that no algebra covers yet and
    /// materializes the result. A refresh the budget cannot pay for changes
    /// nothing and reports a warning.
    pub fn refresh(&self, u: usize) -> Result<RefreshReport> {
        let pending: Vec<Query> = {
            let h = lock(&self.history);
            let reg = self.registry.read().unwrap_or_else(|e| e.into_inner());
            h.iter()
                .filter(|q| reg.route(q).is_none())
                .cloned()
                .collect()
        };
        let plan = plan(&pending, u)?;
        if plan.clusters.is_empty() {
            return Ok(RefreshReport {
                new_algebras: 0,
                atoms: 0,
                charged: 0.0,
                warning: None,
            });
        }
        match self.materialize(&plan, self.config.eps_atom()) {
            Err(Error::BudgetExhausted {
                requested,
                remaining,
            }) => Ok(RefreshReport {
                new_algebras: 0,
                atoms: 0,
                charged: 0.0,
                warning: Some(format!(
                    "budget exhausted: refresh needs {requested}, {remaining} remaining"
                )),
            }),
            other => other,
        }
    }

    /// Answers one query. A refused request returns `BudgetExhausted`.
    pub fn handle(&self, q: &Query) -> Result<Response> {
        self.handle_inner(q, || exact_count(&self.database(), q))
    }

    /// [`Engine::handle`] with the exact count supplied by the caller.
    pub(crate) fn handle_counted(&self, q: &Query, count: u64) -> Result<Response> {
        self.handle_inner(q, || count)
    }

    fn handle_inner(&self, q: &Query, count: impl FnOnce() -> u64) -> Result<Response> {
        self.record(q);
        let routed = self
            .registry
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .route(q);
        if let Some((sa, cover)) = routed {
            let r = sa.respond_with(&cover)?;
            self.covered.fetch_add(1, Ordering::Relaxed);
            return Ok(self.finish(r, Path::Sigma, self.remaining_budget()));
        }
        let n = count();
        let mut pv = lock(&self.privacy);
        let Privacy { acct, fallback, .. } = &mut *pv;
        match benchmark_from_count(n, self.config.epsilon_per_query, acct, fallback) {
            Ok(r) => {
                self.uncovered.fetch_add(1, Ordering::Relaxed);
                let remaining = acct.remaining();
                Ok(self.finish(r, Path::Benchmark, remaining))
            }
            Err(e) => {
                if matches!(e, Error::BudgetExhausted { .. }) {
                    self.rejected.fetch_add(1, Ordering::Relaxed);
                }
                Err(e)
            }
        }
    }

    fn finish(&self, r: NoisyCount, path: Path, remaining: f64) -> Response {
        Response {
            value: round_output(r.value, self.config.round_output),
            charged: r.epsilon_charged,
            path,
            remaining_budget: remaining,
        }
    }

    /// Opens an evolving-table session on the current snapshot and returns
    /// its id with the `t = 1` answer.
    pub fn open_session(
        &self,
        q: &Query,
        eps: f64,
        rho: f64,
        t_max: u32,
    ) -> Result<(u64, Response)> {
        let db = self.database();
        let (sess, remaining) = {
            let mut pv = lock(&self.privacy);
            let Privacy { acct, sessions, .. } = &mut *pv;
            let s = EvolvingSession::open(&db, q, eps, rho, t_max, acct, sessions)?;
            (s, acct.remaining())
        };
        let resp = self.finish(sess.baseline(), Path::Benchmark, remaining);
        let id = self.next_session.fetch_add(1, Ordering::Relaxed);
        lock(&self.sessions).insert(id, sess);
        Ok((id, resp))
    }

    /// Next step of session `id` against the current snapshot.
    pub fn respond_session(&self, id: u64) -> Result<Response> {
        let db = self.database();
        let r = {
            let mut sessions = lock(&self.sessions);
            let sess = sessions
                .get_mut(&id)
                .ok_or_else(|| Error::NotFound(format!("session {id}")))?;
            sess.respond_t(&db)?
        };
        Ok(self.finish(r, Path::Benchmark, self.remaining_budget()))
    }
}

/// `Q > (Σ|Ω_k|)·sqrt(max|Ω_k|)/(1−p)` for an uncovered fraction `p`.
pub fn advantage_condition_thm4(q: u64, omega_sizes: &[u64], p: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "p must lie in [0, 1), got {p}"
        )));
    }
    if p == 1.0 {
        return Ok(false);
    }
    if p == 0.0 {
        return Ok(crate::grouping::advantage_condition_thm3(q, omega_sizes));
    }
    let sum: f64 = omega_sizes.iter().map(|&s| s as f64).sum();
    let max = omega_sizes.iter().copied().max().unwrap_or(0) as f64;
    Ok(q as f64 * (1.0 - p) > sum * max.sqrt())
}
