//! Order-violation and relative-utility studies.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Database;
use crate::engine::{advantage_condition_thm4, Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::grouping::{induce_plan, perturb_all_with_counts, plan};
use crate::harness::workload::{gen_nested_pairs_for, gen_queries_for, WorkloadSpec};
use crate::mechanism::{benchmark_from_count, LaplaceSampler, PrivacyAccountant};
use crate::metrics::{empirical_relative_utility, expected_cover_mse, mse, violation_rate};
use crate::query::{exact_counts, ActiveSet, Query};
use crate::sigma::{SigmaAlgebra, DEFAULT_CELL_CAP};

/// A named table to run a study on.
#[derive(Debug, Clone)]
pub struct StudyData {
    pub name: String,
    pub db: Database,
}

impl StudyData {
    pub fn new(name: impl Into<String>, db: Database) -> Self {
        StudyData {
            name: name.into(),
            db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityConfig {
    pub budgets: Vec<f64>,
    pub pairs: usize,
    pub tighten: usize,
    pub selection_probs: (f64, f64, f64),
    pub seed: u64,
}

impl Default for MonotonicityConfig {
    fn default() -> Self {
        MonotonicityConfig {
            budgets: vec![100.0, 10.0, 1.0],
            pairs: 10_000,
            tighten: 1,
            selection_probs: (0.05, 0.05, 0.9),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityRow {
    pub dataset: String,
    pub rows: usize,
    pub columns: usize,
    pub budget: f64,
    pub pairs: usize,
    pub eps_benchmark: f64,
    pub eps_atom: f64,
    pub sigma_atoms: usize,
    pub benchmark_violation_rate: f64,
    pub sigma_violation_rate: f64,
}

fn cell_sampler(seed: u64, study: u64, dataset: usize, cell: usize, side: u64) -> LaplaceSampler {
    LaplaceSampler::with_stream(seed, study)
        .fork(dataset as u64)
        .fork(cell as u64)
        .fork(side)
}

/// For every dataset and budget: violation rates of the per-query mechanism
/// (ε = B / 2·pairs) and of atom sums. Each pair induces its own algebra and
/// all algebras share ε′ = B / Σ|Ω_k|.
pub fn run_monotonicity_study(
    data: &[StudyData],
    cfg: &MonotonicityConfig,
) -> Result<Vec<MonotonicityRow>> {
    let mut rows = Vec::new();
    for (di, d) in data.iter().enumerate() {
        let spec = WorkloadSpec {
            n_queries: 0,
            p_cols: d.db.schema().len(),
            selection_probs: cfg.selection_probs,
            seed: cfg.seed,
            nested_pairs: cfg.pairs,
            tighten: cfg.tighten,
        };
        let pairs = gen_nested_pairs_for(&spec, d.db.schema())?;
        let flat: Vec<Query> = pairs
            .iter()
            .flat_map(|(a, b)| [a.clone(), b.clone()])
            .collect();
        let counts = exact_counts(&d.db, &flat);
        let algebras: Vec<SigmaAlgebra> = pairs
            .par_iter()
            .map(|(a, b)| SigmaAlgebra::induce(&[a.clone(), b.clone()], d.db.schema()))
            .collect::<Result<_>>()?;
        let atom_counts: Vec<Vec<u64>> = algebras
            .par_iter()
            .map(|sa| sa.atom_counts(&d.db))
            .collect();
        let omega: usize = algebras.iter().map(|a| a.n_atoms()).sum();

        let cells: Vec<MonotonicityRow> = cfg
            .budgets
            .par_iter()
            .enumerate()
            .map(|(bi, &budget)| {
                let eps = budget / (2 * pairs.len().max(1)) as f64;
                let mut acct = PrivacyAccountant::new(budget)?;
                let mut s = cell_sampler(cfg.seed, 1, di, bi, 0);
                let mut bench = Vec::with_capacity(pairs.len());
                for i in 0..pairs.len() {
                    let r1 = benchmark_from_count(counts[2 * i], eps, &mut acct, &mut s)?;
                    let r2 = benchmark_from_count(counts[2 * i + 1], eps, &mut acct, &mut s)?;
                    bench.push((r1.value, r2.value));
                }

                let eps_atom = budget / omega.max(1) as f64;
                let mut acct = PrivacyAccountant::new(budget)?;
                let mut s = cell_sampler(cfg.seed, 1, di, bi, 1);
                let mut algs = algebras.clone();
                perturb_all_with_counts(&mut algs, &atom_counts, eps_atom, &mut acct, &mut s)?;
                let sigma = pairs
                    .iter()
                    .zip(&algs)
                    .map(|((a, b), sa)| Ok((sa.respond(a)?.value, sa.respond(b)?.value)))
                    .collect::<Result<Vec<_>>>()?;

                Ok(MonotonicityRow {
                    dataset: d.name.clone(),
                    rows: d.db.n(),
                    columns: d.db.schema().len(),
                    budget,
                    pairs: pairs.len(),
                    eps_benchmark: eps,
                    eps_atom,
                    sigma_atoms: omega,
                    benchmark_violation_rate: violation_rate(&pairs, &bench)?,
                    sigma_violation_rate: violation_rate(&pairs, &sigma)?,
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(cells);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityConfig {
    pub us: Vec<usize>,
    pub query_counts: Vec<usize>,
    pub budget: f64,
    pub selection_probs: (f64, f64, f64),
    pub seed: u64,
    pub cell_cap: u64,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        UtilityConfig {
            us: vec![1, 2, 3],
            query_counts: vec![100_000, 1_000_000],
            budget: 1.0,
            selection_probs: (0.05, 0.05, 0.9),
            seed: 0,
            cell_cap: DEFAULT_CELL_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub dataset: String,
    pub columns: usize,
    pub queries: usize,
    pub u: usize,
    pub clusters: usize,
    pub sum_omega: usize,
    pub max_omega: usize,
    pub residual_fraction: f64,
    pub eps: f64,
    pub eps_atom: f64,
    pub benchmark_mse: f64,
    pub method_mse: f64,
    /// Measured `MSE(benchmark) / MSE(online)`.
    pub relative_utility: f64,
    /// The same ratio from closed-form truncated-Laplace moments.
    pub expected_relative_utility: f64,
    /// The same ratio from untruncated variances.
    pub theoretical_relative_utility: f64,
    pub advantage_condition: bool,
}

/// Relative utility of online sigma-counting against the per-query
/// mechanism at equal total budget `B`.
///
/// The per-query side answers every query at ε = B/Q. The online side
/// clusters the workload by active set (size ≤ u), perturbs the clusters at
/// ε′ = (1−p)·B/Σ|Ω_k| where p is the residual share, and answers residual
/// queries at ε = B/Q, so both sides spend B.
pub fn run_utility_study(data: &[StudyData], cfg: &UtilityConfig) -> Result<Vec<UtilityRow>> {
    let mut rows = Vec::new();
    for (di, d) in data.iter().enumerate() {
        for (qi, &q_count) in cfg.query_counts.iter().enumerate() {
            let spec = WorkloadSpec {
                n_queries: q_count,
                p_cols: d.db.schema().len(),
                selection_probs: cfg.selection_probs,
                seed: cfg.seed,
                nested_pairs: 0,
                tighten: 0,
            };
            let queries = gen_queries_for(&spec, d.db.schema())?;
            let truths = cached_counts(&d.db, &queries);
            let truth_f: Vec<f64> = truths.iter().map(|&t| t as f64).collect();
            let eps = cfg.budget / q_count as f64;

            let mut acct = PrivacyAccountant::new(cfg.budget)?;
            let mut s = cell_sampler(cfg.seed, 2, di, qi, 0);
            let bench: Vec<f64> = truths
                .iter()
                .map(|&t| benchmark_from_count(t, eps, &mut acct, &mut s).map(|r| r.value))
                .collect::<Result<_>>()?;
            let bench_mse = mse(&bench, &truth_f)?;

            for (ui, &u) in cfg.us.iter().enumerate() {
                let row = utility_cell(
                    d, di, q_count, qi, u, ui, cfg, eps, &queries, &truths, &truth_f, &bench,
                    bench_mse,
                )?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn cached_counts(db: &Database, queries: &[Query]) -> Vec<u64> {
    let mut distinct: Vec<&Query> = queries.iter().collect();
    distinct.sort();
    distinct.dedup();
    let counts: Vec<u64> = distinct
        .par_iter()
        .map(|q| crate::query::exact_count(db, q))
        .collect();
    let map: HashMap<&Query, u64> = distinct.into_iter().zip(counts).collect();
    queries.iter().map(|q| map[q]).collect()
}

#[allow(clippy::too_many_arguments)]
fn utility_cell(
    d: &StudyData,
    di: usize,
    q_count: usize,
    qi: usize,
    u: usize,
    ui: usize,
    cfg: &UtilityConfig,
    eps: f64,
    queries: &[Query],
    truths: &[u64],
    truth_f: &[f64],
    bench: &[f64],
    bench_mse: f64,
) -> Result<UtilityRow> {
    let plan = plan(queries, u)?;
    let p = plan.residual_fraction();
    let algebras = induce_plan(&plan, d.db.schema(), cfg.cell_cap)?;
    let sizes: Vec<u64> = algebras.iter().map(|a| a.n_atoms() as u64).collect();
    let sum_omega: u64 = sizes.iter().sum();
    let max_omega = sizes.iter().copied().max().unwrap_or(0);
    if sum_omega == 0 {
        return Err(Error::InvalidArgument(format!(
            "u = {u} leaves every query in the residual"
        )));
    }
    let eps_atom = (1.0 - p) * cfg.budget / sum_omega as f64;
    let atom_counts: Vec<Vec<u64>> = algebras
        .par_iter()
        .map(|sa| sa.atom_counts(&d.db))
        .collect();

    // Closed-form expectations per distinct covered query.
    let by_mask: HashMap<&ActiveSet, usize> = algebras
        .iter()
        .enumerate()
        .map(|(i, a)| (a.mask(), i))
        .collect();
    let scale = 1.0 / eps_atom;
    let mut expected: HashMap<&Query, (f64, usize)> = HashMap::new();
    for c in &plan.clusters {
        let k = by_mask[&c.active];
        for m in &c.members {
            let cover = algebras[k].cover(m).expect("members are covered");
            let counts = cover.atoms().iter().map(|&a| atom_counts[k][a as usize]);
            expected.insert(m, (expected_cover_mse(counts, scale), cover.atoms().len()));
        }
    }
    let bench_var = 2.0 / (eps * eps);
    let atom_var = 2.0 * scale * scale;
    let (mut exp_sum, mut theo_sum) = (0.0, 0.0);
    for q in queries {
        match expected.get(q) {
            Some(&(m, n)) => {
                exp_sum += m;
                theo_sum += n as f64 * atom_var;
            }
            None => {
                exp_sum += bench_var;
                theo_sum += bench_var;
            }
        }
    }
    let n = queries.len() as f64;

    let engine = Engine::new(
        d.db.clone(),
        EngineConfig {
            epsilon_budget: cfg.budget,
            epsilon_per_query: eps,
            epsilon_atom: Some(eps_atom),
            seed: cell_sampler(cfg.seed, 3, di, qi, ui as u64)
                .split()
                .stream(),
            history_capacity: 0,
            cell_cap: cfg.cell_cap,
            ..Default::default()
        },
    )?;
    let report = engine.materialize_counted(algebras, &atom_counts, eps_atom)?;
    debug_assert!((report.charged - (1.0 - p) * cfg.budget).abs() < 1e-9);
    let method: Vec<f64> = queries
        .iter()
        .zip(truths)
        .map(|(q, &t)| engine.handle_counted(q, t).map(|r| r.value))
        .collect::<Result<_>>()?;
    let method_mse = mse(&method, truth_f)?;

    Ok(UtilityRow {
        dataset: d.name.clone(),
        columns: d.db.schema().len(),
        queries: q_count,
        u,
        clusters: plan.clusters.len(),
        sum_omega: sum_omega as usize,
        max_omega: max_omega as usize,
        residual_fraction: p,
        eps,
        eps_atom,
        benchmark_mse: bench_mse,
        method_mse,
        relative_utility: empirical_relative_utility(bench, &method, truth_f)?,
        expected_relative_utility: bench_var / (exp_sum / n),
        theoretical_relative_utility: bench_var / (theo_sum / n),
        advantage_condition: advantage_condition_thm4(q_count as u64, &sizes, p)?,
    })
}

/// Writes `rows` to `<dir>/<stem>.csv` and `<dir>/<stem>.json`.
pub fn write_table<T: Serialize>(rows: &[T], dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let f = BufWriter::new(File::create(dir.join(format!("{stem}.json")))?);
    serde_json::to_writer_pretty(f, rows)?;
    Ok(())
}
