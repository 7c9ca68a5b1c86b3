//! Workload clustering by active set, and one sigma-algebra per cluster.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::dataset::{Database, Schema};
use crate::error::{Error, Result};
use crate::mechanism::{LaplaceSampler, PrivacyAccountant};
use crate::query::{ActiveSet, Embedding, Query};
use crate::sigma::{SigmaAlgebra, DEFAULT_CELL_CAP};

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub active: ActiveSet,
    /// Distinct members in canonical order.
    pub members: Vec<Query>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPlan {
    pub clusters: Vec<Cluster>,
    /// Unassigned queries, with repeats, in workload order.
    pub residual: Vec<Query>,
    pub u: usize,
    pub workload: usize,
}

/// Alternative clustering rule: one optional cluster label per embedding.
/// Queries labelled `None` go to the residual.
pub trait Clusterer {
    fn assign(&self, embeddings: &[Embedding]) -> Vec<Option<usize>>;
}

impl ClusterPlan {
    pub fn residual_fraction(&self) -> f64 {
        if self.workload == 0 {
            0.0
        } else {
            self.residual.len() as f64 / self.workload as f64
        }
    }

    pub fn to_json(&self, schema: &Schema) -> Value {
        let clusters: Vec<Value> = self
            .clusters
            .iter()
            .map(|c| {
                let active: Vec<&str> = c
                    .active
                    .columns()
                    .iter()
                    .map(|&i| schema.column(i).name())
                    .collect();
                let members: Vec<String> = c.members.iter().map(|q| q.render(schema)).collect();
                json!({ "active": active, "members": members })
            })
            .collect();
        json!({
            "u": self.u,
            "workload": self.workload,
            "clusters": clusters,
            "residual": self.residual.iter().map(|q| q.render(schema)).collect::<Vec<_>>(),
        })
    }
}

/// One cluster per distinct active set of size at most `u`.
pub fn plan(queries: &[Query], u: usize) -> Result<ClusterPlan> {
    if u == 0 {
        return Err(Error::InvalidArgument(
            "threshold u must be at least 1".into(),
        ));
    }
    let mut groups: BTreeMap<ActiveSet, Vec<Query>> = BTreeMap::new();
    let mut residual = Vec::new();
    for q in queries {
        let a = q.active_set();
        if a.len() <= u {
            groups.entry(a).or_default().push(q.clone());
        } else {
            residual.push(q.clone());
        }
    }
    let clusters = groups
        .into_iter()
        .map(|(active, mut members)| {
            members.sort();
            members.dedup();
            Cluster { active, members }
        })
        .collect();
    Ok(ClusterPlan {
        clusters,
        residual,
        u,
        workload: queries.len(),
    })
}

/// Plan with a custom clusterer. Each cluster's active set is the union of
/// its members' sets; `u` is recorded as the largest of those.
pub fn plan_with(
    queries: &[Query],
    schema: &Schema,
    clusterer: &dyn Clusterer,
) -> Result<ClusterPlan> {
    let embeddings: Vec<Embedding> = queries.iter().map(|q| q.embedding(schema)).collect();
    let labels = clusterer.assign(&embeddings);
    if labels.len() != queries.len() {
        return Err(Error::InvalidArgument(format!(
            "clusterer returned {} labels for {} queries",
            labels.len(),
            queries.len()
        )));
    }
    let mut groups: BTreeMap<usize, Vec<Query>> = BTreeMap::new();
    let mut residual = Vec::new();
    for (q, l) in queries.iter().zip(labels) {
        match l {
            Some(l) => groups.entry(l).or_default().push(q.clone()),
            None => residual.push(q.clone()),
        }
    }
    let clusters: Vec<Cluster> = groups
        .into_values()
        .map(|mut members| {
            members.sort();
            members.dedup();
            let cols = members
                .iter()
                .flat_map(|q| q.active_set().columns().to_vec())
                .collect();
            Cluster {
                active: ActiveSet::new(cols),
                members,
            }
        })
        .collect();
    let u = clusters.iter().map(|c| c.active.len()).max().unwrap_or(0);
    Ok(ClusterPlan {
        clusters,
        residual,
        u,
        workload: queries.len(),
    })
}

/// Induces every cluster's algebra without touching any budget.
pub fn induce_plan(plan: &ClusterPlan, schema: &Schema, cap: u64) -> Result<Vec<SigmaAlgebra>> {
    plan.clusters
        .par_iter()
        .map(|c| SigmaAlgebra::induce_with_cap(&c.members, schema, cap))
        .collect()
}

/// Charges `Σ|Ω_k|·eps_atom` in one step, then perturbs every algebra from
/// its own split sampler stream. Nothing is charged on failure.
pub fn perturb_all(
    algebras: &mut [SigmaAlgebra],
    db: &Database,
    eps_atom: f64,
    acct: &mut PrivacyAccountant,
    sampler: &mut LaplaceSampler,
) -> Result<()> {
    let counts: Vec<Vec<u64>> = algebras.par_iter().map(|sa| sa.atom_counts(db)).collect();
    perturb_all_with_counts(algebras, &counts, eps_atom, acct, sampler)
}

/// [`perturb_all`] with exact atom counts computed by the caller.
pub(crate) fn perturb_all_with_counts(
    algebras: &mut [SigmaAlgebra],
    counts: &[Vec<u64>],
    eps_atom: f64,
    acct: &mut PrivacyAccountant,
    sampler: &mut LaplaceSampler,
) -> Result<()> {
    if eps_atom <= 0.0 || !eps_atom.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive and finite, got {eps_atom}"
        )));
    }
    acct.charge_all(
        algebras
            .iter()
            .map(|sa| (format!("sigma[{}]", sa.n_atoms()), sa.charge_for(eps_atom))),
    )?;
    let samplers: Vec<LaplaceSampler> = algebras.iter().map(|_| sampler.split()).collect();
    algebras
        .par_iter_mut()
        .zip(counts)
        .zip(samplers)
        .try_for_each(|((sa, c), mut s)| sa.apply_noise(c, eps_atom, &mut s))
}

pub fn materialize(
    plan: &ClusterPlan,
    db: &Database,
    eps_atom: f64,
    acct: &mut PrivacyAccountant,
    sampler: &mut LaplaceSampler,
) -> Result<Vec<SigmaAlgebra>> {
    let mut algebras = induce_plan(plan, db.schema(), DEFAULT_CELL_CAP)?;
    perturb_all(&mut algebras, db, eps_atom, acct, sampler)?;
    Ok(algebras)
}

/// `Q > (Σ_k |Ω_k|)·sqrt(max_k |Ω_k|)`, evaluated exactly as
/// `Q² > (Σ|Ω_k|)²·max|Ω_k|`.
pub fn advantage_condition_thm3(q: u64, omega_sizes: &[u64]) -> bool {
    let sum: u128 = omega_sizes.iter().map(|&s| s as u128).sum();
    let max: u128 = omega_sizes.iter().copied().max().unwrap_or(0) as u128;
    (q as u128) * (q as u128) > sum * sum * max
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::exact_count;

    fn q(s: &Schema, t: &str) -> Query {
        Query::parse(t, s).unwrap()
    }

    #[test]
    fn unconstrained_workload_is_one_cluster() {
        let qs = vec![Query::unconstrained(); 5];
        let p = plan(&qs, 1).unwrap();
        assert_eq!(p.clusters.len(), 1);
        assert_eq!(p.clusters[0].members.len(), 1);
        assert!(p.residual.is_empty());
        assert!(plan(&qs, 0).is_err());
    }

    #[test]
    fn u_one_sends_pairs_to_residual() {
        let s = Schema::binary(3).unwrap();
        let qs = vec![
            q(&s, "c1 IN {1}"),
            q(&s, "c2 IN {0}"),
            q(&s, "c1 IN {0}"),
            q(&s, "c1 IN {1} AND c2 IN {1}"),
        ];
        let p = plan(&qs, 1).unwrap();
        assert_eq!(p.clusters.len(), 2);
        assert_eq!(p.clusters[0].active.columns(), &[0]);
        assert_eq!(p.clusters[0].members.len(), 2);
        assert_eq!(p.residual, vec![qs[3].clone()]);
        assert_eq!(p.residual_fraction(), 0.25);
        for c in &p.clusters {
            for m in &c.members {
                assert!(m.active_set().is_subset(&c.active));
            }
        }
    }

    #[test]
    fn disjoint_single_columns_charge_four_eps() {
        let s = Schema::binary(2).unwrap();
        let qs = vec![
            q(&s, "c1 IN {1}"),
            q(&s, "c1 IN {0}"),
            q(&s, "c2 IN {1}"),
            q(&s, "c2 IN {0}"),
        ];
        let db = Database::from_rows(s.clone(), vec![vec![0, 1], vec![1, 1]]).unwrap();
        let p = plan(&qs, 1).unwrap();
        let mut acct = PrivacyAccountant::new(10.0).unwrap();
        let algs = materialize(&p, &db, 0.25, &mut acct, &mut LaplaceSampler::new(1)).unwrap();
        assert_eq!(
            algs.iter().map(|a| a.n_atoms()).collect::<Vec<_>>(),
            vec![2, 2]
        );
        assert_eq!(acct.spent(), 1.0);
    }

    #[test]
    fn single_cluster_matches_direct_induction() {
        let s = Schema::binary(3).unwrap();
        let qs = vec![
            q(&s, "c1 IN {1} AND c2 IN {1}"),
            q(&s, "c1 IN {0} AND c2 IN {1}"),
        ];
        let p = plan(&qs, 3).unwrap();
        assert_eq!(p.clusters.len(), 1);
        let algs = induce_plan(&p, &s, DEFAULT_CELL_CAP).unwrap();
        assert_eq!(algs[0], SigmaAlgebra::induce(&qs, &s).unwrap());
    }

    #[test]
    fn per_variable_clusters_are_smaller() {
        let labels: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let s = Schema::new([("x", labels.clone()), ("y", labels)]).unwrap();
        let mut qs = Vec::new();
        for i in 0..10 {
            qs.push(q(&s, &format!("x IN {{{i}}}")));
            qs.push(q(&s, &format!("y IN {{{i}}}")));
        }
        let p = plan(&qs, 1).unwrap();
        let algs = induce_plan(&p, &s, DEFAULT_CELL_CAP).unwrap();
        assert_eq!(algs.iter().map(|a| a.n_atoms()).sum::<usize>(), 20);
        // Refining both variables jointly needs the full product.
        let cells: Vec<Query> = (0..10)
            .flat_map(|i| (0..10).map(move |j| (i, j)))
            .map(|(i, j)| q(&s, &format!("x IN {{{i}}} AND y IN {{{j}}}")))
            .collect();
        assert_eq!(SigmaAlgebra::induce(&cells, &s).unwrap().n_atoms(), 100);
    }

    #[test]
    fn atomic_materialization() {
        let s = Schema::binary(2).unwrap();
        let qs = vec![q(&s, "c1 IN {1}"), q(&s, "c2 IN {1}")];
        let db = Database::from_rows(s.clone(), vec![vec![1, 1]]).unwrap();
        let p = plan(&qs, 1).unwrap();
        let mut acct = PrivacyAccountant::new(0.3).unwrap();
        let err = materialize(&p, &db, 0.2, &mut acct, &mut LaplaceSampler::new(1)).unwrap_err();
        assert!(matches!(err, Error::BudgetExhausted { .. }));
        assert!(acct.ledger().is_empty());
    }

    #[test]
    fn zero_noise_grouped_answers() {
        let s = Schema::binary(3).unwrap();
        let qs = vec![q(&s, "c1 IN {1}"), q(&s, "c2 IN {0}"), q(&s, "c3 IN {1}")];
        let rows: Vec<Vec<u32>> = (0..8u32)
            .map(|i| vec![i & 1, (i >> 1) & 1, (i >> 2) & 1])
            .collect();
        let db = Database::from_rows(s.clone(), rows).unwrap();
        let p = plan(&qs, 1).unwrap();
        let mut acct = PrivacyAccountant::new(1e12).unwrap();
        let algs = materialize(&p, &db, 1e9, &mut acct, &mut LaplaceSampler::new(1)).unwrap();
        for (qq, sa) in qs.iter().zip(&algs) {
            let v = sa.respond(qq).unwrap().value;
            assert!((v - exact_count(&db, qq) as f64).abs() < 1e-3);
        }
    }

    struct Everything;
    impl Clusterer for Everything {
        fn assign(&self, e: &[Embedding]) -> Vec<Option<usize>> {
            vec![Some(0); e.len()]
        }
    }

    #[test]
    fn custom_clusterer_hook() {
        let s = Schema::binary(3).unwrap();
        let qs = vec![q(&s, "c1 IN {1}"), q(&s, "c2 IN {1} AND c3 IN {0}")];
        let p = plan_with(&qs, &s, &Everything).unwrap();
        assert_eq!(p.clusters.len(), 1);
        assert_eq!(p.clusters[0].active.columns(), &[0, 1, 2]);
        assert_eq!(p.u, 3);
    }

    #[test]
    fn grouped_advantage_boundary() {
        assert!(advantage_condition_thm3(64, &[10, 10]));
        assert!(!advantage_condition_thm3(63, &[10, 10]));
        assert!(advantage_condition_thm3(2, &[1]));
    }

    #[test]
    fn plan_json_lists_members() {
        let s = Schema::binary(2).unwrap();
        let p = plan(&[q(&s, "c1 IN {1}")], 2).unwrap();
        let v = p.to_json(&s);
        assert_eq!(v["clusters"][0]["members"][0], "c1 IN {1}");
        assert_eq!(v["clusters"][0]["active"][0], "c1");
    }
}
