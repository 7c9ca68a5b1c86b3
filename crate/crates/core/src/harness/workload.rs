//! Simulated tables and query workloads.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Database, Schema};
use crate::error::{Error, Result};
use crate::query::{LabelSet, Query};

const DB_STREAM: u64 = 0;
const QUERY_STREAM: u64 = 1;
const PAIR_STREAM: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n_queries: usize,
    pub p_cols: usize,
    /// Probabilities of selecting `{1}`, `{0}` and both labels per column.
    pub selection_probs: (f64, f64, f64),
    pub seed: u64,
    pub nested_pairs: usize,
    /// Free columns of the outer query fixed to one label in the inner one.
    pub tighten: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            n_queries: 100_000,
            p_cols: 21,
            selection_probs: (0.05, 0.05, 0.9),
            seed: 0,
            nested_pairs: 10_000,
            tighten: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.selection_probs;
        if [a, b, c].iter().any(|x| !x.is_finite() || *x < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "selection probabilities must be non-negative and sum to 1, got ({a}, {b}, {c})"
            )));
        }
        if self.p_cols == 0 {
            return Err(Error::InvalidArgument("need at least one column".into()));
        }
        Ok(())
    }
}

/// `n × p` table of fair coin flips over columns `c1..cp`.
pub fn gen_sim_db(n: usize, p: usize, seed: u64) -> Result<Database> {
    let schema = Schema::binary(p)?;
    let mut r = rng(seed, DB_STREAM);
    let rows = (0..n).map(|_| (0..p).map(|_| r.gen::<bool>() as u32).collect::<Vec<u32>>());
    Database::from_rows(schema, rows)
}

fn draw_query(r: &mut ChaCha20Rng, schema: &Schema, probs: (f64, f64, f64)) -> Query {
    let (p1, p0, _) = probs;
    let mut cs = Vec::new();
    for c in 0..schema.len() {
        let x: f64 = r.gen();
        if x < p1 {
            cs.push((c, LabelSet::new([1]).expect("non-empty")));
        } else if x < p1 + p0 {
            cs.push((c, LabelSet::new([0]).expect("non-empty")));
        }
    }
    Query::new(schema, cs).expect("binary labels are valid")
}

fn binary_schema_for(spec: &WorkloadSpec) -> Result<Schema> {
    spec.validate()?;
    Schema::binary(spec.p_cols)
}

/// Independent multinomial selections per query and column.
pub fn gen_queries(spec: &WorkloadSpec) -> Result<Vec<Query>> {
    let schema = binary_schema_for(spec)?;
    gen_queries_for(spec, &schema)
}

/// [`gen_queries`] over an arbitrary schema whose columns have labels "0"
/// and "1".
pub fn gen_queries_for(spec: &WorkloadSpec, schema: &Schema) -> Result<Vec<Query>> {
    spec.validate()?;
    check_binary(schema)?;
    let mut r = rng(spec.seed, QUERY_STREAM);
    Ok((0..spec.n_queries)
        .map(|_| draw_query(&mut r, schema, spec.selection_probs))
        .collect())
}

fn check_binary(schema: &Schema) -> Result<()> {
    if let Some(c) = schema.columns().iter().find(|c| !c.is_binary()) {
        return Err(Error::Schema(format!(
            "workload generation needs binary columns; `{}` is not",
            c.name()
        )));
    }
    Ok(())
}

/// Pairs `(inner, outer)` with `inner ⊆ outer`, built by fixing `tighten`
/// unconstrained columns of a drawn outer query.
pub fn gen_nested_pairs(spec: &WorkloadSpec) -> Result<Vec<(Query, Query)>> {
    let schema = binary_schema_for(spec)?;
    gen_nested_pairs_for(spec, &schema)
}

pub fn gen_nested_pairs_for(spec: &WorkloadSpec, schema: &Schema) -> Result<Vec<(Query, Query)>> {
    spec.validate()?;
    check_binary(schema)?;
    if spec.tighten > 0 && spec.selection_probs.2 == 0.0 && spec.nested_pairs > 0 {
        return Err(Error::InvalidArgument(
            "cannot tighten: outer queries never leave a column free".into(),
        ));
    }
    let mut r = rng(spec.seed, PAIR_STREAM);
    let mut pairs = Vec::with_capacity(spec.nested_pairs);
    while pairs.len() < spec.nested_pairs {
        let outer = draw_query(&mut r, schema, spec.selection_probs);
        if spec.tighten == 0 {
            pairs.push((outer.clone(), outer));
            continue;
        }
        let free: Vec<usize> = (0..schema.len())
            .filter(|c| outer.allowed(*c).is_none())
            .collect();
        if free.is_empty() {
            continue;
        }
        let k = spec.tighten.min(free.len());
        let chosen = sample(&mut r, free.len(), k);
        let extra = chosen.into_iter().map(|i| {
            let label = r.gen::<bool>() as u32;
            (free[i], LabelSet::new([label]).expect("non-empty"))
        });
        let cs: Vec<(usize, LabelSet)> = outer
            .constraints()
            .iter()
            .map(|(c, s)| (*c, s.clone()))
            .chain(extra.collect::<Vec<_>>())
            .collect();
        let inner = Query::new(schema, cs).expect("tightened query is valid");
        pairs.push((inner, outer));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::exact_count;

    #[test]
    fn sim_db_shape_and_balance() {
        let db = gen_sim_db(100_000, 21, 4).unwrap();
        assert_eq!((db.n(), db.schema().len()), (100_000, 21));
        for c in 0..21 {
            let q = Query::parse(&format!("c{} IN {{1}}", c + 1), db.schema()).unwrap();
            let mean = exact_count(&db, &q) as f64 / 1e5;
            assert!((mean - 0.5).abs() < 0.01, "column {c}: {mean}");
        }
        assert_eq!(gen_sim_db(0, 5, 1).unwrap().n(), 0);
        assert_eq!(gen_sim_db(50, 3, 9).unwrap(), gen_sim_db(50, 3, 9).unwrap());
    }

    #[test]
    fn all_both_gives_unconstrained() {
        let spec = WorkloadSpec {
            n_queries: 100,
            selection_probs: (0.0, 0.0, 1.0),
            ..Default::default()
        };
        assert!(gen_queries(&spec)
            .unwrap()
            .iter()
            .all(Query::is_unconstrained));
    }

    #[test]
    fn bad_probabilities_are_rejected() {
        let spec = WorkloadSpec {
            selection_probs: (0.5, 0.5, 0.5),
            ..Default::default()
        };
        assert!(gen_queries(&spec).is_err());
    }

    #[test]
    fn active_set_sizes_follow_the_binomial() {
        let spec = WorkloadSpec {
            n_queries: 100_000,
            p_cols: 21,
            seed: 12,
            ..Default::default()
        };
        let qs = gen_queries(&spec).unwrap();
        let sizes: Vec<f64> = qs.iter().map(|q| q.active_set().len() as f64).collect();
        let mean = sizes.iter().sum::<f64>() / sizes.len() as f64;
        // Binomial(21, 0.1): mean 2.1, variance 1.89.
        let se = (1.89f64 / sizes.len() as f64).sqrt();
        assert!((mean - 2.1).abs() < 3.0 * se, "mean {mean}");
        // Share of queries with more than three active columns.
        let p_gt3: f64 = 1.0
            - (0..=3)
                .map(|k| binom(21, k) * 0.1f64.powi(k as i32) * 0.9f64.powi(21 - k as i32))
                .sum::<f64>();
        let obs = sizes.iter().filter(|&&s| s > 3.0).count() as f64 / sizes.len() as f64;
        let se = (p_gt3 * (1.0 - p_gt3) / sizes.len() as f64).sqrt();
        assert!((obs - p_gt3).abs() < 3.0 * se, "{obs} vs {p_gt3}");
    }

    fn binom(n: u64, k: u64) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn embedding_zero_exactly_where_both_was_drawn() {
        // Replay the generator's draws to recover the per-column choices.
        let spec = WorkloadSpec {
            n_queries: 500,
            p_cols: 9,
            seed: 3,
            ..Default::default()
        };
        let schema = Schema::binary(9).unwrap();
        let qs = gen_queries(&spec).unwrap();
        let mut r = rng(spec.seed, QUERY_STREAM);
        for q in &qs {
            let bits = q.embedding(&schema);
            for c in 0..9 {
                let x: f64 = r.gen();
                let both = x >= 0.1;
                assert_eq!(bits.bits()[c] == 0, both);
            }
        }
    }

    #[test]
    fn nested_pairs_are_nested() {
        let spec = WorkloadSpec {
            p_cols: 11,
            nested_pairs: 2000,
            seed: 8,
            ..Default::default()
        };
        let pairs = gen_nested_pairs(&spec).unwrap();
        assert_eq!(pairs.len(), 2000);
        for (a, b) in &pairs {
            assert!(a.is_subset(b));
            assert_eq!(a.active_set().len(), b.active_set().len() + 1);
        }
        let same = gen_nested_pairs(&WorkloadSpec {
            tighten: 0,
            nested_pairs: 10,
            ..spec
        })
        .unwrap();
        assert!(same.iter().all(|(a, b)| a == b));
    }
}
