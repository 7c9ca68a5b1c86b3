//! Atoms induced by a query family, perturbed once and summed on demand.
//!
//! Each column constrained by some inducing query is split into the coarsest
//! blocks that refine every constraint on it. The product of those blocks is
//! a grid of cells; cells inside the union of the queries are grouped by
//! which queries contain them, and each group is one atom. Every inducing
//! query is then an exact union of atoms, and so is every query whose
//! per-column sets are unions of blocks and whose cells all fall in atoms it
//! fully contains.

use std::collections::HashMap;

use serde_json::{json, Value};

use crate::dataset::{Database, Schema};
use crate::error::{Error, Result};
use crate::mechanism::{LaplaceSampler, NoisyCount, PrivacyAccountant};
use crate::query::{ActiveSet, LabelSet, Query};

pub const DEFAULT_CELL_CAP: u64 = 1 << 20;

const OUTSIDE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
struct Partition {
    column: usize,
    blocks: Vec<Vec<u32>>,
    label_block: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
struct Perturbation {
    eps_atom: f64,
    seed: u64,
    stream: u64,
    noisy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaAlgebra {
    parts: Vec<Partition>,
    strides: Vec<usize>,
    cell_atom: Vec<u32>,
    atom_sizes: Vec<u32>,
    inducing: Vec<Query>,
    mask: ActiveSet,
    noise: Option<Perturbation>,
}

/// Atom ids, ascending, whose union is a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cover {
    atoms: Vec<u32>,
}

impl Cover {
    pub fn atoms(&self) -> &[u32] {
        &self.atoms
    }
}

/// One atom as the list of grid cells it contains. A cell holds one block
/// index per partitioned column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub id: usize,
    pub cells: Vec<Vec<u32>>,
}

impl SigmaAlgebra {
    pub fn induce(queries: &[Query], schema: &Schema) -> Result<Self> {
        Self::induce_with_cap(queries, schema, DEFAULT_CELL_CAP)
    }

    pub fn induce_with_cap(queries: &[Query], schema: &Schema, cap: u64) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::InvalidArgument(
                "a sigma-algebra needs at least one inducing query".into(),
            ));
        }
        let mut distinct = queries.to_vec();
        distinct.sort();
        distinct.dedup();

        let mut cols: Vec<usize> = distinct
            .iter()
            .flat_map(|q| q.constraints().keys().copied())
            .collect();
        cols.sort_unstable();
        cols.dedup();
        if let Some(&c) = cols.last() {
            if c >= schema.len() {
                return Err(Error::Validation(format!(
                    "query column {c} outside schema"
                )));
            }
        }

        let parts: Vec<Partition> = cols
            .iter()
            .map(|&c| refine_column(c, schema.column(c).domain_size(), &distinct))
            .collect();
        let cells: u128 = parts.iter().map(|p| p.blocks.len() as u128).product();
        if cells > cap as u128 || cells > usize::MAX as u128 || cells >= OUTSIDE as u128 {
            return Err(Error::CellCap { cells, cap });
        }
        let mut strides = Vec::with_capacity(parts.len());
        let mut s = 1usize;
        for p in &parts {
            strides.push(s);
            s *= p.blocks.len();
        }

        let mut sa = SigmaAlgebra {
            mask: ActiveSet::new(cols),
            parts,
            strides,
            cell_atom: Vec::new(),
            atom_sizes: Vec::new(),
            inducing: distinct,
            noise: None,
        };
        sa.build_atoms(cells as usize);
        Ok(sa)
    }

    /// Splits cells by membership signature, one query at a time.
    fn build_atoms(&mut self, n_cells: usize) {
        let mut class = vec![0u32; n_cells];
        let mut size: Vec<u64> = vec![n_cells as u64];
        let mut hits: Vec<u64> = vec![0];
        let mut remap: Vec<u32> = vec![0];
        let mut touched: Vec<u32> = Vec::new();
        let mut buf: Vec<usize> = Vec::new();

        for q in &self.inducing {
            let sel = self
                .selection(q)
                .expect("inducing queries are unions of blocks");
            buf.clear();
            self.for_each_cell(&sel, |c| buf.push(c));
            touched.clear();
            for &c in &buf {
                let k = class[c] as usize;
                if hits[k] == 0 {
                    touched.push(k as u32);
                }
                hits[k] += 1;
            }
            for &k in &touched {
                let k = k as usize;
                if k == 0 || hits[k] < size[k] {
                    let new = size.len() as u32;
                    size.push(hits[k]);
                    size[k] -= hits[k];
                    hits.push(0);
                    remap.push(new);
                    remap[k] = new;
                } else {
                    remap[k] = k as u32;
                }
            }
            for &c in &buf {
                class[c] = remap[class[c] as usize];
            }
            for &k in &touched {
                hits[k as usize] = 0;
            }
        }

        let mut renum: Vec<u32> = vec![OUTSIDE; size.len()];
        let mut atom_sizes: Vec<u32> = Vec::new();
        for k in class.iter_mut() {
            if *k == 0 {
                *k = OUTSIDE;
                continue;
            }
            let r = &mut renum[*k as usize];
            if *r == OUTSIDE {
                *r = atom_sizes.len() as u32;
                atom_sizes.push(0);
            }
            *k = *r;
            atom_sizes[*r as usize] += 1;
        }
        self.cell_atom = class;
        self.atom_sizes = atom_sizes;
    }

    /// Per partitioned column, the blocks `q` allows; `None` when some
    /// constraint is not a union of blocks or touches an unpartitioned column.
    fn selection(&self, q: &Query) -> Option<Vec<Vec<u32>>> {
        for &c in q.constraints().keys() {
            if !self.mask.contains(c) {
                return None;
            }
        }
        let mut sel = Vec::with_capacity(self.parts.len());
        for p in &self.parts {
            match q.allowed(p.column) {
                None => sel.push((0..p.blocks.len() as u32).collect()),
                Some(set) => {
                    let mut chosen = Vec::new();
                    for (b, labels) in p.blocks.iter().enumerate() {
                        let inside = labels.iter().filter(|&&l| set.contains(l)).count();
                        if inside == labels.len() {
                            chosen.push(b as u32);
                        } else if inside != 0 {
                            return None;
                        }
                    }
                    sel.push(chosen);
                }
            }
        }
        Some(sel)
    }

    fn for_each_cell(&self, sel: &[Vec<u32>], mut f: impl FnMut(usize)) {
        if sel.iter().any(|s| s.is_empty()) {
            return;
        }
        let k = sel.len();
        let mut idx = vec![0usize; k];
        let mut cell: usize = sel
            .iter()
            .zip(&self.strides)
            .map(|(s, st)| s[0] as usize * st)
            .sum();
        loop {
            f(cell);
            let mut d = 0;
            loop {
                if d == k {
                    return;
                }
                let st = self.strides[d];
                cell -= sel[d][idx[d]] as usize * st;
                idx[d] += 1;
                if idx[d] < sel[d].len() {
                    cell += sel[d][idx[d]] as usize * st;
                    break;
                }
                idx[d] = 0;
                cell += sel[d][0] as usize * st;
                d += 1;
            }
        }
    }

    /// |Ω|.
    pub fn n_atoms(&self) -> usize {
        self.atom_sizes.len()
    }

    pub fn cell_count(&self) -> usize {
        self.cell_atom.len()
    }

    /// Columns split into more than one block, ascending.
    pub fn mask(&self) -> &ActiveSet {
        &self.mask
    }

    pub fn inducing_queries(&self) -> &[Query] {
        &self.inducing
    }

    /// Label blocks of `column`, or `None` if it is not partitioned.
    pub fn blocks(&self, column: usize) -> Option<&[Vec<u32>]> {
        self.parts
            .iter()
            .find(|p| p.column == column)
            .map(|p| p.blocks.as_slice())
    }

    pub fn atoms(&self) -> Vec<Atom> {
        let mut atoms: Vec<Atom> = (0..self.n_atoms())
            .map(|id| Atom {
                id,
                cells: Vec::new(),
            })
            .collect();
        for (cell, &a) in self.cell_atom.iter().enumerate() {
            if a != OUTSIDE {
                atoms[a as usize].cells.push(self.decode(cell));
            }
        }
        atoms
    }

    fn decode(&self, cell: usize) -> Vec<u32> {
        self.parts
            .iter()
            .zip(&self.strides)
            .map(|(p, &st)| ((cell / st) % p.blocks.len()) as u32)
            .collect()
    }

    /// Atom holding a full row of label indices, if the row lies in Ω.
    pub fn atom_of_row(&self, row: &[u32]) -> Option<usize> {
        let cell: usize = self
            .parts
            .iter()
            .zip(&self.strides)
            .map(|(p, &st)| p.label_block[row[p.column] as usize] as usize * st)
            .sum();
        match self.cell_atom[cell] {
            OUTSIDE => None,
            a => Some(a as usize),
        }
    }

    /// Exact row count of every atom.
    pub fn atom_counts(&self, db: &Database) -> Vec<u64> {
        // Few occupied cells: count each through the label bitmaps instead
        // of scanning rows.
        let inside = self.cell_atom.iter().filter(|&&a| a != OUTSIDE).count();
        let labels: usize = self.parts.iter().map(|p| p.label_block.len()).sum();
        if inside.saturating_mul(labels) < 64 * (self.parts.len() + 1) {
            return self.atom_counts_by_cell(db);
        }
        self.atom_counts_by_scan(db)
    }

    fn atom_counts_by_scan(&self, db: &Database) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_atoms()];
        for row in db.rows() {
            if let Some(a) = self.atom_of_row(row) {
                counts[a] += 1;
            }
        }
        counts
    }

    fn atom_counts_by_cell(&self, db: &Database) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_atoms()];
        if db.n() == 0 {
            return counts;
        }
        let words = db.bitmap_words();
        let mut acc = vec![0u64; words];
        let mut any = vec![0u64; words];
        for (cell, &a) in self.cell_atom.iter().enumerate() {
            if a == OUTSIDE {
                continue;
            }
            acc.iter_mut().for_each(|w| *w = !0);
            for (p, b) in self.parts.iter().zip(self.decode(cell)) {
                any.iter_mut().for_each(|w| *w = 0);
                for &l in &p.blocks[b as usize] {
                    for (x, y) in any.iter_mut().zip(db.label_bitmap(p.column, l)) {
                        *x |= y;
                    }
                }
                for (x, y) in acc.iter_mut().zip(&any) {
                    *x &= y;
                }
            }
            // Bits past row n are never set in any bitmap, but the all-ones
            // start survives when there are no partitioned columns.
            let tail = db.n() % 64;
            if tail != 0 {
                acc[words - 1] &= (1u64 << tail) - 1;
            }
            counts[a as usize] += acc.iter().map(|w| w.count_ones() as u64).sum::<u64>();
        }
        counts
    }

    pub fn cover(&self, q: &Query) -> Option<Cover> {
        let sel = self.selection(q)?;
        let mut atoms: Vec<u32> = Vec::new();
        let mut cells = 0u64;
        let mut outside = false;
        self.for_each_cell(&sel, |c| {
            let a = self.cell_atom[c];
            if a == OUTSIDE {
                outside = true;
            } else {
                atoms.push(a);
            }
            cells += 1;
        });
        if outside {
            return None;
        }
        atoms.sort_unstable();
        atoms.dedup();
        let total: u64 = atoms
            .iter()
            .map(|&a| self.atom_sizes[a as usize] as u64)
            .sum();
        (total == cells).then_some(Cover { atoms })
    }

    pub fn is_perturbed(&self) -> bool {
        self.noise.is_some()
    }

    pub fn eps_atom(&self) -> Option<f64> {
        self.noise.as_ref().map(|n| n.eps_atom)
    }

    pub fn noisy_counts(&self) -> Option<&[f64]> {
        self.noise.as_ref().map(|n| n.noisy.as_slice())
    }

    /// Seed and stream of the sampler that drew the atom noise.
    pub fn provenance(&self) -> Option<(u64, u64)> {
        self.noise.as_ref().map(|n| (n.seed, n.stream))
    }

    /// Total charge of perturbing this algebra at `eps_atom`.
    pub fn charge_for(&self, eps_atom: f64) -> f64 {
        self.n_atoms() as f64 * eps_atom
    }

    /// Charges `|Ω|·eps_atom`, then sets every atom's noisy count to
    /// `max(count + Lap(1/eps_atom), 0)`.
    pub fn perturb_atoms(
        &mut self,
        db: &Database,
        eps_atom: f64,
        acct: &mut PrivacyAccountant,
        sampler: &mut LaplaceSampler,
    ) -> Result<()> {
        check_eps(eps_atom)?;
        acct.charge(
            format!("sigma[{}]", self.n_atoms()),
            self.charge_for(eps_atom),
        )?;
        let counts = self.atom_counts(db);
        self.apply_noise(&counts, eps_atom, sampler)
    }

    /// Perturbation without charging; callers account for it themselves.
    pub(crate) fn apply_noise(
        &mut self,
        counts: &[u64],
        eps_atom: f64,
        sampler: &mut LaplaceSampler,
    ) -> Result<()> {
        check_eps(eps_atom)?;
        debug_assert_eq!(counts.len(), self.n_atoms());
        let (seed, stream) = (sampler.seed(), sampler.stream());
        let scale = 1.0 / eps_atom;
        let noisy = counts
            .iter()
            .map(|&c| Ok((c as f64 + sampler.sample(scale)?).max(0.0)))
            .collect::<Result<Vec<_>>>()?;
        self.noise = Some(Perturbation {
            eps_atom,
            seed,
            stream,
            noisy,
        });
        Ok(())
    }

    /// Sum of the covering atoms' noisy counts, added in ascending atom order
    /// so that nested queries compare exactly. Costs no budget.
    pub fn respond(&self, q: &Query) -> Result<NoisyCount> {
        let noise = self.noise.as_ref().ok_or(Error::NotPerturbed)?;
        let cover = self.cover(q).ok_or(Error::NotCovered)?;
        Ok(self.respond_cover(&noise.noisy, &cover))
    }

    pub fn respond_with(&self, cover: &Cover) -> Result<NoisyCount> {
        let noise = self.noise.as_ref().ok_or(Error::NotPerturbed)?;
        Ok(self.respond_cover(&noise.noisy, cover))
    }

    fn respond_cover(&self, noisy: &[f64], cover: &Cover) -> NoisyCount {
        let mut value = 0.0;
        for &a in &cover.atoms {
            value += noisy[a as usize];
        }
        NoisyCount {
            value,
            epsilon_charged: 0.0,
            truncated: true,
        }
    }

    /// Blocks, atoms, noisy counts, ε′ and seed provenance. Exact counts are
    /// never written.
    pub fn to_json(&self, schema: &Schema) -> Value {
        let columns: Vec<Value> = self
            .parts
            .iter()
            .map(|p| {
                let col = schema.column(p.column);
                let blocks: Vec<Vec<&str>> = p
                    .blocks
                    .iter()
                    .map(|b| b.iter().map(|&l| col.label(l)).collect())
                    .collect();
                json!({ "name": col.name(), "blocks": blocks })
            })
            .collect();
        let atoms: Vec<Vec<Vec<u32>>> = self.atoms().into_iter().map(|a| a.cells).collect();
        let inducing: Vec<String> = self.inducing.iter().map(|q| q.render(schema)).collect();
        let mut doc = json!({
            "columns": columns,
            "atoms": atoms,
            "inducing_queries": inducing,
        });
        if let Some(n) = &self.noise {
            doc["eps_atom"] = json!(n.eps_atom);
            doc["seed"] = json!(n.seed);
            doc["stream"] = json!(n.stream);
            doc["noisy_counts"] = json!(n.noisy);
        }
        doc
    }

    pub fn from_json(doc: &Value, schema: &Schema) -> Result<Self> {
        let bad = |m: &str| Error::Validation(format!("sigma-algebra document: {m}"));
        let columns = doc["columns"]
            .as_array()
            .ok_or_else(|| bad("missing `columns`"))?;
        let mut parts = Vec::with_capacity(columns.len());
        for c in columns {
            let name = c["name"]
                .as_str()
                .ok_or_else(|| bad("column without name"))?;
            let column = schema
                .column_index(name)
                .ok_or_else(|| bad(&format!("unknown column `{name}`")))?;
            let col = schema.column(column);
            let mut label_block = vec![OUTSIDE; col.domain_size()];
            let mut blocks = Vec::new();
            for (b, block) in c["blocks"]
                .as_array()
                .ok_or_else(|| bad("column without blocks"))?
                .iter()
                .enumerate()
            {
                let mut labels = Vec::new();
                for l in block
                    .as_array()
                    .ok_or_else(|| bad("block is not an array"))?
                {
                    let l = l.as_str().ok_or_else(|| bad("label is not a string"))?;
                    let idx = col
                        .label_index(l)
                        .ok_or_else(|| bad(&format!("unknown label `{l}` in `{name}`")))?;
                    if label_block[idx as usize] != OUTSIDE {
                        return Err(bad("blocks overlap"));
                    }
                    label_block[idx as usize] = b as u32;
                    labels.push(idx);
                }
                blocks.push(labels);
            }
            if label_block.contains(&OUTSIDE) {
                return Err(bad(&format!("blocks of `{name}` do not cover its domain")));
            }
            parts.push(Partition {
                column,
                blocks,
                label_block,
            });
        }
        parts.sort_by_key(|p| p.column);
        if parts.windows(2).any(|w| w[0].column == w[1].column) {
            return Err(bad("duplicate column"));
        }
        let mut strides = Vec::with_capacity(parts.len());
        let mut n_cells = 1usize;
        for p in &parts {
            strides.push(n_cells);
            n_cells = n_cells
                .checked_mul(p.blocks.len())
                .filter(|&n| (n as u64) <= DEFAULT_CELL_CAP.max(1 << 26))
                .ok_or_else(|| bad("grid too large"))?;
        }
        // Document cells list blocks in the order the columns were written.
        let order: Vec<usize> = columns
            .iter()
            .map(|c| {
                let name = c["name"].as_str().unwrap_or_default();
                let idx = schema.column_index(name).unwrap_or(usize::MAX);
                parts.iter().position(|p| p.column == idx).unwrap_or(0)
            })
            .collect();
        let mut cell_atom = vec![OUTSIDE; n_cells];
        let atoms = doc["atoms"]
            .as_array()
            .ok_or_else(|| bad("missing `atoms`"))?;
        let mut atom_sizes = Vec::with_capacity(atoms.len());
        for (a, atom) in atoms.iter().enumerate() {
            let cells = atom.as_array().ok_or_else(|| bad("atom is not an array"))?;
            if cells.is_empty() {
                return Err(bad("empty atom"));
            }
            for cell in cells {
                let coords = cell.as_array().ok_or_else(|| bad("cell is not an array"))?;
                if coords.len() != parts.len() {
                    return Err(bad("cell has the wrong arity"));
                }
                let mut idx = 0usize;
                for (k, v) in coords.iter().enumerate() {
                    let b = v
                        .as_u64()
                        .ok_or_else(|| bad("block index is not an integer"))?;
                    let pos = order[k];
                    if b as usize >= parts[pos].blocks.len() {
                        return Err(bad("block index out of range"));
                    }
                    idx += b as usize * strides[pos];
                }
                if cell_atom[idx] != OUTSIDE {
                    return Err(bad("atoms overlap"));
                }
                cell_atom[idx] = a as u32;
            }
            atom_sizes.push(cells.len() as u32);
        }
        let inducing = doc["inducing_queries"]
            .as_array()
            .map(|qs| {
                qs.iter()
                    .map(|q| Query::from_json(q, schema))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?
            .unwrap_or_default();
        let noise = match doc.get("noisy_counts") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let noisy: Vec<f64> = serde_json::from_value(v.clone())?;
                if noisy.len() != atom_sizes.len() {
                    return Err(bad("noisy count list does not match atoms"));
                }
                if noisy.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(bad("noisy counts must be non-negative"));
                }
                Some(Perturbation {
                    eps_atom: doc["eps_atom"]
                        .as_f64()
                        .ok_or_else(|| bad("missing `eps_atom`"))?,
                    seed: doc["seed"].as_u64().unwrap_or(0),
                    stream: doc["stream"].as_u64().unwrap_or(0),
                    noisy,
                })
            }
        };
        let mask = ActiveSet::new(parts.iter().map(|p| p.column).collect());
        Ok(SigmaAlgebra {
            parts,
            strides,
            cell_atom,
            atom_sizes,
            inducing,
            mask,
            noise,
        })
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "epsilon must be positive and finite, got {eps}"
        )))
    }
}

/// Coarsest partition of `0..domain` refining every constraint on `column`.
/// Blocks are ordered by their smallest label.
fn refine_column(column: usize, domain: usize, queries: &[Query]) -> Partition {
    let mut sets: Vec<&LabelSet> = queries.iter().filter_map(|q| q.allowed(column)).collect();
    sets.sort();
    sets.dedup();
    let words = sets.len().div_ceil(64);
    let mut by_sig: HashMap<Vec<u64>, u32> = HashMap::new();
    let mut blocks: Vec<Vec<u32>> = Vec::new();
    let mut label_block = vec![0u32; domain];
    for l in 0..domain as u32 {
        let mut sig = vec![0u64; words];
        for (i, s) in sets.iter().enumerate() {
            if s.contains(l) {
                sig[i / 64] |= 1 << (i % 64);
            }
        }
        let b = *by_sig.entry(sig).or_insert_with(|| {
            blocks.push(Vec::new());
            (blocks.len() - 1) as u32
        });
        blocks[b as usize].push(l);
        label_block[l as usize] = b;
    }
    Partition {
        column,
        blocks,
        label_block,
    }
}

/// `Q > |Ω|^{3/2}`: enough queries for atom reuse to beat per-query noise.
pub fn advantage_condition_thm2(q: u64, omega_size: u64) -> bool {
    // Compare Q² > |Ω|³ in integers to keep the boundary exact.
    let lhs = (q as u128) * (q as u128);
    let rhs = (omega_size as u128).pow(3);
    lhs > rhs
}

/// Per-atom ε′ spending the same total as `Q` queries at `eps`.
pub fn eps_atom_for_budget(q: u64, omega_size: u64, eps: f64) -> f64 {
    eps * q as f64 / omega_size as f64
}
