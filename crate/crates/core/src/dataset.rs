//! Categorical tables: schema, immutable row snapshots, CSV ingestion,
//! one-hot encoding and the single mutation path (`apply_delta`).
//!
//! Cells are stored as label indices into the column's domain. Every snapshot
//! lazily builds one row bitmap per (column, label) so that counting scans
//! touch 64 rows per word.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    name: String,
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl Column {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn domain_size(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<u32> {
        self.index.get(label).copied()
    }

    pub fn label(&self, idx: u32) -> &str {
        &self.labels[idx as usize]
    }

    /// True when the domain is exactly `{0, 1}` in that order.
    pub fn is_binary(&self) -> bool {
        self.labels.len() == 2 && self.labels[0] == "0" && self.labels[1] == "1"
    }
}

/// Ordered list of categorical columns with finite domains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    columns: Vec<Column>,
    by_name: HashMap<String, usize>,
}

impl Schema {
    pub fn new<N, L>(columns: impl IntoIterator<Item = (N, Vec<L>)>) -> Result<Self>
    where
        N: Into<String>,
        L: Into<String>,
    {
        let mut out = Vec::new();
        let mut by_name = HashMap::new();
        for (name, labels) in columns {
            let name = name.into();
            if by_name.contains_key(&name) {
                return Err(Error::Schema(format!("duplicate column `{name}`")));
            }
            let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
            if labels.is_empty() {
                return Err(Error::Schema(format!(
                    "column `{name}` has an empty domain"
                )));
            }
            let mut index = HashMap::with_capacity(labels.len());
            for (i, l) in labels.iter().enumerate() {
                if index.insert(l.clone(), i as u32).is_some() {
                    return Err(Error::Schema(format!(
                        "column `{name}` repeats label `{l}`"
                    )));
                }
            }
            by_name.insert(name.clone(), out.len());
            out.push(Column {
                name,
                labels,
                index,
            });
        }
        if out.is_empty() {
            return Err(Error::Schema("schema needs at least one column".into()));
        }
        Ok(Schema {
            columns: out,
            by_name,
        })
    }

    /// `p` binary columns named `c1..cp`.
    pub fn binary(p: usize) -> Result<Self> {
        Schema::new((1..=p).map(|i| (format!("c{i}"), vec!["0", "1"])))
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, idx: usize) -> &Column {
        &self.columns[idx]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Number of cells in the full product domain, saturating.
    pub fn cell_count(&self) -> u128 {
        self.columns
            .iter()
            .fold(1u128, |acc, c| acc.saturating_mul(c.domain_size() as u128))
    }

    /// Sidecar format: `{"column": ["label", ...], ...}` in column order.
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Schema("schema document must be a JSON object".into()))?;
        let mut cols = Vec::with_capacity(obj.len());
        for (name, labels) in obj {
            let arr = labels
                .as_array()
                .ok_or_else(|| Error::Schema(format!("labels of `{name}` must be an array")))?;
            let labels = arr
                .iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s.clone()),
                    Value::Number(n) => Ok(n.to_string()),
                    other => Err(Error::Schema(format!(
                        "label {other} of `{name}` is not a string"
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            cols.push((name.clone(), labels));
        }
        Schema::new(cols)
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for c in &self.columns {
            map.insert(
                c.name.clone(),
                Value::Array(c.labels.iter().cloned().map(Value::String).collect()),
            );
        }
        Value::Object(map)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let v: Value = serde_json::from_reader(BufReader::new(file))?;
        Schema::from_json(&v)
    }

    /// Same columns in a different order (matched by name). Used when a CSV
    /// header orders the columns of a sidecar schema.
    fn reordered(&self, names: &[String]) -> Result<Schema> {
        if names.len() != self.len() {
            return Err(Error::Schema(format!(
                "header has {} columns, schema has {}",
                names.len(),
                self.len()
            )));
        }
        let mut cols = Vec::with_capacity(names.len());
        for n in names {
            let idx = self.column_index(n).ok_or_else(|| {
                Error::Schema(format!("header column `{n}` is not in the schema"))
            })?;
            let c = &self.columns[idx];
            cols.push((c.name.clone(), c.labels.clone()));
        }
        Schema::new(cols)
    }
}

/// Per (column, label) row bitmaps.
#[derive(Debug)]
struct Bitmaps {
    words: usize,
    // columns[c][label] -> bitmap words
    columns: Vec<Vec<Vec<u64>>>,
}

/// Immutable table snapshot. Mutation goes through [`Database::apply_delta`],
/// which returns a new snapshot with a larger version.
#[derive(Debug, Clone)]
pub struct Database {
    schema: Arc<Schema>,
    cells: Vec<u32>,
    n: usize,
    version: u64,
    bitmaps: Arc<OnceLock<Bitmaps>>,
}

impl PartialEq for Database {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.n == other.n
            && self.version == other.version
            && self.cells == other.cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaKind {
    Insert,
    Delete,
}

/// One row change. `row` holds one label per schema column, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowDelta {
    pub kind: DeltaKind,
    pub row: Vec<String>,
    pub time_step: u32,
}

impl RowDelta {
    pub fn insert(row: Vec<String>, time_step: u32) -> Self {
        RowDelta {
            kind: DeltaKind::Insert,
            row,
            time_step,
        }
    }

    pub fn delete(row: Vec<String>, time_step: u32) -> Self {
        RowDelta {
            kind: DeltaKind::Delete,
            row,
            time_step,
        }
    }
}

impl Database {
    pub fn empty(schema: Schema) -> Self {
        Database::from_indices(Arc::new(schema), Vec::new(), 0)
    }

    fn from_indices(schema: Arc<Schema>, cells: Vec<u32>, version: u64) -> Self {
        let p = schema.len();
        debug_assert_eq!(cells.len() % p, 0);
        Database {
            n: cells.len() / p,
            schema,
            cells,
            version,
            bitmaps: Arc::new(OnceLock::new()),
        }
    }

    /// Build from label-index rows. Every index must lie inside its domain.
    pub fn from_rows(schema: Schema, rows: impl IntoIterator<Item = Vec<u32>>) -> Result<Self> {
        let p = schema.len();
        let mut cells = Vec::new();
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != p {
                return Err(Error::Validation(format!(
                    "row {r} has {} values, schema has {p} columns",
                    row.len()
                )));
            }
            for (c, &v) in row.iter().enumerate() {
                if v as usize >= schema.column(c).domain_size() {
                    return Err(Error::Validation(format!(
                        "row {r}: label index {v} outside domain of `{}`",
                        schema.column(c).name()
                    )));
                }
            }
            cells.extend_from_slice(&row);
        }
        Ok(Database::from_indices(Arc::new(schema), cells, 0))
    }

    /// Build from label strings.
    pub fn from_labels<S: AsRef<str>>(
        schema: Schema,
        rows: impl IntoIterator<Item = Vec<S>>,
    ) -> Result<Self> {
        let encoded = rows
            .into_iter()
            .map(|row| encode_row(&schema, &row))
            .collect::<Result<Vec<_>>>()?;
        Database::from_rows(schema, encoded)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn schema_arc(&self) -> Arc<Schema> {
        Arc::clone(&self.schema)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let p = self.schema.len();
        &self.cells[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.cells.chunks_exact(self.schema.len())
    }

    pub fn row_labels(&self, i: usize) -> Vec<String> {
        self.row(i)
            .iter()
            .enumerate()
            .map(|(c, &v)| self.schema.column(c).label(v).to_string())
            .collect()
    }

    pub(crate) fn bitmap_words(&self) -> usize {
        self.bitmaps().words
    }

    /// Rows whose column `col` holds label `label`, 64 per word.
    pub(crate) fn label_bitmap(&self, col: usize, label: u32) -> &[u64] {
        &self.bitmaps().columns[col][label as usize]
    }

    fn bitmaps(&self) -> &Bitmaps {
        self.bitmaps.get_or_init(|| {
            let words = self.n.div_ceil(64);
            let mut columns: Vec<Vec<Vec<u64>>> = self
                .schema
                .columns()
                .iter()
                .map(|c| vec![vec![0u64; words]; c.domain_size()])
                .collect();
            for (r, row) in self.rows().enumerate() {
                let (w, b) = (r / 64, r % 64);
                for (c, &v) in row.iter().enumerate() {
                    columns[c][v as usize][w] |= 1u64 << b;
                }
            }
            Bitmaps { words, columns }
        })
    }

    /// Reads a headed, comma-separated file. Labels are trimmed; there is no
    /// quoting. With `schema = None` the domains are the distinct observed
    /// values of each column, sorted.
    pub fn load_csv(path: impl AsRef<Path>, schema: Option<&Schema>) -> Result<Self> {
        let file = File::open(path)?;
        Database::read_csv(BufReader::new(file), schema)
    }

    pub fn read_csv<R: Read>(reader: R, schema: Option<&Schema>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .quoting(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            None => {
                return match schema {
                    Some(s) => Ok(Database::empty(s.clone())),
                    None => Err(Error::Parse {
                        line: 1,
                        message: "empty file and no schema to infer from".into(),
                    }),
                }
            }
            Some(h) => h?,
        };
        let names: Vec<String> = header.iter().map(str::to_string).collect();
        let p = names.len();
        let mut raw: Vec<Vec<String>> = Vec::new();
        let mut lines: Vec<usize> = Vec::new();
        for rec in records {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != p {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {p} fields, found {}", rec.len()),
                });
            }
            raw.push(rec.iter().map(str::to_string).collect());
            lines.push(line);
        }
        let schema = match schema {
            Some(s) => s.reordered(&names)?,
            None => {
                let mut domains: Vec<Vec<String>> = vec![Vec::new(); p];
                for c in 0..p {
                    let mut seen: Vec<String> = raw
                        .iter()
                        .map(|r| r[c].clone())
                        .collect::<HashSet<_>>()
                        .into_iter()
                        .collect();
                    seen.sort();
                    if seen.is_empty() {
                        return Err(Error::Parse {
                            line: 1,
                            message: "cannot infer a schema from a file without data rows".into(),
                        });
                    }
                    domains[c] = seen;
                }
                Schema::new(names.into_iter().zip(domains))?
            }
        };
        let mut cells = Vec::with_capacity(raw.len() * p);
        for (row, line) in raw.iter().zip(lines) {
            for (c, label) in row.iter().enumerate() {
                let col = schema.column(c);
                let idx = col.label_index(label).ok_or_else(|| {
                    Error::Validation(format!(
                        "line {line}: label `{label}` is not in the domain of `{}`",
                        col.name()
                    ))
                })?;
                cells.push(idx);
            }
        }
        Ok(Database::from_indices(Arc::new(schema), cells, 0))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<&str> = self.schema.columns().iter().map(|c| c.name()).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in self.rows() {
            let labels: Vec<&str> = row
                .iter()
                .enumerate()
                .map(|(c, &v)| self.schema.column(c).label(v))
                .collect();
            writeln!(out, "{}", labels.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// One-hot encoding: a column with `k` labels becomes `k` columns named
    /// `col=label` over `{0,1}`. Columns already over exactly `{0,1}` pass
    /// through unchanged.
    pub fn encode_binary(&self) -> Result<Database> {
        let mut out_cols: Vec<(String, Vec<&str>)> = Vec::new();
        // Per source column: first output column, and for a {0,1} pass-through
        // the map from source index to bit.
        let mut plan: Vec<(usize, Option<Vec<u32>>)> = Vec::new();
        for col in self.schema.columns() {
            let labels = col.labels();
            let is_01 = labels.len() == 2
                && labels.iter().any(|l| l == "0")
                && labels.iter().any(|l| l == "1");
            let start = out_cols.len();
            if is_01 {
                let map = labels
                    .iter()
                    .map(|l| if l == "1" { 1 } else { 0 })
                    .collect::<Vec<u32>>();
                out_cols.push((col.name().to_string(), vec!["0", "1"]));
                plan.push((start, Some(map)));
            } else {
                for l in labels {
                    out_cols.push((format!("{}={}", col.name(), l), vec!["0", "1"]));
                }
                plan.push((start, None));
            }
        }
        let schema = Schema::new(out_cols)?;
        let width = schema.len();
        let mut cells = vec![0u32; self.n * width];
        for (r, row) in self.rows().enumerate() {
            let dst = &mut cells[r * width..(r + 1) * width];
            for (c, &v) in row.iter().enumerate() {
                let (start, ref passthrough) = plan[c];
                match passthrough {
                    Some(map) => dst[start] = map[v as usize],
                    None => dst[start + v as usize] = 1,
                }
            }
        }
        Ok(Database::from_indices(Arc::new(schema), cells, 0))
    }

    /// The only mutation path: returns the next snapshot.
    pub fn apply_delta(&self, delta: &RowDelta) -> Result<Database> {
        if delta.time_step == 0 {
            return Err(Error::Validation("time step must be positive".into()));
        }
        let row = encode_row(&self.schema, &delta.row)?;
        let mut cells = self.cells.clone();
        match delta.kind {
            DeltaKind::Insert => cells.extend_from_slice(&row),
            DeltaKind::Delete => {
                let p = self.schema.len();
                let pos = self
                    .rows()
                    .position(|r| r == row.as_slice())
                    .ok_or_else(|| {
                        Error::NotFound(format!("no row equal to ({})", delta.row.join(",")))
                    })?;
                cells.drain(pos * p..(pos + 1) * p);
            }
        }
        Ok(Database::from_indices(
            Arc::clone(&self.schema),
            cells,
            self.version + 1,
        ))
    }
}

fn encode_row<S: AsRef<str>>(schema: &Schema, row: &[S]) -> Result<Vec<u32>> {
    if row.len() != schema.len() {
        return Err(Error::Validation(format!(
            "row has {} values, schema has {} columns",
            row.len(),
            schema.len()
        )));
    }
    row.iter()
        .enumerate()
        .map(|(c, l)| {
            let col = schema.column(c);
            col.label_index(l.as_ref()).ok_or_else(|| {
                Error::Validation(format!(
                    "label `{}` is not in the domain of `{}`",
                    l.as_ref(),
                    col.name()
                ))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn abc() -> Schema {
        Schema::new([("x", vec!["a", "b", "c"])]).unwrap()
    }

    #[test]
    fn schema_rejects_bad_definitions() {
        assert!(Schema::new(Vec::<(String, Vec<String>)>::new()).is_err());
        assert!(Schema::new([("a", Vec::<String>::new())]).is_err());
        assert!(Schema::new([("a", vec!["0"]), ("a", vec!["1"])]).is_err());
        assert!(Schema::new([("a", vec!["0", "0"])]).is_err());
    }

    #[test]
    fn empty_file_with_schema_has_no_rows() {
        let s = Schema::new([("a", vec!["0"]), ("b", vec!["0"]), ("c", vec!["0"])]).unwrap();
        let db = Database::read_csv("".as_bytes(), Some(&s)).unwrap();
        assert_eq!(db.n(), 0);
        let db = Database::read_csv("a,b,c\n".as_bytes(), Some(&s)).unwrap();
        assert_eq!(db.n(), 0);
    }

    #[test]
    fn duplicate_rows_are_kept() {
        let text = "u,v\n1,0\n0,0\n1,0\n1,1\n0,1\n";
        let db = Database::read_csv(text.as_bytes(), None).unwrap();
        // oracle: data lines = non-empty lines minus header
        let expected = text.lines().filter(|l| !l.trim().is_empty()).count() - 1;
        assert_eq!(db.n(), expected);
        assert_eq!(db.n(), 5);
    }

    #[test]
    fn wrong_arity_reports_line() {
        let err = Database::read_csv("u,v\n1,0\n1\n".as_bytes(), None).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_label_under_explicit_schema() {
        let s = Schema::binary(2).unwrap();
        let err = Database::read_csv("c1,c2\n0,2\n".as_bytes(), Some(&s)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err:?}");
    }

    #[test]
    fn header_order_follows_file() {
        let s = Schema::new([("a", vec!["x", "y"]), ("b", vec!["p"])]).unwrap();
        let db = Database::read_csv("b,a\np,y\n".as_bytes(), Some(&s)).unwrap();
        assert_eq!(db.schema().column(0).name(), "b");
        assert_eq!(db.row_labels(0), vec!["p", "y"]);
    }

    #[test]
    fn csv_round_trip() {
        let text = "u,v\nb,1\na,0\nb,1\n";
        let db = Database::read_csv(text.as_bytes(), None).unwrap();
        let mut buf = Vec::new();
        db.write_csv(&mut buf).unwrap();
        let again = Database::read_csv(buf.as_slice(), None).unwrap();
        assert_eq!(db, again);
    }

    #[test]
    fn one_hot_single_row() {
        let db = Database::from_labels(abc(), [vec!["b"]]).unwrap();
        let enc = db.encode_binary().unwrap();
        assert_eq!(enc.schema().len(), 3);
        assert_eq!(enc.row(0), &[0, 1, 0]);
        assert_eq!(enc.schema().column(1).name(), "x=b");
    }

    #[test]
    fn binary_columns_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Schema::binary(4).unwrap();
        let rows: Vec<Vec<u32>> = (0..50)
            .map(|_| (0..4).map(|_| rng.gen_range(0..2)).collect())
            .collect();
        let db = Database::from_rows(s, rows).unwrap();
        let enc = db.encode_binary().unwrap();
        assert_eq!(enc.schema().len(), 4);
        assert_eq!(enc.n(), db.n());
        for i in 0..db.n() {
            assert_eq!(enc.row(i), db.row(i));
        }
        // a {1,0}-ordered domain is still recognised and normalised
        let flipped = Schema::new([("f", vec!["1", "0"])]).unwrap();
        let db = Database::from_labels(flipped, [vec!["1"], vec!["0"]]).unwrap();
        let enc = db.encode_binary().unwrap();
        assert!(enc.schema().column(0).is_binary());
        assert_eq!(enc.row_labels(0), vec!["1"]);
    }

    #[test]
    fn one_hot_rows_sum_to_one_per_source_column() {
        let s = Schema::new([
            ("a", vec!["x", "y", "z"]),
            ("b", vec!["0", "1"]),
            ("c", vec!["p", "q"]),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<u32>> = (0..200)
            .map(|_| {
                vec![
                    rng.gen_range(0..3),
                    rng.gen_range(0..2),
                    rng.gen_range(0..2),
                ]
            })
            .collect();
        let db = Database::from_rows(s, rows).unwrap();
        let enc = db.encode_binary().unwrap();
        assert_eq!(enc.schema().len(), 3 + 1 + 2);
        assert_eq!(enc.n(), 200);
        for i in 0..enc.n() {
            let r = enc.row(i);
            assert_eq!(r[0] + r[1] + r[2], 1);
            assert_eq!(r[4] + r[5], 1);
            assert_eq!(r[3], db.row(i)[1]);
        }
    }

    #[test]
    fn insert_then_delete() {
        let db = Database::empty(abc());
        let one = db
            .apply_delta(&RowDelta::insert(vec!["a".into()], 2))
            .unwrap();
        assert_eq!(one.n(), 1);
        let zero = one
            .apply_delta(&RowDelta::delete(vec!["a".into()], 3))
            .unwrap();
        assert_eq!(zero.n(), 0);
        assert_eq!(zero.version(), db.version() + 2);
        let err = zero
            .apply_delta(&RowDelta::delete(vec!["a".into()], 4))
            .unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
        assert!(db
            .apply_delta(&RowDelta::insert(vec!["a".into()], 0))
            .is_err());
        assert!(db
            .apply_delta(&RowDelta::insert(vec!["zz".into()], 1))
            .is_err());
    }

    #[test]
    fn replayed_inserts_and_deletes() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let labels = ["a", "b", "c"];
        let mut db = Database::empty(abc());
        // independent replay: a plain multiset of labels
        let mut log: Vec<&str> = Vec::new();
        for t in 0..100 {
            let l = labels[rng.gen_range(0..3)];
            db = db
                .apply_delta(&RowDelta::insert(vec![l.into()], t + 1))
                .unwrap();
            log.push(l);
        }
        for t in 0..40 {
            let i = rng.gen_range(0..log.len());
            let l = log.swap_remove(i);
            db = db
                .apply_delta(&RowDelta::delete(vec![l.into()], 101 + t))
                .unwrap();
        }
        assert_eq!(db.n(), log.len());
        assert_eq!(db.n(), 60);
        assert_eq!(db.version(), 140);
    }

    #[test]
    fn sidecar_schema_keeps_column_order() {
        let v: Value = serde_json::from_str(r#"{"z":["1","2"],"a":["x"]}"#).unwrap();
        let s = Schema::from_json(&v).unwrap();
        assert_eq!(s.column(0).name(), "z");
        assert_eq!(Schema::from_json(&s.to_json()).unwrap(), s);
    }
}
