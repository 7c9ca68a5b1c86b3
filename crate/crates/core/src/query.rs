//! Conjunctive counting queries: each constrained column must take a value
//! from a non-empty label set. Constraints equal to the whole domain are
//! dropped on construction, so two queries selecting the same cells compare
//! equal and the constrained columns are exactly the active ones.
//!
//! Text form: `col IN {v1,v2} AND other IN {v}`; `*` or the empty string is
//! the unconstrained query. Names and labels containing separators can be
//! double-quoted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde_json::{Map, Value};

use crate::dataset::{Database, Schema};
use crate::error::{Error, Result};

/// Sorted, deduplicated, non-empty set of label indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSet(Vec<u32>);

impl LabelSet {
    pub fn new(labels: impl IntoIterator<Item = u32>) -> Option<Self> {
        let mut v: Vec<u32> = labels.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            None
        } else {
            Some(LabelSet(v))
        }
    }

    pub fn full(domain: usize) -> Self {
        LabelSet((0..domain as u32).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn contains(&self, label: u32) -> bool {
        self.0.binary_search(&label).is_ok()
    }

    pub fn is_subset(&self, other: &LabelSet) -> bool {
        let mut it = other.0.iter();
        'outer: for x in &self.0 {
            for y in it.by_ref() {
                if y == x {
                    continue 'outer;
                }
                if y > x {
                    return false;
                }
            }
            return false;
        }
        true
    }

    pub fn intersect(&self, other: &LabelSet) -> Option<LabelSet> {
        LabelSet::new(self.0.iter().copied().filter(|l| other.contains(*l)))
    }
}

/// Columns a query strictly constrains, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ActiveSet(Vec<usize>);

impl ActiveSet {
    pub fn new(mut cols: Vec<usize>) -> Self {
        cols.sort_unstable();
        cols.dedup();
        ActiveSet(cols)
    }

    pub fn columns(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, col: usize) -> bool {
        self.0.binary_search(&col).is_ok()
    }

    pub fn is_subset(&self, other: &ActiveSet) -> bool {
        self.0.iter().all(|c| other.contains(*c))
    }

    pub fn embedding(&self, p: usize) -> Embedding {
        let mut bits = vec![0u8; p];
        for &c in &self.0 {
            bits[c] = 1;
        }
        Embedding(bits)
    }
}

/// Indicator vector of the active set over all `p` columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Embedding(pub Vec<u8>);

impl Embedding {
    pub fn bits(&self) -> &[u8] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Query {
    constraints: BTreeMap<usize, LabelSet>,
}

impl Query {
    pub fn unconstrained() -> Self {
        Query::default()
    }

    /// Validates against `schema` and drops constraints covering the whole
    /// domain.
    pub fn new(
        schema: &Schema,
        constraints: impl IntoIterator<Item = (usize, LabelSet)>,
    ) -> Result<Self> {
        let mut out: BTreeMap<usize, LabelSet> = BTreeMap::new();
        for (col, set) in constraints {
            if col >= schema.len() {
                return Err(Error::query(col.to_string(), "column index out of range"));
            }
            let column = schema.column(col);
            if let Some(&bad) = set.as_slice().last() {
                if bad as usize >= column.domain_size() {
                    return Err(Error::query(
                        bad.to_string(),
                        format!("label index outside domain of `{}`", column.name()),
                    ));
                }
            }
            let merged = match out.remove(&col) {
                Some(prev) => prev.intersect(&set).ok_or_else(|| {
                    Error::query(
                        column.name(),
                        "constraints on this column have an empty intersection",
                    )
                })?,
                None => set,
            };
            out.insert(col, merged);
        }
        out.retain(|&c, s| s.len() < schema.column(c).domain_size());
        Ok(Query { constraints: out })
    }

    /// Convenience constructor from column names and label strings.
    pub fn from_labels<N, L>(schema: &Schema, constraints: &[(N, &[L])]) -> Result<Self>
    where
        N: AsRef<str>,
        L: AsRef<str>,
    {
        let mut cs = Vec::with_capacity(constraints.len());
        for (name, labels) in constraints {
            let (col, set) = resolve(schema, name.as_ref(), labels.iter().map(|l| l.as_ref()))?;
            cs.push((col, set));
        }
        Query::new(schema, cs)
    }

    pub fn constraints(&self) -> &BTreeMap<usize, LabelSet> {
        &self.constraints
    }

    pub fn allowed(&self, col: usize) -> Option<&LabelSet> {
        self.constraints.get(&col)
    }

    pub fn is_unconstrained(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn matches_row(&self, row: &[u32]) -> bool {
        self.constraints.iter().all(|(&c, s)| s.contains(row[c]))
    }

    pub fn active_set(&self) -> ActiveSet {
        ActiveSet(self.constraints.keys().copied().collect())
    }

    pub fn embedding(&self, schema: &Schema) -> Embedding {
        self.active_set().embedding(schema.len())
    }

    /// Per-column inclusion, which for conjunctive queries over a product
    /// domain is equivalent to inclusion of the selected cells.
    pub fn is_subset(&self, other: &Query) -> bool {
        other
            .constraints
            .iter()
            .all(|(c, s2)| match self.constraints.get(c) {
                Some(s1) => s1.is_subset(s2),
                None => false,
            })
    }

    pub fn intersect(&self, other: &Query, schema: &Schema) -> Result<Query> {
        Query::new(
            schema,
            self.constraints
                .iter()
                .chain(other.constraints.iter())
                .map(|(c, s)| (*c, s.clone())),
        )
    }

    pub fn parse(text: &str, schema: &Schema) -> Result<Self> {
        Parser::new(text).parse(schema)
    }

    /// Canonical text: columns in schema order, labels sorted.
    pub fn render(&self, schema: &Schema) -> String {
        if self.constraints.is_empty() {
            return "*".to_string();
        }
        let mut out = String::new();
        for (i, (&c, set)) in self.constraints.iter().enumerate() {
            if i > 0 {
                out.push_str(" AND ");
            }
            let col = schema.column(c);
            let mut labels: Vec<&str> = set.as_slice().iter().map(|&l| col.label(l)).collect();
            labels.sort_unstable();
            write_token(&mut out, col.name(), false);
            out.push_str(" IN {");
            for (j, l) in labels.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write_token(&mut out, l, true);
            }
            out.push('}');
        }
        out
    }

    /// `{"column": ["label", ...]}`; a string value is parsed as query text.
    pub fn from_json(value: &Value, schema: &Schema) -> Result<Self> {
        match value {
            Value::String(s) => Query::parse(s, schema),
            Value::Null => Ok(Query::unconstrained()),
            Value::Object(obj) => {
                let mut cs = Vec::with_capacity(obj.len());
                for (name, labels) in obj {
                    let arr = labels.as_array().ok_or_else(|| {
                        Error::query(name.clone(), "labels must be given as an array")
                    })?;
                    let strs = arr
                        .iter()
                        .map(|v| match v {
                            Value::String(s) => Ok(s.clone()),
                            Value::Number(n) => Ok(n.to_string()),
                            other => Err(Error::query(other.to_string(), "label is not a string")),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    cs.push(resolve(schema, name, strs.iter().map(String::as_str))?);
                }
                Query::new(schema, cs)
            }
            other => Err(Error::query(
                other.to_string(),
                "query must be an object or string",
            )),
        }
    }

    pub fn to_json(&self, schema: &Schema) -> Value {
        let mut map = Map::new();
        for (&c, set) in &self.constraints {
            let col = schema.column(c);
            let mut labels: Vec<&str> = set.as_slice().iter().map(|&l| col.label(l)).collect();
            labels.sort_unstable();
            map.insert(
                col.name().to_string(),
                Value::Array(
                    labels
                        .into_iter()
                        .map(|l| Value::String(l.into()))
                        .collect(),
                ),
            );
        }
        Value::Object(map)
    }
}

fn resolve<'a>(
    schema: &Schema,
    name: &str,
    labels: impl Iterator<Item = &'a str>,
) -> Result<(usize, LabelSet)> {
    let col = schema
        .column_index(name)
        .ok_or_else(|| Error::query(name, "unknown column"))?;
    let column = schema.column(col);
    let idx = labels
        .map(|l| {
            column
                .label_index(l)
                .ok_or_else(|| Error::query(l, format!("unknown label for column `{name}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let set = LabelSet::new(idx).ok_or_else(|| Error::query(name, "empty label set"))?;
    Ok((col, set))
}

fn needs_quotes(s: &str, label: bool) -> bool {
    s.is_empty()
        || s == "*"
        || s.trim() != s
        || s.chars().any(|ch| {
            matches!(ch, '{' | '}' | '"' | '\\')
                || (label && ch == ',')
                || (!label && ch.is_whitespace())
        })
}

fn write_token(out: &mut String, s: &str, label: bool) {
    if needs_quotes(s, label) {
        out.push('"');
        for ch in s.chars() {
            if ch == '"' || ch == '\\' {
                out.push('\\');
            }
            out.push(ch);
        }
        out.push('"');
    } else {
        let _ = write!(out, "{s}");
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn near(&self) -> String {
        let r = self.rest();
        let end = r.char_indices().nth(16).map(|(i, _)| i).unwrap_or(r.len());
        if r.is_empty() {
            "<end of input>".to_string()
        } else {
            r[..end].to_string()
        }
    }

    fn quoted(&mut self) -> Result<String> {
        debug_assert_eq!(self.peek(), Some('"'));
        self.pos += 1;
        let mut out = String::new();
        let mut chars = self.rest().char_indices();
        while let Some((i, ch)) = chars.next() {
            match ch {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, esc)) => out.push(esc),
                    None => break,
                },
                _ => out.push(ch),
            }
        }
        Err(Error::query(self.near(), "unterminated quoted string"))
    }

    fn word(&mut self) -> Result<String> {
        if self.peek() == Some('"') {
            return self.quoted();
        }
        let r = self.rest();
        let end = r
            .find(|ch: char| ch.is_whitespace() || ch == '{')
            .unwrap_or(r.len());
        if end == 0 {
            return Err(Error::query(self.near(), "expected a column name"));
        }
        self.pos += end;
        Ok(r[..end].to_string())
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        self.skip_ws();
        let r = self.rest();
        let ok = r.len() >= kw.len()
            && r[..kw.len()].eq_ignore_ascii_case(kw)
            && r[kw.len()..]
                .chars()
                .next()
                .is_none_or(|c| c.is_whitespace() || c == '{' || c == '"');
        if !ok {
            return Err(Error::query(self.near(), format!("expected `{kw}`")));
        }
        self.pos += kw.len();
        Ok(())
    }

    fn labels(&mut self) -> Result<Vec<String>> {
        self.skip_ws();
        if self.peek() != Some('{') {
            return Err(Error::query(self.near(), "expected `{`"));
        }
        self.pos += 1;
        let mut out = Vec::new();
        loop {
            self.skip_ws();
            let label = if self.peek() == Some('"') {
                let l = self.quoted()?;
                self.skip_ws();
                l
            } else {
                let r = self.rest();
                let end = r
                    .find([',', '}'])
                    .ok_or_else(|| Error::query(self.near(), "unterminated label set"))?;
                self.pos += end;
                r[..end].trim().to_string()
            };
            match self.peek() {
                Some(',') => {
                    self.pos += 1;
                    if label.is_empty() {
                        return Err(Error::query(self.near(), "empty label"));
                    }
                    out.push(label);
                }
                Some('}') => {
                    self.pos += 1;
                    if !label.is_empty() || !out.is_empty() {
                        if label.is_empty() {
                            return Err(Error::query("}", "empty label"));
                        }
                        out.push(label);
                    }
                    break;
                }
                _ => return Err(Error::query(self.near(), "expected `,` or `}`")),
            }
        }
        Ok(out)
    }

    fn parse(mut self, schema: &Schema) -> Result<Query> {
        self.skip_ws();
        if self.rest().is_empty() {
            return Ok(Query::unconstrained());
        }
        if self.rest() == "*" {
            return Ok(Query::unconstrained());
        }
        let mut cs: Vec<(usize, LabelSet)> = Vec::new();
        loop {
            self.skip_ws();
            if self.peek() == Some('*') {
                self.pos += 1;
            } else {
                let name = self.word()?;
                self.keyword("IN")?;
                let labels = self.labels()?;
                if labels.is_empty() {
                    return Err(Error::query(name, "empty label set"));
                }
                let entry = resolve(schema, &name, labels.iter().map(String::as_str))?;
                if let Some(pos) = cs.iter().position(|(c, _)| *c == entry.0) {
                    let merged = cs[pos].1.intersect(&entry.1).ok_or_else(|| {
                        Error::query(
                            name.clone(),
                            "constraints on this column have an empty intersection",
                        )
                    })?;
                    cs[pos].1 = merged;
                } else {
                    cs.push(entry);
                }
            }
            self.skip_ws();
            if self.rest().is_empty() {
                break;
            }
            self.keyword("AND")?;
        }
        Query::new(schema, cs)
    }
}

/// Number of rows satisfying every constraint of `q`.
pub fn exact_count(db: &Database, q: &Query) -> u64 {
    if q.is_unconstrained() || db.n() == 0 {
        return db.n() as u64;
    }
    let words = db.bitmap_words();
    let cols: Vec<Vec<&[u64]>> = q
        .constraints()
        .iter()
        .map(|(&c, set)| {
            set.as_slice()
                .iter()
                .map(|&l| db.label_bitmap(c, l))
                .collect()
        })
        .collect();
    let mut total = 0u64;
    for w in 0..words {
        let mut acc = !0u64;
        for maps in &cols {
            let mut any = 0u64;
            for m in maps {
                any |= m[w];
            }
            acc &= any;
            if acc == 0 {
                break;
            }
        }
        total += acc.count_ones() as u64;
    }
    total
}

/// `exact_count` for many queries, in parallel, preserving order.
pub fn exact_counts(db: &Database, queries: &[Query]) -> Vec<u64> {
    queries.par_iter().map(|q| exact_count(db, q)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn demo_schema() -> Schema {
        Schema::new([
            ("age", vec!["50s", "60s", "70s"]),
            ("state", vec!["CA", "NY", "TX"]),
            ("c1", vec!["0", "1"]),
            ("c2", vec!["0", "1"]),
        ])
        .unwrap()
    }

    fn random_query(rng: &mut ChaCha8Rng, schema: &Schema) -> Query {
        let mut cs = Vec::new();
        for c in 0..schema.len() {
            let d = schema.column(c).domain_size() as u32;
            if rng.gen_bool(0.5) {
                let set = LabelSet::new((0..d).filter(|_| rng.gen_bool(0.5)));
                if let Some(s) = set {
                    cs.push((c, s));
                }
            }
        }
        Query::new(schema, cs).unwrap()
    }

    #[test]
    fn parses_the_age_location_example() {
        let s = demo_schema();
        let q = Query::parse("age IN {60s} AND state IN {CA}", &s).unwrap();
        assert_eq!(q.constraints().len(), 2);
        let a = q.active_set();
        assert_eq!(a.columns(), &[0, 1]);
        assert_eq!(q.embedding(&s).bits(), &[1, 1, 0, 0]);
    }

    #[test]
    fn empty_and_star_are_unconstrained() {
        let s = demo_schema();
        assert!(Query::parse("", &s).unwrap().is_unconstrained());
        assert!(Query::parse("  * ", &s).unwrap().is_unconstrained());
        assert!(Query::parse("", &s).unwrap().active_set().is_empty());
    }

    #[test]
    fn contradiction_is_rejected() {
        let s = demo_schema();
        let err = Query::parse("c1 IN {1} AND c1 IN {0}", &s).unwrap_err();
        match err {
            Error::Query { token, .. } => assert_eq!(token, "c1"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn unknown_names_are_reported() {
        let s = demo_schema();
        match Query::parse("nope IN {1}", &s).unwrap_err() {
            Error::Query { token, .. } => assert_eq!(token, "nope"),
            e => panic!("{e:?}"),
        }
        match Query::parse("c1 IN {7}", &s).unwrap_err() {
            Error::Query { token, .. } => assert_eq!(token, "7"),
            e => panic!("{e:?}"),
        }
        assert!(Query::parse("c1 IN {}", &s).is_err());
        assert!(Query::parse("c1 {1}", &s).is_err());
        assert!(Query::parse("c1 IN {1} OR c2 IN {1}", &s).is_err());
        assert!(Query::parse("c1 IN {1", &s).is_err());
    }

    #[test]
    fn repeated_column_intersects() {
        let s = demo_schema();
        let q = Query::parse("age in {50s,60s} and age IN {60s, 70s}", &s).unwrap();
        assert_eq!(q.render(&s), "age IN {60s}");
    }

    #[test]
    fn full_domain_constraint_is_not_active() {
        let s = demo_schema();
        let q = Query::parse("c1 IN {0,1}", &s).unwrap();
        assert!(q.active_set().is_empty());
        assert_eq!(q, Query::unconstrained());
        assert_eq!(q.embedding(&s).bits(), &[0, 0, 0, 0]);
    }

    #[test]
    fn embedding_marks_active_columns() {
        let s = demo_schema();
        let q = Query::parse("age IN {50s} AND c1 IN {1}", &s).unwrap();
        assert_eq!(q.embedding(&s).bits(), &[1, 0, 1, 0]);
    }

    #[test]
    fn render_parse_round_trip() {
        let s = Schema::new([
            ("odd name", vec!["a,b", " x", "}", "plain", "*"]),
            ("k", vec!["0", "1"]),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q = random_query(&mut rng, &s);
            let text = q.render(&s);
            assert_eq!(Query::parse(&text, &s).unwrap(), q, "{text}");
            assert_eq!(Query::from_json(&q.to_json(&s), &s).unwrap(), q);
        }
    }

    #[test]
    fn subset_basics() {
        let s = demo_schema();
        let q1 = Query::parse("c1 IN {1}", &s).unwrap();
        let q2 = Query::parse("c1 IN {0,1}", &s).unwrap();
        assert!(q1.is_subset(&q2));
        assert!(!q2.is_subset(&q1));
        assert!(q1.is_subset(&q1));
    }

    #[test]
    fn counts_match_a_row_scan() {
        let s = Schema::binary(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<u32>> = (0..50)
            .map(|_| (0..3).map(|_| rng.gen_range(0..2)).collect())
            .collect();
        let db = Database::from_rows(s.clone(), rows.clone()).unwrap();
        let q = Query::parse("c1 IN {1}", &s).unwrap();
        let oracle = rows.iter().filter(|r| r[0] == 1).count() as u64;
        assert_eq!(exact_count(&db, &q), oracle);
        assert_eq!(exact_count(&db, &Query::unconstrained()), 50);
        let empty = Database::empty(s.clone());
        assert_eq!(exact_count(&empty, &q), 0);
    }

    #[test]
    fn counts_cross_word_boundaries() {
        let s = demo_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<Vec<u32>> = (0..517)
            .map(|_| {
                vec![
                    rng.gen_range(0..3),
                    rng.gen_range(0..3),
                    rng.gen_range(0..2),
                    rng.gen_range(0..2),
                ]
            })
            .collect();
        let db = Database::from_rows(s.clone(), rows.clone()).unwrap();
        for _ in 0..100 {
            let q = random_query(&mut rng, &s);
            let oracle = rows.iter().filter(|r| q.matches_row(r)).count() as u64;
            assert_eq!(exact_count(&db, &q), oracle);
        }
    }

    #[test]
    fn subset_agrees_with_row_set_inclusion() {
        // 200 rows that include every cell of the product domain at least
        // once, so row-set inclusion coincides with cell inclusion.
        let s = Schema::new([
            ("a", vec!["0", "1", "2"]),
            ("b", vec!["0", "1"]),
            ("c", vec!["0", "1"]),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rows: Vec<Vec<u32>> = Vec::new();
        for a in 0..3 {
            for b in 0..2 {
                for c in 0..2 {
                    rows.push(vec![a, b, c]);
                }
            }
        }
        while rows.len() < 200 {
            rows.push(vec![
                rng.gen_range(0..3),
                rng.gen_range(0..2),
                rng.gen_range(0..2),
            ]);
        }
        for _ in 0..1000 {
            let q1 = random_query(&mut rng, &s);
            let q2 = random_query(&mut rng, &s);
            let set1: Vec<usize> = (0..rows.len())
                .filter(|&i| q1.matches_row(&rows[i]))
                .collect();
            let inside = set1.iter().all(|&i| q2.matches_row(&rows[i]));
            assert_eq!(q1.is_subset(&q2), inside, "{q1:?} {q2:?}");
        }
    }
}
