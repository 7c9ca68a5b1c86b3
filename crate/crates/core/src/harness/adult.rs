//! Bucketing of the UCI Adult census file into binary indicator columns.
//!
//! The raw file has no header and 15 comma-separated fields. Nine variables
//! are bucketed into 21 indicator columns; a five-variable subset gives 11.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use csv::{ReaderBuilder, Trim};

use crate::dataset::{Database, Schema};
use crate::error::{Error, Result};

const FIELDS: usize = 15;
const AGE: usize = 0;
const WORKCLASS: usize = 1;
const EDUCATION_NUM: usize = 4;
const MARITAL: usize = 5;
const RACE: usize = 8;
const SEX: usize = 9;
const HOURS: usize = 12;
const COUNTRY: usize = 13;
const INCOME: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdultVariables {
    /// age, sex, race, marital, workclass, education, hours, country,
    /// income: 21 columns.
    Nine,
    /// age, sex, marital, income, workclass: 11 columns.
    Five,
}

impl FromStr for AdultVariables {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "9" | "nine" => Ok(AdultVariables::Nine),
            "5" | "five" => Ok(AdultVariables::Five),
            _ => Err(Error::InvalidArgument(format!(
                "unknown Adult variable set `{s}` (expected nine or five)"
            ))),
        }
    }
}

type Bucket = fn(&[&str]) -> Result<&'static str>;

struct Variable {
    name: &'static str,
    labels: &'static [&'static str],
    bucket: Bucket,
}

fn int(fields: &[&str], i: usize) -> Result<i64> {
    fields[i]
        .parse()
        .map_err(|_| Error::Validation(format!("expected an integer, found `{}`", fields[i])))
}

fn age(f: &[&str]) -> Result<&'static str> {
    Ok(match int(f, AGE)? {
        ..=29 => "<30",
        30..=49 => "30-49",
        _ => "50+",
    })
}

fn sex(f: &[&str]) -> Result<&'static str> {
    Ok(if f[SEX] == "Male" { "male" } else { "female" })
}

fn race(f: &[&str]) -> Result<&'static str> {
    Ok(match f[RACE] {
        "White" => "white",
        "Black" => "black",
        _ => "other",
    })
}

fn marital(f: &[&str]) -> Result<&'static str> {
    Ok(if f[MARITAL].starts_with("Married") {
        "married"
    } else {
        "single"
    })
}

fn workclass(f: &[&str]) -> Result<&'static str> {
    Ok(if f[WORKCLASS] == "Private" {
        "private"
    } else {
        "other"
    })
}

fn education(f: &[&str]) -> Result<&'static str> {
    Ok(match int(f, EDUCATION_NUM)? {
        ..=9 => "hs-or-less",
        10..=12 => "some-college",
        _ => "degree",
    })
}

fn hours(f: &[&str]) -> Result<&'static str> {
    Ok(if int(f, HOURS)? <= 40 { "<=40" } else { ">40" })
}

fn country(f: &[&str]) -> Result<&'static str> {
    Ok(if f[COUNTRY] == "United-States" {
        "us"
    } else {
        "other"
    })
}

fn income(f: &[&str]) -> Result<&'static str> {
    Ok(if f[INCOME].trim_end_matches('.') == ">50K" {
        ">50K"
    } else {
        "<=50K"
    })
}

const VARIABLES: [Variable; 9] = [
    Variable {
        name: "age",
        labels: &["<30", "30-49", "50+"],
        bucket: age,
    },
    Variable {
        name: "sex",
        labels: &["female", "male"],
        bucket: sex,
    },
    Variable {
        name: "race",
        labels: &["white", "black", "other"],
        bucket: race,
    },
    Variable {
        name: "marital",
        labels: &["married", "single"],
        bucket: marital,
    },
    Variable {
        name: "workclass",
        labels: &["private", "other"],
        bucket: workclass,
    },
    Variable {
        name: "education",
        labels: &["hs-or-less", "some-college", "degree"],
        bucket: education,
    },
    Variable {
        name: "hours",
        labels: &["<=40", ">40"],
        bucket: hours,
    },
    Variable {
        name: "country",
        labels: &["us", "other"],
        bucket: country,
    },
    Variable {
        name: "income",
        labels: &["<=50K", ">50K"],
        bucket: income,
    },
];

fn selected(vars: AdultVariables) -> Vec<&'static Variable> {
    let names: &[&str] = match vars {
        AdultVariables::Nine => &[
            "age",
            "sex",
            "race",
            "marital",
            "workclass",
            "education",
            "hours",
            "country",
            "income",
        ],
        AdultVariables::Five => &["age", "sex", "marital", "income", "workclass"],
    };
    names
        .iter()
        .map(|n| {
            VARIABLES
                .iter()
                .find(|v| v.name == *n)
                .expect("known variable")
        })
        .collect()
}

/// Bucketed categorical table, one column per selected variable.
pub fn read_adult<R: Read>(reader: R, vars: AdultVariables) -> Result<Database> {
    let vs = selected(vars);
    let schema = Schema::new(vs.iter().map(|v| (v.name, v.labels.to_vec())))?;
    let mut rdr = ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(i + 1);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        // The test split starts with a `|1x3 Cross validator` banner.
        if rec.len() == 1 && rec[0].starts_with('|') {
            continue;
        }
        if rec.len() != FIELDS {
            return Err(Error::Parse {
                line,
                message: format!("expected {FIELDS} fields, found {}", rec.len()),
            });
        }
        let fields: Vec<&str> = rec.iter().collect();
        let row = vs
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let label = (v.bucket)(&fields).map_err(|e| Error::Parse {
                    line,
                    message: e.to_string(),
                })?;
                Ok(schema
                    .column(c)
                    .label_index(label)
                    .expect("bucket label in domain"))
            })
            .collect::<Result<Vec<u32>>>()?;
        rows.push(row);
    }
    Database::from_rows(schema, rows)
}

pub fn load_adult(path: impl AsRef<Path>, vars: AdultVariables) -> Result<Database> {
    read_adult(BufReader::new(File::open(path)?), vars)
}

/// Bucketed and one-hot encoded table.
pub fn load_adult_binary(path: impl AsRef<Path>, vars: AdultVariables) -> Result<Database> {
    load_adult(path, vars)?.encode_binary()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "\
39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K
50, Self-emp-not-inc, 83311, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 13, United-States, <=50K
38, Private, 215646, HS-grad, 9, Divorced, Handlers-cleaners, Not-in-family, White, Male, 0, 0, 40, United-States, <=50K
53, Private, 234721, 11th, 7, Married-civ-spouse, Handlers-cleaners, Husband, Black, Male, 0, 0, 40, United-States, <=50K
28, Private, 338409, Bachelors, 13, Married-civ-spouse, Prof-specialty, Wife, Black, Female, 0, 0, 40, Cuba, <=50K
37, Private, 284582, Masters, 14, Married-civ-spouse, Exec-managerial, Wife, White, Female, 0, 0, 40, United-States, <=50K
52, Self-emp-not-inc, 209642, HS-grad, 9, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 45, United-States, >50K
31, Private, 45781, Masters, 14, Never-married, Prof-specialty, Not-in-family, Asian-Pac-Islander, Female, 14084, 0, 50, ?, >50K.

";

    #[test]
    fn nine_variables_give_twenty_one_columns() {
        let db = read_adult(FIXTURE.as_bytes(), AdultVariables::Nine).unwrap();
        assert_eq!(db.n(), 8);
        assert_eq!(db.schema().len(), 9);
        let bin = db.encode_binary().unwrap();
        assert_eq!(bin.schema().len(), 21);
        assert_eq!(bin.n(), 8);
        assert_eq!(
            db.row_labels(7),
            vec!["30-49", "female", "other", "single", "private", "degree", ">40", "other", ">50K"]
        );
    }

    #[test]
    fn five_variables_give_eleven_columns() {
        let db = read_adult(FIXTURE.as_bytes(), AdultVariables::Five).unwrap();
        assert_eq!(db.encode_binary().unwrap().schema().len(), 11);
        assert_eq!(
            db.row_labels(0),
            vec!["30-49", "male", "single", "<=50K", "other"]
        );
    }

    #[test]
    fn short_line_reports_its_number() {
        let bad = "39, State-gov, 77516\n";
        match read_adult(bad.as_bytes(), AdultVariables::Nine).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            e => panic!("{e:?}"),
        }
    }
}
