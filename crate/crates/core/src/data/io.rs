//! CSV persistence for rounds and the intervention catalog.
//!
//! Observational rounds: `y,x_1..x_{p_x},a_1..a_J`, file `obs_round_<m>.csv`.
//! Randomized rounds: `w,y,x_1..x_{p_x},a_1..a_J`, file `rct_round_<m>.csv`.
//! Catalog: `j,v_1..v_{p_attr}`.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a file
//! produced by `save_round` reloads and re-saves byte-for-byte.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{ObservationalRound, RctRecord, RctRound, UnitRecord};
use crate::error::{Error, Result};
use crate::output::atomic_write;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Observational,
    Rct,
}

impl Schema {
    fn prefix(self) -> &'static str {
        match self {
            Schema::Observational => "obs_round_",
            Schema::Rct => "rct_round_",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundFile {
    Observational(ObservationalRound),
    Rct(RctRound),
}

fn parse_err(path: &Path, row: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        msg: msg.into(),
    }
}

fn round_index(path: &Path, schema: Schema) -> Result<usize> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.strip_prefix(schema.prefix())
        .and_then(|rest| rest.strip_suffix(".csv"))
        .and_then(|m| m.parse::<usize>().ok())
        .filter(|&m| m > 0)
        .ok_or_else(|| {
            parse_err(
                path,
                0,
                format!("file name must be {}<m>.csv with m >= 1", schema.prefix()),
            )
        })
}

/// Splits a header into (context dimension, intervention count), checking the
/// exact column naming.
fn parse_header(path: &Path, header: &str, schema: Schema) -> Result<(usize, usize)> {
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let lead: &[&str] = match schema {
        Schema::Observational => &["y"],
        Schema::Rct => &["w", "y"],
    };
    if cols.len() < lead.len() || cols[..lead.len()] != *lead {
        return Err(parse_err(path, 1, format!("header must start with {}", lead.join(","))));
    }
    let rest = &cols[lead.len()..];
    let px = rest.iter().take_while(|c| c.starts_with("x_")).count();
    let j = rest.len() - px;
    if j == 0 {
        return Err(parse_err(path, 1, "header has no a_j columns"));
    }
    for (k, c) in rest[..px].iter().enumerate() {
        if *c != format!("x_{}", k + 1) {
            return Err(parse_err(path, 1, format!("expected column x_{}, found {c}", k + 1)));
        }
    }
    for (k, c) in rest[px..].iter().enumerate() {
        if *c != format!("a_{}", k + 1) {
            return Err(parse_err(path, 1, format!("expected column a_{}, found {c}", k + 1)));
        }
    }
    Ok((px, j))
}

fn parse_f64(path: &Path, row: usize, col: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(path, row, format!("column {col}: cannot parse {s:?} as a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, row, format!("column {col}: non-finite value")));
    }
    Ok(v)
}

fn parse_index(path: &Path, row: usize, col: &str, s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(path, row, format!("column {col}: cannot parse {s:?} as an integer")))
}

/// Loads one round file. For randomized rounds `selected` is the round's
/// selected set (0-based); when `None` it is taken to be the distinct `w`
/// values present in the file.
pub fn load_round(path: &Path, schema: Schema, selected: Option<&BTreeSet<usize>>) -> Result<RoundFile> {
    let text = std::fs::read_to_string(path)?;
    let m = round_index(path, schema)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let (px, j) = parse_header(path, header, schema)?;
    let lead = if schema == Schema::Rct { 2 } else { 1 };
    let width = lead + px + j;

    let mut units = Vec::new();
    let mut ws = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(parse_err(
                path,
                row,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        if schema == Schema::Rct {
            let w = parse_index(path, row, "w", fields[0])?;
            if w == 0 || w > j {
                return Err(Error::Validation(format!(
                    "{}: row {row}: w = {w} outside 1..={j}",
                    path.display()
                )));
            }
            ws.push(w - 1);
        }
        let y = parse_f64(path, row, "y", fields[lead - 1])?;
        let x = (0..px)
            .map(|k| parse_f64(path, row, &format!("x_{}", k + 1), fields[lead + k]))
            .collect::<Result<Vec<_>>>()?;
        let a = (0..j)
            .map(|k| {
                let v = parse_index(path, row, &format!("a_{}", k + 1), fields[lead + px + k])?;
                u8::try_from(v).map_err(|_| {
                    Error::Validation(format!("{}: row {row}: a_{} = {v} is not binary", path.display(), k + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let unit = UnitRecord::new(x, a, y)
            .map_err(|e| Error::Validation(format!("{}: row {row}: {e}", path.display())))?;
        units.push(unit);
    }

    match schema {
        Schema::Observational => Ok(RoundFile::Observational(ObservationalRound::new(m, units)?)),
        Schema::Rct => {
            let selected = match selected {
                Some(s) => s.clone(),
                None => ws.iter().copied().collect(),
            };
            let records = units
                .into_iter()
                .zip(ws)
                .map(|(base, w)| RctRecord { base, w })
                .collect();
            Ok(RoundFile::Rct(RctRound::new(m, selected, records)?))
        }
    }
}

fn header(schema: Schema, px: usize, j: usize) -> String {
    let mut h = String::from(match schema {
        Schema::Observational => "y",
        Schema::Rct => "w,y",
    });
    for k in 1..=px {
        let _ = write!(h, ",x_{k}");
    }
    for k in 1..=j {
        let _ = write!(h, ",a_{k}");
    }
    h.push('\n');
    h
}

fn write_unit(out: &mut String, u: &UnitRecord) {
    let _ = write!(out, "{}", u.y());
    for v in u.x() {
        let _ = write!(out, ",{v}");
    }
    for a in u.a() {
        let _ = write!(out, ",{a}");
    }
    out.push('\n');
}

/// Serializes a round into `dir` under its canonical file name.
pub fn save_round(round: &RoundFile, dir: &Path) -> Result<PathBuf> {
    let (schema, m, body) = match round {
        RoundFile::Observational(r) => {
            let mut s = header(Schema::Observational, r.context_dim(), r.n_interventions());
            for u in r.records() {
                write_unit(&mut s, u);
            }
            (Schema::Observational, r.round(), s)
        }
        RoundFile::Rct(r) => {
            let mut s = header(Schema::Rct, r.context_dim(), r.n_interventions());
            for rec in r.records() {
                let _ = write!(s, "{},", rec.w + 1);
                write_unit(&mut s, &rec.base);
            }
            (Schema::Rct, r.round(), s)
        }
    };
    let path = dir.join(format!("{}{m}.csv", schema.prefix()));
    atomic_write(&path, body.as_bytes())?;
    Ok(path)
}

/// Reads `j,v_1..v_p` rows; `j` must run 1..=J in order.
pub fn load_catalog_attributes(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"j") {
        return Err(parse_err(path, 1, "header must start with j"));
    }
    for (k, c) in cols[1..].iter().enumerate() {
        if *c != format!("v_{}", k + 1) {
            return Err(parse_err(path, 1, format!("expected column v_{}, found {c}", k + 1)));
        }
    }
    let p = cols.len() - 1;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != p + 1 {
            return Err(parse_err(path, row, format!("expected {} fields, found {}", p + 1, fields.len())));
        }
        let j = parse_index(path, row, "j", fields[0])?;
        if j != out.len() + 1 {
            return Err(parse_err(path, row, format!("expected j = {}, found {j}", out.len() + 1)));
        }
        let v = (0..p)
            .map(|k| parse_f64(path, row, &format!("v_{}", k + 1), fields[k + 1]))
            .collect::<Result<Vec<_>>>()?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(parse_err(path, 2, "catalog has no rows"));
    }
    Ok(out)
}

pub fn save_catalog(attributes: &[Vec<f64>], path: &Path) -> Result<()> {
    let p = attributes.first().map_or(0, Vec::len);
    let mut s = String::from("j");
    for k in 1..=p {
        let _ = write!(s, ",v_{k}");
    }
    s.push('\n');
    for (j, v) in attributes.iter().enumerate() {
        let _ = write!(s, "{}", j + 1);
        for x in v {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_small_observational_round() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "obs_round_1.csv",
            "y,x_1,x_2,a_1,a_2\n1.5,0.1,0.2,1,0\n-0.5,1,2,0,0\n2,3.5,-1,1,1\n",
        );
        let RoundFile::Observational(r) = load_round(&p, Schema::Observational, None).unwrap() else {
            panic!("wrong schema")
        };
        assert_eq!(r.round(), 1);
        assert_eq!(r.records().len(), 3);
        assert_eq!(r.context_dim(), 2);
        assert_eq!(r.n_interventions(), 2);
        assert_eq!(r.records()[2].a(), &[1, 1]);
    }

    #[test]
    fn non_binary_status_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "obs_round_1.csv", "y,x_1,a_1,a_2\n1.0,0.0,2,0\n");
        assert!(matches!(
            load_round(&p, Schema::Observational, None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "obs_round_2.csv", "y,x_1,a_1\n1.0,0.0,1\n1.0,abc,0\n");
        match load_round(&p, Schema::Observational, None) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rct_w_outside_selected_set() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "rct_round_1.csv",
            "w,y,x_1,a_1,a_2,a_3\n1,0.5,0.0,1,0,0\n3,0.5,0.0,0,0,1\n",
        );
        let sel = BTreeSet::from([0, 1]);
        assert!(matches!(
            load_round(&p, Schema::Rct, Some(&sel)),
            Err(Error::Validation(_))
        ));
        let RoundFile::Rct(r) = load_round(&p, Schema::Rct, None).unwrap() else {
            panic!()
        };
        assert_eq!(r.selected(), &BTreeSet::from([0, 2]));
    }

    #[test]
    fn header_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "obs_round_1.csv", "y,x_2,a_1\n1,0,1\n");
        assert!(matches!(load_round(&p, Schema::Observational, None), Err(Error::Parse { row: 1, .. })));
        let p = write(dir.path(), "obs_round_3.csv", "w,y,x_1,a_1\n1,1,0,1\n");
        assert!(load_round(&p, Schema::Observational, None).is_err());
    }

    #[test]
    fn file_name_must_carry_round() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "round.csv", "y,x_1,a_1\n1,0,1\n");
        assert!(load_round(&p, Schema::Observational, None).is_err());
    }

    #[test]
    fn catalog_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let attrs = vec![vec![0.25, -1.0], vec![3.0, 1e-7]];
        let p = dir.path().join("catalog.csv");
        save_catalog(&attrs, &p).unwrap();
        assert_eq!(load_catalog_attributes(&p).unwrap(), attrs);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_load_save_is_byte_identical(
            rows in proptest::collection::vec(
                (-1e6f64..1e6, proptest::collection::vec(-10.0f64..10.0, 2), proptest::collection::vec(0u8..2, 3), 0usize..2),
                1..20),
            rct in any::<bool>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let file = if rct {
                let records = rows.iter().map(|(y, x, a, w)| RctRecord {
                    base: UnitRecord::new(x.clone(), a.clone(), *y).unwrap(),
                    w: *w,
                }).collect();
                RoundFile::Rct(RctRound::new(4, BTreeSet::from([0, 1]), records).unwrap())
            } else {
                let records = rows.iter().map(|(y, x, a, _)| UnitRecord::new(x.clone(), a.clone(), *y).unwrap()).collect();
                RoundFile::Observational(ObservationalRound::new(4, records).unwrap())
            };
            let p = save_round(&file, dir.path()).unwrap();
            let first = std::fs::read(&p).unwrap();
            let schema = if rct { Schema::Rct } else { Schema::Observational };
            let sel = BTreeSet::from([0, 1]);
            let loaded = load_round(&p, schema, rct.then_some(&sel)).unwrap();
            prop_assert_eq!(&loaded, &file);
            std::fs::remove_file(&p).unwrap();
            let p2 = save_round(&loaded, dir.path()).unwrap();
            prop_assert_eq!(std::fs::read(&p2).unwrap(), first);
        }
    }
}
