//! Longitudinal datasets: one record per individual with measurement times,
//! outcome and TVC series, a second-type TIC and two first-type TICs.
//!
//! Wide CSV schema (one row per individual):
//!
//! ```text
//! id,t_1..t_J,y_1..y_J,x_1..x_J,xe,xg1,xg2[,label]
//! ```
//!
//! Empty `y`/`x` cells are missing values. Times, `xe` and `xg*` must be present.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::validate_times;

/// Number of first-type (gating) covariates carried by every record.
pub const N_GATING_TICS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<Option<f64>>,
    pub x: Vec<Option<f64>>,
    pub xe: f64,
    pub xg: [f64; N_GATING_TICS],
    /// Generating class (0-based), when known.
    pub label: Option<usize>,
}

impl Individual {
    pub fn n_occasions(&self) -> usize {
        self.times.len()
    }

    fn validate(&self, row: usize) -> Result<()> {
        let j = self.times.len();
        if self.y.len() != j || self.x.len() != j {
            return Err(Error::Data {
                row,
                msg: format!("series lengths differ from {j} occasions"),
            });
        }
        validate_times(&self.times).map_err(|e| Error::Data { row, msg: e.to_string() })?;
        let finite = |v: &Option<f64>| v.map_or(true, f64::is_finite);
        if !self.y.iter().all(finite) || !self.x.iter().all(finite) {
            return Err(Error::Data { row, msg: "non-finite series value".into() });
        }
        if !self.xe.is_finite() || !self.xg.iter().all(|v| v.is_finite()) {
            return Err(Error::Data { row, msg: "non-finite covariate".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    pub individuals: Vec<Individual>,
}

impl LongitudinalDataset {
    pub fn new(individuals: Vec<Individual>) -> Result<Self> {
        let ds = Self { individuals };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    /// Common number of occasions `J` (0 for an empty dataset).
    pub fn n_occasions(&self) -> usize {
        self.individuals.first().map_or(0, Individual::n_occasions)
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.individuals.iter().map(|i| i.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.n_occasions();
        for (r, ind) in self.individuals.iter().enumerate() {
            if ind.n_occasions() != j {
                return Err(Error::Data {
                    row: r + 1,
                    msg: format!("expected {j} occasions, got {}", ind.n_occasions()),
                });
            }
            ind.validate(r + 1)?;
        }
        Ok(())
    }

    pub fn has_labels(&self) -> bool {
        !self.individuals.is_empty() && self.individuals.iter().all(|i| i.label.is_some())
    }
}

fn header_for(j: usize, with_label: bool) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    for prefix in ["t", "y", "x"] {
        h.extend((1..=j).map(|k| format!("{prefix}_{k}")));
    }
    h.extend(["xe", "xg1", "xg2"].map(String::from));
    if with_label {
        h.push("label".into());
    }
    h
}

fn parse_required(cell: &str, row: usize, col: &str) -> Result<f64> {
    let s = cell.trim();
    if s.is_empty() {
        return Err(Error::Data { row, msg: format!("missing value in `{col}`") });
    }
    s.parse::<f64>()
        .map_err(|_| Error::Data { row, msg: format!("non-numeric `{col}` value `{s}`") })
}

fn parse_optional(cell: &str, row: usize, col: &str) -> Result<Option<f64>> {
    if cell.trim().is_empty() {
        Ok(None)
    } else {
        parse_required(cell, row, col).map(Some)
    }
}

/// Parses a wide-format CSV dataset from any reader.
pub fn read_dataset_from<R: Read>(reader: R) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let n = header.len();
    let with_label = header.last().map(String::as_str) == Some("label");
    let fixed = 4 + usize::from(with_label);
    if n < fixed + 6 || (n - fixed) % 3 != 0 {
        return Err(Error::Data { row: 0, msg: format!("malformed header with {n} columns") });
    }
    let j = (n - fixed) / 3;
    let expect = header_for(j, with_label);
    if header != expect {
        return Err(Error::Data {
            row: 0,
            msg: format!("malformed header; expected `{}`", expect.join(",")),
        });
    }

    let mut individuals = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Data { row, msg: e.to_string() })?;
        let cell = |k: usize| rec.get(k).unwrap_or("");
        let id = cell(0).trim().to_string();
        let mut times = Vec::with_capacity(j);
        let mut y = Vec::with_capacity(j);
        let mut x = Vec::with_capacity(j);
        for k in 0..j {
            times.push(parse_required(cell(1 + k), row, &expect[1 + k])?);
        }
        for k in 0..j {
            y.push(parse_optional(cell(1 + j + k), row, &expect[1 + j + k])?);
        }
        for k in 0..j {
            x.push(parse_optional(cell(1 + 2 * j + k), row, &expect[1 + 2 * j + k])?);
        }
        let base = 1 + 3 * j;
        let xe = parse_required(cell(base), row, "xe")?;
        let xg = [parse_required(cell(base + 1), row, "xg1")?, parse_required(cell(base + 2), row, "xg2")?];
        let label = if with_label {
            let s = cell(base + 3).trim();
            if s.is_empty() {
                None
            } else {
                let v: usize = s.parse().map_err(|_| Error::Data {
                    row,
                    msg: format!("label `{s}` is not a non-negative integer"),
                })?;
                if v == 0 {
                    return Err(Error::Data { row, msg: "labels are 1-based".into() });
                }
                Some(v - 1)
            }
        } else {
            None
        };
        let ind = Individual { id, times, y, x, xe, xg, label };
        ind.validate(row)?;
        individuals.push(ind);
    }
    Ok(LongitudinalDataset { individuals })
}

pub fn read_dataset(path: &Path) -> Result<LongitudinalDataset> {
    read_dataset_from(std::fs::File::open(path)?)
}

fn fmt_num(v: f64) -> String {
    // Shortest representation that parses back to the identical f64.
    format!("{v}")
}

/// Writes the wide CSV form. Labels are written 1-based when every record has one.
pub fn write_dataset_to<W: Write>(ds: &LongitudinalDataset, writer: W) -> Result<()> {
    let j = ds.n_occasions();
    let with_label = ds.has_labels();
    let mut w = csv::WriterBuilder::new().from_writer(writer);
    w.write_record(header_for(j, with_label))?;
    for ind in &ds.individuals {
        let mut rec = vec![ind.id.clone()];
        rec.extend(ind.times.iter().map(|&v| fmt_num(v)));
        rec.extend(ind.y.iter().map(|v| v.map(fmt_num).unwrap_or_default()));
        rec.extend(ind.x.iter().map(|v| v.map(fmt_num).unwrap_or_default()));
        rec.push(fmt_num(ind.xe));
        rec.extend(ind.xg.iter().map(|&v| fmt_num(v)));
        if with_label {
            rec.push((ind.label.unwrap() + 1).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(ds: &LongitudinalDataset, path: &Path) -> Result<()> {
    write_dataset_to(ds, std::fs::File::create(path)?)
}

/// Parses the long format `id,wave,t,y,x,xe,xg1,xg2[,label]` (one row per
/// occasion) and pivots it to the wide representation. Rows of one individual
/// must be contiguous; waves are ordered by the `wave` column.
pub fn read_long_dataset_from<R: Read>(reader: R) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let base = ["id", "wave", "t", "y", "x", "xe", "xg1", "xg2"];
    let with_label = header.len() == 9 && header[8] == "label";
    if header.len() < 8 || header[..8] != base || (header.len() == 9 && !with_label) || header.len() > 9 {
        return Err(Error::Data {
            row: 0,
            msg: "malformed long header; expected `id,wave,t,y,x,xe,xg1,xg2[,label]`".into(),
        });
    }
    struct Pending {
        id: String,
        rows: Vec<(i64, f64, Option<f64>, Option<f64>)>,
        xe: f64,
        xg: [f64; 2],
        label: Option<usize>,
        first_row: usize,
    }
    let mut out = Vec::new();
    let mut cur: Option<Pending> = None;
    let finish = |p: Pending, out: &mut Vec<Individual>| -> Result<()> {
        let mut rows = p.rows;
        rows.sort_by_key(|r| r.0);
        if rows.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Data { row: p.first_row, msg: format!("duplicate wave for `{}`", p.id) });
        }
        let ind = Individual {
            id: p.id,
            times: rows.iter().map(|r| r.1).collect(),
            y: rows.iter().map(|r| r.2).collect(),
            x: rows.iter().map(|r| r.3).collect(),
            xe: p.xe,
            xg: p.xg,
            label: p.label,
        };
        ind.validate(p.first_row)?;
        out.push(ind);
        Ok(())
    };
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Data { row, msg: e.to_string() })?;
        let cell = |k: usize| rec.get(k).unwrap_or("");
        let id = cell(0).trim().to_string();
        let wave: i64 = cell(1)
            .trim()
            .parse()
            .map_err(|_| Error::Data { row, msg: "wave must be an integer".into() })?;
        let t = parse_required(cell(2), row, "t")?;
        let y = parse_optional(cell(3), row, "y")?;
        let x = parse_optional(cell(4), row, "x")?;
        let xe = parse_required(cell(5), row, "xe")?;
        let xg = [parse_required(cell(6), row, "xg1")?, parse_required(cell(7), row, "xg2")?];
        let label = if with_label && !cell(8).trim().is_empty() {
            let v: usize = cell(8)
                .trim()
                .parse()
                .map_err(|_| Error::Data { row, msg: "label must be a positive integer".into() })?;
            if v == 0 {
                return Err(Error::Data { row, msg: "labels are 1-based".into() });
            }
            Some(v - 1)
        } else {
            None
        };
        match cur.as_mut() {
            Some(p) if p.id == id => {
                if p.xe != xe || p.xg != xg || p.label != label {
                    return Err(Error::Data { row, msg: format!("time-invariant values change within `{id}`") });
                }
                p.rows.push((wave, t, y, x));
            }
            _ => {
                if let Some(p) = cur.take() {
                    finish(p, &mut out)?;
                }
                cur = Some(Pending { id, rows: vec![(wave, t, y, x)], xe, xg, label, first_row: row });
            }
        }
    }
    if let Some(p) = cur.take() {
        finish(p, &mut out)?;
    }
    LongitudinalDataset::new(out)
}

/// Baseline centring and scaling applied to the TVC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvcScaling {
    pub mean: f64,
    pub sd: f64,
}

impl TvcScaling {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}

/// Standardises every TVC wave by the baseline-wave mean and standard deviation.
pub fn standardize_tvc(ds: &LongitudinalDataset) -> Result<(LongitudinalDataset, TvcScaling)> {
    let base: Vec<f64> = ds.individuals.iter().filter_map(|i| i.x.first().copied().flatten()).collect();
    if base.len() < 2 {
        return Err(Error::Data { row: 0, msg: "need at least two observed baseline TVC values".into() });
    }
    let n = base.len() as f64;
    let mean = base.iter().sum::<f64>() / n;
    let sd = (base.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Data { row: 0, msg: "baseline TVC has zero standard deviation".into() });
    }
    let scaling = TvcScaling { mean, sd };
    let mut out = ds.clone();
    for ind in &mut out.individuals {
        for v in ind.x.iter_mut().flatten() {
            *v = scaling.apply(*v);
        }
    }
    Ok((out, scaling))
}
