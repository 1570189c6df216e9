use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use super::{Covariate, CovariateKind, LongitudinalTrial, PatientRecord, Visit};
use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 5] = ["patient_id", "time", "arm", "event_time", "event_observed"];

/// Column typing overrides for CSV ingestion.
///
/// Columns are inferred as continuous when every non-empty cell parses as a
/// number, and categorical otherwise. Columns listed here are always read as
/// categorical (useful for numeric codes).
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub categorical: Vec<String>,
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LongitudinalTrial> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    read_csv(file, schema)
}

struct RawRow {
    line: u64,
    id: String,
    time: f64,
    arm: u8,
    event_time: f64,
    event_observed: bool,
    cells: Vec<String>,
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn parse_f64(cell: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 =
        cell.trim().parse().map_err(|_| parse_err(line, format!("column `{column}`: `{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("column `{column}`: non-finite value")));
    }
    Ok(v)
}

fn parse_flag(cell: &str, line: u64, column: &str) -> Result<u8> {
    match cell.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(parse_err(line, format!("column `{column}`: expected 0 or 1, found `{other}`"))),
    }
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<LongitudinalTrial> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < FIXED_COLUMNS.len() || headers.iter().zip(FIXED_COLUMNS).any(|(h, want)| h.trim() != want) {
        return Err(parse_err(1, format!("header must begin with `{}`", FIXED_COLUMNS.join(","))));
    }
    let names: Vec<String> = headers.iter().skip(FIXED_COLUMNS.len()).map(|h| h.trim().to_string()).collect();
    let p = names.len();

    let mut raw = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|pos| pos.line()).unwrap_or(0);
        if record.len() != p + FIXED_COLUMNS.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", p + FIXED_COLUMNS.len(), record.len()),
            ));
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty patient_id"));
        }
        raw.push(RawRow {
            line,
            id,
            time: parse_f64(&record[1], line, "time")?,
            arm: parse_flag(&record[2], line, "arm")?,
            event_time: parse_f64(&record[3], line, "event_time")?,
            event_observed: parse_flag(&record[4], line, "event_observed")? == 1,
            cells: record.iter().skip(FIXED_COLUMNS.len()).map(|c| c.trim().to_string()).collect(),
        });
    }

    let covariates: Vec<Covariate> = (0..p)
        .map(|j| {
            let forced = schema.categorical.iter().any(|c| c == &names[j]);
            let numeric = raw.iter().all(|r| r.cells[j].is_empty() || r.cells[j].parse::<f64>().is_ok());
            if forced || !numeric {
                let levels: BTreeSet<&str> =
                    raw.iter().map(|r| r.cells[j].as_str()).filter(|c| !c.is_empty()).collect();
                Covariate {
                    name: names[j].clone(),
                    kind: CovariateKind::Categorical { levels: levels.into_iter().map(String::from).collect() },
                }
            } else {
                Covariate::continuous(names[j].clone())
            }
        })
        .collect();

    let level_maps: Vec<Option<HashMap<&str, usize>>> = covariates
        .iter()
        .map(|c| match &c.kind {
            CovariateKind::Categorical { levels } => {
                Some(levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect())
            }
            CovariateKind::Continuous => None,
        })
        .collect();

    let mut patients: Vec<PatientRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for row in &raw {
        let mut values = Vec::with_capacity(p);
        for (j, cell) in row.cells.iter().enumerate() {
            if cell.is_empty() {
                values.push(None);
                continue;
            }
            let v = match &level_maps[j] {
                Some(map) => map[cell.as_str()] as f64,
                None => parse_f64(cell, row.line, &names[j])?,
            };
            values.push(Some(v));
        }
        let visit = Visit { time: row.time, values };
        match index.get(&row.id) {
            Some(&k) => {
                let pat = &mut patients[k];
                if pat.arm != row.arm {
                    return Err(parse_err(row.line, format!("patient `{}` changes arm", row.id)));
                }
                if pat.event_time != row.event_time || pat.event_observed != row.event_observed {
                    return Err(parse_err(row.line, format!("patient `{}` changes outcome", row.id)));
                }
                let last = pat.visits.last().map(|v| v.time).unwrap_or(f64::NEG_INFINITY);
                if !(row.time > last) {
                    return Err(parse_err(
                        row.line,
                        format!("patient `{}` has non-ascending visit time {}", row.id, row.time),
                    ));
                }
                pat.visits.push(visit);
            }
            None => {
                index.insert(row.id.clone(), patients.len());
                patients.push(PatientRecord {
                    id: row.id.clone(),
                    arm: row.arm,
                    event_time: row.event_time,
                    event_observed: row.event_observed,
                    visits: vec![visit],
                });
            }
        }
        if !(row.time < row.event_time) {
            return Err(parse_err(
                row.line,
                format!("patient `{}` has visit time {} not before event time {}", row.id, row.time, row.event_time),
            ));
        }
        if row.time < 0.0 {
            return Err(parse_err(row.line, format!("patient `{}` has negative visit time", row.id)));
        }
    }

    let trial = LongitudinalTrial { covariates, patients };
    trial.validate()?;
    Ok(trial)
}

pub fn write_csv(trial: &LongitudinalTrial, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(trial, std::io::BufWriter::new(file))
}

pub fn write_csv_to<W: Write>(trial: &LongitudinalTrial, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(trial.covariate_names());
    w.write_record(&header)?;
    for pat in &trial.patients {
        for v in &pat.visits {
            let mut rec = vec![
                pat.id.clone(),
                v.time.to_string(),
                pat.arm.to_string(),
                pat.event_time.to_string(),
                u8::from(pat.event_observed).to_string(),
            ];
            for (cov, val) in trial.covariates.iter().zip(&v.values) {
                rec.push(match (val, &cov.kind) {
                    (None, _) => String::new(),
                    (Some(x), CovariateKind::Continuous) => x.to_string(),
                    (Some(x), CovariateKind::Categorical { levels }) => levels[*x as usize].clone(),
                });
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
