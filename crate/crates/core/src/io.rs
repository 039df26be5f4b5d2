//! Long-format CSV ingest and emission.
//!
//! Columns: `cohort,participant,sex,age,race_black,edu_hs,edu_hsplus,birth_year`
//! followed by one column per risk factor. Missing values are the literal `NA`,
//! indicators are `0`/`1`, lines end in LF.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{LongitudinalDataset, RawRow};
use crate::error::{Error, Result};
use crate::ppc::csv_writer;
use crate::simulate::HeldOut;
use crate::spec::ModelSpec;

const FIXED_COLUMNS: [&str; 8] = ["cohort", "participant", "sex", "age", "race_black", "edu_hs", "edu_hsplus", "birth_year"];

pub fn header(spec: &ModelSpec) -> Vec<String> {
    FIXED_COLUMNS.iter().map(|s| s.to_string()).chain(spec.risk_factors.iter().cloned()).collect()
}

/// Parsed dataset plus what was dropped or missing on the way in.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub data: LongitudinalDataset,
    /// Exams with no observed factor.
    pub dropped: usize,
    /// Percent missing per `[cohort][factor]`.
    pub missingness: Vec<Vec<f64>>,
}

fn parse_flag(s: &str, line: usize, col: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Data { line, msg: format!("{col} must be 0 or 1, found '{other}'") }),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, col: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Data { line, msg: format!("cannot parse {col} value '{s}'") })
}

pub fn read_rows<R: Read>(input: R, spec: &ModelSpec) -> Result<Vec<RawRow>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let expected = header(spec);
    let got: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if got != expected {
        return Err(Error::Data { line: 1, msg: format!("header must be '{}'", expected.join(",")) });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != expected.len() {
            return Err(Error::Data { line, msg: format!("expected {} fields, found {}", expected.len(), rec.len()) });
        }
        let edu_hs = parse_flag(&rec[5], line, "edu_hs")?;
        let edu_hsplus = parse_flag(&rec[6], line, "edu_hsplus")?;
        if edu_hs && edu_hsplus {
            return Err(Error::Data { line, msg: "edu_hs and edu_hsplus are mutually exclusive".into() });
        }
        let values = (8..rec.len())
            .map(|j| match &rec[j] {
                "NA" => Ok(None),
                v => parse_num::<f64>(v, line, &expected[j]).map(Some),
            })
            .collect::<Result<_>>()?;
        rows.push(RawRow {
            line,
            cohort: parse_num(&rec[0], line, "cohort")?,
            participant: parse_num(&rec[1], line, "participant")?,
            sex: rec[2].to_string(),
            age: parse_num(&rec[3], line, "age")?,
            race_black: parse_flag(&rec[4], line, "race_black")?,
            edu_hs,
            edu_hsplus,
            birth_year: parse_num(&rec[7], line, "birth_year")?,
            values,
        });
    }
    Ok(rows)
}

pub fn ingest_reader<R: Read>(input: R, spec: &ModelSpec) -> Result<Ingested> {
    let rows = read_rows(input, spec)?;
    let (data, dropped) = LongitudinalDataset::from_rows(rows, spec.n_factors(), spec)?;
    if dropped > 0 {
        log::info!("dropped {dropped} exams with no observed risk factor");
    }
    let data = match &spec.sex_stratum {
        Some(s) => data.filter_sex(s)?,
        None => data,
    };
    let missingness = data.missingness();
    Ok(Ingested { data, dropped, missingness })
}

pub fn ingest(path: &Path, spec: &ModelSpec) -> Result<Ingested> {
    ingest_reader(BufReader::new(File::open(path)?), spec)
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

pub fn write_dataset<W: Write>(data: &LongitudinalDataset, spec: &ModelSpec, out: W) -> Result<()> {
    if data.n_factors != spec.n_factors() {
        return Err(Error::Usage("dataset and model disagree on the number of risk factors".into()));
    }
    let mut w = csv_writer(out);
    w.write_record(header(spec))?;
    for r in &data.records {
        let p = &data.participants[r.participant];
        let mut rec = vec![
            data.cohort_ids[p.cohort].to_string(),
            p.id.to_string(),
            p.sex.clone(),
            format!("{}", r.age),
            flag(p.race_black),
            flag(p.edu_hs),
            flag(p.edu_hsplus),
            p.birth_year.to_string(),
        ];
        rec.extend(r.values.iter().map(|v| v.map_or("NA".to_string(), |x| format!("{x}"))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(path: &Path, data: &LongitudinalDataset, spec: &ModelSpec) -> Result<()> {
    write_dataset(data, spec, BufWriter::new(File::create(path)?))
}

/// Percent missing, one row per cohort and one column per factor.
pub fn write_missingness<W: Write>(data: &LongitudinalDataset, spec: &ModelSpec, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    let mut head = vec!["cohort".to_string()];
    head.extend(spec.risk_factors.iter().cloned());
    w.write_record(&head)?;
    for (k, row) in data.missingness().iter().enumerate() {
        let mut rec = vec![data.cohort_ids[k].to_string()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_held_out<W: Write>(held: &[HeldOut], spec: &ModelSpec, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["cohort", "participant", "age", "factor", "value"])?;
    for h in held {
        w.write_record([
            h.cohort.to_string(),
            h.participant.to_string(),
            format!("{}", h.age),
            spec.risk_factors[h.factor].clone(),
            format!("{}", h.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
