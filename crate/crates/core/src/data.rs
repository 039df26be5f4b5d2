//! Long-format longitudinal records grouped by participant and cohort.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::{Covariate, ModelSpec};

/// Birth-year stratum 0..=3 for C1 (< 1915), C2 (1915–1928), C3 (1929–1945), C4 (≥ 1946).
pub fn birth_year_stratum(year: i32) -> usize {
    match year {
        i32::MIN..=1914 => 0,
        1915..=1928 => 1,
        1929..=1945 => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub id: i64,
    /// Internal cohort index into `LongitudinalDataset::cohort_ids`.
    pub cohort: usize,
    pub sex: String,
    pub race_black: bool,
    pub edu_hs: bool,
    pub edu_hsplus: bool,
    pub birth_year: i32,
}

impl Participant {
    /// Design row `X_i` in the column order of `spec`, intercept first.
    pub fn design_row(&self, spec: &ModelSpec) -> Vec<f64> {
        let stratum = birth_year_stratum(self.birth_year);
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        std::iter::once(1.0)
            .chain(spec.covariates.iter().map(|c| match c {
                Covariate::RaceBlack => b(self.race_black),
                Covariate::EduHs => b(self.edu_hs),
                Covariate::EduHsplus => b(self.edu_hsplus),
                Covariate::ByC2 => b(stratum == 1),
                Covariate::ByC3 => b(stratum == 2),
                Covariate::ByC4 => b(stratum == 3),
            }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Internal participant index.
    pub participant: usize,
    pub age: f64,
    pub values: Vec<Option<f64>>,
}

impl Record {
    pub fn any_observed(&self) -> bool {
        self.values.iter().any(Option::is_some)
    }
}

/// One parsed input row before grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub line: usize,
    pub cohort: i64,
    pub participant: i64,
    pub sex: String,
    pub age: f64,
    pub race_black: bool,
    pub edu_hs: bool,
    pub edu_hsplus: bool,
    pub birth_year: i32,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub n_factors: usize,
    /// External cohort ids, sorted; the position is the internal index.
    pub cohort_ids: Vec<i64>,
    pub participants: Vec<Participant>,
    /// Sorted by participant then age.
    pub records: Vec<Record>,
    /// `records[ranges[i].0..ranges[i].1]` belong to participant `i`.
    pub ranges: Vec<(usize, usize)>,
}

impl LongitudinalDataset {
    /// Groups rows into a dataset, checking covariate constancy, age range
    /// and duplicate exams. Fully-missing rows are dropped; their count is returned.
    pub fn from_rows(rows: Vec<RawRow>, n_factors: usize, spec: &ModelSpec) -> Result<(Self, usize)> {
        let mut cohort_ids: Vec<i64> = rows.iter().map(|r| r.cohort).collect();
        cohort_ids.sort_unstable();
        cohort_ids.dedup();
        let cohort_index: HashMap<i64, usize> = cohort_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();

        let mut by_key: BTreeMap<(usize, i64), (Participant, Vec<(usize, Record)>)> = BTreeMap::new();
        let mut dropped = 0;
        for row in rows {
            if row.values.len() != n_factors {
                return Err(Error::Data {
                    line: row.line,
                    msg: format!("expected {n_factors} risk-factor values, found {}", row.values.len()),
                });
            }
            if !(row.age >= spec.age_min && row.age <= spec.age_max) {
                return Err(Error::Data {
                    line: row.line,
                    msg: format!("age {} outside [{}, {}]", row.age, spec.age_min, spec.age_max),
                });
            }
            if row.values.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Data { line: row.line, msg: "non-finite measurement".into() });
            }
            let cohort = cohort_index[&row.cohort];
            let p = Participant {
                id: row.participant,
                cohort,
                sex: row.sex.clone(),
                race_black: row.race_black,
                edu_hs: row.edu_hs,
                edu_hsplus: row.edu_hsplus,
                birth_year: row.birth_year,
            };
            let entry = by_key
                .entry((cohort, row.participant))
                .or_insert_with(|| (p.clone(), Vec::new()));
            if entry.0 != p {
                return Err(Error::Data {
                    line: row.line,
                    msg: format!("covariates of participant {} change between exams", row.participant),
                });
            }
            if let Some((prev, _)) = entry.1.iter().find(|(_, r)| r.age == row.age) {
                return Err(Error::Data {
                    line: row.line,
                    msg: format!(
                        "duplicate exam for participant {} at age {} (first seen on line {prev})",
                        row.participant, row.age
                    ),
                });
            }
            let rec = Record { participant: 0, age: row.age, values: row.values };
            if !rec.any_observed() {
                dropped += 1;
                continue;
            }
            entry.1.push((row.line, rec));
        }

        let mut participants = Vec::new();
        let mut records = Vec::new();
        let mut ranges = Vec::new();
        for (_, (p, mut recs)) in by_key {
            if recs.is_empty() {
                continue;
            }
            recs.sort_by(|a, b| a.1.age.total_cmp(&b.1.age));
            let idx = participants.len();
            let start = records.len();
            records.extend(recs.into_iter().map(|(_, mut r)| {
                r.participant = idx;
                r
            }));
            ranges.push((start, records.len()));
            participants.push(p);
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset("no exam has an observed risk factor".into()));
        }
        Ok((
            LongitudinalDataset { n_factors, cohort_ids, participants, records, ranges },
            dropped,
        ))
    }

    /// Dataset with no records, used for prior-only runs.
    pub fn empty(n_factors: usize, cohort_ids: Vec<i64>) -> Self {
        LongitudinalDataset {
            n_factors,
            cohort_ids,
            participants: Vec::new(),
            records: Vec::new(),
            ranges: Vec::new(),
        }
    }

    pub fn n_cohorts(&self) -> usize {
        self.cohort_ids.len()
    }

    pub fn n_participants(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records_of(&self, i: usize) -> &[Record] {
        let (s, e) = self.ranges[i];
        &self.records[s..e]
    }

    pub fn cohort_of_record(&self, r: &Record) -> usize {
        self.participants[r.participant].cohort
    }

    pub fn n_observed(&self) -> usize {
        self.records.iter().map(|r| r.values.iter().flatten().count()).sum()
    }

    pub fn n_missing(&self) -> usize {
        self.records.len() * self.n_factors - self.n_observed()
    }

    /// Keep only participants in the given sex stratum.
    pub fn filter_sex(&self, sex: &str) -> Result<Self> {
        let keep: Vec<usize> = (0..self.n_participants()).filter(|&i| self.participants[i].sex == sex).collect();
        if keep.is_empty() {
            return Err(Error::EmptyDataset(format!("no participants with sex '{sex}'")));
        }
        Ok(self.subset(&keep))
    }

    /// Dataset made of the listed participants, in the given order (repeats allowed).
    pub fn subset(&self, which: &[usize]) -> Self {
        let mut participants = Vec::with_capacity(which.len());
        let mut records = Vec::new();
        let mut ranges = Vec::with_capacity(which.len());
        for &i in which {
            let idx = participants.len();
            participants.push(self.participants[i].clone());
            let start = records.len();
            records.extend(self.records_of(i).iter().map(|r| Record { participant: idx, ..r.clone() }));
            ranges.push((start, records.len()));
        }
        LongitudinalDataset {
            n_factors: self.n_factors,
            cohort_ids: self.cohort_ids.clone(),
            participants,
            records,
            ranges,
        }
    }

    /// Percentage of missing values per (cohort, factor).
    pub fn missingness(&self) -> Vec<Vec<f64>> {
        let k = self.n_cohorts();
        let mut miss = vec![vec![0usize; self.n_factors]; k];
        let mut tot = vec![0usize; k];
        for r in &self.records {
            let c = self.cohort_of_record(r);
            tot[c] += 1;
            for (l, v) in r.values.iter().enumerate() {
                if v.is_none() {
                    miss[c][l] += 1;
                }
            }
        }
        miss.iter()
            .zip(&tot)
            .map(|(m, &t)| {
                m.iter()
                    .map(|&x| if t == 0 { 0.0 } else { 100.0 * x as f64 / t as f64 })
                    .collect()
            })
            .collect()
    }
}
