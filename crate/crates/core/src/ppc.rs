//! Posterior predictive replication, standardized residuals and the
//! discrepancy checks built on them.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::LongitudinalDataset;
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::rng::{stream, STREAM_REPLICATE};
use crate::sampler::gibbs::Prepared;
use crate::skewnormal;
use crate::spec::ModelSpec;
use crate::state::{Dims, ParameterState, Variant};

/// Probability grid for quantile exports: 0.005, 0.010, ..., 0.995.
pub fn qq_grid() -> Vec<f64> {
    (1..=199).map(|j| j as f64 * 0.005).collect()
}

/// One observed (record, factor) value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellKey {
    pub record: usize,
    pub factor: usize,
    pub participant: usize,
    pub cohort: usize,
    pub window: usize,
}

fn cell_keys(prep: &Prepared) -> Vec<CellKey> {
    (0..prep.n_cells())
        .map(|c| {
            let cell = prep.cells[c];
            let r = &prep.data.records[cell.rec];
            CellKey {
                record: cell.rec,
                factor: cell.l,
                participant: r.participant,
                cohort: prep.data.participants[r.participant].cohort,
                window: prep.window(c),
            }
        })
        .collect()
}

fn check_variant(draws: &PosteriorDraws, variant: Variant) -> Result<()> {
    if draws.variant != variant {
        return Err(Error::Usage(format!(
            "draws come from the {} model, not the {} model",
            draws.variant.name(),
            variant.name()
        )));
    }
    if variant.has_subject() && !draws.has_subject() {
        return Err(Error::Usage("draws do not carry subject effects; refit with store_subject".into()));
    }
    Ok(())
}

/// Replicated values at every observed cell, one row per selected draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicates {
    pub variant: Variant,
    /// Post-warmup draw indices.
    pub draws: Vec<usize>,
    pub cells: Vec<CellKey>,
    pub values: Vec<Vec<f64>>,
}

impl Replicates {
    /// Replicate `j` as a dataset with the observed missingness pattern.
    pub fn dataset(&self, data: &LongitudinalDataset, j: usize) -> LongitudinalDataset {
        let mut out = data.clone();
        for (key, &v) in self.cells.iter().zip(&self.values[j]) {
            out.records[key.record].values[key.factor] = Some(v);
        }
        out
    }
}

struct DrawContext<'p, 'a> {
    prep: &'p Prepared<'a>,
    dims: Dims,
}

impl DrawContext<'_, '_> {
    fn state(&self, draws: &PosteriorDraws, j: usize) -> Result<ParameterState> {
        draws.post_state(&self.dims, j)
    }

    fn xi(&self, state: &ParameterState) -> Vec<f64> {
        (0..self.prep.n_cells()).map(|c| self.prep.xi(state, c)).collect()
    }
}

fn context<'p, 'a>(draws: &PosteriorDraws, prep: &'p Prepared<'a>) -> Result<DrawContext<'p, 'a>> {
    let dims = draws.aligned_dims(prep.spec, prep.data)?;
    Ok(DrawContext { prep, dims })
}

/// `y_rep = ξ + ε` at every observed cell for the selected post-warmup draws.
pub fn replicate(
    draws: &PosteriorDraws,
    data: &LongitudinalDataset,
    spec: &ModelSpec,
    variant: Variant,
    which: &[usize],
    seed: u64,
) -> Result<Replicates> {
    check_variant(draws, variant)?;
    let prep = Prepared::new(spec, data, variant)?;
    let ctx = context(draws, &prep)?;
    let values = which
        .par_iter()
        .map(|&j| {
            let state = ctx.state(draws, j)?;
            Ok(replicate_state(&ctx, &state, seed, j))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Replicates { variant, draws: which.to_vec(), cells: cell_keys(&prep), values })
}

fn replicate_state(ctx: &DrawContext, state: &ParameterState, seed: u64, j: usize) -> Vec<f64> {
    let mut rng = stream(seed, &[STREAM_REPLICATE, j as u64]);
    let prep = ctx.prep;
    ctx.xi(state)
        .into_iter()
        .enumerate()
        .map(|(c, xi)| {
            let l = prep.cells[c].l;
            xi + skewnormal::draw_unchecked(state.omega[l][prep.window(c)], state.psi[l], &mut rng)
        })
        .collect()
}

fn residualize(ctx: &DrawContext, state: &ParameterState, xi: &[f64], ys: impl Iterator<Item = f64>) -> Result<Vec<f64>> {
    let prep = ctx.prep;
    ys.zip(xi)
        .enumerate()
        .map(|(c, (y, xi))| {
            let l = prep.cells[c].l;
            let (om, psi) = (state.omega[l][prep.window(c)], state.psi[l]);
            let sd = skewnormal::sd(om, psi);
            if !(sd > 0.0) {
                return Err(Error::Numerical("skew-normal standard deviation is zero".into()));
            }
            Ok((y - xi - skewnormal::mean(om, psi)) / sd)
        })
        .collect()
}

/// `R = (y − μ)/σ` per selected draw, with μ and σ the mean and standard
/// deviation of the error law in the cell's window.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTable {
    pub variant: Variant,
    pub draws: Vec<usize>,
    pub cells: Vec<CellKey>,
    /// `values[m][cell]`.
    pub values: Vec<Vec<f64>>,
}

/// Residuals of the observed data, or of `replicates` when given.
pub fn standardized_residuals(
    draws: &PosteriorDraws,
    data: &LongitudinalDataset,
    spec: &ModelSpec,
    variant: Variant,
    which: &[usize],
    replicates: Option<&Replicates>,
) -> Result<ResidualTable> {
    check_variant(draws, variant)?;
    let prep = Prepared::new(spec, data, variant)?;
    let ctx = context(draws, &prep)?;
    if let Some(r) = replicates {
        if r.draws != which || r.cells.len() != prep.n_cells() {
            return Err(Error::Usage("replicates are not aligned with the requested draws".into()));
        }
    }
    let values = which
        .par_iter()
        .enumerate()
        .map(|(m, &j)| {
            let state = ctx.state(draws, j)?;
            let xi = ctx.xi(&state);
            match replicates {
                Some(r) => residualize(&ctx, &state, &xi, r.values[m].iter().copied()),
                None => residualize(&ctx, &state, &xi, prep.cells.iter().map(|c| c.y)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualTable { variant, draws: which.to_vec(), cells: cell_keys(&prep), values })
}

/// Observed and replicated residual tables in one pass over the draws.
pub fn residual_pair(
    draws: &PosteriorDraws,
    data: &LongitudinalDataset,
    spec: &ModelSpec,
    variant: Variant,
    which: &[usize],
    seed: u64,
) -> Result<(ResidualTable, ResidualTable)> {
    check_variant(draws, variant)?;
    let prep = Prepared::new(spec, data, variant)?;
    let ctx = context(draws, &prep)?;
    let pairs = which
        .par_iter()
        .map(|&j| {
            let state = ctx.state(draws, j)?;
            let xi = ctx.xi(&state);
            let obs = residualize(&ctx, &state, &xi, prep.cells.iter().map(|c| c.y))?;
            let yrep = replicate_state(&ctx, &state, seed, j);
            let rep = residualize(&ctx, &state, &xi, yrep.into_iter())?;
            Ok((obs, rep))
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = cell_keys(&prep);
    let (obs, rep): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok((
        ResidualTable { variant, draws: which.to_vec(), cells: cells.clone(), values: obs },
        ResidualTable { variant, draws: which.to_vec(), cells, values: rep },
    ))
}

fn check_pair(obs: &ResidualTable, rep: &ResidualTable) -> Result<()> {
    if obs.draws != rep.draws || obs.cells != rep.cells || obs.variant != rep.variant {
        return Err(Error::Usage("observed and replicated residuals are not aligned".into()));
    }
    Ok(())
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(xs: &[f64], p: f64) -> f64 {
    let h = (xs.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqRow {
    pub factor: usize,
    pub stratum: String,
    pub prob: f64,
    pub q_obs: f64,
    pub q_rep: f64,
}

/// Per factor, empirical quantiles of observed and replicated residuals,
/// each averaged over draws.
pub fn qq_export(obs: &ResidualTable, rep: &ResidualTable, n_factors: usize, stratum: &str) -> Result<Vec<QqRow>> {
    check_pair(obs, rep)?;
    let grid = qq_grid();
    let mut rows = Vec::new();
    for l in 0..n_factors {
        let idx: Vec<usize> = (0..obs.cells.len()).filter(|&c| obs.cells[c].factor == l).collect();
        if idx.is_empty() {
            continue;
        }
        let mut q_obs = vec![0.0; grid.len()];
        let mut q_rep = vec![0.0; grid.len()];
        for (tab, acc) in [(obs, &mut q_obs), (rep, &mut q_rep)] {
            for row in &tab.values {
                let mut xs: Vec<f64> = idx.iter().map(|&c| row[c]).collect();
                xs.sort_by(f64::total_cmp);
                for (a, &p) in acc.iter_mut().zip(&grid) {
                    *a += quantile_sorted(&xs, p);
                }
            }
            let m = tab.values.len() as f64;
            acc.iter_mut().for_each(|a| *a /= m);
        }
        for (j, &p) in grid.iter().enumerate() {
            rows.push(QqRow { factor: l, stratum: stratum.to_string(), prob: p, q_obs: q_obs[j], q_rep: q_rep[j] });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRatioRow {
    pub factor: usize,
    pub window: usize,
    pub cells: usize,
    /// Absent when the window has fewer than two residuals.
    pub ratio: Option<f64>,
}

fn variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, s) = xs.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    let m = s / n as f64;
    xs.map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Mean over draws of `Var(R_obs)/Var(R_rep)` within each (factor, window).
pub fn variance_ratio(obs: &ResidualTable, rep: &ResidualTable, n_factors: usize, n_windows: usize) -> Result<Vec<VarianceRatioRow>> {
    check_pair(obs, rep)?;
    let mut groups = vec![Vec::new(); n_factors * n_windows];
    for (c, k) in obs.cells.iter().enumerate() {
        groups[k.factor * n_windows + k.window].push(c);
    }
    let mut rows = Vec::new();
    for l in 0..n_factors {
        for w in 0..n_windows {
            let idx = &groups[l * n_windows + w];
            let ratio = (idx.len() >= 2).then(|| {
                let sum: f64 = obs
                    .values
                    .iter()
                    .zip(&rep.values)
                    .map(|(o, r)| variance(idx.iter().map(|&c| o[c])) / variance(idx.iter().map(|&c| r[c])))
                    .sum();
                sum / obs.values.len() as f64
            });
            rows.push(VarianceRatioRow { factor: l, window: w, cells: idx.len(), ratio });
        }
    }
    Ok(rows)
}

pub fn write_variance_ratios<W: Write>(rows: &[VarianceRatioRow], spec: &ModelSpec, out: W) -> Result<()> {
    let labels = spec.window_labels();
    let mut w = csv_writer(out);
    w.write_record(["factor", "window", "label", "cells", "ratio"])?;
    for r in rows {
        w.write_record([
            spec.risk_factors[r.factor].clone(),
            (r.window + 1).to_string(),
            labels[r.window].clone(),
            r.cells.to_string(),
            r.ratio.map_or("NA".into(), |v| format!("{v}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_qq<W: Write>(rows: &[QqRow], spec: &ModelSpec, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["factor", "stratum", "prob", "q_obs", "q_rep"])?;
    for r in rows {
        w.write_record([
            spec.risk_factors[r.factor].clone(),
            r.stratum.clone(),
            format!("{}", r.prob),
            format!("{}", r.q_obs),
            format!("{}", r.q_rep),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

/// `#{m : T_rep ≥ T_obs}`, ties counting as successes.
pub fn ppp_count(t_obs: &[f64], t_rep: &[f64]) -> usize {
    t_obs.iter().zip(t_rep).filter(|(o, r)| r >= o).count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyGroup {
    pub factors: (usize, usize),
    /// External cohort ids for cross-cohort checks.
    pub cohorts: Option<(i64, i64)>,
    pub t_obs: Vec<f64>,
    pub t_rep: Vec<f64>,
    pub successes: usize,
    pub ppp: f64,
}

impl DiscrepancyGroup {
    fn new(factors: (usize, usize), cohorts: Option<(i64, i64)>, t_obs: Vec<f64>, t_rep: Vec<f64>) -> Self {
        let successes = ppp_count(&t_obs, &t_rep);
        let ppp = successes as f64 / t_obs.len() as f64;
        DiscrepancyGroup { factors, cohorts, t_obs, t_rep, successes, ppp }
    }

    pub fn label(&self, spec: &ModelSpec) -> String {
        let (a, b) = self.factors;
        match self.cohorts {
            None => format!("{}-{}", spec.risk_factors[a], spec.risk_factors[b]),
            Some((x, y)) => format!("{}:{x}-{y}", spec.risk_factors[a]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyReport {
    pub check: String,
    pub stratum: String,
    pub groups: Vec<DiscrepancyGroup>,
}

impl DiscrepancyReport {
    pub fn write_csv<W: Write>(&self, spec: &ModelSpec, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["check", "stratum", "group", "draws", "mean_obs", "mean_rep", "successes", "ppp"])?;
        for g in &self.groups {
            let m = g.t_obs.len() as f64;
            w.write_record([
                self.check.clone(),
                self.stratum.clone(),
                g.label(spec),
                g.t_obs.len().to_string(),
                format!("{}", g.t_obs.iter().sum::<f64>() / m),
                format!("{}", g.t_rep.iter().sum::<f64>() / m),
                g.successes.to_string(),
                format!("{}", g.ppp),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-draw statistics in long form.
    pub fn write_draws_csv<W: Write>(&self, spec: &ModelSpec, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["check", "stratum", "group", "draw", "t_obs", "t_rep"])?;
        for g in &self.groups {
            for (m, (o, r)) in g.t_obs.iter().zip(&g.t_rep).enumerate() {
                w.write_record([
                    self.check.clone(),
                    self.stratum.clone(),
                    g.label(spec),
                    m.to_string(),
                    format!("{o}"),
                    format!("{r}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Pearson {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl Pearson {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    fn corr(&self) -> f64 {
        let cov = self.sxy - self.sx * self.sy / self.n;
        let vx = self.sxx - self.sx * self.sx / self.n;
        let vy = self.syy - self.sy * self.sy / self.n;
        cov / (vx * vy).sqrt()
    }
}

/// Which residual pairs within a participant enter the correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Pairing {
    /// Two factors at the same exam.
    SameAge,
    /// Every ordered pair of distinct exams.
    DifferentAges,
}

impl Pairing {
    pub fn name(self) -> &'static str {
        match self {
            Pairing::SameAge => "within-subject-same-age",
            Pairing::DifferentAges => "within-subject-different-ages",
        }
    }
}

/// Cell index pairs per factor pair `(ℓ, ℓ')`, `ℓ ≤ ℓ'`.
fn within_pairs(cells: &[CellKey], n_factors: usize, pairing: Pairing) -> Vec<((usize, usize), Vec<(usize, usize)>)> {
    let mut out: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_factors * n_factors];
    let mut start = 0;
    while start < cells.len() {
        let i = cells[start].participant;
        let end = start + cells[start..].iter().take_while(|k| k.participant == i).count();
        for a in start..end {
            for b in start..end {
                let (ka, kb) = (cells[a], cells[b]);
                let same = ka.record == kb.record;
                let keep = match pairing {
                    Pairing::SameAge => same && ka.factor < kb.factor,
                    Pairing::DifferentAges => !same && ka.factor <= kb.factor,
                };
                if keep {
                    out[ka.factor * n_factors + kb.factor].push((a, b));
                }
            }
        }
        start = end;
    }
    let mut groups = Vec::new();
    for l in 0..n_factors {
        for m in l..n_factors {
            let v = std::mem::take(&mut out[l * n_factors + m]);
            if !v.is_empty() {
                groups.push(((l, m), v));
            }
        }
    }
    groups
}

/// Correlation of residual pairs within participants, per factor pair; needs
/// residuals from the model without cohort effects.
pub fn within_subject_ppp(
    obs: &ResidualTable,
    rep: &ResidualTable,
    n_factors: usize,
    pairing: Pairing,
    stratum: &str,
) -> Result<DiscrepancyReport> {
    check_pair(obs, rep)?;
    if obs.variant != Variant::NoCohort {
        return Err(Error::Usage("within-subject correlation checks need a fit without cohort effects".into()));
    }
    let groups = within_pairs(&obs.cells, n_factors, pairing)
        .into_par_iter()
        .map(|(factors, pairs)| {
            let stat = |row: &Vec<f64>| {
                let mut p = Pearson::default();
                for &(a, b) in &pairs {
                    p.push(row[a], row[b]);
                }
                p.corr()
            };
            let t_obs = obs.values.iter().map(stat).collect();
            let t_rep = rep.values.iter().map(stat).collect();
            DiscrepancyGroup::new(factors, None, t_obs, t_rep)
        })
        .collect();
    Ok(DiscrepancyReport { check: pairing.name().into(), stratum: stratum.into(), groups })
}

/// Window-averaged residuals per (factor, cohort), correlated across cohort
/// pairs over their shared windows; needs residuals from the model without
/// subject effects. Pairs sharing fewer than two windows are absent.
pub fn cross_cohort_ppp(
    obs: &ResidualTable,
    rep: &ResidualTable,
    n_factors: usize,
    n_windows: usize,
    cohort_ids: &[i64],
    stratum: &str,
) -> Result<DiscrepancyReport> {
    check_pair(obs, rep)?;
    if obs.variant != Variant::NoParticipant {
        return Err(Error::Usage("cross-cohort correlation checks need a fit without subject effects".into()));
    }
    let k_n = cohort_ids.len();
    let slot = |l: usize, k: usize, w: usize| (l * k_n + k) * n_windows + w;
    let mut counts = vec![0usize; n_factors * k_n * n_windows];
    for key in &obs.cells {
        counts[slot(key.factor, key.cohort, key.window)] += 1;
    }
    let means = |row: &Vec<f64>| {
        let mut s = vec![0.0; counts.len()];
        for (key, v) in obs.cells.iter().zip(row) {
            s[slot(key.factor, key.cohort, key.window)] += v;
        }
        s.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect::<Vec<f64>>()
    };
    let obs_means: Vec<Vec<f64>> = obs.values.iter().map(means).collect();
    let rep_means: Vec<Vec<f64>> = rep.values.iter().map(means).collect();
    let mut groups = Vec::new();
    for l in 0..n_factors {
        for a in 0..k_n {
            for b in a + 1..k_n {
                let shared: Vec<usize> =
                    (0..n_windows).filter(|&w| counts[slot(l, a, w)] > 0 && counts[slot(l, b, w)] > 0).collect();
                if shared.len() < 2 {
                    continue;
                }
                let stat = |m: &Vec<f64>| {
                    let mut p = Pearson::default();
                    for &w in &shared {
                        p.push(m[slot(l, a, w)], m[slot(l, b, w)]);
                    }
                    p.corr()
                };
                let t_obs = obs_means.iter().map(stat).collect();
                let t_rep = rep_means.iter().map(stat).collect();
                groups.push(DiscrepancyGroup::new((l, l), Some((cohort_ids[a], cohort_ids[b])), t_obs, t_rep));
            }
        }
    }
    Ok(DiscrepancyReport { check: "cross-cohort".into(), stratum: stratum.into(), groups })
}

/// Stratum label for reports: the fitted sex stratum, or `all`.
pub fn stratum_label(spec: &ModelSpec) -> String {
    spec.sex_stratum.clone().unwrap_or_else(|| "all".into())
}
