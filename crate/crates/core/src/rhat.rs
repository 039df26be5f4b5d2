//! Nested R̂ over superchains of subchains.

use serde::Serialize;

use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};

pub const RHAT_THRESHOLD: f64 = 1.1;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn var_n1(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// `x[k][m][n]`: draw `n` of subchain `m` in superchain `k`.
///
/// `B_ν` is the variance of superchain means, `W_ν` the mean over superchains
/// of between-subchain plus within-subchain variance; returns `√(1 + B_ν/W_ν)`.
pub fn nested_rhat(x: &[Vec<Vec<f64>>]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::Usage("nested R-hat needs at least two superchains".into()));
    }
    let m = x[0].len();
    let n = x[0].first().map_or(0, Vec::len);
    if m == 0 || n == 0 || x.iter().any(|k| k.len() != m || k.iter().any(|c| c.len() != n)) {
        return Err(Error::Usage("nested R-hat needs a complete, non-empty draw grid".into()));
    }
    let mut super_means = Vec::with_capacity(x.len());
    let mut w_nu = 0.0;
    for k in x {
        let chain_means: Vec<f64> = k.iter().map(|c| mean(c)).collect();
        let b_k = var_n1(&chain_means);
        let w_k = mean(&k.iter().map(|c| var_n1(c)).collect::<Vec<_>>());
        w_nu += b_k + w_k;
        super_means.push(mean(&chain_means));
    }
    w_nu /= x.len() as f64;
    let b_nu = var_n1(&super_means);
    if w_nu == 0.0 {
        return Ok(if b_nu == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok((1.0 + b_nu / w_nu).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct RhatRow {
    pub path: String,
    pub rhat: f64,
    pub exceeds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<RhatRow>,
    pub failures: usize,
}

impl ConvergenceReport {
    pub fn failure_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.failures as f64 / self.rows.len() as f64
        }
    }

    pub fn passes(&self, max_fraction: f64) -> bool {
        self.failure_fraction() <= max_fraction
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["path", "rhat", "exceeds_threshold"])?;
        for r in &self.rows {
            w.write_record([r.path.clone(), format!("{}", r.rhat), (r.exceeds as u8).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn path_rhat(draws: &PosteriorDraws, path: &str) -> Result<f64> {
    let idx = draws
        .path_index(path)
        .ok_or_else(|| Error::Usage(format!("unknown parameter path '{path}'")))?;
    nested_rhat(&draws.series(idx))
}

pub fn convergence_report(draws: &PosteriorDraws) -> Result<ConvergenceReport> {
    let mut rows = Vec::with_capacity(draws.n_paths());
    for (idx, path) in draws.core_paths.iter().chain(&draws.subject_paths).enumerate() {
        let rhat = nested_rhat(&draws.series(idx))?;
        // NaN counts as a failure
        let exceeds = !(rhat <= RHAT_THRESHOLD);
        rows.push(RhatRow { path: path.clone(), rhat, exceeds });
    }
    let failures = rows.iter().filter(|r| r.exceeds).count();
    Ok(ConvergenceReport { rows, failures })
}
