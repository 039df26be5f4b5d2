//! Numerical rank of the fixed-effect design.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::basis::{build_basis, fixed_row};
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::spec::ModelSpec;

/// Singular values below `RANK_RTOL · σ_max` count as zero.
pub const RANK_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub rows: usize,
    pub columns: usize,
    pub rank: usize,
    pub full_rank: bool,
    pub tolerance: f64,
}

/// Design rows for every record that observes `factor` (all records if `None`).
/// With `constrained = false` every window column of every window-interacting
/// covariate is kept, which duplicates the age column.
pub fn design_matrix(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    factor: Option<usize>,
    constrained: bool,
) -> Result<DMatrix<f64>> {
    let layout = spec.fixed_layout();
    let nd = spec.n_design();
    let ncols = if constrained {
        layout.len()
    } else {
        2 * nd + spec.n_windows() * layout.window_cols.len()
    };
    let mut rows = Vec::new();
    for r in &data.records {
        if let Some(l) = factor {
            if r.values[l].is_none() {
                continue;
            }
        }
        let x = data.participants[r.participant].design_row(spec);
        if constrained {
            rows.extend(fixed_row(r.age, &x, spec, &layout)?);
        } else {
            let a = build_basis(r.age, spec)?;
            rows.extend(x.iter().map(|v| v * a[0]));
            rows.extend(x.iter().map(|v| v * a[1]));
            for w in 0..spec.n_windows() {
                rows.extend(layout.window_cols.iter().map(|&c| x[c] * a[2 + w]));
            }
        }
    }
    Ok(DMatrix::from_row_slice(rows.len() / ncols, ncols, &rows))
}

pub fn rank_check(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    factor: Option<usize>,
    constrained: bool,
) -> Result<RankReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("rank check needs records".into()));
    }
    let m = design_matrix(spec, data, factor, constrained)?;
    let (rows, columns) = m.shape();
    // column scaling keeps the age-sized columns from dominating the tolerance
    let mut scaled = m;
    for mut col in scaled.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    let sv = scaled.singular_values();
    let smax = sv.max();
    let tolerance = RANK_RTOL * smax;
    let rank = if smax > 0.0 { sv.iter().filter(|&&s| s > tolerance).count() } else { 0 };
    Ok(RankReport { rows, columns, rank, full_rank: rank == columns, tolerance })
}
