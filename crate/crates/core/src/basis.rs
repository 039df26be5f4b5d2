//! Piecewise-linear age basis, trajectories and the sum-to-zero window constraint.

use crate::error::{Error, Result};
use crate::spec::{FixedLayout, ModelSpec};

/// `(1, a, a·[a∈s_1], …, a·[a∈s_P])`.
pub fn build_basis(age: f64, spec: &ModelSpec) -> Result<Vec<f64>> {
    let w = spec.window_of(age)?;
    let mut v = vec![0.0; spec.basis_len()];
    v[0] = 1.0;
    v[1] = age;
    v[2 + w] = age;
    Ok(v)
}

pub fn trajectory(age: f64, beta: &[f64], spec: &ModelSpec) -> Result<f64> {
    if beta.len() != spec.basis_len() {
        return Err(Error::Config(format!(
            "slope vector has length {}, expected {}",
            beta.len(),
            spec.basis_len()
        )));
    }
    let w = spec.window_of(age)?;
    Ok(beta[0] + age * (beta[1] + beta[2 + w]))
}

/// Appends the constraint-determined last window coefficient.
pub fn apply_constraint(free: &[f64]) -> Vec<f64> {
    let mut out = free.to_vec();
    out.push(-free.iter().sum::<f64>());
    out
}

/// Full `(P+2)`-vector of fixed slope parts `h^(p)(X)` for one factor.
pub fn fixed_slopes(x: &[f64], alpha: &[f64], layout: &FixedLayout) -> Result<Vec<f64>> {
    if x.len() != layout.n_design || alpha.len() != layout.len() {
        return Err(Error::Config(format!(
            "design row length {} / coefficient length {} do not match the layout ({} / {})",
            x.len(),
            alpha.len(),
            layout.n_design,
            layout.len()
        )));
    }
    let nw = layout.n_windows;
    let mut h = vec![0.0; nw + 2];
    for (idx, &a) in alpha.iter().enumerate() {
        let (p, c) = layout.coordinate(idx);
        h[p] += x[c] * a;
    }
    h[nw + 1] = -h[2..=nw].iter().sum::<f64>();
    Ok(h)
}

/// `h^(p)(X) = Xᵀα^(p)` after constraint expansion.
pub fn fixed_slope_part(x: &[f64], alpha: &[f64], layout: &FixedLayout, p: usize) -> Result<f64> {
    if p > layout.n_windows + 1 {
        return Err(Error::Config(format!("coefficient index {p} out of range")));
    }
    Ok(fixed_slopes(x, alpha, layout)?[p])
}

/// Row of the constrained fixed-effect design for one record, so that
/// `ξ_fixed = row · alpha`.
pub fn fixed_row(age: f64, x: &[f64], spec: &ModelSpec, layout: &FixedLayout) -> Result<Vec<f64>> {
    let w = spec.window_of(age)?;
    let nw = layout.n_windows;
    let mut row = vec![0.0; layout.len()];
    for idx in 0..layout.len() {
        let (p, c) = layout.coordinate(idx);
        let basis = match p {
            0 => 1.0,
            1 => age,
            _ => {
                // free window q contributes A_q − A_{P+1}
                let own = if w == p - 2 { age } else { 0.0 };
                let last = if w == nw - 1 { age } else { 0.0 };
                own - last
            }
        };
        row[idx] = x[c] * basis;
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basis_at_45_and_on_breakpoint() {
        let spec = ModelSpec::default();
        assert_eq!(
            build_basis(45.0, &spec).unwrap(),
            vec![1.0, 45.0, 0.0, 0.0, 45.0, 0.0, 0.0, 0.0, 0.0]
        );
        let b = build_basis(28.0, &spec).unwrap();
        assert_eq!(b[2], 28.0);
        assert_eq!(b[3], 0.0);
        assert!(build_basis(101.0, &spec).is_err());
    }

    #[test]
    fn basis_grid_has_one_window_entry() {
        let spec = ModelSpec::default();
        for i in 0..10_000 {
            let a = 17.0 + 83.0 * i as f64 / 9_999.0;
            let b = build_basis(a, &spec).unwrap();
            assert_eq!(b[0], 1.0);
            assert_eq!(b[1], a);
            let win: Vec<_> = b[2..].iter().filter(|&&v| v != 0.0).collect();
            assert_eq!(win, vec![&a]);
        }
    }

    #[test]
    fn constraint_examples() {
        assert_eq!(apply_constraint(&[1.0, 2.0]), vec![1.0, 2.0, -3.0]);
        assert_eq!(apply_constraint(&[0.0; 6]), vec![0.0; 7]);
        let out = apply_constraint(&[1.0, -1.0, 2.0, -2.0, 3.0, -3.0]);
        assert_eq!(out[6], 0.0);
    }

    #[test]
    fn trajectory_examples() {
        let spec = ModelSpec::default();
        let mut beta = vec![0.0; 9];
        beta[0] = 3.5;
        for a in [17.0, 45.0, 99.0] {
            assert_eq!(trajectory(a, &beta, &spec).unwrap(), 3.5);
        }
        let mut beta = vec![0.0; 9];
        beta[1] = 1.0;
        assert_eq!(trajectory(45.0, &beta, &spec).unwrap(), 45.0);
        let beta: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let dot: f64 = build_basis(45.0, &spec)
            .unwrap()
            .iter()
            .zip(&beta)
            .map(|(x, y)| x * y)
            .sum();
        assert!((trajectory(45.0, &beta, &spec).unwrap() - dot).abs() < 1e-12);
        assert!(trajectory(45.0, &beta[..8], &spec).is_err());
    }

    #[test]
    fn fixed_slope_part_examples() {
        let spec = ModelSpec::default();
        let lay = spec.fixed_layout();
        let mut x = vec![0.0; lay.n_design];
        x[0] = 1.0;
        let mut alpha = vec![0.0; lay.len()];
        alpha[lay.index(1, 0).unwrap()] = 0.7;
        assert_eq!(fixed_slope_part(&x, &alpha, &lay, 1).unwrap(), 0.7);
        let zero = vec![0.0; lay.len()];
        for p in 0..9 {
            assert_eq!(fixed_slope_part(&x, &zero, &lay, p).unwrap(), 0.0);
        }
        let mut xr = vec![0.0; lay.n_design];
        xr[1] = 1.0;
        let mut alpha = vec![0.0; lay.len()];
        alpha[lay.index(3, 1).unwrap()] = -1.25;
        assert_eq!(fixed_slope_part(&xr, &alpha, &lay, 3).unwrap(), -1.25);
        assert_eq!(fixed_slope_part(&xr, &alpha, &lay, 8).unwrap(), 1.25);
        assert!(fixed_slope_part(&xr[..3], &alpha, &lay, 0).is_err());
    }

    #[test]
    fn fixed_row_matches_slopes() {
        let spec = ModelSpec::default();
        let lay = spec.fixed_layout();
        let x = vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let alpha: Vec<f64> = (0..lay.len()).map(|i| ((i * 7) as f64).cos()).collect();
        for a in [20.0, 45.0, 85.0] {
            let row = fixed_row(a, &x, &spec, &lay).unwrap();
            let via_row: f64 = row.iter().zip(&alpha).map(|(r, b)| r * b).sum();
            let h = fixed_slopes(&x, &alpha, &lay).unwrap();
            let via_traj = trajectory(a, &h, &spec).unwrap();
            assert!((via_row - via_traj).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn constraint_sums_to_zero(free in proptest::collection::vec(-1e3f64..1e3, 1..12)) {
            let full = apply_constraint(&free);
            let s: f64 = full.iter().sum();
            let scale = free.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            prop_assert!(s.abs() <= 1e-12 * scale);
        }

        #[test]
        fn trajectory_is_linear(
            a in 17.0f64..100.0,
            b1 in proptest::collection::vec(-10f64..10.0, 9),
            b2 in proptest::collection::vec(-10f64..10.0, 9),
        ) {
            let spec = ModelSpec::default();
            let sum: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| x + y).collect();
            let lhs = trajectory(a, &sum, &spec).unwrap();
            let rhs = trajectory(a, &b1, &spec).unwrap() + trajectory(a, &b2, &spec).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
