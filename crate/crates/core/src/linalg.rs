//! Small dense helpers: guarded Cholesky, Gaussian and inverse-Wishart draws and densities.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::skewnormal::LN_2PI;

pub type Chol = Cholesky<f64, Dyn>;

/// Cholesky factorization; on failure retries once with `1e-8 · mean(diag)` added.
pub fn cholesky_jitter(m: &DMatrix<f64>) -> Result<Chol> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let jitter = 1e-8 * m.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    let mut mj = m.clone();
    for i in 0..n {
        mj[(i, i)] += jitter;
    }
    Cholesky::new(mj).ok_or_else(|| Error::Numerical(format!("{n}x{n} matrix is not positive definite")))
}

/// Index of the first non-positive leading minor, if any.
pub fn first_bad_minor(m: &DMatrix<f64>) -> Option<usize> {
    (1..=m.nrows()).find(|&k| Cholesky::new(m.view((0, 0), (k, k)).into_owned()).is_none())
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * (1.0 + m[(i, j)].abs())))
}

pub fn std_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draw from N(0, LLᵀ) given the lower factor.
pub fn mvn_from_chol<R: Rng + ?Sized>(l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    l * std_normal_vec(l.nrows(), rng)
}

/// Draw from N(Q⁻¹ r, Q⁻¹) given the Cholesky factor of the precision Q.
pub fn mvn_canonical<R: Rng + ?Sized>(q: &Chol, r: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let mean = q.solve(r);
    let z = std_normal_vec(r.len(), rng);
    // Lᵀ x = z gives x ~ N(0, Q⁻¹)
    let x = q
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    mean + x
}

pub fn log_det_chol(c: &Chol) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// log N(x; 0, S). Non-SPD `S` yields −∞.
pub fn mvn_log_density(x: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    match Cholesky::new(s.clone()) {
        None => f64::NEG_INFINITY,
        Some(c) => {
            let z = c
                .l_dirty()
                .solve_lower_triangular(x)
                .expect("Cholesky factor has a positive diagonal");
            -0.5 * (x.len() as f64 * LN_2PI + log_det_chol(&c) + z.norm_squared())
        }
    }
}

pub fn ln_mv_gamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (0..p).map(|j| ln_gamma(a - j as f64 / 2.0)).sum::<f64>()
}

/// log IW(S; ν, Ψ). Non-SPD `S` yields −∞.
pub fn inv_wishart_log_density(s: &DMatrix<f64>, nu: f64, psi: &DMatrix<f64>) -> f64 {
    let p = s.nrows();
    let (Some(cs), Some(cp)) = (Cholesky::new(s.clone()), Cholesky::new(psi.clone())) else {
        return f64::NEG_INFINITY;
    };
    let tr = (cs.inverse() * psi).trace();
    let pf = p as f64;
    0.5 * nu * log_det_chol(&cp)
        - 0.5 * nu * pf * std::f64::consts::LN_2
        - ln_mv_gamma(p, 0.5 * nu)
        - 0.5 * (nu + pf + 1.0) * log_det_chol(&cs)
        - 0.5 * tr
}

/// Draw from IW(ν, Ψ) through the Bartlett decomposition.
pub fn inv_wishart_draw<R: Rng + ?Sized>(nu: f64, psi: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = psi.nrows();
    if nu <= (p as f64) - 1.0 {
        return Err(Error::Domain(format!("inverse-Wishart needs ν > p − 1, got ν={nu}, p={p}")));
    }
    let lc = cholesky_jitter(psi)?.l();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(nu - i as f64).map_err(|e| Error::Domain(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // Σ = T Tᵀ with T = Lc A⁻ᵀ
    let a_inv_t = a
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Numerical("singular Bartlett factor".into()))?
        .transpose();
    let t = lc * a_inv_t;
    let s = &t * t.transpose();
    Ok((&s + s.transpose()) * 0.5)
}
