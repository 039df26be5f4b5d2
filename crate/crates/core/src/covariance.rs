//! Structured random-effect covariances and the closed-form second moments of y.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::basis::build_basis;
use crate::error::{Error, Result};
use crate::linalg::{first_bad_minor, is_symmetric, mvn_from_chol};
use crate::skewnormal;
use crate::spec::ModelSpec;
use crate::state::ParameterState;

/// `Σ = Δ ⊛ Γ`: block `(ℓ, ℓ')` is `γ_ℓℓ' · Δ_ℓℓ'`.
pub fn block_kronecker(delta: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = gamma.nrows();
    if !gamma.is_square() || delta.nrows() != 2 * l || delta.ncols() != 2 * l {
        return Err(Error::ModelConfig(format!(
            "expected a {0}x{0} delta for a {1}x{1} gamma, got {2}x{3}",
            2 * l,
            l,
            delta.nrows(),
            delta.ncols()
        )));
    }
    let mut s = DMatrix::zeros(2 * l, 2 * l);
    for a in 0..l {
        for b in 0..l {
            for p in 0..2 {
                for q in 0..2 {
                    s[(2 * a + p, 2 * b + q)] = gamma[(a, b)] * delta[(2 * a + p, 2 * b + q)];
                }
            }
        }
    }
    if !is_symmetric(&s, 1e-12) {
        return Err(Error::ModelConfig("block Kronecker product is not symmetric".into()));
    }
    if let Some(k) = first_bad_minor(&s) {
        return Err(Error::ModelConfig(format!(
            "block Kronecker product is not positive definite (leading minor {k} fails)"
        )));
    }
    Ok(s)
}

/// `Vec(b_i) ~ N(0, Σ)`, ordered `(ℓ, p)` with `p` fastest.
pub fn sample_subject_effects<R: Rng + ?Sized>(sigma: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let c = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::ModelConfig("subject covariance is not positive definite".into()))?;
    Ok(mvn_from_chol(&c.l(), rng))
}

/// One K-vector `b_ℓ^(p) ~ N(0, Λ)` per coefficient index `p < nb`.
pub fn sample_cohort_effects<R: Rng + ?Sized>(
    lambda: &DMatrix<f64>,
    nb: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let c = Cholesky::new(lambda.clone())
        .ok_or_else(|| Error::ModelConfig("cohort covariance is not positive definite".into()))?;
    let l = c.l();
    Ok((0..nb).map(|_| mvn_from_chol(&l, rng)).collect())
}

/// The six pairings of two observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovCase {
    /// i: one observation with itself.
    SameSubjectSameFactor,
    /// ii: two factors of one exam.
    SameSubjectCrossFactor,
    /// iii
    SameCohortCrossSubject,
    /// iv
    SameCohortCrossSubjectCrossFactor,
    /// v
    CrossCohortSameFactor,
    /// vi
    CrossCohortCrossFactor,
}

impl CovCase {
    pub const ALL: [CovCase; 6] = [
        CovCase::SameSubjectSameFactor,
        CovCase::SameSubjectCrossFactor,
        CovCase::SameCohortCrossSubject,
        CovCase::SameCohortCrossSubjectCrossFactor,
        CovCase::CrossCohortSameFactor,
        CovCase::CrossCohortCrossFactor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CovCase::SameSubjectSameFactor => "same-subject-same-factor",
            CovCase::SameSubjectCrossFactor => "same-subject-cross-factor",
            CovCase::SameCohortCrossSubject => "same-cohort-cross-subject",
            CovCase::SameCohortCrossSubjectCrossFactor => "same-cohort-cross-subject-cross-factor",
            CovCase::CrossCohortSameFactor => "cross-cohort-same-factor",
            CovCase::CrossCohortCrossFactor => "cross-cohort-cross-factor",
        }
    }
}

impl std::str::FromStr for CovCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CovCase::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown covariance case '{s}'")))
    }
}

/// One observation slot: factor ℓ, internal cohort k, exam age.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub factor: usize,
    pub cohort: usize,
    pub age: f64,
}

fn sig(state: &ParameterState, l: usize, p: usize, m: usize, q: usize) -> f64 {
    state.sigma.as_ref().map_or(0.0, |s| s[(2 * l + p, 2 * m + q)])
}

fn lam(state: &ParameterState, l: usize, k: usize, kk: usize) -> f64 {
    state.lambda.get(l).map_or(0.0, |m| m[(k, kk)])
}

fn basis_dot(spec: &ModelSpec, a: f64, b: f64) -> Result<f64> {
    let x = build_basis(a, spec)?;
    let y = build_basis(b, spec)?;
    Ok(x.iter().zip(&y).map(|(u, v)| u * v).sum())
}

/// Subject-effect part `γ(δ00 + a(δ01 + δ10) + a²δ11)` for factors `l, m` at one age.
fn subject_part(state: &ParameterState, l: usize, m: usize, a: f64) -> f64 {
    sig(state, l, 0, m, 0) + a * (sig(state, l, 0, m, 1) + sig(state, l, 1, m, 0)) + a * a * sig(state, l, 1, m, 1)
}

/// Case i, with the error variance of the window containing `age`.
pub fn analytic_variance(state: &ParameterState, spec: &ModelSpec, cell: Cell) -> Result<f64> {
    let w = spec.window_of(cell.age)?;
    let l = cell.factor;
    Ok(subject_part(state, l, l, cell.age)
        + lam(state, l, cell.cohort, cell.cohort) * basis_dot(spec, cell.age, cell.age)?
        + skewnormal::variance(state.omega[l][w], state.psi[l]))
}

fn check(cond: bool, case: CovCase, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Usage(format!("case {} requires {what}", case.name())))
    }
}

pub fn analytic_covariance(case: CovCase, state: &ParameterState, spec: &ModelSpec, x: Cell, y: Cell) -> Result<f64> {
    let same_factor = x.factor == y.factor;
    let same_cohort = x.cohort == y.cohort;
    match case {
        CovCase::SameSubjectSameFactor => {
            check(same_factor && same_cohort && x.age == y.age, case, "one observation")?;
            analytic_variance(state, spec, x)
        }
        CovCase::SameSubjectCrossFactor => {
            check(!same_factor && same_cohort && x.age == y.age, case, "two factors of one exam")?;
            spec.window_of(x.age)?;
            Ok(subject_part(state, x.factor, y.factor, x.age))
        }
        CovCase::SameCohortCrossSubject => {
            check(same_factor && same_cohort, case, "one factor within one cohort")?;
            Ok(lam(state, x.factor, x.cohort, x.cohort) * basis_dot(spec, x.age, y.age)?)
        }
        CovCase::CrossCohortSameFactor => {
            check(same_factor && !same_cohort, case, "one factor in two cohorts")?;
            Ok(lam(state, x.factor, x.cohort, y.cohort) * basis_dot(spec, x.age, y.age)?)
        }
        CovCase::SameCohortCrossSubjectCrossFactor => {
            check(!same_factor && same_cohort, case, "two factors within one cohort")?;
            spec.window_of(x.age)?;
            spec.window_of(y.age)?;
            Ok(0.0)
        }
        CovCase::CrossCohortCrossFactor => {
            check(!same_factor && !same_cohort, case, "two factors in two cohorts")?;
            spec.window_of(x.age)?;
            spec.window_of(y.age)?;
            Ok(0.0)
        }
    }
}

pub fn analytic_correlation(case: CovCase, state: &ParameterState, spec: &ModelSpec, x: Cell, y: Cell) -> Result<f64> {
    let c = analytic_covariance(case, state, spec, x, y)?;
    if c == 0.0 {
        return Ok(0.0);
    }
    Ok(c / (analytic_variance(state, spec, x)? * analytic_variance(state, spec, y)?).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::state::{Dims, Variant};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_spd<R: rand::Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
        let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn identity_blocks() {
        let rho = 0.3;
        let gamma = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let s = block_kronecker(&(DMatrix::identity(4, 4) + kron_ones()), &gamma).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[1.0, 0.0, rho, 0.0, 0.0, 1.0, 0.0, rho, rho, 0.0, 1.0, 0.0, 0.0, rho, 0.0, 1.0],
        );
        assert_eq!(s, expected);
    }

    // every Δ block equal to the 2×2 identity
    fn kron_ones() -> DMatrix<f64> {
        let mut m = DMatrix::zeros(4, 4);
        m[(0, 2)] = 1.0;
        m[(2, 0)] = 1.0;
        m[(1, 3)] = 1.0;
        m[(3, 1)] = 1.0;
        m
    }

    #[test]
    fn identity_gamma_is_block_diagonal() {
        let mut rng = stream(2, &[]);
        let delta = random_spd(6, &mut rng);
        let s = block_kronecker(&delta, &DMatrix::identity(3, 3)).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let blk = s.view((2 * a, 2 * b), (2, 2));
                if a == b {
                    assert_eq!(blk, delta.view((2 * a, 2 * b), (2, 2)));
                } else {
                    assert!(blk.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn non_spd_product_is_reported() {
        let gamma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = block_kronecker(&DMatrix::from_element(4, 4, 1.0), &gamma).unwrap_err();
        assert!(matches!(err, Error::ModelConfig(m) if m.contains("leading minor")));
    }

    #[test]
    fn subject_draw_covariance_and_determinism() {
        let mut rng = stream(4, &[]);
        let n = 1_000_000;
        let eye = DMatrix::<f64>::identity(2, 2);
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let b = sample_subject_effects(&eye, &mut rng).unwrap();
            acc += &b * b.transpose();
        }
        acc /= n as f64;
        assert!((acc - &eye).norm() < 0.01 * eye.norm());
        let tiny = &eye * 1e-30;
        let b = sample_subject_effects(&tiny, &mut rng).unwrap();
        assert!(b.norm() < 1e-12);
        let a1 = sample_subject_effects(&eye, &mut stream(8, &[])).unwrap();
        let a2 = sample_subject_effects(&eye, &mut stream(8, &[])).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn cohort_draws_are_independent_under_diagonal_lambda() {
        let mut rng = stream(6, &[]);
        let lam = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for _ in 0..20_000 {
            for b in sample_cohort_effects(&lam, 9, &mut rng).unwrap() {
                sxy += b[0] * b[1];
                sxx += b[0] * b[0];
                syy += b[1] * b[1];
            }
        }
        assert!((sxy / (sxx * syy).sqrt()).abs() < 0.01);
        assert!((sxx / 180_000.0 - 2.0).abs() < 0.05);
        let k1 = DMatrix::from_element(1, 1, 3.0);
        assert_eq!(sample_cohort_effects(&k1, 9, &mut rng).unwrap()[0].len(), 1);
    }

    fn demo_state(seed: u64) -> (ParameterState, ModelSpec) {
        let spec = ModelSpec::default();
        let dims = Dims { l: 3, k: 3, nw: 7, nb: 9, layout: spec.fixed_layout(), n_part: 0 };
        let mut rng = stream(seed, &[]);
        let mut s = ParameterState::neutral(&dims, Variant::Full);
        // Schur product theorem keeps the result positive definite
        s.sigma = Some(block_kronecker(&random_spd(6, &mut rng), &random_spd(3, &mut rng)).unwrap());
        s.lambda = (0..3).map(|_| random_spd(3, &mut rng) * 0.01).collect();
        s.omega = vec![vec![1.5; 7], vec![0.7; 7], vec![2.0; 7]];
        s.psi = vec![1.0, -2.0, 0.0];
        (s, spec)
    }

    #[test]
    fn zero_cases_and_zero_age_variance() {
        let (mut s, spec) = demo_state(1);
        let x = Cell { factor: 0, cohort: 0, age: 30.0 };
        let y = Cell { factor: 1, cohort: 0, age: 50.0 };
        let z = Cell { factor: 1, cohort: 2, age: 50.0 };
        assert_eq!(analytic_covariance(CovCase::SameCohortCrossSubjectCrossFactor, &s, &spec, x, y).unwrap(), 0.0);
        assert_eq!(analytic_covariance(CovCase::CrossCohortCrossFactor, &s, &spec, x, z).unwrap(), 0.0);
        assert!(matches!(
            analytic_covariance(CovCase::CrossCohortCrossFactor, &s, &spec, x, y),
            Err(Error::Usage(_))
        ));
        assert!("case-vii".parse::<CovCase>().is_err());

        // substitution at a = 0 with an age range reaching 0
        let mut spec0 = spec.clone();
        spec0.age_min = 0.0;
        let sig = s.sigma.clone().unwrap();
        let mut sd = DMatrix::zeros(6, 6);
        for i in 0..6 {
            sd[(i, i)] = sig[(i, i)];
        }
        s.sigma = Some(sd.clone());
        let v = analytic_variance(&s, &spec0, Cell { factor: 2, cohort: 1, age: 0.0 }).unwrap();
        let expected = sd[(4, 4)] + s.lambda[2][(1, 1)] * 1.0 + skewnormal::variance(2.0, 0.0);
        assert!((v - expected).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn symmetric_and_bounded(seed in 0u64..10_000, a in 17.0f64..100.0, b in 17.0f64..100.0,
                                 l in 0usize..3, m in 0usize..3, k in 0usize..3, kk in 0usize..3) {
            let (s, spec) = demo_state(seed);
            let x = Cell { factor: l, cohort: k, age: a };
            let y = Cell { factor: m, cohort: kk, age: if l != m && k == kk { a } else { b } };
            for case in CovCase::ALL {
                if let Ok(c) = analytic_covariance(case, &s, &spec, x, y) {
                    let c2 = analytic_covariance(case, &s, &spec, y, x).unwrap();
                    prop_assert!((c - c2).abs() <= 1e-12 * (1.0 + c.abs()));
                    let r = analytic_correlation(case, &s, &spec, x, y).unwrap();
                    prop_assert!((-1.0..=1.0).contains(&r));
                }
            }
        }
    }
}
