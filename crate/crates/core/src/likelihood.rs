//! Observed-data log-likelihood and log-prior.

use nalgebra::{DMatrix, DVector};

use crate::data::LongitudinalDataset;
use crate::linalg::{inv_wishart_log_density, mvn_log_density};
use crate::skewnormal::{self, LN_2PI};
use crate::spec::ModelSpec;
use crate::state::{Dims, ParameterState};

pub const ALPHA_SD: f64 = 10.0;
pub const PSI_SD: f64 = 10.0;
pub const OMEGA_SCALE: f64 = 2.5;

/// Sum of skew-normal log-densities over observed cells; missing cells add nothing.
pub fn log_likelihood_observed(state: &ParameterState, spec: &ModelSpec, data: &LongitudinalDataset) -> f64 {
    let dims = Dims::new(spec, data);
    let xs: Vec<Vec<f64>> = data.participants.iter().map(|p| p.design_row(spec)).collect();
    let mut total = 0.0;
    for r in &data.records {
        let k = data.participants[r.participant].cohort;
        let w = match spec.window_of(r.age) {
            Ok(w) => w,
            Err(_) => return f64::NEG_INFINITY,
        };
        for (l, v) in r.values.iter().enumerate() {
            let Some(y) = v else { continue };
            let beta = state.beta(&dims, l, r.participant, &xs[r.participant], k);
            let xi = beta[0] + r.age * (beta[1] + beta[2 + w]);
            let omega = state.omega[l][w];
            if !(omega > 0.0) {
                return f64::NEG_INFINITY;
            }
            total += skewnormal::log_density_unchecked(y - xi, omega, state.psi[l]);
        }
    }
    total
}

pub fn normal_log_density(x: f64, sd: f64) -> f64 {
    -0.5 * LN_2PI - sd.ln() - 0.5 * (x / sd).powi(2)
}

pub fn half_cauchy_log_density(x: f64, scale: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    (2.0 / (std::f64::consts::PI * scale)).ln() - (1.0 + (x / scale).powi(2)).ln()
}

/// Individual prior terms, named for startup diagnostics.
pub fn log_prior_terms(state: &ParameterState, dims: &Dims) -> Vec<(&'static str, f64)> {
    let mut terms = Vec::new();
    let alpha: f64 = state.alpha.iter().flatten().map(|&a| normal_log_density(a, ALPHA_SD)).sum();
    terms.push(("alpha", alpha));
    terms.push(("psi", state.psi.iter().map(|&p| normal_log_density(p, PSI_SD)).sum()));
    terms.push((
        "omega",
        state.omega.iter().flatten().map(|&w| half_cauchy_log_density(w, OMEGA_SCALE)).sum(),
    ));
    if let Some(sigma) = &state.sigma {
        let n = sigma.nrows();
        terms.push(("sigma", inv_wishart_log_density(sigma, (n + 2) as f64, &DMatrix::identity(n, n))));
        let mut b = 0.0;
        if !state.subject.is_empty() {
            for chunk in state.subject.chunks(n) {
                b += mvn_log_density(&DVector::from_column_slice(chunk), sigma);
            }
        }
        terms.push(("b_subject", b));
    }
    if !state.lambda.is_empty() {
        let k = dims.k;
        let mut lam = 0.0;
        let mut b = 0.0;
        for (l, m) in state.lambda.iter().enumerate() {
            lam += inv_wishart_log_density(m, (k + 2) as f64, &DMatrix::identity(k, k));
            for p in 0..dims.nb {
                let v = DVector::from_iterator(k, (0..k).map(|kk| state.cohort[dims.cohort_idx(l, kk, p)]));
                b += mvn_log_density(&v, m);
            }
        }
        terms.push(("lambda", lam));
        terms.push(("b_cohort", b));
    }
    terms
}

pub fn log_prior(state: &ParameterState, dims: &Dims) -> f64 {
    log_prior_terms(state, dims).iter().map(|(_, v)| v).sum()
}
