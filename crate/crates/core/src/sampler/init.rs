//! Initial states for the superchains.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};

use super::gibbs::{Chain, Prepared};
use super::SamplerConfig;
use crate::basis::fixed_row;
use crate::covariance::{sample_cohort_effects, sample_subject_effects};
use crate::data::LongitudinalDataset;
use crate::error::Result;
use crate::likelihood::{ALPHA_SD, OMEGA_SCALE, PSI_SD};
use crate::linalg::{cholesky_jitter, inv_wishart_draw};
use crate::rng::{stream, StreamRng, STREAM_SUBSAMPLE};
use crate::spec::ModelSpec;
use crate::state::{Dims, ParameterState, Variant};

/// Least-squares fixed effects and residual scales; zero random effects.
pub fn least_squares_state(spec: &ModelSpec, data: &LongitudinalDataset, dims: &Dims, variant: Variant) -> Result<ParameterState> {
    let mut state = ParameterState::neutral(dims, variant);
    let na = dims.layout.len();
    let xs: Vec<Vec<f64>> = data.participants.iter().map(|p| p.design_row(spec)).collect();
    let rows: Vec<Vec<f64>> = data
        .records
        .iter()
        .map(|r| fixed_row(r.age, &xs[r.participant], spec, &dims.layout))
        .collect::<Result<_>>()?;
    for l in 0..dims.l {
        let mut a = DMatrix::<f64>::identity(na, na) * 1e-6;
        let mut b = DVector::<f64>::zeros(na);
        for (r, row) in data.records.iter().zip(&rows) {
            let Some(y) = r.values[l] else { continue };
            for i in 0..na {
                if row[i] == 0.0 {
                    continue;
                }
                b[i] += row[i] * y;
                for j in 0..na {
                    a[(i, j)] += row[i] * row[j];
                }
            }
        }
        let sol = cholesky_jitter(&a)?.solve(&b);
        state.alpha[l] = sol.iter().copied().collect();

        let mut ss = vec![0.0; dims.nw];
        let mut cnt = vec![0usize; dims.nw];
        for (r, row) in data.records.iter().zip(&rows) {
            let Some(y) = r.values[l] else { continue };
            let fit: f64 = row.iter().zip(&state.alpha[l]).map(|(u, v)| u * v).sum();
            let w = spec.window_of(r.age)?;
            ss[w] += (y - fit).powi(2);
            cnt[w] += 1;
        }
        let tot_ss: f64 = ss.iter().sum();
        let tot_n: usize = cnt.iter().sum();
        let overall = if tot_n > 0 { (tot_ss / tot_n as f64).sqrt().max(1e-3) } else { 1.0 };
        for w in 0..dims.nw {
            state.omega[l][w] = if cnt[w] > 0 { (ss[w] / cnt[w] as f64).sqrt().max(1e-3) } else { overall };
        }
        if let Some(sig) = state.sigma.as_mut() {
            sig[(2 * l, 2 * l)] = 0.5 * overall * overall;
            sig[(2 * l + 1, 2 * l + 1)] = 0.5 * overall * overall / 1600.0;
        }
    }
    for lam in state.lambda.iter_mut() {
        *lam = DMatrix::identity(dims.k, dims.k) * 0.1;
    }
    Ok(state)
}

/// Independent draw from the prior.
pub fn prior_draw(dims: &Dims, variant: Variant, rng: &mut StreamRng) -> Result<ParameterState> {
    let mut s = ParameterState::neutral(dims, variant);
    for a in s.alpha.iter_mut().flatten() {
        *a = ALPHA_SD * rng.sample::<f64, _>(StandardNormal);
    }
    for p in s.psi.iter_mut() {
        *p = PSI_SD * rng.sample::<f64, _>(StandardNormal);
    }
    let cauchy = Cauchy::new(0.0, OMEGA_SCALE).expect("positive scale");
    for w in s.omega.iter_mut().flatten() {
        *w = cauchy.sample(rng).abs().max(1e-8);
    }
    if variant.has_subject() {
        let m2 = 2 * dims.l;
        let sig = inv_wishart_draw((m2 + 2) as f64, &DMatrix::identity(m2, m2), rng)?;
        for i in 0..dims.n_part {
            let b = sample_subject_effects(&sig, rng)?;
            let j = dims.subject_idx(i, 0, 0);
            s.subject[j..j + m2].copy_from_slice(b.as_slice());
        }
        s.sigma = Some(sig);
    }
    if variant.has_cohort() {
        for l in 0..dims.l {
            let lam = inv_wishart_draw((dims.k + 2) as f64, &DMatrix::identity(dims.k, dims.k), rng)?;
            for (p, b) in sample_cohort_effects(&lam, dims.nb, rng)?.into_iter().enumerate() {
                for k in 0..dims.k {
                    s.cohort[dims.cohort_idx(l, k, p)] = b[k];
                }
            }
            s.lambda[l] = lam;
        }
    }
    Ok(s)
}

/// Ground truth perturbed by relative noise of size `jitter`, adapted to `variant`.
pub fn truth_jitter(truth: &ParameterState, dims: &Dims, variant: Variant, jitter: f64, rng: &mut StreamRng) -> ParameterState {
    let mut s = ParameterState::neutral(dims, variant);
    let n = |rng: &mut StreamRng| -> f64 { rng.sample(StandardNormal) };
    for (dst, src) in s.alpha.iter_mut().zip(&truth.alpha) {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v + jitter * (v.abs() + 0.1) * n(rng);
        }
    }
    if variant.has_cohort() && truth.cohort.len() == s.cohort.len() {
        s.cohort.clone_from(&truth.cohort);
        s.lambda.clone_from(&truth.lambda);
    }
    if variant.has_subject() {
        if let Some(sig) = &truth.sigma {
            s.sigma = Some(sig.clone());
        }
        if truth.subject.len() == s.subject.len() {
            s.subject.clone_from(&truth.subject);
        }
    }
    for (dst, src) in s.omega.iter_mut().zip(&truth.omega) {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v * (jitter * n(rng)).exp();
        }
    }
    for (d, &v) in s.psi.iter_mut().zip(&truth.psi) {
        *d = v + jitter * (v.abs() + 0.1) * n(rng);
    }
    s
}

/// Short chain on a participant bootstrap of `fraction` of the data; the
/// resulting global parameters seed the full-data chains with zero subject effects.
pub fn subsample_posterior(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    dims: &Dims,
    config: &SamplerConfig,
    superchain: usize,
) -> Result<ParameterState> {
    let mut rng = stream(config.seed, &[STREAM_SUBSAMPLE, superchain as u64]);
    let n = data.n_participants();
    let size = ((config.subsample_fraction * n as f64).ceil() as usize).clamp(n.min(20), n);
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..n)).collect();
    let sub = data.subset(&idx);
    let prep = Prepared::new(spec, &sub, config.variant)?;
    let init = least_squares_state(spec, &sub, &prep.dims, config.variant)?;
    let mut chain = Chain::new(&prep, init, rng);
    for it in 0..config.init_iterations {
        chain.sweep(Some(it));
    }
    let fitted = chain.state;
    let mut s = ParameterState::neutral(dims, config.variant);
    s.alpha = fitted.alpha;
    s.cohort = fitted.cohort;
    s.sigma = fitted.sigma;
    s.lambda = fitted.lambda;
    s.omega = fitted.omega;
    s.psi = fitted.psi;
    Ok(s)
}
