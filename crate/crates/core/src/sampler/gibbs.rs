//! One MCMC chain: skew-normal latent augmentation, a collapsed Gaussian block
//! for fixed and cohort effects with subject effects integrated out, conjugate
//! inverse-Wishart covariance updates, and Metropolis steps for ω and ψ.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::basis::fixed_row;
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::likelihood::{ALPHA_SD, OMEGA_SCALE, PSI_SD};
use crate::linalg::{cholesky_jitter, inv_wishart_draw, mvn_canonical, std_normal_vec};
use crate::rng::StreamRng;
use crate::skewnormal::{delta, log_norm_cdf, log_phi, normal_positive};
use crate::spec::ModelSpec;
use crate::state::{Dims, ParameterState, Variant};

/// Target acceptance rate for the adaptive random-walk steps.
const RW_TARGET: f64 = 0.44;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ObsCell {
    pub rec: usize,
    pub l: usize,
    pub y: f64,
}

/// Read-only per-fit precomputation shared by all chains.
pub struct Prepared<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a LongitudinalDataset,
    pub dims: Dims,
    pub variant: Variant,
    rec_window: Vec<usize>,
    rec_cohort: Vec<usize>,
    rec_fixed: Vec<Vec<(usize, f64)>>,
    pub(crate) cells: Vec<ObsCell>,
    part_cells: Vec<(usize, usize)>,
    group_cells: Vec<Vec<usize>>,
    factor_cells: Vec<Vec<usize>>,
    n_alpha: usize,
    n_theta: usize,
}

impl<'a> Prepared<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a LongitudinalDataset, variant: Variant) -> Result<Self> {
        let dims = Dims::new(spec, data);
        if data.n_factors != dims.l {
            return Err(Error::Usage(format!(
                "dataset has {} risk factors, model expects {}",
                data.n_factors, dims.l
            )));
        }
        let xs: Vec<Vec<f64>> = data.participants.iter().map(|p| p.design_row(spec)).collect();
        let mut rec_window = Vec::with_capacity(data.records.len());
        let mut rec_cohort = Vec::with_capacity(data.records.len());
        let mut rec_fixed = Vec::with_capacity(data.records.len());
        for r in &data.records {
            rec_window.push(spec.window_of(r.age)?);
            rec_cohort.push(data.participants[r.participant].cohort);
            let row = fixed_row(r.age, &xs[r.participant], spec, &dims.layout)?;
            rec_fixed.push(row.into_iter().enumerate().filter(|(_, v)| *v != 0.0).collect());
        }
        let mut cells = Vec::new();
        let mut part_cells = Vec::with_capacity(data.n_participants());
        for i in 0..data.n_participants() {
            let start = cells.len();
            let (s, e) = data.ranges[i];
            for rec in s..e {
                for (l, v) in data.records[rec].values.iter().enumerate() {
                    if let Some(y) = v {
                        cells.push(ObsCell { rec, l, y: *y });
                    }
                }
            }
            part_cells.push((start, cells.len()));
        }
        let mut group_cells = vec![Vec::new(); dims.l * dims.nw];
        let mut factor_cells = vec![Vec::new(); dims.l];
        for (c, cell) in cells.iter().enumerate() {
            group_cells[cell.l * dims.nw + rec_window[cell.rec]].push(c);
            factor_cells[cell.l].push(c);
        }
        let n_alpha = dims.layout.len();
        let n_theta = dims.l * n_alpha + if variant.has_cohort() { dims.l * dims.k * dims.nb } else { 0 };
        Ok(Prepared {
            spec,
            data,
            dims,
            variant,
            rec_window,
            rec_cohort,
            rec_fixed,
            cells,
            part_cells,
            group_cells,
            factor_cells,
            n_alpha,
            n_theta,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    fn cohort_off(&self) -> usize {
        self.dims.l * self.n_alpha
    }

    /// Nonzero entries of the design row of cell `c` over the (α, cohort) block.
    fn theta_entries(&self, c: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let cell = self.cells[c];
        let off = cell.l * self.n_alpha;
        out.extend(self.rec_fixed[cell.rec].iter().map(|&(j, v)| (off + j, v)));
        if self.variant.has_cohort() {
            let a = self.data.records[cell.rec].age;
            let k = self.rec_cohort[cell.rec];
            let base = self.cohort_off() + self.dims.cohort_idx(cell.l, k, 0);
            out.push((base, 1.0));
            out.push((base + 1, a));
            out.push((base + 2 + self.rec_window[cell.rec], a));
        }
    }

    /// Fixed plus cohort part of ξ for cell `c`.
    fn fixed_cohort_part(&self, state: &ParameterState, c: usize) -> f64 {
        let cell = self.cells[c];
        let alpha = &state.alpha[cell.l];
        let mut v: f64 = self.rec_fixed[cell.rec].iter().map(|&(j, x)| alpha[j] * x).sum();
        if !state.cohort.is_empty() {
            let a = self.data.records[cell.rec].age;
            let k = self.rec_cohort[cell.rec];
            let b = |p| state.cohort[self.dims.cohort_idx(cell.l, k, p)];
            v += b(0) + a * (b(1) + b(2 + self.rec_window[cell.rec]));
        }
        v
    }

    pub(crate) fn xi(&self, state: &ParameterState, c: usize) -> f64 {
        let cell = self.cells[c];
        let mut v = self.fixed_cohort_part(state, c);
        if !state.subject.is_empty() {
            let rec = &self.data.records[cell.rec];
            let j = self.dims.subject_idx(rec.participant, cell.l, 0);
            v += state.subject[j] + rec.age * state.subject[j + 1];
        }
        v
    }

    pub(crate) fn window(&self, c: usize) -> usize {
        self.rec_window[self.cells[c].rec]
    }

    pub(crate) fn age(&self, c: usize) -> f64 {
        self.data.records[self.cells[c].rec].age
    }
}

#[derive(Debug, Clone, Default)]
pub struct AcceptStats {
    pub psi_indep: (usize, usize),
    pub psi_rw: (usize, usize),
    pub omega_indep: (usize, usize),
    pub omega_rw: (usize, usize),
    pub skipped_updates: usize,
}

pub struct Chain<'p, 'a> {
    prep: &'p Prepared<'a>,
    pub state: ParameterState,
    z: Vec<f64>,
    xi: Vec<f64>,
    psi_log_step: Vec<f64>,
    omega_log_step: Vec<f64>,
    rng: StreamRng,
    pub stats: AcceptStats,
}

/// Maximizes a concave scalar function by damped Newton; returns the mode and
/// the curvature there, or `None` if curvature is not negative or it stalls.
fn newton_max(f: impl Fn(f64) -> (f64, f64, f64), x0: f64) -> Option<(f64, f64)> {
    let mut x = x0;
    let (mut fx, mut g, mut h) = f(x);
    for _ in 0..100 {
        if !(h < 0.0) || !fx.is_finite() {
            return None;
        }
        let mut step = (-g / h).clamp(-10.0, 10.0);
        let mut tries = 0;
        loop {
            let xn = x + step;
            let (fn_, gn, hn) = f(xn);
            if fn_.is_finite() && fn_ >= fx - 1e-12 * fx.abs().max(1.0) {
                x = xn;
                fx = fn_;
                g = gn;
                h = hn;
                break;
            }
            step *= 0.5;
            tries += 1;
            if tries > 60 {
                return None;
            }
        }
        if step.abs() < 1e-9 * (1.0 + x.abs()) {
            return (h < 0.0).then_some((x, h));
        }
    }
    None
}

/// Log target of ψ given standardized residuals `t`: Σ log Φ(ψ t) + log N(ψ; 0, 10²).
fn psi_target(psi: f64, ts: &[f64]) -> (f64, f64, f64) {
    let prec = 1.0 / (PSI_SD * PSI_SD);
    let (mut f, mut g, mut h) = (-0.5 * psi * psi * prec, -psi * prec, -prec);
    for &t in ts {
        let x = psi * t;
        let lc = log_norm_cdf(x);
        let m = (log_phi(x) - lc).exp();
        f += lc;
        g += t * m;
        h -= t * t * m * (x + m);
    }
    (f, g, h)
}

/// Log target of η = ln ω for one window, including the Jacobian.
fn log_omega_target(eta: f64, es: &[f64], psi: f64) -> (f64, f64, f64) {
    let inv = (-eta).exp();
    let u = (2.0 * eta).exp() / (OMEGA_SCALE * OMEGA_SCALE);
    // half-Cauchy on ω plus Jacobian e^η, dropping constants
    let (mut f, mut g, mut h) = (-u.ln_1p() + eta, -2.0 * u / (1.0 + u) + 1.0, -4.0 * u / ((1.0 + u) * (1.0 + u)));
    for &e in es {
        let t = e * inv;
        let x = psi * t;
        let lc = log_norm_cdf(x);
        let m = (log_phi(x) - lc).exp();
        f += -eta - 0.5 * t * t + lc;
        g += -1.0 + t * t - x * m;
        h += -2.0 * t * t + x * m - x * x * m * (x + m);
    }
    (f, g, h)
}

impl<'p, 'a> Chain<'p, 'a> {
    pub fn new(prep: &'p Prepared<'a>, state: ParameterState, rng: StreamRng) -> Self {
        let n = prep.n_cells();
        let mut chain = Chain {
            prep,
            state,
            z: vec![0.0; n],
            xi: vec![0.0; n],
            psi_log_step: vec![(0.1f64).ln(); prep.dims.l],
            omega_log_step: vec![(0.05f64).ln(); prep.dims.l * prep.dims.nw],
            rng,
            stats: AcceptStats::default(),
        };
        chain.refresh_xi();
        chain
    }

    fn refresh_xi(&mut self) {
        for c in 0..self.prep.n_cells() {
            self.xi[c] = self.prep.xi(&self.state, c);
        }
    }

    /// One full sweep. `adapt_iter` is the iteration index during warmup, `None` afterwards.
    pub fn sweep(&mut self, adapt_iter: Option<usize>) {
        self.refresh_xi();
        self.update_latent();
        if let Err(e) = self.update_effects() {
            log::warn!("effects update skipped: {e}");
            self.stats.skipped_updates += 1;
        }
        if let Err(e) = self.update_covariances() {
            log::warn!("covariance update skipped: {e}");
            self.stats.skipped_updates += 1;
        }
        self.refresh_xi();
        self.update_psi(adapt_iter);
        self.update_omega(adapt_iter);
    }

    fn update_latent(&mut self) {
        let prep = self.prep;
        for (c, cell) in prep.cells.iter().enumerate() {
            let omega = self.state.omega[cell.l][prep.window(c)];
            let d = delta(self.state.psi[cell.l]);
            let s = (1.0 - d * d).sqrt().max(1e-12);
            let r = cell.y - self.xi[c];
            self.z[c] = normal_positive(d * r / omega, s, &mut self.rng);
        }
    }

    /// Noise variance and working response of cell `c` given the latent z.
    fn working(&self, c: usize) -> (f64, f64) {
        let cell = self.prep.cells[c];
        let omega = self.state.omega[cell.l][self.prep.window(c)];
        let d = delta(self.state.psi[cell.l]);
        let v = (omega * omega * (1.0 - d * d)).max(1e-300);
        (v, cell.y - omega * d * self.z[c])
    }

    fn update_effects(&mut self) -> Result<()> {
        let prep = self.prep;
        let dims = &prep.dims;
        let n = prep.n_theta;
        let m2 = 2 * dims.l;
        let mut q = DMatrix::<f64>::zeros(n, n);
        let mut r = DVector::<f64>::zeros(n);
        let mut ent: Vec<(usize, f64)> = Vec::with_capacity(32);
        let with_subject = prep.variant.has_subject();
        let sigma_inv = match &self.state.sigma {
            Some(s) if with_subject => Some(cholesky_jitter(s)?.inverse()),
            _ => None,
        };
        let mut cfac: Vec<DMatrix<f64>> = Vec::new();
        let mut pos = vec![usize::MAX; n];
        let mut loc: Vec<usize> = Vec::new();

        for i in 0..dims.n_part {
            let (s, e) = prep.part_cells[i];
            let Some(sig_inv) = &sigma_inv else {
                for c in s..e {
                    let (v, yt) = self.working(c);
                    prep.theta_entries(c, &mut ent);
                    for &(ga, va) in &ent {
                        r[ga] += va * yt / v;
                        for &(gb, vb) in &ent {
                            q[(ga, gb)] += va * vb / v;
                        }
                    }
                }
                continue;
            };
            loc.clear();
            for c in s..e {
                prep.theta_entries(c, &mut ent);
                for &(g, _) in &ent {
                    if pos[g] == usize::MAX {
                        pos[g] = loc.len();
                        loc.push(g);
                    }
                }
            }
            let nl = loc.len();
            let mut ml = DMatrix::<f64>::zeros(nl, nl);
            let mut ul = DVector::<f64>::zeros(nl);
            let mut f = DMatrix::<f64>::zeros(nl, m2);
            let mut hh = sig_inv.clone();
            let mut hy = DVector::<f64>::zeros(m2);
            for c in s..e {
                let (v, yt) = self.working(c);
                let a = prep.age(c);
                let l = prep.cells[c].l;
                prep.theta_entries(c, &mut ent);
                for &(ga, va) in &ent {
                    let ia = pos[ga];
                    ul[ia] += va * yt / v;
                    f[(ia, 2 * l)] += va / v;
                    f[(ia, 2 * l + 1)] += va * a / v;
                    for &(gb, vb) in &ent {
                        ml[(ia, pos[gb])] += va * vb / v;
                    }
                }
                hh[(2 * l, 2 * l)] += 1.0 / v;
                hh[(2 * l, 2 * l + 1)] += a / v;
                hh[(2 * l + 1, 2 * l)] += a / v;
                hh[(2 * l + 1, 2 * l + 1)] += a * a / v;
                hy[2 * l] += yt / v;
                hy[2 * l + 1] += a * yt / v;
            }
            let lc = cholesky_jitter(&hh)?.l();
            if nl > 0 {
                let gt = lc
                    .solve_lower_triangular(&f.transpose())
                    .ok_or_else(|| Error::Numerical("singular subject factor".into()))?;
                let w = lc
                    .solve_lower_triangular(&hy)
                    .ok_or_else(|| Error::Numerical("singular subject factor".into()))?;
                ml -= gt.transpose() * &gt;
                ul -= gt.transpose() * w;
                for (ia, &ga) in loc.iter().enumerate() {
                    r[ga] += ul[ia];
                    for (ib, &gb) in loc.iter().enumerate() {
                        q[(ga, gb)] += ml[(ia, ib)];
                    }
                }
            }
            for &g in &loc {
                pos[g] = usize::MAX;
            }
            cfac.push(lc);
        }

        let prior_prec = 1.0 / (ALPHA_SD * ALPHA_SD);
        for j in 0..dims.l * prep.n_alpha {
            q[(j, j)] += prior_prec;
        }
        if prep.variant.has_cohort() {
            let off = prep.cohort_off();
            for l in 0..dims.l {
                let lam_inv = cholesky_jitter(&self.state.lambda[l])?.inverse();
                for p in 0..dims.nb {
                    for k in 0..dims.k {
                        for kk in 0..dims.k {
                            q[(off + dims.cohort_idx(l, k, p), off + dims.cohort_idx(l, kk, p))] += lam_inv[(k, kk)];
                        }
                    }
                }
            }
        }
        let qc = cholesky_jitter(&q)?;
        let theta = mvn_canonical(&qc, &r, &mut self.rng);
        for l in 0..dims.l {
            self.state.alpha[l].copy_from_slice(theta.rows(l * prep.n_alpha, prep.n_alpha).as_slice());
        }
        if prep.variant.has_cohort() {
            let off = prep.cohort_off();
            self.state.cohort.copy_from_slice(theta.rows(off, n - off).as_slice());
        }

        if with_subject {
            for i in 0..dims.n_part {
                let (s, e) = prep.part_cells[i];
                let mut rhs = DVector::<f64>::zeros(m2);
                for c in s..e {
                    let (v, yt) = self.working(c);
                    let a = prep.age(c);
                    let l = prep.cells[c].l;
                    let resid = yt - prep.fixed_cohort_part(&self.state, c);
                    rhs[2 * l] += resid / v;
                    rhs[2 * l + 1] += a * resid / v;
                }
                let lc = &cfac[i];
                let w = lc.solve_lower_triangular(&rhs).expect("positive diagonal");
                let eps = std_normal_vec(m2, &mut self.rng);
                let b = lc.tr_solve_lower_triangular(&(w + eps)).expect("positive diagonal");
                let j = dims.subject_idx(i, 0, 0);
                self.state.subject[j..j + m2].copy_from_slice(b.as_slice());
            }
        }
        Ok(())
    }

    fn update_covariances(&mut self) -> Result<()> {
        let dims = &self.prep.dims;
        if self.state.sigma.is_some() && self.prep.variant.has_subject() {
            let m2 = 2 * dims.l;
            let mut s = DMatrix::<f64>::identity(m2, m2);
            for chunk in self.state.subject.chunks(m2) {
                let b = DVector::from_column_slice(chunk);
                s += &b * b.transpose();
            }
            let nu = (m2 + 2 + dims.n_part) as f64;
            self.state.sigma = Some(inv_wishart_draw(nu, &s, &mut self.rng)?);
        }
        if self.prep.variant.has_cohort() {
            for l in 0..dims.l {
                let mut s = DMatrix::<f64>::identity(dims.k, dims.k);
                for p in 0..dims.nb {
                    let b = DVector::from_iterator(
                        dims.k,
                        (0..dims.k).map(|k| self.state.cohort[dims.cohort_idx(l, k, p)]),
                    );
                    s += &b * b.transpose();
                }
                let nu = (dims.k + 2 + dims.nb) as f64;
                self.state.lambda[l] = inv_wishart_draw(nu, &s, &mut self.rng)?;
            }
        }
        Ok(())
    }

    fn adapt(log_step: &mut f64, accepted: bool, adapt_iter: Option<usize>) {
        if let Some(it) = adapt_iter {
            let gain = ((it + 1) as f64).powf(-0.6);
            *log_step += gain * (if accepted { 1.0 } else { 0.0 } - RW_TARGET);
            *log_step = log_step.clamp(-12.0, 3.0);
        }
    }

    fn log_u(&mut self) -> f64 {
        let u: f64 = self.rng.random();
        u.ln()
    }

    fn update_psi(&mut self, adapt_iter: Option<usize>) {
        let prep = self.prep;
        for l in 0..prep.dims.l {
            let ts: Vec<f64> = prep.factor_cells[l]
                .iter()
                .map(|&c| (prep.cells[c].y - self.xi[c]) / self.state.omega[l][prep.window(c)])
                .collect();
            let cur = self.state.psi[l];
            let mut f_cur = psi_target(cur, &ts).0;
            if let Some((mode, h)) = newton_max(|x| psi_target(x, &ts), 0.0) {
                let sd = (-1.0 / h).sqrt();
                let z: f64 = self.rng.sample(StandardNormal);
                let prop = mode + sd * z;
                let f_prop = psi_target(prop, &ts).0;
                let lq = |x: f64| -0.5 * ((x - mode) / sd).powi(2);
                let log_a = f_prop - f_cur + lq(cur) - lq(prop);
                self.stats.psi_indep.1 += 1;
                if self.log_u() < log_a {
                    self.state.psi[l] = prop;
                    f_cur = f_prop;
                    self.stats.psi_indep.0 += 1;
                }
            }
            let cur = self.state.psi[l];
            let z: f64 = self.rng.sample(StandardNormal);
            let prop = cur + self.psi_log_step[l].exp() * z;
            let f_prop = psi_target(prop, &ts).0;
            let accepted = self.log_u() < f_prop - f_cur;
            self.stats.psi_rw.1 += 1;
            if accepted {
                self.state.psi[l] = prop;
                self.stats.psi_rw.0 += 1;
            }
            Self::adapt(&mut self.psi_log_step[l], accepted, adapt_iter);
        }
    }

    fn update_omega(&mut self, adapt_iter: Option<usize>) {
        let prep = self.prep;
        let nw = prep.dims.nw;
        for l in 0..prep.dims.l {
            let psi = self.state.psi[l];
            for w in 0..nw {
                let g = l * nw + w;
                let es: Vec<f64> = prep.group_cells[g].iter().map(|&c| prep.cells[c].y - self.xi[c]).collect();
                let cur = self.state.omega[l][w].ln();
                let mut f_cur = log_omega_target(cur, &es, psi).0;
                if !es.is_empty() {
                    let rms = (es.iter().map(|e| e * e).sum::<f64>() / es.len() as f64).sqrt().max(1e-8);
                    if let Some((mode, h)) = newton_max(|x| log_omega_target(x, &es, psi), rms.ln()) {
                        let sd = (-1.0 / h).sqrt();
                        let z: f64 = self.rng.sample(StandardNormal);
                        let prop = mode + sd * z;
                        let f_prop = log_omega_target(prop, &es, psi).0;
                        let lq = |x: f64| -0.5 * ((x - mode) / sd).powi(2);
                        let log_a = f_prop - f_cur + lq(cur) - lq(prop);
                        self.stats.omega_indep.1 += 1;
                        if self.log_u() < log_a {
                            self.state.omega[l][w] = prop.exp();
                            f_cur = f_prop;
                            self.stats.omega_indep.0 += 1;
                        }
                    }
                }
                let cur = self.state.omega[l][w].ln();
                let z: f64 = self.rng.sample(StandardNormal);
                let prop = cur + self.omega_log_step[g].exp() * z;
                let f_prop = log_omega_target(prop, &es, psi).0;
                let accepted = self.log_u() < f_prop - f_cur;
                self.stats.omega_rw.1 += 1;
                if accepted {
                    self.state.omega[l][w] = prop.exp();
                    self.stats.omega_rw.0 += 1;
                }
                Self::adapt(&mut self.omega_log_step[g], accepted, adapt_iter);
            }
        }
    }
}
