//! One full parameter draw and its canonical dotted parameter paths.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::spec::{FixedLayout, ModelSpec};

/// Which random effects the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoCohort,
    NoParticipant,
}

impl Variant {
    pub fn has_cohort(self) -> bool {
        self != Variant::NoCohort
    }
    pub fn has_subject(self) -> bool {
        self != Variant::NoParticipant
    }
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCohort => "no-cohort",
            Variant::NoParticipant => "no-participant",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-cohort" => Ok(Variant::NoCohort),
            "no-participant" => Ok(Variant::NoParticipant),
            other => Err(Error::Usage(format!(
                "unknown variant '{other}' (expected full, no-cohort or no-participant)"
            ))),
        }
    }
}

/// Dimensions shared by every draw of one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Dims {
    /// Risk factors L.
    pub l: usize,
    /// Cohorts K.
    pub k: usize,
    /// Age windows P.
    pub nw: usize,
    /// Basis length P + 2.
    pub nb: usize,
    pub layout: FixedLayout,
    pub n_part: usize,
}

impl Dims {
    pub fn new(spec: &ModelSpec, data: &LongitudinalDataset) -> Self {
        Dims {
            l: spec.n_factors(),
            k: data.n_cohorts(),
            nw: spec.n_windows(),
            nb: spec.basis_len(),
            layout: spec.fixed_layout(),
            n_part: data.n_participants(),
        }
    }

    pub fn cohort_idx(&self, l: usize, k: usize, p: usize) -> usize {
        (l * self.k + k) * self.nb + p
    }

    pub fn subject_idx(&self, i: usize, l: usize, p: usize) -> usize {
        i * 2 * self.l + 2 * l + p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    /// Per factor, free fixed effects in `FixedLayout` order.
    pub alpha: Vec<Vec<f64>>,
    /// `b_iℓ^(p)` at `Dims::subject_idx`; empty when not carried.
    pub subject: Vec<f64>,
    /// `b_ℓk^(p)` at `Dims::cohort_idx`; empty without cohort effects.
    pub cohort: Vec<f64>,
    /// 2L×2L subject-effect covariance.
    pub sigma: Option<DMatrix<f64>>,
    /// Per factor K×K cohort-effect covariance.
    pub lambda: Vec<DMatrix<f64>>,
    /// `omega[ℓ][window]`.
    pub omega: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
}

impl ParameterState {
    /// Neutral state: zero effects, identity covariances, unit scales.
    pub fn neutral(dims: &Dims, variant: Variant) -> Self {
        ParameterState {
            alpha: vec![vec![0.0; dims.layout.len()]; dims.l],
            subject: if variant.has_subject() { vec![0.0; dims.n_part * 2 * dims.l] } else { Vec::new() },
            cohort: if variant.has_cohort() { vec![0.0; dims.l * dims.k * dims.nb] } else { Vec::new() },
            sigma: variant.has_subject().then(|| DMatrix::identity(2 * dims.l, 2 * dims.l)),
            lambda: if variant.has_cohort() { vec![DMatrix::identity(dims.k, dims.k); dims.l] } else { Vec::new() },
            omega: vec![vec![1.0; dims.nw]; dims.l],
            psi: vec![0.0; dims.l],
        }
    }

    pub fn variant(&self) -> Variant {
        match (self.sigma.is_some(), !self.lambda.is_empty()) {
            (true, true) => Variant::Full,
            (true, false) => Variant::NoCohort,
            (false, _) => Variant::NoParticipant,
        }
    }

    pub fn cohort_effect(&self, dims: &Dims, l: usize, k: usize, p: usize) -> f64 {
        if self.cohort.is_empty() {
            0.0
        } else {
            self.cohort[dims.cohort_idx(l, k, p)]
        }
    }

    pub fn subject_effect(&self, dims: &Dims, i: usize, l: usize, p: usize) -> f64 {
        if self.subject.is_empty() {
            0.0
        } else {
            self.subject[dims.subject_idx(i, l, p)]
        }
    }

    /// Slope vector `β_ℓk(i)` for a participant with design row `x` in cohort `k`.
    pub fn beta(&self, dims: &Dims, l: usize, i: usize, x: &[f64], k: usize) -> Vec<f64> {
        let mut b = crate::basis::fixed_slopes(x, &self.alpha[l], &dims.layout)
            .expect("state conforms to its dimensions");
        for (p, v) in b.iter_mut().enumerate() {
            *v += self.cohort_effect(dims, l, k, p);
        }
        b[0] += self.subject_effect(dims, i, l, 0);
        b[1] += self.subject_effect(dims, i, l, 1);
        b
    }

    /// Checks positivity and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.sigma {
            if Cholesky::new(s.clone()).is_none() {
                return Err(Error::ModelConfig("sigma is not positive definite".into()));
            }
        }
        for (l, lam) in self.lambda.iter().enumerate() {
            if Cholesky::new(lam.clone()).is_none() {
                return Err(Error::ModelConfig(format!("lambda for factor {} is not positive definite", l + 1)));
            }
        }
        if self.omega.iter().flatten().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::ModelConfig("omega must be positive and finite".into()));
        }
        Ok(())
    }

    /// Scalars in the order of [`core_paths`].
    pub fn flatten_core(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.alpha.iter().flatten().copied().collect();
        v.extend(&self.cohort);
        if let Some(s) = &self.sigma {
            for r in 0..s.nrows() {
                for c in r..s.ncols() {
                    v.push(s[(r, c)]);
                }
            }
        }
        for lam in &self.lambda {
            for r in 0..lam.nrows() {
                for c in r..lam.ncols() {
                    v.push(lam[(r, c)]);
                }
            }
        }
        v.extend(self.omega.iter().flatten());
        v.extend(&self.psi);
        v
    }

    /// Inverse of [`ParameterState::flatten_core`]; `subject` may be empty.
    pub fn from_flat(dims: &Dims, variant: Variant, core: &[f64], subject: &[f64]) -> Result<Self> {
        let expected = core_len(dims, variant);
        if core.len() != expected {
            return Err(Error::Usage(format!("draw has {} core values, expected {expected}", core.len())));
        }
        let mut it = core.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let alpha = (0..dims.l).map(|_| take(dims.layout.len())).collect();
        let cohort = if variant.has_cohort() { take(dims.l * dims.k * dims.nb) } else { Vec::new() };
        let sym = |vals: Vec<f64>, n: usize| {
            let mut m = DMatrix::zeros(n, n);
            let mut q = vals.into_iter();
            for r in 0..n {
                for c in r..n {
                    let x = q.next().unwrap_or(f64::NAN);
                    m[(r, c)] = x;
                    m[(c, r)] = x;
                }
            }
            m
        };
        let n2 = 2 * dims.l;
        let sigma = variant.has_subject().then(|| sym(take(n2 * (n2 + 1) / 2), n2));
        let lambda = if variant.has_cohort() {
            (0..dims.l).map(|_| sym(take(dims.k * (dims.k + 1) / 2), dims.k)).collect()
        } else {
            Vec::new()
        };
        let omega = (0..dims.l).map(|_| take(dims.nw)).collect();
        let psi = take(dims.l);
        Ok(ParameterState { alpha, subject: subject.to_vec(), cohort, sigma, lambda, omega, psi })
    }
}

pub fn core_len(dims: &Dims, variant: Variant) -> usize {
    let n2 = 2 * dims.l;
    dims.l * dims.layout.len()
        + if variant.has_cohort() { dims.l * dims.k * dims.nb + dims.l * dims.k * (dims.k + 1) / 2 } else { 0 }
        + if variant.has_subject() { n2 * (n2 + 1) / 2 } else { 0 }
        + dims.l * dims.nw
        + dims.l
}

fn coef_label(p: usize) -> String {
    match p {
        0 => "intercept".into(),
        1 => "age".into(),
        w => format!("w{}", w - 1),
    }
}

/// Canonical dotted names of the core scalars.
pub fn core_paths(spec: &ModelSpec, dims: &Dims, cohort_ids: &[i64], variant: Variant) -> Vec<String> {
    let names = spec.design_names();
    let mut out = Vec::new();
    for l in 0..dims.l {
        for idx in 0..dims.layout.len() {
            let (p, c) = dims.layout.coordinate(idx);
            out.push(format!("alpha.rf{}.{}.{}", l + 1, coef_label(p), names[c]));
        }
    }
    if variant.has_cohort() {
        for l in 0..dims.l {
            for cid in cohort_ids.iter().take(dims.k) {
                for p in 0..dims.nb {
                    out.push(format!("b_cohort.rf{}.c{}.{}", l + 1, cid, coef_label(p)));
                }
            }
        }
    }
    if variant.has_subject() {
        let n2 = 2 * dims.l;
        for r in 0..n2 {
            for c in r..n2 {
                out.push(format!("sigma.{r}.{c}"));
            }
        }
    }
    if variant.has_cohort() {
        for l in 0..dims.l {
            for r in 0..dims.k {
                for c in r..dims.k {
                    out.push(format!("lambda.rf{}.{}.{}", l + 1, r, c));
                }
            }
        }
    }
    for l in 0..dims.l {
        for w in 0..dims.nw {
            out.push(format!("omega.rf{}.w{}", l + 1, w + 1));
        }
    }
    for l in 0..dims.l {
        out.push(format!("psi.rf{}", l + 1));
    }
    out
}

/// Names of the subject-effect scalars, in `Dims::subject_idx` order.
pub fn subject_paths(dims: &Dims, data: &LongitudinalDataset) -> Vec<String> {
    let mut out = Vec::with_capacity(dims.n_part * 2 * dims.l);
    for p in &data.participants {
        let cid = data.cohort_ids[p.cohort];
        for l in 0..dims.l {
            for q in 0..2 {
                out.push(format!(
                    "b_subject.c{}.{}.rf{}.{}",
                    cid,
                    p.id,
                    l + 1,
                    if q == 0 { "intercept" } else { "age" }
                ));
            }
        }
    }
    out
}
