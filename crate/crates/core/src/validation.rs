//! Simulation experiments behind `validate` and the acceptance tests.
//!
//! Every experiment simulates from a known truth, so its outcome can be judged
//! against fixed thresholds. Fits start from perturbed ground truth.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{analytic_covariance, block_kronecker, Cell, CovCase};
use crate::data::LongitudinalDataset;
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::impute::{coverage, fixed_effect_preservation, impute_missing, ols_slope, rubin_pool, CoverageReport, ImputedDatasetSet, PooledEstimate, PreservationTable};
use crate::linalg::inv_wishart_draw;
use crate::ppc::{cross_cohort_ppp, qq_export, residual_pair, variance_ratio, within_subject_ppp, DiscrepancyReport, Pairing, QqRow, VarianceRatioRow};
use crate::rhat::{convergence_report, nested_rhat, ConvergenceReport};
use crate::rng::{derive_seed, stream};
use crate::sampler::{run_sampler, InitStrategy, SamplerConfig};
use crate::simulate::{apply_deletion, desk_profiles, desk_truth, replicate_slots, simulate_dataset, CohortProfile, DeletionRule, GroundTruth, HeldOut, ReplicateSlot};
use crate::skewnormal;
use crate::spec::ModelSpec;
use crate::state::{ParameterState, Variant};

// experiment tags for seed derivation
const TAG_ORACLE: u64 = 101;
const TAG_KRONECKER: u64 = 102;
const TAG_SKEW: u64 = 103;
const TAG_PRIOR: u64 = 105;
const TAG_SIM: u64 = 106;
const TAG_FIT: u64 = 107;
const TAG_PPC: u64 = 108;
const TAG_IMPUTE: u64 = 109;

/// Sizes of the validation experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub seed: u64,
    /// Participants per synthetic cohort.
    pub participants: usize,
    pub superchains: usize,
    pub subchains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub oracle_replicates: usize,
    pub kronecker_trials: usize,
    pub skew_draws: usize,
    /// Minimum pooled draws for the empty-data run.
    pub prior_draws: usize,
    pub ppc_draws: usize,
    pub imputations: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            seed: 20_240_601,
            participants: 150,
            superchains: 8,
            subchains: 2,
            iterations: 160,
            warmup: 80,
            oracle_replicates: 1_000_000,
            kronecker_trials: 1000,
            skew_draws: 100_000,
            prior_draws: 10_000,
            ppc_draws: 200,
            imputations: 128,
        }
    }
}

impl ValidationConfig {
    /// Small sizes for smoke runs; thresholds are not expected to hold.
    pub fn quick(seed: u64) -> Self {
        ValidationConfig {
            seed,
            participants: 25,
            superchains: 2,
            subchains: 2,
            iterations: 24,
            warmup: 12,
            oracle_replicates: 20_000,
            kronecker_trials: 50,
            skew_draws: 10_000,
            prior_draws: 400,
            ppc_draws: 16,
            imputations: 8,
        }
    }

    fn sampler(&self, variant: Variant, tag: u64) -> SamplerConfig {
        SamplerConfig {
            superchains: self.superchains,
            subchains: self.subchains,
            iterations: self.iterations,
            warmup: self.warmup,
            seed: derive_seed(self.seed, &[TAG_FIT, tag]),
            init: InitStrategy::TruthJitter,
            variant,
            ..SamplerConfig::default()
        }
    }
}

/// One acceptance line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub criterion: u8,
    pub name: String,
    pub pass: bool,
    pub detail: String,
    #[serde(skip)]
    pub seconds: f64,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "criterion {:>2} {verdict} {}: {}", self.criterion, self.name, self.detail)
    }
}

/// Generating parameters and cohort layout for the desk-scale experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ModelSpec,
    pub truth: ParameterState,
    pub profiles: Vec<CohortProfile>,
}

impl Scenario {
    pub fn desk(participants: usize) -> Result<Self> {
        let spec = ModelSpec::default();
        let profiles = desk_profiles(participants, spec.n_factors());
        let truth = desk_truth(&spec, profiles.len())?;
        Ok(Scenario { spec, truth, profiles })
    }

    /// Truth with the random-effect levels `variant` lacks removed.
    pub fn truth_for(&self, variant: Variant) -> ParameterState {
        let mut t = self.truth.clone();
        if !variant.has_cohort() {
            t.lambda.clear();
            t.cohort.clear();
        }
        if !variant.has_subject() {
            t.sigma = None;
            t.subject.clear();
        }
        t
    }

    pub fn simulate(&self, variant: Variant, seed: u64) -> Result<(LongitudinalDataset, GroundTruth)> {
        simulate_dataset(&self.profiles, &self.spec, &self.truth_for(variant), seed)
    }
}

/// A fit of simulated data together with what generated it.
#[derive(Debug, Clone)]
pub struct Fit {
    pub data: LongitudinalDataset,
    pub truth: GroundTruth,
    pub draws: PosteriorDraws,
    pub convergence: ConvergenceReport,
    pub seconds: f64,
}

pub fn fit(spec: &ModelSpec, data: LongitudinalDataset, truth: GroundTruth, config: &SamplerConfig) -> Result<Fit> {
    let start = Instant::now();
    let draws = run_sampler(&data, spec, config, Some(&truth.state))?;
    let convergence = convergence_report(&draws)?;
    Ok(Fit { data, truth, draws, convergence, seconds: start.elapsed().as_secs_f64() })
}

// ---------------------------------------------------------------- criterion 1

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub case: String,
    pub empirical: f64,
    pub analytic: f64,
    pub mc_se: f64,
}

impl OracleRow {
    pub fn z(&self) -> f64 {
        (self.empirical - self.analytic) / self.mc_se
    }
}

/// Desk truth with a random cohort covariance per factor, large enough for
/// the cohort cases to be visible.
pub fn oracle_truth(spec: &ModelSpec, k: usize, seed: u64) -> Result<ParameterState> {
    let mut t = desk_truth(spec, k)?;
    let mut rng = stream(seed, &[TAG_ORACLE]);
    for lam in t.lambda.iter_mut() {
        *lam = inv_wishart_draw((k + 4) as f64, &(DMatrix::identity(k, k) * 0.5), &mut rng)?;
    }
    Ok(t)
}

/// Slots for the six cases: two subjects in cohort 0, one in cohort 1, two
/// factors each, at ages in different windows.
pub fn oracle_slots(spec: &ModelSpec) -> Vec<ReplicateSlot> {
    let mut x = vec![0.0; spec.n_design()];
    x[0] = 1.0;
    let slot = |subject, cohort, factor, age| ReplicateSlot { subject, cohort, factor, age, x: x.clone() };
    vec![slot(0, 0, 0, 35.0), slot(0, 0, 1, 35.0), slot(1, 0, 0, 52.0), slot(1, 0, 1, 52.0), slot(2, 1, 0, 61.0), slot(2, 1, 1, 61.0)]
}

/// `(case, slot a, slot b)` for [`oracle_slots`].
pub const ORACLE_PAIRS: [(CovCase, usize, usize); 6] = [
    (CovCase::SameSubjectSameFactor, 0, 0),
    (CovCase::SameSubjectCrossFactor, 0, 1),
    (CovCase::SameCohortCrossSubject, 0, 2),
    (CovCase::SameCohortCrossSubjectCrossFactor, 0, 3),
    (CovCase::CrossCohortSameFactor, 0, 4),
    (CovCase::CrossCohortCrossFactor, 0, 5),
];

/// Empirical covariance with the standard error of the product mean.
pub fn mc_covariance(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let c = prods.iter().sum::<f64>() / n;
    let v = prods.iter().map(|p| (p - c).powi(2)).sum::<f64>() / (n - 1.0);
    (c, (v / n).sqrt())
}

/// Replicate draws of every oracle slot, `out[slot][replicate]`.
pub fn oracle_replicates(truth: &ParameterState, spec: &ModelSpec, k: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let slots = oracle_slots(spec);
    let mut rng = stream(seed, &[TAG_ORACLE, 1]);
    let mut out = vec![Vec::with_capacity(n); slots.len()];
    for _ in 0..n {
        for (col, v) in out.iter_mut().zip(replicate_slots(truth, spec, k, &slots, &mut rng)?) {
            col.push(v);
        }
    }
    Ok(out)
}

pub fn covariance_oracle(cfg: &ValidationConfig) -> Result<(Vec<OracleRow>, Outcome)> {
    let start = Instant::now();
    let spec = ModelSpec::default();
    let k = 3;
    let truth = oracle_truth(&spec, k, cfg.seed)?;
    let values = oracle_replicates(&truth, &spec, k, cfg.oracle_replicates, cfg.seed)?;
    let slots = oracle_slots(&spec);
    let cell = |s: &ReplicateSlot| Cell { factor: s.factor, cohort: s.cohort, age: s.age };
    let rows = ORACLE_PAIRS
        .iter()
        .map(|&(case, a, b)| {
            let (empirical, mc_se) = mc_covariance(&values[a], &values[b]);
            let analytic = analytic_covariance(case, &truth, &spec, cell(&slots[a]), cell(&slots[b]))?;
            Ok(OracleRow { case: case.name().into(), empirical, analytic, mc_se })
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = rows.iter().map(|r| r.z().abs()).fold(0.0, f64::max);
    let outcome = Outcome {
        criterion: 1,
        name: "covariance oracle".into(),
        pass: worst <= 3.0,
        detail: format!("{} replicates, largest |z| = {worst:.2} (limit 3)", cfg.oracle_replicates),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((rows, outcome))
}

// ---------------------------------------------------------------- criterion 2

fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

/// Largest difference in ulps between `Σ` and `γ_ℓℓ'·δ_pp'` over random inputs.
pub fn kronecker_identity(cfg: &ValidationConfig) -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = stream(cfg.seed, &[TAG_KRONECKER]);
    let mut worst = 0u64;
    for t in 0..cfg.kronecker_trials {
        let l = 1 + t % 5;
        let delta = random_spd(2 * l, &mut rng);
        let gamma = random_spd(l, &mut rng);
        let s = block_kronecker(&delta, &gamma)?;
        for r in 0..2 * l {
            for c in 0..2 * l {
                let expected = gamma[(r / 2, c / 2)] * delta[(r, c)];
                worst = worst.max(ulps(s[(r, c)], expected));
            }
        }
    }
    Ok(Outcome {
        criterion: 2,
        name: "block Kronecker identity".into(),
        pass: worst <= 1,
        detail: format!("{} trials, L = 1..5, max deviation {worst} ulp", cfg.kronecker_trials),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 { i64::MIN - bits } else { bits }
    };
    key(a).abs_diff(key(b))
}

// ---------------------------------------------------------------- criterion 3

/// Two-sided Kolmogorov–Smirnov statistic of `xs` against `cdf`.
pub fn ks_statistic(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of the KS statistic `d` for sample size `n`.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn skew_normal_checks(cfg: &ValidationConfig) -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = stream(cfg.seed, &[TAG_SKEW]);
    let n = cfg.skew_draws;
    let normal: Vec<f64> = (0..n).map(|_| skewnormal::draw(1.0, 0.0, &mut rng)).collect::<Result<_>>()?;
    let ks = ks_statistic(&normal, std_normal_cdf);
    let skewed: Vec<f64> = (0..n).map(|_| skewnormal::draw(1.0, 1.0, &mut rng)).collect::<Result<_>>()?;
    let mean = skewed.iter().sum::<f64>() / n as f64;
    let sd = (skewed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let z = (mean - std::f64::consts::PI.sqrt().recip()) / (sd / (n as f64).sqrt());
    let mut worst_mass = 0.0f64;
    for (omega, psi) in [(1.0, 0.0), (1.0, 1.0), (2.0, -3.0), (0.5, 8.0)] {
        let mass = integrate_density(omega, psi)?;
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }
    Ok(Outcome {
        criterion: 3,
        name: "skew-normal law".into(),
        pass: ks < 0.01 && z.abs() <= 3.0 && worst_mass <= 1e-4,
        detail: format!("KS {ks:.4} (limit 0.01), mean z {z:.2} (limit 3), |mass - 1| {worst_mass:.1e} (limit 1e-4)"),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Composite Simpson rule over ±40 scale units.
fn integrate_density(omega: f64, psi: f64) -> Result<f64> {
    let n = 20_000;
    let (a, b) = (-40.0 * omega, 40.0 * omega);
    let h = (b - a) / n as f64;
    let mut s = 0.0;
    for i in 0..=n {
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * skewnormal::log_density(a + i as f64 * h, omega, psi)?.exp();
    }
    Ok(s * h / 3.0)
}

// ---------------------------------------------------------------- criterion 4

pub fn nested_rhat_checks() -> Result<Outcome> {
    let start = Instant::now();
    let hand = vec![vec![vec![0.0, 0.0], vec![2.0, 2.0]], vec![vec![4.0, 4.0], vec![6.0, 6.0]]];
    let r = nested_rhat(&hand)?;
    let same = vec![vec![vec![0.3, 1.7, 0.9], vec![2.2, 0.1, 1.4]]; 2];
    let one = nested_rhat(&same)?;
    Ok(Outcome {
        criterion: 4,
        name: "nested R-hat".into(),
        pass: (r - 5f64.sqrt()).abs() <= 1e-12 && one == 1.0,
        detail: format!("hand example {r:.15}, identical superchains {one}"),
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------- criterion 5

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriorCheck {
    pub path: String,
    pub draws: usize,
    pub ks: f64,
    pub p_value: f64,
}

/// Sampler run on a dataset without records; ψ should follow its Normal(0, 10) prior.
pub fn prior_recovery(cfg: &ValidationConfig) -> Result<(Vec<PriorCheck>, Outcome)> {
    let start = Instant::now();
    let spec = ModelSpec::default();
    let data = LongitudinalDataset::empty(spec.n_factors(), vec![1, 2, 3]);
    let chains = cfg.superchains * cfg.subchains;
    let warmup = cfg.warmup;
    let iterations = warmup + cfg.prior_draws.div_ceil(chains);
    let config = SamplerConfig {
        superchains: cfg.superchains,
        subchains: cfg.subchains,
        iterations,
        warmup,
        seed: derive_seed(cfg.seed, &[TAG_PRIOR]),
        init: InitStrategy::PriorDraw,
        ..SamplerConfig::default()
    };
    let draws = run_sampler(&data, &spec, &config, None)?;
    let sd = crate::likelihood::PSI_SD;
    let checks: Vec<PriorCheck> = (1..=spec.n_factors())
        .map(|l| {
            let path = format!("psi.rf{l}");
            let idx = draws.path_index(&path).ok_or_else(|| Error::Usage(format!("missing path {path}")))?;
            let xs = draws.pooled(idx);
            let ks = ks_statistic(&xs, |x| std_normal_cdf(x / sd));
            Ok(PriorCheck { path, draws: xs.len(), ks, p_value: ks_p_value(ks, xs.len()) })
        })
        .collect::<Result<_>>()?;
    let min_p = checks.iter().map(|c| c.p_value).fold(1.0, f64::min);
    let n = checks.first().map_or(0, |c| c.draws);
    Ok((
        checks,
        Outcome {
            criterion: 5,
            name: "prior recovery".into(),
            pass: min_p > 0.01 && n >= cfg.prior_draws,
            detail: format!("{n} pooled draws per factor, smallest KS p = {min_p:.3} (limit 0.01)"),
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

// ---------------------------------------------------------------- criterion 6

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recovery {
    pub covered: usize,
    pub total: usize,
    pub rhat_failures: usize,
    pub rhat_total: usize,
}

/// Equal-tailed interval from linear-interpolation quantiles.
pub fn credible_interval(xs: &[f64], level: f64) -> (f64, f64) {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (crate::ppc::quantile_sorted(&v, tail), crate::ppc::quantile_sorted(&v, 1.0 - tail))
}

/// Coverage of the generating fixed effects by `level` credible intervals.
pub fn recovery(fit: &Fit, level: f64) -> Recovery {
    let mut covered = 0;
    let mut total = 0;
    let na = fit.truth.state.alpha.first().map_or(0, Vec::len);
    for (l, alpha) in fit.truth.state.alpha.iter().enumerate() {
        for (i, &t) in alpha.iter().enumerate() {
            let (lo, hi) = credible_interval(&fit.draws.pooled(l * na + i), level);
            covered += (lo <= t && t <= hi) as usize;
            total += 1;
        }
    }
    Recovery { covered, total, rhat_failures: fit.convergence.failures, rhat_total: fit.convergence.rows.len() }
}

pub fn recovery_outcome(r: &Recovery, seconds: f64) -> Outcome {
    let cov = r.covered as f64 / r.total.max(1) as f64;
    let ok = 1.0 - r.rhat_failures as f64 / r.rhat_total.max(1) as f64;
    Outcome {
        criterion: 6,
        name: "parameter recovery".into(),
        pass: cov >= 0.8 && ok >= 0.95,
        detail: format!(
            "90% intervals cover {}/{} fixed effects ({:.1}%, limit 80%), R-hat < 1.1 for {:.2}% of {} parameters (limit 95%)",
            r.covered,
            r.total,
            100.0 * cov,
            100.0 * ok,
            r.rhat_total
        ),
        seconds,
    }
}

// ---------------------------------------------------------------- criterion 7

#[derive(Debug, Clone)]
pub struct PpcCalibration {
    pub same_age: DiscrepancyReport,
    pub different_ages: DiscrepancyReport,
    pub cross_cohort: DiscrepancyReport,
    pub variance_ratios: Vec<VarianceRatioRow>,
    pub qq: Vec<QqRow>,
}

impl PpcCalibration {
    pub fn ppps(&self) -> Vec<f64> {
        [&self.same_age, &self.different_ages, &self.cross_cohort]
            .iter()
            .flat_map(|r| r.groups.iter().map(|g| g.ppp))
            .collect()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.variance_ratios.iter().filter_map(|r| r.ratio).collect()
    }

    pub fn outcome(&self, seconds: f64) -> Outcome {
        let ppps = self.ppps();
        let ratios = self.ratios();
        let ppp_in = ppps.iter().filter(|p| (0.05..=0.95).contains(*p)).count();
        let ratio_in = ratios.iter().filter(|r| (0.8..=1.25).contains(*r)).count();
        let (pmin, pmax) = min_max(&ppps);
        let (rmin, rmax) = min_max(&ratios);
        Outcome {
            criterion: 7,
            name: "PPC calibration".into(),
            pass: !ppps.is_empty() && !ratios.is_empty() && ppp_in == ppps.len() && ratio_in == ratios.len(),
            detail: format!(
                "{ppp_in}/{} PPPs in [0.05, 0.95] (range {pmin:.3}..{pmax:.3}), {ratio_in}/{} variance ratios in [0.8, 1.25] (range {rmin:.3}..{rmax:.3})",
                ppps.len(),
                ratios.len()
            ),
            seconds,
        }
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

/// Variance ratios and QQ from the full fit; within-subject PPPs from a fit
/// without cohort effects; cross-cohort PPPs from a fit without subject effects.
pub fn ppc_calibration(spec: &ModelSpec, full: &Fit, no_cohort: &Fit, no_participant: &Fit, cfg: &ValidationConfig) -> Result<PpcCalibration> {
    let seed = derive_seed(cfg.seed, &[TAG_PPC]);
    let l = spec.n_factors();
    let stratum = crate::ppc::stratum_label(spec);
    let pair = |f: &Fit, variant| {
        let which = f.draws.equally_spaced(cfg.ppc_draws.min(f.draws.n_post()))?;
        residual_pair(&f.draws, &f.data, spec, variant, &which, seed)
    };
    let (obs, rep) = pair(full, Variant::Full)?;
    let variance_ratios = variance_ratio(&obs, &rep, l, spec.n_windows())?;
    let qq = qq_export(&obs, &rep, l, &stratum)?;
    let (obs, rep) = pair(no_cohort, Variant::NoCohort)?;
    let same_age = within_subject_ppp(&obs, &rep, l, Pairing::SameAge, &stratum)?;
    let different_ages = within_subject_ppp(&obs, &rep, l, Pairing::DifferentAges, &stratum)?;
    let (obs, rep) = pair(no_participant, Variant::NoParticipant)?;
    let cross_cohort = cross_cohort_ppp(&obs, &rep, l, spec.n_windows(), &no_participant.data.cohort_ids, &stratum)?;
    Ok(PpcCalibration { same_age, different_ages, cross_cohort, variance_ratios, qq })
}

// ---------------------------------------------------------------- criteria 8 and 9

/// Factor masked below age 40 in the full-lifespan cohort.
pub const MASK_FACTOR: usize = 0;
pub const MASK_AGE: f64 = 40.0;
/// Factor deleted from the middle-aged cohort.
pub const DELETE_FACTOR: usize = 1;

pub fn lifespan_cohort(sc: &Scenario) -> i64 {
    sc.profiles.iter().max_by(|a, b| a.follow_up_years.total_cmp(&b.follow_up_years)).map_or(0, |p| p.cohort_id)
}

pub fn middle_cohort(sc: &Scenario) -> i64 {
    sc.profiles.get(1).map_or(0, |p| p.cohort_id)
}

#[derive(Debug, Clone)]
pub struct Masking {
    pub fit: Fit,
    pub held: Vec<HeldOut>,
    pub imputed: ImputedDatasetSet,
    pub coverage: CoverageReport,
    pub pooled: PooledEstimate,
    /// `(slope, variance)` on the data before masking.
    pub complete: (f64, f64),
    pub estimates: Vec<(f64, f64)>,
}

/// Imputed copy with cells that were missing before masking emptied again,
/// so the estimator sees the same cells as on the complete data.
pub fn restrict_to(imputed: &LongitudinalDataset, complete: &LongitudinalDataset) -> LongitudinalDataset {
    let mut out = imputed.clone();
    for (r, c) in out.records.iter_mut().zip(&complete.records) {
        for (v, o) in r.values.iter_mut().zip(&c.values) {
            if o.is_none() {
                *v = None;
            }
        }
    }
    out
}

pub fn masking_experiment(sc: &Scenario, full: &Fit, cfg: &ValidationConfig) -> Result<Masking> {
    let rule = DeletionRule { factor: MASK_FACTOR, cohort: Some(lifespan_cohort(sc)), age_below: Some(MASK_AGE) };
    let (masked, held) = apply_deletion(&full.data, &rule)?;
    let f = fit(&sc.spec, masked, full.truth.clone(), &cfg.sampler(Variant::Full, 2))?;
    let set = impute_missing(&f.draws, &f.data, &sc.spec, cfg.imputations, derive_seed(cfg.seed, &[TAG_IMPUTE]))?;
    let coverage = coverage(&set, &held, 0.95)?;
    let estimates = set
        .datasets
        .iter()
        .map(|d| ols_slope(&restrict_to(d, &full.data), MASK_FACTOR))
        .collect::<Result<Vec<_>>>()?;
    let pooled = rubin_pool(&estimates)?;
    let complete = ols_slope(&full.data, MASK_FACTOR)?;
    Ok(Masking { fit: f, held, imputed: set, coverage, pooled, complete, estimates })
}

pub fn masking_outcome(m: &Masking, seconds: f64) -> Outcome {
    let rate = m.coverage.rate;
    Outcome {
        criterion: 8,
        name: "imputation coverage".into(),
        pass: (rate - 0.95).abs() <= 0.03,
        detail: format!("{}/{} held-out cells inside 95% predictive intervals ({:.2}%, limit 92..98%)", m.coverage.covered, m.coverage.cells, 100.0 * rate),
        seconds,
    }
}

pub fn rubin_outcome(m: &Masking, seconds: f64) -> Result<Outcome> {
    let hand = rubin_pool(&[(1.0, 0.5), (2.0, 0.5), (3.0, 0.5)])?;
    let pooled_sd = m.pooled.total.sqrt();
    let complete_sd = m.complete.1.sqrt();
    let z = (m.pooled.point - m.complete.0).abs() / pooled_sd;
    Ok(Outcome {
        criterion: 9,
        name: "Rubin's rules".into(),
        pass: (hand.total - 11.0 / 6.0).abs() <= 1e-15 && pooled_sd > complete_sd && z < 0.5,
        detail: format!(
            "hand example T = {}, pooled SD {pooled_sd:.3e} vs complete {complete_sd:.3e}, |difference| = {z:.3} pooled SE (limit 0.5)",
            hand.total
        ),
        seconds,
    })
}

#[derive(Debug, Clone)]
pub struct Deletion {
    pub fit: Fit,
    pub table: PreservationTable,
}

impl Deletion {
    pub fn share_in_band(&self) -> f64 {
        let p = self.table.probabilities();
        p.iter().filter(|v| (0.2..=0.8).contains(*v)).count() as f64 / p.len().max(1) as f64
    }
}

pub fn deletion_experiment(sc: &Scenario, full: &Fit, cfg: &ValidationConfig) -> Result<Deletion> {
    let rule = DeletionRule { factor: DELETE_FACTOR, cohort: Some(middle_cohort(sc)), age_below: None };
    let (reduced, _) = apply_deletion(&full.data, &rule)?;
    let f = fit(&sc.spec, reduced, full.truth.clone(), &cfg.sampler(Variant::Full, 3))?;
    let table = fixed_effect_preservation(&full.draws, &f.draws, &sc.spec, DELETE_FACTOR)?;
    Ok(Deletion { fit: f, table })
}

pub fn deletion_outcome(d: &Deletion, seconds: f64) -> Outcome {
    let share = d.share_in_band();
    let n = d.table.probabilities().len();
    Outcome {
        criterion: 8,
        name: "fixed-effect preservation".into(),
        pass: share >= 0.9,
        detail: format!("{:.1}% of {n} probabilities in [0.2, 0.8] (limit 90%)", 100.0 * share),
        seconds,
    }
}

// ---------------------------------------------------------------- suite

/// The desk-scale fits shared by criteria 6 to 9.
#[derive(Debug, Clone)]
pub struct DeskFits {
    pub scenario: Scenario,
    pub full: Fit,
    pub no_cohort: Fit,
    pub no_participant: Fit,
}

pub fn desk_fit(sc: &Scenario, variant: Variant, cfg: &ValidationConfig, tag: u64) -> Result<Fit> {
    let (data, truth) = sc.simulate(variant, derive_seed(cfg.seed, &[TAG_SIM, tag]))?;
    fit(&sc.spec, data, truth, &cfg.sampler(variant, tag))
}

pub fn desk_fits(cfg: &ValidationConfig) -> Result<DeskFits> {
    let scenario = Scenario::desk(cfg.participants)?;
    let full = desk_fit(&scenario, Variant::Full, cfg, 1)?;
    let no_cohort = desk_fit(&scenario, Variant::NoCohort, cfg, 4)?;
    let no_participant = desk_fit(&scenario, Variant::NoParticipant, cfg, 5)?;
    Ok(DeskFits { scenario, full, no_cohort, no_participant })
}

/// Runs every experiment, writing reports into `out` when given.
pub fn run_suite(cfg: &ValidationConfig, out: Option<&Path>) -> Result<Vec<Outcome>> {
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        log::info!("{o}");
        outcomes.push(o);
    };
    let (oracle, o) = covariance_oracle(cfg)?;
    report(o);
    report(kronecker_identity(cfg)?);
    report(skew_normal_checks(cfg)?);
    report(nested_rhat_checks()?);
    let (prior, o) = prior_recovery(cfg)?;
    report(o);

    let fits = desk_fits(cfg)?;
    let rec = recovery(&fits.full, 0.9);
    report(recovery_outcome(&rec, fits.full.seconds));
    let start = Instant::now();
    let ppc = ppc_calibration(&fits.scenario.spec, &fits.full, &fits.no_cohort, &fits.no_participant, cfg)?;
    report(ppc.outcome(start.elapsed().as_secs_f64() + fits.no_cohort.seconds + fits.no_participant.seconds));
    let start = Instant::now();
    let masking = masking_experiment(&fits.scenario, &fits.full, cfg)?;
    let secs = start.elapsed().as_secs_f64();
    report(masking_outcome(&masking, secs));
    let start = Instant::now();
    let deletion = deletion_experiment(&fits.scenario, &fits.full, cfg)?;
    report(deletion_outcome(&deletion, start.elapsed().as_secs_f64()));
    report(rubin_outcome(&masking, secs)?);

    if let Some(dir) = out {
        write_reports(dir, &fits, &oracle, &prior, &ppc, &masking, &deletion, &outcomes)?;
    }
    Ok(outcomes)
}

#[allow(clippy::too_many_arguments)]
fn write_reports(
    dir: &Path,
    fits: &DeskFits,
    oracle: &[OracleRow],
    prior: &[PriorCheck],
    ppc: &PpcCalibration,
    masking: &Masking,
    deletion: &Deletion,
    outcomes: &[Outcome],
) -> Result<()> {
    use std::fs::File;
    use std::io::BufWriter;
    std::fs::create_dir_all(dir)?;
    let spec = &fits.scenario.spec;
    let file = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
    fits.full.convergence.write_csv(file("rhat_full.csv")?)?;
    crate::ppc::write_variance_ratios(&ppc.variance_ratios, spec, file("variance_ratios.csv")?)?;
    crate::ppc::write_qq(&ppc.qq, spec, file("qq.csv")?)?;
    ppc.same_age.write_csv(spec, file("ppp_same_age.csv")?)?;
    ppc.different_ages.write_csv(spec, file("ppp_different_ages.csv")?)?;
    ppc.cross_cohort.write_csv(spec, file("ppp_cross_cohort.csv")?)?;
    deletion.table.write_csv(spec, file("preservation.csv")?)?;
    crate::io::write_json(&dir.join("oracle.json"), &oracle)?;
    crate::io::write_json(&dir.join("prior.json"), &prior)?;
    crate::io::write_json(&dir.join("imputation.json"), &(&masking.coverage, &masking.pooled, masking.complete))?;
    crate::io::write_json(&dir.join("outcomes.json"), &outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ks_reference_values() {
        // Kolmogorov distribution: P(K > 1.36) ≈ 0.049
        let n = 1_000_000;
        let p = ks_p_value(1.358 / (n as f64).sqrt(), n);
        assert!((p - 0.05).abs() < 1e-3, "{p}");
        assert_eq!(ks_p_value(0.0, 10), 1.0);
        let grid: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_statistic(&grid, |x| x) <= 0.0005 + 1e-12);
    }

    #[test]
    fn ulps_counts_representable_steps() {
        assert_eq!(ulps(1.0, 1.0), 0);
        assert_eq!(ulps(1.0, f64::from_bits(1.0f64.to_bits() + 1)), 1);
        assert_eq!(ulps(0.0, -0.0), 0);
        assert_eq!(ulps(f64::from_bits(1), -f64::from_bits(1)), 2);
    }

    #[test]
    fn restrict_to_keeps_complete_cells_only() {
        let sc = Scenario::desk(10).unwrap();
        let (data, _) = sc.simulate(Variant::Full, 1).unwrap();
        let mut filled = data.clone();
        for r in filled.records.iter_mut() {
            for v in r.values.iter_mut() {
                v.get_or_insert(0.0);
            }
        }
        assert_eq!(restrict_to(&filled, &data), data);
    }

    #[test]
    fn truth_for_drops_levels() {
        let sc = Scenario::desk(5).unwrap();
        assert_eq!(sc.truth_for(Variant::NoCohort).variant(), Variant::NoCohort);
        assert_eq!(sc.truth_for(Variant::NoParticipant).variant(), Variant::NoParticipant);
        assert_eq!(sc.truth_for(Variant::Full), sc.truth);
    }

    proptest! {
        #[test]
        fn mc_covariance_matches_two_pass(xs in proptest::collection::vec(-10.0f64..10.0, 3..50), shift in -5.0f64..5.0) {
            let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + shift).collect();
            let (c, se) = mc_covariance(&xs, &ys);
            let (v, _) = mc_covariance(&xs, &xs);
            prop_assert!((c - 2.0 * v).abs() <= 1e-9 * (1.0 + v.abs()));
            prop_assert!(se >= 0.0);
        }
    }
}
