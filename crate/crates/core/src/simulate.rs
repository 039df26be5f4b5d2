//! Synthetic multi-cohort data from known parameters, plus deletion experiments.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{block_kronecker, sample_cohort_effects, sample_subject_effects};
use crate::data::{LongitudinalDataset, RawRow};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng, STREAM_SIMULATE};
use crate::skewnormal;
use crate::spec::ModelSpec;
use crate::state::{Dims, ParameterState, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateMix {
    pub race_black: f64,
    /// Less than high school, high school, more than high school.
    pub education: [f64; 3],
    pub female: f64,
}

/// Factor unobserved below an age, or entirely when `below_age` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockRule {
    /// 0-based factor index.
    pub factor: usize,
    #[serde(default)]
    pub below_age: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingnessPlan {
    /// Per factor probability that a value is missing at an exam.
    pub per_exam: Vec<f64>,
    #[serde(default)]
    pub blocks: Vec<BlockRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortProfile {
    pub name: String,
    pub cohort_id: i64,
    pub enrollment_age: (f64, f64),
    /// Calendar years of enrollment; birth year is enrollment year minus age.
    pub enrollment_year: (i32, i32),
    pub follow_up_years: f64,
    pub exam_spacing_years: f64,
    pub participants: usize,
    pub covariate_mix: CovariateMix,
    pub missingness: MissingnessPlan,
}

impl CohortProfile {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let p = |x: f64| (0.0..=1.0).contains(&x);
        let mix = &self.covariate_mix;
        if !p(mix.race_black) || !p(mix.female) || !mix.education.iter().all(|&x| p(x)) {
            return Err(Error::Config(format!("cohort '{}': probabilities must lie in [0, 1]", self.name)));
        }
        if (mix.education.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("cohort '{}': education probabilities must sum to 1", self.name)));
        }
        if !self.missingness.per_exam.iter().all(|&x| p(x)) || self.missingness.per_exam.len() != spec.n_factors() {
            return Err(Error::Config(format!(
                "cohort '{}': need one missingness probability in [0, 1] per factor",
                self.name
            )));
        }
        if self.missingness.blocks.iter().any(|b| b.factor >= spec.n_factors()) {
            return Err(Error::Config(format!("cohort '{}': block rule names an unknown factor", self.name)));
        }
        let (lo, hi) = self.enrollment_age;
        if !(lo >= spec.age_min && hi <= spec.age_max && lo <= hi) {
            return Err(Error::Config(format!("cohort '{}': enrollment ages outside the model range", self.name)));
        }
        if !(self.exam_spacing_years > 0.0) || self.follow_up_years < 0.0 || self.participants == 0 {
            return Err(Error::Config(format!("cohort '{}': bad schedule or size", self.name)));
        }
        Ok(())
    }
}

/// Generating parameters plus realized random effects, aligned with the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub state: ParameterState,
    pub cohort_ids: Vec<i64>,
    /// `(cohort id, participant id)` in dataset order.
    pub participants: Vec<(i64, i64)>,
}

/// Draws one observation `y = A(a)ᵀβ + ε` for factor `l`. `cohort_b` is laid
/// out `[ℓ][p]`, `subject_b` as `[ℓ][p]` for p in {0, 1}; empty means absent.
fn draw_value(
    truth: &ParameterState,
    spec: &ModelSpec,
    dims: &Dims,
    l: usize,
    x: &[f64],
    cohort_b: &[f64],
    subject_b: &[f64],
    age: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    let mut beta = crate::basis::fixed_slopes(x, &truth.alpha[l], &dims.layout)?;
    if !cohort_b.is_empty() {
        for (p, v) in beta.iter_mut().enumerate() {
            *v += cohort_b[l * dims.nb + p];
        }
    }
    if !subject_b.is_empty() {
        beta[0] += subject_b[2 * l];
        beta[1] += subject_b[2 * l + 1];
    }
    let w = spec.window_of(age)?;
    let xi = beta[0] + age * (beta[1] + beta[2 + w]);
    Ok(xi + skewnormal::draw(truth.omega[l][w], truth.psi[l], rng)?)
}

/// Per cohort, effects laid out `[ℓ][p]`; empty without cohort effects.
fn draw_all_cohort_effects(truth: &ParameterState, dims: &Dims, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
    let mut per_cohort = vec![vec![0.0; dims.l * dims.nb]; dims.k];
    if truth.lambda.is_empty() {
        return Ok(Vec::new());
    }
    for l in 0..dims.l {
        for (p, b) in sample_cohort_effects(&truth.lambda[l], dims.nb, rng)?.into_iter().enumerate() {
            for (k, eff) in per_cohort.iter_mut().enumerate() {
                eff[l * dims.nb + p] = b[k];
            }
        }
    }
    Ok(per_cohort)
}

pub fn simulate_dataset(
    profiles: &[CohortProfile],
    spec: &ModelSpec,
    truth: &ParameterState,
    seed: u64,
) -> Result<(LongitudinalDataset, GroundTruth)> {
    if profiles.is_empty() {
        return Err(Error::Usage("at least one cohort profile is required".into()));
    }
    spec.validate()?;
    truth.validate()?;
    for p in profiles {
        p.validate(spec)?;
    }
    let mut ids: Vec<i64> = profiles.iter().map(|p| p.cohort_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("cohort ids must be unique".into()));
    }
    if truth.lambda.iter().any(|m| m.nrows() != profiles.len()) {
        return Err(Error::Config("cohort covariance size does not match the number of profiles".into()));
    }
    let l_n = spec.n_factors();
    let dims = Dims {
        l: l_n,
        k: profiles.len(),
        nw: spec.n_windows(),
        nb: spec.basis_len(),
        layout: spec.fixed_layout(),
        n_part: 0,
    };
    let mut rng = stream(seed, &[STREAM_SIMULATE]);
    // cohort effects indexed by sorted cohort id
    let cohort_eff = draw_all_cohort_effects(truth, &dims, &mut rng)?;
    let index_of: HashMap<i64, usize> = ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let mut rows = Vec::new();
    let mut subject_of: HashMap<(i64, i64), Vec<f64>> = HashMap::new();
    let mut line = 2;
    for prof in profiles {
        let k = index_of[&prof.cohort_id];
        let mix = &prof.covariate_mix;
        for pid in 1..=prof.participants as i64 {
            let female = rng.random::<f64>() < mix.female;
            let race_black = rng.random::<f64>() < mix.race_black;
            let u: f64 = rng.random();
            let edu = if u < mix.education[0] {
                0
            } else if u < mix.education[0] + mix.education[1] {
                1
            } else {
                2
            };
            let enroll_age = rng.random_range(prof.enrollment_age.0..=prof.enrollment_age.1);
            let enroll_year = rng.random_range(prof.enrollment_year.0..=prof.enrollment_year.1);
            let birth_year = enroll_year - enroll_age.floor() as i32;
            let b = match &truth.sigma {
                Some(s) => sample_subject_effects(s, &mut rng)?.iter().copied().collect(),
                None => Vec::new(),
            };
            let participant = crate::data::Participant {
                id: pid,
                cohort: k,
                sex: if female { "F" } else { "M" }.into(),
                race_black,
                edu_hs: edu == 1,
                edu_hsplus: edu == 2,
                birth_year,
            };
            let x = participant.design_row(spec);
            let n_exams = (prof.follow_up_years / prof.exam_spacing_years).floor() as usize + 1;
            let cb: &[f64] = cohort_eff.get(k).map_or(&[], |v| v.as_slice());
            for j in 0..n_exams {
                let jitter = if j == 0 { 0.0 } else { rng.random_range(-0.5..0.5) };
                let age = enroll_age + j as f64 * prof.exam_spacing_years + jitter;
                if age < spec.age_min || age > spec.age_max {
                    continue;
                }
                let mut values = Vec::with_capacity(l_n);
                for l in 0..l_n {
                    let y = draw_value(truth, spec, &dims, l, &x, cb, &b, age, &mut rng)?;
                    // missingness never looks at y
                    let blocked = prof
                        .missingness
                        .blocks
                        .iter()
                        .any(|r| r.factor == l && r.below_age.is_none_or(|a| age < a));
                    let dropped = rng.random::<f64>() < prof.missingness.per_exam[l];
                    values.push(if blocked || dropped { None } else { Some(y) });
                }
                rows.push(RawRow {
                    line,
                    cohort: prof.cohort_id,
                    participant: pid,
                    sex: participant.sex.clone(),
                    age,
                    race_black,
                    edu_hs: edu == 1,
                    edu_hsplus: edu == 2,
                    birth_year,
                    values,
                });
                line += 1;
            }
            subject_of.insert((prof.cohort_id, pid), b);
        }
    }
    let (data, _) = LongitudinalDataset::from_rows(rows, l_n, spec)?;

    if data.cohort_ids != ids {
        return Err(Error::Config("a cohort produced no observations".into()));
    }
    let full_dims = Dims::new(spec, &data);
    let variant = truth.variant();
    let mut state = ParameterState::neutral(&full_dims, variant);
    state.alpha.clone_from(&truth.alpha);
    state.sigma.clone_from(&truth.sigma);
    state.lambda.clone_from(&truth.lambda);
    state.omega.clone_from(&truth.omega);
    state.psi.clone_from(&truth.psi);
    if variant.has_cohort() {
        for k in 0..full_dims.k {
            for l in 0..l_n {
                for p in 0..full_dims.nb {
                    state.cohort[full_dims.cohort_idx(l, k, p)] = cohort_eff[k][l * full_dims.nb + p];
                }
            }
        }
    }
    let mut participants = Vec::with_capacity(data.n_participants());
    for (i, p) in data.participants.iter().enumerate() {
        let cid = data.cohort_ids[p.cohort];
        if variant.has_subject() {
            let b = &subject_of[&(cid, p.id)];
            let j = full_dims.subject_idx(i, 0, 0);
            state.subject[j..j + 2 * l_n].copy_from_slice(b);
        }
        participants.push((cid, p.id));
    }
    let cohort_ids = data.cohort_ids.clone();
    Ok((data, GroundTruth { state, cohort_ids, participants }))
}

/// One slot of a replicate draw: a participant slot within a cohort, observed at one age.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSlot {
    pub subject: usize,
    pub cohort: usize,
    pub factor: usize,
    pub age: f64,
    pub x: Vec<f64>,
}

/// Jointly draws every slot once: fresh cohort effects, fresh subject effects
/// per subject slot, fresh errors per slot. Used to check second moments.
pub fn replicate_slots(
    truth: &ParameterState,
    spec: &ModelSpec,
    k: usize,
    slots: &[ReplicateSlot],
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let dims = Dims { l: spec.n_factors(), k, nw: spec.n_windows(), nb: spec.basis_len(), layout: spec.fixed_layout(), n_part: 0 };
    let cohort_eff = draw_all_cohort_effects(truth, &dims, rng)?;
    let n_subj = slots.iter().map(|s| s.subject + 1).max().unwrap_or(0);
    let subj: Vec<Vec<f64>> = (0..n_subj)
        .map(|_| match &truth.sigma {
            Some(s) => sample_subject_effects(s, rng).map(|b| b.iter().copied().collect()),
            None => Ok(Vec::new()),
        })
        .collect::<Result<_>>()?;
    slots
        .iter()
        .map(|s| {
            let cb: &[f64] = cohort_eff.get(s.cohort).map_or(&[], |v| v.as_slice());
            draw_value(truth, spec, &dims, s.factor, &s.x, cb, &subj[s.subject], s.age, rng)
        })
        .collect()
}

/// Desk-scale truth: L = 3 factors, `k` cohorts, small cohort-effect variance.
pub fn desk_truth(spec: &ModelSpec, k: usize) -> Result<ParameterState> {
    let l_n = spec.n_factors();
    let dims = Dims { l: l_n, k, nw: spec.n_windows(), nb: spec.basis_len(), layout: spec.fixed_layout(), n_part: 0 };
    let mut s = ParameterState::neutral(&dims, Variant::Full);
    let base = [8.0, 5.0, 15.0, 10.0, 6.0];
    let slope = [0.25, 0.10, -0.05, 0.15, 0.05];
    let names = spec.design_names();
    for l in 0..l_n {
        for idx in 0..dims.layout.len() {
            let (p, c) = dims.layout.coordinate(idx);
            let wave = ((idx * 7 + l * 3) as f64 * 0.9).sin();
            s.alpha[l][idx] = match (p, names[c]) {
                (0, "intercept") => base[l % 5],
                (1, "intercept") => slope[l % 5],
                (0, "race_black") => 1.5,
                (0, "edu_hs") => -0.8,
                (0, "edu_hsplus") => -1.5,
                (0, _) => 0.5 * wave,
                (1, _) => 0.01 * wave,
                _ => 0.03 * wave,
            };
        }
    }
    let sd = [1.0, 0.8, 1.2, 0.9, 1.1];
    let gamma = DMatrix::from_fn(l_n, l_n, |a, b| {
        let r = if a == b { 1.0 } else { 0.35 / (1.0 + (a as f64 - b as f64).abs()) };
        r * sd[a % 5] * sd[b % 5]
    });
    let d = DMatrix::from_row_slice(2, 2, &[9.0, -0.3 * 3.0 * 0.06, -0.3 * 3.0 * 0.06, 0.0036]);
    let delta = DMatrix::from_fn(2 * l_n, 2 * l_n, |r, c| d[(r % 2, c % 2)]);
    s.sigma = Some(block_kronecker(&delta, &gamma)?);
    let lam = DMatrix::from_fn(k, k, |a, b| if a == b { 1.0 } else { 0.25 }) * 0.005;
    s.lambda = vec![lam; l_n];
    let om = [2.5, 2.0, 3.0, 2.2, 1.8];
    let psi = [1.0, -0.5, 1.5, 0.5, -1.0];
    for l in 0..l_n {
        s.omega[l] = (0..dims.nw).map(|w| om[l % 5] * (1.0 + 0.03 * w as f64)).collect();
        s.psi[l] = psi[l % 5];
    }
    s.cohort.clear();
    s.subject.clear();
    Ok(s)
}

/// Desk scenario: a young cohort, a middle-aged cohort and a full-lifespan cohort.
pub fn desk_profiles(participants: usize, n_factors: usize) -> Vec<CohortProfile> {
    let mix = |black: f64, edu: [f64; 3]| CovariateMix { race_black: black, education: edu, female: 0.5 };
    let miss = MissingnessPlan {
        per_exam: (0..n_factors).map(|l| 0.05 + 0.03 * l as f64).collect(),
        blocks: Vec::new(),
    };
    vec![
        CohortProfile {
            name: "young".into(),
            cohort_id: 1,
            enrollment_age: (18.0, 30.0),
            enrollment_year: (1985, 1986),
            follow_up_years: 30.0,
            exam_spacing_years: 3.0,
            participants,
            covariate_mix: mix(0.5, [0.1, 0.4, 0.5]),
            missingness: miss.clone(),
        },
        CohortProfile {
            name: "middle".into(),
            cohort_id: 2,
            enrollment_age: (45.0, 64.0),
            enrollment_year: (1987, 1989),
            follow_up_years: 27.0,
            exam_spacing_years: 3.0,
            participants,
            covariate_mix: mix(0.25, [0.25, 0.4, 0.35]),
            missingness: miss.clone(),
        },
        CohortProfile {
            name: "lifespan".into(),
            cohort_id: 3,
            enrollment_age: (20.0, 70.0),
            enrollment_year: (1948, 1952),
            follow_up_years: 36.0,
            exam_spacing_years: 4.0,
            participants,
            covariate_mix: mix(0.05, [0.35, 0.4, 0.25]),
            missingness: miss,
        },
    ]
}

/// Targets one factor, optionally within one cohort and below an age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeletionRule {
    /// 0-based factor index.
    pub factor: usize,
    #[serde(default)]
    pub cohort: Option<i64>,
    #[serde(default)]
    pub age_below: Option<f64>,
}

/// One masked value with its original measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub record: usize,
    pub cohort: i64,
    pub participant: i64,
    pub age: f64,
    pub factor: usize,
    pub value: f64,
}

/// Sets the targeted observed values to missing. Records stay in place, even
/// if every factor of an exam ends up missing, so indices stay aligned.
pub fn apply_deletion(data: &LongitudinalDataset, rule: &DeletionRule) -> Result<(LongitudinalDataset, Vec<HeldOut>)> {
    if rule.factor >= data.n_factors {
        return Err(Error::Usage(format!("factor {} does not exist", rule.factor + 1)));
    }
    if let Some(c) = rule.cohort {
        if !data.cohort_ids.contains(&c) {
            return Err(Error::Usage(format!("cohort {c} does not exist")));
        }
    }
    let mut out = data.clone();
    let mut held = Vec::new();
    for (j, r) in out.records.iter_mut().enumerate() {
        let p = &data.participants[r.participant];
        let cid = data.cohort_ids[p.cohort];
        if rule.cohort.is_some_and(|c| c != cid) || rule.age_below.is_some_and(|a| r.age >= a) {
            continue;
        }
        if let Some(v) = r.values[rule.factor].take() {
            held.push(HeldOut { record: j, cohort: cid, participant: p.id, age: r.age, factor: rule.factor, value: v });
        }
    }
    if held.is_empty() {
        return Err(Error::Usage("deletion rule matches no observed value".into()));
    }
    Ok((out, held))
}
