//! Posterior predictive imputation and pooling of per-dataset estimates.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, mvn_canonical};
use crate::ppc::csv_writer;
use crate::rng::{derive_seed, stream, StreamRng, STREAM_IMPUTE};
use crate::simulate::HeldOut;
use crate::skewnormal;
use crate::spec::ModelSpec;
use crate::state::{Dims, ParameterState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedCopy {
    /// 1-based copy number, also used in file names.
    pub copy: usize,
    /// Post-warmup draw index.
    pub draw: usize,
    pub superchain: usize,
    pub subchain: usize,
    pub iteration: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationManifest {
    pub seed: u64,
    pub imputations: usize,
    pub missing_cells: usize,
    /// Whether subject effects were redrawn because the draws did not carry them.
    pub subject_effects_redrawn: bool,
    pub copies: Vec<ImputedCopy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedDatasetSet {
    pub datasets: Vec<LongitudinalDataset>,
    pub manifest: ImputationManifest,
}

impl ImputedDatasetSet {
    /// Writes `imputed_001.csv`, ... and `manifest.json` into `dir`.
    pub fn write(&self, spec: &ModelSpec, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (d, c) in self.datasets.iter().zip(&self.manifest.copies) {
            crate::io::write_dataset_file(&dir.join(format!("imputed_{:03}.csv", c.copy)), d, spec)?;
        }
        crate::io::write_json(&dir.join("manifest.json"), &self.manifest)
    }
}

/// Subject effects given the participant's observed values under Σ, with the
/// errors replaced by normals of matching mean and variance.
fn conditional_subject_effects(
    state: &ParameterState,
    dims: &Dims,
    data: &LongitudinalDataset,
    spec: &ModelSpec,
    i: usize,
    base: &[Vec<f64>],
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let sigma = state.sigma.as_ref().expect("variant carries subject effects");
    let n = 2 * dims.l;
    let mut q = cholesky_jitter(sigma)?.inverse();
    let mut r = DVector::<f64>::zeros(n);
    for rec in data.records_of(i) {
        let w = spec.window_of(rec.age)?;
        for (l, v) in rec.values.iter().enumerate() {
            let Some(y) = v else { continue };
            let (om, psi) = (state.omega[l][w], state.psi[l]);
            let var = skewnormal::variance(om, psi);
            let b = &base[l];
            let resid = y - (b[0] + rec.age * (b[1] + b[2 + w])) - skewnormal::mean(om, psi);
            let h = [(2 * l, 1.0), (2 * l + 1, rec.age)];
            for &(a, ha) in &h {
                r[a] += ha * resid / var;
                for &(c, hc) in &h {
                    q[(a, c)] += ha * hc / var;
                }
            }
        }
    }
    let q = DMatrix::from_fn(n, n, |a, c| 0.5 * (q[(a, c)] + q[(c, a)]));
    Ok(mvn_canonical(&cholesky_jitter(&q)?, &r, rng).iter().copied().collect())
}

fn impute_one(
    draws: &PosteriorDraws,
    dims: &Dims,
    data: &LongitudinalDataset,
    spec: &ModelSpec,
    xs: &[Vec<f64>],
    j: usize,
    seed: u64,
) -> Result<LongitudinalDataset> {
    let state = draws.post_state(dims, j)?;
    let mut rng = stream(seed, &[]);
    let redraw = state.variant().has_subject() && state.subject.is_empty();
    let mut out = data.clone();
    for i in 0..data.n_participants() {
        let (s, e) = data.ranges[i];
        if data.records[s..e].iter().all(|r| r.values.iter().all(Option::is_some)) {
            continue;
        }
        let k = data.participants[i].cohort;
        // fixed plus cohort part of β per factor
        let base: Vec<Vec<f64>> = (0..dims.l)
            .map(|l| {
                let mut b = crate::basis::fixed_slopes(&xs[i], &state.alpha[l], &dims.layout)?;
                for (p, v) in b.iter_mut().enumerate() {
                    *v += state.cohort_effect(dims, l, k, p);
                }
                Ok(b)
            })
            .collect::<Result<_>>()?;
        let subject: Vec<f64> = if redraw {
            conditional_subject_effects(&state, dims, data, spec, i, &base, &mut rng)?
        } else if state.subject.is_empty() {
            vec![0.0; 2 * dims.l]
        } else {
            let at = dims.subject_idx(i, 0, 0);
            state.subject[at..at + 2 * dims.l].to_vec()
        };
        for rec in &mut out.records[s..e] {
            let w = spec.window_of(rec.age)?;
            for l in 0..dims.l {
                if rec.values[l].is_some() {
                    continue;
                }
                let b = &base[l];
                let xi = b[0] + subject[2 * l] + rec.age * (b[1] + subject[2 * l + 1] + b[2 + w]);
                rec.values[l] = Some(xi + skewnormal::draw(state.omega[l][w], state.psi[l], &mut rng)?);
            }
        }
    }
    Ok(out)
}

/// Fills every missing cell from `d` equally spaced post-warmup draws.
pub fn impute_missing(
    draws: &PosteriorDraws,
    data: &LongitudinalDataset,
    spec: &ModelSpec,
    d: usize,
    seed: u64,
) -> Result<ImputedDatasetSet> {
    let which = draws.equally_spaced(d)?;
    let dims = draws.aligned_dims(spec, data)?;
    let xs: Vec<Vec<f64>> = data.participants.iter().map(|p| p.design_row(spec)).collect();
    let copies: Vec<ImputedCopy> = which
        .iter()
        .enumerate()
        .map(|(c, &j)| {
            let (superchain, subchain, iteration) = draws.post_index(j);
            ImputedCopy { copy: c + 1, draw: j, superchain, subchain, iteration, seed: derive_seed(seed, &[STREAM_IMPUTE, c as u64]) }
        })
        .collect();
    let datasets = copies
        .par_iter()
        .map(|c| impute_one(draws, &dims, data, spec, &xs, c.draw, c.seed))
        .collect::<Result<Vec<_>>>()?;
    let manifest = ImputationManifest {
        seed,
        imputations: d,
        missing_cells: data.n_missing(),
        subject_effects_redrawn: draws.variant.has_subject() && !draws.has_subject(),
        copies,
    };
    Ok(ImputedDatasetSet { datasets, manifest })
}

/// Interval between order statistics `r` and `D + 1 − r`, `r = ⌊(1 − level)/2 · (D + 1)⌋`,
/// which covers a further exchangeable draw with probability `(D + 1 − 2r)/(D + 1)`.
pub fn predictive_interval(values: &mut [f64], level: f64) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let r = (((1.0 - level) / 2.0 * (n + 1) as f64).floor() as usize).max(1).min(n.div_ceil(2));
    (values[r - 1], values[n - r])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub cells: usize,
    pub covered: usize,
    pub rate: f64,
    pub level: f64,
}

/// Share of held-out values inside their predictive interval across the imputed copies.
pub fn coverage(set: &ImputedDatasetSet, held: &[HeldOut], level: f64) -> Result<CoverageReport> {
    if set.datasets.len() < 2 {
        return Err(Error::Usage("coverage needs at least two imputed datasets".into()));
    }
    let mut covered = 0;
    for h in held {
        let mut vals: Vec<f64> = set
            .datasets
            .iter()
            .map(|d| d.records[h.record].values[h.factor].expect("imputed"))
            .collect();
        let (lo, hi) = predictive_interval(&mut vals, level);
        covered += (lo <= h.value && h.value <= hi) as usize;
    }
    let cells = held.len();
    Ok(CoverageReport { cells, covered, rate: covered as f64 / cells.max(1) as f64, level })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub point: f64,
    /// Mean within-imputation variance W̄.
    pub within: f64,
    /// Between-imputation variance B.
    pub between: f64,
    /// `T = W̄ + (1 + 1/D)·B`.
    pub total: f64,
    pub d: usize,
}

/// Rubin's rules over `(point, variance)` pairs.
pub fn rubin_pool(estimates: &[(f64, f64)]) -> Result<PooledEstimate> {
    let d = estimates.len();
    if d < 2 {
        return Err(Error::Usage("pooling needs at least two estimates".into()));
    }
    if estimates.iter().any(|&(p, v)| !p.is_finite() || !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Usage("estimates must be finite with non-negative variances".into()));
    }
    let df = d as f64;
    let point = estimates.iter().map(|e| e.0).sum::<f64>() / df;
    let within = estimates.iter().map(|e| e.1).sum::<f64>() / df;
    let between = estimates.iter().map(|e| (e.0 - point).powi(2)).sum::<f64>() / (df - 1.0);
    Ok(PooledEstimate { point, within, between, total: within + (1.0 + 1.0 / df) * between, d })
}

/// Reads `point,variance` rows.
pub fn read_estimates<R: std::io::Read>(input: R) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::ReaderBuilder::new().from_reader(input);
    let head: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if head != ["point", "variance"] {
        return Err(Error::Data { line: 1, msg: "header must be 'point,variance'".into() });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Data { line, msg: format!("bad number '{s}'") });
        if rec.len() != 2 {
            return Err(Error::Data { line, msg: "expected two fields".into() });
        }
        out.push((num(&rec[0])?, num(&rec[1])?));
    }
    Ok(out)
}

/// Least-squares slope of one factor on age over observed values, with its
/// usual variance `s²/Sxx`.
pub fn ols_slope(data: &LongitudinalDataset, factor: usize) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> =
        data.records.iter().filter_map(|r| r.values.get(factor).copied().flatten().map(|y| (r.age, y))).collect();
    let n = pts.len() as f64;
    if pts.len() < 3 {
        return Err(Error::Usage("slope needs at least three observed values".into()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Numerical("ages do not vary".into()));
    }
    let slope = sxy / sxx;
    let rss: f64 = pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    Ok((slope, rss / (n - 2.0) / sxx))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreservationCell {
    /// Design column name.
    pub covariate: String,
    /// `0` intercept, `1` age, `2..` windows.
    pub coefficient: usize,
    /// Absent where the covariate has no coefficient (birth year × window).
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreservationTable {
    pub factor: usize,
    pub cells: Vec<PreservationCell>,
}

impl PreservationTable {
    pub fn probabilities(&self) -> Vec<f64> {
        self.cells.iter().filter_map(|c| c.probability).collect()
    }

    /// One row per coefficient, one column per covariate.
    pub fn write_csv<W: Write>(&self, spec: &ModelSpec, out: W) -> Result<()> {
        let names = spec.design_names();
        let labels: Vec<String> =
            ["intercept".to_string(), "age".to_string()].into_iter().chain(spec.window_labels()).collect();
        let mut w = csv_writer(out);
        let mut head = vec!["coefficient".to_string()];
        head.extend(names.iter().map(|s| s.to_string()));
        w.write_record(&head)?;
        for (p, label) in labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            for name in &names {
                let cell = self.cells.iter().find(|c| c.coefficient == p && c.covariate == *name);
                rec.push(cell.and_then(|c| c.probability).map_or("NA".into(), |v| format!("{v}")));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Post-warmup draws of coefficient `p` of design column `c` for factor `l`,
/// expanding the last window from the sum-to-zero constraint.
fn coefficient_draws(draws: &PosteriorDraws, spec: &ModelSpec, l: usize, p: usize, c: usize) -> Option<Vec<f64>> {
    let layout = spec.fixed_layout();
    let off = l * layout.len();
    let nw = spec.n_windows();
    let col = |idx: usize| draws.pooled(off + idx);
    if p == nw + 1 {
        let parts: Vec<Vec<f64>> = (2..=nw).map(|q| layout.index(q, c).map(col)).collect::<Option<_>>()?;
        let n = parts.first().map_or(0, Vec::len);
        Some((0..n).map(|j| -parts.iter().map(|v| v[j]).sum::<f64>()).collect())
    } else {
        layout.index(p, c).map(col)
    }
}

/// `Pr(draw_deleted ≥ mean_full)` for every fixed-effect coefficient of `factor`.
pub fn fixed_effect_preservation(
    full: &PosteriorDraws,
    deleted: &PosteriorDraws,
    spec: &ModelSpec,
    factor: usize,
) -> Result<PreservationTable> {
    if factor >= spec.n_factors() {
        return Err(Error::Usage(format!("factor {} does not exist", factor + 1)));
    }
    let dims = Dims {
        l: spec.n_factors(),
        k: 0,
        nw: spec.n_windows(),
        nb: spec.basis_len(),
        layout: spec.fixed_layout(),
        n_part: 0,
    };
    let n_alpha = dims.l * dims.layout.len();
    let expected = &crate::state::core_paths(spec, &dims, &[], crate::state::Variant::NoCohort)[..n_alpha];
    for d in [full, deleted] {
        if d.core_paths.get(..n_alpha) != Some(expected) {
            return Err(Error::Usage("the two fits were not made under the same model".into()));
        }
    }
    let names = spec.design_names();
    let mut cells = Vec::new();
    for p in 0..spec.basis_len() {
        for (c, name) in names.iter().enumerate() {
            let probability = match (coefficient_draws(full, spec, factor, p, c), coefficient_draws(deleted, spec, factor, p, c)) {
                (Some(f), Some(d)) => {
                    let mean_full = f.iter().sum::<f64>() / f.len() as f64;
                    Some(d.iter().filter(|&&v| v >= mean_full).count() as f64 / d.len() as f64)
                }
                _ => None,
            };
            cells.push(PreservationCell { covariate: name.to_string(), coefficient: p, probability });
        }
    }
    Ok(PreservationTable { factor, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{apply_deletion, desk_profiles, desk_truth, simulate_dataset, DeletionRule};
    use crate::state::Variant;

    fn fixture(n: usize) -> (ModelSpec, LongitudinalDataset, ParameterState) {
        let spec = ModelSpec::default();
        let truth = desk_truth(&spec, 3).unwrap();
        let (data, gt) = simulate_dataset(&desk_profiles(n, 3), &spec, &truth, 8).unwrap();
        (spec, data, gt.state)
    }

    #[test]
    fn rubin_hand_examples() {
        let p = rubin_pool(&[(1.0, 0.5), (2.0, 0.5), (3.0, 0.5)]).unwrap();
        assert_eq!(p.point, 2.0);
        assert_eq!(p.within, 0.5);
        assert_eq!(p.between, 1.0);
        assert!((p.total - 11.0 / 6.0).abs() < 1e-15);
        let q = rubin_pool(&[(4.0, 0.2), (4.0, 0.4)]).unwrap();
        assert_eq!(q.between, 0.0);
        assert!((q.total - q.within).abs() < 1e-15);
        let r = rubin_pool(&[(0.0, 1.0), (0.0, 3.0)]).unwrap();
        assert_eq!((r.point, r.total), (0.0, 2.0));
        assert!(matches!(rubin_pool(&[(1.0, 1.0)]), Err(Error::Usage(_))));
        assert!(rubin_pool(&[(1.0, -1.0), (1.0, 1.0)]).is_err());
    }

    #[test]
    fn nothing_missing_gives_identical_copies() {
        let (spec, data, truth) = fixture(10);
        let mut complete = data.clone();
        for r in complete.records.iter_mut() {
            for v in r.values.iter_mut() {
                v.get_or_insert(1.0);
            }
        }
        let draws = PosteriorDraws::from_states(&spec, &complete, &vec![truth; 4]).unwrap();
        let set = impute_missing(&draws, &complete, &spec, 4, 1).unwrap();
        assert!(set.datasets.iter().all(|d| *d == complete));
        assert!(matches!(impute_missing(&draws, &complete, &spec, 5, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn observed_cells_untouched_and_deterministic() {
        let (spec, data, truth) = fixture(20);
        let draws = PosteriorDraws::from_states(&spec, &data, &vec![truth; 6]).unwrap();
        let a = impute_missing(&draws, &data, &spec, 3, 9).unwrap();
        let b = impute_missing(&draws, &data, &spec, 3, 9).unwrap();
        assert_eq!(a, b);
        for d in &a.datasets {
            assert_eq!(d.n_missing(), 0);
            for (x, y) in d.records.iter().zip(&data.records) {
                for (u, v) in x.values.iter().zip(&y.values) {
                    if let Some(v) = v {
                        assert_eq!(u.unwrap().to_bits(), v.to_bits());
                    }
                }
            }
        }
        assert_eq!(a.manifest.copies.iter().map(|c| c.draw).collect::<Vec<_>>(), vec![0, 2, 4]);
    }

    #[test]
    fn imputing_at_truth_covers_held_out_values() {
        // with the generating parameters and realized effects, the predictive
        // interval for a masked value has exactly the nominal coverage
        let (spec, data, truth) = fixture(150);
        let rule = DeletionRule { factor: 0, cohort: Some(3), age_below: Some(40.0) };
        let (reduced, held) = apply_deletion(&data, &rule).unwrap();
        let draws = PosteriorDraws::from_states(&spec, &reduced, &vec![truth; 128]).unwrap();
        let set = impute_missing(&draws, &reduced, &spec, 128, 3).unwrap();
        let cov = coverage(&set, &held, 0.95).unwrap();
        let se = (0.95 * 0.05 / cov.cells as f64).sqrt();
        assert!(cov.cells > 100);
        assert!((cov.rate - 123.0 / 129.0).abs() < 3.5 * se, "{cov:?}");
    }

    #[test]
    fn redrawn_subject_effects_follow_conditional() {
        // without stored effects, the redraw must still centre imputations on
        // the participant's own level rather than the population mean
        let (spec, data, truth) = fixture(60);
        let rule = DeletionRule { factor: 0, cohort: Some(3), age_below: None };
        let (reduced, held) = apply_deletion(&data, &rule).unwrap();
        let mut st = truth.clone();
        st.subject.clear();
        let draws = PosteriorDraws::from_states(&spec, &reduced, &vec![st; 64]).unwrap();
        assert!(!draws.has_subject());
        let set = impute_missing(&draws, &reduced, &spec, 64, 5).unwrap();
        assert!(set.manifest.subject_effects_redrawn);
        let cov = coverage(&set, &held, 0.9).unwrap();
        assert!(cov.rate > 0.85, "{cov:?}");
    }

    #[test]
    fn preservation_self_and_shifted() {
        let (spec, data, _) = fixture(5);
        let dims = Dims::new(&spec, &data);
        let mut rng = stream(1, &[]);
        use rand_distr::{Distribution, StandardNormal};
        let states: Vec<ParameterState> = (0..400)
            .map(|_| {
                let mut s = ParameterState::neutral(&dims, Variant::NoCohort);
                for a in s.alpha.iter_mut().flatten() {
                    *a = StandardNormal.sample(&mut rng);
                }
                s
            })
            .collect();
        let full = PosteriorDraws::from_states(&spec, &data, &states).unwrap();
        let t = fixed_effect_preservation(&full, &full, &spec, 1).unwrap();
        assert_eq!(t.cells.len(), 9 * 7);
        assert_eq!(t.probabilities().len(), 2 * 7 + 7 * 4);
        assert!(t.probabilities().iter().all(|p| (p - 0.5).abs() < 0.1), "{:?}", t.probabilities());
        let shifted: Vec<ParameterState> = states
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.alpha[1].iter_mut().for_each(|a| *a += 10.0);
                s
            })
            .collect();
        let del = PosteriorDraws::from_states(&spec, &data, &shifted).unwrap();
        let t = fixed_effect_preservation(&full, &del, &spec, 1).unwrap();
        // free coefficients move up; the constrained last window moves down
        for c in &t.cells {
            if let Some(p) = c.probability {
                if c.coefficient == 8 {
                    assert_eq!(p, 0.0);
                } else {
                    assert_eq!(p, 1.0);
                }
            }
        }
        let other = ModelSpec { breakpoints: vec![40.0, 60.0], ..ModelSpec::default() };
        assert!(fixed_effect_preservation(&full, &del, &other, 1).is_err());
    }

    #[test]
    fn slope_estimator_matches_closed_form() {
        let (_, mut data, _) = fixture(5);
        for r in data.records.iter_mut() {
            r.values[2] = Some(3.0 - 0.5 * r.age);
        }
        let (b, v) = ols_slope(&data, 2).unwrap();
        assert!((b + 0.5).abs() < 1e-12 && v < 1e-20);
        let text = "point,variance\n1,0.5\n2,0.5\n3,0.5\n";
        assert_eq!(read_estimates(text.as_bytes()).unwrap().len(), 3);
    }

    #[test]
    fn interval_order_statistics() {
        let mut v: Vec<f64> = (1..=128).rev().map(f64::from).collect();
        assert_eq!(predictive_interval(&mut v, 0.95), (3.0, 126.0));
        let mut w = vec![2.0, 1.0];
        assert_eq!(predictive_interval(&mut w, 0.95), (1.0, 2.0));
    }
}
