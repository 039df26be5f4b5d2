//! Model settings: risk factors, age windows and the covariate design.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference-coded baseline covariates. The reference participant is
/// non-Black, less than high school, born before 1915.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    RaceBlack,
    EduHs,
    EduHsplus,
    ByC2,
    ByC3,
    ByC4,
}

impl Covariate {
    pub const ALL: [Covariate; 6] = [
        Covariate::RaceBlack,
        Covariate::EduHs,
        Covariate::EduHsplus,
        Covariate::ByC2,
        Covariate::ByC3,
        Covariate::ByC4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::RaceBlack => "race_black",
            Covariate::EduHs => "edu_hs",
            Covariate::EduHsplus => "edu_hsplus",
            Covariate::ByC2 => "by_c2",
            Covariate::ByC3 => "by_c3",
            Covariate::ByC4 => "by_c4",
        }
    }

    pub fn is_birth_year(self) -> bool {
        matches!(self, Covariate::ByC2 | Covariate::ByC3 | Covariate::ByC4)
    }
}

fn default_risk_factors() -> Vec<String> {
    vec!["rf_1".into(), "rf_2".into(), "rf_3".into()]
}
fn default_age_min() -> f64 {
    17.0
}
fn default_age_max() -> f64 {
    100.0
}
fn default_breakpoints() -> Vec<f64> {
    vec![28.0, 38.0, 48.0, 58.0, 68.0, 78.0]
}
fn default_covariates() -> Vec<Covariate> {
    Covariate::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_risk_factors")]
    pub risk_factors: Vec<String>,
    #[serde(default = "default_age_min")]
    pub age_min: f64,
    #[serde(default = "default_age_max")]
    pub age_max: f64,
    #[serde(default = "default_breakpoints")]
    pub breakpoints: Vec<f64>,
    /// Covariates in design order; the intercept is implicit and always first.
    #[serde(default = "default_covariates")]
    pub covariates: Vec<Covariate>,
    /// Give birth-year strata window-deviation coefficients as well.
    #[serde(default)]
    pub birth_year_window_interaction: bool,
    /// Sex stratum the model is fitted to; `None` keeps every record.
    #[serde(default)]
    pub sex_stratum: Option<String>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            risk_factors: default_risk_factors(),
            age_min: default_age_min(),
            age_max: default_age_max(),
            breakpoints: default_breakpoints(),
            covariates: default_covariates(),
            birth_year_window_interaction: false,
            sex_stratum: None,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.risk_factors.is_empty() {
            return Err(Error::Config("at least one risk factor is required".into()));
        }
        if !(self.age_min < self.age_max) {
            return Err(Error::Config("age_min must be below age_max".into()));
        }
        if self.breakpoints.is_empty() {
            return Err(Error::Config("at least one breakpoint (two windows) is required".into()));
        }
        let mut prev = self.age_min;
        for &b in &self.breakpoints {
            if !(b > prev) {
                return Err(Error::Config(format!(
                    "breakpoints must be strictly increasing inside ({}, {})",
                    self.age_min, self.age_max
                )));
            }
            prev = b;
        }
        if !(prev < self.age_max) {
            return Err(Error::Config("last breakpoint must lie below age_max".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.covariates {
            if !seen.insert(*c) {
                return Err(Error::Config(format!("duplicate covariate {}", c.name())));
            }
        }
        Ok(())
    }

    pub fn n_factors(&self) -> usize {
        self.risk_factors.len()
    }

    /// Number of age windows P.
    pub fn n_windows(&self) -> usize {
        self.breakpoints.len() + 1
    }

    /// Length of the basis vector, P + 2.
    pub fn basis_len(&self) -> usize {
        self.n_windows() + 2
    }

    /// Design columns including the intercept.
    pub fn n_design(&self) -> usize {
        self.covariates.len() + 1
    }

    pub fn design_names(&self) -> Vec<&'static str> {
        std::iter::once("intercept")
            .chain(self.covariates.iter().map(|c| c.name()))
            .collect()
    }

    /// Whether design column `c` (0 = intercept) carries window deviations.
    pub fn window_interacting(&self, c: usize) -> bool {
        if c == 0 {
            return true;
        }
        let cov = self.covariates[c - 1];
        !cov.is_birth_year() || self.birth_year_window_interaction
    }

    pub fn fixed_layout(&self) -> FixedLayout {
        FixedLayout::new(self)
    }

    /// Window index (0-based) containing `age`. Windows are `(lower, upper]`
    /// with the first window closed at `age_min`.
    pub fn window_of(&self, age: f64) -> Result<usize> {
        if !(age >= self.age_min && age <= self.age_max) {
            return Err(Error::Domain(format!(
                "age {age} outside [{}, {}]",
                self.age_min, self.age_max
            )));
        }
        Ok(self.breakpoints.iter().take_while(|&&b| age > b).count())
    }

    /// Window labels shaped like "Age <= 28", "28 < Age <= 38", ..., "78 < Age".
    pub fn window_labels(&self) -> Vec<String> {
        let p = self.n_windows();
        (0..p)
            .map(|w| {
                if w == 0 {
                    format!("Age <= {}", self.breakpoints[0])
                } else if w == p - 1 {
                    format!("{} < Age", self.breakpoints[w - 1])
                } else {
                    format!("{} < Age <= {}", self.breakpoints[w - 1], self.breakpoints[w])
                }
            })
            .collect()
    }
}

/// Position of every free fixed-effect coefficient of one risk factor.
///
/// Coefficient index `p` follows the basis: 0 intercept, 1 age, `2..=P+1`
/// the window deviations. Only `p = 2..=P` are free; `p = P+1` is minus
/// their sum. Birth-year columns have no window entries unless enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedLayout {
    pub n_design: usize,
    pub n_windows: usize,
    pub window_cols: Vec<usize>,
    len: usize,
}

impl FixedLayout {
    fn new(spec: &ModelSpec) -> Self {
        let n_design = spec.n_design();
        let window_cols: Vec<usize> = (0..n_design).filter(|&c| spec.window_interacting(c)).collect();
        let n_windows = spec.n_windows();
        let len = 2 * n_design + (n_windows - 1) * window_cols.len();
        FixedLayout {
            n_design,
            n_windows,
            window_cols,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index of free coefficient `(p, c)`; `None` for structural zeros and for
    /// the constraint-determined last window.
    pub fn index(&self, p: usize, c: usize) -> Option<usize> {
        if c >= self.n_design {
            return None;
        }
        match p {
            0 => Some(c),
            1 => Some(self.n_design + c),
            _ if p <= self.n_windows => {
                let wc = self.window_cols.iter().position(|&x| x == c)?;
                Some(2 * self.n_design + (p - 2) * self.window_cols.len() + wc)
            }
            _ => None,
        }
    }

    /// Inverse of [`FixedLayout::index`].
    pub fn coordinate(&self, idx: usize) -> (usize, usize) {
        if idx < self.n_design {
            (0, idx)
        } else if idx < 2 * self.n_design {
            (1, idx - self.n_design)
        } else {
            let r = idx - 2 * self.n_design;
            let nw = self.window_cols.len();
            (2 + r / nw, self.window_cols[r % nw])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_has_seven_windows() {
        let spec = ModelSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.n_windows(), 7);
        assert_eq!(spec.basis_len(), 9);
        assert_eq!(spec.window_labels()[0], "Age <= 28");
        assert_eq!(spec.window_labels()[6], "78 < Age");
    }

    #[test]
    fn window_boundaries_belong_to_lower_window() {
        let spec = ModelSpec::default();
        assert_eq!(spec.window_of(17.0).unwrap(), 0);
        assert_eq!(spec.window_of(28.0).unwrap(), 0);
        assert_eq!(spec.window_of(28.0001).unwrap(), 1);
        assert_eq!(spec.window_of(100.0).unwrap(), 6);
        assert!(spec.window_of(101.0).is_err());
        assert!(spec.window_of(16.9).is_err());
    }

    #[test]
    fn rejects_bad_breakpoints() {
        let mut spec = ModelSpec::default();
        spec.breakpoints = vec![30.0, 30.0];
        assert!(spec.validate().is_err());
        spec.breakpoints = vec![10.0];
        assert!(spec.validate().is_err());
        spec.breakpoints = vec![];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn layout_round_trips_and_skips_birth_year_windows() {
        let spec = ModelSpec::default();
        let lay = spec.fixed_layout();
        // 7 design columns at p=0,1; 4 window-interacting columns x 6 free windows.
        assert_eq!(lay.len(), 14 + 24);
        for idx in 0..lay.len() {
            let (p, c) = lay.coordinate(idx);
            assert_eq!(lay.index(p, c), Some(idx));
        }
        // by_c2 is design column 4
        assert!(lay.index(2, 4).is_none());
        assert!(lay.index(1, 4).is_some());
        assert!(lay.index(8, 0).is_none());

        let mut with_by = spec.clone();
        with_by.birth_year_window_interaction = true;
        assert_eq!(with_by.fixed_layout().len(), 14 + 42);
    }
}
