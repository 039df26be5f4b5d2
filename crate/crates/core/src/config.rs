//! Run configuration: one TOML document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{InitStrategy, SamplerConfig};
use crate::simulate::DeletionRule;
use crate::spec::ModelSpec;
use crate::state::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Long-format CSV.
    pub data: PathBuf,
    /// Directory for every file a subcommand writes.
    pub output: PathBuf,
    /// Ground-truth JSON from `simulate`, needed for truth-jitter starts.
    #[serde(default)]
    pub truth: Option<PathBuf>,
}

fn d_imputations() -> usize {
    128
}
fn d_ppc_draws() -> usize {
    200
}
fn d_variants() -> Vec<Variant> {
    vec![Variant::Full]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    #[serde(default)]
    pub deletions: Vec<DeletionRule>,
    /// Fits whose draws `ppc` reads, one `draws_<variant>.csv` each.
    #[serde(default = "d_variants")]
    pub ppc_variants: Vec<Variant>,
    #[serde(default = "d_imputations")]
    pub imputations: usize,
    /// Posterior draws replicated per check.
    #[serde(default = "d_ppc_draws")]
    pub ppc_draws: usize,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment { deletions: Vec::new(), ppc_variants: d_variants(), imputations: d_imputations(), ppc_draws: d_ppc_draws() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub experiment: Experiment,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.sampler.seed = c.seed;
        Ok(c)
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut c.paths.data);
        resolve(&mut c.paths.output);
        if let Some(t) = c.paths.truth.as_mut() {
            resolve(t);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        if !self.paths.data.is_file() {
            return Err(Error::Config(format!("data file {} does not exist", self.paths.data.display())));
        }
        match &self.paths.truth {
            Some(t) if !t.is_file() => {
                return Err(Error::Config(format!("truth file {} does not exist", t.display())));
            }
            None if self.sampler.init == InitStrategy::TruthJitter => {
                return Err(Error::Config("truth-jitter initialization needs paths.truth".into()));
            }
            _ => {}
        }
        if self.experiment.imputations < 2 {
            return Err(Error::Config("experiment.imputations must be at least 2".into()));
        }
        if self.experiment.ppc_draws < 1 {
            return Err(Error::Config("experiment.ppc_draws must be at least 1".into()));
        }
        for d in &self.experiment.deletions {
            if d.factor >= self.model.n_factors() {
                return Err(Error::Config(format!("deletion names factor {} of {}", d.factor + 1, self.model.n_factors())));
            }
        }
        Ok(())
    }
}
