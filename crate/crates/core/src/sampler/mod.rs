//! MCMC organized as superchains of subchains sharing an initial state.

pub mod gibbs;
pub mod init;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::likelihood::{log_likelihood_observed, log_prior_terms};
use crate::rng::{stream, STREAM_CHAIN, STREAM_INIT};
use crate::spec::ModelSpec;
use crate::state::{core_paths, subject_paths, ParameterState, Variant};

use gibbs::{Chain, Prepared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    SubsamplePosterior,
    PriorDraw,
    TruthJitter,
}

fn d_superchains() -> usize {
    8
}
fn d_subchains() -> usize {
    16
}
fn d_iterations() -> usize {
    70
}
fn d_warmup() -> usize {
    50
}
fn d_init() -> InitStrategy {
    InitStrategy::SubsamplePosterior
}
fn d_fraction() -> f64 {
    0.1
}
fn d_init_iterations() -> usize {
    40
}
fn d_jitter() -> f64 {
    0.05
}
fn d_variant() -> Variant {
    Variant::Full
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "d_superchains")]
    pub superchains: usize,
    #[serde(default = "d_subchains")]
    pub subchains: usize,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_warmup")]
    pub warmup: usize,
    /// Filled from the run's top-level seed when loaded from a config file.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_init")]
    pub init: InitStrategy,
    /// Participant fraction resampled for each superchain's initial fit.
    #[serde(default = "d_fraction")]
    pub subsample_fraction: f64,
    /// Sweeps of the initial fit on the resample.
    #[serde(default = "d_init_iterations")]
    pub init_iterations: usize,
    /// Relative perturbation for truth-jitter starts.
    #[serde(default = "d_jitter")]
    pub jitter: f64,
    #[serde(default = "d_variant")]
    pub variant: Variant,
    /// Keep post-warmup subject effects in the draws.
    #[serde(default = "d_true")]
    pub store_subject: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            superchains: d_superchains(),
            subchains: d_subchains(),
            iterations: d_iterations(),
            warmup: d_warmup(),
            seed: 0,
            init: d_init(),
            subsample_fraction: d_fraction(),
            init_iterations: d_init_iterations(),
            jitter: d_jitter(),
            variant: d_variant(),
            store_subject: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.superchains < 1 || self.subchains < 1 || self.iterations < 1 {
            return Err(Error::Config("chain counts and iterations must be at least 1".into()));
        }
        if self.warmup >= self.iterations {
            return Err(Error::Config("warmup must be smaller than iterations".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config("subsample_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn startup_check(state: &ParameterState, spec: &ModelSpec, data: &LongitudinalDataset, prep: &Prepared) -> Result<()> {
    state.validate().map_err(|e| Error::Startup(e.to_string()))?;
    let ll = log_likelihood_observed(state, spec, data);
    if !ll.is_finite() {
        return Err(Error::Startup("log-likelihood is not finite at the initial state".into()));
    }
    for (name, v) in log_prior_terms(state, &prep.dims) {
        if !v.is_finite() {
            return Err(Error::Startup(format!("log-prior term '{name}' is not finite at the initial state")));
        }
    }
    Ok(())
}

struct ChainOut {
    core: Vec<f64>,
    subject: Vec<f64>,
}

/// Runs `superchains × subchains` chains. `truth` is required for truth-jitter starts.
pub fn run_sampler(
    data: &LongitudinalDataset,
    spec: &ModelSpec,
    config: &SamplerConfig,
    truth: Option<&ParameterState>,
) -> Result<PosteriorDraws> {
    spec.validate()?;
    config.validate()?;
    let variant = config.variant;
    let prep = Prepared::new(spec, data, variant)?;
    let dims = prep.dims.clone();

    let inits: Vec<ParameterState> = (0..config.superchains)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(config.seed, &[STREAM_INIT, s as u64]);
            match config.init {
                InitStrategy::TruthJitter => {
                    let t = truth.ok_or_else(|| Error::Usage("truth-jitter initialization needs a ground truth".into()))?;
                    Ok(init::truth_jitter(t, &dims, variant, config.jitter, &mut rng))
                }
                InitStrategy::PriorDraw => init::prior_draw(&dims, variant, &mut rng),
                InitStrategy::SubsamplePosterior if data.is_empty() => init::prior_draw(&dims, variant, &mut rng),
                InitStrategy::SubsamplePosterior => init::subsample_posterior(spec, data, &dims, config, s),
            }
        })
        .collect::<Result<_>>()?;
    for s in &inits {
        startup_check(s, spec, data, &prep)?;
    }

    let keep_subject = config.store_subject && variant.has_subject();
    let chains: Vec<(usize, usize)> = (0..config.superchains)
        .flat_map(|s| (0..config.subchains).map(move |m| (s, m)))
        .collect();
    let outs: Vec<ChainOut> = chains
        .par_iter()
        .map(|&(s, m)| {
            let rng = stream(config.seed, &[STREAM_CHAIN, s as u64, m as u64]);
            let mut chain = Chain::new(&prep, inits[s].clone(), rng);
            let mut core = Vec::new();
            let mut subject = Vec::new();
            for n in 0..config.iterations {
                chain.sweep((n < config.warmup).then_some(n));
                core.extend(chain.state.flatten_core());
                if keep_subject && n >= config.warmup {
                    subject.extend(&chain.state.subject);
                }
            }
            log::debug!("chain ({s},{m}) acceptance {:?}", chain.stats);
            ChainOut { core, subject }
        })
        .collect();

    let mut core = Vec::with_capacity(outs.iter().map(|o| o.core.len()).sum());
    let mut subject = Vec::with_capacity(outs.iter().map(|o| o.subject.len()).sum());
    for o in outs {
        core.extend(o.core);
        subject.extend(o.subject);
    }
    Ok(PosteriorDraws {
        variant,
        superchains: config.superchains,
        subchains: config.subchains,
        iterations: config.iterations,
        warmup: config.warmup,
        core_paths: core_paths(spec, &dims, &data.cohort_ids, variant),
        subject_paths: if keep_subject { subject_paths(&dims, data) } else { Vec::new() },
        core,
        subject,
    })
}
