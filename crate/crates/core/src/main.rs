use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lifecourse::config::RunConfig;
use lifecourse::draws::PosteriorDraws;
use lifecourse::error::{Error, Result};
use lifecourse::impute::{fixed_effect_preservation, impute_missing, read_estimates, rubin_pool};
use lifecourse::io::{ingest, read_json, write_dataset_file, write_held_out, write_json, write_missingness};
use lifecourse::ppc::{cross_cohort_ppp, qq_export, residual_pair, stratum_label, variance_ratio, within_subject_ppp, write_qq, write_variance_ratios, Pairing};
use lifecourse::rhat::convergence_report;
use lifecourse::sampler::run_sampler;
use lifecourse::simulate::{apply_deletion, desk_profiles, desk_truth, simulate_dataset, CohortProfile, GroundTruth};
use lifecourse::spec::ModelSpec;
use lifecourse::state::Variant;
use lifecourse::validation::{run_suite, ValidationConfig};

/// Largest share of parameters allowed above the R-hat threshold.
const GATE: f64 = 0.05;

#[derive(Parser)]
#[command(name = "lifecourse", version, about = "Pooled-cohort risk-factor trajectory model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cohort collection and its ground truth.
    Simulate(SimulateArgs),
    /// Fit the model; exits 1 if more than 5% of parameters have R-hat above 1.1.
    Fit(FitArgs),
    /// Posterior predictive checks for each configured variant.
    Ppc(PpcArgs),
    /// Multiply impute missing values.
    Impute(ImputeArgs),
    /// Pool per-dataset `point,variance` estimates with Rubin's rules.
    Pool(PoolArgs),
    /// Apply the configured deletions, optionally refit and compare.
    Delete(DeleteArgs),
    /// Run the acceptance experiments on simulated data.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    /// Participants per cohort for the built-in cohort profiles.
    #[arg(long, default_value_t = 150)]
    participants: usize,
    /// TOML file with `[[cohort]]` tables replacing the built-in profiles.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// TOML model settings; defaults apply when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Random-effect levels present in the generating model.
    #[arg(long, default_value = "full")]
    variant: Variant,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `sampler.variant`.
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct PpcArgs {
    #[arg(long)]
    config: PathBuf,
    /// Draws file; by default `draws_<variant>.csv` in the output directory for every configured variant.
    #[arg(long)]
    draws: Option<PathBuf>,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    draws: Option<PathBuf>,
}

#[derive(Args)]
struct PoolArgs {
    /// CSV with header `point,variance`.
    #[arg(long)]
    estimates: PathBuf,
    /// Also write the pooled estimate as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DeleteArgs {
    #[arg(long)]
    config: PathBuf,
    /// Draws of the complete-data fit; when given, the reduced data are refitted
    /// and fixed-effect preservation tables are written.
    #[arg(long)]
    full_draws: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Reduced experiment sizes; thresholds are not expected to hold.
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    cohort: Vec<CohortProfile>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_draws(path: &Path) -> Result<PosteriorDraws> {
    PosteriorDraws::read_csv(BufReader::new(File::open(path)?))
}

fn draws_path(cfg: &RunConfig, variant: Variant) -> PathBuf {
    cfg.paths.output.join(format!("draws_{}.csv", variant.name()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let spec: ModelSpec = match &a.model {
        Some(p) => read_toml(p)?,
        None => ModelSpec::default(),
    };
    spec.validate()?;
    let profiles = match &a.profiles {
        Some(p) => read_toml::<ProfileFile>(p)?.cohort,
        None => desk_profiles(a.participants, spec.n_factors()),
    };
    let mut truth = desk_truth(&spec, profiles.len())?;
    if !a.variant.has_cohort() {
        truth.lambda.clear();
        truth.cohort.clear();
    }
    if !a.variant.has_subject() {
        truth.sigma = None;
        truth.subject.clear();
    }
    let (data, gt) = simulate_dataset(&profiles, &spec, &truth, a.seed)?;
    std::fs::create_dir_all(&a.output)?;
    write_dataset_file(&a.output.join("data.csv"), &data, &spec)?;
    write_json(&a.output.join("truth.json"), &gt)?;
    write_missingness(&data, &spec, create(&a.output.join("missingness.csv"))?)?;
    println!("{} participants, {} exams written to {}", data.n_participants(), data.records.len(), a.output.display());
    Ok(())
}

fn load_truth(cfg: &RunConfig) -> Result<Option<GroundTruth>> {
    cfg.paths.truth.as_deref().map(read_json).transpose()
}

/// Returns whether the convergence gate passed.
fn fit(a: FitArgs) -> Result<bool> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(v) = a.variant {
        cfg.sampler.variant = v;
    }
    let ing = ingest(&cfg.paths.data, &cfg.model)?;
    let truth = load_truth(&cfg)?;
    let draws = run_sampler(&ing.data, &cfg.model, &cfg.sampler, truth.as_ref().map(|t| &t.state))?;
    let report = convergence_report(&draws)?;
    let out = &cfg.paths.output;
    std::fs::create_dir_all(out)?;
    let variant = cfg.sampler.variant;
    draws.write_csv(create(&draws_path(&cfg, variant))?)?;
    report.write_csv(create(&out.join(format!("rhat_{}.csv", variant.name())))?)?;
    write_missingness(&ing.data, &cfg.model, create(&out.join("missingness.csv"))?)?;
    println!(
        "{} of {} parameters have R-hat above 1.1 ({:.2}%)",
        report.failures,
        report.rows.len(),
        100.0 * report.failure_fraction()
    );
    Ok(report.passes(GATE))
}

fn ppc(a: PpcArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let spec = &cfg.model;
    let data = ingest(&cfg.paths.data, spec)?.data;
    let runs: Vec<PosteriorDraws> = match &a.draws {
        Some(p) => vec![read_draws(p)?],
        None => cfg.experiment.ppc_variants.iter().map(|&v| read_draws(&draws_path(&cfg, v))).collect::<Result<_>>()?,
    };
    let out = &cfg.paths.output;
    std::fs::create_dir_all(out)?;
    let stratum = stratum_label(spec);
    let l = spec.n_factors();
    for draws in runs {
        let variant = draws.variant;
        let name = variant.name();
        let which = draws.equally_spaced(cfg.experiment.ppc_draws.min(draws.n_post()))?;
        let (obs, rep) = residual_pair(&draws, &data, spec, variant, &which, cfg.seed)?;
        write_variance_ratios(&variance_ratio(&obs, &rep, l, spec.n_windows())?, spec, create(&out.join(format!("variance_ratio_{name}.csv")))?)?;
        write_qq(&qq_export(&obs, &rep, l, &stratum)?, spec, create(&out.join(format!("qq_{name}.csv")))?)?;
        let mut reports = Vec::new();
        match variant {
            Variant::NoCohort => {
                reports.push(within_subject_ppp(&obs, &rep, l, Pairing::SameAge, &stratum)?);
                reports.push(within_subject_ppp(&obs, &rep, l, Pairing::DifferentAges, &stratum)?);
            }
            Variant::NoParticipant => {
                reports.push(cross_cohort_ppp(&obs, &rep, l, spec.n_windows(), &data.cohort_ids, &stratum)?);
            }
            Variant::Full => {}
        }
        for r in &reports {
            r.write_csv(spec, create(&out.join(format!("ppp_{}.csv", r.check)))?)?;
            r.write_draws_csv(spec, create(&out.join(format!("ppp_{}_draws.csv", r.check)))?)?;
            for g in &r.groups {
                println!("{} {}: PPP {}", r.check, g.label(spec), g.ppp);
            }
        }
    }
    Ok(())
}

fn impute(a: ImputeArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let data = ingest(&cfg.paths.data, &cfg.model)?.data;
    let draws = read_draws(&a.draws.clone().unwrap_or_else(|| draws_path(&cfg, cfg.sampler.variant)))?;
    let set = impute_missing(&draws, &data, &cfg.model, cfg.experiment.imputations, cfg.seed)?;
    let dir = cfg.paths.output.join("imputed");
    set.write(&cfg.model, &dir)?;
    println!("{} datasets with {} imputed cells each written to {}", set.datasets.len(), set.manifest.missing_cells, dir.display());
    Ok(())
}

fn pool(a: PoolArgs) -> Result<()> {
    let est = read_estimates(BufReader::new(File::open(&a.estimates)?))?;
    let p = rubin_pool(&est)?;
    println!("D = {}", p.d);
    println!("point = {}", p.point);
    println!("W = {}", p.within);
    println!("B = {}", p.between);
    println!("T = {}", p.total);
    if let Some(o) = &a.output {
        write_json(o, &p)?;
    }
    Ok(())
}

fn delete(a: DeleteArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    if cfg.experiment.deletions.is_empty() {
        return Err(Error::Config("experiment.deletions is empty".into()));
    }
    let spec = &cfg.model;
    let data = ingest(&cfg.paths.data, spec)?.data;
    let mut reduced = data;
    let mut held = Vec::new();
    for rule in &cfg.experiment.deletions {
        let (next, h) = apply_deletion(&reduced, rule)?;
        reduced = next;
        held.extend(h);
    }
    let out = &cfg.paths.output;
    std::fs::create_dir_all(out)?;
    write_dataset_file(&out.join("deleted.csv"), &reduced, spec)?;
    write_held_out(&held, spec, create(&out.join("held_out.csv"))?)?;
    println!("{} values deleted", held.len());
    if let Some(p) = &a.full_draws {
        let full = read_draws(p)?;
        let truth = load_truth(&cfg)?;
        let deleted = run_sampler(&reduced, spec, &cfg.sampler, truth.as_ref().map(|t| &t.state))?;
        deleted.write_csv(create(&out.join("draws_deleted.csv"))?)?;
        let mut factors: Vec<usize> = cfg.experiment.deletions.iter().map(|d| d.factor).collect();
        factors.sort_unstable();
        factors.dedup();
        for f in factors {
            let table = fixed_effect_preservation(&full, &deleted, spec, f)?;
            table.write_csv(spec, create(&out.join(format!("preservation_{}.csv", spec.risk_factors[f])))?)?;
            let p = table.probabilities();
            let inside = p.iter().filter(|v| (0.2..=0.8).contains(*v)).count();
            println!("{}: {inside} of {} probabilities in [0.2, 0.8]", spec.risk_factors[f], p.len());
        }
    }
    Ok(())
}

/// Returns whether every criterion passed.
fn validate(a: ValidateArgs) -> Result<bool> {
    let mut cfg = if a.quick { ValidationConfig::quick(0) } else { ValidationConfig::default() };
    if let Some(s) = a.seed {
        cfg.seed = s;
    } else if a.quick {
        cfg.seed = ValidationConfig::default().seed;
    }
    let outcomes = run_suite(&cfg, a.output.as_deref())?;
    for o in &outcomes {
        println!("{o}");
    }
    Ok(outcomes.iter().all(|o| o.pass))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Fit(a) => fit(a),
        Command::Ppc(a) => ppc(a).map(|_| true),
        Command::Impute(a) => impute(a).map(|_| true),
        Command::Pool(a) => pool(a).map(|_| true),
        Command::Delete(a) => delete(a).map(|_| true),
        Command::Validate(a) => validate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
