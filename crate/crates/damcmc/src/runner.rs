//! Builds the desk-scale testbeds from a run configuration and executes the
//! artifact-producing pipeline behind the command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, RunConfig};
use crate::eem::{fit_gain_offset, fit_prior_eem, EemState};
use crate::error::{Error, Result};
use crate::models::diffusion::Diffusion1d;
use crate::models::ect::EctModel;
use crate::models::linear_gaussian::LinearGaussian;
use crate::models::{FnModel, ForwardModel, ForwardPair, Level};
use crate::record::{
    content_hash, sha256_hex, write_chain_csv, write_shadow_csv, StateSnapshot,
};
use crate::report::{build_report, chain_metrics, plot_files, TimingOverride};
use crate::samplers::driver::{run_chain, ChainRunOutput, ChainSettings};
use crate::samplers::proposal::{ProposalMode, ProposalState};
use crate::samplers::SamplerKind;
use crate::target::{EemSource, NoiseModel, Posterior, PriorSpec};
use crate::types::{DataVector, ParameterVector};

/// Box half-widths for the diffusivity expansion coefficients; lower basis
/// functions are allowed a wider swing than the oscillatory tail.
const DIFFUSION_HALF_WIDTHS: [f64; 7] = [1.0, 0.6, 0.6, 0.4, 0.4, 0.3, 0.3];
const DIFFUSION_TRUTH: [f64; 7] = [0.3, 0.5, -0.4, 0.3, -0.2, 0.15, -0.1];
/// A phantom off the calibration family (center plus annular contrast) yet
/// close enough that the calibrated coarse map's bias stays within a few
/// noise standard deviations at 1000:1 SNR.
const ECT_TRUTH: [f64; 9] = [2.0, 1.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];

/// Stream separator so the synthetic-data draws never collide with the
/// seeded model construction, which consumes `model_seed` itself.
const DATA_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
/// Stream separator for the offline error-model fit, keeping the chain's
/// random stream independent of the number of fitting draws.
const EEM_STREAM: u64 = 0x5851_f42d_4c95_7f2d;

/// A fully assembled inverse problem: forward pair, noise, prior, one
/// synthetic observation, and the starting point.
pub struct Problem {
    pub pair: ForwardPair,
    pub noise: NoiseModel,
    pub prior: PriorSpec,
    pub d_obs: DataVector,
    pub truth: ParameterVector,
    pub x0: ParameterVector,
}

impl Problem {
    pub fn posterior(&self) -> Posterior<'_> {
        Posterior {
            pair: &self.pair,
            noise: &self.noise,
            prior: &self.prior,
            d_obs: &self.d_obs,
        }
    }
}

fn resolve_truth(default: &[f64], from_config: &Option<Vec<f64>>) -> Result<ParameterVector> {
    match from_config {
        Some(t) => ParameterVector::new(t.clone()),
        None => ParameterVector::new(default.to_vec()),
    }
}

fn resolve_x0(default: Vec<f64>, init: &Option<Vec<f64>>) -> Result<ParameterVector> {
    match init {
        Some(v) => ParameterVector::new(v.clone()),
        None => ParameterVector::new(default),
    }
}

/// Instantiates the configured testbed. Synthetic data depend only on the
/// model seed, so chains with different sampling seeds share one dataset.
pub fn build_problem(config: &RunConfig) -> Result<Problem> {
    match &config.model {
        ModelConfig::LinearGaussian {
            dim,
            data_dim,
            perturbation,
            noise_sigma,
            model_seed,
            truth,
        } => {
            let model = LinearGaussian::seeded(*dim, *data_dim, *perturbation, *model_seed);
            let noise = NoiseModel::isotropic(*data_dim, noise_sigma * noise_sigma)?;
            let prior = PriorSpec::gaussian(DVector::zeros(*dim), DMatrix::identity(*dim, *dim))?;
            let mut data_rng = ChaCha8Rng::seed_from_u64(model_seed ^ DATA_STREAM);
            let truth = match truth {
                Some(t) => ParameterVector::new(t.clone())?,
                None => prior.sample(&mut data_rng)?,
            };
            let clean = model.evaluate(&truth, Level::Exact)?;
            let d_obs = DataVector::from_vector(clean.as_vector() + noise.sample(&mut data_rng))?;
            let x0 = resolve_x0(vec![0.0; *dim], &config.init)?;
            Ok(Problem {
                pair: ForwardPair::new(Arc::new(model)),
                noise,
                prior,
                d_obs,
                truth,
                x0,
            })
        }
        ModelConfig::Diffusion {
            n_fine,
            n_coarse,
            noise_sigma,
            model_seed,
            truth,
        } => {
            let model = Diffusion1d::new(*n_fine, *n_coarse)?;
            let m = model.data_dim();
            let noise = NoiseModel::isotropic(m, noise_sigma * noise_sigma)?;
            let bounds = DIFFUSION_HALF_WIDTHS.iter().map(|w| (-w, *w)).collect();
            let prior = PriorSpec::uniform_box(bounds)?;
            let truth = resolve_truth(&DIFFUSION_TRUTH, truth)?;
            let clean = model.evaluate(&truth, Level::Exact)?;
            let mut data_rng = ChaCha8Rng::seed_from_u64(model_seed ^ DATA_STREAM);
            let d_obs = DataVector::from_vector(clean.as_vector() + noise.sample(&mut data_rng))?;
            let x0 = resolve_x0(vec![0.0; DIFFUSION_HALF_WIDTHS.len()], &config.init)?;
            Ok(Problem {
                pair: ForwardPair::new(Arc::new(model)),
                noise,
                prior,
                d_obs,
                truth,
                x0,
            })
        }
        ModelConfig::Ect {
            snr,
            calibrated,
            model_seed,
            truth,
        } => {
            let mut model = EctModel::standard()?;
            if *calibrated {
                // Noise-free calibration frames: the reference measurements
                // use the exact solver on the two known phantoms.
                let empty = EctModel::frame_empty();
                let full = EctModel::frame_center_inclusion(3.0);
                let cal = fit_gain_offset(
                    &model.raw_reduced(&empty)?,
                    &model.raw_reduced(&full)?,
                    &model.evaluate(&empty, Level::Exact)?,
                    &model.evaluate(&full, Level::Exact)?,
                )?;
                model.set_calibration(cal)?;
            }
            let dim = model.parameter_dim();
            let m = model.data_dim();
            let prior = PriorSpec::uniform_box(vec![(1.0, 5.0); dim])?;
            let truth = resolve_truth(&ECT_TRUTH, truth)?;
            let clean = model.evaluate(&truth, Level::Exact)?;
            let rms = (clean.as_vector().norm_squared() / m as f64).sqrt();
            let sigma = rms / snr;
            let noise = NoiseModel::isotropic(m, sigma * sigma)?;
            let mut data_rng = ChaCha8Rng::seed_from_u64(model_seed ^ DATA_STREAM);
            let d_obs = DataVector::from_vector(clean.as_vector() + noise.sample(&mut data_rng))?;
            let x0 = resolve_x0(vec![2.0; dim], &config.init)?;
            Ok(Problem {
                pair: ForwardPair::new(Arc::new(model)),
                noise,
                prior,
                d_obs,
                truth,
                x0,
            })
        }
        ModelConfig::Failing { fail_after } => {
            let budget = *fail_after;
            let calls = AtomicU64::new(0);
            let model = FnModel::new(
                1,
                1,
                move |x| {
                    if calls.fetch_add(1, Ordering::SeqCst) >= budget {
                        return Err(Error::Solver(format!(
                            "synthetic breakdown after {budget} exact evaluations"
                        )));
                    }
                    DataVector::new(vec![x[0]])
                },
                |x| DataVector::new(vec![0.9 * x[0]]),
            );
            Ok(Problem {
                pair: ForwardPair::new(Arc::new(model)),
                noise: NoiseModel::isotropic(1, 1.0)?,
                prior: PriorSpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1))?,
                d_obs: DataVector::new(vec![0.0])?,
                truth: ParameterVector::new(vec![0.0])?,
                x0: resolve_x0(vec![0.0], &config.init)?,
            })
        }
    }
}

/// The initial reduced-map error model for a run: identity when the
/// approximation carries none, an offline prior fit when configured, and an
/// empty zero-count state for the adaptively absorbed variants.
pub fn initial_eem(config: &RunConfig, problem: &Problem) -> Result<EemState> {
    let m = problem.pair.data_dim();
    let Some(spec) = config.approx_spec()? else {
        return Ok(EemState::identity(m));
    };
    match spec.eem_source {
        EemSource::None | EemSource::PosteriorAdaptive => Ok(EemState::identity(m)),
        EemSource::PriorFitted => {
            let l = config.prior_eem_samples.ok_or_else(|| Error::InvalidConfig {
                field: "prior_eem_samples".into(),
                reason: "required by a prior-fitted error model".into(),
            })?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ EEM_STREAM);
            fit_prior_eem(&problem.pair, &problem.prior, l, &mut rng)
        }
    }
}

fn initial_proposal(config: &RunConfig, dim: usize) -> Result<ProposalState> {
    match config.proposal.mode {
        ProposalMode::Am => ProposalState::am(dim),
        ProposalMode::Gcam => {
            let groups = config
                .proposal
                .groups
                .clone()
                .unwrap_or_else(|| (0..dim).map(|i| vec![i]).collect());
            ProposalState::gcam(dim, groups, config.proposal.target_accept)
        }
    }
}

fn chain_settings(config: &RunConfig) -> Result<ChainSettings> {
    let adaptation_end = config
        .adaptation_end_fraction
        .map(|f| (config.steps as f64 * f).floor() as u64);
    Ok(ChainSettings {
        sampler: config.sampler,
        spec: config.approx_spec()?,
        steps: config.steps,
        adaptation_end,
        shadow: config.shadow_chain,
        log_accepted_residuals: config.sampler != SamplerKind::Mh,
    })
}

/// Runs the configured chain in memory. Artifact writing is separate so
/// tests can drive runs without a filesystem.
pub fn run_configured(config: &RunConfig) -> Result<(Problem, ChainRunOutput)> {
    config.validate()?;
    let problem = build_problem(config)?;
    let eem = initial_eem(config, &problem)?;
    let proposal = initial_proposal(config, problem.pair.parameter_dim())?;
    let settings = chain_settings(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let posterior = problem.posterior();
    let output = run_chain(problem.x0.clone(), &posterior, eem, proposal, &settings, &mut rng)?;
    Ok((problem, output))
}

/// What a finished run left behind, for exit-code mapping and logging.
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub steps_completed: u64,
    pub chain_hash: String,
    pub exact_calls: u64,
    pub reduced_calls: u64,
    pub failure: Option<String>,
}

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::InvalidConfig {
        field: path.display().to_string(),
        reason: format!("cannot write file: {e}"),
    })
}

fn residuals_csv(residuals: &[Vec<f64>], m: usize) -> String {
    let mut out = String::from("transition");
    for i in 0..m {
        out.push_str(&format!(",r{i}"));
    }
    out.push('\n');
    for (k, r) in residuals.iter().enumerate() {
        out.push_str(&k.to_string());
        for v in r {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

/// Executes a run end to end and writes every artifact into `out_dir`:
/// the canonical config copy, the chain log (with a trailing `# error:`
/// marker when the run broke mid-chain), the companion-chain log and
/// accepted-transition residuals when present, the resumable state
/// snapshot, and, for completed runs, the report plus plot CSV files.
pub fn execute_run(config: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    let (problem, output) = run_configured(config)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::InvalidConfig {
        field: out_dir.display().to_string(),
        reason: format!("cannot create output directory: {e}"),
    })?;
    let canonical = config.canonical_json();
    write(&out_dir.join("config.json"), &canonical)?;

    let dim = problem.pair.parameter_dim();
    let mut chain = write_chain_csv(&output.rows, dim);
    if let Some(msg) = &output.failure {
        chain.push_str(&format!("# error: {}\n", msg.replace('\n', " ")));
    }
    write(&out_dir.join("chain.csv"), &chain)?;

    if let Some(shadow) = &output.shadow_rows {
        write(&out_dir.join("shadow.csv"), &write_shadow_csv(shadow, dim))?;
    }
    if !output.accepted_residuals.is_empty() {
        let m = problem.pair.data_dim();
        write(
            &out_dir.join("residuals.csv"),
            &residuals_csv(&output.accepted_residuals, m),
        )?;
    }

    let config_hash = sha256_hex(canonical.as_bytes());
    let snapshot = StateSnapshot::new(
        config_hash.clone(),
        output.proposal.clone(),
        output.eem.clone(),
        output.rng_word_pos,
    );
    write(&out_dir.join("state.json"), &snapshot.to_json()?)?;
    write(
        &out_dir.join("trace.json"),
        &serde_json::to_string_pretty(&output.trace).expect("trace serialization cannot fail"),
    )?;

    if output.failure.is_none() {
        let metrics = chain_metrics("chain", &output.rows, config.burn_in_fraction)?;
        let report = build_report(
            vec![metrics],
            None,
            config.burn_in_fraction,
            Some(config_hash),
            TimingOverride::default(),
        )?;
        write(&out_dir.join("report.json"), &report.to_json())?;
        let plots = out_dir.join("plots");
        fs::create_dir_all(&plots).map_err(|e| Error::InvalidConfig {
            field: plots.display().to_string(),
            reason: format!("cannot create plot directory: {e}"),
        })?;
        for (name, content) in plot_files(&output.rows, config.burn_in_fraction)? {
            write(&plots.join(name), &content)?;
        }
    }

    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        steps_completed: output.rows.len() as u64 - 1,
        chain_hash: content_hash(&chain),
        exact_calls: output.exact_calls,
        reduced_calls: output.reduced_calls,
        failure: output.failure,
    })
}

/// Fits the offline reduced-map error model from prior draws and writes it
/// as `eem.json` into `out_dir`.
pub fn execute_fit_prior_eem(config: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let l = config.prior_eem_samples.ok_or_else(|| Error::InvalidConfig {
        field: "prior_eem_samples".into(),
        reason: "fit-prior-eem needs the number of prior draws".into(),
    })?;
    let problem = build_problem(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ EEM_STREAM);
    let eem = fit_prior_eem(&problem.pair, &problem.prior, l, &mut rng)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::InvalidConfig {
        field: out_dir.display().to_string(),
        reason: format!("cannot create output directory: {e}"),
    })?;
    let path = out_dir.join("eem.json");
    write(
        &path,
        &serde_json::to_string_pretty(&eem).expect("error-model serialization cannot fail"),
    )?;
    Ok(path)
}
