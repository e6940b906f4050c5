//! Experiment configuration: the JSON schema for runs, with validation that
//! names the offending field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::diffusion::N_BASIS;
use crate::models::ect::N_REGIONS;
use crate::samplers::proposal::{ProposalMode, DEFAULT_TARGET_ACCEPT};
use crate::samplers::SamplerKind;
use crate::target::{ApproxKind, ApproxSpec, EemSource};

fn default_burn_in() -> f64 {
    0.2
}

fn default_target_accept() -> f64 {
    DEFAULT_TARGET_ACCEPT
}

fn default_lg_dim() -> usize {
    4
}

fn default_lg_data_dim() -> usize {
    8
}

fn default_lg_perturbation() -> f64 {
    0.05
}

fn default_lg_noise_sigma() -> f64 {
    0.1
}

fn default_model_seed() -> u64 {
    42
}

fn default_n_fine() -> usize {
    256
}

fn default_n_coarse() -> usize {
    16
}

fn default_diffusion_noise_sigma() -> f64 {
    0.01
}

fn default_ect_snr() -> f64 {
    1000.0
}

fn default_true() -> bool {
    true
}

fn default_fail_after() -> u64 {
    3
}

/// Which testbed the run samples, with its knobs. The observed data are
/// synthesized from the configured truth on the exact map, perturbed by the
/// configured noise, deterministically from `model_seed`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `A x` vs a perturbed `A* x` with a standard Gaussian prior; the
    /// posterior is available in closed form.
    LinearGaussian {
        #[serde(default = "default_lg_dim")]
        dim: usize,
        #[serde(default = "default_lg_data_dim")]
        data_dim: usize,
        #[serde(default = "default_lg_perturbation")]
        perturbation: f64,
        #[serde(default = "default_lg_noise_sigma")]
        noise_sigma: f64,
        #[serde(default = "default_model_seed")]
        model_seed: u64,
        #[serde(default)]
        truth: Option<Vec<f64>>,
    },
    /// 1D transient diffusion with a log-conductivity basis; fine and coarse
    /// finite-volume grids.
    Diffusion {
        #[serde(default = "default_n_fine")]
        n_fine: usize,
        #[serde(default = "default_n_coarse")]
        n_coarse: usize,
        #[serde(default = "default_diffusion_noise_sigma")]
        noise_sigma: f64,
        #[serde(default = "default_model_seed")]
        model_seed: u64,
        #[serde(default)]
        truth: Option<Vec<f64>>,
    },
    /// Miniature capacitance tomography; fine and coarse FEM meshes, data at
    /// the given signal-to-noise ratio, optional two-frame calibration of
    /// the coarse map.
    Ect {
        #[serde(default = "default_ect_snr")]
        snr: f64,
        #[serde(default = "default_true")]
        calibrated: bool,
        #[serde(default = "default_model_seed")]
        model_seed: u64,
        #[serde(default)]
        truth: Option<Vec<f64>>,
    },
    /// Synthetic model whose exact map errors after a fixed number of calls;
    /// exercises mid-run failure handling.
    Failing {
        #[serde(default = "default_fail_after")]
        fail_after: u64,
    },
}

impl ModelConfig {
    pub fn parameter_dim(&self) -> usize {
        match self {
            Self::LinearGaussian { dim, .. } => *dim,
            Self::Diffusion { .. } => N_BASIS,
            Self::Ect { .. } => N_REGIONS,
            Self::Failing { .. } => 1,
        }
    }
}

/// Approximation block of the config; collapses to an [`ApproxSpec`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ApproxConfig {
    pub kind: ApproxKind,
    #[serde(default = "ApproxConfig::default_eem")]
    pub eem: EemSource,
    #[serde(default)]
    pub gain: bool,
}

impl ApproxConfig {
    fn default_eem() -> EemSource {
        EemSource::None
    }

    pub fn to_spec(self) -> Result<ApproxSpec> {
        ApproxSpec::new(self.kind, self.eem, self.gain)
    }
}

/// Proposal block of the config.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    #[serde(default = "ProposalConfig::default_mode")]
    pub mode: ProposalMode,
    /// Index groups for the grouped kernel; defaults to one group per
    /// coordinate. Ignored in plain mode.
    #[serde(default)]
    pub groups: Option<Vec<Vec<usize>>>,
    #[serde(default = "default_target_accept")]
    pub target_accept: f64,
}

impl ProposalConfig {
    fn default_mode() -> ProposalMode {
        ProposalMode::Am
    }
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            mode: ProposalMode::Am,
            groups: None,
            target_accept: DEFAULT_TARGET_ACCEPT,
        }
    }
}

/// A complete experiment description. Everything a run does is a
/// deterministic function of this value.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerKind,
    #[serde(default)]
    pub approx: Option<ApproxConfig>,
    #[serde(default)]
    pub proposal: ProposalConfig,
    pub steps: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Prior draws for the prior-fitted error model.
    #[serde(default)]
    pub prior_eem_samples: Option<usize>,
    /// Log the coupled stage-1-only companion trajectory.
    #[serde(default)]
    pub shadow_chain: bool,
    /// Stop all adaptation after this fraction of the run.
    #[serde(default)]
    pub adaptation_end_fraction: Option<f64>,
    /// Starting point; defaults to a model-specific interior point.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Parses and validates a config from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)
            .map_err(|e| invalid("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// The canonical serialized form; its hash identifies the run.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// The approximation spec for two-stage samplers, `None` for plain MH
    /// (which ignores any approx block).
    pub fn approx_spec(&self) -> Result<Option<ApproxSpec>> {
        if self.sampler == SamplerKind::Mh {
            return Ok(None);
        }
        let approx = self
            .approx
            .ok_or_else(|| invalid("approx", "two-stage samplers need an approximation block"))?;
        approx.to_spec().map(Some)
    }

    /// Cross-field validation with field-path error messages.
    pub fn validate(&self) -> Result<()> {
        let dim = self.model.parameter_dim();

        match &self.model {
            ModelConfig::LinearGaussian {
                dim,
                data_dim,
                perturbation,
                noise_sigma,
                ..
            } => {
                if *dim == 0 {
                    return Err(invalid("model.dim", "must be positive"));
                }
                if *data_dim == 0 {
                    return Err(invalid("model.data_dim", "must be positive"));
                }
                if !(perturbation.is_finite() && *perturbation >= 0.0) {
                    return Err(invalid("model.perturbation", "must be finite and nonnegative"));
                }
                if !(noise_sigma.is_finite() && *noise_sigma > 0.0) {
                    return Err(invalid("model.noise_sigma", "must be positive"));
                }
            }
            ModelConfig::Diffusion {
                n_fine,
                n_coarse,
                noise_sigma,
                ..
            } => {
                if *n_coarse < 4 || n_fine < n_coarse {
                    return Err(invalid("model.n_coarse", "need 4 <= n_coarse <= n_fine"));
                }
                if !(noise_sigma.is_finite() && *noise_sigma > 0.0) {
                    return Err(invalid("model.noise_sigma", "must be positive"));
                }
            }
            ModelConfig::Ect { snr, .. } => {
                if !(snr.is_finite() && *snr > 0.0) {
                    return Err(invalid("model.snr", "must be positive"));
                }
            }
            ModelConfig::Failing { .. } => {}
        }

        if let ModelConfig::LinearGaussian {
            truth: Some(truth), ..
        }
        | ModelConfig::Diffusion {
            truth: Some(truth), ..
        }
        | ModelConfig::Ect {
            truth: Some(truth), ..
        } = &self.model
        {
            if truth.len() != dim {
                return Err(invalid(
                    "model.truth",
                    format!("length {} does not match dimension {dim}", truth.len()),
                ));
            }
            if truth.iter().any(|v| !v.is_finite()) {
                return Err(invalid("model.truth", "entries must be finite"));
            }
        }

        if self.sampler != SamplerKind::Mh {
            let approx = self
                .approx
                .ok_or_else(|| invalid("approx", "two-stage samplers need an approximation block"))?;
            approx.to_spec()?;
            if self.sampler == SamplerKind::Da && approx.eem == EemSource::PosteriorAdaptive {
                return Err(invalid(
                    "approx.eem",
                    "a posterior-adaptive error model requires the ada sampler",
                ));
            }
            if approx.eem == EemSource::PriorFitted {
                match self.prior_eem_samples {
                    Some(l) if l >= 2 => {}
                    Some(l) => {
                        return Err(invalid(
                            "prior_eem_samples",
                            format!("need at least 2 prior draws, got {l}"),
                        ))
                    }
                    None => {
                        return Err(invalid(
                            "prior_eem_samples",
                            "required when approx.eem is prior_fitted",
                        ))
                    }
                }
            }
        }

        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(invalid("burn_in_fraction", "must lie in [0, 1)"));
        }
        if let Some(f) = self.adaptation_end_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(invalid("adaptation_end_fraction", "must lie in (0, 1]"));
            }
        }
        if let Some(l) = self.prior_eem_samples {
            if l < 2 {
                return Err(invalid("prior_eem_samples", "need at least 2 prior draws"));
            }
        }

        if !(0.0 < self.proposal.target_accept && self.proposal.target_accept < 1.0) {
            return Err(invalid("proposal.target_accept", "must lie in (0, 1)"));
        }
        if let Some(groups) = &self.proposal.groups {
            if self.proposal.mode == ProposalMode::Am && groups.len() > 1 {
                return Err(invalid(
                    "proposal.groups",
                    "plain mode uses a single full-dimensional group",
                ));
            }
            let mut seen: Vec<usize> = groups.iter().flatten().copied().collect();
            seen.sort_unstable();
            if groups.iter().any(|g| g.is_empty()) || seen != (0..dim).collect::<Vec<_>>() {
                return Err(invalid(
                    "proposal.groups",
                    format!("must partition coordinates 0..{dim} into nonempty groups"),
                ));
            }
        }

        if let Some(init) = &self.init {
            if init.len() != dim {
                return Err(invalid(
                    "init",
                    format!("length {} does not match dimension {dim}", init.len()),
                ));
            }
            if init.iter().any(|v| !v.is_finite()) {
                return Err(invalid("init", "entries must be finite"));
            }
        }

        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "model": {"kind": "linear_gaussian"},
            "sampler": "mh",
            "steps": 100,
            "seed": 7
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let config = RunConfig::from_json(&minimal_json()).unwrap();
        assert_eq!(config.burn_in_fraction, 0.2);
        assert_eq!(config.proposal.mode, ProposalMode::Am);
        assert_eq!(config.proposal.target_accept, 0.13);
        assert_eq!(config.model.parameter_dim(), 4);
        assert!(config.approx_spec().unwrap().is_none());
    }

    #[test]
    fn unknown_fields_are_rejected_with_their_name() {
        let text = r#"{
            "model": {"kind": "linear_gaussian"},
            "sampler": "mh",
            "steps": 100,
            "seed": 7,
            "stepz": 5
        }"#;
        let err = RunConfig::from_json(text).unwrap_err().to_string();
        assert!(err.contains("stepz"), "{err}");
    }

    #[test]
    fn two_stage_without_approx_block_names_the_field() {
        let text = r#"{
            "model": {"kind": "diffusion"},
            "sampler": "da",
            "steps": 100,
            "seed": 7
        }"#;
        let err = RunConfig::from_json(text).unwrap_err().to_string();
        assert!(err.contains("approx"), "{err}");
    }

    #[test]
    fn prior_fitted_requires_the_sample_count() {
        let text = r#"{
            "model": {"kind": "diffusion"},
            "sampler": "da",
            "approx": {"kind": "approx2", "eem": "prior_fitted"},
            "steps": 100,
            "seed": 7
        }"#;
        let err = RunConfig::from_json(text).unwrap_err().to_string();
        assert!(err.contains("prior_eem_samples"), "{err}");
    }

    #[test]
    fn adaptive_error_model_needs_the_adaptive_sampler() {
        let text = r#"{
            "model": {"kind": "diffusion"},
            "sampler": "da",
            "approx": {"kind": "approx4", "eem": "posterior_adaptive"},
            "steps": 100,
            "seed": 7
        }"#;
        let err = RunConfig::from_json(text).unwrap_err().to_string();
        assert!(err.contains("approx.eem"), "{err}");
        let text = text.replace("\"da\"", "\"ada\"");
        RunConfig::from_json(&text).unwrap();
    }

    #[test]
    fn bad_group_partitions_are_rejected() {
        let text = r#"{
            "model": {"kind": "linear_gaussian"},
            "sampler": "mh",
            "proposal": {"mode": "gcam", "groups": [[0, 1], [1, 2, 3]]},
            "steps": 100,
            "seed": 7
        }"#;
        let err = RunConfig::from_json(text).unwrap_err().to_string();
        assert!(err.contains("proposal.groups"), "{err}");
    }

    #[test]
    fn init_length_is_checked() {
        let text = r#"{
            "model": {"kind": "ect"},
            "sampler": "mh",
            "steps": 10,
            "seed": 7,
            "init": [1.0, 1.0]
        }"#;
        let err = RunConfig::from_json(text).unwrap_err().to_string();
        assert!(err.contains("init"), "{err}");
    }

    #[test]
    fn canonical_form_round_trips() {
        let text = r#"{
            "model": {"kind": "diffusion", "noise_sigma": 0.02},
            "sampler": "ada",
            "approx": {"kind": "approx4", "eem": "posterior_adaptive"},
            "proposal": {"mode": "gcam", "groups": [[0, 1, 2], [3, 4, 5, 6]], "target_accept": 0.2},
            "steps": 500,
            "seed": 11,
            "shadow_chain": true,
            "prior_eem_samples": 50,
            "adaptation_end_fraction": 0.5
        }"#;
        let config = RunConfig::from_json(text).unwrap();
        let round = RunConfig::from_json(&config.canonical_json()).unwrap();
        assert_eq!(config, round);
    }
}
