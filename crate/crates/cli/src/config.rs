//! Run configuration: JSON files with full-name keys mirroring the prior,
//! optimizer, and sampler settings. Unknown keys are rejected so a typo
//! fails loudly instead of silently running defaults, and command-line
//! flags take precedence over file values.

use std::path::Path;

use lrvb::models::{ModelParameters, PriorParams, ALPHA_NAMES};
use lrvb::{mcmc::McmcOptions, optimize::FitOptions, Error, Result};
use serde::{Deserialize, Serialize};

/// One run, fully specified. The echo of this struct inside every report
/// reproduces the run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// One of `microcredit`, `gaussian_target`, `conjugate_normal`.
    pub model: String,
    pub priors: Priors,
    pub optimizer: Optimizer,
    /// Gauss-Hermite node count for the correlation quadrature.
    pub quadrature_nodes: usize,
    /// Hyperparameter directions reported by `fit`, named after α entries.
    pub sensitivity_directions: Vec<String>,
    pub mcmc: Mcmc,
    /// Single seed behind every random subsystem; the simulator, the
    /// sampler, and site-effect draws each use their own stream of it.
    pub seed: u64,
    /// Target moments, required when `model` is `gaussian_target`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaussian_target: Option<GaussianTarget>,
    /// Observations, required when `model` is `conjugate_normal`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conjugate_normal: Option<ConjugateNormal>,
    /// Generating parameters; written by `simulate` and read back for
    /// oracle comparisons.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<Truth>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "microcredit".to_string(),
            priors: Priors::default(),
            optimizer: Optimizer::default(),
            quadrature_nodes: 21,
            sensitivity_directions: ALPHA_NAMES.iter().map(|s| s.to_string()).collect(),
            mcmc: Mcmc::default(),
            seed: 42,
            gaussian_target: None,
            conjugate_normal: None,
            truth: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.to_params().validate()?;
        self.optimizer.validate()?;
        if self.quadrature_nodes == 0 {
            return Err(Error::InvalidParameter("quadrature_nodes must be at least 1".into()));
        }
        for name in &self.sensitivity_directions {
            alpha_index(name)?;
        }
        if self.mcmc.n_draws == 0 {
            return Err(Error::InvalidParameter("mcmc.n_draws must be at least 1".into()));
        }
        if !(self.mcmc.initial_step > 0.0 && self.mcmc.initial_step.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mcmc.initial_step must be positive, got {}",
                self.mcmc.initial_step
            )));
        }
        if let Some(t) = &self.truth {
            t.validate()?;
        }
        Ok(())
    }

    /// Effective α vector for this run.
    pub fn alpha(&self) -> Vec<f64> {
        self.priors.to_params().to_alpha().to_vec()
    }
}

/// Position of a hyperparameter name in the α vector.
pub fn alpha_index(name: &str) -> Result<usize> {
    ALPHA_NAMES.iter().position(|n| *n == name).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "unknown hyperparameter `{name}`; valid names: {}",
            ALPHA_NAMES.join(", ")
        ))
    })
}

/// Prior hyperparameters, one key per α entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    pub mu0: f64,
    pub tau0: f64,
    pub lambda11: f64,
    pub lambda12: f64,
    pub lambda22: f64,
    pub lkj_eta: f64,
    pub scale_shape: f64,
    pub scale_rate: f64,
    pub sigma_shape: f64,
    pub sigma_rate: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self::from_params(PriorParams::default())
    }
}

impl Priors {
    pub fn from_params(p: PriorParams) -> Self {
        Self {
            mu0: p.mu0,
            tau0: p.tau0,
            lambda11: p.lambda11,
            lambda12: p.lambda12,
            lambda22: p.lambda22,
            lkj_eta: p.lkj_eta,
            scale_shape: p.scale_shape,
            scale_rate: p.scale_rate,
            sigma_shape: p.sigma_shape,
            sigma_rate: p.sigma_rate,
        }
    }

    pub fn to_params(self) -> PriorParams {
        PriorParams {
            mu0: self.mu0,
            tau0: self.tau0,
            lambda11: self.lambda11,
            lambda12: self.lambda12,
            lambda22: self.lambda22,
            lkj_eta: self.lkj_eta,
            scale_shape: self.scale_shape,
            scale_rate: self.scale_rate,
            sigma_shape: self.sigma_shape,
            sigma_rate: self.sigma_rate,
        }
    }
}

/// Newton trust-region settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optimizer {
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iterations: usize,
    pub initial_radius: f64,
}

impl Default for Optimizer {
    fn default() -> Self {
        let o = FitOptions::default();
        Self {
            grad_tol: o.grad_tol,
            step_tol: o.step_tol,
            max_iterations: o.max_iterations,
            initial_radius: o.initial_radius,
        }
    }
}

impl Optimizer {
    pub fn to_options(self) -> FitOptions {
        FitOptions {
            grad_tol: self.grad_tol,
            step_tol: self.step_tol,
            max_iterations: self.max_iterations,
            initial_radius: self.initial_radius,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("optimizer.grad_tol", self.grad_tol),
            ("optimizer.step_tol", self.step_tol),
            ("optimizer.initial_radius", self.initial_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter(
                "optimizer.max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Chain length and proposal settings for `check-mcmc`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mcmc {
    pub n_draws: usize,
    pub warmup: usize,
    pub initial_step: f64,
}

impl Default for Mcmc {
    fn default() -> Self {
        let o = McmcOptions::default();
        Self { n_draws: o.n_draws, warmup: o.warmup, initial_step: o.initial_step }
    }
}

impl Mcmc {
    /// Options for a chain whose warmup proposal starts from the given
    /// per-coordinate scales, normally the fitted factor sds.
    pub fn to_options(self, scales: Vec<f64>) -> McmcOptions {
        McmcOptions {
            n_draws: self.n_draws,
            warmup: self.warmup,
            initial_step: self.initial_step,
            initial_scales: Some(scales),
        }
    }
}

/// Mean and covariance of a synthetic Gaussian target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// Observations for the analytic conjugate-normal model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConjugateNormal {
    pub y: Vec<f64>,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
}

fn default_noise_sd() -> f64 {
    1.0
}

/// Generating parameters of a synthetic hierarchical dataset, in the same
/// unconstrained coordinates the model is fit in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    pub mu: f64,
    pub tau: f64,
    pub mu_k: Vec<f64>,
    pub tau_k: Vec<f64>,
    pub log_sigma2_inv: Vec<f64>,
    pub log_s1: f64,
    pub log_s2: f64,
    pub z_rho: f64,
    /// Observations per site.
    pub sizes: Vec<usize>,
}

impl Truth {
    pub fn from_parameters(p: &ModelParameters, sizes: Vec<usize>) -> Self {
        Self {
            mu: p.mu,
            tau: p.tau,
            mu_k: p.mu_k.clone(),
            tau_k: p.tau_k.clone(),
            log_sigma2_inv: p.log_sigma2_inv.clone(),
            log_s1: p.log_s1,
            log_s2: p.log_s2,
            z_rho: p.z_rho,
            sizes,
        }
    }

    pub fn to_parameters(&self) -> ModelParameters {
        ModelParameters {
            mu: self.mu,
            tau: self.tau,
            mu_k: self.mu_k.clone(),
            tau_k: self.tau_k.clone(),
            log_sigma2_inv: self.log_sigma2_inv.clone(),
            log_s1: self.log_s1,
            log_s2: self.log_s2,
            z_rho: self.z_rho,
        }
    }

    fn validate(&self) -> Result<()> {
        let k = self.mu_k.len();
        if self.tau_k.len() != k || self.log_sigma2_inv.len() != k || self.sizes.len() != k {
            return Err(Error::InvalidParameter(
                "truth.mu_k, truth.tau_k, truth.log_sigma2_inv, and truth.sizes must all have \
                 one entry per site"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_the_default_config() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model, "microcredit");
        assert_eq!(cfg.priors.lambda11, 0.03);
        assert_eq!(cfg.mcmc.n_draws, 20_000);
        assert_eq!(cfg.sensitivity_directions.len(), 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>("{\"sede\": 1}").unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
        let err = serde_json::from_str::<RunConfig>("{\"priors\": {\"lambda\": 1}}").unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
    }

    #[test]
    fn partial_sections_keep_the_remaining_defaults() {
        let cfg: RunConfig =
            serde_json::from_str("{\"priors\": {\"lambda11\": 1.0}, \"seed\": 7}").unwrap();
        assert_eq!(cfg.priors.lambda11, 1.0);
        assert_eq!(cfg.priors.lambda22, 0.02);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.model = "conjugate_normal".to_string();
        cfg.conjugate_normal = Some(ConjugateNormal { y: vec![1.0, 2.0], noise_sd: 0.5 });
        cfg.truth = None;
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_priors_fail_validation() {
        let cfg: RunConfig =
            serde_json::from_str("{\"priors\": {\"lambda11\": -1.0}}").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn direction_names_are_checked() {
        let cfg: RunConfig =
            serde_json::from_str("{\"sensitivity_directions\": [\"lambda13\"]}").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("valid names"), "{err}");
        assert!(alpha_index("lambda11").is_ok());
    }
}
