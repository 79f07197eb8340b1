//! Model definitions. Each model owns its data and exposes the variational
//! objective as a smooth function of (ξ, α), the expected log prior ℓ(α, m),
//! an exact unconstrained log joint density for MCMC, and metadata tying the
//! moment vector to parameter names.

mod conjugate;
mod gaussian;
mod microcredit;

pub use conjugate::ConjugateNormalModel;
pub use gaussian::GaussianTargetModel;
pub use microcredit::{
    draw_site_effects, simulate, DataRow, MicrocreditDataset, MicrocreditModel, ModelParameters,
    SiteStats,
};

use crate::dualnum::Real;
use crate::varfamily::CoordinateLayout;
use crate::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Length of the hyperparameter vector α. Every model accepts the same
/// layout and simply ignores the entries it has no use for, which keeps
/// sensitivity reports aligned across models.
pub const ALPHA_DIM: usize = 10;

/// Names of the α entries, in vector order. The precision matrix Λ is
/// reported by its lower triangle, with `lambda12` standing for both
/// symmetric off-diagonal entries at once.
pub const ALPHA_NAMES: [&str; ALPHA_DIM] = [
    "mu0",
    "tau0",
    "lambda11",
    "lambda12",
    "lambda22",
    "lkj_eta",
    "scale_shape",
    "scale_rate",
    "sigma_shape",
    "sigma_rate",
];

/// Prior hyperparameters α for the hierarchical model family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorParams {
    /// Prior mean of the pooled control effect μ.
    pub mu0: f64,
    /// Prior mean of the pooled treatment effect τ.
    pub tau0: f64,
    /// Precision matrix Λ of the (μ, τ) prior, lower triangle.
    pub lambda11: f64,
    pub lambda12: f64,
    pub lambda22: f64,
    /// LKJ concentration η on the random-effect correlation.
    pub lkj_eta: f64,
    /// Gamma(shape, rate) prior on each reciprocal scale s_j⁻¹ of C.
    pub scale_shape: f64,
    pub scale_rate: f64,
    /// Gamma(shape, rate) prior on each noise precision σ_k⁻².
    pub sigma_shape: f64,
    pub sigma_rate: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            mu0: 0.0,
            tau0: 0.0,
            lambda11: 0.03,
            lambda12: 0.0,
            lambda22: 0.02,
            lkj_eta: 15.01,
            scale_shape: 20.01,
            scale_rate: 20.01,
            sigma_shape: 2.01,
            sigma_rate: 2.01,
        }
    }
}

impl PriorParams {
    pub fn to_alpha(&self) -> [f64; ALPHA_DIM] {
        [
            self.mu0,
            self.tau0,
            self.lambda11,
            self.lambda12,
            self.lambda22,
            self.lkj_eta,
            self.scale_shape,
            self.scale_rate,
            self.sigma_shape,
            self.sigma_rate,
        ]
    }

    pub fn from_alpha(alpha: &[f64]) -> Result<Self> {
        if alpha.len() != ALPHA_DIM {
            return Err(Error::InvalidParameter(format!(
                "hyperparameter vector must have {ALPHA_DIM} entries, got {}",
                alpha.len()
            )));
        }
        Ok(Self {
            mu0: alpha[0],
            tau0: alpha[1],
            lambda11: alpha[2],
            lambda12: alpha[3],
            lambda22: alpha[4],
            lkj_eta: alpha[5],
            scale_shape: alpha[6],
            scale_rate: alpha[7],
            sigma_shape: alpha[8],
            sigma_rate: alpha[9],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_alpha();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("hyperparameters must be finite".into()));
        }
        if self.lambda11 <= 0.0 || self.lambda11 * self.lambda22 <= self.lambda12 * self.lambda12 {
            return Err(Error::InvalidParameter(
                "lambda must be a symmetric positive definite precision matrix".into(),
            ));
        }
        for (name, v) in [
            ("lkj_eta", self.lkj_eta),
            ("scale_shape", self.scale_shape),
            ("scale_rate", self.scale_rate),
            ("sigma_shape", self.sigma_shape),
            ("sigma_rate", self.sigma_rate),
        ] {
            if v <= 0.0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// A model ready to fit: its data is bound at construction, so every method
/// is a pure function of the variational coordinates and α.
pub trait Model: Sync {
    /// Factor blocks and the ξ ↔ moment correspondence.
    fn layout(&self) -> &CoordinateLayout;

    /// KL(q‖p) up to an additive constant independent of (ξ, α).
    fn kl<S: Real>(&self, xi: &[S], alpha: &[S]) -> Result<S>;

    /// ℓ(α, m) = E_q[log p(θ | α)], the only α-dependent part of the
    /// objective.
    fn expected_log_prior<S: Real>(&self, xi: &[S], alpha: &[S]) -> Result<S>;

    /// Log of likelihood times prior at one unconstrained parameter point,
    /// including the change-of-variables Jacobian terms.
    fn log_joint(&self, theta: &[f64], alpha: &[f64]) -> Result<f64>;

    /// Dimension of θ; equals the length of the moment vector.
    fn theta_dim(&self) -> usize {
        self.layout().n_moments()
    }

    /// Names of the θ components, aligned with the moment vector.
    fn theta_names(&self) -> Vec<String>;

    /// Names of the constrained view of θ.
    fn constrained_names(&self) -> Vec<String> {
        self.theta_names()
    }

    /// Map one unconstrained θ point to its constrained view.
    fn constrain(&self, theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }

    /// Starting coordinates for the optimizer.
    fn default_init(&self) -> Vec<f64>;

    /// The α this model is fit with when the caller does not override it.
    fn default_alpha(&self) -> Vec<f64> {
        PriorParams::default().to_alpha().to_vec()
    }

    /// Upper-triangle coordinate pairs whose mixed second derivatives of kl
    /// can be nonzero. `None` means the Hessian should be treated as dense.
    ///
    /// Models with factorized objectives override this so Hessian passes
    /// skip pairs that never interact; the claim is checked in tests against
    /// the dense Hessian.
    fn interaction_pairs(&self) -> Option<Vec<(usize, usize)>> {
        None
    }
}

/// log(1 − tanh²x), evaluated as −2·log cosh x to stay finite for large |x|.
pub(crate) fn log1m_tanh2<S: Real>(x: S) -> Result<S> {
    let a = x.abs();
    let small = (S::constant(-2.0) * a).exp();
    Ok(S::constant(-2.0) * (a + small.ln_1p()? - S::constant(std::f64::consts::LN_2)))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::dualnum::{self, HyperDual};
    use crate::fd;

    /// Autodiff ξ-gradient of kl against Richardson finite differences.
    pub fn check_kl_grad_fd<M: Model>(model: &M, xi: &[f64], alpha: &[f64], tol: f64) {
        let alpha_hd: Vec<HyperDual> = alpha.iter().map(|&a| HyperDual::constant(a)).collect();
        let grad = dualnum::gradient(|x| model.kl(x, &alpha_hd), xi).unwrap();
        let fd_grad = fd::gradient(&|x: &[f64]| model.kl(x, alpha).unwrap(), xi, 1e-5);
        let scale = grad.iter().fold(1.0_f64, |m, g| m.max(g.abs()));
        for i in 0..xi.len() {
            assert!(
                (grad[i] - fd_grad[i]).abs() <= tol * scale,
                "kl gradient mismatch at coordinate {i}: ad {} vs fd {}",
                grad[i],
                fd_grad[i]
            );
        }
    }

    /// Autodiff α-gradient of ℓ against finite differences.
    pub fn check_ell_alpha_grad_fd<M: Model>(model: &M, xi: &[f64], alpha: &[f64], tol: f64) {
        let xi_hd: Vec<HyperDual> = xi.iter().map(|&v| HyperDual::constant(v)).collect();
        let grad =
            dualnum::gradient(|a| model.expected_log_prior(&xi_hd, a), alpha).unwrap();
        let fd_grad = fd::gradient(
            &|a: &[f64]| model.expected_log_prior(xi, a).unwrap(),
            alpha,
            1e-5,
        );
        let scale = grad.iter().fold(1.0_f64, |m, g| m.max(g.abs()));
        for j in 0..alpha.len() {
            assert!(
                (grad[j] - fd_grad[j]).abs() <= tol * scale,
                "alpha gradient mismatch at entry {j}: ad {} vs fd {}",
                grad[j],
                fd_grad[j]
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_priors_round_trip_through_alpha() {
        let p = PriorParams::default();
        assert_eq!(p.lambda11, 0.03);
        assert_eq!(p.lambda22, 0.02);
        assert_eq!(p.lkj_eta, 15.01);
        assert_eq!(p.scale_shape, 20.01);
        assert_eq!(p.sigma_rate, 2.01);
        let alpha = p.to_alpha();
        assert_eq!(PriorParams::from_alpha(&alpha).unwrap(), p);
        p.validate().unwrap();
    }

    #[test]
    fn invalid_priors_are_rejected() {
        let mut p = PriorParams::default();
        p.lambda12 = 1.0;
        assert!(p.validate().is_err());

        let mut p = PriorParams::default();
        p.sigma_shape = -1.0;
        assert!(p.validate().is_err());

        assert!(PriorParams::from_alpha(&[0.0; 3]).is_err());
    }

    #[test]
    fn stable_log1m_tanh2_matches_naive_form() {
        for &x in &[-3.0, -0.5, 0.0, 0.1, 2.0] {
            let naive = (1.0 - x.tanh() * x.tanh()).ln();
            let stable = log1m_tanh2(x).unwrap();
            assert!((naive - stable).abs() < 1e-12, "x={x}: {naive} vs {stable}");
        }
        // Far in the tails the naive form underflows to −∞ but the stable
        // form keeps the exact asymptote −2|x| + log 4.
        let far = log1m_tanh2(400.0).unwrap();
        assert!((far - (-800.0 + 4.0_f64.ln())).abs() < 1e-9);
    }
}
