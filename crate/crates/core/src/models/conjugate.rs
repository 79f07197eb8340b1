//! Normal-mean model with known noise: the posterior is available in closed
//! form, so every downstream quantity has an analytic value to check.

use crate::dualnum::Real;
use crate::varfamily::{CoordinateLayout, FactorKind, GaussianFactor1D, ScaleParam};
use crate::{Error, Result};

use super::{Model, PriorParams, LN_2PI};

/// Unknown mean θ with `y_i ~ N(θ, noise_sd²)` and prior `N(μ0, λ⁻¹)`;
/// μ0 and λ are read from the `mu0` and `lambda11` slots of α.
#[derive(Clone, Debug)]
pub struct ConjugateNormalModel {
    y: Vec<f64>,
    noise_sd: f64,
    layout: CoordinateLayout,
}

impl ConjugateNormalModel {
    pub fn new(y: Vec<f64>, noise_sd: f64) -> Result<Self> {
        if y.is_empty() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("observations must be a nonempty finite list".into()));
        }
        if !(noise_sd > 0.0 && noise_sd.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise standard deviation must be positive, got {noise_sd}"
            )));
        }
        Ok(Self {
            y,
            noise_sd,
            layout: CoordinateLayout::new(
                [("theta".to_string(), FactorKind::Gaussian1D)],
                ScaleParam::Log,
            ),
        })
    }

    /// Same model with the factor scale stored directly instead of on the
    /// log scale.
    pub fn with_scale(mut self, scale: ScaleParam) -> Self {
        self.layout = self.layout.with_scale(scale);
        self
    }

    /// Closed-form posterior `(mean, variance)` under the α in use.
    pub fn analytic_posterior(&self, alpha: &[f64]) -> (f64, f64) {
        let (mu0, lambda) = (alpha[0], alpha[2]);
        let n = self.y.len() as f64;
        let noise_prec = 1.0 / (self.noise_sd * self.noise_sd);
        let post_prec = lambda + n * noise_prec;
        let sum: f64 = self.y.iter().sum();
        ((lambda * mu0 + sum * noise_prec) / post_prec, 1.0 / post_prec)
    }

    /// Coordinates whose factor matches the analytic posterior exactly.
    pub fn analytic_optimum(&self, alpha: &[f64]) -> Vec<f64> {
        let (mean, var) = self.analytic_posterior(alpha);
        let mut xi = vec![0.0; self.layout.dim()];
        let factor = GaussianFactor1D::from_moments(mean, var).expect("posterior variance");
        self.layout.pack1(self.layout.block(0), &factor, &mut xi);
        xi
    }
}

impl Model for ConjugateNormalModel {
    fn layout(&self) -> &CoordinateLayout {
        &self.layout
    }

    fn kl<S: Real>(&self, xi: &[S], alpha: &[S]) -> Result<S> {
        let f = self.layout.decode1(self.layout.block(0), xi)?;
        let n = self.y.len() as f64;
        let noise_var = self.noise_sd * self.noise_sd;

        let mut sq_err = S::constant(0.0);
        for &y in &self.y {
            let d = f.mean - S::constant(y);
            sq_err = sq_err + d * d + f.var;
        }
        let lik = S::constant(-0.5 * n * (LN_2PI + noise_var.ln()))
            - S::constant(0.5 / noise_var) * sq_err;

        let ell = self.expected_log_prior(xi, alpha)?;
        let entropy = self.layout.entropy(xi)?;
        Ok(-(lik + ell + entropy))
    }

    fn expected_log_prior<S: Real>(&self, xi: &[S], alpha: &[S]) -> Result<S> {
        let f = self.layout.decode1(self.layout.block(0), xi)?;
        let (mu0, lambda) = (alpha[0], alpha[2]);
        let d = f.mean - mu0;
        Ok(S::constant(-0.5 * LN_2PI) + S::constant(0.5) * lambda.ln()?
            - S::constant(0.5) * lambda * (d * d + f.var))
    }

    fn log_joint(&self, theta: &[f64], alpha: &[f64]) -> Result<f64> {
        let t = theta[0];
        let (mu0, lambda) = (alpha[0], alpha[2]);
        let n = self.y.len() as f64;
        let noise_var = self.noise_sd * self.noise_sd;
        let sq_err: f64 = self.y.iter().map(|&y| (y - t) * (y - t)).sum();
        let lik = -0.5 * n * (LN_2PI + noise_var.ln()) - 0.5 * sq_err / noise_var;
        let prior = -0.5 * LN_2PI + 0.5 * lambda.ln() - 0.5 * lambda * (t - mu0) * (t - mu0);
        Ok(lik + prior)
    }

    fn theta_names(&self) -> Vec<String> {
        vec!["theta".to_string()]
    }

    fn default_init(&self) -> Vec<f64> {
        let mut xi = vec![0.0; self.layout.dim()];
        self.layout.pack1(self.layout.block(0), &GaussianFactor1D::new(0.0, 0.0), &mut xi);
        xi
    }

    fn default_alpha(&self) -> Vec<f64> {
        let mut alpha = PriorParams::default().to_alpha().to_vec();
        alpha[2] = 1.0;
        alpha
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualnum::{self, HyperDual};
    use crate::models::testutil;
    use approx::assert_relative_eq;
    use statrs::distribution::{Continuous, Normal};

    fn fixture() -> ConjugateNormalModel {
        ConjugateNormalModel::new(vec![1.0], 1.0).unwrap()
    }

    #[test]
    fn analytic_posterior_of_unit_fixture() {
        let m = fixture();
        let (mean, var) = m.analytic_posterior(&m.default_alpha());
        assert_relative_eq!(mean, 0.5, max_relative = 1e-15);
        assert_relative_eq!(var, 0.5, max_relative = 1e-15);
    }

    #[test]
    fn analytic_posterior_is_a_stationary_point_of_kl() {
        let m = fixture();
        let alpha = m.default_alpha();
        let xi = m.analytic_optimum(&alpha);
        let alpha_hd: Vec<HyperDual> = alpha.iter().map(|&a| HyperDual::constant(a)).collect();
        let grad = dualnum::gradient(|x| m.kl(x, &alpha_hd), &xi).unwrap();
        assert!(grad.amax() <= 1e-8, "gradient at optimum: {grad}");
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let m = ConjugateNormalModel::new(vec![0.4, 1.3, -0.2], 0.8).unwrap();
        let alpha = m.default_alpha();
        for xi in [[0.0, 0.0], [0.6, -0.4], [-1.0, 0.3]] {
            testutil::check_kl_grad_fd(&m, &xi, &alpha, 1e-6);
        }
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let m = fixture();
        let mut alpha = m.default_alpha();
        alpha[0] = 0.3;
        testutil::check_ell_alpha_grad_fd(&m, &[0.2, -0.5], &alpha, 1e-6);
    }

    #[test]
    fn log_joint_matches_direct_density_evaluation() {
        let m = ConjugateNormalModel::new(vec![1.0, -0.5], 0.7).unwrap();
        let alpha = m.default_alpha();
        let theta = 0.3;
        let lik = Normal::new(theta, 0.7).unwrap();
        let prior = Normal::new(alpha[0], (1.0 / alpha[2]).sqrt()).unwrap();
        let want = lik.ln_pdf(1.0) + lik.ln_pdf(-0.5) + prior.ln_pdf(theta);
        assert_relative_eq!(m.log_joint(&[theta], &alpha).unwrap(), want, max_relative = 1e-12);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(ConjugateNormalModel::new(vec![], 1.0).is_err());
        assert!(ConjugateNormalModel::new(vec![1.0], 0.0).is_err());
        assert!(ConjugateNormalModel::new(vec![f64::NAN], 1.0).is_err());
    }
}
