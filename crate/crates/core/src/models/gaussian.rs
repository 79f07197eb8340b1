//! Fixed multivariate normal target with a fully factorized Gaussian
//! approximation. Mean-field VB recovers the target means exactly while
//! underestimating the marginal variances, which makes the linear-response
//! correction checkable against the known covariance.

use nalgebra::{DMatrix, DVector};

use crate::dualnum::Real;
use crate::varfamily::{CoordinateLayout, FactorKind, GaussianFactor1D, ScaleParam};
use crate::{Error, Result};

use super::{Model, LN_2PI};

/// Target `N(mean, cov)` treated as the exact posterior; α is unused.
#[derive(Clone, Debug)]
pub struct GaussianTargetModel {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    log_det_cov: f64,
    layout: CoordinateLayout,
}

impl GaussianTargetModel {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d || d == 0 {
            return Err(Error::InvalidParameter(format!(
                "covariance must be {d}x{d} to match the mean"
            )));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::InvalidParameter("covariance must be symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(Error::InvalidParameter("covariance must be positive definite".into()))?;
        let log_det_cov = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        let layout = CoordinateLayout::new(
            (0..d).map(|i| (format!("theta[{}]", i + 1), FactorKind::Gaussian1D)),
            ScaleParam::Log,
        );
        Ok(Self { mean, precision, log_det_cov, layout })
    }

    pub fn with_scale(mut self, scale: ScaleParam) -> Self {
        self.layout = self.layout.with_scale(scale);
        self
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn target_mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
}

impl Model for GaussianTargetModel {
    fn layout(&self) -> &CoordinateLayout {
        &self.layout
    }

    fn kl<S: Real>(&self, xi: &[S], _alpha: &[S]) -> Result<S> {
        let d = self.dim();
        let mut means = Vec::with_capacity(d);
        let mut vars = Vec::with_capacity(d);
        for b in self.layout.blocks() {
            let f = self.layout.decode1(b, xi)?;
            means.push(f.mean);
            vars.push(f.var);
        }

        // E_q[−log p(θ)] with p the target density.
        let mut quad = S::constant(0.0);
        for i in 0..d {
            let di = means[i] - S::constant(self.mean[i]);
            quad = quad + S::constant(self.precision[(i, i)]) * (di * di + vars[i]);
            for j in (i + 1)..d {
                let dj = means[j] - S::constant(self.mean[j]);
                quad = quad + S::constant(2.0 * self.precision[(i, j)]) * di * dj;
            }
        }
        let neg_log_p = S::constant(0.5 * (d as f64 * LN_2PI + self.log_det_cov))
            + S::constant(0.5) * quad;

        Ok(neg_log_p - self.layout.entropy(xi)?)
    }

    fn expected_log_prior<S: Real>(&self, _xi: &[S], _alpha: &[S]) -> Result<S> {
        Ok(S::constant(0.0))
    }

    fn log_joint(&self, theta: &[f64], _alpha: &[f64]) -> Result<f64> {
        let d = self.dim();
        let dv = DVector::from_row_slice(theta) - &self.mean;
        let quad = (&self.precision * &dv).dot(&dv);
        Ok(-0.5 * (d as f64 * LN_2PI + self.log_det_cov + quad))
    }

    fn theta_names(&self) -> Vec<String> {
        self.layout.blocks().iter().map(|b| b.id.clone()).collect()
    }

    fn default_init(&self) -> Vec<f64> {
        let mut xi = vec![0.0; self.layout.dim()];
        for b in self.layout.blocks() {
            self.layout.pack1(b, &GaussianFactor1D::new(0.0, 0.0), &mut xi);
        }
        xi
    }
}
