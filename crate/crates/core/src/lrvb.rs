//! Linear-response covariances and hyperparameter sensitivities for a fitted
//! mean-field approximation.
//!
//! A factorized fit can estimate posterior means well while its own
//! covariance stays blind to dependence between factors. Linear response
//! repairs this at the optimum: tilting the objective moves the fitted
//! moments, and differentiating that response yields both a corrected
//! covariance Σ̂ = J·H⁻¹·Jᵀ and the derivatives of the posterior means with
//! respect to the prior hyperparameters α. Here H is the exact KL Hessian in
//! the unconstrained coordinates ξ and J = ∂E[θ]/∂ξ is the moment Jacobian,
//! so every response reduces to solves against one Cholesky factorization
//! of H.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::dualnum::{self, HyperDual};
use crate::models::{Model, ALPHA_DIM, ALPHA_NAMES};
use crate::varfamily::CoordinateLayout;
use crate::{Error, Result};

/// Exact Hessian H = ∂²KL/∂ξ∂ξᵀ at `xi_star`, one hyper-dual pass per entry
/// of the upper triangle, restricted to the model's declared interaction
/// pattern when it has one.
pub fn kl_hessian<M: Model>(model: &M, alpha: &[f64], xi_star: &[f64]) -> Result<DMatrix<f64>> {
    check_alpha(alpha)?;
    check_dim(model.layout(), xi_star)?;
    let alpha_hd: Vec<HyperDual> = alpha.iter().map(|&a| HyperDual::constant(a)).collect();
    let f = |x: &[HyperDual]| model.kl(x, &alpha_hd);
    let (_, hessian) = match model.interaction_pairs() {
        Some(pairs) => dualnum::hessian_with_gradient_sparse(f, xi_star, &pairs)?,
        None => dualnum::hessian_with_gradient(f, xi_star)?,
    };
    if hessian.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "the KL Hessian" });
    }
    Ok(hessian)
}

/// Jacobian J = ∂E[θ]/∂ξ of the moment vector. Factor means are coordinates
/// of ξ themselves, so J is a constant 0/1 selector under either scale
/// parameterization.
pub fn moment_jacobian(layout: &CoordinateLayout) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(layout.n_moments(), layout.dim());
    for b in layout.blocks() {
        for k in 0..b.kind.m_len() {
            j[(b.m_start + k, b.xi_start + k)] = 1.0;
        }
    }
    j
}

/// Mixed second derivatives ∂²ℓ/∂ξ∂αᵀ of the expected log prior, one
/// hyper-dual pass per (ξ, α) coordinate pair. ℓ is the only α-dependent
/// part of the objective, so this is everything a prior displacement needs.
pub fn cross_hessian<M: Model>(model: &M, alpha: &[f64], xi_star: &[f64]) -> Result<DMatrix<f64>> {
    check_alpha(alpha)?;
    check_dim(model.layout(), xi_star)?;
    let cross =
        dualnum::cross_derivatives(|x, a| model.expected_log_prior(x, a), xi_star, alpha)?;
    if cross.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "the prior cross Hessian" });
    }
    Ok(cross)
}

/// Compute the KL Hessian at `xi_star` and assemble the linear-response
/// covariance. Use [`LrvbSolution::from_hessian`] when the optimizer's final
/// Hessian is already at hand.
pub fn lrvb_covariance<M: Model>(
    model: &M,
    alpha: &[f64],
    xi_star: &[f64],
) -> Result<LrvbSolution> {
    let hessian = kl_hessian(model, alpha, xi_star)?;
    LrvbSolution::from_hessian(model, xi_star, hessian)
}

/// Linear-response state at a KL optimum: the Hessian factorization together
/// with the covariances it implies. Read-only once built; every sensitivity
/// is a solve against the stored factor, never an explicit inverse.
#[derive(Clone, Debug)]
pub struct LrvbSolution {
    /// Exact KL Hessian over ξ at the optimum.
    pub hessian: DMatrix<f64>,
    /// Constant selector J = ∂E[θ]/∂ξ.
    pub moment_jacobian: DMatrix<f64>,
    /// Corrected covariance Σ̂ = J·H⁻¹·Jᵀ of the posterior means.
    pub lrvb_cov: DMatrix<f64>,
    /// Block-diagonal covariance of the fitted factors, for comparison.
    pub mfvb_cov: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl LrvbSolution {
    /// Build from a Hessian already computed at `xi_star`, typically the one
    /// the optimizer reports at convergence.
    pub fn from_hessian<M: Model>(
        model: &M,
        xi_star: &[f64],
        hessian: DMatrix<f64>,
    ) -> Result<Self> {
        let layout = model.layout();
        check_dim(layout, xi_star)?;
        let n = layout.dim();
        if hessian.nrows() != n || hessian.ncols() != n {
            return Err(Error::InvalidParameter(format!(
                "hessian must be {n}x{n} to match the coordinate layout"
            )));
        }
        if hessian.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "the KL Hessian" });
        }
        if (&hessian - hessian.transpose()).amax() > 1e-12 * hessian.amax().max(1.0) {
            return Err(Error::InvalidParameter("hessian must be symmetric".into()));
        }
        let factor = hessian
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("the KL Hessian"))?;
        let j = moment_jacobian(layout);
        // W = L⁻¹·Jᵀ makes Σ̂ = WᵀW, symmetric positive semidefinite by
        // construction.
        let w = factor
            .l()
            .solve_lower_triangular(&j.transpose())
            .expect("Cholesky factor has a positive diagonal");
        let lrvb_cov = w.transpose() * &w;
        let mfvb_cov = layout.mfvb_cov(xi_star)?;
        Ok(Self { hessian, moment_jacobian: j, lrvb_cov, mfvb_cov, factor })
    }

    /// Marginal standard deviations √Σ̂_ii of the corrected covariance.
    pub fn lrvb_sds(&self) -> Vec<f64> {
        self.lrvb_cov.diagonal().iter().map(|v| v.sqrt()).collect()
    }

    /// Marginal standard deviations of the factored covariance.
    pub fn mfvb_sds(&self) -> Vec<f64> {
        self.mfvb_cov.diagonal().iter().map(|v| v.sqrt()).collect()
    }

    /// Local sensitivity of the posterior means to prior displacements.
    ///
    /// The objective depends on α only through the expected log prior ℓ,
    /// which enters the KL with a minus sign, so a displacement δα moves the
    /// optimum by dξ = H⁻¹·(∂²ℓ/∂ξ∂αᵀ)·δα and the means by J·dξ. The report
    /// holds one column per direction; normalized rows are divided by the
    /// LRVB standard deviations √Σ̂_ii, putting every entry in units of
    /// posterior standard deviations per unit step.
    pub fn prior_sensitivity<M: Model>(
        &self,
        model: &M,
        alpha: &[f64],
        xi_star: &[f64],
        directions: &[AlphaDirection],
    ) -> Result<SensitivityReport> {
        for d in directions {
            if d.delta.len() != ALPHA_DIM {
                return Err(Error::InvalidParameter(format!(
                    "direction '{}' must have {ALPHA_DIM} entries, got {}",
                    d.label,
                    d.delta.len()
                )));
            }
        }
        let cross = cross_hessian(model, alpha, xi_star)?;
        let response = &self.moment_jacobian * self.factor.solve(&cross);
        let n_m = response.nrows();
        let mut raw = DMatrix::zeros(n_m, directions.len());
        for (j, d) in directions.iter().enumerate() {
            raw.set_column(j, &(&response * DVector::from_column_slice(&d.delta)));
        }
        let mut normalized = raw.clone();
        for (i, sd) in self.lrvb_sds().iter().enumerate() {
            for j in 0..directions.len() {
                normalized[(i, j)] /= sd;
            }
        }
        Ok(SensitivityReport {
            raw,
            normalized,
            alpha_names: directions.iter().map(|d| d.label.clone()).collect(),
            theta_names: model.theta_names(),
        })
    }

    /// Response of the posterior means to tilting the objective.
    ///
    /// For the perturbed objective KL + t·f(m̄(ξ)), where m̄ is the extended
    /// moment vector of the layout (factor means followed by per-block
    /// covariance entries), returns dE[θ]/dt at t = 0, which is
    /// −J·H⁻¹·∇_ξ(f∘m̄). Choosing f(m) = −m_i recovers row i of `lrvb_cov`;
    /// choosing f = −∂ℓ/∂αᵀ·δα recovers the prior sensitivity along δα.
    pub fn perturbation_sensitivity<M: Model, F>(
        &self,
        model: &M,
        xi_star: &[f64],
        f: F,
    ) -> Result<DVector<f64>>
    where
        F: Fn(&[HyperDual]) -> Result<HyperDual> + Sync,
    {
        let layout = model.layout();
        check_dim(layout, xi_star)?;
        let grad = dualnum::gradient(|x| f(&layout.extended_moments(x)?), xi_star)?;
        Ok(-(&self.moment_jacobian * self.factor.solve(&grad)))
    }
}

/// A labelled hyperparameter displacement δα.
#[derive(Clone, Debug)]
pub struct AlphaDirection {
    pub label: String,
    pub delta: Vec<f64>,
}

impl AlphaDirection {
    /// Unit step in a single α slot, labelled with that slot's name. The Λ
    /// off-diagonal slot moves both symmetric entries together.
    pub fn unit(index: usize) -> Self {
        assert!(index < ALPHA_DIM, "alpha index {index} out of range");
        let mut delta = vec![0.0; ALPHA_DIM];
        delta[index] = 1.0;
        Self { label: ALPHA_NAMES[index].to_string(), delta }
    }

    /// One unit direction per α slot, in vector order.
    pub fn all_units() -> Vec<Self> {
        (0..ALPHA_DIM).map(Self::unit).collect()
    }
}

/// Sensitivities of the posterior means to hyperparameter displacements, one
/// column per requested direction.
#[derive(Clone, Debug)]
pub struct SensitivityReport {
    /// raw[(i, j)] = dE[θ_i]/dt for α displaced along t·δα_j.
    pub raw: DMatrix<f64>,
    /// Rows of `raw` divided by the LRVB standard deviations √Σ̂_ii.
    pub normalized: DMatrix<f64>,
    /// Direction labels, one per column.
    pub alpha_names: Vec<String>,
    /// Moment labels, one per row.
    pub theta_names: Vec<String>,
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if alpha.len() != ALPHA_DIM {
        return Err(Error::InvalidParameter(format!(
            "hyperparameter vector must have {ALPHA_DIM} entries, got {}",
            alpha.len()
        )));
    }
    Ok(())
}

fn check_dim(layout: &CoordinateLayout, xi_star: &[f64]) -> Result<()> {
    if xi_star.len() != layout.dim() {
        return Err(Error::InvalidParameter(format!(
            "coordinate vector must have {} entries, got {}",
            layout.dim(),
            xi_star.len()
        )));
    }
    Ok(())
}
