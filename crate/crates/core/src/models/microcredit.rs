//! Hierarchical treatment-effect model for multi-site trials: per-site
//! control and treatment effects drawn from a correlated pool, per-site
//! noise precisions with gamma priors, and an LKJ prior on the pool
//! correlation. Includes the dataset container, the simulator, and the
//! closed-form KL assembly the optimizer differentiates.

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::dualnum::Real;
use crate::special::ln_gamma;
use crate::varfamily::{
    Block1, Block2, CoordinateLayout, FactorBlock, FactorKind, GaussHermite, GaussianFactor1D,
    GaussianFactor2D, ScaleParam, HALF_LN_TWO_PI_E,
};
use crate::{Error, Result};

use super::{log1m_tanh2, Model, LN_2PI, ALPHA_DIM};

/// One observation: which site, whether treated, and the outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataRow {
    /// Site id in 1..=K.
    pub site: usize,
    /// Treatment indicator, 0 or 1.
    pub treatment: u8,
    /// Outcome (profit units).
    pub outcome: f64,
}

/// Per-site sufficient statistics of the Gaussian likelihood.
#[derive(Clone, Copy, Debug, Default)]
pub struct SiteStats {
    pub n: usize,
    pub n_treated: usize,
    pub sum_control: f64,
    pub sumsq_control: f64,
    pub sum_treated: f64,
    pub sumsq_treated: f64,
}

/// Validated observations in a canonical order, with per-site sufficient
/// statistics.
#[derive(Clone, Debug)]
pub struct MicrocreditDataset {
    rows: Vec<DataRow>,
    stats: Vec<SiteStats>,
    warnings: Vec<String>,
}

impl MicrocreditDataset {
    /// Validate and canonicalize rows. Rows are sorted by (site, treatment,
    /// outcome) so that every downstream sum runs in one fixed order and
    /// results are exactly invariant to the input row order.
    pub fn new(rows: Vec<DataRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.site == 0 {
                return Err(Error::InvalidData(format!(
                    "row {}: site ids start at 1",
                    i + 1
                )));
            }
            if row.treatment > 1 {
                return Err(Error::InvalidData(format!(
                    "row {}: treatment must be 0 or 1, got {}",
                    i + 1,
                    row.treatment
                )));
            }
            if !row.outcome.is_finite() {
                return Err(Error::InvalidData(format!(
                    "row {}: outcome must be finite, got {}",
                    i + 1,
                    row.outcome
                )));
            }
        }
        let k = rows.iter().map(|r| r.site).max().unwrap();

        let mut rows = rows;
        rows.sort_by(|a, b| {
            (a.site, a.treatment)
                .cmp(&(b.site, b.treatment))
                .then(a.outcome.total_cmp(&b.outcome))
        });

        let mut stats = vec![SiteStats::default(); k];
        for row in &rows {
            let s = &mut stats[row.site - 1];
            s.n += 1;
            if row.treatment == 1 {
                s.n_treated += 1;
                s.sum_treated += row.outcome;
                s.sumsq_treated += row.outcome * row.outcome;
            } else {
                s.sum_control += row.outcome;
                s.sumsq_control += row.outcome * row.outcome;
            }
        }
        let mut warnings = Vec::new();
        for (i, s) in stats.iter().enumerate() {
            if s.n == 0 {
                return Err(Error::InvalidData(format!(
                    "site {} has no rows; site ids must cover 1..={k}",
                    i + 1
                )));
            }
            if s.n_treated == 0 {
                warnings.push(format!(
                    "site {} has no treated rows; its treatment effect is identified only through pooling",
                    i + 1
                ));
            } else if s.n_treated == s.n {
                warnings.push(format!(
                    "site {} has no control rows; its control effect is identified only through pooling",
                    i + 1
                ));
            }
        }
        Ok(Self { rows, stats, warnings })
    }

    pub fn n_sites(&self) -> usize {
        self.stats.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Rows in canonical order.
    pub fn rows(&self) -> &[DataRow] {
        &self.rows
    }

    pub fn site_stats(&self) -> &[SiteStats] {
        &self.stats
    }

    /// Degenerate-design notes produced during validation.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// One point in the unconstrained parameter space of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub mu: f64,
    pub tau: f64,
    pub mu_k: Vec<f64>,
    pub tau_k: Vec<f64>,
    /// ζ_k = log σ_k⁻².
    pub log_sigma2_inv: Vec<f64>,
    pub log_s1: f64,
    pub log_s2: f64,
    /// atanh of the pool correlation ρ.
    pub z_rho: f64,
}

impl ModelParameters {
    pub fn n_sites(&self) -> usize {
        self.mu_k.len()
    }

    /// Flatten in the θ order used by `log_joint` and the moment vector:
    /// `mu, tau, mu[1], tau[1], .., zeta[1], .., log_s1, log_s2, z_rho`.
    pub fn to_vec(&self) -> Vec<f64> {
        let k = self.n_sites();
        let mut v = Vec::with_capacity(3 * k + 5);
        v.push(self.mu);
        v.push(self.tau);
        for i in 0..k {
            v.push(self.mu_k[i]);
            v.push(self.tau_k[i]);
        }
        v.extend_from_slice(&self.log_sigma2_inv);
        v.push(self.log_s1);
        v.push(self.log_s2);
        v.push(self.z_rho);
        v
    }

    pub fn from_vec(k: usize, theta: &[f64]) -> Result<Self> {
        if theta.len() != 3 * k + 5 {
            return Err(Error::Schema(format!(
                "parameter vector for {k} sites must have {} entries, got {}",
                3 * k + 5,
                theta.len()
            )));
        }
        Ok(Self {
            mu: theta[0],
            tau: theta[1],
            mu_k: (0..k).map(|i| theta[2 + 2 * i]).collect(),
            tau_k: (0..k).map(|i| theta[3 + 2 * i]).collect(),
            log_sigma2_inv: theta[2 + 2 * k..2 + 3 * k].to_vec(),
            log_s1: theta[2 + 3 * k],
            log_s2: theta[3 + 3 * k],
            z_rho: theta[4 + 3 * k],
        })
    }
}

/// Generate a dataset from fixed site-level parameters. Within each site the
/// first ⌊N_k/2⌋ generated observations are treated, and outcomes are drawn
/// as `N(mu_k + T·tau_k, sigma_k²)` with `sigma_k` implied by ζ_k.
pub fn simulate(
    truth: &ModelParameters,
    sizes: &[usize],
    seed: u64,
) -> Result<MicrocreditDataset> {
    let k = truth.n_sites();
    if truth.tau_k.len() != k || truth.log_sigma2_inv.len() != k || sizes.len() != k {
        return Err(Error::InvalidParameter(
            "site effect, noise, and size lists must all have one entry per site".into(),
        ));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(Error::InvalidParameter("every site needs at least one observation".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut rows = Vec::with_capacity(sizes.iter().sum());
    for i in 0..k {
        let sigma = (-0.5 * truth.log_sigma2_inv[i]).exp();
        let n_treated = sizes[i] / 2;
        for j in 0..sizes[i] {
            let treatment = u8::from(j < n_treated);
            let mean = truth.mu_k[i] + f64::from(treatment) * truth.tau_k[i];
            let noise: f64 = rng.sample(StandardNormal);
            rows.push(DataRow { site: i + 1, treatment, outcome: mean + sigma * noise });
        }
    }
    MicrocreditDataset::new(rows)
}

/// Replace the fixed site effects with draws from the pool
/// `N((mu, tau), C)` implied by the global parameters.
pub fn draw_site_effects(truth: &ModelParameters, seed: u64) -> ModelParameters {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let s1 = truth.log_s1.exp();
    let s2 = truth.log_s2.exp();
    let rho = truth.z_rho.tanh();
    let cross = (1.0 - rho * rho).sqrt();
    let mut out = truth.clone();
    for i in 0..truth.n_sites() {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        out.mu_k[i] = truth.mu + s1 * z1;
        out.tau_k[i] = truth.tau + s2 * (rho * z1 + cross * z2);
    }
    out
}

/// The hierarchical model bound to one dataset.
#[derive(Clone, Debug)]
pub struct MicrocreditModel {
    data: MicrocreditDataset,
    layout: CoordinateLayout,
    quad: GaussHermite,
    /// One-slot memo holding every ξ-only quantity of the last evaluation
    /// point. A Hessian at a fixed point runs hundreds of seeded passes that
    /// differ only in which coordinates carry derivatives; each pass lifts
    /// the cached values for its passive blocks and recomputes the rest.
    eval_memo: Arc<Mutex<Option<Arc<EvalCache>>>>,
}

impl MicrocreditModel {
    pub fn new(data: MicrocreditDataset) -> Self {
        let layout = Self::build_layout(data.n_sites(), ScaleParam::Log);
        let quad = GaussHermite::new(21).expect("default quadrature rule");
        Self { data, layout, quad, eval_memo: Arc::new(Mutex::new(None)) }
    }

    /// Replace the default 21-node quadrature rule.
    pub fn with_nodes(mut self, nodes: usize) -> Result<Self> {
        self.quad = GaussHermite::new(nodes)?;
        self.eval_memo = Arc::new(Mutex::new(None));
        Ok(self)
    }

    /// Store factor scales directly instead of on the log scale.
    pub fn with_scale(mut self, scale: ScaleParam) -> Self {
        self.layout = self.layout.with_scale(scale);
        self.eval_memo = Arc::new(Mutex::new(None));
        self
    }

    pub fn data(&self) -> &MicrocreditDataset {
        &self.data
    }

    fn build_layout(k: usize, scale: ScaleParam) -> CoordinateLayout {
        let mut specs = vec![("global".to_string(), FactorKind::Gaussian2D)];
        for i in 1..=k {
            specs.push((format!("site[{i}]"), FactorKind::Gaussian2D));
        }
        for i in 1..=k {
            specs.push((format!("zeta[{i}]"), FactorKind::Gaussian1D));
        }
        specs.push(("log_s1".to_string(), FactorKind::Gaussian1D));
        specs.push(("log_s2".to_string(), FactorKind::Gaussian1D));
        specs.push(("z_rho".to_string(), FactorKind::Gaussian1D));
        CoordinateLayout::new(specs, scale)
    }

    /// Everything `kl` needs at one point, evaluated on plain values.
    fn build_cache(&self, x: Vec<f64>) -> Result<EvalCache> {
        let k = self.data.n_sites();
        let global = self.layout.decode2(self.layout.block(0), &x)?;
        let sites = (1..=k)
            .map(|i| self.layout.decode2(self.layout.block(i), &x))
            .collect::<Result<Vec<_>>>()?;
        let zetas = (k + 1..=2 * k)
            .map(|i| self.layout.decode1(self.layout.block(i), &x))
            .collect::<Result<Vec<_>>>()?;
        let ls1 = self.layout.decode1(self.layout.block(2 * k + 1), &x)?;
        let ls2 = self.layout.decode1(self.layout.block(2 * k + 2), &x)?;
        let z = self.layout.decode1(self.layout.block(2 * k + 3), &x)?;
        let t = self.quad.expect(z.mean, z.sd, log1m_tanh2)?;
        let cov = CovarianceMoments::new(&ls1, &ls2, &z);
        let e_prec: Vec<f64> =
            zetas.iter().map(|zt| (zt.mean + 0.5 * zt.var).exp()).collect();
        let e_inv =
            [(0.5 * ls1.var - ls1.mean).exp(), (0.5 * ls2.var - ls2.mean).exp()];
        let lik_terms = (0..k)
            .map(|i| site_likelihood_term(&self.data.stats[i], &sites[i], zetas[i].mean, e_prec[i]))
            .collect();
        let quad_terms = sites.iter().map(|s| site_deviation_quad(s, &global, &cov)).collect();
        Ok(EvalCache {
            x,
            global,
            sites,
            zetas,
            ls1,
            ls2,
            z,
            t,
            cov,
            e_prec,
            e_inv,
            lik_terms,
            quad_terms,
        })
    }

    /// The cache for the value lanes of `xi`, reusing the memo when the
    /// point matches the previous call.
    fn eval_cache<S: Real>(&self, xi: &[S]) -> Result<Arc<EvalCache>> {
        if let Ok(slot) = self.eval_memo.lock() {
            if let Some(c) = slot.as_ref() {
                if c.x.len() == xi.len() && c.x.iter().zip(xi).all(|(a, b)| *a == b.value()) {
                    return Ok(c.clone());
                }
            }
        }
        let fresh = Arc::new(self.build_cache(xi.iter().map(|c| c.value()).collect())?);
        if let Ok(mut slot) = self.eval_memo.lock() {
            *slot = Some(fresh.clone());
        }
        Ok(fresh)
    }

    /// Decode the state at `xi`, recomputing exactly the blocks and derived
    /// expectations that carry derivatives in this pass and lifting the rest
    /// from the cache. Value lanes are identical either way.
    fn view<S: Real>(&self, xi: &[S]) -> Result<(View<S>, Arc<EvalCache>)> {
        let k = self.data.n_sites();
        let cache = self.eval_cache(xi)?;

        let b = self.layout.block(0);
        let global_active = block_active(b, xi);
        let global =
            if global_active { self.layout.decode2(b, xi)? } else { Block2::lift(&cache.global) };

        let mut sites = Vec::with_capacity(k);
        let mut site_active = Vec::with_capacity(k);
        for i in 1..=k {
            let b = self.layout.block(i);
            let active = block_active(b, xi);
            sites.push(if active {
                self.layout.decode2(b, xi)?
            } else {
                Block2::lift(&cache.sites[i - 1])
            });
            site_active.push(active);
        }

        let mut zetas = Vec::with_capacity(k);
        let mut zeta_active = Vec::with_capacity(k);
        for i in k + 1..=2 * k {
            let b = self.layout.block(i);
            let active = block_active(b, xi);
            zetas.push(if active {
                self.layout.decode1(b, xi)?
            } else {
                Block1::lift(&cache.zetas[i - k - 1])
            });
            zeta_active.push(active);
        }

        let b = self.layout.block(2 * k + 1);
        let ls1_active = block_active(b, xi);
        let ls1 = if ls1_active { self.layout.decode1(b, xi)? } else { Block1::lift(&cache.ls1) };
        let b = self.layout.block(2 * k + 2);
        let ls2_active = block_active(b, xi);
        let ls2 = if ls2_active { self.layout.decode1(b, xi)? } else { Block1::lift(&cache.ls2) };
        let b = self.layout.block(2 * k + 3);
        let z_active = block_active(b, xi);
        let z = if z_active { self.layout.decode1(b, xi)? } else { Block1::lift(&cache.z) };

        let e_prec = (0..k)
            .map(|i| {
                if zeta_active[i] {
                    (zetas[i].mean + S::constant(0.5) * zetas[i].var).exp()
                } else {
                    S::constant(cache.e_prec[i])
                }
            })
            .collect();
        let e_inv = [
            if ls1_active {
                (S::constant(0.5) * ls1.var - ls1.mean).exp()
            } else {
                S::constant(cache.e_inv[0])
            },
            if ls2_active {
                (S::constant(0.5) * ls2.var - ls2.mean).exp()
            } else {
                S::constant(cache.e_inv[1])
            },
        ];
        let cov = if ls1_active || ls2_active || z_active {
            CovarianceMoments::new(&ls1, &ls2, &z)
        } else {
            CovarianceMoments::lift(&cache.cov)
        };
        let t = if z_active {
            self.quad.expect(z.mean, z.sd, log1m_tanh2)?
        } else {
            S::constant(cache.t)
        };

        let view = View {
            global,
            sites,
            zetas,
            ls1,
            ls2,
            z,
            global_active,
            site_active,
            zeta_active,
            ls1_active,
            ls2_active,
            z_active,
            e_prec,
            e_inv,
            cov,
            t,
        };
        Ok((view, cache))
    }

    /// All prior expectation terms.
    fn ell_terms<S: Real>(&self, v: &View<S>, cache: &EvalCache, alpha: &[S]) -> Result<S> {
        if alpha.len() != ALPHA_DIM {
            return Err(Error::InvalidParameter(format!(
                "hyperparameter vector must have {ALPHA_DIM} entries, got {}",
                alpha.len()
            )));
        }
        let alpha_const = alpha.iter().all(|a| a.is_constant());
        let alpha_plain: [f64; ALPHA_DIM] = std::array::from_fn(|i| alpha[i].value());

        let mut ell = if alpha_const && !v.global_active {
            S::constant(gaussian_pool_prior(&cache.global, &alpha_plain)?)
        } else {
            gaussian_pool_prior(&v.global, alpha)?
        };

        let (a_n, b_n) = (alpha[8], alpha[9]);
        let (ln_bn, lg_an) = (b_n.ln()?, fold_ln_gamma(a_n)?);
        for i in 0..v.zetas.len() {
            ell = ell + if alpha_const && !v.zeta_active[i] {
                S::constant(gamma_precision_term(
                    cache.zetas[i].mean,
                    cache.e_prec[i],
                    alpha_plain[8],
                    alpha_plain[9],
                    ln_bn.value(),
                    lg_an.value(),
                ))
            } else {
                gamma_precision_term(v.zetas[i].mean, v.e_prec[i], a_n, b_n, ln_bn, lg_an)
            };
        }

        let (a_s, b_s) = (alpha[6], alpha[7]);
        let (ln_bs, lg_as) = (b_s.ln()?, fold_ln_gamma(a_s)?);
        for (j, ls) in [&v.ls1, &v.ls2].into_iter().enumerate() {
            let active = if j == 0 { v.ls1_active } else { v.ls2_active };
            ell = ell + if alpha_const && !active {
                S::constant(gamma_inverse_scale_term(
                    if j == 0 { cache.ls1.mean } else { cache.ls2.mean },
                    cache.e_inv[j],
                    alpha_plain[6],
                    alpha_plain[7],
                    ln_bs.value(),
                    lg_as.value(),
                ))
            } else {
                gamma_inverse_scale_term(ls.mean, v.e_inv[j], a_s, b_s, ln_bs, lg_as)
            };
        }

        ell = ell + lkj_term(v.t, alpha[5])?;
        Ok(ell)
    }
}

/// All ξ-only quantities of one `kl` evaluation on plain values, keyed by
/// the point they belong to.
struct EvalCache {
    x: Vec<f64>,
    global: Block2<f64>,
    sites: Vec<Block2<f64>>,
    zetas: Vec<Block1<f64>>,
    ls1: Block1<f64>,
    ls2: Block1<f64>,
    z: Block1<f64>,
    /// E_q[log(1 − ρ²)].
    t: f64,
    cov: CovarianceMoments<f64>,
    /// E_q[σ_k⁻²] per site.
    e_prec: Vec<f64>,
    /// E_q[s_j⁻¹] for the two pool scales.
    e_inv: [f64; 2],
    lik_terms: Vec<f64>,
    quad_terms: Vec<f64>,
}

impl std::fmt::Debug for EvalCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvalCache").field("x", &self.x).finish_non_exhaustive()
    }
}

/// The decoded state in one derivative pass: blocks and derived expectations
/// with derivative content where the pass seeds them, lifted constants
/// everywhere else.
struct View<S> {
    global: Block2<S>,
    sites: Vec<Block2<S>>,
    zetas: Vec<Block1<S>>,
    ls1: Block1<S>,
    ls2: Block1<S>,
    z: Block1<S>,
    global_active: bool,
    site_active: Vec<bool>,
    zeta_active: Vec<bool>,
    ls1_active: bool,
    ls2_active: bool,
    z_active: bool,
    e_prec: Vec<S>,
    e_inv: [S; 2],
    cov: CovarianceMoments<S>,
    t: S,
}

/// Whether any coordinate of the block carries derivative content.
fn block_active<S: Real>(block: &FactorBlock, xi: &[S]) -> bool {
    xi[block.xi_start..block.xi_start + block.kind.xi_len()]
        .iter()
        .any(|c| !c.is_constant())
}

/// E_q[log N((μ, τ); (μ0, τ0), Λ⁻¹)] in closed form.
fn gaussian_pool_prior<S: Real>(global: &Block2<S>, alpha: &[S]) -> Result<S> {
    let (mu0, tau0) = (alpha[0], alpha[1]);
    let (l11, l12, l22) = (alpha[2], alpha[3], alpha[4]);
    let det = l11 * l22 - l12 * l12;
    let d1 = global.mean[0] - mu0;
    let d2 = global.mean[1] - tau0;
    let quad = l11 * (d1 * d1 + global.v11)
        + S::constant(2.0) * l12 * (d1 * d2 + global.v12)
        + l22 * (d2 * d2 + global.v22);
    Ok(S::constant(-LN_2PI) + S::constant(0.5) * det.ln()? - S::constant(0.5) * quad)
}

/// One site's E_q[log p(y_k | μ_k, τ_k, σ_k)] from its sufficient statistics,
/// given the site's precision moments E_q[σ_k⁻²] = `e_prec` and
/// E_q[log σ_k⁻²] = `zeta_mean`.
fn site_likelihood_term<S: Real>(
    stats: &SiteStats,
    site: &Block2<S>,
    zeta_mean: S,
    e_prec: S,
) -> S {
    let n = stats.n as f64;
    let n_t = stats.n_treated as f64;
    let n_c = n - n_t;
    let a = site.mean[0];
    let ab = site.mean[0] + site.mean[1];
    let resid = S::constant(stats.sumsq_control) - S::constant(2.0 * stats.sum_control) * a
        + S::constant(n_c) * a * a
        + S::constant(stats.sumsq_treated)
        - S::constant(2.0 * stats.sum_treated) * ab
        + S::constant(n_t) * ab * ab;
    let q = resid
        + S::constant(n) * site.v11
        + S::constant(2.0 * n_t) * site.v12
        + S::constant(n_t) * site.v22;
    S::constant(-0.5 * LN_2PI * n) + S::constant(0.5 * n) * zeta_mean
        - S::constant(0.5) * e_prec * q
}

/// Expectations of the entries of C⁻¹ = diag(s)⁻¹ R(ρ)⁻¹ diag(s)⁻¹ shared by
/// every site deviation term: log-normal moments of the two scale factors
/// and hyperbolic moments of the correlation factor.
struct CovarianceMoments<S> {
    inv_s1: S,
    inv_s2: S,
    inv2_s1: S,
    inv2_s2: S,
    cosh2: S,
    sinh2: S,
}

impl<S: Real> CovarianceMoments<S> {
    fn new(ls1: &Block1<S>, ls2: &Block1<S>, z: &Block1<S>) -> Self {
        let inv_s1 = (S::constant(0.5) * ls1.var - ls1.mean).exp();
        let inv_s2 = (S::constant(0.5) * ls2.var - ls2.mean).exp();
        let inv2_s1 = (S::constant(2.0) * (ls1.var - ls1.mean)).exp();
        let inv2_s2 = (S::constant(2.0) * (ls2.var - ls2.mean)).exp();
        let e_pos = (S::constant(2.0) * (z.mean + z.var)).exp();
        let e_neg = (S::constant(2.0) * (z.var - z.mean)).exp();
        let cosh2 = S::constant(0.5) + S::constant(0.25) * (e_pos + e_neg);
        let sinh2 = S::constant(0.5) * (e_pos - e_neg);
        Self { inv_s1, inv_s2, inv2_s1, inv2_s2, cosh2, sinh2 }
    }

    fn lift(m: &CovarianceMoments<f64>) -> Self {
        CovarianceMoments {
            inv_s1: S::constant(m.inv_s1),
            inv_s2: S::constant(m.inv_s2),
            inv2_s1: S::constant(m.inv2_s1),
            inv2_s2: S::constant(m.inv2_s2),
            cosh2: S::constant(m.cosh2),
            sinh2: S::constant(m.sinh2),
        }
    }
}

/// One site's E_q[(θ_k − (μ, τ))ᵀ C⁻¹ (θ_k − (μ, τ))].
fn site_deviation_quad<S: Real>(
    site: &Block2<S>,
    global: &Block2<S>,
    m: &CovarianceMoments<S>,
) -> S {
    let d1 = site.mean[0] - global.mean[0];
    let d2 = site.mean[1] - global.mean[1];
    let d1sq = d1 * d1 + site.v11 + global.v11;
    let d2sq = d2 * d2 + site.v22 + global.v22;
    let d12 = d1 * d2 + site.v12 + global.v12;
    m.cosh2 * (d1sq * m.inv2_s1 + d2sq * m.inv2_s2) - m.sinh2 * d12 * m.inv_s1 * m.inv_s2
}

/// E_q[log Gamma(σ⁻²; a, b)] for one ζ = log σ⁻² factor, without the
/// change-of-variables Jacobian (that term is α-independent and accounted
/// for in the KL assembly). Takes the factor's moments E_q[ζ] and
/// E_q[σ⁻²] = `e_prec`.
fn gamma_precision_term<S: Real>(zeta_mean: S, e_prec: S, a: S, b: S, ln_b: S, lg_a: S) -> S {
    (a - S::constant(1.0)) * zeta_mean - b * e_prec + a * ln_b - lg_a
}

/// E_q[log Gamma(s⁻¹; a, b)] for one log s factor with E_q[s⁻¹] = `e_inv`,
/// Jacobian excluded.
fn gamma_inverse_scale_term<S: Real>(ls_mean: S, e_inv: S, a: S, b: S, ln_b: S, lg_a: S) -> S {
    -(a - S::constant(1.0)) * ls_mean - b * e_inv + a * ln_b - lg_a
}

/// E_q[log LKJ(ρ; η)] for the 2×2 case, `t = E_q[log(1 − ρ²)]`. The
/// normalizer √π·Γ(η)/Γ(η + ½) is kept so η-derivatives are meaningful.
fn lkj_term<S: Real>(t: S, eta: S) -> Result<S> {
    let norm = S::constant(0.5 * std::f64::consts::PI.ln()) + fold_ln_gamma(eta)?
        - fold_ln_gamma(eta + S::constant(0.5))?;
    Ok((eta - S::constant(1.0)) * t - norm)
}

/// `ln Γ` that runs on plain values whenever the argument is passive, which
/// is every ξ-pass, since the shapes live in α.
fn fold_ln_gamma<S: Real>(x: S) -> Result<S> {
    if x.is_constant() {
        return Ok(S::constant(ln_gamma(x.value())?));
    }
    ln_gamma(x)
}

impl Model for MicrocreditModel {
    fn layout(&self) -> &CoordinateLayout {
        &self.layout
    }

    fn kl<S: Real>(&self, xi: &[S], alpha: &[S]) -> Result<S> {
        let k = self.data.n_sites();
        let (v, cache) = self.view(xi)?;

        // E_q[log p(y | θ)] via per-site sufficient statistics. A site whose
        // factors are all passive in this pass contributes a plain constant.
        let mut e_lik = S::constant(0.0);
        for i in 0..k {
            e_lik = e_lik + if v.site_active[i] || v.zeta_active[i] {
                site_likelihood_term(&self.data.stats[i], &v.sites[i], v.zetas[i].mean, v.e_prec[i])
            } else {
                S::constant(cache.lik_terms[i])
            };
        }

        // E_q[log N((μ_k, τ_k); (μ, τ), C)] summed over sites. All scale and
        // correlation moments are log-normal or hyperbolic expectations of
        // independent Gaussian factors.
        let shared_active = v.global_active || v.ls1_active || v.ls2_active || v.z_active;
        let mut quad_sum = S::constant(0.0);
        for i in 0..k {
            quad_sum = quad_sum + if shared_active || v.site_active[i] {
                site_deviation_quad(&v.sites[i], &v.global, &v.cov)
            } else {
                S::constant(cache.quad_terms[i])
            };
        }
        let e_logdet = S::constant(2.0) * (v.ls1.mean + v.ls2.mean) + v.t;
        let e_hier = S::constant(-(k as f64) * LN_2PI)
            - S::constant(0.5 * k as f64) * e_logdet
            - S::constant(0.5) * quad_sum;

        let ell = self.ell_terms(&v, &cache, alpha)?;

        // Change-of-variables Jacobians moving the prior densities to the
        // unconstrained coordinates; independent of α by construction.
        let mut e_jac = v.t - v.ls1.mean - v.ls2.mean;
        for zeta in &v.zetas {
            e_jac = e_jac + zeta.mean;
        }

        // Entropy of the factorized Gaussian, assembled from the blocks
        // already decoded above; equal to `layout.entropy(xi)`.
        let mut log_dets = v.global.log_l11 + v.global.log_l22;
        for site in &v.sites {
            log_dets = log_dets + site.log_l11 + site.log_l22;
        }
        for zeta in &v.zetas {
            log_dets = log_dets + zeta.log_sd;
        }
        log_dets = log_dets + v.ls1.log_sd + v.ls2.log_sd + v.z.log_sd;
        let entropy =
            S::constant(self.layout.n_moments() as f64 * HALF_LN_TWO_PI_E) + log_dets;

        Ok(-(e_lik + e_hier + ell + e_jac + entropy))
    }

    fn expected_log_prior<S: Real>(&self, xi: &[S], alpha: &[S]) -> Result<S> {
        let (v, cache) = self.view(xi)?;
        self.ell_terms(&v, &cache, alpha)
    }

    fn log_joint(&self, theta: &[f64], alpha: &[f64]) -> Result<f64> {
        let k = self.data.n_sites();
        let p = ModelParameters::from_vec(k, theta)?;
        if alpha.len() != ALPHA_DIM {
            return Err(Error::InvalidParameter(format!(
                "hyperparameter vector must have {ALPHA_DIM} entries, got {}",
                alpha.len()
            )));
        }

        let prec: Vec<f64> = p.log_sigma2_inv.iter().map(|z| z.exp()).collect();
        let mut lp = 0.0;
        for row in &self.data.rows {
            let i = row.site - 1;
            let r = row.outcome - p.mu_k[i] - f64::from(row.treatment) * p.tau_k[i];
            lp += -0.5 * LN_2PI + 0.5 * p.log_sigma2_inv[i] - 0.5 * prec[i] * r * r;
        }

        let s1 = p.log_s1.exp();
        let s2 = p.log_s2.exp();
        let rho = p.z_rho.tanh();
        let log_omr2 = log1m_tanh2(p.z_rho)?;
        let omr2 = log_omr2.exp();
        for i in 0..k {
            let d1 = (p.mu_k[i] - p.mu) / s1;
            let d2 = (p.tau_k[i] - p.tau) / s2;
            let quad = (d1 * d1 + d2 * d2 - 2.0 * rho * d1 * d2) / omr2;
            lp += -LN_2PI - 0.5 * (2.0 * p.log_s1 + 2.0 * p.log_s2 + log_omr2) - 0.5 * quad;
        }

        let (mu0, tau0) = (alpha[0], alpha[1]);
        let (l11, l12, l22) = (alpha[2], alpha[3], alpha[4]);
        let dm = p.mu - mu0;
        let dt = p.tau - tau0;
        lp += -LN_2PI + 0.5 * (l11 * l22 - l12 * l12).ln()
            - 0.5 * (l11 * dm * dm + 2.0 * l12 * dm * dt + l22 * dt * dt);

        let (a_n, b_n) = (alpha[8], alpha[9]);
        let (ln_bn, lg_an) = (b_n.ln(), ln_gamma(a_n)?);
        for (zeta, &prec) in p.log_sigma2_inv.iter().zip(&prec) {
            // Gamma density at σ⁻² = e^ζ plus the log-Jacobian ζ.
            lp += (a_n - 1.0) * zeta - b_n * prec + a_n * ln_bn - lg_an + zeta;
        }

        let (a_s, b_s) = (alpha[6], alpha[7]);
        let (ln_bs, lg_as) = (b_s.ln(), ln_gamma(a_s)?);
        for ls in [p.log_s1, p.log_s2] {
            // Gamma density at s⁻¹ = e^{−log s} plus the log-Jacobian −log s.
            lp += -(a_s - 1.0) * ls - b_s * (-ls).exp() + a_s * ln_bs - lg_as - ls;
        }

        let eta = alpha[5];
        let norm = 0.5 * std::f64::consts::PI.ln() + ln_gamma(eta)? - ln_gamma(eta + 0.5)?;
        lp += (eta - 1.0) * log_omr2 - norm + log_omr2;

        Ok(lp)
    }

    fn theta_names(&self) -> Vec<String> {
        let k = self.data.n_sites();
        let mut names = vec!["mu".to_string(), "tau".to_string()];
        for i in 1..=k {
            names.push(format!("mu[{i}]"));
            names.push(format!("tau[{i}]"));
        }
        for i in 1..=k {
            names.push(format!("zeta[{i}]"));
        }
        names.push("log_s1".to_string());
        names.push("log_s2".to_string());
        names.push("z_rho".to_string());
        names
    }

    fn constrained_names(&self) -> Vec<String> {
        let k = self.data.n_sites();
        let mut names = vec!["mu".to_string(), "tau".to_string()];
        for i in 1..=k {
            names.push(format!("mu[{i}]"));
            names.push(format!("tau[{i}]"));
        }
        for i in 1..=k {
            names.push(format!("sigma[{i}]"));
        }
        names.push("s1".to_string());
        names.push("s2".to_string());
        names.push("rho".to_string());
        names
    }

    fn constrain(&self, theta: &[f64]) -> Vec<f64> {
        let k = self.data.n_sites();
        let mut out = theta.to_vec();
        for i in 0..k {
            // σ_k = exp(−ζ_k/2).
            out[2 + 2 * k + i] = (-0.5 * theta[2 + 2 * k + i]).exp();
        }
        out[2 + 3 * k] = theta[2 + 3 * k].exp();
        out[3 + 3 * k] = theta[3 + 3 * k].exp();
        out[4 + 3 * k] = theta[4 + 3 * k].tanh();
        out
    }

    /// Moment-matched start: site means from control averages and
    /// treated-minus-control differences with standard-error spreads, noise
    /// from residual variances, pool scales from the across-site spread of
    /// those estimates, and the correlation at zero.
    fn default_init(&self) -> Vec<f64> {
        let k = self.data.n_sites();
        let mut a = Vec::with_capacity(k);
        let mut b = Vec::with_capacity(k);
        let mut zeta = Vec::with_capacity(k);
        let mut se_a = Vec::with_capacity(k);
        let mut se_b = Vec::with_capacity(k);
        let clamp_log = |v: f64| v.clamp(1e-3, 1e3).ln();
        for s in &self.data.stats {
            let n = s.n as f64;
            let n_t = s.n_treated as f64;
            let n_c = n - n_t;
            let mean_c = if s.n_treated < s.n {
                s.sum_control / n_c
            } else {
                s.sum_treated / n_t
            };
            let diff = if s.n_treated > 0 && s.n_treated < s.n {
                s.sum_treated / n_t - mean_c
            } else {
                0.0
            };
            let fitted_t = mean_c + diff;
            let resid = s.sumsq_control - 2.0 * mean_c * s.sum_control + n_c * mean_c * mean_c
                + s.sumsq_treated
                - 2.0 * fitted_t * s.sum_treated
                + n_t * fitted_t * fitted_t;
            let noise_var = (resid / n).max(1e-8);
            a.push(mean_c);
            b.push(diff);
            zeta.push(-noise_var.ln());
            se_a.push(clamp_log((noise_var / n_c.max(1.0)).sqrt()));
            se_b.push(clamp_log((noise_var / n_c.max(1.0) + noise_var / n_t.max(1.0)).sqrt()));
        }
        let pool_mu = a.iter().sum::<f64>() / k as f64;
        let pool_tau = b.iter().sum::<f64>() / k as f64;
        let spread = |v: &[f64], center: f64| {
            (v.iter().map(|x| (x - center) * (x - center)).sum::<f64>() / k as f64).sqrt()
        };
        let s1_hat = spread(&a, pool_mu).max(0.05);
        let s2_hat = spread(&b, pool_tau).max(0.05);

        let mut xi = vec![0.0; self.layout.dim()];
        self.layout.pack2(
            self.layout.block(0),
            &GaussianFactor2D::new(
                [pool_mu, pool_tau],
                clamp_log(s1_hat / (k as f64).sqrt()),
                0.0,
                clamp_log(s2_hat / (k as f64).sqrt()),
            ),
            &mut xi,
        );
        for i in 0..k {
            self.layout.pack2(
                self.layout.block(1 + i),
                &GaussianFactor2D::new([a[i], b[i]], se_a[i], 0.0, se_b[i]),
                &mut xi,
            );
            let zeta_sd = (2.0 / self.data.stats[i].n as f64).sqrt();
            self.layout.pack1(
                self.layout.block(k + 1 + i),
                &GaussianFactor1D::new(zeta[i], clamp_log(zeta_sd)),
                &mut xi,
            );
        }
        let scale_sd = clamp_log((0.5 / k as f64).sqrt());
        for (j, mean) in [
            (2 * k + 1, clamp_log(s1_hat)),
            (2 * k + 2, clamp_log(s2_hat)),
            (2 * k + 3, 0.0),
        ] {
            self.layout.pack1(self.layout.block(j), &GaussianFactor1D::new(mean, scale_sd), &mut xi);
        }
        xi
    }

    /// kl factorizes over sites: site blocks talk to the global block, the
    /// scale and correlation blocks, and their own noise factor, never to
    /// each other, and noise factors never touch the hierarchy scales.
    fn interaction_pairs(&self) -> Option<Vec<(usize, usize)>> {
        let k = self.data.n_sites();
        let coords = |b: usize| {
            let blk = self.layout.block(b);
            blk.xi_start..blk.xi_start + blk.kind.xi_len()
        };
        let tail = [2 * k + 1, 2 * k + 2, 2 * k + 3];
        let mut block_pairs: Vec<(usize, usize)> = (0..2 * k + 4).map(|b| (b, b)).collect();
        for i in 1..=k {
            block_pairs.push((0, i));
            block_pairs.push((i, k + i));
            for t in tail {
                block_pairs.push((i, t));
            }
        }
        for t in tail {
            block_pairs.push((0, t));
        }
        block_pairs.push((tail[0], tail[1]));
        block_pairs.push((tail[0], tail[2]));
        block_pairs.push((tail[1], tail[2]));

        let mut pairs = Vec::new();
        for (pa, pb) in block_pairs {
            if pa == pb {
                let r = coords(pa);
                for i in r.clone() {
                    for j in i..r.end {
                        pairs.push((i, j));
                    }
                }
            } else {
                for i in coords(pa) {
                    for j in coords(pb) {
                        pairs.push((i, j));
                    }
                }
            }
        }
        pairs.sort_unstable();
        Some(pairs)
    }
}
