//! Adaptive random-walk Metropolis over the unconstrained log joint.
//!
//! The sampler is the ground-truth oracle for the variational results: long
//! chains at desk scale with a correct stationary distribution and no
//! gradient machinery. Proposals are Gaussian steps whose covariance adapts
//! toward 2.38²/d times the empirical draw covariance during warmup and is
//! frozen afterwards, so the post-warmup draws come from a fixed Markov
//! kernel and reproduce bit for bit under the same seed.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::lrvb::LrvbSolution;
use crate::models::{Model, ALPHA_DIM};
use crate::optimize::FitResult;
use crate::{Error, Result};

/// Chain-length and proposal controls.
#[derive(Clone, Debug)]
pub struct McmcOptions {
    /// Post-warmup draws to keep.
    pub n_draws: usize,
    /// Adaptation iterations discarded before collection starts.
    pub warmup: usize,
    /// Standard deviation of the initial isotropic proposal, used when
    /// `initial_scales` is unset.
    pub initial_step: f64,
    /// Per-coordinate standard deviations seeding the warmup proposal,
    /// typically the fitted factor sds. A blind isotropic step is a poor
    /// opening move when the posterior scales span orders of magnitude, so
    /// callers that have already fit the model should pass these.
    pub initial_scales: Option<Vec<f64>>,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self { n_draws: 20_000, warmup: 5_000, initial_step: 0.1, initial_scales: None }
    }
}

/// A finished chain with its summaries. The per-parameter statistics are
/// taken over the unconstrained draws, the same coordinates the variational
/// moments live in; the constrained view carries the user-facing transforms
/// for export.
#[derive(Clone, Debug)]
pub struct ChainResult {
    /// Post-warmup draws, one row per iteration, in unconstrained θ.
    pub draws: DMatrix<f64>,
    /// The same draws mapped through the model's constraining transform.
    pub constrained_draws: DMatrix<f64>,
    /// Fraction of post-warmup proposals accepted.
    pub acceptance_rate: f64,
    /// Per-parameter means of the unconstrained draws.
    pub means: Vec<f64>,
    /// Per-parameter standard deviations of the unconstrained draws.
    pub sds: Vec<f64>,
    /// Monte Carlo standard errors by batch means with ⌊√n⌋ batches.
    pub mcse: Vec<f64>,
    /// Proposal covariance in use after warmup, as a diagnostic.
    pub proposal: DMatrix<f64>,
    /// Seed that reproduces the chain.
    pub seed: u64,
}

/// Run one chain of adaptive random-walk Metropolis.
///
/// `start` is an unconstrained θ point, normally the variational posterior
/// means so that burn-in is short. Adaptation refreshes the proposal at
/// doubling warmup milestones (iterations 100, 200, 400, ... and the end of
/// warmup), each time from the covariance of the most recent half of the
/// warmup states; early states reflect the not-yet-adapted kernel and would
/// otherwise drag the estimate toward the start point. After warmup the
/// proposal never changes.
pub fn sample<M: Model>(
    model: &M,
    alpha: &[f64],
    start: &[f64],
    options: &McmcOptions,
    seed: u64,
) -> Result<ChainResult> {
    check_alpha(alpha)?;
    let d = model.theta_dim();
    if start.len() != d {
        return Err(Error::InvalidParameter(format!(
            "chain start must have {d} entries, got {}",
            start.len()
        )));
    }
    if options.n_draws == 0 {
        return Err(Error::InvalidParameter("the chain needs at least one draw".into()));
    }
    if !(options.initial_step > 0.0 && options.initial_step.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "initial step must be positive, got {}",
            options.initial_step
        )));
    }
    if let Some(scales) = &options.initial_scales {
        if scales.len() != d {
            return Err(Error::InvalidParameter(format!(
                "initial scales must have {d} entries, got {}",
                scales.len()
            )));
        }
        if let Some(bad) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "initial scales must be positive, got {bad}"
            )));
        }
    }
    let mut log_p = model.log_joint(start, alpha)?;
    if !log_p.is_finite() {
        return Err(Error::Mcmc("the log joint is not finite at the chain start".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let scale = 2.38 * 2.38 / d as f64;
    let mut l_factor = match &options.initial_scales {
        Some(scales) => DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| {
            scales[i] * scale.sqrt()
        })),
        None => DMatrix::identity(d, d) * options.initial_step,
    };
    let mut proposal = &l_factor * l_factor.transpose();

    let mut warmup_states = DMatrix::zeros(options.warmup, d);
    let mut next_refresh = 100usize;

    let mut x = DVector::from_column_slice(start);
    let mut draws = DMatrix::zeros(options.n_draws, d);
    let mut accepted_warmup = 0usize;
    let mut accepted = 0usize;

    for it in 0..(options.warmup + options.n_draws) {
        let z = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let mut prop = x.clone();
        prop.gemv(1.0, &l_factor, &z, 1.0);
        let log_p_prop = model.log_joint(prop.as_slice(), alpha)?;
        let u: f64 = rng.gen();
        // A non-finite proposal density loses the comparison and is
        // rejected.
        if u.ln() < log_p_prop - log_p {
            x.copy_from(&prop);
            log_p = log_p_prop;
            if it < options.warmup {
                accepted_warmup += 1;
            } else {
                accepted += 1;
            }
        }

        if it < options.warmup {
            warmup_states.set_row(it, &x.transpose());
            let milestone = it + 1 == next_refresh || it + 1 == options.warmup;
            if milestone && accepted_warmup > 0 {
                let lo = (it + 1) / 2;
                if let Some(cov) = window_covariance(&warmup_states, lo, it + 1) {
                    let candidate = cov * scale;
                    if let Some(c) = Cholesky::new(candidate.clone()) {
                        proposal = candidate;
                        l_factor = c.unpack();
                    }
                }
            }
            if it + 1 == next_refresh {
                next_refresh *= 2;
            }
            if it + 1 == options.warmup && accepted_warmup == 0 {
                return Err(Error::Mcmc(
                    "no proposals were accepted during warmup; try a smaller initial step".into(),
                ));
            }
        } else {
            draws.set_row(it - options.warmup, &x.transpose());
        }
    }

    let constrained_width = model.constrain(start).len();
    let mut constrained_draws = DMatrix::zeros(options.n_draws, constrained_width);
    for i in 0..options.n_draws {
        let row: Vec<f64> = draws.row(i).iter().copied().collect();
        let mapped = model.constrain(&row);
        for (j, v) in mapped.iter().enumerate() {
            constrained_draws[(i, j)] = *v;
        }
    }

    let mut means = Vec::with_capacity(d);
    let mut sds = Vec::with_capacity(d);
    let mut mcse = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = draws.column(j).iter().copied().collect();
        let (mean, sd) = mean_and_sd(&col);
        means.push(mean);
        sds.push(sd);
        mcse.push(batch_means_mcse(&col));
    }

    Ok(ChainResult {
        draws,
        constrained_draws,
        acceptance_rate: accepted as f64 / options.n_draws as f64,
        means,
        sds,
        mcse,
        proposal,
        seed,
    })
}

impl ChainResult {
    /// CSV text of the constrained draws: a header row of parameter names,
    /// then one row per draw. Values print in shortest round-trip form.
    pub fn draws_csv(&self, names: &[String]) -> Result<String> {
        if names.len() != self.constrained_draws.ncols() {
            return Err(Error::Schema(format!(
                "expected {} draw column names, got {}",
                self.constrained_draws.ncols(),
                names.len()
            )));
        }
        let mut out = names.join(",");
        out.push('\n');
        for i in 0..self.constrained_draws.nrows() {
            for j in 0..self.constrained_draws.ncols() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&self.constrained_draws[(i, j)].to_string());
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Monte Carlo standard error of the series mean by batch means, using
/// ⌊√n⌋ batches so both the batch count and the batch length grow with the
/// chain. Series shorter than four points give NaN.
pub fn batch_means_mcse(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return f64::NAN;
    }
    let batches = (n as f64).sqrt().floor() as usize;
    let len = n / batches;
    let used = batches * len;
    let overall: f64 = series[..used].iter().sum::<f64>() / used as f64;
    let mut var = 0.0;
    for b in 0..batches {
        let mean: f64 = series[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64;
        var += (mean - overall) * (mean - overall);
    }
    (var / (batches * (batches - 1)) as f64).sqrt()
}

/// One parameter's worth of the VB-versus-MCMC summary.
#[derive(Clone, Debug)]
pub struct ComparisonRow {
    pub name: String,
    pub vb_mean: f64,
    pub mcmc_mean: f64,
    pub mcmc_mcse: f64,
    pub mfvb_sd: f64,
    pub lrvb_sd: f64,
    pub mcmc_sd: f64,
}

/// Side-by-side posterior summary of a variational fit and a chain.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Largest |VB − MCMC| mean gap in units of the Monte Carlo error.
    pub max_mean_gap_mcse: f64,
    /// Largest relative gap between the LRVB and MCMC standard deviations.
    pub max_sd_rel_gap: f64,
}

/// Line up the variational and sampled posteriors parameter by parameter.
pub fn compare<M: Model>(
    model: &M,
    fit: &FitResult,
    solution: &LrvbSolution,
    chain: &ChainResult,
) -> Result<Comparison> {
    let d = model.theta_dim();
    if chain.draws.nrows() == 0 {
        return Err(Error::Schema("the chain contains no draws".into()));
    }
    if chain.draws.ncols() != d
        || solution.lrvb_cov.nrows() != d
        || fit.xi_star.len() != model.layout().dim()
    {
        return Err(Error::Schema(format!(
            "parameter layouts do not match: the model has {d} moments, the chain {} columns, \
             the covariance {} rows",
            chain.draws.ncols(),
            solution.lrvb_cov.nrows()
        )));
    }
    let vb_means = model.layout().moments(fit.xi_star.as_slice())?;
    let mfvb_sds = solution.mfvb_sds();
    let lrvb_sds = solution.lrvb_sds();
    let names = model.theta_names();

    let mut rows = Vec::with_capacity(d);
    let mut max_mean_gap_mcse = 0.0f64;
    let mut max_sd_rel_gap = 0.0f64;
    for i in 0..d {
        let row = ComparisonRow {
            name: names[i].clone(),
            vb_mean: vb_means[i],
            mcmc_mean: chain.means[i],
            mcmc_mcse: chain.mcse[i],
            mfvb_sd: mfvb_sds[i],
            lrvb_sd: lrvb_sds[i],
            mcmc_sd: chain.sds[i],
        };
        let mean_gap = ((row.vb_mean - row.mcmc_mean) / row.mcmc_mcse).abs();
        if mean_gap.is_finite() {
            max_mean_gap_mcse = max_mean_gap_mcse.max(mean_gap);
        }
        let sd_gap = ((row.lrvb_sd - row.mcmc_sd) / row.mcmc_sd).abs();
        if sd_gap.is_finite() {
            max_sd_rel_gap = max_sd_rel_gap.max(sd_gap);
        }
        rows.push(row);
    }
    Ok(Comparison { rows, max_mean_gap_mcse, max_sd_rel_gap })
}

/// Sample covariance of rows `lo..hi` of the warmup states, with a small
/// ridge so the factorization survives while the window is still rank
/// deficient. Windows shorter than two states carry no spread information.
fn window_covariance(states: &DMatrix<f64>, lo: usize, hi: usize) -> Option<DMatrix<f64>> {
    let n = hi - lo;
    if n < 2 {
        return None;
    }
    let d = states.ncols();
    let window = states.rows(lo, n);
    let mut mean = DVector::zeros(d);
    for row in window.row_iter() {
        mean += row.transpose();
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    let mut centered = DVector::zeros(d);
    for row in window.row_iter() {
        centered.copy_from(&row.transpose());
        centered -= &mean;
        cov.ger(1.0, &centered, &centered, 1.0);
    }
    cov /= (n - 1) as f64;
    let ridge = 1e-8 * (cov.trace() / d as f64).abs().max(1e-10);
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    Some(cov)
}

fn mean_and_sd(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    if series.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
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
