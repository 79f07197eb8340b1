//! Subcommand implementations. Each command resolves the configuration,
//! builds the configured model once, and dispatches into a generic body;
//! the returned byte is the process exit code.

use std::path::{Path, PathBuf};
use std::time::Instant;

use lrvb::lrvb::{AlphaDirection, LrvbSolution, SensitivityReport};
use lrvb::mcmc;
use lrvb::models::{
    draw_site_effects, simulate, ConjugateNormalModel, GaussianTargetModel, MicrocreditModel,
    Model, ModelParameters,
};
use lrvb::optimize::{fit, FitResult};
use lrvb::{Error, Result};
use nalgebra::{DMatrix, DVector};

use crate::config::{alpha_index, RunConfig, Truth};
use crate::report::{
    matrix_rows, to_json, AnalysisReport, CheckOutput, CheckTimings, PerturbOutput, PerturbRow,
    SensitivityOutput, SensitivityRow, SensitivityTable, Timings,
};
use crate::{
    CheckMcmcArgs, Command, Common, FitArgs, Format, ManualPerturbArgs, SensitivityArgs,
    SimulateArgs,
};

pub fn run(command: Command) -> Result<u8> {
    match command {
        Command::Fit(args) => cmd_fit(args),
        Command::Sensitivity(args) => cmd_sensitivity(args),
        Command::ManualPerturb(args) => cmd_manual_perturb(args),
        Command::CheckMcmc(args) => cmd_check_mcmc(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

#[derive(Debug)]
enum ModelKind {
    Microcredit(MicrocreditModel),
    Gaussian(GaussianTargetModel),
    Conjugate(ConjugateNormalModel),
}

#[derive(Debug)]
struct BuiltModel {
    kind: ModelKind,
    /// Dataset validation notes, carried into the report.
    warnings: Vec<String>,
}

macro_rules! with_model {
    ($kind:expr, |$m:ident| $body:expr) => {
        match $kind {
            ModelKind::Microcredit($m) => $body,
            ModelKind::Gaussian($m) => $body,
            ModelKind::Conjugate($m) => $body,
        }
    };
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn build_model(cfg: &RunConfig, data: Option<&Path>) -> Result<BuiltModel> {
    match cfg.model.as_str() {
        "microcredit" => {
            let path = data.ok_or_else(|| {
                Error::InvalidData(
                    "the microcredit model needs a dataset CSV; pass its path as the first \
                     argument"
                        .into(),
                )
            })?;
            let dataset = crate::data::load_dataset(path)?;
            let warnings = dataset.warnings().to_vec();
            let model = MicrocreditModel::new(dataset).with_nodes(cfg.quadrature_nodes)?;
            Ok(BuiltModel { kind: ModelKind::Microcredit(model), warnings })
        }
        "gaussian_target" => {
            reject_data(cfg, data)?;
            let spec = cfg.gaussian_target.as_ref().ok_or_else(|| {
                Error::InvalidParameter(
                    "model `gaussian_target` needs a `gaussian_target` config section".into(),
                )
            })?;
            let d = spec.mean.len();
            if spec.cov.len() != d || spec.cov.iter().any(|row| row.len() != d) {
                return Err(Error::InvalidParameter(format!(
                    "gaussian_target.cov must be a {d}x{d} matrix"
                )));
            }
            let mean = DVector::from_column_slice(&spec.mean);
            let cov = DMatrix::from_fn(d, d, |i, j| spec.cov[i][j]);
            let model = GaussianTargetModel::new(mean, cov)?;
            Ok(BuiltModel { kind: ModelKind::Gaussian(model), warnings: Vec::new() })
        }
        "conjugate_normal" => {
            reject_data(cfg, data)?;
            let spec = cfg.conjugate_normal.as_ref().ok_or_else(|| {
                Error::InvalidParameter(
                    "model `conjugate_normal` needs a `conjugate_normal` config section".into(),
                )
            })?;
            let model = ConjugateNormalModel::new(spec.y.clone(), spec.noise_sd)?;
            Ok(BuiltModel { kind: ModelKind::Conjugate(model), warnings: Vec::new() })
        }
        other => Err(Error::InvalidParameter(format!(
            "unknown model `{other}`; expected microcredit, gaussian_target, or conjugate_normal"
        ))),
    }
}

fn reject_data(cfg: &RunConfig, data: Option<&Path>) -> Result<()> {
    if data.is_some() {
        return Err(Error::InvalidData(format!(
            "model `{}` is defined by the config and takes no dataset",
            cfg.model
        )));
    }
    Ok(())
}

fn direction_list(names: &[String]) -> Result<Vec<AlphaDirection>> {
    names.iter().map(|n| Ok(AlphaDirection::unit(alpha_index(n)?))).collect()
}

struct Analysis {
    fit: FitResult,
    solution: LrvbSolution,
    sensitivity: SensitivityReport,
    means: Vec<f64>,
    theta_names: Vec<String>,
    fit_seconds: f64,
    lrvb_seconds: f64,
}

/// Fit, correct the covariance from the optimizer's final Hessian, and
/// solve the requested sensitivity directions against the one
/// factorization.
fn analyze<M: Model>(
    model: &M,
    cfg: &RunConfig,
    directions: &[AlphaDirection],
) -> Result<Analysis> {
    let alpha = cfg.alpha();
    let fit_res = fit(model, &alpha, None, &cfg.optimizer.to_options())?;
    let clock = Instant::now();
    let solution =
        LrvbSolution::from_hessian(model, fit_res.xi_star.as_slice(), fit_res.hessian.clone())?;
    let sensitivity =
        solution.prior_sensitivity(model, &alpha, fit_res.xi_star.as_slice(), directions)?;
    let lrvb_seconds = clock.elapsed().as_secs_f64();
    let means = model.layout().moments(fit_res.xi_star.as_slice())?;
    Ok(Analysis {
        fit_seconds: fit_res.wall_time,
        theta_names: model.theta_names(),
        fit: fit_res,
        solution,
        sensitivity,
        means,
        lrvb_seconds,
    })
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn exit_for(converged: bool) -> u8 {
    if converged {
        0
    } else {
        3
    }
}

fn cmd_fit(args: FitArgs) -> Result<u8> {
    let start = Instant::now();
    let cfg = resolve_config(&args.common)?;
    let built = build_model(&cfg, args.data.as_deref())?;
    let directions = direction_list(&cfg.sensitivity_directions)?;
    let analysis = with_model!(&built.kind, |m| analyze(m, &cfg, &directions))?;
    let report = AnalysisReport {
        model: cfg.model.clone(),
        converged: analysis.fit.converged,
        iterations: analysis.fit.iterations,
        kl_value: analysis.fit.kl_value,
        grad_norm: analysis.fit.grad_norm,
        warnings: built.warnings,
        theta_names: analysis.theta_names,
        posterior_means: analysis.means,
        mfvb_sds: analysis.solution.mfvb_sds(),
        lrvb_sds: analysis.solution.lrvb_sds(),
        lrvb_cov: matrix_rows(&analysis.solution.lrvb_cov),
        sensitivity: SensitivityTable::from_report(&analysis.sensitivity),
        timings: Timings {
            fit_seconds: analysis.fit_seconds,
            lrvb_seconds: analysis.lrvb_seconds,
            total_seconds: start.elapsed().as_secs_f64(),
        },
        config: cfg,
    };
    report.ensure_finite()?;
    let text = match args.common.format {
        Format::Json => to_json(&report)?,
        Format::Csv => report.to_csv(),
    };
    emit(&args.common.out, &text)?;
    Ok(exit_for(report.converged))
}

fn cmd_sensitivity(args: SensitivityArgs) -> Result<u8> {
    let cfg = resolve_config(&args.common)?;
    let built = build_model(&cfg, args.data.as_deref())?;
    let directions = if args.param == "all" {
        AlphaDirection::all_units()
    } else {
        vec![AlphaDirection::unit(alpha_index(&args.param)?)]
    };
    let analysis = with_model!(&built.kind, |m| analyze(m, &cfg, &directions))?;
    // The headline parameter: the pooled treatment effect when the model
    // has one, otherwise the first entry.
    let focal = analysis.theta_names.iter().position(|n| n == "tau").unwrap_or(0);
    let rows = (0..directions.len())
        .map(|j| SensitivityRow {
            alpha: analysis.sensitivity.alpha_names[j].clone(),
            raw: analysis.sensitivity.raw[(focal, j)],
            normalized: analysis.sensitivity.normalized[(focal, j)],
        })
        .collect();
    let output = SensitivityOutput {
        target: analysis.theta_names[focal].clone(),
        rows,
        config: cfg,
    };
    let text = match args.common.format {
        Format::Json => to_json(&output)?,
        Format::Csv => output.to_csv(),
    };
    emit(&args.common.out, &text)?;
    Ok(exit_for(analysis.fit.converged))
}

fn cmd_manual_perturb(args: ManualPerturbArgs) -> Result<u8> {
    let cfg = resolve_config(&args.common)?;
    if !args.delta.is_finite() {
        return Err(Error::InvalidParameter(format!("--delta must be finite, got {}", args.delta)));
    }
    let idx = alpha_index(&args.param)?;
    let built = build_model(&cfg, args.data.as_deref())?;
    let directions = vec![AlphaDirection::unit(idx)];
    let mut alpha_pert = cfg.alpha();
    alpha_pert[idx] += args.delta;
    lrvb::models::PriorParams::from_alpha(&alpha_pert)?.validate().map_err(|e| {
        Error::InvalidParameter(format!("perturbed hyperparameters are invalid: {e}"))
    })?;

    let output = with_model!(&built.kind, |m| {
        let analysis = analyze(m, &cfg, &directions)?;
        let refit =
            fit(m, &alpha_pert, Some(analysis.fit.xi_star.as_slice()), &cfg.optimizer.to_options())?;
        let refit_means = m.layout().moments(refit.xi_star.as_slice())?;

        let chains = if args.mcmc {
            let base_opts = cfg.mcmc.to_options(analysis.solution.mfvb_sds());
            let base =
                mcmc::sample(m, &cfg.alpha(), &analysis.means, &base_opts, cfg.seed)?;
            let refit_sds: Vec<f64> = m
                .layout()
                .mfvb_cov(refit.xi_star.as_slice())?
                .diagonal()
                .iter()
                .map(|v| v.sqrt())
                .collect();
            let pert_opts = cfg.mcmc.to_options(refit_sds);
            let pert =
                mcmc::sample(m, &alpha_pert, &refit_means, &pert_opts, cfg.seed.wrapping_add(1))?;
            Some((base, pert))
        } else {
            None
        };

        let rows = (0..analysis.means.len())
            .map(|i| {
                let predicted = analysis.sensitivity.raw[(i, 0)] * args.delta;
                let actual = refit_means[i] - analysis.means[i];
                let relative_error = if predicted == 0.0 && actual == 0.0 {
                    0.0
                } else {
                    ((predicted - actual) / actual).abs()
                };
                let (mcmc_shift, mcmc_mcse) = match &chains {
                    Some((base, pert)) => (
                        Some(pert.means[i] - base.means[i]),
                        Some(base.mcse[i].hypot(pert.mcse[i])),
                    ),
                    None => (None, None),
                };
                PerturbRow {
                    name: analysis.theta_names[i].clone(),
                    predicted_shift: predicted,
                    actual_shift: actual,
                    relative_error,
                    mcmc_shift,
                    mcmc_mcse,
                }
            })
            .collect();
        Ok::<_, Error>(PerturbOutput {
            param: args.param.clone(),
            delta: args.delta,
            base_converged: analysis.fit.converged,
            perturbed_converged: refit.converged,
            rows,
            config: cfg.clone(),
        })
    })?;

    let text = match args.common.format {
        Format::Json => to_json(&output)?,
        Format::Csv => output.to_csv(),
    };
    emit(&args.common.out, &text)?;
    Ok(exit_for(output.base_converged && output.perturbed_converged))
}

fn cmd_check_mcmc(args: CheckMcmcArgs) -> Result<u8> {
    let cfg = resolve_config(&args.common)?;
    let built = build_model(&cfg, args.data.as_deref())?;
    let directions = direction_list(&cfg.sensitivity_directions)?;
    let output = with_model!(&built.kind, |m| {
        let analysis = analyze(m, &cfg, &directions)?;
        let vb_seconds = analysis.fit_seconds + analysis.lrvb_seconds;
        let clock = Instant::now();
        let opts = cfg.mcmc.to_options(analysis.solution.mfvb_sds());
        let chain = mcmc::sample(m, &cfg.alpha(), &analysis.means, &opts, cfg.seed)?;
        let mcmc_seconds = clock.elapsed().as_secs_f64();
        let table = mcmc::compare(m, &analysis.fit, &analysis.solution, &chain)?;
        if let Some(path) = &args.save_draws {
            let csv = chain.draws_csv(&m.constrained_names())?;
            std::fs::write(path, csv)
                .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
        }
        Ok::<_, Error>(CheckOutput::from_comparison(
            &table,
            analysis.fit.converged,
            chain.acceptance_rate,
            chain.seed,
            CheckTimings { vb_seconds, mcmc_seconds, speed_ratio: mcmc_seconds / vb_seconds },
            cfg.clone(),
        ))
    })?;
    let text = match args.common.format {
        Format::Json => to_json(&output)?,
        Format::Csv => output.to_csv(),
    };
    emit(&args.common.out, &text)?;
    Ok(exit_for(output.converged))
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8> {
    let mut cfg = resolve_config(&args.common)?;
    if cfg.model != "microcredit" {
        return Err(Error::InvalidParameter(format!(
            "simulate generates microcredit datasets, but the config model is `{}`",
            cfg.model
        )));
    }
    let (truth, sizes) = match &cfg.truth {
        Some(t) => {
            if let Some(k) = args.sites {
                if k != t.mu_k.len() {
                    return Err(Error::InvalidParameter(format!(
                        "--sites {k} conflicts with the {}-site truth section",
                        t.mu_k.len()
                    )));
                }
            }
            let sizes = match args.per_site {
                Some(n) => vec![n; t.mu_k.len()],
                None => t.sizes.clone(),
            };
            (t.to_parameters(), sizes)
        }
        None => {
            let k = args.sites.unwrap_or(7);
            let n = args.per_site.unwrap_or(200);
            // Global truth is fixed; the site effects are drawn once from
            // the pool it implies, on their own seed stream.
            let base = ModelParameters {
                mu: 1.0,
                tau: 0.5,
                mu_k: vec![0.0; k],
                tau_k: vec![0.0; k],
                log_sigma2_inv: vec![0.0; k],
                log_s1: -0.5,
                log_s2: -0.8,
                z_rho: 0.2,
            };
            (draw_site_effects(&base, cfg.seed), vec![n; k])
        }
    };
    let dataset = simulate(&truth, &sizes, cfg.seed)?;
    let data_path = args.common.out.clone().unwrap_or_else(|| PathBuf::from("data.csv"));
    std::fs::write(&data_path, crate::data::dataset_to_csv(&dataset))
        .map_err(|e| Error::InvalidData(format!("{}: {e}", data_path.display())))?;

    cfg.truth = Some(Truth::from_parameters(&truth, sizes));
    std::fs::write(&args.truth_out, to_json(&cfg)?)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", args.truth_out.display())))?;
    println!(
        "wrote {} rows across {} sites to {}; truth to {}",
        dataset.n_rows(),
        dataset.n_sites(),
        data_path.display(),
        args.truth_out.display()
    );
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConjugateNormal;
    use lrvb::models::ALPHA_NAMES;

    #[test]
    fn unknown_models_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model = "stan".to_string();
        let err = build_model(&cfg, None).unwrap_err();
        assert!(err.to_string().contains("unknown model"), "{err}");
    }

    #[test]
    fn microcredit_requires_a_dataset() {
        let cfg = RunConfig::default();
        let err = build_model(&cfg, None).unwrap_err();
        assert!(err.to_string().contains("dataset"), "{err}");
    }

    #[test]
    fn synthetic_models_take_no_dataset() {
        let mut cfg = RunConfig::default();
        cfg.model = "conjugate_normal".to_string();
        cfg.conjugate_normal = Some(ConjugateNormal { y: vec![1.0], noise_sd: 1.0 });
        assert!(build_model(&cfg, None).is_ok());
        let err = build_model(&cfg, Some(Path::new("data.csv"))).unwrap_err();
        assert!(err.to_string().contains("takes no dataset"), "{err}");
    }

    #[test]
    fn missing_model_sections_are_reported() {
        let mut cfg = RunConfig::default();
        cfg.model = "gaussian_target".to_string();
        let err = build_model(&cfg, None).unwrap_err();
        assert!(err.to_string().contains("gaussian_target"), "{err}");
    }

    #[test]
    fn direction_lists_resolve_alpha_names() {
        let dirs = direction_list(&["mu0".to_string(), "sigma_rate".to_string()]).unwrap();
        assert_eq!(dirs.len(), 2);
        assert_eq!(dirs[0].delta[0], 1.0);
        assert_eq!(dirs[1].delta[9], 1.0);
        assert!(direction_list(&["bogus".to_string()]).is_err());
        assert_eq!(ALPHA_NAMES.len(), 10);
    }
}
