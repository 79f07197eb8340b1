//! Report schemas. JSON field order follows struct declaration order and
//! floats print in shortest round-trip form, so reports are byte-stable
//! across runs except for the wall-clock fields. The CSV variants carry
//! the same tables for external plotting tools.

use lrvb::lrvb::SensitivityReport;
use lrvb::mcmc::Comparison;
use lrvb::{Error, Result};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::RunConfig;

/// Full output of `fit`.
#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub model: String,
    pub converged: bool,
    pub iterations: usize,
    pub kl_value: f64,
    pub grad_norm: f64,
    pub warnings: Vec<String>,
    pub theta_names: Vec<String>,
    pub posterior_means: Vec<f64>,
    pub mfvb_sds: Vec<f64>,
    pub lrvb_sds: Vec<f64>,
    /// Corrected posterior covariance, row by row.
    pub lrvb_cov: Vec<Vec<f64>>,
    pub sensitivity: SensitivityTable,
    pub timings: Timings,
    pub config: RunConfig,
}

#[derive(Debug, Serialize)]
pub struct SensitivityTable {
    pub alpha_names: Vec<String>,
    pub theta_names: Vec<String>,
    /// dE[θ_i]/dα_j, one row per θ entry.
    pub raw: Vec<Vec<f64>>,
    /// The same rows divided by the corrected standard deviations.
    pub normalized: Vec<Vec<f64>>,
}

impl SensitivityTable {
    pub fn from_report(report: &SensitivityReport) -> Self {
        Self {
            alpha_names: report.alpha_names.clone(),
            theta_names: report.theta_names.clone(),
            raw: matrix_rows(&report.raw),
            normalized: matrix_rows(&report.normalized),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Timings {
    pub fit_seconds: f64,
    pub lrvb_seconds: f64,
    pub total_seconds: f64,
}

impl AnalysisReport {
    /// Reject reports carrying NaN or infinite entries before they are
    /// written anywhere.
    pub fn ensure_finite(&self) -> Result<()> {
        let mut values = vec![self.kl_value, self.grad_norm];
        values.extend(&self.posterior_means);
        values.extend(&self.mfvb_sds);
        values.extend(&self.lrvb_sds);
        values.extend(self.lrvb_cov.iter().flatten());
        values.extend(self.sensitivity.raw.iter().flatten());
        values.extend(self.sensitivity.normalized.iter().flatten());
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "the analysis report" });
        }
        Ok(())
    }

    /// Per-parameter summary table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,posterior_mean,mfvb_sd,lrvb_sd\n");
        for i in 0..self.theta_names.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.theta_names[i], self.posterior_means[i], self.mfvb_sds[i], self.lrvb_sds[i]
            ));
        }
        out
    }
}

/// Output of `sensitivity`: one focal posterior mean against every
/// requested hyperparameter.
#[derive(Debug, Serialize)]
pub struct SensitivityOutput {
    /// The θ entry the rows refer to.
    pub target: String,
    pub rows: Vec<SensitivityRow>,
    pub config: RunConfig,
}

#[derive(Debug, Serialize)]
pub struct SensitivityRow {
    pub alpha: String,
    pub raw: f64,
    pub normalized: f64,
}

impl SensitivityOutput {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,raw,normalized\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}\n", row.alpha, row.raw, row.normalized));
        }
        out
    }
}

/// Output of `manual-perturb`: predicted versus refit mean shifts.
#[derive(Debug, Serialize)]
pub struct PerturbOutput {
    pub param: String,
    pub delta: f64,
    pub base_converged: bool,
    pub perturbed_converged: bool,
    pub rows: Vec<PerturbRow>,
    pub config: RunConfig,
}

#[derive(Debug, Serialize)]
pub struct PerturbRow {
    pub name: String,
    pub predicted_shift: f64,
    pub actual_shift: f64,
    pub relative_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcmc_shift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcmc_mcse: Option<f64>,
}

impl PerturbOutput {
    pub fn to_csv(&self) -> String {
        let with_mcmc = self.rows.iter().any(|r| r.mcmc_shift.is_some());
        let mut out = String::from("name,predicted_shift,actual_shift,relative_error");
        if with_mcmc {
            out.push_str(",mcmc_shift,mcmc_mcse");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                row.name, row.predicted_shift, row.actual_shift, row.relative_error
            ));
            if with_mcmc {
                out.push_str(&format!(
                    ",{},{}",
                    row.mcmc_shift.unwrap_or(f64::NAN),
                    row.mcmc_mcse.unwrap_or(f64::NAN)
                ));
            }
            out.push('\n');
        }
        out
    }
}

/// Output of `check-mcmc`: the posterior comparison table plus run
/// bookkeeping.
#[derive(Debug, Serialize)]
pub struct CheckOutput {
    pub converged: bool,
    pub acceptance_rate: f64,
    pub seed: u64,
    pub rows: Vec<CheckRow>,
    pub max_mean_gap_mcse: f64,
    pub max_sd_rel_gap: f64,
    pub timings: CheckTimings,
    pub config: RunConfig,
}

#[derive(Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub vb_mean: f64,
    pub mcmc_mean: f64,
    pub mcmc_mcse: f64,
    pub mfvb_sd: f64,
    pub lrvb_sd: f64,
    pub mcmc_sd: f64,
}

#[derive(Debug, Serialize)]
pub struct CheckTimings {
    pub vb_seconds: f64,
    pub mcmc_seconds: f64,
    /// MCMC wall time over VB wall time.
    pub speed_ratio: f64,
}

impl CheckOutput {
    pub fn from_comparison(
        table: &Comparison,
        converged: bool,
        acceptance_rate: f64,
        seed: u64,
        timings: CheckTimings,
        config: RunConfig,
    ) -> Self {
        let rows = table
            .rows
            .iter()
            .map(|r| CheckRow {
                name: r.name.clone(),
                vb_mean: r.vb_mean,
                mcmc_mean: r.mcmc_mean,
                mcmc_mcse: r.mcmc_mcse,
                mfvb_sd: r.mfvb_sd,
                lrvb_sd: r.lrvb_sd,
                mcmc_sd: r.mcmc_sd,
            })
            .collect();
        Self {
            converged,
            acceptance_rate,
            seed,
            rows,
            max_mean_gap_mcse: table.max_mean_gap_mcse,
            max_sd_rel_gap: table.max_sd_rel_gap,
            timings,
            config,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,vb_mean,mcmc_mean,mcmc_mcse,mfvb_sd,lrvb_sd,mcmc_sd\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.name,
                row.vb_mean,
                row.mcmc_mean,
                row.mcmc_mcse,
                row.mfvb_sd,
                row.lrvb_sd,
                row.mcmc_sd
            ));
        }
        out
    }
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Schema(format!("report serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}
