//! Parallel Monte Carlo replications with per-run random streams and run-ordered reduction.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate, DgpConfig};
use crate::baselines::{acf_fit, is_plausible, lp_fit, ols_levels, op_fit, AcfStart, ProxyConfig};
use crate::datamodel::EstimationResult;
use crate::error::{Error, Result};
use crate::linalg::{mean, median, sample_var};
use crate::npr::{npr_bias_covariate, npr_fit, NprConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "NPR")]
    Npr,
    #[serde(rename = "NPR_BiasCovariate")]
    NprBiasCovariate,
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "OP")]
    Op,
    #[serde(rename = "LP")]
    Lp,
    #[serde(rename = "ACF")]
    Acf,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Npr => "NPR",
            Self::NprBiasCovariate => "NPR_BiasCovariate",
            Self::Ols => "OLS",
            Self::Op => "OP",
            Self::Lp => "LP",
            Self::Acf => "ACF",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let all = [
            Self::Npr,
            Self::NprBiasCovariate,
            Self::Ols,
            Self::Op,
            Self::Lp,
            Self::Acf,
        ];
        all.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

/// Label of the filtered ACF summary row.
pub const ACF_PLAUSIBLE: &str = "ACF (plausible)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicationOptions {
    pub runs: usize,
    pub estimators: Vec<EstimatorKind>,
    pub npr: NprConfig,
    pub proxy: ProxyConfig,
    /// Start ACF at the true coefficients instead of OLS.
    pub acf_start_at_truth: bool,
    pub bias_covariates: Vec<String>,
}

impl Default for ReplicationOptions {
    fn default() -> Self {
        Self {
            runs: 100,
            estimators: vec![
                EstimatorKind::Npr,
                EstimatorKind::Ols,
                EstimatorKind::Op,
                EstimatorKind::Lp,
                EstimatorKind::Acf,
            ],
            npr: NprConfig {
                bootstrap_reps: 0,
                ..NprConfig::default()
            },
            proxy: ProxyConfig::default(),
            acf_start_at_truth: true,
            bias_covariates: vec!["mgmt".into()],
        }
    }
}

/// One estimate from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub estimator: String,
    pub beta_l: f64,
    pub beta_k: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub beta_l_mean: f64,
    pub beta_l_median: f64,
    /// Missing with fewer than two runs.
    pub beta_l_sd: Option<f64>,
    pub beta_l_mse: f64,
    pub beta_k_mean: f64,
    pub beta_k_median: f64,
    pub beta_k_sd: Option<f64>,
    pub beta_k_mse: f64,
    pub n_runs: usize,
}

impl SummaryRow {
    fn from_estimates(estimator: &str, est: &[(f64, f64)], truth: (f64, f64)) -> Self {
        let bl: Vec<f64> = est.iter().map(|e| e.0).collect();
        let bk: Vec<f64> = est.iter().map(|e| e.1).collect();
        let mse = |v: &[f64], t: f64| mean(&v.iter().map(|x| (x - t).powi(2)).collect::<Vec<_>>());
        let sd = |v: &[f64]| sample_var(v).map(f64::sqrt);
        Self {
            estimator: estimator.into(),
            beta_l_mean: mean(&bl),
            beta_l_median: median(&bl),
            beta_l_sd: sd(&bl),
            beta_l_mse: mse(&bl, truth.0),
            beta_k_mean: mean(&bk),
            beta_k_median: median(&bk),
            beta_k_sd: sd(&bk),
            beta_k_mse: mse(&bk, truth.1),
            n_runs: est.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub truth_beta_l: f64,
    pub truth_beta_k: f64,
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn row(&self, estimator: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub table: SummaryTable,
    pub runs: Vec<RunRecord>,
    /// Failed or non-converged estimates per estimator.
    pub failures: BTreeMap<String, usize>,
}

fn estimate(
    kind: EstimatorKind,
    sim: &super::SimPanel,
    cfg: &DgpConfig,
    opts: &ReplicationOptions,
) -> Result<EstimationResult> {
    let p = &sim.panel;
    match kind {
        EstimatorKind::Npr => npr_fit(p, &opts.npr),
        EstimatorKind::NprBiasCovariate => npr_bias_covariate(p, &opts.bias_covariates, &opts.npr).map(|r| r.0),
        EstimatorKind::Ols => ols_levels(p),
        EstimatorKind::Op => op_fit(p, &opts.proxy),
        EstimatorKind::Lp => lp_fit(p, &opts.proxy),
        EstimatorKind::Acf => {
            let mut proxy = opts.proxy;
            if opts.acf_start_at_truth {
                proxy.acf_start = AcfStart::Given(cfg.beta_l, cfg.beta_k);
            }
            acf_fit(p, &proxy)
        }
    }
}

/// Simulates `opts.runs` panels (run `r` uses stream `r` of `cfg.seed`) and summarizes each estimator.
///
/// Summaries use converged estimates only. ACF gets a second row restricted to plausible estimates.
/// Bootstrap standard errors are never computed here.
pub fn run_replications(cfg: &DgpConfig, opts: &ReplicationOptions) -> Result<ReplicationReport> {
    cfg.validate()?;
    if opts.runs == 0 {
        return Err(Error::InvalidInput("at least one replication is required".into()));
    }
    let mut opts = opts.clone();
    opts.npr.bootstrap_reps = 0;
    let opts = &opts;
    let per_run: Vec<Result<Vec<Option<RunRecord>>>> = (0..opts.runs)
        .into_par_iter()
        .map(|run| {
            let mut c = cfg.clone();
            c.stream = run as u64;
            let sim = simulate(&c)?;
            Ok(opts
                .estimators
                .iter()
                .map(|&kind| match estimate(kind, &sim, cfg, opts) {
                    Ok(r) => Some(RunRecord {
                        run,
                        estimator: kind.name().into(),
                        beta_l: r.spec.beta_l,
                        beta_k: r.spec.beta_k,
                        converged: r.converged,
                    }),
                    Err(e) => {
                        log::warn!("run {run}: {} failed: {e}", kind.name());
                        None
                    }
                })
                .collect())
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for res in per_run {
        for (kind, rec) in opts.estimators.iter().zip(res?) {
            match rec {
                Some(r) => {
                    if !r.converged {
                        *failures.entry(kind.name().into()).or_default() += 1;
                    }
                    runs.push(r);
                }
                None => *failures.entry(kind.name().into()).or_default() += 1,
            }
        }
    }
    let truth = (cfg.beta_l, cfg.beta_k);
    let mut rows = Vec::new();
    for kind in &opts.estimators {
        let est: Vec<(f64, f64)> = runs
            .iter()
            .filter(|r| r.estimator == kind.name() && r.converged)
            .map(|r| (r.beta_l, r.beta_k))
            .collect();
        if est.is_empty() {
            continue;
        }
        rows.push(SummaryRow::from_estimates(kind.name(), &est, truth));
        if *kind == EstimatorKind::Acf {
            let kept: Vec<(f64, f64)> = est.iter().copied().filter(|e| is_plausible(e.0, e.1)).collect();
            if !kept.is_empty() {
                rows.push(SummaryRow::from_estimates(ACF_PLAUSIBLE, &kept, truth));
            }
        }
    }
    Ok(ReplicationReport {
        table: SummaryTable {
            truth_beta_l: truth.0,
            truth_beta_k: truth.1,
            rows,
        },
        runs,
        failures,
    })
}
