//! `nprest`: simulation, estimation, Monte Carlo, survey belief fitting and TFP analysis.
//!
//! Exit codes: 0 success, 1 estimation did not converge (results are still written),
//! 2 usage or configuration error.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use npr_core::baselines::{acf_fit, lp_fit, ols_fd, ols_fe, ols_levels, op_fit, ProxyConfig};
use npr_core::beliefs::{
    fit_survey, read_survey_csv, synthetic_response, write_belief_csv, write_survey_csv, SurveyRecord, SurveyVariable,
};
use npr_core::datamodel::{
    fmt_f64, join_lead, read_panel_csv, write_panel_csv, EstimationResult, Family, Panel, ProductionSpec,
};
use npr_core::linalg::{mean, median};
use npr_core::mcsim::{
    run_replications, simulate, write_truth_csv, DgpConfig, EstimatorKind, ReplicationOptions, Scenario,
};
use npr_core::npr::{npr_bias_covariate, npr_bias_invariant, npr_fit, wald_beta_l, NprConfig};
use npr_core::tfp::{outcome_regression, tfp_residuals, write_tfp_csv, Outcome};

#[derive(Parser, Debug)]
#[command(
    name = "nprest",
    version,
    about = "Production function estimation with firm expectations"
)]
struct Cli {
    /// JSON config with optional sections: dgp, npr, proxy, replication.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a panel; writes panel.csv and truth.csv.
    Simulate {
        #[arg(long, value_parser = parse_scenario)]
        scenario: Option<Scenario>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate a production function from a panel CSV; writes results.json.
    Estimate {
        #[arg(long, value_enum)]
        method: EstMethod,
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for bootstrap resampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bootstrap replications for NPR standard errors (0 disables).
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Auxiliary columns driving the expectation bias.
        #[arg(long, value_delimiter = ',', default_value = "mgmt")]
        covariates: Vec<String>,
    },
    /// Monte Carlo study; writes summary.csv, runs.csv and summary.json.
    Montecarlo {
        #[arg(long, value_parser = parse_scenario)]
        scenario: Option<Scenario>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: u64,
        /// Comma-separated estimators: NPR, NPR_BiasCovariate, OLS, OP, LP, ACF.
        #[arg(long, value_delimiter = ',', value_parser = parse_estimator)]
        estimators: Option<Vec<EstimatorKind>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit lognormal beliefs to survey responses; writes beliefs.csv and diagnostics.csv.
    FitBeliefs {
        #[arg(long)]
        survey: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic survey responses from known lognormals; writes survey.csv and
    /// survey_truth.csv.
    GenSurvey {
        /// Number of firms (one year, three variables each).
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Take (mu, sigma2) from the beliefs of this panel instead of random draws.
        #[arg(long)]
        panel: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// TFP residuals and outcome regressions; writes tfp.csv and regressions.json.
    Tfp {
        #[arg(long)]
        panel: PathBuf,
        /// results.json from `estimate`, or a bare coefficient object.
        #[arg(long)]
        coefficients: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstMethod {
    Npr,
    NprTranslog,
    NprBiasCov,
    NprBiasInv,
    Wald,
    Ols,
    OlsFd,
    OlsFe,
    Op,
    Lp,
    Acf,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    Scenario::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Scenario::ALL.iter().map(|s| s.name()).collect();
        format!("unknown scenario {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    EstimatorKind::parse(s).ok_or_else(|| format!("unknown estimator {s:?}"))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    dgp: Option<DgpConfig>,
    npr: Option<NprConfig>,
    proxy: Option<ProxyConfig>,
    replication: Option<ReplicationOptions>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    NotConverged(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        match e.downcast_ref::<npr_core::Error>() {
            Some(npr_core::Error::NotConverged(_)) => Failure::NotConverged(e),
            _ => Failure::Usage(e),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NotConverged(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage(anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<FileConfig>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Simulate { scenario, seed, out } => cmd_simulate(&file, scenario, seed, &out),
        Command::Estimate {
            method,
            panel,
            out,
            seed,
            bootstrap,
            covariates,
        } => cmd_estimate(&file, method, &panel, &out, seed, bootstrap, &covariates),
        Command::Montecarlo {
            scenario,
            runs,
            seed,
            estimators,
            out,
        } => cmd_montecarlo(&file, scenario, runs, seed, estimators, &out),
        Command::FitBeliefs { survey, out } => cmd_fit_beliefs(&survey, &out),
        Command::GenSurvey { n, seed, panel, out } => cmd_gen_survey(n, seed, panel.as_deref(), &out),
        Command::Tfp {
            panel,
            coefficients,
            out,
        } => cmd_tfp(&panel, &coefficients, &out),
    }
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_panel(path: &Path) -> anyhow::Result<Panel> {
    let f = File::open(path).with_context(|| format!("opening panel {}", path.display()))?;
    let (panel, rejected) = read_panel_csv(BufReader::new(f))?;
    if !rejected.is_empty() {
        log::warn!("{} panel rows rejected", rejected.len());
    }
    Ok(panel)
}

fn dgp_config(file: &FileConfig, scenario: Option<Scenario>, seed: u64) -> anyhow::Result<DgpConfig> {
    let mut cfg = file.dgp.clone().unwrap_or_default();
    if let Some(s) = scenario {
        cfg.apply_scenario(s);
    }
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_simulate(file: &FileConfig, scenario: Option<Scenario>, seed: u64, out: &Path) -> CliResult {
    let cfg = dgp_config(file, scenario, seed)?;
    let sim = simulate(&cfg)?;
    let mut w = create(out, "panel.csv")?;
    write_panel_csv(&sim.panel, &mut w)?;
    w.flush()?;
    let mut w = create(out, "truth.csv")?;
    write_truth_csv(&sim.truth, &mut w)?;
    w.flush()?;
    Ok(())
}

fn result_json(res: &EstimationResult, extra: Value) -> Value {
    let names = res.spec.coefficient_names();
    let coefs = res.spec.coefficients();
    let mut coefficients = serde_json::Map::new();
    coefficients.insert("beta0".into(), json!(res.spec.beta0));
    for (n, c) in names.iter().zip(&coefs) {
        coefficients.insert((*n).into(), json!(c));
    }
    let std_errors: Option<serde_json::Map<String, Value>> = res.std_errors.as_ref().map(|se| {
        names
            .iter()
            .zip(se)
            .map(|(n, s)| ((*n).to_string(), json!(s)))
            .collect()
    });
    let crs = res.crs_test();
    let mut v = json!({
        "method": res.method,
        "coefficients": coefficients,
        "std_errors": std_errors,
        "converged": res.converged,
        "iterations": res.iterations,
        "objective": res.objective,
        "n_obs": res.n_obs,
        "n_firms": res.n_firms,
        "beta_l_plus_beta_k": crs.sum,
        "beta_l_plus_beta_k_se": crs.se,
        "crs_p_value": crs.p_value,
        "spec": res.spec,
        "covariance": res.covariance,
    });
    if let Some((stat, p)) = res.second_order_wald() {
        v["second_order_wald"] = json!({ "statistic": stat, "p_value": p });
    }
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    v
}

fn cmd_estimate(
    file: &FileConfig,
    method: EstMethod,
    panel_path: &Path,
    out: &Path,
    seed: u64,
    bootstrap: Option<usize>,
    covariates: &[String],
) -> CliResult {
    let panel = load_panel(panel_path)?;
    let mut npr = file.npr.clone().unwrap_or_default();
    npr.seed = seed;
    if let Some(b) = bootstrap {
        npr.bootstrap_reps = b;
    }
    let proxy = file.proxy.unwrap_or_default();
    let mut extra = json!({});
    let res = match method {
        EstMethod::Npr => npr_fit(&panel, &npr)?,
        EstMethod::NprTranslog => {
            npr.family = Family::Translog;
            npr_fit(&panel, &npr)?
        }
        EstMethod::NprBiasCov => {
            let (r, lambda) = npr_bias_covariate(&panel, covariates, &npr)?;
            let names: Vec<String> = std::iter::once("intercept".to_string())
                .chain(covariates.iter().cloned())
                .collect();
            extra = json!({ "bias_coefficients": names.iter().zip(&lambda).map(|(n, l)| (n.clone(), json!(l))).collect::<serde_json::Map<_, _>>() });
            r
        }
        EstMethod::NprBiasInv => {
            let (r, iota) = npr_bias_invariant(&panel, &npr)?;
            extra = json!({ "firm_bias": iota });
            r
        }
        EstMethod::Wald => wald_beta_l(&join_lead(&panel, 1))?,
        EstMethod::Ols => ols_levels(&panel)?,
        EstMethod::OlsFd => ols_fd(&panel)?,
        EstMethod::OlsFe => ols_fe(&panel)?,
        EstMethod::Op => op_fit(&panel, &proxy)?,
        EstMethod::Lp => lp_fit(&panel, &proxy)?,
        EstMethod::Acf => acf_fit(&panel, &proxy)?,
    };
    write_json(out, "results.json", &result_json(&res, extra))?;
    if !res.converged {
        return Err(Failure::NotConverged(anyhow!(
            "estimation did not converge; results flagged"
        )));
    }
    Ok(())
}

fn cmd_montecarlo(
    file: &FileConfig,
    scenario: Option<Scenario>,
    runs: Option<usize>,
    seed: u64,
    estimators: Option<Vec<EstimatorKind>>,
    out: &Path,
) -> CliResult {
    let cfg = dgp_config(file, scenario, seed)?;
    let mut opts = file.replication.clone().unwrap_or_default();
    if let Some(r) = runs {
        opts.runs = r;
    }
    if let Some(e) = estimators {
        opts.estimators = e;
    }
    let report = run_replications(&cfg, &opts)?;
    let mut w = csv::Writer::from_writer(create(out, "summary.csv")?);
    w.write_record([
        "estimator",
        "beta_l_mean",
        "beta_l_median",
        "beta_l_sd",
        "beta_l_mse",
        "beta_k_mean",
        "beta_k_median",
        "beta_k_sd",
        "beta_k_mse",
        "n_runs",
    ])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in &report.table.rows {
        w.write_record([
            r.estimator.clone(),
            fmt_f64(r.beta_l_mean),
            fmt_f64(r.beta_l_median),
            opt(r.beta_l_sd),
            fmt_f64(r.beta_l_mse),
            fmt_f64(r.beta_k_mean),
            fmt_f64(r.beta_k_median),
            opt(r.beta_k_sd),
            fmt_f64(r.beta_k_mse),
            r.n_runs.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(out, "runs.csv")?);
    w.write_record(["run", "estimator", "beta_l", "beta_k", "converged"])?;
    for r in &report.runs {
        w.write_record([
            r.run.to_string(),
            r.estimator.clone(),
            fmt_f64(r.beta_l),
            fmt_f64(r.beta_k),
            r.converged.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(
        out,
        "summary.json",
        &json!({ "dgp": cfg, "runs": opts.runs, "table": report.table, "failures": report.failures }),
    )?;
    Ok(())
}

fn cmd_fit_beliefs(survey: &Path, out: &Path) -> CliResult {
    let f = File::open(survey).with_context(|| format!("opening survey {}", survey.display()))?;
    let records = read_survey_csv(BufReader::new(f))?;
    if records.is_empty() {
        return Err(Failure::Usage(anyhow!("survey file has no responses")));
    }
    let (table, discarded) = fit_survey(&records);
    let mut w = create(out, "beliefs.csv")?;
    write_belief_csv(&table, &mut w)?;
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(out, "diagnostics.csv")?);
    w.write_record([
        "variable",
        "n_fitted",
        "mean_abs_deviation",
        "median_abs_deviation",
        "n_degenerate",
    ])?;
    for v in [
        SurveyVariable::Turnover,
        SurveyVariable::Employment,
        SurveyVariable::Materials,
    ] {
        let fits: Vec<_> = table.values().filter_map(|m| m.get(&v)).collect();
        if fits.is_empty() {
            continue;
        }
        let mads: Vec<f64> = fits.iter().map(|b| b.mad).collect();
        let degenerate = fits.iter().filter(|b| b.degenerate).count();
        w.write_record([
            v.name().to_string(),
            fits.len().to_string(),
            fmt_f64(mean(&mads)),
            fmt_f64(median(&mads)),
            degenerate.to_string(),
        ])?;
    }
    w.write_record(["discarded", &discarded.to_string(), "", "", ""])?;
    w.flush()?;
    Ok(())
}

fn cmd_gen_survey(n: usize, seed: u64, panel: Option<&Path>, out: &Path) -> CliResult {
    let mut truth: Vec<(String, i32, SurveyVariable, f64, f64)> = Vec::new();
    match panel {
        Some(p) => {
            let panel = load_panel(p)?;
            for r in panel.rows() {
                let pairs = [
                    (SurveyVariable::Turnover, r.beliefs.y),
                    (SurveyVariable::Employment, r.beliefs.l),
                    (SurveyVariable::Materials, r.beliefs.m),
                ];
                for (v, b) in pairs {
                    if let Some(b) = b {
                        truth.push((r.firm_id.clone(), r.year, v, b.mu, b.sigma2));
                    }
                }
            }
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let width = n.max(1).to_string().len();
            for i in 0..n {
                for v in [
                    SurveyVariable::Turnover,
                    SurveyVariable::Employment,
                    SurveyVariable::Materials,
                ] {
                    let mu = rng.random_range(0.0..10.0);
                    let sd: f64 = rng.random_range(0.05..1.0);
                    truth.push((format!("f{i:0width$}"), 1, v, mu, sd * sd));
                }
            }
        }
    }
    let records: Vec<SurveyRecord> = truth
        .iter()
        .map(|(f, y, v, mu, s2)| SurveyRecord {
            firm_id: f.clone(),
            year: *y,
            variable: *v,
            response: synthetic_response(*mu, *s2),
        })
        .collect();
    let mut w = create(out, "survey.csv")?;
    write_survey_csv(&records, &mut w)?;
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(out, "survey_truth.csv")?);
    w.write_record(["firm_id", "year", "variable", "mu", "sigma2"])?;
    for (f, y, v, mu, s2) in &truth {
        w.write_record([
            f.clone(),
            y.to_string(),
            v.name().to_string(),
            fmt_f64(*mu),
            fmt_f64(*s2),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn load_spec(path: &Path) -> anyhow::Result<ProductionSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading coefficients {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let spec_value = v.get("spec").cloned().unwrap_or(v);
    let spec: ProductionSpec =
        serde_json::from_value(spec_value).context("coefficient file lacks a production spec")?;
    if !(spec.beta_l.is_finite() && spec.beta_k.is_finite()) {
        bail!("coefficients must be finite");
    }
    Ok(spec)
}

fn cmd_tfp(panel_path: &Path, coefficients: &Path, out: &Path) -> CliResult {
    let spec = load_spec(coefficients)?;
    let panel = load_panel(panel_path)?;
    let rows = tfp_residuals(&panel, &spec)?;
    let mut w = create(out, "tfp.csv")?;
    write_tfp_csv(&rows, &mut w)?;
    w.flush()?;
    let mut year_means: std::collections::BTreeMap<i32, (f64, usize)> = Default::default();
    for r in &rows {
        let e = year_means.entry(r.year).or_default();
        e.0 += r.tfp;
        e.1 += 1;
    }
    let max_year_mean = year_means
        .values()
        .map(|(s, n)| (s / *n as f64).abs())
        .fold(0.0, f64::max);
    let mut regressions = Vec::new();
    let mut skipped = Vec::new();
    for o in Outcome::ALL {
        match outcome_regression(&rows, o) {
            Ok(f) => regressions.push(f),
            Err(e) => skipped.push(json!({ "outcome": o.name(), "reason": e.to_string() })),
        }
    }
    write_json(
        out,
        "regressions.json",
        &json!({
            "spec": spec,
            "n_rows": rows.len(),
            "max_abs_year_mean_tfp": max_year_mean,
            "regressions": regressions,
            "skipped": skipped,
        }),
    )?;
    Ok(())
}
