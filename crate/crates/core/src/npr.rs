//! Backfitting estimator that controls for productivity through a monotone smooth of the
//! expectation residual `Z = E[y'] - beta_k k' - beta_l E[l']`, with translog, bias-robust and
//! Wald variants.
//!
//! For coefficients `theta`, one backfitting pass computes `Z(theta)`, fits
//! `y = [1, k, l, year dummies] beta + Psi(Z) + e` and returns the new coefficients `T(theta)`.
//! The estimate is a fixed point of `T`. Plain repeated substitution can be repelled from the
//! fixed point when next-period capital is nearly collinear with current capital, so the fixed
//! point is located with a safeguarded quasi-Newton iteration on `T(theta) - theta`. Convergence
//! is still declared on the distance between successive coefficient vectors.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    join_lead, validate_panel, EstimationResult, Family, Field, FirmYear, Method, Panel, ProductionSpec, SecondOrder,
};
use crate::error::{Error, Result};
use crate::linalg::{mean, ols};
use crate::scam::{Lambda, ScamDesign, ScamFit, ScamOptions, WarmStart};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NprConfig {
    /// Starting `(beta_k, beta_l)` pairs.
    pub init_grid: Vec<(f64, f64)>,
    pub tol: f64,
    pub max_backfit_iters: usize,
    pub bootstrap_reps: usize,
    pub family: Family,
    pub lambda: Lambda,
    pub scam: ScamOptions,
    /// Seed for bootstrap resampling.
    pub seed: u64,
    /// Damping applied to bias updates in the bias-robust loops.
    pub bias_damping: f64,
    pub bias_tol: f64,
    pub bias_max_iters: usize,
}

impl Default for NprConfig {
    fn default() -> Self {
        Self {
            init_grid: default_grid(),
            tol: 1e-6,
            max_backfit_iters: 200,
            bootstrap_reps: 100,
            family: Family::CobbDouglas,
            lambda: Lambda::Auto,
            scam: ScamOptions::default(),
            seed: 0,
            bias_damping: 0.5,
            bias_tol: 1e-5,
            bias_max_iters: 100,
        }
    }
}

/// All pairs from `{0.05, 0.333, 0.617, 0.9}`.
pub fn default_grid() -> Vec<(f64, f64)> {
    let v = [0.05, 0.333, 0.617, 0.9];
    v.iter().flat_map(|&bk| v.iter().map(move |&bl| (bk, bl))).collect()
}

/// Z for one row; see the module docs. Requires `k_next` and beliefs about `y` and `l`.
pub fn npr_z(row: &FirmYear, spec: &ProductionSpec) -> Result<f64> {
    let missing = |field: &str| Error::MissingField {
        field: field.into(),
        firm: row.firm_id.clone(),
        year: row.year,
    };
    let by = row.beliefs.y.ok_or_else(|| missing("belief_mu_y"))?;
    let bl = row.beliefs.l.ok_or_else(|| missing("belief_mu_l"))?;
    let kn = row.k_next.ok_or_else(|| missing("k_next"))?;
    let theta = theta_of(spec);
    Ok(z_value(&theta, by.mu, kn, bl.mu, bl.sigma2))
}

fn theta_of(spec: &ProductionSpec) -> Vec<f64> {
    let mut t = vec![spec.beta_k, spec.beta_l];
    if let Some(s) = &spec.second_order {
        t.extend([s.beta_k2, s.beta_l2, s.beta_lk]);
    }
    t
}

/// `theta = (beta_k, beta_l[, beta_k2, beta_l2, beta_lk])`.
fn z_value(theta: &[f64], mu_y: f64, k_next: f64, mu_l: f64, s2_l: f64) -> f64 {
    let mut z = mu_y - theta[0] * k_next - theta[1] * mu_l;
    if theta.len() == 5 {
        z -= theta[2] * k_next * k_next + theta[3] * (s2_l + mu_l * mu_l) + theta[4] * k_next * mu_l;
    }
    z
}

/// Estimation arrays for the backfitting problem.
#[derive(Debug, Clone)]
pub struct NprData {
    pub y: Vec<f64>,
    pub k: Vec<f64>,
    pub l: Vec<f64>,
    pub k_next: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub mu_l: Vec<f64>,
    pub s2_l: Vec<f64>,
    pub years: Vec<i32>,
    pub firm: Vec<usize>,
    pub firm_ids: Vec<String>,
    /// Amount subtracted from Z (bias corrections).
    pub z_shift: Vec<f64>,
    family: Family,
    year_levels: Vec<i32>,
    design: ScamDesign,
}

impl NprData {
    /// Rows lacking `k_next` take it from the next year's capital when that row exists.
    pub fn from_panel(panel: &Panel, family: Family) -> Result<Self> {
        let filled = panel.clone().with_k_next_from_leads();
        let req = [
            Field::Y,
            Field::L,
            Field::K,
            Field::KNext,
            Field::BeliefY,
            Field::BeliefL,
        ];
        let (valid, _) = validate_panel(&filled, &req)?;
        let rows = valid.rows();
        let mut firm_ids: Vec<String> = Vec::new();
        let mut firm = Vec::with_capacity(rows.len());
        for r in rows {
            if firm_ids.last() != Some(&r.firm_id) {
                firm_ids.push(r.firm_id.clone());
            }
            firm.push(firm_ids.len() - 1);
        }
        Self::build(
            rows.iter().map(|r| r.y).collect(),
            rows.iter().map(|r| r.k).collect(),
            rows.iter().map(|r| r.l).collect(),
            rows.iter().map(|r| r.k_next.unwrap()).collect(),
            rows.iter().map(|r| r.beliefs.y.unwrap().mu).collect(),
            rows.iter().map(|r| r.beliefs.l.unwrap().mu).collect(),
            rows.iter().map(|r| r.beliefs.l.unwrap().sigma2).collect(),
            rows.iter().map(|r| r.year).collect(),
            firm,
            firm_ids,
            family,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        y: Vec<f64>,
        k: Vec<f64>,
        l: Vec<f64>,
        k_next: Vec<f64>,
        mu_y: Vec<f64>,
        mu_l: Vec<f64>,
        s2_l: Vec<f64>,
        years: Vec<i32>,
        firm: Vec<usize>,
        firm_ids: Vec<String>,
        family: Family,
    ) -> Result<Self> {
        let mut year_levels = years.clone();
        year_levels.sort_unstable();
        year_levels.dedup();
        let x = design_matrix(&k, &l, &years, &year_levels, family);
        let design = ScamDesign::new(&y, &x)?;
        let n = y.len();
        Ok(Self {
            y,
            k,
            l,
            k_next,
            mu_y,
            mu_l,
            s2_l,
            years,
            firm,
            firm_ids,
            z_shift: vec![0.0; n],
            family,
            year_levels,
            design,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn dim(&self) -> usize {
        match self.family {
            Family::CobbDouglas => 2,
            Family::Translog => 5,
        }
    }

    fn z(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| z_value(theta, self.mu_y[i], self.k_next[i], self.mu_l[i], self.s2_l[i]) - self.z_shift[i])
            .collect()
    }

    /// Coefficients of `theta` inside the linear design `[1, k, l, k^2, l^2, kl, dummies]`.
    fn theta_from_beta(&self, beta: &DVector<f64>) -> Vec<f64> {
        (1..=self.dim()).map(|j| beta[j]).collect()
    }

    /// Rows `idx` as a new data set; repeated firms become distinct clusters.
    fn resample(&self, firms: &[usize]) -> Result<Self> {
        let mut by_firm: Vec<Vec<usize>> = vec![Vec::new(); self.firm_ids.len()];
        for (i, &f) in self.firm.iter().enumerate() {
            by_firm[f].push(i);
        }
        let mut idx = Vec::new();
        let mut firm = Vec::new();
        let mut firm_ids = Vec::new();
        for (c, &f) in firms.iter().enumerate() {
            for &i in &by_firm[f] {
                idx.push(i);
                firm.push(c);
            }
            firm_ids.push(format!("{}#{c}", self.firm_ids[f]));
        }
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let mut out = Self::build(
            pick(&self.y),
            pick(&self.k),
            pick(&self.l),
            pick(&self.k_next),
            pick(&self.mu_y),
            pick(&self.mu_l),
            pick(&self.s2_l),
            idx.iter().map(|&i| self.years[i]).collect(),
            firm,
            firm_ids,
            self.family,
        )?;
        out.z_shift = pick(&self.z_shift);
        Ok(out)
    }

    fn spec_from_beta(&self, beta: &DVector<f64>) -> ProductionSpec {
        let second_order = match self.family {
            Family::CobbDouglas => None,
            Family::Translog => Some(SecondOrder {
                beta_k2: beta[3],
                beta_l2: beta[4],
                beta_lk: beta[5],
            }),
        };
        let p0 = 1 + self.dim();
        let mut year_effects = BTreeMap::new();
        if let Some(&first) = self.year_levels.first() {
            year_effects.insert(first, 0.0);
        }
        for (j, &yr) in self.year_levels.iter().skip(1).enumerate() {
            year_effects.insert(yr, beta[p0 + j]);
        }
        ProductionSpec {
            beta0: beta[0],
            beta_l: beta[2],
            beta_k: beta[1],
            second_order,
            year_effects,
        }
    }
}

fn design_matrix(k: &[f64], l: &[f64], years: &[i32], levels: &[i32], family: Family) -> DMatrix<f64> {
    let n = k.len();
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n], k.to_vec(), l.to_vec()];
    if family == Family::Translog {
        cols.push(k.iter().map(|v| v * v).collect());
        cols.push(l.iter().map(|v| v * v).collect());
        cols.push(k.iter().zip(l).map(|(a, b)| a * b).collect());
    }
    for &yr in levels.iter().skip(1) {
        cols.push(years.iter().map(|&y| if y == yr { 1.0 } else { 0.0 }).collect());
    }
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
}

/// Outcome of the fixed-point search from one start.
#[derive(Debug, Clone)]
pub struct StartOutcome {
    pub start: Vec<f64>,
    /// Coefficients estimated at the last accepted iterate.
    pub theta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Scam sse at accepted iterates.
    pub sse_trace: Vec<f64>,
    pub sse: f64,
    pub fit: Option<ScamFit>,
    pub beta: Option<DVector<f64>>,
}

impl StartOutcome {
    /// Number of accepted iterations, after the second, at which the sse rose by more than 1e-9 relative.
    pub fn sse_increases(&self) -> usize {
        self.sse_trace
            .windows(2)
            .skip(1)
            .filter(|w| w[1] > w[0] * (1.0 + 1e-9))
            .count()
    }
}

/// One evaluation of the backfitting map.
struct Eval {
    t: Vec<f64>,
    g: DVector<f64>,
    fit: ScamFit,
}

fn evaluate(data: &NprData, theta: &[f64], lambda: Lambda, opts: &ScamOptions, warm: &mut WarmStart) -> Result<Eval> {
    let z = data.z(theta);
    let fit = data.design.fit(&z, lambda, opts, warm)?;
    *warm = fit.warm_start();
    let t = data.theta_from_beta(&fit.beta);
    let g = DVector::from_fn(t.len(), |j, _| t[j] - theta[j]);
    Ok(Eval { t, g, fit })
}

fn jacobian(data: &NprData, theta: &[f64], base: &Eval, opts: &ScamOptions, warm: &WarmStart) -> Result<DMatrix<f64>> {
    let d = theta.len();
    let lam = Lambda::Fixed(base.fit.lambda);
    let mut jac = DMatrix::zeros(d, d);
    for c in 0..d {
        let h = 1e-5 * theta[c].abs().max(1.0);
        let mut tp = theta.to_vec();
        tp[c] += h;
        let mut w = warm.clone();
        let ep = evaluate(data, &tp, lam, opts, &mut w)?;
        let mut tm = theta.to_vec();
        tm[c] -= h;
        let mut w = warm.clone();
        let em = evaluate(data, &tm, lam, opts, &mut w)?;
        for r in 0..d {
            jac[(r, c)] = (ep.g[r] - em.g[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Locates a fixed point of the backfitting map from `start`.
pub fn solve_from_start(data: &NprData, start: &[f64], cfg: &NprConfig) -> StartOutcome {
    let mut out = StartOutcome {
        start: start.to_vec(),
        theta: start.to_vec(),
        converged: false,
        iterations: 0,
        sse_trace: Vec::new(),
        sse: f64::INFINITY,
        fit: None,
        beta: None,
    };
    let mut warm = WarmStart::default();
    let opts = &cfg.scam;
    let mut theta = start.to_vec();
    let mut cur = match evaluate(data, &theta, cfg.lambda, opts, &mut warm) {
        Ok(e) => e,
        Err(e) => {
            log::debug!("start {start:?} failed: {e}");
            return out;
        }
    };
    let record = |out: &mut StartOutcome, e: &Eval| {
        out.theta = e.t.clone();
        out.sse = e.fit.sse;
        out.sse_trace.push(e.fit.sse);
        out.beta = Some(e.fit.beta.clone());
        out.fit = Some(e.fit.clone());
    };
    record(&mut out, &cur);
    let mut jac: Option<DMatrix<f64>> = None;
    let mut fresh = false;
    while out.iterations < cfg.max_backfit_iters {
        if cur.g.norm() < cfg.tol {
            out.converged = true;
            break;
        }
        if jac.is_none() {
            match jacobian(data, &theta, &cur, opts, &warm) {
                Ok(j) => jac = Some(j),
                Err(_) => break,
            }
            fresh = true;
        }
        let j = jac.as_ref().unwrap();
        let step = match j.clone().lu().solve(&(-&cur.g)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => -&cur.g,
        };
        let max_step = 0.5;
        let norm = step.norm();
        let mut step = if norm > max_step {
            step * (max_step / norm)
        } else {
            step
        };
        let mut accepted = None;
        for _ in 0..8 {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
            let mut w = warm.clone();
            if let Ok(e) = evaluate(data, &trial, cfg.lambda, opts, &mut w) {
                if e.g.norm() < cur.g.norm() || e.g.norm() < cfg.tol {
                    accepted = Some((trial, e, w));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, e, w)) => {
                out.iterations += 1;
                // Broyden rank-one update of the residual Jacobian.
                let dg = &e.g - &cur.g;
                let jm = jac.as_mut().unwrap();
                let denom = step.norm_squared();
                if denom > 0.0 {
                    let corr = (&dg - &*jm * &step) * step.transpose() / denom;
                    *jm += corr;
                }
                fresh = false;
                theta = trial;
                warm = w;
                cur = e;
                record(&mut out, &cur);
            }
            None if fresh => break,
            None => {
                jac = None;
            }
        }
    }
    if !out.converged && cur.g.norm() < cfg.tol {
        out.converged = true;
    }
    out
}

/// Full estimation detail: all starts and the selected one.
#[derive(Debug, Clone)]
pub struct NprOutcome {
    pub result: EstimationResult,
    pub starts: Vec<StartOutcome>,
    /// Index into `starts` of the selected run.
    pub winner: usize,
}

impl NprOutcome {
    pub fn fit(&self) -> &ScamFit {
        self.starts[self.winner].fit.as_ref().expect("winner has a fit")
    }
}

fn grid_starts(cfg: &NprConfig, family: Family) -> Vec<Vec<f64>> {
    cfg.init_grid
        .iter()
        .map(|&(bk, bl)| match family {
            Family::CobbDouglas => vec![bk, bl],
            Family::Translog => vec![bk, bl, 0.0, 0.0, 0.0],
        })
        .collect()
}

/// Runs every start and keeps the converged run with the smallest sse.
pub fn npr_fit_data(data: &NprData, starts: &[Vec<f64>], cfg: &NprConfig, method: Method) -> Result<NprOutcome> {
    if starts.is_empty() {
        return Err(Error::InvalidInput("initialization grid is empty".into()));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    let runs: Vec<StartOutcome> = starts.par_iter().map(|s| solve_from_start(data, s, cfg)).collect();
    let pick = |conv: bool| {
        runs.iter()
            .enumerate()
            .filter(|(_, r)| r.fit.is_some() && (!conv || r.converged))
            .min_by(|a, b| a.1.sse.total_cmp(&b.1.sse).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
    };
    let winner = match pick(true).or_else(|| pick(false)) {
        Some(w) => w,
        None => return Err(Error::NotConverged("every start failed to produce a fit".into())),
    };
    let w = &runs[winner];
    for (i, r) in runs.iter().enumerate() {
        if r.converged && r.sse_increases() > 0 {
            log::debug!("start {i}: sse rose at {} accepted iterations", r.sse_increases());
        }
    }
    let beta = w.beta.as_ref().unwrap();
    let result = EstimationResult {
        spec: data.spec_from_beta(beta),
        std_errors: None,
        covariance: None,
        objective: w.sse,
        iterations: w.iterations,
        converged: w.converged,
        method,
        n_obs: data.len(),
        n_firms: data.firm_ids.len(),
    };
    Ok(NprOutcome {
        result,
        starts: runs,
        winner,
    })
}

/// NPR point estimate with firm-bootstrap standard errors when `bootstrap_reps > 0`.
pub fn npr_fit(panel: &Panel, cfg: &NprConfig) -> Result<EstimationResult> {
    Ok(npr_fit_detailed(panel, cfg)?.result)
}

pub fn npr_fit_detailed(panel: &Panel, cfg: &NprConfig) -> Result<NprOutcome> {
    let data = NprData::from_panel(panel, cfg.family)?;
    let method = match cfg.family {
        Family::CobbDouglas => Method::Npr,
        Family::Translog => Method::NprTranslog,
    };
    let mut out = npr_fit_data(&data, &grid_starts(cfg, cfg.family), cfg, method)?;
    if cfg.bootstrap_reps > 0 && out.result.converged {
        let cov = bootstrap_data(&data, cfg)?;
        out.result.set_covariance(&cov);
    }
    Ok(out)
}

/// Firm-cluster bootstrap standard errors of the coefficients.
pub fn bootstrap_se(panel: &Panel, cfg: &NprConfig) -> Result<Vec<f64>> {
    let data = NprData::from_panel(panel, cfg.family)?;
    let point_cfg = NprConfig {
        bootstrap_reps: 0,
        ..cfg.clone()
    };
    let method = Method::Npr;
    let point = npr_fit_data(&data, &grid_starts(cfg, cfg.family), &point_cfg, method)?;
    if !point.result.converged {
        return Err(Error::NotConverged("bootstrap needs a converged point estimate".into()));
    }
    let cov = bootstrap_data(&data, cfg)?;
    Ok((0..cov.nrows()).map(|i| cov[(i, i)].sqrt()).collect())
}

/// Firm-cluster bootstrap; each draw re-runs the full grid so it picks the same fixed point
/// as the point estimate would.
fn bootstrap_data(data: &NprData, cfg: &NprConfig) -> Result<DMatrix<f64>> {
    let needed = 10;
    let reps = cfg.bootstrap_reps;
    if reps < needed {
        return Err(Error::Bootstrap { got: reps, needed });
    }
    let g = data.firm_ids.len();
    let starts = grid_starts(cfg, data.family);
    let draws: Vec<Option<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(b as u64 + 1);
            let firms: Vec<usize> = (0..g).map(|_| rng.random_range(0..g)).collect();
            let sub = data.resample(&firms).ok()?;
            let fit = npr_fit_data(&sub, &starts, cfg, Method::Npr).ok()?;
            let c = fit.result.converged.then(|| fit.result.spec.coefficients());
            log::debug!("bootstrap draw {b}: {c:?}");
            c
        })
        .collect();
    let ok: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    if ok.len() < needed {
        return Err(Error::Bootstrap { got: ok.len(), needed });
    }
    Ok(covariance_of(&ok))
}

fn covariance_of(draws: &[Vec<f64>]) -> DMatrix<f64> {
    let d = draws[0].len();
    let n = draws.len() as f64;
    let means: Vec<f64> = (0..d).map(|j| draws.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    DMatrix::from_fn(d, d, |a, b| {
        draws.iter().map(|v| (v[a] - means[a]) * (v[b] - means[b])).sum::<f64>() / (n - 1.0)
    })
}

/// Ratio of mean output to mean labor expectation errors, identified only when labor
/// expectations are biased. Pairs are `(belief row at t - 1, realization row at t)`.
///
/// The returned spec carries `beta_k = NaN`: capital is not identified by this estimator.
pub fn wald_beta_l(pairs: &[(&FirmYear, &FirmYear)]) -> Result<EstimationResult> {
    let mut ey = Vec::new();
    let mut el = Vec::new();
    for (prev, cur) in pairs {
        if let (Some(by), Some(bl)) = (prev.beliefs.y, prev.beliefs.l) {
            ey.push(by.mu - cur.y);
            el.push(bl.mu - cur.l);
        }
    }
    if ey.is_empty() {
        return Err(Error::NoUsableObservations(
            "no pairs with output and labor beliefs".into(),
        ));
    }
    let my = mean(&ey);
    let ml = mean(&el);
    if ml.abs() < 1e-6 {
        return Err(Error::NotIdentified(
            "labor expectations unbiased; Wald not identified".into(),
        ));
    }
    let ratio = my / ml;
    let n = ey.len() as f64;
    let (mut vy, mut vl, mut cyl) = (0.0, 0.0, 0.0);
    for (a, b) in ey.iter().zip(&el) {
        vy += (a - my).powi(2);
        vl += (b - ml).powi(2);
        cyl += (a - my) * (b - ml);
    }
    let denom = (n - 1.0).max(1.0);
    let (vy, vl, cyl) = (vy / denom, vl / denom, cyl / denom);
    let var = (vy + ratio * ratio * vl - 2.0 * ratio * cyl) / (n * ml * ml);
    let mut firms: Vec<&str> = pairs.iter().map(|(p, _)| p.firm_id.as_str()).collect();
    firms.dedup();
    Ok(EstimationResult {
        spec: ProductionSpec::cobb_douglas(ratio, f64::NAN),
        std_errors: Some(vec![var.max(0.0).sqrt(), f64::NAN]),
        covariance: None,
        objective: 0.0,
        iterations: 0,
        converged: true,
        method: Method::Wald,
        n_obs: ey.len(),
        n_firms: firms.len(),
    })
}

/// Forecast-error pair: row index of the realization in the NPR data and the previous year's beliefs.
struct ErrorPair {
    firm: usize,
    k: f64,
    l: f64,
    y: f64,
    mu_y_prev: f64,
    mu_l_prev: f64,
    s2_l_prev: f64,
    prev_row: usize,
}

/// `a - b` for each pair: the previous year's expected output net of the technology at the
/// expected inputs, minus realized output net of the technology at realized inputs.
fn forecast_gaps(pairs: &[ErrorPair], theta: &[f64]) -> Vec<f64> {
    pairs
        .iter()
        .map(|p| {
            let a = z_value(theta, p.mu_y_prev, p.k, p.mu_l_prev, p.s2_l_prev);
            let mut b = p.y - theta[0] * p.k - theta[1] * p.l;
            if theta.len() == 5 {
                b -= theta[2] * p.k * p.k + theta[3] * p.l * p.l + theta[4] * p.k * p.l;
            }
            a - b
        })
        .collect()
}

/// Builds NPR data plus forecast-error pairs from consecutive years.
fn bias_setup(
    panel: &Panel,
    family: Family,
    keep_firm: impl Fn(&FirmYear) -> bool,
) -> Result<(NprData, Vec<ErrorPair>)> {
    let rows: Vec<FirmYear> = panel.rows().iter().filter(|r| keep_firm(r)).cloned().collect();
    let sub = Panel::new(rows)?;
    let data = NprData::from_panel(&sub, family)?;
    let index: BTreeMap<(&str, i32), usize> = {
        let mut m = BTreeMap::new();
        for (i, (f, y)) in data.firm.iter().zip(&data.years).enumerate() {
            m.insert((data.firm_ids[*f].as_str(), *y), i);
        }
        m
    };
    let mut pairs = Vec::new();
    for (prev, cur) in join_lead(&sub, 1) {
        let (Some(by), Some(bl)) = (prev.beliefs.y, prev.beliefs.l) else {
            continue;
        };
        let Some(&prev_row) = index.get(&(prev.firm_id.as_str(), prev.year)) else {
            continue;
        };
        pairs.push(ErrorPair {
            firm: data.firm[prev_row],
            k: cur.k,
            l: cur.l,
            y: cur.y,
            mu_y_prev: by.mu,
            mu_l_prev: bl.mu,
            s2_l_prev: bl.sigma2,
            prev_row,
        });
    }
    Ok((data, pairs))
}

/// NPR with a time-invariant firm bias in expected productivity, estimated jointly.
///
/// Returns the estimate and each firm's bias estimate (including a common constant).
pub fn npr_bias_invariant(panel: &Panel, cfg: &NprConfig) -> Result<(EstimationResult, BTreeMap<String, f64>)> {
    // Count usable forecast-error periods per firm first; firms with fewer than two are dropped.
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (prev, _) in join_lead(panel, 1) {
        if prev.beliefs.y.is_some() && prev.beliefs.l.is_some() {
            *counts.entry(prev.firm_id.clone()).or_default() += 1;
        }
    }
    let dropped = panel.firm_ranges().len() - counts.values().filter(|&&c| c >= 2).count();
    if dropped > 0 {
        log::warn!("{dropped} firms dropped: fewer than two forecast-error periods");
    }
    if counts.values().all(|&c| c < 2) {
        return Err(Error::NoUsableObservations(
            "no firm has two periods with lagged beliefs and realized outcomes".into(),
        ));
    }
    let (mut data, pairs) = bias_setup(panel, cfg.family, |r| counts.get(&r.firm_id).is_some_and(|&c| c >= 2))?;
    let n_firms = data.firm_ids.len();
    let mut iota = vec![0.0; n_firms];
    let (res, _) = bias_loop(&mut data, cfg, Method::NprBiasInvariant, |data, theta| {
        let gaps = forecast_gaps(&pairs, theta);
        let mut sum = vec![0.0; n_firms];
        let mut cnt = vec![0usize; n_firms];
        for (p, g) in pairs.iter().zip(&gaps) {
            sum[p.firm] += g;
            cnt[p.firm] += 1;
        }
        let target: Vec<f64> = (0..n_firms)
            .map(|f| if cnt[f] > 0 { sum[f] / cnt[f] as f64 } else { 0.0 })
            .collect();
        let change = update_damped(&mut iota, &target, cfg.bias_damping);
        for (i, f) in data.firm.iter().enumerate() {
            data.z_shift[i] = iota[*f];
        }
        change
    })?;
    let map = data.firm_ids.iter().cloned().zip(iota.iter().copied()).collect();
    Ok((res, map))
}

/// NPR with expected-productivity bias linear in covariates `X_{t-1}`.
///
/// Returns the estimate and the bias coefficients `(intercept, covariates...)`.
pub fn npr_bias_covariate(
    panel: &Panel,
    covariates: &[String],
    cfg: &NprConfig,
) -> Result<(EstimationResult, Vec<f64>)> {
    if covariates.is_empty() {
        return Err(Error::InvalidInput("at least one covariate is required".into()));
    }
    let has_all = |r: &FirmYear| covariates.iter().all(|c| r.aux.get(c).is_some_and(|v| v.is_finite()));
    let (mut data, pairs) = bias_setup(panel, cfg.family, has_all)?;
    if pairs.len() < covariates.len() + 2 {
        return Err(Error::NoUsableObservations(
            "too few forecast-error pairs for the bias regression".into(),
        ));
    }
    // Covariates of every NPR row, aligned with data rows.
    let filled = Panel::new(panel.rows().iter().filter(|r| has_all(r)).cloned().collect())?.with_k_next_from_leads();
    let req = [
        Field::Y,
        Field::L,
        Field::K,
        Field::KNext,
        Field::BeliefY,
        Field::BeliefL,
    ];
    let (valid, _) = validate_panel(&filled, &req)?;
    let cov_rows: Vec<Vec<f64>> = valid
        .rows()
        .iter()
        .map(|r| covariates.iter().map(|c| r.aux[c]).collect())
        .collect();
    let m = covariates.len();
    let xrow = DMatrix::from_fn(
        cov_rows.len(),
        m + 1,
        |i, j| if j == 0 { 1.0 } else { cov_rows[i][j - 1] },
    );
    let xpair = DMatrix::from_fn(pairs.len(), m + 1, |i, j| xrow[(pairs[i].prev_row, j)]);
    let mut lambda = vec![0.0; m + 1];
    let (res, _) = bias_loop(&mut data, cfg, Method::NprBiasCovariate, |data, theta| {
        let gaps = DVector::from_vec(forecast_gaps(&pairs, theta));
        let target: Vec<f64> = match ols(&xpair, &gaps) {
            Ok(f) => f.coef.iter().copied().collect(),
            Err(_) => lambda.clone(),
        };
        let change = update_damped(&mut lambda, &target, cfg.bias_damping);
        let shift = &xrow * DVector::from_column_slice(&lambda);
        data.z_shift.copy_from_slice(shift.as_slice());
        change
    })?;
    Ok((res, lambda))
}

fn update_damped(cur: &mut [f64], target: &[f64], damping: f64) -> f64 {
    let mut change: f64 = 0.0;
    for (c, t) in cur.iter_mut().zip(target) {
        let new = *c + damping * (t - *c);
        change = change.max((new - *c).abs());
        *c = new;
    }
    change
}

/// Distance within which the confirmation pass counts as the same fixed point. Competing fixed
/// points are far apart; the grid and a warm start agree only to the backfitting tolerance.
const CONFIRM_TOL: f64 = 1e-3;

/// Alternates NPR fits with bias updates until coefficients and bias move less than `bias_tol`.
///
/// Passes after the first restart from the previous estimate. Once that settles, a full-grid pass
/// confirms the minimum-SSE fixed point; if the grid finds a different one the loop continues from it.
fn bias_loop<F>(data: &mut NprData, cfg: &NprConfig, method: Method, mut update: F) -> Result<(EstimationResult, usize)>
where
    F: FnMut(&mut NprData, &[f64]) -> f64,
{
    let grid = grid_starts(cfg, cfg.family);
    let mut starts = grid.clone();
    let mut full_grid = true;
    let mut prev: Option<Vec<f64>> = None;
    let mut last: Option<EstimationResult> = None;
    for outer in 1..=cfg.bias_max_iters {
        let fit = npr_fit_data(data, &starts, cfg, method)?;
        let theta = theta_of(&fit.result.spec);
        let beta_change = prev.as_ref().map_or(f64::INFINITY, |p| {
            p.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        });
        let bias_change = update(data, &theta);
        let mut res = fit.result;
        res.iterations = outer;
        let settled = beta_change < cfg.bias_tol && bias_change < cfg.bias_tol;
        log::debug!("bias pass {outer}: beta change {beta_change:.2e}, bias change {bias_change:.2e}");
        let confirmed = full_grid && prev.is_some() && beta_change < CONFIRM_TOL;
        if (settled && full_grid) || confirmed {
            return Ok((res, outer));
        }
        full_grid = settled;
        starts = if settled { grid.clone() } else { vec![theta.clone()] };
        prev = Some(theta);
        last = Some(res);
    }
    let mut res = last.expect("at least one outer iteration");
    res.converged = false;
    Ok((res, cfg.bias_max_iters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::BeliefDistribution;

    fn row_with(mu_y: f64, mu_l: f64, s2: f64, kn: f64) -> FirmYear {
        let mut r = FirmYear::new("a", 1, 0.0, 0.0, 0.0);
        r.beliefs.y = Some(BeliefDistribution::new(mu_y, 0.1));
        r.beliefs.l = Some(BeliefDistribution::new(mu_l, s2));
        r.k_next = Some(kn);
        r
    }

    #[test]
    fn z_examples() {
        let spec = ProductionSpec::cobb_douglas(0.6, 0.4);
        assert_eq!(npr_z(&row_with(1.0, 0.0, 0.2, 0.0), &spec).unwrap(), 1.0);
        assert!((npr_z(&row_with(3.0, 1.0, 0.2, 2.0), &spec).unwrap() - 1.6).abs() < 1e-15);
        let tl = ProductionSpec {
            second_order: Some(SecondOrder {
                beta_l2: 0.3,
                beta_k2: 0.0,
                beta_lk: 0.0,
            }),
            ..ProductionSpec::cobb_douglas(0.0, 0.0)
        };
        assert!((npr_z(&row_with(0.0, 0.0, 1.0, 0.0), &tl).unwrap() + 0.3).abs() < 1e-15);
    }

    #[test]
    fn missing_beliefs_name_the_field() {
        let mut r = row_with(1.0, 0.0, 0.1, 0.0);
        r.beliefs.l = None;
        let err = npr_z(&r, &ProductionSpec::cobb_douglas(0.6, 0.4)).unwrap_err();
        assert!(err.to_string().contains("belief_mu_l"));
    }

    #[test]
    fn grid_has_sixteen_points() {
        let g = default_grid();
        assert_eq!(g.len(), 16);
        assert!(g.contains(&(0.05, 0.9)) && g.contains(&(0.617, 0.333)));
    }

    #[test]
    fn wald_ratio_of_constant_biases() {
        let mut rows = Vec::new();
        for t in 0..4 {
            let mut r = FirmYear::new("a", t, 0.1 * t as f64, 0.2 * t as f64, 1.0);
            r.beliefs.y = Some(BeliefDistribution::new(0.1 * (t + 1) as f64 + 0.06, 0.0));
            r.beliefs.l = Some(BeliefDistribution::new(0.2 * (t + 1) as f64 + 0.1, 0.0));
            rows.push(r);
        }
        let panel = Panel::new(rows).unwrap();
        let pairs = join_lead(&panel, 1);
        let res = wald_beta_l(&pairs).unwrap();
        assert!((res.spec.beta_l - 0.6).abs() < 1e-12);

        let unbiased: Vec<FirmYear> = (0..3)
            .map(|t| {
                let mut r = FirmYear::new("a", t, t as f64, t as f64, 1.0);
                r.beliefs.y = Some(BeliefDistribution::new((t + 1) as f64, 0.0));
                r.beliefs.l = Some(BeliefDistribution::new((t + 1) as f64, 0.0));
                r
            })
            .collect();
        let panel = Panel::new(unbiased).unwrap();
        let err = wald_beta_l(&join_lead(&panel, 1)).unwrap_err();
        assert!(err.to_string().contains("not identified"));
    }

    #[test]
    fn bootstrap_needs_ten_reps() {
        let cfg = NprConfig {
            bootstrap_reps: 1,
            ..NprConfig::default()
        };
        let data_err = bootstrap_data_check(&cfg);
        assert!(matches!(data_err, Err(Error::Bootstrap { .. })));
    }

    fn bootstrap_data_check(cfg: &NprConfig) -> Result<DMatrix<f64>> {
        let n = 60;
        let mk = |i: usize| (i as f64 * 0.37).sin();
        let data = NprData::build(
            (0..n).map(|i| mk(i) + 1.0).collect(),
            (0..n).map(|i| mk(i + 7)).collect(),
            (0..n).map(|i| mk(i + 13)).collect(),
            (0..n).map(|i| mk(i + 3)).collect(),
            (0..n).map(|i| mk(i + 5)).collect(),
            (0..n).map(|i| mk(i + 11)).collect(),
            vec![0.1; n],
            vec![1; n],
            (0..n).map(|i| i / 2).collect(),
            (0..n / 2).map(|i| i.to_string()).collect(),
            Family::CobbDouglas,
        )
        .unwrap();
        bootstrap_data(&data, cfg)
    }

    #[test]
    fn single_period_panel_rejected_for_invariant_bias() {
        let mut r = row_with(1.0, 0.0, 0.1, 0.0);
        r.firm_id = "x".into();
        let panel = Panel::new(vec![r]).unwrap();
        assert!(npr_bias_invariant(&panel, &NprConfig::default()).is_err());
    }
}
