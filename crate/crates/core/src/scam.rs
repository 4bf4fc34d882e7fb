//! Partially linear model `y = X beta + Psi(z) + e` with `Psi` monotone increasing.
//!
//! `Psi` is a B-spline whose coefficients are cumulative sums of positive increments
//! `delta_j = exp(raw_j)`. Writing the smooth as `S delta` with `S_j = sum_{i >= j} B_i`, the
//! linear part is profiled out through Gram matrices, so each fit costs one pass over the data
//! plus a small `(q - 1)`-dimensional optimization. The first coefficient is absorbed into the
//! intercept and the smooth is reported centred on its sample mean.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ols, OlsFit};
use crate::optim::{bfgs, golden_section, BfgsOptions};
use crate::splines::{build_basis, BSplineBasis, MonotoneSmooth, RAW_CLAMP};

const LOG_LAMBDA_MIN: f64 = -18.420680743952367; // ln 1e-8
const LOG_LAMBDA_MAX: f64 = 18.420680743952367; // ln 1e8

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Lambda {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScamOptions {
    pub q: usize,
    pub order: usize,
    pub bfgs: BfgsOptions,
    /// Tolerance on `log lambda` for the GCV search.
    pub log_lambda_tol: f64,
}

impl Default for ScamOptions {
    fn default() -> Self {
        Self {
            q: 20,
            order: 4,
            bfgs: BfgsOptions::default(),
            log_lambda_tol: 1e-6,
        }
    }
}

/// Starting values carried between related fits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WarmStart {
    /// Raw increments `raw_2..raw_q`.
    pub theta: Option<Vec<f64>>,
    pub log_lambda: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ScamFit {
    pub beta: DVector<f64>,
    pub smooth: MonotoneSmooth,
    /// Centred smooth at the sample points.
    pub psi: Vec<f64>,
    pub fitted_values: Vec<f64>,
    pub sse: f64,
    pub gcv: f64,
    pub edf: f64,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Penalized objective at accepted optimizer iterates.
    pub objective_trace: Vec<f64>,
}

impl ScamFit {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            theta: Some(self.smooth.gamma_raw[1..].to_vec()),
            log_lambda: Some(self.lambda.ln()),
        }
    }
}

/// Response and linear design shared by many fits with different `z`.
#[derive(Debug, Clone)]
pub struct ScamDesign {
    y: DVector<f64>,
    x: DMatrix<f64>,
    intercept: usize,
    ols: OlsFit,
}

impl ScamDesign {
    /// `x` must contain a column of ones; it becomes the intercept that absorbs the smooth's mean.
    pub fn new(y: &[f64], x: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::InvalidInput(format!(
                "design has {} rows but response has {}",
                x.nrows(),
                y.len()
            )));
        }
        let intercept = (0..x.ncols())
            .find(|&j| x.column(j).iter().all(|&v| v == 1.0))
            .ok_or_else(|| Error::InvalidInput("design must include an intercept column".into()))?;
        let y = DVector::from_column_slice(y);
        let ols = ols(x, &y)?;
        Ok(Self {
            y,
            x: x.clone(),
            intercept,
            ols,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn fit(&self, z: &[f64], lambda: Lambda, opts: &ScamOptions, warm: &WarmStart) -> Result<ScamFit> {
        let n = self.n();
        if z.len() != n {
            return Err(Error::InvalidInput(format!("z has {} values, expected {n}", z.len())));
        }
        if n < opts.q + self.p() + 1 {
            return Err(Error::InvalidInput(format!(
                "{n} observations are too few for {} basis functions and {} linear terms",
                opts.q,
                self.p()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("z contains non-finite values".into()));
        }
        let (lo, hi) = z
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if hi - lo <= 1e-10 * lo.abs().max(hi.abs()).max(1.0) {
            log::warn!("smooth covariate is (nearly) constant; smooth forced flat");
            return Ok(self.flat_fit(z, opts));
        }
        let problem = Problem::new(self, z, opts)?;
        match lambda {
            Lambda::Fixed(l) => {
                if !(l >= 0.0) {
                    return Err(Error::InvalidInput(format!("lambda must be nonnegative, got {l}")));
                }
                let sol = problem.solve(l, warm.theta.as_deref(), opts);
                Ok(problem.finish(self, sol, l))
            }
            Lambda::Auto => {
                let (l, sol) = problem.select_lambda(warm, opts);
                Ok(problem.finish(self, sol, l))
            }
        }
    }

    fn flat_fit(&self, z: &[f64], opts: &ScamOptions) -> ScamFit {
        let z0 = z[0];
        let basis = build_basis(&[z0 - 0.5, z0 + 0.5], opts.q, opts.order).expect("valid basis on a unit interval");
        let mut gamma_raw = vec![-RAW_CLAMP; opts.q];
        gamma_raw[0] = 0.0;
        let n = self.n() as f64;
        let p = self.p() as f64;
        ScamFit {
            beta: self.ols.coef.clone(),
            smooth: MonotoneSmooth {
                gamma_raw,
                lambda: 1e8,
                basis,
            },
            psi: vec![0.0; self.n()],
            fitted_values: self.ols.fitted.iter().copied().collect(),
            sse: self.ols.sse,
            gcv: n * self.ols.sse / (n - p).powi(2),
            edf: p,
            lambda: 1e8,
            converged: true,
            iterations: 0,
            objective_trace: vec![self.ols.sse],
        }
    }
}

/// Fits the model once; see [`ScamDesign`] for repeated fits with a fixed design.
pub fn fit_scam(y: &[f64], x: &DMatrix<f64>, z: &[f64], lambda: Lambda, opts: &ScamOptions) -> Result<ScamFit> {
    ScamDesign::new(y, x)?.fit(z, lambda, opts, &WarmStart::default())
}

/// Profiled quadratic in the increments: `SSE(delta) = c0 - 2 r'delta + delta' G delta`.
struct Problem {
    n: usize,
    m: usize,
    basis: BSplineBasis,
    first: Vec<usize>,
    vals: Vec<f64>,
    c0: f64,
    r: DVector<f64>,
    g: DMatrix<f64>,
    /// `(X'X)^{-1} X'S`, mapping increments to the linear-coefficient correction.
    a: DMatrix<f64>,
}

struct Solution {
    delta: DVector<f64>,
    objective: f64,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
    active: Vec<bool>,
}

impl Problem {
    fn new(design: &ScamDesign, z: &[f64], opts: &ScamOptions) -> Result<Self> {
        let n = design.n();
        let p = design.p();
        let q = opts.q;
        let ord = opts.order;
        let basis = build_basis(z, q, ord)?;
        let mut first = Vec::with_capacity(n);
        let mut vals = vec![0.0; n * ord];
        let mut btb = DMatrix::<f64>::zeros(q, q);
        let mut xtb = DMatrix::<f64>::zeros(p, q);
        let mut bty = DVector::<f64>::zeros(q);
        for i in 0..n {
            let v = &mut vals[i * ord..(i + 1) * ord];
            let f = basis.eval_nonzero(z[i], v);
            first.push(f);
            for r in 0..ord {
                bty[f + r] += v[r] * design.y[i];
                for s in 0..ord {
                    btb[(f + r, f + s)] += v[r] * v[s];
                }
                for c in 0..p {
                    xtb[(c, f + r)] += design.x[(i, c)] * v[r];
                }
            }
        }
        // S = B C with C_{ij} = 1 for i >= j + 1: reverse cumulative sums over basis columns.
        let m = q - 1;
        let rev_cols = |mat: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(mat.nrows(), m);
            let mut acc = DVector::zeros(mat.nrows());
            for j in (1..q).rev() {
                acc += mat.column(j);
                out.set_column(j - 1, &acc);
            }
            out
        };
        let xts = rev_cols(&xtb);
        let bts = rev_cols(&btb);
        let sts = rev_cols(&bts.transpose());
        let mut sty = DVector::zeros(m);
        let mut acc = 0.0;
        for j in (1..q).rev() {
            acc += bty[j];
            sty[j - 1] = acc;
        }
        let xtx_inv = &design.ols.xtx_inv;
        let a = xtx_inv * &xts;
        let b0 = &design.ols.coef;
        let g = &sts - xts.transpose() * &a;
        let g = (&g + g.transpose()) * 0.5;
        let r = sty - xts.transpose() * b0;
        Ok(Self {
            n,
            m,
            basis,
            first,
            vals,
            c0: design.ols.sse,
            r,
            g,
            a,
        })
    }

    fn objective(&self, delta: &DVector<f64>, lambda: f64) -> f64 {
        let gd = &self.g * delta;
        self.c0 - 2.0 * self.r.dot(delta) + delta.dot(&gd) + lambda * delta.norm_squared()
    }

    fn solve(&self, lambda: f64, warm: Option<&[f64]>, opts: &ScamOptions) -> Solution {
        let m = self.m;
        let nf = self.n as f64;
        let theta0 = match warm {
            Some(t) if t.len() == m => DVector::from_column_slice(t),
            _ => self.default_start(lambda),
        };
        let res = bfgs(
            |theta: &DVector<f64>, grad: &mut DVector<f64>| {
                let delta = theta.map(|t| t.clamp(-RAW_CLAMP, RAW_CLAMP).exp());
                let hd = &self.g * &delta + &delta * lambda;
                let f = self.c0 - 2.0 * self.r.dot(&delta) + delta.dot(&hd);
                for j in 0..m {
                    grad[j] = if theta[j].abs() < RAW_CLAMP {
                        2.0 * (hd[j] - self.r[j]) * delta[j] / nf
                    } else {
                        0.0
                    };
                }
                f / nf
            },
            theta0,
            &opts.bfgs,
        );
        let delta = res.x.map(|t| t.clamp(-RAW_CLAMP, RAW_CLAMP).exp());
        let mut trace: Vec<f64> = res.trace.iter().map(|f| f * nf).collect();
        let mut sol = Solution {
            objective: res.f * nf,
            delta,
            converged: res.converged,
            iterations: res.iterations,
            trace: Vec::new(),
            active: Vec::new(),
        };
        // The problem is a convex quadratic in delta >= 0; finish with an exact active-set solve.
        if let Some((d, active)) = self.polish(&sol.delta, lambda) {
            let obj = self.objective(&d, lambda);
            if obj <= sol.objective + 1e-12 * sol.objective.abs().max(1.0) {
                sol.objective = obj.min(sol.objective);
                sol.delta = d;
                sol.active = active;
                sol.converged = true;
                trace.push(sol.objective);
            }
        }
        if sol.active.is_empty() {
            let tiny = 1e-10 * sol.delta.amax().max(1e-300);
            sol.active = sol.delta.iter().map(|&d| d > tiny).collect();
        }
        sol.trace = trace;
        sol
    }

    fn default_start(&self, lambda: f64) -> DVector<f64> {
        let h = &self.g + DMatrix::identity(self.m, self.m) * (lambda + 1e-10 * self.g.trace().max(1e-300));
        let unc = Cholesky::new(h)
            .map(|c| c.solve(&self.r))
            .unwrap_or_else(|| DVector::from_element(self.m, 1e-2));
        let scale = unc.amax().max(1e-8);
        unc.map(|d| d.max(1e-3 * scale).ln())
    }

    /// Lawson-Hanson style active-set solve of `min delta'(G + lambda I)delta - 2 r'delta`, `delta >= 0`.
    fn polish(&self, start: &DVector<f64>, lambda: f64) -> Option<(DVector<f64>, Vec<bool>)> {
        let m = self.m;
        let mut h = &self.g + DMatrix::identity(m, m) * lambda;
        let jitter = 1e-12 * (0..m).map(|j| h[(j, j)]).fold(0.0, f64::max).max(1e-300);
        for j in 0..m {
            h[(j, j)] += jitter;
        }
        let thresh = 1e-8 * start.amax().max(1e-300);
        let mut active: Vec<bool> = start.iter().map(|&d| d > thresh).collect();
        let mut x = DVector::from_fn(m, |j, _| if active[j] { start[j] } else { 0.0 });
        let tol = 1e-12 * (self.r.amax() + h.amax() * x.amax()).max(1e-300);
        for _outer in 0..(3 * m + 10) {
            // Inner loop: solve on the active set, stepping back to stay feasible.
            for _inner in 0..(m + 1) {
                let idx: Vec<usize> = (0..m).filter(|&j| active[j]).collect();
                if idx.is_empty() {
                    break;
                }
                let hp = DMatrix::from_fn(idx.len(), idx.len(), |a, b| h[(idx[a], idx[b])]);
                let rp = DVector::from_fn(idx.len(), |a, _| self.r[idx[a]]);
                let sp = Cholesky::new(hp)?.solve(&rp);
                if sp.iter().all(|&v| v > 0.0) {
                    x.fill(0.0);
                    for (a, &j) in idx.iter().enumerate() {
                        x[j] = sp[a];
                    }
                    break;
                }
                let mut alpha = 1.0f64;
                for (a, &j) in idx.iter().enumerate() {
                    if sp[a] <= 0.0 {
                        let denom = x[j] - sp[a];
                        if denom > 0.0 {
                            alpha = alpha.min(x[j] / denom);
                        } else {
                            alpha = 0.0;
                        }
                    }
                }
                for (a, &j) in idx.iter().enumerate() {
                    x[j] += alpha * (sp[a] - x[j]);
                    if x[j] <= 1e-15 * sp.amax().max(1e-300) || (sp[a] <= 0.0 && x[j] <= 0.0) {
                        x[j] = 0.0;
                        active[j] = false;
                    }
                }
            }
            let w = &self.r - &h * &x;
            let candidate = (0..m).filter(|&j| !active[j]).max_by(|&a, &b| w[a].total_cmp(&w[b]));
            match candidate {
                Some(j) if w[j] > tol => active[j] = true,
                _ => return Some((x, active)),
            }
        }
        None
    }

    fn edf(&self, p: usize, lambda: f64, active: &[bool]) -> f64 {
        let idx: Vec<usize> = (0..self.m).filter(|&j| active[j]).collect();
        if idx.is_empty() {
            return p as f64;
        }
        let ga = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.g[(idx[a], idx[b])]);
        let mut h = ga.clone();
        let jitter = 1e-12 * (0..idx.len()).map(|j| h[(j, j)]).fold(0.0, f64::max).max(1e-300);
        for j in 0..idx.len() {
            h[(j, j)] += lambda + jitter;
        }
        let tr = match Cholesky::new(h) {
            Some(c) => c.solve(&ga).trace(),
            None => idx.len() as f64,
        };
        p as f64 + tr
    }

    fn gcv(&self, p: usize, lambda: f64, sol: &Solution) -> f64 {
        let sse = (sol.objective - lambda * sol.delta.norm_squared()).max(0.0);
        let n = self.n as f64;
        let edf = self.edf(p, lambda, &sol.active);
        n * sse / (n - edf).powi(2)
    }

    /// Newton-Raphson on `log lambda` with numeric derivatives, golden-section fallback and a
    /// final check that neither `lambda / 10` nor `lambda * 10` improves the score.
    fn select_lambda(&self, warm: &WarmStart, opts: &ScamOptions) -> (f64, Solution) {
        let p = self.a.nrows();
        let mut theta: Option<Vec<f64>> = warm.theta.clone();
        let score = |rho: f64, theta: &mut Option<Vec<f64>>| -> (f64, Solution) {
            let sol = self.solve(rho.exp(), theta.as_deref(), opts);
            *theta = Some(sol.delta.iter().map(|d| d.max(1e-300).ln().max(-20.0)).collect());
            (self.gcv(p, rho.exp(), &sol), sol)
        };
        let mut rho = match warm.log_lambda {
            Some(r) if r.is_finite() => r.clamp(LOG_LAMBDA_MIN, LOG_LAMBDA_MAX),
            _ => {
                // Coarse scan over decades picks the basin.
                let mut best = (f64::INFINITY, 0.0);
                let mut r = LOG_LAMBDA_MIN;
                while r <= LOG_LAMBDA_MAX + 1e-9 {
                    let (s, _) = score(r, &mut theta);
                    if s < best.0 {
                        best = (s, r);
                    }
                    r += std::f64::consts::LN_10;
                }
                best.1
            }
        };
        let h = 1e-3;
        let mut newton_ok = true;
        for _ in 0..50 {
            let (f0, _) = score(rho, &mut theta);
            let (fp, _) = score(rho + h, &mut theta);
            let (fm, _) = score(rho - h, &mut theta);
            let d1 = (fp - fm) / (2.0 * h);
            let d2 = (fp - 2.0 * f0 + fm) / (h * h);
            let mut step = if d2 > 0.0 { -d1 / d2 } else { -d1.signum() };
            step = step.clamp(-2.0, 2.0);
            if step.abs() < opts.log_lambda_tol {
                break;
            }
            let mut accepted = false;
            for _ in 0..30 {
                let trial = rho + step;
                if !(LOG_LAMBDA_MIN..=LOG_LAMBDA_MAX).contains(&trial) {
                    // Allow settling exactly on the bracket edge once before falling back.
                    let edge = trial.clamp(LOG_LAMBDA_MIN, LOG_LAMBDA_MAX);
                    if (edge - rho).abs() < opts.log_lambda_tol {
                        break;
                    }
                    step = edge - rho;
                    continue;
                }
                let (ft, _) = score(trial, &mut theta);
                if ft <= f0 {
                    rho = trial;
                    accepted = true;
                    break;
                }
                step *= 0.5;
                if step.abs() < opts.log_lambda_tol {
                    break;
                }
            }
            if !accepted {
                break;
            }
            if step.abs() < opts.log_lambda_tol {
                break;
            }
        }
        if !(rho.is_finite()) {
            newton_ok = false;
        }
        let ten = std::f64::consts::LN_10;
        for _ in 0..8 {
            let (f0, _) = score(rho, &mut theta);
            let lo = (rho - ten).max(LOG_LAMBDA_MIN);
            let hi = (rho + ten).min(LOG_LAMBDA_MAX);
            let (flo, _) = score(lo, &mut theta);
            let (fhi, _) = score(hi, &mut theta);
            let slack = 1e-6 * f0.abs();
            if newton_ok && flo >= f0 - slack && fhi >= f0 - slack {
                break;
            }
            newton_ok = true;
            let centre = if flo < fhi && flo < f0 {
                lo
            } else if fhi < f0 {
                hi
            } else {
                rho
            };
            let a = (centre - ten).max(LOG_LAMBDA_MIN);
            let b = (centre + ten).min(LOG_LAMBDA_MAX);
            let (r, _) = golden_section(|r| score(r, &mut theta).0, a, b, opts.log_lambda_tol.max(1e-6));
            rho = r;
        }
        let (_, sol) = score(rho, &mut theta);
        (rho.exp(), sol)
    }

    fn finish(&self, design: &ScamDesign, sol: Solution, lambda: f64) -> ScamFit {
        let n = self.n;
        let ord = self.basis.order;
        let q = self.basis.q;
        let p = design.p();
        let mut gamma = vec![0.0; q];
        for j in 1..q {
            gamma[j] = gamma[j - 1] + sol.delta[j - 1];
        }
        let mut smooth_raw: Vec<f64> = (0..n)
            .map(|i| {
                let f = self.first[i];
                (0..ord).map(|r| self.vals[i * ord + r] * gamma[f + r]).sum()
            })
            .collect();
        let mean = smooth_raw.iter().sum::<f64>() / n as f64;
        for v in &mut smooth_raw {
            *v -= mean;
        }
        let mut beta = &design.ols.coef - &self.a * &sol.delta;
        beta[design.intercept] += mean;
        let xb = &design.x * &beta;
        let fitted: Vec<f64> = (0..n).map(|i| xb[i] + smooth_raw[i]).collect();
        let sse = (0..n).map(|i| (design.y[i] - fitted[i]).powi(2)).sum::<f64>();
        let edf = self.edf(p, lambda, &sol.active);
        let nf = n as f64;
        let mut gamma_raw = vec![-mean];
        gamma_raw.extend(sol.delta.iter().map(|d| d.max(1e-300).ln().max(-RAW_CLAMP)));
        ScamFit {
            beta,
            smooth: MonotoneSmooth {
                gamma_raw,
                lambda,
                basis: self.basis.clone(),
            },
            psi: smooth_raw,
            fitted_values: fitted,
            sse,
            gcv: nf * sse / (nf - edf).powi(2),
            edf,
            lambda,
            converged: sol.converged,
            iterations: sol.iterations,
            objective_trace: sol.trace,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn design(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x1[i] });
        (x1, z, x)
    }

    #[test]
    fn recovers_linear_part_with_identity_smooth() {
        let n = 500;
        let (x1, z, x) = design(n, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 + 0.5 * x1[i] + z[i] + 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let fit = fit_scam(&y, &x, &z, Lambda::Auto, &ScamOptions::default()).unwrap();
        assert!((fit.beta[1] - 0.5).abs() < 0.02, "beta1 = {}", fit.beta[1]);
        let grid: Vec<f64> = (0..200).map(|i| -1.0 + 3.0 * i as f64 / 199.0).collect();
        let psi = fit.smooth.eval_many(&grid);
        assert!(psi.windows(2).all(|w| w[1] - w[0] >= -1e-10));
        // Centred smooth: intercept absorbs the mean of z.
        let zbar = z.iter().sum::<f64>() / n as f64;
        assert!((fit.beta[0] - (2.0 + zbar)).abs() < 0.02);
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn constant_response_gives_zero_smooth() {
        let n = 200;
        let (_, z, x) = design(n, 5);
        let y = vec![3.0; n];
        let fit = fit_scam(&y, &x, &z, Lambda::Auto, &ScamOptions::default()).unwrap();
        assert!((fit.beta[0] - 3.0).abs() < 1e-8);
        assert!(fit.psi.iter().all(|v| v.abs() < 1e-8));
        assert!(fit.sse < 1e-12);
    }

    #[test]
    fn huge_lambda_flattens_the_smooth() {
        let n = 300;
        let (_, z, x) = design(n, 6);
        let y: Vec<f64> = z.iter().map(|v| v.powi(3)).collect();
        let free = fit_scam(&y, &x, &z, Lambda::Fixed(1e-6), &ScamOptions::default()).unwrap();
        let stiff = fit_scam(&y, &x, &z, Lambda::Fixed(1e8), &ScamOptions::default()).unwrap();
        let range = |v: &[f64]| {
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        assert!(range(&free.psi) > 5.0);
        assert!(range(&stiff.psi) < 1e-3 * range(&free.psi));
    }

    #[test]
    fn gcv_choice_is_locally_optimal() {
        let n = 400;
        let (x1, z, x) = design(n, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..n)
            .map(|i| 0.3 * x1[i] + (2.0 * z[i]).tanh() + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let opts = ScamOptions::default();
        let fit = fit_scam(&y, &x, &z, Lambda::Auto, &opts).unwrap();
        let gcv_at = |l: f64| fit_scam(&y, &x, &z, Lambda::Fixed(l), &opts).unwrap().gcv;
        let g = gcv_at(fit.lambda);
        assert!((g - fit.gcv).abs() <= 1e-8 * g);
        if fit.lambda / 10.0 >= 1e-8 {
            assert!(g <= gcv_at(fit.lambda / 10.0) * (1.0 + 1e-6));
        }
        if fit.lambda * 10.0 <= 1e8 {
            assert!(g <= gcv_at(fit.lambda * 10.0) * (1.0 + 1e-6));
        }
        assert!(fit.edf >= 1.0 && fit.edf <= (20 + 2) as f64);
    }

    #[test]
    fn missing_intercept_or_short_sample_errors() {
        let (_, z, x) = design(30, 9);
        let y = vec![1.0; 30];
        let no_int = x.columns(1, 1).into_owned();
        assert!(fit_scam(&y, &no_int, &z, Lambda::Auto, &ScamOptions::default()).is_err());
        assert!(fit_scam(
            &y[..20],
            &x.rows(0, 20).into_owned(),
            &z[..20],
            Lambda::Auto,
            &ScamOptions::default()
        )
        .is_err());
    }

    #[test]
    fn constant_z_is_flat_with_warning() {
        let (x1, _, x) = design(100, 10);
        let z = vec![0.5; 100];
        let y: Vec<f64> = x1.iter().map(|v| 1.0 + v).collect();
        let fit = fit_scam(&y, &x, &z, Lambda::Auto, &ScamOptions::default()).unwrap();
        assert!((fit.beta[1] - 1.0).abs() < 1e-10);
        assert!(fit.lambda >= 1e8);
    }
}
