//! Comparison estimators: OLS in levels, first differences and within firms, and the
//! proxy-variable estimators OP, LP and ACF.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    join_lead, validate_panel, year_dummies, EstimationResult, Field, FirmYear, Method, Panel, ProductionSpec,
};
use crate::error::{Error, Result};
use crate::linalg::{column, hc1_covariance, hstack, ols, ones, poly_basis, poly_basis_raw};
use crate::optim::{bfgs, golden_section, numeric_gradient, BfgsOptions};

/// Encoding of the first-stage polynomial. Both span the same space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolyEncoding {
    /// Monomials of standardized inputs.
    Standardized,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AcfStart {
    /// Coefficients from OLS in levels.
    Ols,
    /// Explicit `(beta_l, beta_k)`.
    Given(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyConfig {
    pub poly_degree: usize,
    pub encoding: PolyEncoding,
    pub bfgs: BfgsOptions,
    pub acf_start: AcfStart,
    /// Mark ACF results outside the unit box as non-converged.
    pub plausibility_filter: bool,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            poly_degree: 3,
            encoding: PolyEncoding::Standardized,
            bfgs: BfgsOptions::default(),
            acf_start: AcfStart::Ols,
            plausibility_filter: false,
        }
    }
}

impl ProxyConfig {
    fn validate(&self) -> Result<()> {
        if self.poly_degree == 0 {
            return Err(Error::InvalidInput("poly_degree must be at least 1".into()));
        }
        Ok(())
    }

    fn basis(&self, cols: &[&[f64]]) -> DMatrix<f64> {
        match self.encoding {
            PolyEncoding::Standardized => poly_basis(cols, self.poly_degree),
            PolyEncoding::Raw => poly_basis_raw(cols, self.poly_degree),
        }
    }
}

fn levels_of(years: &[i32]) -> Vec<i32> {
    let mut v = years.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn n_firms(rows: &[FirmYear]) -> usize {
    let mut n = 0;
    let mut last: Option<&str> = None;
    for r in rows {
        if last != Some(r.firm_id.as_str()) {
            n += 1;
            last = Some(&r.firm_id);
        }
    }
    n
}

fn year_effects(levels: &[i32], coefs: &[f64]) -> BTreeMap<i32, f64> {
    let mut m = BTreeMap::new();
    if let Some(&first) = levels.first() {
        m.insert(first, 0.0);
    }
    for (yr, c) in levels.iter().skip(1).zip(coefs) {
        m.insert(*yr, *c);
    }
    m
}

/// `(beta_l, beta_k)` block of an OLS covariance at positions `il`, `ik`.
fn lk_block(cov: &DMatrix<f64>, il: usize, ik: usize) -> DMatrix<f64> {
    let idx = [il, ik];
    DMatrix::from_fn(2, 2, |a, b| cov[(idx[a], idx[b])])
}

fn ols_result(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    il: usize,
    ik: usize,
    method: Method,
    n_firms: usize,
) -> Result<(EstimationResult, DVector<f64>)> {
    let fit = ols(x, y).map_err(|e| match e {
        Error::RankDeficient(m) => Error::RankDeficient(format!("insufficient variation: {m}")),
        other => other,
    })?;
    let cov = hc1_covariance(x, &fit);
    let mut res = EstimationResult {
        spec: ProductionSpec::cobb_douglas(fit.coef[il], fit.coef[ik]),
        std_errors: None,
        covariance: None,
        objective: fit.sse,
        iterations: 0,
        converged: true,
        method,
        n_obs: y.len(),
        n_firms,
    };
    res.set_covariance(&lk_block(&cov, il, ik));
    Ok((res, fit.coef))
}

/// `y` on `(1, l, k, year dummies)`.
pub fn ols_levels(panel: &Panel) -> Result<EstimationResult> {
    let (p, _) = validate_panel(panel, &[Field::Y, Field::L, Field::K])?;
    let rows = p.rows();
    let years: Vec<i32> = rows.iter().map(|r| r.year).collect();
    let levels = levels_of(&years);
    let x = hstack(&[
        &ones(rows.len()),
        &column(&rows.iter().map(|r| r.l).collect::<Vec<_>>()),
        &column(&rows.iter().map(|r| r.k).collect::<Vec<_>>()),
        &year_dummies(&years, &levels),
    ]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.y));
    let (mut res, coef) = ols_result(&x, &y, 1, 2, Method::Ols, n_firms(rows))?;
    res.spec.beta0 = coef[0];
    res.spec.year_effects = year_effects(&levels, &coef.as_slice()[3..]);
    Ok(res)
}

/// `Δy` on `(Δl, Δk, year dummies)` over consecutive years within firm.
pub fn ols_fd(panel: &Panel) -> Result<EstimationResult> {
    let (p, _) = validate_panel(panel, &[Field::Y, Field::L, Field::K])?;
    let pairs = join_lead(&p, 1);
    if pairs.is_empty() {
        return Err(Error::NoUsableObservations(
            "first differences need two consecutive periods for some firm".into(),
        ));
    }
    let years: Vec<i32> = pairs.iter().map(|(_, b)| b.year).collect();
    let levels = levels_of(&years);
    let dummies = DMatrix::from_fn(pairs.len(), levels.len(), |i, j| {
        f64::from(u8::from(years[i] == levels[j]))
    });
    let x = hstack(&[
        &column(&pairs.iter().map(|(a, b)| b.l - a.l).collect::<Vec<_>>()),
        &column(&pairs.iter().map(|(a, b)| b.k - a.k).collect::<Vec<_>>()),
        &dummies,
    ]);
    let y = DVector::from_iterator(pairs.len(), pairs.iter().map(|(a, b)| b.y - a.y));
    let firms = {
        let mut f: Vec<&str> = pairs.iter().map(|(a, _)| a.firm_id.as_str()).collect();
        f.dedup();
        f.len()
    };
    let (mut res, coef) = ols_result(&x, &y, 0, 1, Method::OlsFd, firms)?;
    res.spec.year_effects = levels.iter().zip(coef.iter().skip(2)).map(|(y, c)| (*y, *c)).collect();
    Ok(res)
}

/// Within-firm transformed regression with year dummies.
pub fn ols_fe(panel: &Panel) -> Result<EstimationResult> {
    let (p, _) = validate_panel(panel, &[Field::Y, Field::L, Field::K])?;
    let rows = p.rows();
    let ranges = p.firm_ranges();
    if ranges.iter().all(|r| r.len() < 2) {
        return Err(Error::NoUsableObservations(
            "fixed effects need two periods for some firm".into(),
        ));
    }
    let years: Vec<i32> = rows.iter().map(|r| r.year).collect();
    let levels = levels_of(&years);
    let raw = hstack(&[
        &column(&rows.iter().map(|r| r.y).collect::<Vec<_>>()),
        &column(&rows.iter().map(|r| r.l).collect::<Vec<_>>()),
        &column(&rows.iter().map(|r| r.k).collect::<Vec<_>>()),
        &year_dummies(&years, &levels),
    ]);
    let mut w = raw.clone();
    for r in &ranges {
        for c in 0..raw.ncols() {
            let m = r.clone().map(|i| raw[(i, c)]).sum::<f64>() / r.len() as f64;
            for i in r.clone() {
                w[(i, c)] -= m;
            }
        }
    }
    let y = w.column(0).into_owned();
    let x = w.columns(1, w.ncols() - 1).into_owned();
    let (mut res, coef) = ols_result(&x, &y, 0, 1, Method::OlsFe, ranges.len())?;
    res.spec.year_effects = year_effects(&levels, &coef.as_slice()[2..]);
    Ok(res)
}

/// Stage-1 data shared by the proxy estimators.
struct ProxyData {
    rows: Vec<FirmYear>,
    /// Consecutive-year pairs as row indices `(t - 1, t)`.
    pairs: Vec<(usize, usize)>,
}

fn proxy_data(panel: &Panel, proxy: Field) -> Result<ProxyData> {
    let (p, report) = validate_panel(panel, &[Field::Y, Field::L, Field::K, proxy])?;
    if report.total() > 0 {
        log::info!("proxy estimation dropped {} rows: {:?}", report.total(), report.reasons);
    }
    let rows = p.into_rows();
    let mut pairs = Vec::new();
    for i in 1..rows.len() {
        if rows[i].firm_id == rows[i - 1].firm_id && rows[i].year == rows[i - 1].year + 1 {
            pairs.push((i - 1, i));
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoUsableObservations(
            "no consecutive periods for the productivity law".into(),
        ));
    }
    Ok(ProxyData { rows, pairs })
}

/// Stage-1 fitted values of `y` on `[1, extra..., poly(proxy cols), year dummies]`.
/// Returns the fit coefficients for `extra` and the fitted values.
pub fn stage1(
    y: &[f64],
    extra: &[&[f64]],
    poly_cols: &[&[f64]],
    years: &[i32],
    cfg: &ProxyConfig,
) -> Result<(Vec<f64>, DVector<f64>)> {
    cfg.validate()?;
    let n = y.len();
    let mut blocks = vec![ones(n)];
    blocks.extend(extra.iter().map(|c| column(c)));
    blocks.push(cfg.basis(poly_cols));
    blocks.push(year_dummies(years, &levels_of(years)));
    let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
    let x = hstack(&refs);
    let fit = ols(&x, &DVector::from_column_slice(y))?;
    Ok(((1..=extra.len()).map(|j| fit.coef[j]).collect(), fit.fitted))
}

/// Residuals of the AR(1)-with-intercept projection `omega_t = a + b omega_{t-1} + xi`.
fn ar1_innovations(omega: &[f64], pairs: &[(usize, usize)]) -> Option<Vec<f64>> {
    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(a, b) in pairs {
        let (x, y) = (omega[a], omega[b]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let vx = sxx - sx * sx / n;
    if vx.abs() < 1e-300 || !vx.is_finite() {
        return None;
    }
    let slope = (sxy - sx * sy / n) / vx;
    let icept = (sy - slope * sx) / n;
    Some(
        pairs
            .iter()
            .map(|&(a, b)| omega[b] - icept - slope * omega[a])
            .collect(),
    )
}

/// Two-step proxy estimator (OP with investment, LP with materials).
fn two_step(panel: &Panel, proxy: Field, method: Method, cfg: &ProxyConfig) -> Result<EstimationResult> {
    let use_inv = proxy == Field::Inv;
    let d = proxy_data(panel, proxy)?;
    let rows = &d.rows;
    let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let l: Vec<f64> = rows.iter().map(|r| r.l).collect();
    let k: Vec<f64> = rows.iter().map(|r| r.k).collect();
    let px: Vec<f64> = rows
        .iter()
        .map(|r| if use_inv { r.inv.unwrap() } else { r.m.unwrap() })
        .collect();
    let years: Vec<i32> = rows.iter().map(|r| r.year).collect();
    let (coef, fitted) = stage1(&y, &[&l], &[&k, &px], &years, cfg)?;
    let beta_l = coef[0];
    let phi: Vec<f64> = fitted.iter().zip(&l).map(|(f, l)| f - beta_l * l).collect();
    let moment = |bk: f64| -> f64 {
        let omega: Vec<f64> = phi.iter().zip(&k).map(|(p, k)| p - bk * k).collect();
        match ar1_innovations(&omega, &d.pairs) {
            Some(xi) => {
                let g = xi.iter().zip(&d.pairs).map(|(x, &(_, b))| x * k[b]).sum::<f64>() / xi.len() as f64;
                g * g
            }
            None => f64::INFINITY,
        }
    };
    // Grid over [0, 1] then golden refinement around the best grid point.
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let vals: Vec<f64> = grid.iter().map(|&b| moment(b)).collect();
    let best = (0..grid.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let (beta_k, obj) = golden_section(&moment, lo, hi, 1e-10);
    let (beta_k, obj) = if vals[best] < obj {
        (grid[best], vals[best])
    } else {
        (beta_k, obj)
    };
    Ok(EstimationResult {
        spec: ProductionSpec::cobb_douglas(beta_l, beta_k),
        std_errors: None,
        covariance: None,
        objective: obj,
        iterations: 0,
        converged: obj.is_finite(),
        method,
        n_obs: rows.len(),
        n_firms: n_firms(rows),
    })
}

/// Olley-Pakes style estimator with a polynomial in `(k, inv)`.
pub fn op_fit(panel: &Panel, cfg: &ProxyConfig) -> Result<EstimationResult> {
    two_step(panel, Field::Inv, Method::Op, cfg)
}

/// Levinsohn-Petrin style estimator with a polynomial in `(k, m)`.
pub fn lp_fit(panel: &Panel, cfg: &ProxyConfig) -> Result<EstimationResult> {
    two_step(panel, Field::M, Method::Lp, cfg)
}

/// ACF moment contributions `xi_t * (k_t, l_{t-1})` at `(beta_l, beta_k)`.
fn acf_contributions(
    theta: &[f64],
    phi: &[f64],
    l: &[f64],
    k: &[f64],
    pairs: &[(usize, usize)],
) -> Option<Vec<[f64; 2]>> {
    let omega: Vec<f64> = (0..phi.len())
        .map(|i| phi[i] - theta[0] * l[i] - theta[1] * k[i])
        .collect();
    let xi = ar1_innovations(&omega, pairs)?;
    Some(xi.iter().zip(pairs).map(|(x, &(a, b))| [x * k[b], x * l[a]]).collect())
}

/// Ackerberg-Caves-Frazer two-stage GMM with moments on `k_t` and `l_{t-1}`.
pub fn acf_fit(panel: &Panel, cfg: &ProxyConfig) -> Result<EstimationResult> {
    let d = proxy_data(panel, Field::M)?;
    let rows = &d.rows;
    let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let l: Vec<f64> = rows.iter().map(|r| r.l).collect();
    let k: Vec<f64> = rows.iter().map(|r| r.k).collect();
    let m: Vec<f64> = rows.iter().map(|r| r.m.unwrap()).collect();
    let years: Vec<i32> = rows.iter().map(|r| r.year).collect();
    let (_, fitted) = stage1(&y, &[], &[&k, &l, &m], &years, cfg)?;
    let phi: Vec<f64> = fitted.iter().copied().collect();
    let start = match cfg.acf_start {
        AcfStart::Ols => {
            let o = ols_levels(panel)?;
            [o.spec.beta_l, o.spec.beta_k]
        }
        AcfStart::Given(bl, bk) => [bl, bk],
    };
    // Weighting matrix: inverse sample covariance of the contributions at the start.
    let c0 = acf_contributions(&start, &phi, &l, &k, &d.pairs)
        .ok_or_else(|| Error::Degenerate("productivity law not estimable at the start".into()))?;
    let n = c0.len() as f64;
    let mean0 = [
        c0.iter().map(|c| c[0]).sum::<f64>() / n,
        c0.iter().map(|c| c[1]).sum::<f64>() / n,
    ];
    let s = DMatrix::from_fn(2, 2, |a, b| {
        c0.iter().map(|c| (c[a] - mean0[a]) * (c[b] - mean0[b])).sum::<f64>() / n
    });
    let w = s.try_inverse().unwrap_or_else(|| DMatrix::identity(2, 2));
    let mut objective = |t: &DVector<f64>| -> f64 {
        match acf_contributions(t.as_slice(), &phi, &l, &k, &d.pairs) {
            Some(c) => {
                let g = DVector::from_vec(vec![
                    c.iter().map(|v| v[0]).sum::<f64>() / n,
                    c.iter().map(|v| v[1]).sum::<f64>() / n,
                ]);
                (g.transpose() * &w * &g)[(0, 0)]
            }
            None => f64::INFINITY,
        }
    };
    let mut grad_obj = |t: &DVector<f64>, g: &mut DVector<f64>| -> f64 {
        let v = objective(t);
        g.copy_from(&numeric_gradient(&mut objective, t, 1e-6));
        v
    };
    let res = bfgs(&mut grad_obj, DVector::from_vec(start.to_vec()), &cfg.bfgs);
    let (bl, bk) = (res.x[0], res.x[1]);
    let mut converged = res.converged && res.f.is_finite();
    if cfg.plausibility_filter && !is_plausible(bl, bk) {
        converged = false;
    }
    Ok(EstimationResult {
        spec: ProductionSpec::cobb_douglas(bl, bk),
        std_errors: None,
        covariance: None,
        objective: res.f,
        iterations: res.iterations,
        converged,
        method: Method::Acf,
        n_obs: rows.len(),
        n_firms: n_firms(rows),
    })
}

/// Both elasticities strictly inside `(0, 1)`.
pub fn is_plausible(beta_l: f64, beta_k: f64) -> bool {
    beta_l > 0.0 && beta_l < 1.0 && beta_k > 0.0 && beta_k < 1.0
}

/// Keeps results with both elasticities in `(0, 1)`; returns them and the number dropped.
pub fn filter_plausible(results: Vec<EstimationResult>) -> (Vec<EstimationResult>, usize) {
    let before = results.len();
    let kept: Vec<EstimationResult> = results
        .into_iter()
        .filter(|r| is_plausible(r.spec.beta_l, r.spec.beta_k))
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_panel(n_firms: usize, t: i32, single: bool) -> Panel {
        let mut rows = Vec::new();
        for f in 0..n_firms {
            for yr in 0..t {
                let s = (f * 31 + yr as usize * 7) as f64;
                let l = (s * 0.37).sin();
                let k = (s * 0.11).cos() + 0.1 * f as f64;
                let y = 1.0 + 0.6 * l + 0.4 * k + 0.01 * (s * 1.3).sin();
                rows.push(FirmYear::new(format!("f{f}"), if single { 1 } else { yr + 1 }, y, l, k));
                if single {
                    break;
                }
            }
        }
        Panel::new(rows).unwrap()
    }

    #[test]
    fn ols_levels_matches_normal_equations() {
        let p = toy_panel(20, 4, false);
        let res = ols_levels(&p).unwrap();
        let rows = p.rows();
        let years: Vec<i32> = rows.iter().map(|r| r.year).collect();
        let x = hstack(&[
            &ones(rows.len()),
            &column(&rows.iter().map(|r| r.l).collect::<Vec<_>>()),
            &column(&rows.iter().map(|r| r.k).collect::<Vec<_>>()),
            &year_dummies(&years, &levels_of(&years)),
        ]);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.y));
        let xt = x.transpose();
        let b = (&xt * &x).try_inverse().unwrap() * (&xt * y);
        assert!((b[1] - res.spec.beta_l).abs() < 1e-10);
        assert!((b[2] - res.spec.beta_k).abs() < 1e-10);
    }

    #[test]
    fn single_period_panels_fail_fd_and_fe() {
        let p = toy_panel(10, 1, true);
        assert!(ols_fd(&p).is_err());
        assert!(ols_fe(&p).is_err());
    }

    #[test]
    fn fd_and_fe_recover_exogenous_coefficients() {
        let p = toy_panel(30, 5, false);
        for r in [ols_fd(&p).unwrap(), ols_fe(&p).unwrap()] {
            assert!((r.spec.beta_l - 0.6).abs() < 0.02, "{:?}", r.method);
            assert!((r.spec.beta_k - 0.4).abs() < 0.02, "{:?}", r.method);
        }
    }

    #[test]
    fn filter_examples() {
        let mk = |bl, bk| EstimationResult {
            spec: ProductionSpec::cobb_douglas(bl, bk),
            std_errors: None,
            covariance: None,
            objective: 0.0,
            iterations: 0,
            converged: true,
            method: Method::Acf,
            n_obs: 0,
            n_firms: 0,
        };
        let (kept, dropped) = filter_plausible(vec![mk(0.6, 0.4), mk(1.2, -0.1)]);
        assert_eq!((kept.len(), dropped), (1, 1));
        assert_eq!(filter_plausible(vec![]).0.len(), 0);
    }

    #[test]
    fn collinear_proxy_is_rank_deficient() {
        let rows: Vec<FirmYear> = toy_panel(10, 4, false)
            .into_rows()
            .into_iter()
            .map(|mut r| {
                r.m = Some(r.k);
                r
            })
            .collect();
        let p = Panel::new(rows).unwrap();
        assert!(matches!(
            lp_fit(&p, &ProxyConfig::default()),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn zero_degree_rejected() {
        let cfg = ProxyConfig {
            poly_degree: 0,
            ..ProxyConfig::default()
        };
        assert!(stage1(&[1.0, 2.0], &[], &[&[1.0, 2.0]], &[1, 1], &cfg).is_err());
    }
}
