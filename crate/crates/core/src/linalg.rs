//! Least squares, robust covariances and polynomial bases.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    pub residuals: DVector<f64>,
    pub fitted: DVector<f64>,
    pub sse: f64,
    /// `(X'X)^{-1}`.
    pub xtx_inv: DMatrix<f64>,
}

/// Least squares by QR. Fails when a column is (numerically) a combination of the others.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(Error::InvalidInput(format!(
            "design has {n} rows but response has {}",
            y.len()
        )));
    }
    if n < p || p == 0 {
        return Err(Error::RankDeficient(format!("{n} observations for {p} regressors")));
    }
    // Scale columns so the rank test is unit free.
    let scales: Vec<f64> = (0..p)
        .map(|j| {
            let s = x.column(j).norm();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let xs = DMatrix::from_fn(n, p, |i, j| x[(i, j)] / scales[j]);
    let qr = xs.qr();
    let r = qr.r();
    let max_diag = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if let Some(j) = (0..p).find(|&j| r[(j, j)].abs() <= 1e-10 * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient(format!(
            "column {j} is collinear with earlier columns"
        )));
    }
    let qty = qr.q().transpose() * y;
    let coef_s = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;
    let coef = DVector::from_fn(p, |j, _| coef_s[j] / scales[j]);
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;
    let xtx_inv_s = &r_inv * r_inv.transpose();
    let xtx_inv = DMatrix::from_fn(p, p, |i, j| xtx_inv_s[(i, j)] / (scales[i] * scales[j]));
    let fitted = x * &coef;
    let residuals = y - &fitted;
    let sse = residuals.norm_squared();
    Ok(OlsFit {
        coef,
        residuals,
        fitted,
        sse,
        xtx_inv,
    })
}

/// Heteroskedasticity-robust HC1 covariance of an OLS fit.
pub fn hc1_covariance(x: &DMatrix<f64>, fit: &OlsFit) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..n {
        let e2 = fit.residuals[i] * fit.residuals[i];
        let row = x.row(i);
        meat += e2 * row.transpose() * row;
    }
    let dof = if n > p { n as f64 / (n - p) as f64 } else { 1.0 };
    &fit.xtx_inv * meat * &fit.xtx_inv * dof
}

/// Firm-clustered covariance with the usual small-sample factor.
pub fn cluster_covariance(x: &DMatrix<f64>, fit: &OlsFit, clusters: &[usize]) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let g = clusters.iter().copied().max().map_or(0, |m| m + 1);
    let mut scores = DMatrix::zeros(g, p);
    for i in 0..n {
        for j in 0..p {
            scores[(clusters[i], j)] += x[(i, j)] * fit.residuals[i];
        }
    }
    let meat = scores.transpose() * &scores;
    let gf = g as f64;
    let factor = if g > 1 && n > p {
        gf / (gf - 1.0) * (n as f64 - 1.0) / (n - p) as f64
    } else {
        1.0
    };
    &fit.xtx_inv * meat * &fit.xtx_inv * factor
}

/// All monomials of total degree `1..=degree` in the given columns, graded lexicographically.
///
/// Columns are centred and scaled first, which is an affine re-encoding and leaves the span of
/// the basis unchanged while keeping the design well conditioned. No constant column is added.
pub fn poly_basis(cols: &[&[f64]], degree: usize) -> DMatrix<f64> {
    let std: Vec<Vec<f64>> = cols.iter().map(|c| standardize(c)).collect();
    poly_basis_raw(&std.iter().map(Vec::as_slice).collect::<Vec<_>>(), degree)
}

/// Like [`poly_basis`] but on the columns as given.
pub fn poly_basis_raw(cols: &[&[f64]], degree: usize) -> DMatrix<f64> {
    let n = cols.first().map_or(0, |c| c.len());
    let d = cols.len();
    let mut exps: Vec<Vec<usize>> = Vec::new();
    for total in 1..=degree {
        exponents(d, total, &mut Vec::new(), &mut exps);
    }
    DMatrix::from_fn(n, exps.len(), |i, j| {
        exps[j].iter().zip(cols).map(|(&e, c)| c[i].powi(e as i32)).product()
    })
}

fn exponents(d: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() + 1 == d {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for e in (0..=total).rev() {
        prefix.push(e);
        exponents(d, total - e, prefix, out);
        prefix.pop();
    }
}

fn standardize(c: &[f64]) -> Vec<f64> {
    let n = c.len().max(1) as f64;
    let mean = c.iter().sum::<f64>() / n;
    let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    c.iter().map(|v| (v - mean) / sd).collect()
}

/// Horizontally stacks matrices with equal row counts.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let p: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, p);
    let mut c = 0;
    for b in blocks {
        out.columns_mut(c, b.ncols()).copy_from(b);
        c += b.ncols();
    }
    out
}

pub fn column(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

pub fn ones(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, 1, 1.0)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with `n - 1` denominator; `None` below two values.
pub fn sample_var(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some(v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
