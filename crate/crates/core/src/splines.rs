//! B-spline bases, first-difference penalties and the monotone reparameterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bound applied to raw increments before exponentiation.
pub const RAW_CLAMP: f64 = 30.0;

/// B-spline basis on `[a, b]` with clamped (repeated) boundary knots and evenly spaced interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    pub knots: Vec<f64>,
    /// Order (degree + 1); 4 is cubic.
    pub order: usize,
    /// Number of basis functions.
    pub q: usize,
}

/// Builds a basis spanning the range of `x_sample`.
pub fn build_basis(x_sample: &[f64], q: usize, order: usize) -> Result<BSplineBasis> {
    if !(2..=15).contains(&order) || q < order {
        return Err(Error::InvalidInput(format!(
            "need q >= order >= 2, got q={q}, order={order}"
        )));
    }
    let (a, b) = x_sample
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidInput("basis sample is empty or not finite".into()));
    }
    if b <= a {
        return Err(Error::Degenerate("all basis sample values are equal".into()));
    }
    let n_inner = q - order;
    let h = (b - a) / (n_inner + 1) as f64;
    let mut knots = vec![a; order];
    knots.extend((1..=n_inner).map(|j| a + j as f64 * h));
    knots.extend(std::iter::repeat_n(b, order));
    Ok(BSplineBasis { knots, order, q })
}

impl BSplineBasis {
    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Nonzero basis values at `x`: returns the index of the first nonzero function and writes
    /// `order` values into `out`. Points outside `[a, b]` are evaluated at the nearest boundary.
    pub fn eval_nonzero(&self, x: f64, out: &mut [f64]) -> usize {
        let p = self.order - 1;
        let t = &self.knots;
        let x = x.clamp(self.lower(), self.upper());
        // Span index mu with t[mu] <= x < t[mu + 1], restricted to the valid range.
        let mut lo = p;
        let mut hi = self.q;
        if x >= t[self.q] {
            lo = self.q - 1;
        } else {
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if x < t[mid] {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
        }
        let mu = lo;
        let mut left = [0.0; 16];
        let mut right = [0.0; 16];
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { out[r] / denom } else { 0.0 };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        mu - p
    }

    /// All `q` basis values at `x`.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut full = vec![0.0; self.q];
        let mut vals = vec![0.0; self.order];
        let first = self.eval_nonzero(x, &mut vals);
        full[first..first + self.order].copy_from_slice(&vals);
        full
    }

    /// Dense `n x q` basis matrix, row-major.
    pub fn matrix(&self, xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| self.eval(x)).collect()
    }
}

/// Cumulative coefficients: `gamma_1 = raw_1`, `gamma_j = gamma_{j-1} + exp(raw_j)`.
pub fn monotone_map(gamma_raw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(gamma_raw.len());
    let mut acc = 0.0;
    for (j, &r) in gamma_raw.iter().enumerate() {
        acc = if j == 0 {
            r
        } else {
            acc + r.clamp(-RAW_CLAMP, RAW_CLAMP).exp()
        };
        out.push(acc);
    }
    out
}

/// `lambda * ||D gamma||^2` with `D` the first-difference matrix.
pub fn penalty(gamma: &[f64], lambda: f64) -> f64 {
    lambda * gamma.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>()
}

/// A fitted monotone smooth `Psi(z) = sum_j gamma_j B_j(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneSmooth {
    pub gamma_raw: Vec<f64>,
    pub lambda: f64,
    pub basis: BSplineBasis,
}

impl MonotoneSmooth {
    pub fn gamma(&self) -> Vec<f64> {
        monotone_map(&self.gamma_raw)
    }

    pub fn eval(&self, z: f64) -> f64 {
        let gamma = self.gamma();
        self.eval_with(&gamma, z)
    }

    pub fn eval_many(&self, zs: &[f64]) -> Vec<f64> {
        let gamma = self.gamma();
        zs.iter().map(|&z| self.eval_with(&gamma, z)).collect()
    }

    fn eval_with(&self, gamma: &[f64], z: f64) -> f64 {
        let mut vals = [0.0; 16];
        let first = self.basis.eval_nonzero(z, &mut vals[..self.basis.order]);
        (0..self.basis.order).map(|r| vals[r] * gamma[first + r]).sum()
    }
}
