//! BFGS with a Wolfe line search, golden-section search and numeric derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient max-norm falls below this.
    pub gtol: f64,
    /// Stop when the relative objective change falls below this.
    pub ftol_rel: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            gtol: 1e-8,
            ftol_rel: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at every accepted iterate, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Minimizes `f`, which returns the value and writes the gradient into its second argument.
pub fn bfgs<F>(mut f: F, x0: DVector<f64>, opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = DVector::zeros(n);
    let mut fx = f(&x, &mut g);
    let mut trace = vec![fx];
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut converged = g.amax() < opts.gtol;
    let mut iterations = 0;
    let mut g_new = DVector::zeros(n);
    while !converged && iterations < opts.max_iter && fx.is_finite() {
        iterations += 1;
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if slope >= 0.0 || !slope.is_finite() {
            h = DMatrix::identity(n, n);
            d = -g.clone();
            slope = g.dot(&d);
        }
        if first {
            // Unit first step along a unit-length direction keeps the first trial sensible.
            let scale = 1.0 / d.amax().max(1.0);
            d *= scale;
            slope *= scale;
        }
        let Some((alpha, f_new)) = wolfe_search(&mut f, &x, fx, slope, &d, &mut g_new) else {
            if first {
                break;
            }
            // Retry once along steepest descent before giving up.
            h = DMatrix::identity(n, n);
            first = true;
            continue;
        };
        let s = &d * alpha;
        let y = &g_new - &g;
        let x_new = &x + &s;
        let rel = (fx - f_new).abs() / fx.abs().max(f_new.abs()).max(1e-300);
        x = x_new;
        fx = f_new;
        g.copy_from(&g_new);
        trace.push(fx);
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                h = DMatrix::identity(n, n) * (sy / y.norm_squared());
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        first = false;
        if g.amax() < opts.gtol || rel < opts.ftol_rel {
            converged = true;
        }
    }
    BfgsResult {
        x,
        f: fx,
        grad: g,
        iterations,
        converged,
        trace,
    }
}

/// Strong Wolfe line search (bracketing plus zoom by bisection/interpolation).
fn wolfe_search<F>(
    f: &mut F,
    x: &DVector<f64>,
    f0: f64,
    slope0: f64,
    d: &DVector<f64>,
    g_out: &mut DVector<f64>,
) -> Option<(f64, f64)>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let mut eval = |a: f64, g: &mut DVector<f64>| -> (f64, f64) {
        let xa = x + d * a;
        let fa = f(&xa, g);
        (fa, g.dot(d))
    };
    let mut g = DVector::zeros(x.len());
    let (mut a_lo, mut f_lo, mut s_lo) = (0.0, f0, slope0);
    let mut a = 1.0;
    let mut a_hi = f64::INFINITY;
    let mut f_hi = f64::INFINITY;
    let mut best: Option<(f64, f64, DVector<f64>)> = None;
    for _ in 0..60 {
        let (fa, sa) = eval(a, &mut g);
        if !fa.is_finite() || fa > f0 + C1 * a * slope0 || fa >= f_lo {
            a_hi = a;
            f_hi = if fa.is_finite() { fa } else { f64::INFINITY };
        } else {
            if best.as_ref().is_none_or(|b| fa < b.1) {
                best = Some((a, fa, g.clone()));
            }
            if sa.abs() <= -C2 * slope0 {
                g_out.copy_from(&g);
                return Some((a, fa));
            }
            let overshoot = if a_hi.is_finite() {
                sa * (a_hi - a) >= 0.0
            } else {
                sa >= 0.0
            };
            if overshoot {
                a_hi = a_lo;
                f_hi = f_lo;
            }
            a_lo = a;
            f_lo = fa;
            s_lo = sa;
        }
        a = if a_hi.is_finite() {
            // Quadratic interpolation from the low end, safeguarded into the bracket.
            let denom = 2.0 * (f_hi - f_lo - s_lo * (a_hi - a_lo));
            let trial = if denom.is_finite() && denom > 0.0 {
                a_lo - s_lo * (a_hi - a_lo).powi(2) / denom
            } else {
                0.5 * (a_lo + a_hi)
            };
            let (lo, hi) = (a_lo.min(a_hi), a_lo.max(a_hi));
            let w = hi - lo;
            trial.clamp(lo + 0.1 * w, hi - 0.1 * w)
        } else {
            a * 2.0
        };
        if a_hi.is_finite() && (a_hi - a_lo).abs() < 1e-16 * a_lo.abs().max(1e-16) {
            break;
        }
    }
    best.map(|(a, fa, g)| {
        g_out.copy_from(&g);
        (a, fa)
    })
}

/// Golden-section minimization on `[a, b]`; returns `(x, f(x))`.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Central-difference gradient with step scaled to each coordinate.
pub fn numeric_gradient<F: FnMut(&DVector<f64>) -> f64>(f: &mut F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_solves_rosenbrock_with_monotone_trace() {
        let rosen = |x: &DVector<f64>, g: &mut DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let res = bfgs(rosen, DVector::from_vec(vec![-1.2, 1.0]), &BfgsOptions::default());
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn golden_finds_parabola_minimum() {
        let (x, fx) = golden_section(|x| (x - 0.3).powi(2) + 1.0, -2.0, 5.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-6);
        assert!((fx - 1.0).abs() < 1e-14);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let mut f = |x: &DVector<f64>| x[0] * x[0] + 3.0 * x[0] * x[1];
        let g = numeric_gradient(&mut f, &DVector::from_vec(vec![1.0, 2.0]), 1e-6);
        assert!((g[0] - 8.0).abs() < 1e-6 && (g[1] - 3.0).abs() < 1e-6);
    }
}
