//! Monte Carlo data-generating process: Leontief technology with AR(1) productivity,
//! heterogeneous convex capital adjustment costs, closed-form policies with multiplicative
//! optimization errors, and model-consistent (optionally biased) one-year-ahead beliefs.

pub mod replicate;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{fmt_f64, BeliefDistribution, FirmYear, Panel};
use crate::error::{Error, Result};
use crate::linalg::{mean, sample_var};

pub use replicate::{
    run_replications, EstimatorKind, ReplicationOptions, ReplicationReport, RunRecord, SummaryRow, SummaryTable,
    ACF_PLAUSIBLE,
};

/// `1 / sqrt(2 pi)`, the standard normal density at zero.
pub const PHI0: f64 = 0.398_942_280_401_432_7;

/// Optimization-error standard deviations (log scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptErr {
    pub l: f64,
    pub i: f64,
    pub m: f64,
}

/// How recorded materials relate to labor.
///
/// `RealizedLabor` sets materials from the value side at realized labor, so the Leontief
/// arguments coincide without materials error. `OptimalLabor` plans materials at the optimal
/// labor level before the labor error is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaterialsTiming {
    RealizedLabor,
    OptimalLabor,
}

/// Expectation-bias channel applied to the recorded beliefs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BiasChannel {
    None,
    /// Labor expectations shifted by `N(mean, sd)`; output expectations move by `beta_l` times the
    /// shift, consistent with the technology.
    ExpectedLabor {
        mean: f64,
        sd: f64,
    },
    /// Output expectations shifted by `N(mean, sd)`.
    ExpectedOutput {
        mean: f64,
        sd: f64,
    },
    /// Expected next-period productivity shifted by `N(mean, sd)`, per firm-year.
    ExpectedProductivity {
        mean: f64,
        sd: f64,
    },
    /// Expected productivity shifted by `coef * mgmt`, with `mgmt ~ N(0, 1)` per firm-year.
    ProductivityMgmt {
        coef: f64,
    },
    /// Time-invariant firm-level productivity bias `N(0, sd)`.
    FirmProductivity {
        sd: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    L,
    Li,
    Lm,
    Lim,
    BiasEl,
    BiasEy,
    BiasEomega,
    BiasMgmt,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::L,
        Scenario::Li,
        Scenario::Lm,
        Scenario::Lim,
        Scenario::BiasEl,
        Scenario::BiasEy,
        Scenario::BiasEomega,
        Scenario::BiasMgmt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::L => "l",
            Scenario::Li => "li",
            Scenario::Lm => "lm",
            Scenario::Lim => "lim",
            Scenario::BiasEl => "bias-el",
            Scenario::BiasEy => "bias-ey",
            Scenario::BiasEomega => "bias-eomega",
            Scenario::BiasMgmt => "bias-mgmt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|sc| sc.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub beta0: f64,
    pub beta_k: f64,
    pub beta_l: f64,
    pub beta_m: f64,
    pub rho: f64,
    /// Stationary sd of productivity.
    pub sigma_omega: f64,
    pub sigma_eps: f64,
    pub delta: f64,
    pub discount: f64,
    /// Sigma of the lognormal distribution of inverse adjustment costs.
    pub adj_cost_sigma: f64,
    pub opt_err: OptErr,
    pub materials_timing: MaterialsTiming,
    pub bias: BiasChannel,
    pub n_firms: usize,
    pub n_keep: usize,
    pub burn_in: usize,
    /// Hard cap on investment-series terms.
    pub euler_truncation: usize,
    pub k0: f64,
    pub seed: u64,
    /// Independent stream within `seed`, used for replications.
    pub stream: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            beta0: 1.0,
            beta_k: 0.4,
            beta_l: 0.6,
            beta_m: 1.0,
            rho: 0.7,
            sigma_omega: 0.3,
            sigma_eps: 0.1,
            delta: 0.2,
            discount: 0.95,
            adj_cost_sigma: 0.6,
            opt_err: OptErr {
                l: 0.37,
                i: 0.0,
                m: 0.0,
            },
            materials_timing: MaterialsTiming::OptimalLabor,
            bias: BiasChannel::None,
            n_firms: 1000,
            n_keep: 10,
            burn_in: 90,
            euler_truncation: 10_000,
            k0: (-10f64).exp(),
            seed: 0,
            stream: 0,
        }
    }
}

impl DgpConfig {
    /// Preset for a named scenario. Materials errors use realized-labor timing; all others
    /// plan materials at optimal labor.
    pub fn scenario(s: Scenario) -> Self {
        let mut c = Self::default();
        c.apply_scenario(s);
        c
    }

    /// Overwrites the error, timing and bias settings with the preset for `s`.
    pub fn apply_scenario(&mut self, s: Scenario) {
        let c = self;
        let (l, i, m) = match s {
            Scenario::Li => (0.37, 0.37, 0.0),
            Scenario::Lm => (0.37, 0.0, 0.185),
            Scenario::Lim => (0.37, 0.37, 0.185),
            _ => (0.37, 0.0, 0.0),
        };
        c.opt_err = OptErr { l, i, m };
        c.materials_timing = if m > 0.0 {
            MaterialsTiming::RealizedLabor
        } else {
            MaterialsTiming::OptimalLabor
        };
        c.bias = match s {
            Scenario::BiasEl => BiasChannel::ExpectedLabor { mean: 0.0, sd: 0.15 },
            Scenario::BiasEy => BiasChannel::ExpectedOutput { mean: 0.0, sd: 0.15 },
            Scenario::BiasEomega => BiasChannel::ExpectedProductivity { mean: 0.0, sd: 0.15 },
            Scenario::BiasMgmt => BiasChannel::ProductivityMgmt { coef: -0.15 },
            _ => BiasChannel::None,
        };
    }

    pub fn sigma_xi(&self) -> f64 {
        self.sigma_omega * (1.0 - self.rho * self.rho).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let sds = [
            ("sigma_omega", self.sigma_omega),
            ("sigma_eps", self.sigma_eps),
            ("adj_cost_sigma", self.adj_cost_sigma),
            ("opt_err.l", self.opt_err.l),
            ("opt_err.i", self.opt_err.i),
            ("opt_err.m", self.opt_err.m),
        ];
        for (name, v) in sds {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be a nonnegative sd, got {v}")));
            }
        }
        let bias_sd = match self.bias {
            BiasChannel::ExpectedLabor { sd, .. }
            | BiasChannel::ExpectedOutput { sd, .. }
            | BiasChannel::ExpectedProductivity { sd, .. }
            | BiasChannel::FirmProductivity { sd } => sd,
            _ => 0.0,
        };
        if !(bias_sd >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "bias sd must be nonnegative, got {bias_sd}"
            )));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::InvalidInput(format!(
                "rho must lie in (-1, 1), got {}",
                self.rho
            )));
        }
        if !(self.beta_l > 0.0 && self.beta_l < 1.0) {
            return Err(Error::InvalidInput(format!(
                "beta_l must lie in (0, 1), got {}",
                self.beta_l
            )));
        }
        if !(self.beta0 > 0.0 && self.beta_m > 0.0 && self.k0 > 0.0) {
            return Err(Error::InvalidInput("beta0, beta_m and k0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::InvalidInput(format!(
                "delta must lie in [0, 1), got {}",
                self.delta
            )));
        }
        if self.n_firms == 0 || self.n_keep == 0 {
            return Err(Error::InvalidInput("n_firms and n_keep must be positive".into()));
        }
        Ok(())
    }

    fn a(&self) -> f64 {
        1.0 / (1.0 - self.beta_l)
    }
}

/// `L* = (beta0 beta_l K^beta_k e^omega)^(1 / (1 - beta_l))`.
pub fn optimal_labor(k_level: f64, omega: f64, cfg: &DgpConfig) -> f64 {
    (cfg.beta0 * cfg.beta_l * k_level.powf(cfg.beta_k) * omega.exp()).powf(cfg.a())
}

/// Materials that make the Leontief arguments equal: `beta_m M = beta0 K^beta_k L^beta_l e^omega`.
pub fn optimal_materials(k_level: f64, l_level: f64, omega: f64, cfg: &DgpConfig) -> f64 {
    cfg.beta0 * k_level.powf(cfg.beta_k) * l_level.powf(cfg.beta_l) * omega.exp() / cfg.beta_m
}

/// Labor-error factor of the investment policy:
/// `beta_l^(beta_l a) e^(beta_l^2 s^2 / 2) - beta_l^a e^(s^2 / 2)` with `a = 1 / (1 - beta_l)`.
pub fn labor_error_bracket(sigma_l: f64, cfg: &DgpConfig) -> f64 {
    let a = cfg.a();
    let bl = cfg.beta_l;
    bl.powf(bl * a) * (0.5 * bl * bl * sigma_l * sigma_l).exp() - bl.powf(a) * (0.5 * sigma_l * sigma_l).exp()
}

/// Euler-equation investment policy `I* = (discount / phi) * sum_tau c_tau exp(a rho^(tau+1) omega)`.
#[derive(Debug, Clone)]
pub struct InvestmentPolicy {
    log_coef: Vec<f64>,
    rho_pow: Vec<f64>,
    a: f64,
    scale: f64,
}

impl InvestmentPolicy {
    /// Precomputes series coefficients; the sum starts at `tau = 0` with variance term
    /// `sum_{s=0}^{tau} rho^(2(tau - s)) sigma_xi^2`.
    pub fn new(cfg: &DgpConfig) -> Result<Self> {
        let ratio = cfg.discount * (1.0 - cfg.delta);
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::InvalidInput(format!(
                "investment series does not decay: discount * (1 - delta) = {ratio}"
            )));
        }
        let a = cfg.a();
        let sx2 = cfg.sigma_xi().powi(2);
        let cap = cfg.euler_truncation.max(1);
        let base = (cfg.beta_k * a).ln() + a * cfg.beta0.ln();
        let mut log_coef = Vec::with_capacity(cap);
        let mut rho_pow = Vec::with_capacity(cap);
        let mut var = 0.0;
        let mut rp = cfg.rho;
        for tau in 0..cap {
            var = var * cfg.rho * cfg.rho + sx2;
            log_coef.push(tau as f64 * ratio.ln() + base + 0.5 * a * a * var);
            rho_pow.push(rp);
            rp *= cfg.rho;
        }
        let bracket = if cfg.opt_err.l > 0.0 {
            labor_error_bracket(cfg.opt_err.l, cfg)
        } else {
            1.0
        };
        Ok(Self {
            log_coef,
            rho_pow,
            a,
            scale: cfg.discount * bracket,
        })
    }

    /// Optimal investment for productivity `omega` and adjustment-cost parameter `phi`.
    pub fn eval(&self, omega: f64, phi: f64) -> Result<f64> {
        self.eval_terms(omega, phi, self.log_coef.len())
    }

    /// As [`eval`](Self::eval) with at most `max_terms` series terms.
    pub fn eval_terms(&self, omega: f64, phi: f64, max_terms: usize) -> Result<f64> {
        let mut sum = 0.0;
        let limit = max_terms.min(self.log_coef.len());
        for tau in 0..limit {
            let term = (self.log_coef[tau] + self.a * self.rho_pow[tau] * omega).exp();
            sum += term;
            if term < 1e-12 * sum {
                return Ok(self.scale * sum / phi);
            }
        }
        if max_terms < self.log_coef.len() {
            return Ok(self.scale * sum / phi);
        }
        Err(Error::InvalidInput(format!(
            "investment series not converged after {limit} terms"
        )))
    }
}

/// Convenience wrapper around [`InvestmentPolicy`].
pub fn optimal_investment(omega: f64, phi: f64, cfg: &DgpConfig) -> Result<f64> {
    InvestmentPolicy::new(cfg)?.eval(omega, phi)
}

/// Unbiased `E_t[l_{t+1}] = (ln(beta0 beta_l) + beta_k k' + rho omega) / (1 - beta_l)`.
pub fn expected_log_labor(k_next: f64, omega: f64, cfg: &DgpConfig) -> f64 {
    cfg.a() * ((cfg.beta0 * cfg.beta_l).ln() + cfg.beta_k * k_next + cfg.rho * omega)
}

/// Conditional variance of `l_{t+1}`.
pub fn var_log_labor(cfg: &DgpConfig) -> f64 {
    cfg.a().powi(2) * cfg.sigma_xi().powi(2) + cfg.opt_err.l.powi(2)
}

/// Unbiased `E_t[y_{t+1}]`: the mean of the value side minus `phi(0) sigma_m`, the expected
/// shortfall from the Leontief kink.
pub fn expected_log_output(k_next: f64, omega: f64, cfg: &DgpConfig) -> f64 {
    let mu =
        cfg.beta0.ln() + cfg.beta_k * k_next + cfg.beta_l * expected_log_labor(k_next, omega, cfg) + cfg.rho * omega;
    mu - PHI0 * cfg.opt_err.m
}

/// `E[min(X1, X2)]` for bivariate normal `X` with correlation `corr`.
pub fn expected_min_normal(mu1: f64, mu2: f64, s1: f64, s2: f64, corr: f64) -> f64 {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};
    let theta = (s1 * s1 + s2 * s2 - 2.0 * corr * s1 * s2).max(0.0).sqrt();
    if theta < 1e-300 {
        return mu1.min(mu2);
    }
    let n = Normal::standard();
    let d = (mu2 - mu1) / theta;
    mu1 * n.cdf(d) + mu2 * n.cdf(-d) - theta * n.pdf(d)
}

/// Per-row latent quantities of a simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub firm_id: String,
    pub year: i32,
    pub omega: f64,
    pub xi: f64,
    pub eps: f64,
    pub err_l: f64,
    pub err_i: f64,
    pub err_m: f64,
    pub mgmt: f64,
    pub iota: f64,
    pub inv_phi: f64,
    pub mu_y: f64,
    pub mu_l: f64,
    pub sigma2_l: f64,
}

#[derive(Debug, Clone)]
pub struct SimPanel {
    pub panel: Panel,
    /// Aligned with `panel.rows()`.
    pub truth: Vec<TruthRow>,
}

/// Shocks drawn for one firm-period, always in the same order so runs are reproducible and
/// scenarios with the same seed share their underlying draws.
struct Draws {
    xi: f64,
    err_l: f64,
    err_i: f64,
    err_m: f64,
    eps: f64,
    mgmt: f64,
    bias: f64,
}

fn draw(rng: &mut ChaCha8Rng) -> Draws {
    let mut z = || rng.sample::<f64, _>(StandardNormal);
    Draws {
        xi: z(),
        err_l: z(),
        err_i: z(),
        err_m: z(),
        eps: z(),
        mgmt: z(),
        bias: z(),
    }
}

/// Simulates `burn_in + n_keep` periods per firm and keeps the last `n_keep`.
pub fn simulate(cfg: &DgpConfig) -> Result<SimPanel> {
    cfg.validate()?;
    let policy = InvestmentPolicy::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream);
    let sx = cfg.sigma_xi();
    let periods = cfg.burn_in + cfg.n_keep;
    let width = cfg.n_firms.to_string().len();
    let sigma2_l = var_log_labor(cfg);
    let mut rows = Vec::with_capacity(cfg.n_firms * cfg.n_keep);
    let mut truth = Vec::with_capacity(cfg.n_firms * cfg.n_keep);
    for firm in 0..cfg.n_firms {
        let firm_id = format!("f{firm:0width$}");
        let inv_phi = (cfg.adj_cost_sigma * rng.sample::<f64, _>(StandardNormal)).exp();
        let mut omega = cfg.sigma_omega * rng.sample::<f64, _>(StandardNormal);
        let firm_bias: f64 = rng.sample(StandardNormal);
        let mut k_level = cfg.k0;
        for t in 0..periods {
            let d = draw(&mut rng);
            let xi = if t > 0 { sx * d.xi } else { 0.0 };
            if t > 0 {
                omega = cfg.rho * omega + xi;
            }
            let l_star = optimal_labor(k_level, omega, cfg);
            let err_l = cfg.opt_err.l * d.err_l;
            let l_level = l_star * err_l.exp();
            let err_i = cfg.opt_err.i * d.err_i;
            let inv = policy.eval(omega, 1.0 / inv_phi)? * err_i.exp();
            let value = optimal_materials(k_level, l_level, omega, cfg) * cfg.beta_m;
            let err_m = cfg.opt_err.m * d.err_m;
            let m_level = match cfg.materials_timing {
                MaterialsTiming::RealizedLabor => value / cfg.beta_m,
                MaterialsTiming::OptimalLabor => optimal_materials(k_level, l_star, omega, cfg),
            } * err_m.exp();
            let eps = cfg.sigma_eps * d.eps;
            // Materials shortfalls bind through the Leontief kink; surpluses do not raise output.
            let y_level = value * err_m.min(0.0).exp() * eps.exp();
            if !(value > 0.0 && m_level > 0.0 && y_level > 0.0 && inv > 0.0) {
                return Err(Error::Degenerate(format!(
                    "non-positive simulated level for firm {firm} period {t}"
                )));
            }
            let k_next_level = (1.0 - cfg.delta) * k_level + inv;
            let k_next = k_next_level.ln();
            let mut mu_l = expected_log_labor(k_next, omega, cfg);
            let mut mu_y = expected_log_output(k_next, omega, cfg);
            let a = cfg.a();
            let iota = match cfg.bias {
                BiasChannel::None => 0.0,
                BiasChannel::ExpectedLabor { mean, sd } => {
                    let b = mean + sd * d.bias;
                    mu_l += b;
                    mu_y += cfg.beta_l * b;
                    b
                }
                BiasChannel::ExpectedOutput { mean, sd } => {
                    let b = mean + sd * d.bias;
                    mu_y += b;
                    b
                }
                BiasChannel::ExpectedProductivity { mean, sd } => {
                    let b = mean + sd * d.bias;
                    mu_l += a * b;
                    mu_y += a * b;
                    b
                }
                BiasChannel::ProductivityMgmt { coef } => {
                    let b = coef * d.mgmt;
                    mu_l += a * b;
                    mu_y += a * b;
                    b
                }
                BiasChannel::FirmProductivity { sd } => {
                    let b = sd * firm_bias;
                    mu_l += a * b;
                    mu_y += a * b;
                    b
                }
            };
            if t >= cfg.burn_in {
                let year = (t - cfg.burn_in + 1) as i32;
                let mut row = FirmYear::new(firm_id.clone(), year, y_level.ln(), l_level.ln(), k_level.ln());
                row.m = Some(m_level.ln());
                row.inv = Some(inv.ln());
                row.k_next = Some(k_next);
                row.beliefs.y = Some(BeliefDistribution::new(mu_y, belief_var_log_output(cfg)));
                row.beliefs.l = Some(BeliefDistribution::new(mu_l, sigma2_l));
                row.aux.insert("mgmt".into(), d.mgmt);
                rows.push(row);
                truth.push(TruthRow {
                    firm_id: firm_id.clone(),
                    year,
                    omega,
                    xi,
                    eps,
                    err_l,
                    err_i,
                    err_m,
                    mgmt: d.mgmt,
                    iota,
                    inv_phi,
                    mu_y,
                    mu_l,
                    sigma2_l,
                });
            }
            k_level = k_next_level;
        }
    }
    Ok(SimPanel {
        panel: Panel::new(rows)?,
        truth,
    })
}

/// Conditional variance of the value side of next-period log output, ignoring the kink.
fn belief_var_log_output(cfg: &DgpConfig) -> f64 {
    let a = cfg.a();
    (cfg.beta_l * a + 1.0).powi(2) * cfg.sigma_xi().powi(2) + (cfg.beta_l * cfg.opt_err.l).powi(2)
}

/// Share of log-capital variance that lies between firms.
pub fn capital_between_share(panel: &Panel) -> f64 {
    let k: Vec<f64> = panel.rows().iter().map(|r| r.k).collect();
    let total = sample_var(&k).unwrap_or(0.0) * (k.len() - 1) as f64;
    let grand = mean(&k);
    let between: f64 = panel
        .firm_ranges()
        .into_iter()
        .map(|r| {
            let m = mean(&k[r.clone()]);
            r.len() as f64 * (m - grand).powi(2)
        })
        .sum();
    between / total
}

/// R-squared of a regression of `k` on `l` with intercept.
pub fn r2_k_on_l(panel: &Panel) -> f64 {
    let k: Vec<f64> = panel.rows().iter().map(|r| r.k).collect();
    let l: Vec<f64> = panel.rows().iter().map(|r| r.l).collect();
    crate::linalg::correlation(&k, &l).powi(2)
}

/// Writes the truth sidecar CSV.
pub fn write_truth_csv<W: Write>(truth: &[TruthRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "firm_id", "year", "omega", "xi", "eps", "err_l", "err_i", "err_m", "mgmt", "iota", "inv_phi", "mu_y", "mu_l",
        "sigma2_l",
    ])?;
    for t in truth {
        let mut rec = vec![t.firm_id.clone(), t.year.to_string()];
        rec.extend(
            [
                t.omega, t.xi, t.eps, t.err_l, t.err_i, t.err_m, t.mgmt, t.iota, t.inv_phi, t.mu_y, t.mu_l, t.sigma2_l,
            ]
            .map(fmt_f64),
        );
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
