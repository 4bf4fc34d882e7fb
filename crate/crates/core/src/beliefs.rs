//! Lognormal subjective distributions from five-scenario survey responses, belief moments,
//! expected log value added by Gaussian copula, and a synthetic survey generator.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::datamodel::{fmt_f64, BeliefDistribution};
use crate::error::{Error, Result};
use crate::optim::{bfgs, BfgsOptions};

/// Minimum starting spread for the optimizer.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResponse {
    /// Scenario levels, lowest to highest once sorted.
    pub values: [f64; 5],
    /// Likelihoods in percent.
    pub likelihoods: [f64; 5],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedBelief {
    pub mu: f64,
    pub sigma2: f64,
    /// Mean absolute gap between reported and fitted cumulative probabilities, averaged over
    /// the two fits.
    pub mad: f64,
    /// All scenario values equal.
    pub degenerate: bool,
    /// `(mu, sigma2)` from the CDF targets.
    pub cdf_fit: (f64, f64),
    /// `(mu, sigma2)` from the survival targets.
    pub survival_fit: (f64, f64),
}

impl FittedBelief {
    pub fn to_distribution(&self) -> BeliefDistribution {
        BeliefDistribution {
            mu: self.mu,
            sigma2: self.sigma2,
            fit_mad: Some(self.mad),
        }
    }
}

/// Rescales likelihoods to sum to 100; totals outside `[90, 110]` are discarded.
pub fn normalize_likelihoods(r: &ScenarioResponse) -> Result<ScenarioResponse> {
    if r.likelihoods.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidInput("likelihoods must be finite and nonnegative".into()));
    }
    let total: f64 = r.likelihoods.iter().sum();
    if !(90.0..=110.0).contains(&total) {
        return Err(Error::DiscardedResponse { total });
    }
    let mut out = *r;
    for p in &mut out.likelihoods {
        *p *= 100.0 / total;
    }
    Ok(out)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Least-squares fit of a normal CDF (on log values) to `targets`, from `(mu0, sigma0)`.
fn fit_cdf(logv: &[f64; 5], targets: &[f64; 5], mu0: f64, sigma0: f64) -> Result<(f64, f64)> {
    let n = std_normal();
    let f = |x: &DVector<f64>, g: &mut DVector<f64>| -> f64 {
        let (mu, ls) = (x[0], x[1]);
        let s = ls.exp();
        let mut val = 0.0;
        g.fill(0.0);
        for (v, t) in logv.iter().zip(targets) {
            let u = (v - mu) / s;
            let r = n.cdf(u) - t;
            let d = n.pdf(u);
            val += r * r;
            g[0] += -2.0 * r * d / s;
            g[1] += -2.0 * r * d * u;
        }
        val
    };
    let opts = BfgsOptions {
        max_iter: 1000,
        gtol: 1e-13,
        ftol_rel: 0.0,
    };
    let res = bfgs(f, DVector::from_vec(vec![mu0, sigma0.ln()]), &opts);
    if !res.f.is_finite() || !res.x.iter().all(|v| v.is_finite()) {
        return Err(Error::NotConverged("belief fit failed".into()));
    }
    if !res.converged && res.grad.amax() > 1e-7 {
        return Err(Error::NotConverged(format!(
            "belief fit stopped with gradient {:.2e}",
            res.grad.amax()
        )));
    }
    Ok((res.x[0], (2.0 * res.x[1]).exp()))
}

/// Fits a lognormal by matching cumulative (CDF) and reverse-cumulative (survival) scenario
/// probabilities, then averages `mu` and `sigma2` over the two fits.
pub fn fit_belief(r: &ScenarioResponse) -> Result<FittedBelief> {
    let r = normalize_likelihoods(r)?;
    if r.values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidInput("scenario values must be positive".into()));
    }
    let mut idx = [0usize, 1, 2, 3, 4];
    idx.sort_by(|&a, &b| {
        r.values[a]
            .total_cmp(&r.values[b])
            .then(r.likelihoods[a].total_cmp(&r.likelihoods[b]))
    });
    let logv: [f64; 5] = idx.map(|i| r.values[i].ln());
    let p: [f64; 5] = idx.map(|i| r.likelihoods[i] / 100.0);
    if logv[4] - logv[0] == 0.0 {
        return Ok(FittedBelief {
            mu: logv[0],
            sigma2: 0.0,
            mad: 0.0,
            degenerate: true,
            cdf_fit: (logv[0], 0.0),
            survival_fit: (logv[0], 0.0),
        });
    }
    let mut cdf = [0.0; 5];
    let mut surv = [0.0; 5];
    let mut acc = 0.0;
    for s in 0..5 {
        surv[s] = acc;
        acc += p[s];
        cdf[s] = acc;
    }
    let mu0: f64 = logv.iter().zip(&p).map(|(v, w)| v * w).sum();
    let var0: f64 = logv.iter().zip(&p).map(|(v, w)| w * (v - mu0).powi(2)).sum();
    let sigma0 = var0.sqrt().max(SIGMA_FLOOR);
    let a = fit_cdf(&logv, &cdf, mu0, sigma0)?;
    let b = fit_cdf(&logv, &surv, mu0, sigma0)?;
    let mu = 0.5 * (a.0 + b.0);
    let sigma2 = 0.5 * (a.1 + b.1);
    let n = std_normal();
    let gap = |fit: (f64, f64), targets: &[f64; 5]| -> f64 {
        let sd = fit.1.sqrt();
        (0..5)
            .map(|s| (n.cdf((logv[s] - fit.0) / sd) - targets[s]).abs())
            .sum::<f64>()
            / 5.0
    };
    let mad = 0.5 * (gap(a, &cdf) + gap(b, &surv));
    Ok(FittedBelief {
        mu,
        sigma2,
        mad,
        degenerate: false,
        cdf_fit: a,
        survival_fit: b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefMoments {
    pub e_log: f64,
    pub var_log: f64,
    pub e_level: f64,
    pub e_log_sq: f64,
}

pub fn belief_moments(mu: f64, sigma2: f64) -> BeliefMoments {
    BeliefMoments {
        e_log: mu,
        var_log: sigma2,
        e_level: (mu + sigma2 / 2.0).exp(),
        e_log_sq: sigma2 + mu * mu,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueAdded {
    pub e_log_va: f64,
    pub share_defined: f64,
    /// Fewer than half the draws had positive value added.
    pub low_share: bool,
}

/// Mean of `ln(T - M)` over draws with `T > M`, with lognormal marginals joined by a Gaussian
/// copula with correlation `corr`.
pub fn expected_log_value_added(
    turnover: (f64, f64),
    materials: (f64, f64),
    corr: f64,
    n_draws: usize,
    seed: u64,
) -> Result<ValueAdded> {
    if !(corr > -1.0 && corr < 1.0) {
        return Err(Error::InvalidInput("copula correlation must lie in (-1, 1)".into()));
    }
    if n_draws < 10_000 {
        return Err(Error::InvalidInput("at least 10^4 draws are required".into()));
    }
    if turnover.1 < 0.0 || materials.1 < 0.0 {
        return Err(Error::InvalidInput("belief variances must be nonnegative".into()));
    }
    let (st, sm) = (turnover.1.sqrt(), materials.1.sqrt());
    let c2 = (1.0 - corr * corr).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut defined = 0usize;
    for _ in 0..n_draws {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let e: f64 = StandardNormal.sample(&mut rng);
        let z2 = corr * z1 + c2 * e;
        let t = (turnover.0 + st * z1).exp();
        let m = (materials.0 + sm * z2).exp();
        if t > m {
            sum += (t - m).ln();
            defined += 1;
        }
    }
    let share = defined as f64 / n_draws as f64;
    if defined == 0 {
        return Err(Error::NoUsableObservations("value added is never positive".into()));
    }
    if share < 0.5 {
        log::warn!("only {:.1}% of draws have positive value added", 100.0 * share);
    }
    Ok(ValueAdded {
        e_log_va: sum / defined as f64,
        share_defined: share,
        low_share: share < 0.5,
    })
}

/// Synthetic likelihoods (percent): symmetric, with each scenario value placed at the midpoint
/// of its bin's cumulative probability. With these weights the averaged CDF and survival fits
/// reproduce the generating lognormal.
pub const SYNTHETIC_LIKELIHOODS: [f64; 5] = [20.624_634, 20.0, 18.750_732, 20.0, 20.624_634];

/// Survey response implied by a known lognormal `(mu, sigma2)`.
pub fn synthetic_response(mu: f64, sigma2: f64) -> ScenarioResponse {
    let n = std_normal();
    let sd = sigma2.max(0.0).sqrt();
    let mut values = [0.0; 5];
    let mut acc = 0.0;
    for (s, p) in SYNTHETIC_LIKELIHOODS.iter().enumerate() {
        let mid = (acc + p / 2.0) / 100.0;
        acc += p;
        values[s] = (mu + sd * n.inverse_cdf(mid)).exp();
    }
    ScenarioResponse {
        values,
        likelihoods: SYNTHETIC_LIKELIHOODS,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SurveyVariable {
    #[serde(rename = "turnover")]
    Turnover,
    #[serde(rename = "employment")]
    Employment,
    #[serde(rename = "materials")]
    Materials,
}

impl SurveyVariable {
    pub fn name(self) -> &'static str {
        match self {
            Self::Turnover => "turnover",
            Self::Employment => "employment",
            Self::Materials => "materials",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "turnover" => Some(Self::Turnover),
            "employment" => Some(Self::Employment),
            "materials" => Some(Self::Materials),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub firm_id: String,
    pub year: i32,
    pub variable: SurveyVariable,
    pub response: ScenarioResponse,
}

pub const SURVEY_COLUMNS: [&str; 13] = [
    "firm_id", "year", "variable", "v1", "v2", "v3", "v4", "v5", "p1", "p2", "p3", "p4", "p5",
];

pub fn read_survey_csv<R: Read>(reader: R) -> Result<Vec<SurveyRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("survey csv lacks column {name}")))
    };
    let idx: Vec<usize> = SURVEY_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::InvalidInput(format!("survey line {}: bad {what}", line + 2));
        let num = |j: usize| -> Result<f64> {
            rec.get(idx[j])
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad(SURVEY_COLUMNS[j]))
        };
        let year = rec
            .get(idx[1])
            .and_then(|s| s.parse::<i32>().ok())
            .ok_or_else(|| bad("year"))?;
        let variable = rec
            .get(idx[2])
            .and_then(SurveyVariable::parse)
            .ok_or_else(|| bad("variable"))?;
        let mut values = [0.0; 5];
        let mut likelihoods = [0.0; 5];
        for s in 0..5 {
            values[s] = num(3 + s)?;
            likelihoods[s] = num(8 + s)?;
        }
        out.push(SurveyRecord {
            firm_id: rec.get(idx[0]).unwrap_or_default().to_string(),
            year,
            variable,
            response: ScenarioResponse { values, likelihoods },
        });
    }
    Ok(out)
}

pub fn write_survey_csv<W: Write>(records: &[SurveyRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SURVEY_COLUMNS)?;
    for r in records {
        let mut row = vec![r.firm_id.clone(), r.year.to_string(), r.variable.name().to_string()];
        row.extend(r.response.values.iter().map(|v| fmt_f64(*v)));
        row.extend(r.response.likelihoods.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Fitted beliefs per `(firm, year)`, keyed by variable.
pub type BeliefTable = BTreeMap<(String, i32), BTreeMap<SurveyVariable, FittedBelief>>;

/// Fits every record; discarded or unfittable responses are counted, not fatal.
pub fn fit_survey(records: &[SurveyRecord]) -> (BeliefTable, usize) {
    let mut table = BeliefTable::new();
    let mut discarded = 0;
    for r in records {
        match fit_belief(&r.response) {
            Ok(b) => {
                table
                    .entry((r.firm_id.clone(), r.year))
                    .or_default()
                    .insert(r.variable, b);
            }
            Err(e) => {
                log::warn!("{} {} {}: {e}", r.firm_id, r.year, r.variable.name());
                discarded += 1;
            }
        }
    }
    (table, discarded)
}

/// Belief columns of the panel schema, plus per-variable fit quality.
pub fn write_belief_csv<W: Write>(table: &BeliefTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "firm_id",
        "year",
        "belief_mu_y",
        "belief_sigma2_y",
        "belief_mu_l",
        "belief_sigma2_l",
        "belief_mu_m",
        "belief_sigma2_m",
        "mad_y",
        "mad_l",
        "mad_m",
    ])?;
    let vars = [
        SurveyVariable::Turnover,
        SurveyVariable::Employment,
        SurveyVariable::Materials,
    ];
    for ((firm, year), m) in table {
        let mut row = vec![firm.clone(), year.to_string()];
        for v in vars {
            match m.get(&v) {
                Some(b) => row.extend([fmt_f64(b.mu), fmt_f64(b.sigma2)]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        for v in vars {
            row.push(m.get(&v).map(|b| fmt_f64(b.mad)).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(values: [f64; 5], likelihoods: [f64; 5]) -> ScenarioResponse {
        ScenarioResponse { values, likelihoods }
    }

    #[test]
    fn normalization_window() {
        let r = normalize_likelihoods(&resp([1.0; 5], [19.0; 5])).unwrap();
        assert!((r.likelihoods.iter().sum::<f64>() - 100.0).abs() < 1e-12);
        let same = normalize_likelihoods(&resp([1.0; 5], [20.0; 5])).unwrap();
        assert_eq!(same.likelihoods, [20.0; 5]);
        assert!(matches!(
            normalize_likelihoods(&resp([1.0; 5], [24.0; 5])),
            Err(Error::DiscardedResponse { .. })
        ));
    }

    #[test]
    fn equal_values_are_degenerate() {
        let b = fit_belief(&resp([7.0; 5], [10.0, 30.0, 20.0, 20.0, 20.0])).unwrap();
        assert!(b.degenerate);
        assert_eq!(b.sigma2, 0.0);
        assert!((b.mu - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn round_trip_example() {
        let b = fit_belief(&synthetic_response(2.0, 0.09)).unwrap();
        assert!((b.mu - 2.0).abs() < 1e-3 && (b.sigma2 - 0.09).abs() < 1e-3, "{b:?}");
        assert!(b.mad < 0.05);
    }

    #[test]
    fn moments_examples() {
        assert_eq!(belief_moments(0.0, 1.0).e_log_sq, 1.0);
        assert!((belief_moments(1.0, 0.0).e_level - std::f64::consts::E).abs() < 1e-15);
        assert!((belief_moments(2.0, 0.09).e_level - 2.045f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn value_added_without_materials() {
        let va = expected_log_value_added((2.0, 0.1), (1e-12f64.ln(), 0.0), 0.0, 20_000, 1).unwrap();
        assert!((va.e_log_va - 2.0).abs() < 0.01);
        assert_eq!(va.share_defined, 1.0);
    }

    #[test]
    fn value_added_rejects_bad_inputs() {
        assert!(expected_log_value_added((2.0, 0.1), (1.0, 0.1), 1.0, 20_000, 1).is_err());
        assert!(expected_log_value_added((2.0, 0.1), (1.0, 0.1), 0.0, 100, 1).is_err());
    }
}
