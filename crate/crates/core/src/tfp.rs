//! TFP residuals from estimated coefficients and outcome regressions on exit and employment growth.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{fmt_f64, validate_panel, year_dummies, Field, Panel, ProductionSpec};
use crate::error::{Error, Result};
use crate::linalg::{column, hc1_covariance, hstack, ols, ones, sample_var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfpRow {
    pub firm_id: String,
    pub year: i32,
    /// Residual demeaned by year.
    pub tfp: f64,
    /// True at a firm's last observed year; missing in the panel's final year.
    pub exit: Option<bool>,
    /// `l_{t+2} - l_{t+1}`.
    pub growth_1_2: Option<f64>,
    /// `l_{t+5} - l_{t+1}`.
    pub growth_1_5: Option<f64>,
}

/// `y - f(l, k)` demeaned by year, with exit and growth outcomes.
pub fn tfp_residuals(panel: &Panel, spec: &ProductionSpec) -> Result<Vec<TfpRow>> {
    let (p, _) = validate_panel(panel, &[Field::Y, Field::L, Field::K])?;
    let rows = p.rows();
    let raw: Vec<f64> = rows.iter().map(|r| r.y - spec.inputs(r.l, r.k)).collect();
    let tfp = demean_by_year(&raw, &rows.iter().map(|r| r.year).collect::<Vec<_>>());
    let last_year = rows.iter().map(|r| r.year).max().unwrap_or(0);
    let labor: HashMap<(&str, i32), f64> = rows.iter().map(|r| ((r.firm_id.as_str(), r.year), r.l)).collect();
    let mut out = Vec::with_capacity(rows.len());
    for range in p.firm_ranges() {
        let firm_last = rows[range.end - 1].year;
        for i in range {
            let r = &rows[i];
            let l_at = |h: i32| labor.get(&(r.firm_id.as_str(), r.year + h)).copied();
            let growth = |h: i32| Some(l_at(h)? - l_at(1)?);
            let exit = if r.year < firm_last {
                Some(false)
            } else if r.year < last_year {
                Some(true)
            } else {
                None
            };
            out.push(TfpRow {
                firm_id: r.firm_id.clone(),
                year: r.year,
                tfp: tfp[i],
                exit,
                growth_1_2: growth(2),
                growth_1_5: growth(5),
            });
        }
    }
    Ok(out)
}

/// Subtracts the per-year mean.
pub fn demean_by_year(values: &[f64], years: &[i32]) -> Vec<f64> {
    let mut acc: HashMap<i32, (f64, usize)> = HashMap::new();
    for (v, y) in values.iter().zip(years) {
        let e = acc.entry(*y).or_default();
        e.0 += v;
        e.1 += 1;
    }
    values
        .iter()
        .zip(years)
        .map(|(v, y)| {
            let (s, n) = acc[y];
            v - s / n as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "exit")]
    Exit,
    #[serde(rename = "growth_1_2")]
    Growth12,
    #[serde(rename = "growth_1_5")]
    Growth15,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Exit, Outcome::Growth12, Outcome::Growth15];

    pub fn name(self) -> &'static str {
        match self {
            Self::Exit => "exit",
            Self::Growth12 => "growth_1_2",
            Self::Growth15 => "growth_1_5",
        }
    }

    fn value(self, r: &TfpRow) -> Option<f64> {
        match self {
            Self::Exit => r.exit.map(|e| if e { 1.0 } else { 0.0 }),
            Self::Growth12 => r.growth_1_2,
            Self::Growth15 => r.growth_1_5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFit {
    pub outcome: String,
    pub pi_hat: f64,
    pub se: f64,
    /// Coefficient on TFP scaled to unit standard deviation.
    pub pi_std: f64,
    pub se_std: f64,
    pub n: usize,
    pub outcome_mean: f64,
}

/// OLS of the outcome on `(1, tfp, year dummies)` with HC1 standard errors.
pub fn outcome_regression(rows: &[TfpRow], outcome: Outcome) -> Result<OutcomeFit> {
    let used: Vec<(&TfpRow, f64)> = rows.iter().filter_map(|r| outcome.value(r).map(|v| (r, v))).collect();
    if used.is_empty() {
        return Err(Error::NoUsableObservations(format!(
            "outcome {} has no values",
            outcome.name()
        )));
    }
    if used.iter().all(|(_, v)| *v == used[0].1) {
        return Err(Error::NoUsableObservations(format!(
            "outcome {} is constant",
            outcome.name()
        )));
    }
    let years: Vec<i32> = used.iter().map(|(r, _)| r.year).collect();
    let mut levels = years.clone();
    levels.sort_unstable();
    levels.dedup();
    let tfp: Vec<f64> = used.iter().map(|(r, _)| r.tfp).collect();
    let x: DMatrix<f64> = hstack(&[&ones(used.len()), &column(&tfp), &year_dummies(&years, &levels)]);
    let y = DVector::from_iterator(used.len(), used.iter().map(|(_, v)| *v));
    let fit = ols(&x, &y)?;
    let cov = hc1_covariance(&x, &fit);
    let sd = sample_var(&tfp).map(f64::sqrt).unwrap_or(f64::NAN);
    let (pi, se) = (fit.coef[1], cov[(1, 1)].max(0.0).sqrt());
    Ok(OutcomeFit {
        outcome: outcome.name().into(),
        pi_hat: pi,
        se,
        pi_std: pi * sd,
        se_std: se * sd,
        n: used.len(),
        outcome_mean: y.mean(),
    })
}

pub fn write_tfp_csv<W: Write>(rows: &[TfpRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["firm_id", "year", "tfp", "exit", "growth_1_2", "growth_1_5"])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.firm_id.clone(),
            r.year.to_string(),
            fmt_f64(r.tfp),
            r.exit.map(|e| u8::from(e).to_string()).unwrap_or_default(),
            opt(r.growth_1_2),
            opt(r.growth_1_5),
        ])?;
    }
    w.flush()?;
    Ok(())
}
