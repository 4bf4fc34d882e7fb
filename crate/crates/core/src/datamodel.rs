//! Panel data types, validation, lead joins and CSV ingestion.
//!
//! Rows hold logs. Ingestion takes levels and rejects non-positive values
//! with a per-row reason code.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// A fitted lognormal belief about a one-year-ahead variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefDistribution {
    pub mu: f64,
    pub sigma2: f64,
    pub fit_mad: Option<f64>,
}

impl BeliefDistribution {
    pub fn new(mu: f64, sigma2: f64) -> Self {
        Self {
            mu,
            sigma2,
            fit_mad: None,
        }
    }
}

/// Beliefs attached to a firm-year, keyed by variable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Beliefs {
    pub y: Option<BeliefDistribution>,
    pub l: Option<BeliefDistribution>,
    pub m: Option<BeliefDistribution>,
}

impl Beliefs {
    pub fn is_empty(&self) -> bool {
        self.y.is_none() && self.l.is_none() && self.m.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmYear {
    pub firm_id: String,
    pub year: i32,
    pub y: f64,
    pub l: f64,
    pub k: f64,
    pub m: Option<f64>,
    pub inv: Option<f64>,
    /// Log capital at the start of the next year, `ln((1 - delta) K + I)`.
    /// Falls back to the next row's `k` when absent.
    pub k_next: Option<f64>,
    pub beliefs: Beliefs,
    pub aux: BTreeMap<String, f64>,
}

impl FirmYear {
    pub fn new(firm_id: impl Into<String>, year: i32, y: f64, l: f64, k: f64) -> Self {
        Self {
            firm_id: firm_id.into(),
            year,
            y,
            l,
            k,
            m: None,
            inv: None,
            k_next: None,
            beliefs: Beliefs::default(),
            aux: BTreeMap::new(),
        }
    }
}

/// Fields an estimator may require of a row.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Field {
    Y,
    L,
    K,
    M,
    Inv,
    KNext,
    BeliefY,
    BeliefL,
    BeliefM,
    Aux(String),
}

impl Field {
    pub fn name(&self) -> String {
        match self {
            Field::Y => "y".into(),
            Field::L => "l".into(),
            Field::K => "k".into(),
            Field::M => "m".into(),
            Field::Inv => "inv".into(),
            Field::KNext => "k_next".into(),
            Field::BeliefY => "belief_y".into(),
            Field::BeliefL => "belief_l".into(),
            Field::BeliefM => "belief_m".into(),
            Field::Aux(name) => name.clone(),
        }
    }

    fn present(&self, row: &FirmYear) -> bool {
        let belief_ok = |b: &Option<BeliefDistribution>| {
            b.is_some_and(|b| b.mu.is_finite() && b.sigma2.is_finite() && b.sigma2 >= 0.0)
        };
        match self {
            Field::Y => row.y.is_finite(),
            Field::L => row.l.is_finite(),
            Field::K => row.k.is_finite(),
            Field::M => row.m.is_some_and(f64::is_finite),
            Field::Inv => row.inv.is_some_and(f64::is_finite),
            Field::KNext => row.k_next.is_some_and(f64::is_finite),
            Field::BeliefY => belief_ok(&row.beliefs.y),
            Field::BeliefL => belief_ok(&row.beliefs.l),
            Field::BeliefM => belief_ok(&row.beliefs.m),
            Field::Aux(name) => row.aux.get(name).is_some_and(|v| v.is_finite()),
        }
    }
}

/// Firm-years sorted by `(firm_id, year)` with unique keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    rows: Vec<FirmYear>,
}

impl Panel {
    /// Sorts rows and rejects duplicate `(firm_id, year)` keys.
    pub fn new(mut rows: Vec<FirmYear>) -> Result<Self> {
        rows.sort_by(|a, b| a.firm_id.cmp(&b.firm_id).then(a.year.cmp(&b.year)));
        for w in rows.windows(2) {
            if w[0].firm_id == w[1].firm_id && w[0].year == w[1].year {
                return Err(Error::DuplicateKey {
                    firm: w[0].firm_id.clone(),
                    year: w[0].year,
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[FirmYear] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<FirmYear> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct years in ascending order.
    pub fn years(&self) -> Vec<i32> {
        let set: BTreeSet<i32> = self.rows.iter().map(|r| r.year).collect();
        set.into_iter().collect()
    }

    pub fn n_firms(&self) -> usize {
        self.firm_ranges().len()
    }

    /// Index ranges of consecutive rows belonging to one firm.
    pub fn firm_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].firm_id != self.rows[start].firm_id {
                if i > start {
                    out.push(start..i);
                }
                start = i;
            }
        }
        out
    }

    /// Fills missing `k_next` from the next row of the same firm when it is exactly one year later.
    pub fn with_k_next_from_leads(mut self) -> Self {
        for i in 0..self.rows.len().saturating_sub(1) {
            if self.rows[i].k_next.is_none()
                && self.rows[i + 1].firm_id == self.rows[i].firm_id
                && self.rows[i + 1].year == self.rows[i].year + 1
            {
                self.rows[i].k_next = Some(self.rows[i + 1].k);
            }
        }
        self
    }
}

/// Rows dropped by validation, counted by reason (`missing_<field>`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DropReport {
    pub reasons: BTreeMap<String, usize>,
}

impl DropReport {
    pub fn total(&self) -> usize {
        self.reasons.values().sum()
    }
}

/// Keeps rows whose required fields are all present and finite.
///
/// A row missing several fields is counted once, under the first missing field in `requirements` order.
pub fn validate_panel(panel: &Panel, requirements: &[Field]) -> Result<(Panel, DropReport)> {
    let mut report = DropReport::default();
    let mut kept = Vec::with_capacity(panel.len());
    for row in panel.rows() {
        match requirements.iter().find(|f| !f.present(row)) {
            Some(f) => *report.reasons.entry(format!("missing_{}", f.name())).or_default() += 1,
            None => kept.push(row.clone()),
        }
    }
    if kept.is_empty() {
        return Err(Error::NoUsableObservations(format!(
            "all {} rows dropped ({:?})",
            panel.len(),
            report.reasons
        )));
    }
    if report.total() > 0 {
        log::warn!("validation dropped {} rows: {:?}", report.total(), report.reasons);
    }
    Ok((Panel { rows: kept }, report))
}

/// Pairs rows of the same firm exactly `horizon` years apart.
pub fn join_lead(panel: &Panel, horizon: i32) -> Vec<(&FirmYear, &FirmYear)> {
    assert!(horizon >= 1, "horizon must be at least 1");
    let mut out = Vec::new();
    for range in panel.firm_ranges() {
        let rows = &panel.rows[range];
        for (i, cur) in rows.iter().enumerate() {
            if let Some(lead) = rows[i + 1..]
                .iter()
                .take_while(|r| r.year <= cur.year + horizon)
                .find(|r| r.year == cur.year + horizon)
            {
                out.push((cur, lead));
            }
        }
    }
    out
}

/// Year dummy columns for `years`, omitting the first of `levels`.
pub fn year_dummies(years: &[i32], levels: &[i32]) -> DMatrix<f64> {
    let cols = levels.len().saturating_sub(1);
    DMatrix::from_fn(
        years.len(),
        cols,
        |i, j| {
            if years[i] == levels[j + 1] {
                1.0
            } else {
                0.0
            }
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    CobbDouglas,
    Translog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondOrder {
    pub beta_l2: f64,
    pub beta_k2: f64,
    pub beta_lk: f64,
}

/// Production function coefficients. `second_order` is present exactly for translog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductionSpec {
    pub beta0: f64,
    pub beta_l: f64,
    pub beta_k: f64,
    #[serde(default)]
    pub second_order: Option<SecondOrder>,
    #[serde(default)]
    pub year_effects: BTreeMap<i32, f64>,
}

impl ProductionSpec {
    pub fn cobb_douglas(beta_l: f64, beta_k: f64) -> Self {
        Self {
            beta0: 0.0,
            beta_l,
            beta_k,
            second_order: None,
            year_effects: BTreeMap::new(),
        }
    }

    pub fn family(&self) -> Family {
        if self.second_order.is_some() {
            Family::Translog
        } else {
            Family::CobbDouglas
        }
    }

    /// Input part of log output, excluding intercept and year effects.
    pub fn inputs(&self, l: f64, k: f64) -> f64 {
        let mut f = self.beta_l * l + self.beta_k * k;
        if let Some(s) = &self.second_order {
            f += s.beta_l2 * l * l + s.beta_k2 * k * k + s.beta_lk * l * k;
        }
        f
    }

    /// Elasticities `(dy/dl, dy/dk)` at a point.
    pub fn elasticities(&self, l: f64, k: f64) -> (f64, f64) {
        match &self.second_order {
            None => (self.beta_l, self.beta_k),
            Some(s) => (
                self.beta_l + 2.0 * s.beta_l2 * l + s.beta_lk * k,
                self.beta_k + 2.0 * s.beta_k2 * k + s.beta_lk * l,
            ),
        }
    }

    pub fn coefficient_names(&self) -> Vec<&'static str> {
        match self.family() {
            Family::CobbDouglas => vec!["beta_l", "beta_k"],
            Family::Translog => vec!["beta_l", "beta_k", "beta_l2", "beta_k2", "beta_lk"],
        }
    }

    pub fn coefficients(&self) -> Vec<f64> {
        let mut v = vec![self.beta_l, self.beta_k];
        if let Some(s) = &self.second_order {
            v.extend([s.beta_l2, s.beta_k2, s.beta_lk]);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "NPR")]
    Npr,
    #[serde(rename = "NPR_Translog")]
    NprTranslog,
    #[serde(rename = "NPR_BiasInvariant")]
    NprBiasInvariant,
    #[serde(rename = "NPR_BiasCovariate")]
    NprBiasCovariate,
    Wald,
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "OLS_FD")]
    OlsFd,
    #[serde(rename = "OLS_FE")]
    OlsFe,
    #[serde(rename = "OP")]
    Op,
    #[serde(rename = "LP")]
    Lp,
    #[serde(rename = "ACF")]
    Acf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub spec: ProductionSpec,
    /// Ordered like `spec.coefficient_names()`.
    pub std_errors: Option<Vec<f64>>,
    /// Covariance of the coefficients in the same order, when available.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: Method,
    pub n_obs: usize,
    pub n_firms: usize,
}

impl EstimationResult {
    pub fn set_covariance(&mut self, cov: &DMatrix<f64>) {
        self.std_errors = Some((0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect());
        self.covariance = Some(
            (0..cov.nrows())
                .map(|i| (0..cov.ncols()).map(|j| cov[(i, j)]).collect())
                .collect(),
        );
    }

    /// Test of `beta_l + beta_k = 1` by the delta method; `se` and `p_value` need the covariance.
    pub fn crs_test(&self) -> CrsTest {
        let sum = self.spec.beta_l + self.spec.beta_k;
        let var = self
            .covariance
            .as_ref()
            .filter(|c| c.len() >= 2)
            .map(|c| c[0][0] + c[1][1] + 2.0 * c[0][1]);
        let se = var.filter(|v| *v >= 0.0 && v.is_finite()).map(f64::sqrt);
        let p_value = se.filter(|s| *s > 0.0).map(|s| two_sided_p((sum - 1.0) / s));
        CrsTest { sum, se, p_value }
    }

    /// Joint Wald test that the translog second-order terms are zero: `(statistic, p-value)`.
    pub fn second_order_wald(&self) -> Option<(f64, f64)> {
        let c = self.covariance.as_ref().filter(|c| c.len() == 5)?;
        let b = self.spec.coefficients();
        let v = DMatrix::from_fn(3, 3, |i, j| c[i + 2][j + 2]);
        let bv = nalgebra::DVector::from_fn(3, |i, _| b[i + 2]);
        let inv = v.try_inverse()?;
        let stat = (bv.transpose() * inv * &bv)[(0, 0)];
        let chi = ChiSquared::new(3.0).ok()?;
        Some((stat, 1.0 - chi.cdf(stat)))
    }
}

/// Constant-returns test on `beta_l + beta_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrsTest {
    pub sum: f64,
    pub se: Option<f64>,
    pub p_value: Option<f64>,
}

fn two_sided_p(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    2.0 * (1.0 - n.cdf(z.abs()))
}

/// Column order of the panel CSV schema.
pub const PANEL_COLUMNS: [&str; 14] = [
    "firm_id",
    "year",
    "output",
    "labor",
    "capital",
    "materials",
    "investment",
    "belief_mu_y",
    "belief_sigma2_y",
    "belief_mu_l",
    "belief_sigma2_l",
    "belief_mu_m",
    "belief_sigma2_m",
    "mgmt",
];

/// Optional extension column holding next-year capital in levels.
pub const CAPITAL_NEXT_COLUMN: &str = "capital_next";

/// A row rejected during CSV ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
}

/// Reads a panel CSV with levels, logging monetary and labor columns.
///
/// Rows with a non-positive or unparsable level are rejected with a reason code such as
/// `nonpositive_output`. Optional level columns that are non-positive become missing and are
/// also reported. Unknown columns are read into `aux`.
pub fn read_panel_csv<R: Read>(reader: R) -> Result<(Panel, Vec<RejectedRow>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(c_firm), Some(c_year)) = (col("firm_id"), col("year")) else {
        return Err(Error::InvalidInput("panel CSV needs firm_id and year columns".into()));
    };
    for required in ["output", "labor", "capital"] {
        if col(required).is_none() {
            return Err(Error::InvalidInput(format!("panel CSV lacks column `{required}`")));
        }
    }
    let known: BTreeSet<&str> = PANEL_COLUMNS.iter().copied().chain([CAPITAL_NEXT_COLUMN]).collect();
    let aux_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !known.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = idx + 2;
        let cell = |name: &str| -> Option<&str> { col(name).and_then(|c| record.get(c)).filter(|s| !s.is_empty()) };
        let number = |name: &str| -> std::result::Result<Option<f64>, String> {
            match cell(name) {
                None => Ok(None),
                Some(s) => s.parse::<f64>().map(Some).map_err(|_| format!("unparsable_{name}")),
            }
        };
        let parsed = (|| -> std::result::Result<FirmYear, String> {
            let firm = record.get(c_firm).unwrap_or("").to_string();
            if firm.is_empty() {
                return Err("missing_firm_id".into());
            }
            let year: i32 = record
                .get(c_year)
                .unwrap_or("")
                .parse()
                .map_err(|_| "unparsable_year".to_string())?;
            let level_log = |name: &str| -> std::result::Result<f64, String> {
                match number(name)? {
                    None => Err(format!("missing_{name}")),
                    Some(v) if v > 0.0 && v.is_finite() => Ok(v.ln()),
                    Some(_) => Err(format!("nonpositive_{name}")),
                }
            };
            let y = level_log("output")?;
            let l = level_log("labor")?;
            let k = level_log("capital")?;
            let mut row = FirmYear::new(firm, year, y, l, k);
            let optional = |name: &str| -> std::result::Result<Option<f64>, String> {
                match number(name)? {
                    None => Ok(None),
                    Some(v) if v > 0.0 && v.is_finite() => Ok(Some(v.ln())),
                    Some(_) => {
                        log::warn!("line {line}: nonpositive_{name}; treated as missing");
                        Ok(None)
                    }
                }
            };
            row.m = optional("materials")?;
            row.inv = optional("investment")?;
            row.k_next = optional(CAPITAL_NEXT_COLUMN)?;
            let belief = |mu: &str, s2: &str| -> std::result::Result<Option<BeliefDistribution>, String> {
                match (number(mu)?, number(s2)?) {
                    (Some(m), Some(v)) if v >= 0.0 => Ok(Some(BeliefDistribution::new(m, v))),
                    (Some(_), Some(_)) => Err(format!("negative_{s2}")),
                    _ => Ok(None),
                }
            };
            row.beliefs.y = belief("belief_mu_y", "belief_sigma2_y")?;
            row.beliefs.l = belief("belief_mu_l", "belief_sigma2_l")?;
            row.beliefs.m = belief("belief_mu_m", "belief_sigma2_m")?;
            if let Some(v) = number("mgmt")? {
                row.aux.insert("mgmt".into(), v);
            }
            for (c, name) in &aux_cols {
                if let Some(s) = record.get(*c).filter(|s| !s.is_empty()) {
                    let v = s.parse::<f64>().map_err(|_| format!("unparsable_{name}"))?;
                    row.aux.insert(name.clone(), v);
                }
            }
            Ok(row)
        })();
        match parsed {
            Ok(row) => rows.push(row),
            Err(reason) => rejected.push(RejectedRow { line, reason }),
        }
    }
    if !rejected.is_empty() {
        log::warn!("{} panel rows rejected at ingestion", rejected.len());
    }
    Ok((Panel::new(rows)?, rejected))
}

/// Formats a float with 17 significant digits, or an empty cell for `None`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Writes a panel in the CSV schema, exponentiating logs back to levels.
///
/// `capital_next` and every aux key other than `mgmt` are appended after the schema columns.
pub fn write_panel_csv<W: Write>(panel: &Panel, writer: W) -> Result<()> {
    let aux_keys: BTreeSet<&str> = panel
        .rows()
        .iter()
        .flat_map(|r| r.aux.keys().map(String::as_str))
        .filter(|k| *k != "mgmt")
        .collect();
    let has_k_next = panel.rows().iter().any(|r| r.k_next.is_some());
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = PANEL_COLUMNS.to_vec();
    if has_k_next {
        header.push(CAPITAL_NEXT_COLUMN);
    }
    header.extend(aux_keys.iter().copied());
    wtr.write_record(&header)?;
    for r in panel.rows() {
        let b = &r.beliefs;
        let mut rec = vec![
            r.firm_id.clone(),
            r.year.to_string(),
            fmt_f64(r.y.exp()),
            fmt_f64(r.l.exp()),
            fmt_f64(r.k.exp()),
            fmt_opt(r.m.map(f64::exp)),
            fmt_opt(r.inv.map(f64::exp)),
            fmt_opt(b.y.map(|d| d.mu)),
            fmt_opt(b.y.map(|d| d.sigma2)),
            fmt_opt(b.l.map(|d| d.mu)),
            fmt_opt(b.l.map(|d| d.sigma2)),
            fmt_opt(b.m.map(|d| d.mu)),
            fmt_opt(b.m.map(|d| d.sigma2)),
            fmt_opt(r.aux.get("mgmt").copied()),
        ];
        if has_k_next {
            rec.push(fmt_opt(r.k_next.map(f64::exp)));
        }
        for key in &aux_keys {
            rec.push(fmt_opt(r.aux.get(*key).copied()));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crs_p_value_extremes() {
        let mut r = EstimationResult {
            spec: ProductionSpec::cobb_douglas(0.5, 0.5),
            std_errors: None,
            covariance: None,
            objective: 0.0,
            iterations: 0,
            converged: true,
            method: Method::Ols,
            n_obs: 1,
            n_firms: 1,
        };
        assert!(r.crs_test().p_value.is_none());
        r.set_covariance(&DMatrix::from_row_slice(2, 2, &[1e-8, 0.0, 0.0, 1e-8]));
        assert!(r.crs_test().p_value.unwrap() > 0.999);
        r.spec.beta_k = 0.6;
        assert!(r.crs_test().p_value.unwrap() < 1e-6);
    }

    fn row(firm: &str, year: i32) -> FirmYear {
        FirmYear::new(firm, year, 1.0, 0.5, 2.0)
    }

    #[test]
    fn missing_materials_is_dropped_with_reason() {
        let panel = Panel::new(vec![row("a", 2016)]).unwrap();
        let err = validate_panel(&panel, &[Field::Y, Field::L, Field::K, Field::M]).unwrap_err();
        assert!(matches!(err, Error::NoUsableObservations(_)));

        let mut ok = row("b", 2016);
        ok.m = Some(1.0);
        let panel = Panel::new(vec![row("a", 2016), ok]).unwrap();
        let (kept, report) = validate_panel(&panel, &[Field::Y, Field::L, Field::K, Field::M]).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(report.reasons.get("missing_m"), Some(&1));
    }

    #[test]
    fn complete_rows_are_kept() {
        let panel = Panel::new(vec![row("a", 1), row("a", 2), row("b", 1)]).unwrap();
        let (kept, report) = validate_panel(&panel, &[Field::Y, Field::L, Field::K]).unwrap();
        assert_eq!(kept.len(), 3);
        assert_eq!(report.total(), 0);
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = Panel::new(vec![row("a", 2016), row("a", 2016)]).unwrap_err();
        assert!(err.to_string().contains("duplicate key"));
    }

    #[test]
    fn lead_pairs() {
        let p = Panel::new(vec![row("a", 2016), row("a", 2017)]).unwrap();
        let pairs = join_lead(&p, 1);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].0.year, pairs[0].1.year), (2016, 2017));

        let p = Panel::new(vec![row("a", 2016), row("a", 2018)]).unwrap();
        assert!(join_lead(&p, 1).is_empty());

        let p = Panel::new(vec![row("a", 2016), row("a", 2017), row("a", 2018)]).unwrap();
        let pairs = join_lead(&p, 2);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].0.year, pairs[0].1.year), (2016, 2018));
    }

    #[test]
    fn csv_round_trip_keeps_logs() {
        let mut r = row("f1", 3);
        r.m = Some(0.25);
        r.k_next = Some(2.5);
        r.beliefs.l = Some(BeliefDistribution::new(0.4, 0.01));
        r.aux.insert("mgmt".into(), -0.3);
        let panel = Panel::new(vec![r.clone(), row("f2", 3)]).unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&panel, &mut buf).unwrap();
        let (back, rejected) = read_panel_csv(buf.as_slice()).unwrap();
        assert!(rejected.is_empty());
        let b = &back.rows()[0];
        assert!((b.y - r.y).abs() < 1e-14);
        assert!((b.m.unwrap() - 0.25).abs() < 1e-14);
        assert!((b.k_next.unwrap() - 2.5).abs() < 1e-14);
        assert_eq!(b.beliefs.l, r.beliefs.l);
        assert_eq!(b.aux.get("mgmt"), Some(&-0.3));
        assert!(back.rows()[1].m.is_none());
    }

    #[test]
    fn nonpositive_levels_are_rejected_with_reason() {
        let csv = "firm_id,year,output,labor,capital\na,1,0,1,1\nb,1,2,1,1\nc,1,2,-1,1\n";
        let (panel, rejected) = read_panel_csv(csv.as_bytes()).unwrap();
        assert_eq!(panel.len(), 1);
        let reasons: Vec<_> = rejected.iter().map(|r| r.reason.as_str()).collect();
        assert_eq!(reasons, ["nonpositive_output", "nonpositive_labor"]);
    }

    #[test]
    fn k_next_filled_from_consecutive_lead() {
        let mut a2 = row("a", 2);
        a2.k = 3.0;
        let p = Panel::new(vec![row("a", 1), a2, row("a", 4)])
            .unwrap()
            .with_k_next_from_leads();
        assert_eq!(p.rows()[0].k_next, Some(3.0));
        assert_eq!(p.rows()[1].k_next, None);
    }
}
