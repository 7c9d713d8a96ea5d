//! Region identifiers, periods and the region × period count panel.

use std::collections::HashMap;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque region key (FIPS-like code).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RegionId(String);

impl RegionId {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        if code.trim().is_empty() {
            return Err(Error::InvalidData("empty region id".into()));
        }
        Ok(RegionId(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for RegionId {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        RegionId::new(value)
    }
}

impl From<RegionId> for String {
    fn from(value: RegionId) -> Self {
        value.0
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A closed date range `[start, end]` with a display label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub label: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Period {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidData(format!(
                "period end {end} precedes start {start}"
            )));
        }
        Ok(Period {
            label: start.format("%Y-%m-%d").to_string(),
            start,
            end,
        })
    }

    /// Consecutive periods of `length_days` days starting at `start`.
    pub fn sequence(start: NaiveDate, length_days: u32, n_periods: usize) -> Result<Vec<Period>> {
        if length_days == 0 || n_periods == 0 {
            return Err(Error::InvalidData(
                "period length and count must be positive".into(),
            ));
        }
        let step = chrono::Days::new(length_days as u64);
        let mut out = Vec::with_capacity(n_periods);
        let mut cursor = start;
        for _ in 0..n_periods {
            let next = cursor
                .checked_add_days(step)
                .ok_or_else(|| Error::InvalidData("period dates overflow".into()))?;
            out.push(Period::new(cursor, next.pred_opt().unwrap_or(next))?);
            cursor = next;
        }
        Ok(out)
    }
}

/// Named time-invariant numeric column aligned with `Panel::regions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub values: Vec<f64>,
}

/// Constructor input for [`Panel`]. Matrices are `[region][period]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelParts {
    pub regions: Vec<RegionId>,
    pub periods: Vec<Period>,
    pub cases: Vec<Vec<u64>>,
    pub deaths: Vec<Vec<u64>>,
    /// Unclamped per-period changes; `None` means identical to the clamped counts.
    pub signed_cases: Option<Vec<Vec<i64>>>,
    pub signed_deaths: Option<Vec<Vec<i64>>>,
    pub population: Vec<u64>,
    pub groups: Vec<String>,
    pub covariates: Vec<Covariate>,
}

/// Region × period panel of new counts with populations, group nesting and
/// time-invariant covariates. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PanelParts", into = "PanelParts")]
pub struct Panel {
    regions: Vec<RegionId>,
    periods: Vec<Period>,
    cases: Vec<Vec<u64>>,
    deaths: Vec<Vec<u64>>,
    signed_cases: Vec<Vec<i64>>,
    signed_deaths: Vec<Vec<i64>>,
    population: Vec<u64>,
    groups: Vec<String>,
    covariates: Vec<Covariate>,
    index: HashMap<RegionId, usize>,
}

fn check_shape<T>(name: &str, m: &[Vec<T>], rows: usize, cols: usize) -> Result<()> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidData(format!(
            "{name} matrix must be {rows} regions x {cols} periods"
        )));
    }
    Ok(())
}

fn to_signed(m: &[Vec<u64>]) -> Result<Vec<Vec<i64>>> {
    m.iter()
        .map(|row| {
            row.iter()
                .map(|&v| {
                    i64::try_from(v).map_err(|_| Error::InvalidData("count exceeds i64".into()))
                })
                .collect()
        })
        .collect()
}

impl TryFrom<PanelParts> for Panel {
    type Error = Error;
    fn try_from(parts: PanelParts) -> Result<Self> {
        Panel::new(parts)
    }
}

impl From<Panel> for PanelParts {
    fn from(p: Panel) -> Self {
        PanelParts {
            regions: p.regions,
            periods: p.periods,
            cases: p.cases,
            deaths: p.deaths,
            signed_cases: Some(p.signed_cases),
            signed_deaths: Some(p.signed_deaths),
            population: p.population,
            groups: p.groups,
            covariates: p.covariates,
        }
    }
}

impl Panel {
    pub fn new(parts: PanelParts) -> Result<Self> {
        let n = parts.regions.len();
        let t = parts.periods.len();
        if n == 0 || t == 0 {
            return Err(Error::InvalidData("panel needs at least one region and period".into()));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, r) in parts.regions.iter().enumerate() {
            if index.insert(r.clone(), i).is_some() {
                return Err(Error::InvalidData(format!("duplicate region `{r}`")));
            }
        }
        for w in parts.periods.windows(2) {
            if w[1].start <= w[0].end {
                return Err(Error::InvalidData(format!(
                    "periods `{}` and `{}` overlap or are out of order",
                    w[0].label, w[1].label
                )));
            }
        }
        check_shape("cases", &parts.cases, n, t)?;
        check_shape("deaths", &parts.deaths, n, t)?;
        let signed_cases = match parts.signed_cases {
            Some(m) => m,
            None => to_signed(&parts.cases)?,
        };
        let signed_deaths = match parts.signed_deaths {
            Some(m) => m,
            None => to_signed(&parts.deaths)?,
        };
        check_shape("signed cases", &signed_cases, n, t)?;
        check_shape("signed deaths", &signed_deaths, n, t)?;
        if parts.population.len() != n || parts.groups.len() != n {
            return Err(Error::InvalidData(
                "population and group must be given for every region".into(),
            ));
        }
        if let Some(i) = parts.population.iter().position(|&p| p == 0) {
            return Err(Error::InvalidData(format!(
                "region `{}` has zero population",
                parts.regions[i]
            )));
        }
        if let Some(i) = parts.groups.iter().position(|g| g.trim().is_empty()) {
            return Err(Error::InvalidData(format!(
                "region `{}` has no group",
                parts.regions[i]
            )));
        }
        for c in &parts.covariates {
            if c.values.len() != n {
                return Err(Error::InvalidData(format!(
                    "covariate `{}` has {} values for {n} regions",
                    c.name,
                    c.values.len()
                )));
            }
        }
        Ok(Panel {
            regions: parts.regions,
            periods: parts.periods,
            cases: parts.cases,
            deaths: parts.deaths,
            signed_cases,
            signed_deaths,
            population: parts.population,
            groups: parts.groups,
            covariates: parts.covariates,
            index,
        })
    }

    pub fn regions(&self) -> &[RegionId] {
        &self.regions
    }

    pub fn periods(&self) -> &[Period] {
        &self.periods
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn region_index(&self, id: &RegionId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn cases(&self) -> &[Vec<u64>] {
        &self.cases
    }

    pub fn deaths(&self) -> &[Vec<u64>] {
        &self.deaths
    }

    pub fn signed_cases(&self) -> &[Vec<i64>] {
        &self.signed_cases
    }

    pub fn signed_deaths(&self) -> &[Vec<i64>] {
        &self.signed_deaths
    }

    pub fn population(&self) -> &[u64] {
        &self.population
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.covariates.iter().find(|c| c.name == name)
    }

    /// Copy of this panel with one more covariate column appended.
    pub fn with_covariate(&self, name: impl Into<String>, values: Vec<f64>) -> Result<Panel> {
        let name = name.into();
        if self.covariate(&name).is_some() {
            return Err(Error::InvalidData(format!("covariate `{name}` already exists")));
        }
        let mut parts = PanelParts::from(self.clone());
        parts.covariates.push(Covariate { name, values });
        Panel::new(parts)
    }
}
