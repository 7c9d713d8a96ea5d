//! Declarative model specification and design-table assembly.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::{LagColumnSet, LagKind};
use crate::panel::Panel;

/// Name of the automatically added constant column.
pub const INTERCEPT: &str = "intercept";
/// Predictor token that expands to one dummy per non-reference period.
pub const PERIOD_DUMMIES: &str = "period_dummies";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    #[default]
    Deaths,
    Cases,
}

impl FromStr for Outcome {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deaths" => Ok(Outcome::Deaths),
            "cases" => Ok(Outcome::Cases),
            other => Err(Error::Config(format!("unknown outcome `{other}`"))),
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Deaths => "deaths",
            Outcome::Cases => "cases",
        })
    }
}

/// Panel rows (region × period) or one row per region with cumulative counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Panel,
    CrossSectional,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "panel" => Ok(Mode::Panel),
            "cross-sectional" | "cross_sectional" => Ok(Mode::CrossSectional),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Panel => "panel",
            Mode::CrossSectional => "cross-sectional",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomLevel {
    Group,
    Region,
}

impl FromStr for RandomLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group" | "state" => Ok(RandomLevel::Group),
            "region" | "county" => Ok(RandomLevel::Region),
            other => Err(Error::Config(format!("unknown random level `{other}`"))),
        }
    }
}

impl fmt::Display for RandomLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RandomLevel::Group => "group",
            RandomLevel::Region => "region",
        })
    }
}

/// What to do with rows whose used cells are missing (e.g. a filtered
/// network lag with no retained flow).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Error,
    DropRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcome: Outcome,
    /// Lag names (`network_lag`, ...), covariate names, [`PERIOD_DUMMIES`]
    /// or individual `period_<label>` dummies.
    pub predictors: Vec<String>,
    /// Add `ln(population)` as an offset.
    pub offset: bool,
    /// Outermost first, e.g. `[Group, Region]`.
    pub random_levels: Vec<RandomLevel>,
    pub mode: Mode,
    #[serde(default)]
    pub missing: MissingPolicy,
}

impl ModelSpec {
    pub fn new(outcome: Outcome, predictors: &[&str]) -> Self {
        ModelSpec {
            outcome,
            predictors: predictors.iter().map(|s| s.to_string()).collect(),
            offset: true,
            random_levels: vec![],
            mode: Mode::Panel,
            missing: MissingPolicy::Error,
        }
    }

    pub fn with_random_levels(mut self, levels: &[RandomLevel]) -> Self {
        self.random_levels = levels.to_vec();
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.random_levels.as_slice() {
            [] | [_] | [RandomLevel::Group, RandomLevel::Region] => {}
            other => {
                return Err(Error::Config(format!(
                    "random levels must be a nested prefix of [group, region], got {other:?}"
                )))
            }
        }
        if self.mode == Mode::CrossSectional && self.random_levels.contains(&RandomLevel::Region) {
            return Err(Error::Config(
                "cross-sectional rows are regions; a region-level random intercept is not identified"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Identifies the panel cell behind a design row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowKey {
    pub region: String,
    /// `None` in cross-sectional mode.
    pub period: Option<String>,
}

/// Model-ready table. Column 0 of `x` is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignTable {
    pub columns: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
    /// Optional per-row likelihood weights (fixed-effects fits only).
    pub weights: Option<Vec<f64>>,
    pub group: Vec<usize>,
    pub group_labels: Vec<String>,
    pub region: Vec<usize>,
    pub region_labels: Vec<String>,
    /// Index into the panel's periods (0 in cross-sectional mode).
    pub period: Vec<usize>,
    pub rows: Vec<RowKey>,
}

impl DesignTable {
    /// Table from explicit columns with every row its own region and one group.
    /// Mostly useful for tests and for the causal module.
    pub fn from_columns(
        names: &[&str],
        columns: &[Vec<f64>],
        y: Vec<f64>,
        offset: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if names.len() != columns.len() || columns.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidData("column names and lengths must agree".into()));
        }
        let mut all_names = vec![INTERCEPT.to_string()];
        all_names.extend(names.iter().map(|s| s.to_string()));
        let x = DMatrix::from_fn(n, columns.len() + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                columns[j - 1][i]
            }
        });
        let table = DesignTable {
            columns: all_names,
            x,
            offset: offset.unwrap_or_else(|| vec![0.0; n]),
            y,
            weights: None,
            group: vec![0; n],
            group_labels: vec!["all".into()],
            region: (0..n).collect(),
            region_labels: (0..n).map(|i| i.to_string()).collect(),
            period: vec![0; n],
            rows: (0..n)
                .map(|i| RowKey {
                    region: i.to_string(),
                    period: None,
                })
                .collect(),
        };
        table.validate()?;
        Ok(table)
    }

    pub fn with_groups(mut self, group: Vec<usize>) -> Result<Self> {
        if group.len() != self.n_rows() {
            return Err(Error::InvalidData("group ids must cover every row".into()));
        }
        let n_groups = group.iter().max().map_or(0, |m| m + 1);
        self.group_labels = (0..n_groups).map(|g| g.to_string()).collect();
        self.group = group;
        Ok(self)
    }

    pub fn with_regions(mut self, region: Vec<usize>) -> Result<Self> {
        if region.len() != self.n_rows() {
            return Err(Error::InvalidData("region ids must cover every row".into()));
        }
        let n_regions = region.iter().max().map_or(0, |m| m + 1);
        self.region_labels = (0..n_regions).map(|g| g.to_string()).collect();
        self.region = region;
        Ok(self)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n_rows() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidData("weights must be finite, nonnegative, one per row".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.column_index(name)
            .map(|j| self.x.column(j).iter().copied().collect())
    }

    /// Copy with column `name` replaced by `values`.
    pub fn with_column(&self, name: &str, values: &[f64]) -> Result<Self> {
        let j = self
            .column_index(name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        if values.len() != self.n_rows() {
            return Err(Error::InvalidData(format!("column `{name}` length mismatch")));
        }
        let mut out = self.clone();
        for (i, v) in values.iter().enumerate() {
            out.x[(i, j)] = *v;
        }
        Ok(out)
    }

    /// Copy without column `name`.
    pub fn without_column(&self, name: &str) -> Result<Self> {
        let j = self
            .column_index(name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        let mut out = self.clone();
        out.x = self.x.clone().remove_column(j);
        out.columns.remove(j);
        Ok(out)
    }

    /// Checks shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_rows();
        if self.x.nrows() != n
            || self.x.ncols() != self.columns.len()
            || self.offset.len() != n
            || self.group.len() != n
            || self.region.len() != n
            || self.rows.len() != n
        {
            return Err(Error::InvalidData("design table dimensions disagree".into()));
        }
        let mut offenders = Vec::new();
        for i in 0..n {
            for j in 0..self.x.ncols() {
                if !self.x[(i, j)].is_finite() {
                    offenders.push(format!("row {i} column `{}`", self.columns[j]));
                }
            }
            if !self.y[i].is_finite() || !self.offset[i].is_finite() {
                offenders.push(format!("row {i} outcome/offset"));
            }
        }
        if !offenders.is_empty() {
            return Err(Error::MissingValues { offenders });
        }
        Ok(())
    }

    /// Deterministic CSV rendering (used for artifacts and purity checks).
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("region,period,group,y,offset");
        for c in &self.columns {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for i in 0..self.n_rows() {
            let _ = write!(
                s,
                "{},{},{},{},{}",
                self.rows[i].region,
                self.rows[i].period.as_deref().unwrap_or(""),
                self.group_labels[self.group[i]],
                self.y[i],
                self.offset[i]
            );
            for j in 0..self.n_cols() {
                let _ = write!(s, ",{}", self.x[(i, j)]);
            }
            s.push('\n');
        }
        s
    }
}

enum Source<'a> {
    Lag(LagKind),
    Covariate(&'a [f64]),
    Dummy(usize),
}

fn dummy_name(label: &str) -> String {
    format!("period_{label}")
}

/// Assembles the model design table.
///
/// In panel mode the estimation periods are all periods if no lag predictor
/// is used, otherwise all periods after the first (lags are unavailable
/// there). The first estimation period is the dummy reference.
pub fn build_design(
    panel: &Panel,
    exposures: Option<&LagColumnSet>,
    spec: &ModelSpec,
) -> Result<DesignTable> {
    spec.validate()?;
    let uses_lags = spec.predictors.iter().any(|p| LagKind::from_name(p).is_some());
    if let Some(ex) = exposures {
        if ex.mode != spec.mode {
            return Err(Error::Config(format!(
                "exposures were built in {} mode but the model is {}",
                ex.mode, spec.mode
            )));
        }
        if ex.regions.as_slice() != panel.regions() {
            return Err(Error::InvalidData("exposure regions do not match the panel".into()));
        }
    }

    let periods: Vec<usize> = match spec.mode {
        Mode::Panel => {
            let first = usize::from(uses_lags);
            (first..panel.n_periods()).collect()
        }
        Mode::CrossSectional => vec![0],
    };
    if periods.is_empty() {
        return Err(Error::InvalidData("no estimation periods left".into()));
    }
    let period_labels: Vec<&str> = panel.periods().iter().map(|p| p.label.as_str()).collect();

    // resolve predictors to sources, expanding the dummy token
    let mut names = vec![INTERCEPT.to_string()];
    let mut sources = Vec::new();
    for p in &spec.predictors {
        if p == PERIOD_DUMMIES {
            if spec.mode == Mode::CrossSectional {
                return Err(Error::Config("period dummies need panel mode".into()));
            }
            for &t in periods.iter().skip(1) {
                names.push(dummy_name(period_labels[t]));
                sources.push(Source::Dummy(t));
            }
            continue;
        }
        let source = if let Some(kind) = LagKind::from_name(p) {
            if exposures.is_none() {
                return Err(Error::MissingColumn(p.clone()));
            }
            Source::Lag(kind)
        } else if let Some(c) = panel.covariate(p) {
            Source::Covariate(&c.values)
        } else if let Some(t) = periods
            .iter()
            .skip(1)
            .copied()
            .find(|&t| spec.mode == Mode::Panel && dummy_name(period_labels[t]) == *p)
        {
            Source::Dummy(t)
        } else {
            return Err(Error::MissingColumn(p.clone()));
        };
        if names.contains(p) {
            return Err(Error::Config(format!("predictor `{p}` listed twice")));
        }
        names.push(p.clone());
        sources.push(source);
    }

    // group ids in order of first appearance
    let mut group_labels: Vec<String> = Vec::new();
    let group_of: Vec<usize> = panel
        .groups()
        .iter()
        .map(|g| match group_labels.iter().position(|x| x == g) {
            Some(k) => k,
            None => {
                group_labels.push(g.clone());
                group_labels.len() - 1
            }
        })
        .collect();

    let mut y = Vec::new();
    let mut offset = Vec::new();
    let mut cells: Vec<f64> = Vec::new();
    let mut group = Vec::new();
    let mut region = Vec::new();
    let mut period = Vec::new();
    let mut rows = Vec::new();
    let mut offenders = Vec::new();
    let counts = match spec.outcome {
        Outcome::Deaths => panel.deaths(),
        Outcome::Cases => panel.cases(),
    };

    for (i, rid) in panel.regions().iter().enumerate() {
        for &t in &periods {
            let mut row = Vec::with_capacity(names.len());
            row.push(1.0);
            let mut missing = false;
            for (k, s) in sources.iter().enumerate() {
                let v = match s {
                    Source::Lag(kind) => {
                        let col = exposures.expect("checked above").column(*kind);
                        col[i][t]
                    }
                    Source::Covariate(vals) => Some(vals[i]),
                    Source::Dummy(d) => Some(if *d == t { 1.0 } else { 0.0 }),
                };
                match v {
                    Some(v) if v.is_finite() => row.push(v),
                    _ => {
                        missing = true;
                        if spec.missing == MissingPolicy::Error {
                            offenders.push(format!(
                                "{}@{}:{}",
                                rid,
                                if spec.mode == Mode::Panel { period_labels[t] } else { "cumulative" },
                                names[k + 1]
                            ));
                        }
                        row.push(f64::NAN);
                    }
                }
            }
            if missing {
                continue;
            }
            let outcome = match spec.mode {
                Mode::Panel => counts[i][t] as f64,
                Mode::CrossSectional => counts[i].iter().sum::<u64>() as f64,
            };
            y.push(outcome);
            offset.push(if spec.offset {
                (panel.population()[i] as f64).ln()
            } else {
                0.0
            });
            cells.extend(row);
            group.push(group_of[i]);
            region.push(i);
            period.push(t);
            rows.push(RowKey {
                region: rid.to_string(),
                period: match spec.mode {
                    Mode::Panel => Some(period_labels[t].to_string()),
                    Mode::CrossSectional => None,
                },
            });
        }
    }
    if !offenders.is_empty() {
        return Err(Error::MissingValues { offenders });
    }
    if y.is_empty() {
        return Err(Error::InvalidData("design has no rows".into()));
    }
    let x = DMatrix::from_row_slice(y.len(), names.len(), &cells);
    let table = DesignTable {
        columns: names,
        x,
        y,
        offset,
        weights: None,
        group,
        group_labels,
        region,
        region_labels: panel.regions().iter().map(|r| r.to_string()).collect(),
        period,
        rows,
    };
    table.validate()?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{Covariate, PanelParts, Period, RegionId};

    fn toy_panel() -> Panel {
        let start = chrono::NaiveDate::from_ymd_opt(2020, 4, 1).unwrap();
        Panel::new(PanelParts {
            regions: vec![RegionId::new("A").unwrap(), RegionId::new("B").unwrap()],
            periods: Period::sequence(start, 14, 3).unwrap(),
            cases: vec![vec![1, 2, 3], vec![4, 5, 6]],
            deaths: vec![vec![0, 1, 0], vec![2, 0, 1]],
            signed_cases: None,
            signed_deaths: None,
            population: vec![1000, 4000],
            groups: vec!["s1".into(), "s2".into()],
            covariates: vec![Covariate {
                name: "x".into(),
                values: vec![0.5, -1.5],
            }],
        })
        .unwrap()
    }

    #[test]
    fn counts_rows_and_dummies() {
        let spec = ModelSpec::new(Outcome::Deaths, &["x", PERIOD_DUMMIES]);
        let d = build_design(&toy_panel(), None, &spec).unwrap();
        assert_eq!(d.n_rows(), 6);
        assert_eq!(
            d.columns,
            vec!["intercept", "x", "period_2020-04-15", "period_2020-04-29"]
        );
    }

    #[test]
    fn matches_hand_built_table() {
        let spec = ModelSpec::new(Outcome::Cases, &["x", PERIOD_DUMMIES]);
        let d = build_design(&toy_panel(), None, &spec).unwrap();
        #[rustfmt::skip]
        let expected = [
            // intercept, x, d2, d3
            [1.0,  0.5, 0.0, 0.0],
            [1.0,  0.5, 1.0, 0.0],
            [1.0,  0.5, 0.0, 1.0],
            [1.0, -1.5, 0.0, 0.0],
            [1.0, -1.5, 1.0, 0.0],
            [1.0, -1.5, 0.0, 1.0],
        ];
        for (i, row) in expected.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(d.x[(i, j)], *v, "cell ({i},{j})");
            }
        }
        assert_eq!(d.y, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let l1 = 1000f64.ln();
        let l2 = 4000f64.ln();
        assert_eq!(d.offset, vec![l1, l1, l1, l2, l2, l2]);
        assert_eq!(d.group, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(d.region, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn missing_column_is_named() {
        let spec = ModelSpec::new(Outcome::Deaths, &["x", "foo"]);
        match build_design(&toy_panel(), None, &spec) {
            Err(Error::MissingColumn(name)) => assert_eq!(name, "foo"),
            other => panic!("expected missing column, got {other:?}"),
        }
        let spec = ModelSpec::new(Outcome::Deaths, &["network_lag"]);
        assert!(matches!(
            build_design(&toy_panel(), None, &spec),
            Err(Error::MissingColumn(_))
        ));
    }

    #[test]
    fn nan_covariate_reports_offenders() {
        let panel = toy_panel().with_covariate("bad", vec![f64::NAN, 1.0]).unwrap();
        let spec = ModelSpec::new(Outcome::Deaths, &["bad"]);
        match build_design(&panel, None, &spec) {
            Err(Error::MissingValues { offenders }) => {
                assert_eq!(offenders.len(), 3);
                assert!(offenders[0].starts_with("A@"));
            }
            other => panic!("expected missing values, got {other:?}"),
        }
        let mut spec = ModelSpec::new(Outcome::Deaths, &["bad"]);
        spec.missing = MissingPolicy::DropRows;
        assert_eq!(build_design(&panel, None, &spec).unwrap().n_rows(), 3);
    }

    #[test]
    fn cross_sectional_sums_periods() {
        let spec = ModelSpec::new(Outcome::Cases, &["x"]).with_mode(Mode::CrossSectional);
        let d = build_design(&toy_panel(), None, &spec).unwrap();
        assert_eq!(d.y, vec![6.0, 15.0]);
        assert!(d.rows[0].period.is_none());
        let spec = ModelSpec::new(Outcome::Cases, &[PERIOD_DUMMIES]).with_mode(Mode::CrossSectional);
        assert!(build_design(&toy_panel(), None, &spec).is_err());
    }

    #[test]
    fn build_is_pure() {
        let spec = ModelSpec::new(Outcome::Deaths, &["x", PERIOD_DUMMIES]);
        let a = build_design(&toy_panel(), None, &spec).unwrap().to_csv_string();
        let b = build_design(&toy_panel(), None, &spec).unwrap().to_csv_string();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn random_levels_must_nest() {
        let spec = ModelSpec::new(Outcome::Deaths, &["x"])
            .with_random_levels(&[RandomLevel::Region, RandomLevel::Group]);
        assert!(build_design(&toy_panel(), None, &spec).is_err());
    }
}
