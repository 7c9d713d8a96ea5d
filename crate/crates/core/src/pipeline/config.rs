//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Lists are comma separated. Later assignments override earlier
//! ones, so command-line flags are applied after the file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;

use crate::causal::{Candidate, WeightMethod};
use crate::design::{MissingPolicy, Mode, Outcome, RandomLevel, PERIOD_DUMMIES};
use crate::error::{Error, Result};
use crate::exposure::{LagKind, NetworkFilter};
use crate::ingest::UnknownRegionPolicy;
use crate::network::SelfFlows;
use crate::simulate::SimConfig;

/// How a treatment column is turned into the analysed treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binarize {
    None,
    AboveAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cases: Option<PathBuf>,
    pub flows: Option<PathBuf>,
    pub contiguity: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    /// Previously written lag columns; computed from the inputs when absent.
    pub exposures: Option<PathBuf>,
    /// First day of the first period; inferred as the day after the first
    /// date in the cases file when absent.
    pub start_date: Option<NaiveDate>,
    pub period_length_days: u32,
    /// Inferred as the number of whole periods the cases file covers.
    pub n_periods: Option<usize>,
    pub outcome: Outcome,
    pub predictors: Vec<String>,
    pub random_levels: Vec<RandomLevel>,
    pub mode: Mode,
    pub offset: bool,
    pub missing: MissingPolicy,
    pub network_filter: NetworkFilter,
    pub self_flows: SelfFlows,
    pub unknown_regions: UnknownRegionPolicy,
    pub permutations: usize,
    /// Predictors to permute; all lag predictors of the model when empty.
    pub permute_predictors: Vec<String>,
    pub within_period: bool,
    pub seed: u64,
    pub causal_methods: Vec<WeightMethod>,
    pub treatment: Option<String>,
    pub binarize: Binarize,
    /// Propensity covariates; every other region covariate when empty.
    pub confounders: Vec<String>,
    /// Extra outcome-regression terms besides the treatment.
    pub controls: Vec<String>,
    pub truncate_quantile: Option<f64>,
    pub folds: usize,
    pub library: Vec<Candidate>,
    pub out: PathBuf,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cases: None,
            flows: None,
            contiguity: None,
            covariates: None,
            exposures: None,
            start_date: None,
            period_length_days: 14,
            n_periods: None,
            outcome: Outcome::Deaths,
            predictors: vec![
                LagKind::NetworkLag.name().into(),
                LagKind::SpatialLag.name().into(),
                LagKind::OwnRateLag.name().into(),
                PERIOD_DUMMIES.into(),
            ],
            random_levels: vec![RandomLevel::Group, RandomLevel::Region],
            mode: Mode::Panel,
            offset: true,
            missing: MissingPolicy::Error,
            network_filter: NetworkFilter::All,
            self_flows: SelfFlows::Exclude,
            unknown_regions: UnknownRegionPolicy::DropWarn,
            permutations: 100,
            permute_predictors: vec![],
            within_period: false,
            seed: 0,
            causal_methods: vec![WeightMethod::Iptw, WeightMethod::Cbps, WeightMethod::SuperLearner],
            treatment: None,
            binarize: Binarize::None,
            confounders: vec![],
            controls: vec![],
            truncate_quantile: Some(0.99),
            folds: 5,
            library: Candidate::default_library(),
            out: PathBuf::from("out"),
            sim: SimConfig::default(),
        }
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".into(), ToString::to_string)
}

fn lag_beta(sim: &SimConfig, kind: LagKind) -> f64 {
    sim.lag_betas.iter().find(|(k, _)| *k == kind).map_or(0.0, |(_, b)| *b)
}

fn set_lag_beta(sim: &mut SimConfig, kind: LagKind, beta: f64) {
    sim.lag_betas.retain(|(k, _)| *k != kind);
    if beta != 0.0 {
        sim.lag_betas.push((kind, beta));
        sim.lag_betas.sort_by_key(|(k, _)| *k);
    }
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "cases" => self.cases = opt_path(v),
            "flows" => self.flows = opt_path(v),
            "contiguity" => self.contiguity = opt_path(v),
            "covariates" => self.covariates = opt_path(v),
            "exposures" => self.exposures = opt_path(v),
            "start_date" => {
                self.start_date = match v {
                    "auto" => None,
                    _ => Some(
                        NaiveDate::parse_from_str(v, "%Y-%m-%d")
                            .map_err(|_| Error::Config(format!("invalid date `{v}` for `start_date`")))?,
                    ),
                }
            }
            "period_length_days" => self.period_length_days = parse(key, v)?,
            "n_periods" => self.n_periods = if v == "auto" { None } else { Some(parse(key, v)?) },
            "outcome" => self.outcome = v.parse()?,
            "predictors" => self.predictors = list(v),
            "random_levels" => {
                self.random_levels = if v == "none" {
                    vec![]
                } else {
                    list(v).iter().map(|s| s.parse()).collect::<Result<_>>()?
                }
            }
            "mode" => self.mode = v.parse()?,
            "offset" => self.offset = parse_bool(key, v)?,
            "missing" => {
                self.missing = match v {
                    "error" => MissingPolicy::Error,
                    "drop" | "drop_rows" => MissingPolicy::DropRows,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `missing`"))),
                }
            }
            "network_filter" => self.network_filter = v.parse()?,
            "self_flows" => {
                self.self_flows = match v {
                    "exclude" => SelfFlows::Exclude,
                    "include" => SelfFlows::Include,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `self_flows`"))),
                }
            }
            "unknown_regions" => self.unknown_regions = v.parse()?,
            "permutations" => self.permutations = parse(key, v)?,
            "permute_predictors" => self.permute_predictors = list(v),
            "within_period" => self.within_period = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "causal_methods" => self.causal_methods = list(v).iter().map(|s| s.parse()).collect::<Result<_>>()?,
            "treatment" => self.treatment = (!v.is_empty() && v != "none").then(|| v.to_string()),
            "binarize" => {
                self.binarize = match v {
                    "none" => Binarize::None,
                    "above_average" => Binarize::AboveAverage,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `binarize`"))),
                }
            }
            "confounders" => self.confounders = list(v),
            "controls" => self.controls = list(v),
            "truncate_quantile" => {
                self.truncate_quantile = if v == "none" {
                    None
                } else {
                    let q: f64 = parse(key, v)?;
                    if !(q > 0.0 && q <= 1.0) {
                        return Err(Error::Config(format!("`truncate_quantile` must lie in (0, 1], got {q}")));
                    }
                    Some(q)
                }
            }
            "folds" => self.folds = parse(key, v)?,
            "library" => self.library = list(v).iter().map(|s| s.parse()).collect::<Result<_>>()?,
            "out" => self.out = PathBuf::from(v),
            "sim_groups" => self.sim.n_groups = parse(key, v)?,
            "sim_regions_per_group" => self.sim.regions_per_group = parse(key, v)?,
            "sim_periods" => self.sim.n_periods = parse(key, v)?,
            "sim_flow_density" => self.sim.flow_density = parse(key, v)?,
            "sim_baseline_rate" => self.sim.baseline_rate = parse(key, v)?,
            "sim_covariate_betas" => {
                self.sim.covariate_betas = list(v).iter().map(|s| parse(key, s)).collect::<Result<_>>()?
            }
            "sim_network_beta" => set_lag_beta(&mut self.sim, LagKind::NetworkLag, parse(key, v)?),
            "sim_spatial_beta" => set_lag_beta(&mut self.sim, LagKind::SpatialLag, parse(key, v)?),
            "sim_own_rate_beta" => set_lag_beta(&mut self.sim, LagKind::OwnRateLag, parse(key, v)?),
            "sim_alpha" => self.sim.alpha = parse(key, v)?,
            "sim_sigma2_group" => self.sim.sigma2_group = parse(key, v)?,
            "sim_sigma2_region" => self.sim.sigma2_region = parse(key, v)?,
            "sim_case_fatality" => self.sim.case_fatality = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every assignment of a config text; errors carry `origin` and
    /// the line number.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: k as u64 + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            self.set(key.trim(), value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Every key with its current value, in a fixed order. Feeding the
    /// pairs back through [`RunConfig::set`] reproduces the config.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let s = &self.sim;
        vec![
            ("cases", show_path(&self.cases)),
            ("flows", show_path(&self.flows)),
            ("contiguity", show_path(&self.contiguity)),
            ("covariates", show_path(&self.covariates)),
            ("exposures", show_path(&self.exposures)),
            ("start_date", show_opt(&self.start_date)),
            ("period_length_days", self.period_length_days.to_string()),
            ("n_periods", show_opt(&self.n_periods)),
            ("outcome", self.outcome.to_string()),
            ("predictors", self.predictors.join(",")),
            (
                "random_levels",
                if self.random_levels.is_empty() { "none".into() } else { join(&self.random_levels) },
            ),
            ("mode", self.mode.to_string()),
            ("offset", self.offset.to_string()),
            (
                "missing",
                match self.missing {
                    MissingPolicy::Error => "error".into(),
                    MissingPolicy::DropRows => "drop".into(),
                },
            ),
            ("network_filter", self.network_filter.to_string()),
            (
                "self_flows",
                match self.self_flows {
                    SelfFlows::Exclude => "exclude".into(),
                    SelfFlows::Include => "include".into(),
                },
            ),
            (
                "unknown_regions",
                match self.unknown_regions {
                    UnknownRegionPolicy::DropWarn => "drop".into(),
                    UnknownRegionPolicy::Fail => "fail".into(),
                },
            ),
            ("permutations", self.permutations.to_string()),
            ("permute_predictors", self.permute_predictors.join(",")),
            ("within_period", self.within_period.to_string()),
            ("seed", self.seed.to_string()),
            (
                "causal_methods",
                self.causal_methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
            ),
            ("treatment", self.treatment.clone().unwrap_or_else(|| "none".into())),
            (
                "binarize",
                match self.binarize {
                    Binarize::None => "none".into(),
                    Binarize::AboveAverage => "above_average".into(),
                },
            ),
            ("confounders", self.confounders.join(",")),
            ("controls", self.controls.join(",")),
            ("truncate_quantile", self.truncate_quantile.map_or("none".into(), |q| q.to_string())),
            ("folds", self.folds.to_string()),
            ("library", self.library.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")),
            ("out", self.out.display().to_string()),
            ("sim_groups", s.n_groups.to_string()),
            ("sim_regions_per_group", s.regions_per_group.to_string()),
            ("sim_periods", s.n_periods.to_string()),
            ("sim_flow_density", s.flow_density.to_string()),
            ("sim_baseline_rate", s.baseline_rate.to_string()),
            ("sim_covariate_betas", join(&s.covariate_betas)),
            ("sim_network_beta", lag_beta(s, LagKind::NetworkLag).to_string()),
            ("sim_spatial_beta", lag_beta(s, LagKind::SpatialLag).to_string()),
            ("sim_own_rate_beta", lag_beta(s, LagKind::OwnRateLag).to_string()),
            ("sim_alpha", s.alpha.to_string()),
            ("sim_sigma2_group", s.sigma2_group.to_string()),
            ("sim_sigma2_region", s.sigma2_region.to_string()),
            ("sim_case_fatality", s.case_fatality.to_string()),
        ]
    }

    /// The config as `key = value` text.
    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// JSON object of [`RunConfig::pairs`].
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.pairs()
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# comment\noutcome = cases\npredictors = network_lag, x1\nrandom_levels = none\nseed=7\n\
             truncate_quantile = none\nsim_network_beta = 0.002\nsim_own_rate_beta = 0.0001\n",
            Path::new("run.cfg"),
        )
        .unwrap();
        assert_eq!(cfg.outcome, Outcome::Cases);
        assert_eq!(cfg.predictors, vec!["network_lag", "x1"]);
        assert!(cfg.random_levels.is_empty());
        assert_eq!(cfg.seed, 7);
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("resolved")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_lines_name_the_line() {
        let mut cfg = RunConfig::default();
        match cfg.apply_text("seed = 1\nbogus = 3\n", Path::new("run.cfg")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("bogus"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(cfg.apply_text("no equals sign", Path::new("x")).is_err());
        assert!(cfg.set("truncate_quantile", "1.5").is_err());
    }
}
