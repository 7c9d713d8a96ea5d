//! Batch pipeline behind the command-line tool: input loading, the
//! subcommands, artifact staging and error records.
//!
//! Every subcommand writes into a staging directory inside the output
//! directory and moves its files into place only when all of them were
//! produced; on failure the staging directory is removed and `error.json`
//! is written instead. JSON artifacts share one envelope holding the
//! command, the resolved config, the top-level seed and warnings, and every
//! command also writes `<command>_config.txt`, the resolved config in the
//! same `key = value` format it reads.
//!
//! Randomness derives from the single top-level `seed`: the simulation,
//! permutation and causal modules each get `derive_seed(seed, stream)` with
//! their own stream number.

mod config;
mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

pub use config::{Binarize, RunConfig};

use crate::causal::{
    causal_csv, compute_weights, weighted_effect, BalanceRow, CausalEstimate, Covariates, StackingReport, Treatment,
    TreatmentKind, WeightMethod, WeightOptions, WeightSet,
};
use crate::design::{build_design, DesignTable, Mode, ModelSpec, PERIOD_DUMMIES};
use crate::error::{Error, Result};
use crate::exposure::{build_lag_columns, case_rate, LagColumnSet, LagKind, LagMatrix, NetworkFilter};
use crate::ingest::{
    above_average_indicator, build_panel, parse_cases, parse_contiguity, parse_covariates, parse_flows, write_text,
    PanelReport, PeriodGrid,
};
use crate::negbin::{fit_nb_glm_with, fit_nb_mixed_with, FitOptions, FitResult};
use crate::network::{ContiguityGraph, FlowNetwork};
use crate::panel::Panel;
use crate::permute::{permutation_test, PermutationOptions, PermutationReport};
use crate::simulate::{self, SimConfig};

pub const SIMULATE_STREAM: u64 = 1;
pub const PERMUTE_STREAM: u64 = 2;
pub const CAUSAL_STREAM: u64 = 3;
pub const ERROR_FILE: &str = "error.json";

/// Module seed: first output of ChaCha8 seeded with `seed` on `stream`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Ingest,
    Exposures,
    Fit,
    Permute,
    Causal,
    Simulate,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Exposures => "exposures",
            Command::Fit => "fit",
            Command::Permute => "permute",
            Command::Causal => "causal",
            Command::Simulate => "simulate",
            Command::Report => "report",
        }
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Command::Ingest,
            Command::Exposures,
            Command::Fit,
            Command::Permute,
            Command::Causal,
            Command::Simulate,
            Command::Report,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

/// Validated inputs with the diagnostics gathered while reading them.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub panel: Panel,
    pub network: Option<FlowNetwork>,
    pub contiguity: Option<ContiguityGraph>,
    pub panel_report: PanelReport,
    pub warnings: Vec<String>,
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))?;
    if !p.exists() {
        return Err(Error::Config(format!("`{key}` path {} does not exist", p.display())));
    }
    Ok(p)
}

fn existing<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<Option<&'a Path>> {
    match path {
        Some(_) => required(path, key).map(Some),
        None => Ok(None),
    }
}

/// Reads and validates the input files. Inferred period settings are
/// written back into `cfg` so the resolved config records them.
pub fn load_inputs(cfg: &mut RunConfig) -> Result<Inputs> {
    let table = parse_covariates(required(&cfg.covariates, "covariates")?)?;
    let known = table.region_set();
    let mut warnings = Vec::new();
    let (raw, rep) = parse_cases(required(&cfg.cases, "cases")?, Some(&known), cfg.unknown_regions)?;
    warnings.extend(rep.warnings);
    let first = raw.iter().map(|r| r.date).min().ok_or_else(|| Error::InvalidData("cases file has no rows".into()))?;
    let last = raw.iter().map(|r| r.date).max().expect("non-empty");
    let start = match cfg.start_date {
        Some(d) => d,
        None => first.succ_opt().ok_or_else(|| Error::InvalidData("dates out of range".into()))?,
    };
    if cfg.period_length_days == 0 {
        return Err(Error::Config("`period_length_days` must be positive".into()));
    }
    let n_periods = match cfg.n_periods {
        Some(n) => n,
        None => {
            let span = (last - start.pred_opt().unwrap_or(start)).num_days().max(0);
            let n = (span / cfg.period_length_days as i64) as usize;
            if n == 0 {
                return Err(Error::InvalidData("cases file does not cover one whole period".into()));
            }
            n
        }
    };
    cfg.start_date = Some(start);
    cfg.n_periods = Some(n_periods);
    let grid = PeriodGrid {
        start,
        length_days: cfg.period_length_days,
        n_periods,
    };
    let (panel, panel_report) = build_panel(&raw, &table, grid, cfg.unknown_regions)?;
    warnings.extend(panel_report.warnings.iter().cloned());
    let network = match existing(&cfg.flows, "flows")? {
        Some(p) => {
            let (net, rep) = parse_flows(p, Some(&known), cfg.unknown_regions, cfg.self_flows)?;
            warnings.extend(rep.warnings);
            Some(net)
        }
        None => None,
    };
    let contiguity = match existing(&cfg.contiguity, "contiguity")? {
        Some(p) => {
            let (g, rep) = parse_contiguity(p, Some(&known), cfg.unknown_regions)?;
            warnings.extend(rep.warnings);
            Some(g)
        }
        None => None,
    };
    Ok(Inputs {
        panel,
        network,
        contiguity,
        panel_report,
        warnings,
    })
}

/// Lag columns from `cfg.exposures` when set, otherwise computed.
pub fn lag_columns(inputs: &Inputs, cfg: &RunConfig) -> Result<LagColumnSet> {
    if let Some(p) = existing(&cfg.exposures, "exposures")? {
        return read_exposures(p, &inputs.panel, cfg.mode, cfg.network_filter);
    }
    let net = inputs
        .network
        .as_ref()
        .ok_or_else(|| Error::Config("`flows` is required to compute exposures".into()))?;
    let contig = inputs
        .contiguity
        .as_ref()
        .ok_or_else(|| Error::Config("`contiguity` is required to compute exposures".into()))?;
    build_lag_columns(&inputs.panel, net, contig, cfg.network_filter, cfg.mode)
}

pub fn model_spec(cfg: &RunConfig) -> ModelSpec {
    let refs: Vec<&str> = cfg.predictors.iter().map(String::as_str).collect();
    let mut spec = ModelSpec::new(cfg.outcome, &refs)
        .with_random_levels(&cfg.random_levels)
        .with_mode(cfg.mode);
    spec.offset = cfg.offset;
    spec.missing = cfg.missing;
    spec
}

fn uses_lags(predictors: &[String]) -> bool {
    predictors.iter().any(|p| LagKind::from_name(p).is_some())
}

/// Design table for `spec`, loading lag columns only when needed.
pub fn design_for(inputs: &Inputs, cfg: &RunConfig, spec: &ModelSpec) -> Result<DesignTable> {
    let lags = if uses_lags(&spec.predictors) { Some(lag_columns(inputs, cfg)?) } else { None };
    build_design(&inputs.panel, lags.as_ref(), spec)
}

/// GLM without random levels, mixed model otherwise.
pub fn fit_model(design: &DesignTable, spec: &ModelSpec) -> Result<FitResult> {
    let opts = FitOptions::default();
    if spec.random_levels.is_empty() {
        fit_nb_glm_with(design, &opts)
    } else {
        fit_nb_mixed_with(design, &spec.random_levels, &opts)
    }
}

/// Coefficient table followed by `ln_alpha` and variance component rows.
pub fn fit_table_csv(fit: &FitResult) -> String {
    let mut s = fit.summary_csv();
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let _ = writeln!(s, "ln_alpha,{},{},,,", fit.ln_alpha, opt(fit.ln_alpha_se));
    for v in &fit.variance_components {
        let _ = writeln!(s, "sigma2_{},{},{},,,", v.level, v.sigma2, opt(v.se));
    }
    s
}

const LAG_COLUMNS: [LagKind; 5] = LagKind::ALL;

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// `region,period,<lag columns>,spatial_isolated` with empty cells for
/// unavailable values. Floats are written in shortest round-trip form.
pub fn exposures_csv(set: &LagColumnSet) -> String {
    let mut s = String::from("region,period");
    for k in LAG_COLUMNS {
        s.push(',');
        s.push_str(k.name());
    }
    s.push_str(",spatial_isolated\n");
    for (i, r) in set.regions.iter().enumerate() {
        for (t, label) in set.period_labels.iter().enumerate() {
            let _ = write!(s, "{r},{label}");
            for k in LAG_COLUMNS {
                let _ = write!(s, ",{}", cell(set.column(k)[i][t]));
            }
            let _ = writeln!(s, ",{}", set.spatial_isolated[i]);
        }
    }
    s
}

/// Reads lag columns written by [`exposures_csv`] for the same panel.
pub fn read_exposures(path: &Path, panel: &Panel, mode: Mode, filter: NetworkFilter) -> Result<LagColumnSet> {
    let err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labels: Vec<String> = match mode {
        Mode::Panel => panel.periods().iter().map(|p| p.label.clone()).collect(),
        Mode::CrossSectional => vec!["cumulative".into()],
    };
    let n = panel.n_regions();
    let tn = labels.len();
    let mut cols: Vec<LagMatrix> = vec![vec![vec![None; tn]; n]; LAG_COLUMNS.len()];
    let mut isolated = vec![false; n];
    let mut lines = text.lines();
    let header = exposures_csv(&LagColumnSet {
        mode,
        filter,
        regions: vec![],
        period_labels: vec![],
        network_lag: vec![],
        network_delta: vec![],
        spatial_lag: vec![],
        spatial_delta: vec![],
        own_rate_lag: vec![],
        spatial_isolated: vec![],
    });
    if lines.next().map(str::trim) != Some(header.trim()) {
        return Err(err(1, format!("expected header `{}`", header.trim())));
    }
    let mut count = 0;
    for (k, line) in lines.enumerate() {
        let ln = k as u64 + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != LAG_COLUMNS.len() + 3 {
            return Err(err(ln, format!("expected {} fields, found {}", LAG_COLUMNS.len() + 3, f.len())));
        }
        let (i, t) = (count / tn, count % tn);
        if i >= n || f[0] != panel.regions()[i].as_str() || f[1] != labels[t] {
            return Err(err(ln, format!("row `{},{}` does not match the panel layout", f[0], f[1])));
        }
        for (c, raw) in f[2..2 + LAG_COLUMNS.len()].iter().enumerate() {
            cols[c][i][t] = if raw.is_empty() {
                None
            } else {
                Some(raw.parse::<f64>().map_err(|_| err(ln, format!("invalid number `{raw}`")))?)
            };
        }
        isolated[i] = f[f.len() - 1]
            .parse()
            .map_err(|_| err(ln, format!("invalid flag `{}`", f[f.len() - 1])))?;
        count += 1;
    }
    if count != n * tn {
        return Err(err(count as u64 + 1, format!("expected {} rows, found {count}", n * tn)));
    }
    let mut it = cols.into_iter();
    Ok(LagColumnSet {
        mode,
        filter,
        regions: panel.regions().to_vec(),
        period_labels: labels,
        network_lag: it.next().expect("five columns"),
        network_delta: it.next().expect("five columns"),
        spatial_lag: it.next().expect("five columns"),
        spatial_delta: it.next().expect("five columns"),
        own_rate_lag: it.next().expect("five columns"),
        spatial_isolated: isolated,
    })
}

/// Mean, sample SD, min and max of one variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Descriptive {
    pub variable: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl Descriptive {
    /// Statistics over the finite entries of `values`.
    pub fn of(variable: &str, values: &[f64]) -> Descriptive {
        let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        Descriptive {
            variable: variable.to_string(),
            n,
            mean,
            sd,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Per-cell counts and signed rates, then per-region population and
/// covariates.
pub fn descriptives(panel: &Panel) -> Result<Vec<Descriptive>> {
    let cells = |m: &[Vec<u64>]| m.iter().flatten().map(|&v| v as f64).collect::<Vec<_>>();
    let rates = |m: &[Vec<i64>]| -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (i, row) in m.iter().enumerate() {
            for &v in row {
                out.push(case_rate(v as f64, panel.population()[i] as f64)?);
            }
        }
        Ok(out)
    };
    let mut out = vec![
        Descriptive::of("new_cases", &cells(panel.cases())),
        Descriptive::of("new_deaths", &cells(panel.deaths())),
        Descriptive::of("case_rate", &rates(panel.signed_cases())?),
        Descriptive::of("death_rate", &rates(panel.signed_deaths())?),
        Descriptive::of("population", &panel.population().iter().map(|&p| p as f64).collect::<Vec<_>>()),
    ];
    out.extend(panel.covariates().iter().map(|c| Descriptive::of(&c.name, &c.values)));
    Ok(out)
}

pub fn descriptives_csv(rows: &[Descriptive]) -> String {
    let mut s = String::from("variable,n,mean,sd,min,max\n");
    for d in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", d.variable, d.n, d.mean, d.sd, d.min, d.max);
    }
    s
}

/// Weight diagnostics without the per-row weights.
#[derive(Debug, Clone, Serialize)]
pub struct WeightSummary {
    pub method: WeightMethod,
    pub kind: TreatmentKind,
    pub ess: f64,
    pub max_abs_balance: f64,
    pub truncation_cap: Option<f64>,
    pub n_truncated: usize,
    pub balance: Vec<BalanceRow>,
    pub stacking: Option<StackingReport>,
    pub warnings: Vec<String>,
}

impl From<&WeightSet> for WeightSummary {
    fn from(w: &WeightSet) -> Self {
        WeightSummary {
            method: w.method,
            kind: w.kind,
            ess: w.ess,
            max_abs_balance: w.max_abs_balance(),
            truncation_cap: w.truncation_cap,
            n_truncated: w.n_truncated,
            balance: w.balance.clone(),
            stacking: w.stacking.clone(),
            warnings: w.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CausalReport {
    pub treatment: String,
    pub confounders: Vec<String>,
    pub controls: Vec<String>,
    pub n: usize,
    pub estimates: Vec<CausalEstimate>,
    pub weights: Vec<WeightSummary>,
}

/// Unweighted and weighted effect estimates of `cfg.treatment`.
pub fn causal_analysis(inputs: &Inputs, cfg: &RunConfig) -> Result<CausalReport> {
    let name = cfg
        .treatment
        .clone()
        .ok_or_else(|| Error::Config("`treatment` is required for the causal command".into()))?;
    let confounders: Vec<String> = if cfg.confounders.is_empty() {
        inputs
            .panel
            .covariates()
            .iter()
            .map(|c| c.name.clone())
            .filter(|c| *c != name && !cfg.controls.contains(c))
            .collect()
    } else {
        cfg.confounders.clone()
    };
    if confounders.is_empty() {
        return Err(Error::Config("no confounders available for the propensity model".into()));
    }
    let mut predictors = vec![name.clone()];
    for p in confounders.iter().chain(&cfg.controls) {
        if !predictors.contains(p) {
            predictors.push(p.clone());
        }
    }
    let refs: Vec<&str> = predictors.iter().map(String::as_str).collect();
    let mut spec = ModelSpec::new(cfg.outcome, &refs).with_mode(cfg.mode);
    spec.offset = cfg.offset;
    spec.missing = cfg.missing;
    let design = design_for(inputs, cfg, &spec)?;
    let col = |c: &str| design.column(c).ok_or_else(|| Error::MissingColumn(c.to_string()));
    let raw = col(&name)?;
    let values = match cfg.binarize {
        Binarize::None => raw,
        Binarize::AboveAverage => above_average_indicator(&raw)?,
    };
    let treatment = Treatment::new(&name, values)?;
    let cov = Covariates::new(confounders.clone(), confounders.iter().map(|c| col(c)).collect::<Result<_>>()?)?;
    let controls = Covariates::new(cfg.controls.clone(), cfg.controls.iter().map(|c| col(c)).collect::<Result<_>>()?)?;
    let population: Option<Vec<f64>> = cfg
        .offset
        .then(|| design.region.iter().map(|&r| inputs.panel.population()[r] as f64).collect());
    let opts = WeightOptions {
        truncate_quantile: cfg.truncate_quantile,
        folds: cfg.folds,
        seed: derive_seed(cfg.seed, CAUSAL_STREAM),
        library: cfg.library.clone(),
    };
    let mut estimates = Vec::new();
    let mut weights = Vec::new();
    let mut naive = weighted_effect(&design.y, population.as_deref(), &treatment, &WeightSet::uniform(&treatment), &controls)?;
    naive.method = "unweighted".into();
    estimates.push(naive);
    for &m in &cfg.causal_methods {
        let w = compute_weights(m, &treatment, &cov, &opts)?;
        estimates.push(weighted_effect(&design.y, population.as_deref(), &treatment, &w, &controls)?);
        weights.push(WeightSummary::from(&w));
    }
    Ok(CausalReport {
        treatment: name,
        confounders,
        controls: cfg.controls.clone(),
        n: design.n_rows(),
        estimates,
        weights,
    })
}

/// Permutation reports for the configured predictors.
pub fn permutation_analysis(inputs: &Inputs, cfg: &RunConfig) -> Result<Vec<PermutationReport>> {
    let spec = model_spec(cfg);
    let design = design_for(inputs, cfg, &spec)?;
    let targets: Vec<String> = if cfg.permute_predictors.is_empty() {
        let lags: Vec<String> = cfg.predictors.iter().filter(|p| LagKind::from_name(p).is_some()).cloned().collect();
        if lags.is_empty() {
            cfg.predictors.iter().filter(|p| *p != PERIOD_DUMMIES).cloned().collect()
        } else {
            lags
        }
    } else {
        cfg.permute_predictors.clone()
    };
    if targets.is_empty() {
        return Err(Error::Config("no predictors to permute".into()));
    }
    let opts = PermutationOptions {
        n_permutations: cfg.permutations,
        seed: derive_seed(cfg.seed, PERMUTE_STREAM),
        within_period: cfg.within_period,
        fit: FitOptions::default(),
    };
    targets.iter().map(|p| permutation_test(&design, &spec, p, &opts)).collect()
}

pub fn permutation_csv(reports: &[PermutationReport]) -> String {
    let mut s = String::from("predictor,observed_maape,proportion_lower,n_failed,n_permutations\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.predictor, r.observed_maape, r.proportion_lower, r.n_failed, r.n_permutations
        );
    }
    s
}

/// Simulation settings with the derived seed and the run's period grid.
pub fn sim_config(cfg: &RunConfig) -> SimConfig {
    let mut sim = cfg.sim.clone();
    sim.seed = derive_seed(cfg.seed, SIMULATE_STREAM);
    if let Some(d) = cfg.start_date {
        sim.start_date = d;
    }
    sim.period_length_days = cfg.period_length_days;
    sim
}

fn envelope(command: Command, cfg: &RunConfig, warnings: &[String], result: Value) -> Value {
    json!({
        "command": command.name(),
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "warnings": warnings,
        "result": result,
    })
}

fn pretty(v: &Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Produces the artifacts of `command` inside `stage`; returns file names.
fn execute(command: Command, cfg: &mut RunConfig, stage: &Path) -> Result<Vec<String>> {
    let mut files: Vec<(String, String)> = Vec::new();
    match command {
        Command::Ingest => {
            let inputs = load_inputs(cfg)?;
            let stats = descriptives(&inputs.panel)?;
            let p = &inputs.panel;
            let result = json!({
                "regions": p.n_regions(),
                "periods": p.periods(),
                "groups": p.groups().iter().collect::<std::collections::BTreeSet<_>>().len(),
                "flow_edges": inputs.network.as_ref().map(|n| n.edges().len()),
                "contiguity_pairs": inputs.contiguity.as_ref().map(|g| g.pairs().len()),
                "clamped_cells": inputs.panel_report.clamped_cells,
                "decreasing_steps": inputs.panel_report.decreasing_steps,
                "dropped_regions": inputs.panel_report.dropped_regions,
                "descriptives": stats,
            });
            files.push(("descriptives.csv".into(), descriptives_csv(&stats)));
            files.push(("ingest.json".into(), pretty(&envelope(command, cfg, &inputs.warnings, result))?));
        }
        Command::Exposures => {
            cfg.exposures = None;
            let inputs = load_inputs(cfg)?;
            let set = lag_columns(&inputs, cfg)?;
            let isolated = set.spatial_isolated.iter().filter(|b| **b).count();
            let unavailable = set.network_lag.iter().flatten().filter(|v| v.is_none()).count();
            let result = json!({
                "mode": set.mode,
                "filter": set.filter,
                "regions": set.regions.len(),
                "periods": set.period_labels,
                "spatially_isolated_regions": isolated,
                "unavailable_network_lag_cells": unavailable,
            });
            files.push(("exposures.csv".into(), exposures_csv(&set)));
            files.push(("exposures.json".into(), pretty(&envelope(command, cfg, &inputs.warnings, result))?));
        }
        Command::Fit => {
            let inputs = load_inputs(cfg)?;
            let spec = model_spec(cfg);
            let design = design_for(&inputs, cfg, &spec)?;
            let fit = fit_model(&design, &spec)?;
            let mut warnings = inputs.warnings.clone();
            warnings.extend(fit.convergence.notes.iter().cloned());
            let result = json!({
                "n_rows": design.n_rows(),
                "columns": design.columns,
                "fit": fit.summary_json()?,
            });
            files.push(("fit_summary.csv".into(), fit_table_csv(&fit)));
            files.push(("fit.json".into(), pretty(&envelope(command, cfg, &warnings, result))?));
        }
        Command::Permute => {
            let inputs = load_inputs(cfg)?;
            let reports = permutation_analysis(&inputs, cfg)?;
            let mut warnings = inputs.warnings.clone();
            warnings.extend(reports.iter().flat_map(|r| r.warnings.iter().cloned()));
            let result = json!({
                "permute_seed": derive_seed(cfg.seed, PERMUTE_STREAM),
                "reports": reports,
            });
            files.push(("permutation.csv".into(), permutation_csv(&reports)));
            files.push(("permutation.json".into(), pretty(&envelope(command, cfg, &warnings, result))?));
        }
        Command::Causal => {
            let inputs = load_inputs(cfg)?;
            let report = causal_analysis(&inputs, cfg)?;
            let mut warnings = inputs.warnings.clone();
            warnings.extend(report.weights.iter().flat_map(|w| w.warnings.iter().cloned()));
            let mut result = serde_json::to_value(&report)?;
            result["causal_seed"] = json!(derive_seed(cfg.seed, CAUSAL_STREAM));
            files.push(("causal.csv".into(), causal_csv(&report.estimates)));
            files.push(("causal.json".into(), pretty(&envelope(command, cfg, &warnings, result))?));
        }
        Command::Simulate => {
            let sim = simulate::generate(&sim_config(cfg))?;
            simulate::write_dataset(&sim, stage)?;
            for f in [
                simulate::CASES_FILE,
                simulate::FLOWS_FILE,
                simulate::CONTIGUITY_FILE,
                simulate::COVARIATES_FILE,
                simulate::TRUTH_FILE,
            ] {
                files.push((f.to_string(), String::new()));
            }
            let result = json!({
                "sim_seed": sim.truth.config.seed,
                "regions": sim.panel.n_regions(),
                "periods": sim.panel.n_periods(),
                "flow_edges": sim.network.edges().len(),
                "terms": sim.truth.terms,
                "beta": sim.truth.beta,
                "alpha": sim.truth.alpha,
                "sigma2_group": sim.truth.sigma2_group,
                "sigma2_region": sim.truth.sigma2_region,
            });
            files.push(("simulation.json".into(), pretty(&envelope(command, cfg, &[], result))?));
        }
        Command::Report => {
            let text = report::render(&cfg.out)?;
            files.push(("report.md".into(), text));
        }
    }
    files.push((format!("{}_config.txt", command.name()), cfg.to_text()));
    let mut names = Vec::new();
    for (name, contents) in files {
        // simulation files were written in place already
        if !(command == Command::Simulate && contents.is_empty()) {
            write_text(&stage.join(&name), &contents)?;
        }
        names.push(name);
    }
    Ok(names)
}

/// Machine-readable error record.
pub fn error_record(command: Option<Command>, err: &Error) -> Value {
    let mut v = json!({
        "status": "error",
        "command": command.map(Command::name),
        "kind": err.kind(),
        "message": err.to_string(),
    });
    match err {
        Error::Parse { path, line, .. } => {
            v["file"] = json!(path.display().to_string());
            v["line"] = json!(line);
        }
        Error::Io { path, .. } => v["file"] = json!(path.display().to_string()),
        Error::MissingColumn(c) => v["column"] = json!(c),
        Error::MissingValues { offenders } => v["offenders"] = json!(offenders),
        Error::RankDeficient { columns } => v["columns"] = json!(columns),
        Error::UnknownRegion { region, .. } => v["region"] = json!(region),
        _ => {}
    }
    v
}

/// Writes `error.json` into `out` (best effort).
pub fn write_error(out: &Path, command: Option<Command>, err: &Error) {
    if std::fs::create_dir_all(out).is_ok() {
        let text = serde_json::to_string_pretty(&error_record(command, err)).unwrap_or_default();
        let _ = std::fs::write(out.join(ERROR_FILE), text + "\n");
    }
}

/// Runs one subcommand; returns the written artifact paths. On failure no
/// artifact of this run is left behind and `error.json` describes the error.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = cfg.out.clone();
    let stage = out.join(format!(".staging-{}", command.name()));
    let attempt = || -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        if stage.exists() {
            std::fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
        }
        std::fs::create_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
        let mut resolved = cfg.clone();
        let names = execute(command, &mut resolved, &stage)?;
        let mut written = Vec::new();
        for name in names {
            let dest = out.join(&name);
            std::fs::rename(stage.join(&name), &dest).map_err(|e| Error::io(&dest, e))?;
            written.push(dest);
        }
        Ok(written)
    };
    let result = attempt();
    let _ = std::fs::remove_dir_all(&stage);
    match &result {
        Ok(_) => {
            let _ = std::fs::remove_file(out.join(ERROR_FILE));
        }
        Err(e) => write_error(&out, Some(command), e),
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{Covariate, PanelParts, Period, RegionId};
    use chrono::NaiveDate;

    fn toy() -> Panel {
        let start = NaiveDate::from_ymd_opt(2020, 4, 1).unwrap();
        Panel::new(PanelParts {
            regions: ["A", "B", "C", "D", "E"].iter().map(|s| RegionId::new(*s).unwrap()).collect(),
            periods: Period::sequence(start, 14, 1).unwrap(),
            cases: vec![vec![1], vec![2], vec![3], vec![4], vec![10]],
            deaths: vec![vec![0], vec![0], vec![1], vec![0], vec![1]],
            signed_cases: Some(vec![vec![1], vec![2], vec![-3], vec![4], vec![10]]),
            signed_deaths: None,
            population: vec![1000, 2000, 1000, 4000, 5000],
            groups: vec!["g".into(); 5],
            covariates: vec![Covariate {
                name: "x".into(),
                values: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            }],
        })
        .unwrap()
    }

    #[test]
    fn descriptives_match_hand_values() {
        let d = descriptives(&toy()).unwrap();
        let get = |n: &str| d.iter().find(|r| r.variable == n).unwrap().clone();
        let cases = get("new_cases");
        assert_eq!(cases.n, 5);
        assert_eq!(cases.mean, 4.0);
        // deviations -3,-2,-1,0,6 → SS 50, var 12.5
        assert!((cases.sd - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!((cases.min, cases.max), (1.0, 10.0));
        // signed rates per 100k: 100, 100, -300, 100, 200
        let rate = get("case_rate");
        assert!((rate.mean - 40.0).abs() < 1e-12);
        assert_eq!((rate.min, rate.max), (-300.0, 200.0));
        let ss: f64 = [60.0f64, 60.0, -340.0, 60.0, 160.0].iter().map(|v| v * v).sum();
        assert!((rate.sd - (ss / 4.0).sqrt()).abs() < 1e-9);
        let x = get("x");
        assert_eq!((x.mean, x.min, x.max), (3.0, 1.0, 5.0));
        assert!((x.sd - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(get("population").mean, 2600.0);
    }

    #[test]
    fn exposures_csv_round_trips() {
        let sim = simulate::generate(&SimConfig {
            n_groups: 3,
            regions_per_group: 4,
            n_periods: 3,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let set = build_lag_columns(&sim.panel, &sim.network, &sim.contiguity, NetworkFilter::All, Mode::Panel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, exposures_csv(&set)).unwrap();
        let back = read_exposures(&p, &sim.panel, Mode::Panel, NetworkFilter::All).unwrap();
        assert_eq!(back, set);
        std::fs::write(&p, exposures_csv(&set).replace("\nR00,", "\nR99,")).unwrap();
        assert!(read_exposures(&p, &sim.panel, Mode::Panel, NetworkFilter::All).is_err());
    }

    #[test]
    fn seeds_are_derived_per_stream() {
        assert_eq!(derive_seed(5, PERMUTE_STREAM), derive_seed(5, PERMUTE_STREAM));
        assert_ne!(derive_seed(5, PERMUTE_STREAM), derive_seed(5, CAUSAL_STREAM));
        assert_ne!(derive_seed(5, PERMUTE_STREAM), derive_seed(6, PERMUTE_STREAM));
    }

    #[test]
    fn failure_leaves_only_an_error_record() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out: dir.path().join("out"),
            cases: Some(dir.path().join("missing.csv")),
            covariates: Some(dir.path().join("missing.csv")),
            ..Default::default()
        };
        assert!(run(Command::Ingest, &cfg).is_err());
        let entries: Vec<_> = std::fs::read_dir(&cfg.out).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(entries, vec![std::ffi::OsString::from(ERROR_FILE)]);
        let rec: Value = serde_json::from_str(&std::fs::read_to_string(cfg.out.join(ERROR_FILE)).unwrap()).unwrap();
        assert_eq!(rec["kind"], "config");
        assert_eq!(rec["command"], "ingest");
    }
}
