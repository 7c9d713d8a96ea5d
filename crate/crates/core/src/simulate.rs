//! Synthetic panels from a known 3-level negative binomial model.
//!
//! Regions sit on a square grid with queen contiguity and are split into
//! consecutive blocks forming the groups. Commuter flows are a directed
//! configuration-style graph with log-normal weights. New case counts are
//! drawn period by period as gamma-Poisson mixtures with
//! `mu = population * exp(x'beta + u_group + u_region)`, where the lag
//! predictors come from the previous period's realized rates through the
//! exposure functions, so spillover is causal inside the simulation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::index::sample_weighted;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::design::{ModelSpec, Outcome, RandomLevel};
use crate::error::{Error, Result};
use crate::exposure::{self, LagKind, NetworkFilter, RateMap, PER_POPULATION};
use crate::ingest::{cumulative_rows, write_cases, write_contiguity, write_covariates, write_flows, write_text, PeriodGrid, RegionTable};
use crate::network::{ContiguityGraph, FlowEdge, FlowNetwork, SelfFlows};
use crate::panel::{Covariate, Panel, PanelParts, RegionId};

/// Largest mean the sampler accepts.
pub const MU_MAX: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_groups: usize,
    pub regions_per_group: usize,
    pub n_periods: usize,
    pub start_date: NaiveDate,
    pub period_length_days: u32,
    /// Expected share of other regions each origin sends commuters to.
    pub flow_density: f64,
    /// Log-normal parameters of the commuter count on one edge.
    pub flow_meanlog: f64,
    pub flow_sdlog: f64,
    /// Multiplier on the chance of picking a contiguous destination.
    pub contiguity_boost: f64,
    pub population_meanlog: f64,
    pub population_sdlog: f64,
    /// Expected new cases per 100,000 per period at zero predictors.
    pub baseline_rate: f64,
    /// Coefficients of standard normal region covariates `x1, x2, ...`.
    pub covariate_betas: Vec<f64>,
    /// Coefficients of lag predictors (rates per 100,000).
    pub lag_betas: Vec<(LagKind, f64)>,
    pub alpha: f64,
    pub sigma2_group: f64,
    pub sigma2_region: f64,
    /// Probability that a new case becomes a death.
    pub case_fatality: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_groups: 10,
            regions_per_group: 10,
            n_periods: 8,
            start_date: NaiveDate::from_ymd_opt(2020, 4, 1).expect("valid date"),
            period_length_days: 14,
            flow_density: 0.05,
            flow_meanlog: 4.0,
            flow_sdlog: 1.0,
            contiguity_boost: 20.0,
            population_meanlog: 50_000f64.ln(),
            population_sdlog: 0.7,
            baseline_rate: 100.0,
            covariate_betas: vec![0.3],
            lag_betas: vec![(LagKind::NetworkLag, 0.0003)],
            alpha: 0.5,
            sigma2_group: 0.2,
            sigma2_region: 0.3,
            case_fatality: 0.02,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn n_regions(&self) -> usize {
        self.n_groups * self.regions_per_group
    }

    pub fn grid(&self) -> PeriodGrid {
        PeriodGrid {
            start: self.start_date,
            length_days: self.period_length_days,
            n_periods: self.n_periods,
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.covariate_betas.len()).map(|k| format!("x{k}")).collect()
    }

    /// Model predictors in design order: covariates, then lags.
    pub fn predictors(&self) -> Vec<String> {
        let mut out = self.covariate_names();
        out.extend(self.lag_betas.iter().map(|(k, _)| k.name().to_string()));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("simulation: {m}")));
        if self.n_groups == 0 || self.regions_per_group == 0 || self.n_regions() < 2 {
            return bad("need at least two regions");
        }
        if self.n_periods == 0 || self.period_length_days == 0 {
            return bad("period count and length must be positive");
        }
        if !(self.flow_density > 0.0 && self.flow_density <= 1.0) {
            return bad("flow_density must lie in (0, 1]");
        }
        if !(self.flow_sdlog >= 0.0 && self.population_sdlog >= 0.0 && self.contiguity_boost > 0.0) {
            return bad("log-normal spreads must be nonnegative and the contiguity boost positive");
        }
        if !(self.baseline_rate > 0.0) {
            return bad("baseline_rate must be positive");
        }
        if !(self.alpha >= 0.0 && self.sigma2_group >= 0.0 && self.sigma2_region >= 0.0) {
            return bad("alpha and variances must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.case_fatality) {
            return bad("case_fatality must lie in [0, 1]");
        }
        let numbers = [self.flow_meanlog, self.population_meanlog]
            .into_iter()
            .chain(self.covariate_betas.iter().copied())
            .chain(self.lag_betas.iter().map(|(_, b)| *b));
        for v in numbers {
            if !v.is_finite() {
                return bad("parameters must be finite");
            }
        }
        let mut seen = BTreeSet::new();
        for (k, _) in &self.lag_betas {
            if matches!(k, LagKind::NetworkDelta | LagKind::SpatialDelta) {
                return Err(Error::Config(format!(
                    "simulation: `{}` uses the period being generated and cannot drive it",
                    k.name()
                )));
            }
            if !seen.insert(*k) {
                return bad("lag predictor listed twice");
            }
        }
        Ok(())
    }
}

/// Everything needed to judge an estimator against the generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub config: SimConfig,
    pub outcome: Outcome,
    /// Design column names, `intercept` first.
    pub terms: Vec<String>,
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub sigma2_group: f64,
    pub sigma2_region: f64,
    pub group_effects: Vec<f64>,
    pub region_effects: Vec<f64>,
    /// Conditional means `[region][period]`.
    pub mu: Vec<Vec<f64>>,
}

impl SimTruth {
    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|i| self.beta[i])
    }

    /// The generating model as a specification.
    pub fn model_spec(&self, levels: &[RandomLevel]) -> ModelSpec {
        let preds = self.config.predictors();
        let refs: Vec<&str> = preds.iter().map(String::as_str).collect();
        ModelSpec::new(self.outcome, &refs).with_random_levels(levels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub panel: Panel,
    pub network: FlowNetwork,
    pub contiguity: ContiguityGraph,
    pub truth: SimTruth,
}

/// One NB2 draw with mean `mu` and dispersion `alpha` (Poisson at 0).
pub fn draw_nb<R: Rng + ?Sized>(rng: &mut R, mu: f64, alpha: f64) -> Result<u64> {
    if !(mu.is_finite() && (0.0..=MU_MAX).contains(&mu)) {
        return Err(Error::InvalidData(format!("simulated mean {mu:e} is out of range")));
    }
    let lambda = if alpha > 0.0 {
        let g = Gamma::new(1.0 / alpha, alpha * mu).map_err(|e| Error::InvalidData(format!("gamma draw: {e}")))?;
        g.sample(rng)
    } else {
        mu
    };
    if !(lambda > 0.0) {
        return Ok(0);
    }
    let p = Poisson::new(lambda).map_err(|e| Error::InvalidData(format!("Poisson draw: {e}")))?;
    Ok(p.sample(rng) as u64)
}

fn region_id(i: usize, width: usize) -> RegionId {
    RegionId::new(format!("R{i:0width$}")).expect("non-empty id")
}

/// Queen contiguity on a row-major square grid.
fn queen_grid(ids: &[RegionId]) -> ContiguityGraph {
    let n = ids.len();
    let w = (n as f64).sqrt().ceil() as usize;
    let mut adj: BTreeMap<RegionId, BTreeSet<RegionId>> = ids.iter().map(|r| (r.clone(), BTreeSet::new())).collect();
    for i in 0..n {
        let (ri, ci) = ((i / w) as i64, (i % w) as i64);
        for dr in -1..=1i64 {
            for dc in -1..=1i64 {
                let (r, c) = (ri + dr, ci + dc);
                if (dr, dc) == (0, 0) || r < 0 || c < 0 || c >= w as i64 {
                    continue;
                }
                let j = (r * w as i64 + c) as usize;
                if j < n {
                    adj.get_mut(&ids[i]).expect("present").insert(ids[j].clone());
                }
            }
        }
    }
    ContiguityGraph::new(adj).expect("grid adjacency is symmetric")
}

fn flows<R: Rng>(rng: &mut R, cfg: &SimConfig, ids: &[RegionId], contig: &ContiguityGraph) -> Result<FlowNetwork> {
    let n = ids.len();
    let attract = LogNormal::new(0.0, 1.0).expect("valid");
    let pull: Vec<f64> = (0..n).map(|_| attract.sample(rng)).collect();
    let size = LogNormal::new(cfg.flow_meanlog, cfg.flow_sdlog)
        .map_err(|e| Error::Config(format!("flow weights: {e}")))?;
    let extra = Binomial::new((n - 2) as u64, cfg.flow_density).expect("valid probability");
    let mut edges = Vec::new();
    for (i, home) in ids.iter().enumerate() {
        let degree = (1 + extra.sample(rng) as usize).min(n - 1);
        let weight = |j: usize| {
            if j == i {
                0.0
            } else if contig.are_adjacent(home, &ids[j]) {
                pull[j] * cfg.contiguity_boost
            } else {
                pull[j]
            }
        };
        let mut picked = sample_weighted(rng, n, weight, degree)
            .map_err(|e| Error::InvalidData(format!("flow destinations: {e}")))?
            .into_vec();
        picked.sort_unstable();
        for j in picked {
            let commuters = size.sample(rng).round().max(1.0) as u64;
            edges.push(FlowEdge {
                origin: home.clone(),
                dest: ids[j].clone(),
                commuters,
            });
        }
    }
    FlowNetwork::new(edges, SelfFlows::Exclude)
}

fn lag_value(kind: LagKind, net: &FlowNetwork, contig: &ContiguityGraph, prior: &RateMap, home: &RegionId) -> Result<f64> {
    match kind {
        LagKind::NetworkLag => exposure::network_lag(net, prior, home, NetworkFilter::All, contig)?
            .ok_or_else(|| Error::InvalidData(format!("region `{home}` has no outgoing flow"))),
        LagKind::SpatialLag => Ok(exposure::spatial_lag(contig, prior, home)?.value),
        LagKind::OwnRateLag => Ok(prior[home]),
        LagKind::NetworkDelta | LagKind::SpatialDelta => unreachable!("rejected by validate"),
    }
}

/// Draws a full synthetic dataset. Identical configs give identical output.
///
/// The first period has no prior rates; its lag predictors are set to 0,
/// and it is dropped from any design that uses lags.
pub fn generate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_regions();
    let t_count = cfg.n_periods;
    let digits = (n - 1).to_string().len();
    let ids: Vec<RegionId> = (0..n).map(|i| region_id(i, digits)).collect();
    let gdigits = (cfg.n_groups - 1).to_string().len();
    let groups: Vec<String> = (0..n).map(|i| format!("G{:0gdigits$}", i / cfg.regions_per_group)).collect();

    // structure
    let contig = queen_grid(&ids);
    let net = flows(&mut rng, cfg, &ids, &contig)?;
    let pop_dist = LogNormal::new(cfg.population_meanlog, cfg.population_sdlog)
        .map_err(|e| Error::Config(format!("population: {e}")))?;
    let population: Vec<u64> = (0..n).map(|_| pop_dist.sample(&mut rng).round().max(1.0) as u64).collect();
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    let covariates: Vec<Covariate> = cfg
        .covariate_names()
        .into_iter()
        .map(|name| Covariate {
            name,
            values: (0..n).map(|_| std_normal.sample(&mut rng)).collect(),
        })
        .collect();
    let group_effects: Vec<f64> = (0..cfg.n_groups).map(|_| cfg.sigma2_group.sqrt() * std_normal.sample(&mut rng)).collect();
    let region_effects: Vec<f64> = (0..n).map(|_| cfg.sigma2_region.sqrt() * std_normal.sample(&mut rng)).collect();

    // static part of the linear predictor, checked before any count is drawn
    let intercept = (cfg.baseline_rate / PER_POPULATION).ln();
    let fixed: Vec<f64> = (0..n)
        .map(|i| {
            let mut eta = (population[i] as f64).ln() + intercept + group_effects[i / cfg.regions_per_group] + region_effects[i];
            for (c, b) in covariates.iter().zip(&cfg.covariate_betas) {
                eta += b * c.values[i];
            }
            eta
        })
        .collect();
    if let Some(i) = fixed.iter().position(|e| !(e.exp() <= MU_MAX)) {
        return Err(Error::Config(format!(
            "simulation: mean for region `{}` would be {:e} before spillover, above {MU_MAX:e}",
            ids[i],
            fixed[i].exp()
        )));
    }

    // outcome dynamics
    let mut cases = vec![vec![0u64; t_count]; n];
    let mut mu = vec![vec![0.0; t_count]; n];
    let mut prior: Option<RateMap> = None;
    for t in 0..t_count {
        for i in 0..n {
            let mut eta = fixed[i];
            if let Some(rates) = &prior {
                for (kind, b) in &cfg.lag_betas {
                    eta += b * lag_value(*kind, &net, &contig, rates, &ids[i])?;
                }
            }
            let m = eta.exp();
            if !(m <= MU_MAX) {
                return Err(Error::InvalidData(format!(
                    "simulated mean for region `{}` in period {} exceeds {MU_MAX:e}; spillover feedback is explosive",
                    ids[i],
                    t + 1
                )));
            }
            mu[i][t] = m;
            cases[i][t] = draw_nb(&mut rng, m, cfg.alpha)?;
        }
        prior = Some(
            ids.iter()
                .enumerate()
                .map(|(i, r)| Ok((r.clone(), exposure::case_rate(cases[i][t] as f64, population[i] as f64)?)))
                .collect::<Result<RateMap>>()?,
        );
    }
    let deaths: Vec<Vec<u64>> = cases
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| Binomial::new(c, cfg.case_fatality).expect("valid probability").sample(&mut rng))
                .collect()
        })
        .collect();

    let panel = Panel::new(PanelParts {
        regions: ids,
        periods: cfg.grid().periods()?,
        cases,
        deaths,
        signed_cases: None,
        signed_deaths: None,
        population,
        groups,
        covariates,
    })?;
    let mut terms = vec![crate::design::INTERCEPT.to_string()];
    terms.extend(cfg.predictors());
    let mut beta = vec![intercept];
    beta.extend(cfg.covariate_betas.iter().copied());
    beta.extend(cfg.lag_betas.iter().map(|(_, b)| *b));
    Ok(Simulation {
        panel,
        network: net,
        contiguity: contig,
        truth: SimTruth {
            config: cfg.clone(),
            outcome: Outcome::Cases,
            terms,
            beta,
            alpha: cfg.alpha,
            sigma2_group: cfg.sigma2_group,
            sigma2_region: cfg.sigma2_region,
            group_effects,
            region_effects,
            mu,
        },
    })
}

/// File names written by [`write_dataset`].
pub const CASES_FILE: &str = "cases.csv";
pub const FLOWS_FILE: &str = "flows.csv";
pub const CONTIGUITY_FILE: &str = "contiguity.csv";
pub const COVARIATES_FILE: &str = "covariates.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Writes the dataset in the ingest schemas plus the truth record; returns
/// the written paths.
pub fn write_dataset(sim: &Simulation, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &sim.panel;
    let table = RegionTable {
        regions: p.regions().to_vec(),
        groups: p.groups().to_vec(),
        population: p.population().to_vec(),
        covariates: p.covariates().to_vec(),
    };
    let paths: Vec<PathBuf> = [CASES_FILE, FLOWS_FILE, CONTIGUITY_FILE, COVARIATES_FILE, TRUTH_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_cases(&paths[0], &cumulative_rows(p, sim.truth.config.grid())?)?;
    write_flows(&paths[1], &sim.network)?;
    write_contiguity(&paths[2], &sim.contiguity)?;
    write_covariates(&paths[3], &table)?;
    write_text(&paths[4], &serde_json::to_string_pretty(&sim.truth)?)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, Mode};
    use crate::ingest::{build_panel, parse_cases, parse_contiguity, parse_covariates, parse_flows, UnknownRegionPolicy};

    fn small() -> SimConfig {
        SimConfig {
            n_groups: 4,
            regions_per_group: 6,
            n_periods: 5,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn nb_draws_match_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        for &(mu, alpha) in &[(4.0, 0.8), (30.0, 0.2), (2.5, 0.0)] {
            let ys: Vec<f64> = (0..n).map(|_| draw_nb(&mut rng, mu, alpha).unwrap() as f64).collect();
            let mean = ys.iter().sum::<f64>() / n as f64;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let v = mu + alpha * mu * mu;
            // standard error of the sample variance from the empirical fourth moment
            let m4 = ys.iter().map(|y| (y - mean).powi(4)).sum::<f64>() / n as f64;
            let se_var = ((m4 - v * v) / n as f64).sqrt();
            assert!((mean - mu).abs() < 3.0 * (v / n as f64).sqrt(), "mean {mean} vs {mu}");
            assert!((var - v).abs() < 3.0 * se_var, "var {var} vs {v} (se {se_var})");
        }
    }

    #[test]
    fn output_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SimConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn structure_is_valid() {
        let s = generate(&small()).unwrap();
        let n = 24;
        assert_eq!(s.panel.n_regions(), n);
        assert_eq!(s.contiguity.regions().count(), n);
        // 5-wide grid: corner has 3 queen neighbours, interior 8
        assert_eq!(s.contiguity.degree(&s.panel.regions()[0]), 3);
        assert_eq!(s.contiguity.degree(&s.panel.regions()[6]), 8);
        for r in s.panel.regions() {
            assert!(s.network.out_total(r) > 0);
            let w = exposure::network_weights(&s.network, r, NetworkFilter::All, &s.contiguity).unwrap();
            assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.panel.groups()[5], "G0");
        assert_eq!(s.panel.groups()[6], "G1");
    }

    #[test]
    fn generating_lags_equal_exposure_columns() {
        let s = generate(&small()).unwrap();
        let cols = exposure::build_lag_columns(&s.panel, &s.network, &s.contiguity, NetworkFilter::All, Mode::Panel).unwrap();
        let b0 = s.truth.beta[0];
        let bx = s.truth.beta[1];
        let bn = s.truth.beta[2];
        let x = &s.panel.covariates()[0].values;
        for i in 0..24 {
            let u = s.truth.group_effects[i / 6] + s.truth.region_effects[i];
            for t in 1..5 {
                let eta = (s.panel.population()[i] as f64).ln() + b0 + u + bx * x[i] + bn * cols.network_lag[i][t].unwrap();
                assert!((eta.exp() / s.truth.mu[i][t] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn poisson_reduction_without_dispersion() {
        let cfg = SimConfig {
            n_groups: 20,
            regions_per_group: 20,
            alpha: 0.0,
            sigma2_group: 0.0,
            sigma2_region: 0.0,
            seed: 3,
            ..Default::default()
        };
        let s = generate(&cfg).unwrap();
        let mut dev = 0.0;
        let mut cells = 0.0;
        for i in 0..400 {
            for t in 0..cfg.n_periods {
                let (y, m) = (s.panel.cases()[i][t] as f64, s.truth.mu[i][t]);
                dev += 2.0 * (if y > 0.0 { y * (y / m).ln() } else { 0.0 } - (y - m));
                cells += 1.0;
            }
        }
        // Poisson deviance at the true means has mean ~ cells and sd ~ sqrt(2 cells)
        assert!((dev - cells).abs() < 4.0 * (2.0 * cells).sqrt(), "deviance {dev} over {cells} cells");
    }

    #[test]
    fn overflow_is_rejected_before_sampling() {
        let cfg = SimConfig {
            baseline_rate: 1e20,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let cfg = SimConfig {
            lag_betas: vec![(LagKind::NetworkDelta, 0.1)],
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let cfg = SimConfig {
            lag_betas: vec![(LagKind::OwnRateLag, 1.0)],
            ..small()
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn csv_round_trip_rebuilds_the_panel() {
        let s = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&s, dir.path()).unwrap();
        let table = parse_covariates(&dir.path().join(COVARIATES_FILE)).unwrap();
        let known = table.region_set();
        let (raw, _) = parse_cases(&dir.path().join(CASES_FILE), Some(&known), UnknownRegionPolicy::Fail).unwrap();
        let (panel, rep) = build_panel(&raw, &table, s.truth.config.grid(), UnknownRegionPolicy::Fail).unwrap();
        let (net, _) = parse_flows(&dir.path().join(FLOWS_FILE), Some(&known), UnknownRegionPolicy::Fail, SelfFlows::Exclude).unwrap();
        let (contig, _) = parse_contiguity(&dir.path().join(CONTIGUITY_FILE), Some(&known), UnknownRegionPolicy::Fail).unwrap();
        assert_eq!(rep.clamped_cells, 0);
        assert_eq!(panel, s.panel);
        assert_eq!(net, s.network);
        assert_eq!(contig, s.contiguity);
        let truth: SimTruth = serde_json::from_str(&std::fs::read_to_string(dir.path().join(TRUTH_FILE)).unwrap()).unwrap();
        assert_eq!(truth, s.truth);
        let spec = s.truth.model_spec(&[]);
        let lags = exposure::build_lag_columns(&panel, &net, &contig, NetworkFilter::All, Mode::Panel).unwrap();
        let lags0 = exposure::build_lag_columns(&s.panel, &s.network, &s.contiguity, NetworkFilter::All, Mode::Panel).unwrap();
        assert_eq!(
            build_design(&panel, Some(&lags), &spec).unwrap().to_csv_string(),
            build_design(&s.panel, Some(&lags0), &spec).unwrap().to_csv_string()
        );
    }
}
