//! Network- and spatially-lagged exposure measures.
//!
//! All rates are per 100,000 population. The network lag of a home region is
//! the commuter-share weighted average of destination rates; the spatial lag
//! is the unweighted mean over contiguous neighbors. Delta variants apply the
//! same weights to the per-region change `rate_t - rate_{t-1}`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::design::Mode;
use crate::error::{Error, Result};
use crate::network::{ContiguityGraph, FlowNetwork};
use crate::panel::{Panel, RegionId};

pub const PER_POPULATION: f64 = 100_000.0;

/// Rates keyed by region.
pub type RateMap = HashMap<RegionId, f64>;

/// Which destinations enter the network lag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkFilter {
    #[default]
    All,
    ContiguousOnly,
    NoncontiguousOnly,
}

impl FromStr for NetworkFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(NetworkFilter::All),
            "contiguous" | "contiguous_only" => Ok(NetworkFilter::ContiguousOnly),
            "noncontiguous" | "noncontiguous_only" => Ok(NetworkFilter::NoncontiguousOnly),
            other => Err(Error::Config(format!("unknown network filter `{other}`"))),
        }
    }
}

impl fmt::Display for NetworkFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetworkFilter::All => "all",
            NetworkFilter::ContiguousOnly => "contiguous",
            NetworkFilter::NoncontiguousOnly => "noncontiguous",
        })
    }
}

/// `cases / population * 100000`. Signed counts are allowed.
pub fn case_rate(cases: f64, population: f64) -> Result<f64> {
    if !(population > 0.0) {
        return Err(Error::InvalidData(format!(
            "population must be positive, got {population}"
        )));
    }
    Ok(cases / population * PER_POPULATION)
}

fn keeps(filter: NetworkFilter, contig: &ContiguityGraph, home: &RegionId, dest: &RegionId) -> bool {
    match filter {
        NetworkFilter::All => true,
        NetworkFilter::ContiguousOnly => contig.are_adjacent(home, dest),
        NetworkFilter::NoncontiguousOnly => !contig.are_adjacent(home, dest),
    }
}

/// Flow-share weights of the retained destinations of `home`, renormalized
/// over the retained set. `None` when no outgoing flow survives the filter.
pub fn network_weights<'a>(
    net: &'a FlowNetwork,
    home: &RegionId,
    filter: NetworkFilter,
    contig: &ContiguityGraph,
) -> Option<Vec<(&'a RegionId, f64)>> {
    let kept: Vec<_> = net
        .outgoing(home)
        .filter(|e| keeps(filter, contig, home, &e.dest))
        .collect();
    let total: u64 = kept.iter().map(|e| e.commuters).sum();
    if total == 0 {
        return None;
    }
    let total = total as f64;
    Some(
        kept.into_iter()
            .filter(|e| e.commuters > 0)
            .map(|e| (&e.dest, e.commuters as f64 / total))
            .collect(),
    )
}

/// Share of `home`'s outgoing commuters going to contiguous destinations.
pub fn contiguous_share(net: &FlowNetwork, home: &RegionId, contig: &ContiguityGraph) -> Option<f64> {
    let total = net.out_total(home);
    if total == 0 {
        return None;
    }
    let near: u64 = net
        .outgoing(home)
        .filter(|e| contig.are_adjacent(home, &e.dest))
        .map(|e| e.commuters)
        .sum();
    Some(near as f64 / total as f64)
}

fn weighted_rate(weights: &[(&RegionId, f64)], rates: &RateMap) -> Result<f64> {
    weights.iter().try_fold(0.0, |acc, (dest, w)| {
        rates
            .get(*dest)
            .map(|r| acc + w * r)
            .ok_or_else(|| Error::UnknownRegion {
                region: dest.to_string(),
                context: "network lag rates".into(),
            })
    })
}

/// Network lag of `home`; `Ok(None)` marks a missing value (no retained flow).
pub fn network_lag(
    net: &FlowNetwork,
    rates: &RateMap,
    home: &RegionId,
    filter: NetworkFilter,
    contig: &ContiguityGraph,
) -> Result<Option<f64>> {
    match network_weights(net, home, filter, contig) {
        Some(w) => weighted_rate(&w, rates).map(Some),
        None => Ok(None),
    }
}

/// Spatial lag value with an isolation flag (no neighbors → 0.0, isolated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialLag {
    pub value: f64,
    pub isolated: bool,
}

pub fn spatial_lag(contig: &ContiguityGraph, rates: &RateMap, home: &RegionId) -> Result<SpatialLag> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in contig.neighbors(home) {
        let r = rates.get(b).ok_or_else(|| Error::UnknownRegion {
            region: b.to_string(),
            context: "spatial lag rates".into(),
        })?;
        sum += r;
        count += 1;
    }
    if count == 0 {
        return Ok(SpatialLag {
            value: 0.0,
            isolated: true,
        });
    }
    Ok(SpatialLag {
        value: sum / count as f64,
        isolated: false,
    })
}

/// Network lag applied to the change `current - prior`.
pub fn network_delta_lag(
    net: &FlowNetwork,
    prior: &RateMap,
    current: &RateMap,
    home: &RegionId,
    filter: NetworkFilter,
    contig: &ContiguityGraph,
) -> Result<Option<f64>> {
    let Some(w) = network_weights(net, home, filter, contig) else {
        return Ok(None);
    };
    w.iter()
        .try_fold(0.0, |acc, (dest, wt)| {
            match (prior.get(*dest), current.get(*dest)) {
                (Some(p), Some(c)) => Ok(acc + wt * (c - p)),
                _ => Err(Error::UnknownRegion {
                    region: dest.to_string(),
                    context: "network delta rates".into(),
                }),
            }
        })
        .map(Some)
}

/// Spatial lag applied to the change `current - prior`.
pub fn spatial_delta_lag(
    contig: &ContiguityGraph,
    prior: &RateMap,
    current: &RateMap,
    home: &RegionId,
) -> Result<SpatialLag> {
    let mut change = RateMap::new();
    for b in contig.neighbors(home) {
        match (prior.get(b), current.get(b)) {
            (Some(p), Some(c)) => {
                change.insert(b.clone(), c - p);
            }
            _ => {
                return Err(Error::UnknownRegion {
                    region: b.to_string(),
                    context: "spatial delta rates".into(),
                })
            }
        }
    }
    spatial_lag(contig, &change, home)
}

/// Identifies one lag column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagKind {
    NetworkLag,
    NetworkDelta,
    SpatialLag,
    SpatialDelta,
    OwnRateLag,
}

impl LagKind {
    pub const ALL: [LagKind; 5] = [
        LagKind::NetworkLag,
        LagKind::NetworkDelta,
        LagKind::SpatialLag,
        LagKind::SpatialDelta,
        LagKind::OwnRateLag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LagKind::NetworkLag => "network_lag",
            LagKind::NetworkDelta => "network_delta",
            LagKind::SpatialLag => "spatial_lag",
            LagKind::SpatialDelta => "spatial_delta",
            LagKind::OwnRateLag => "own_rate_lag",
        }
    }

    pub fn from_name(name: &str) -> Option<LagKind> {
        LagKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Lag cell matrix `[region][period]`; `None` = unavailable or missing.
pub type LagMatrix = Vec<Vec<Option<f64>>>;

/// All lag columns for a panel. In panel mode the first period is always
/// unavailable; in cross-sectional mode there is one column computed from
/// cumulative totals and the delta columns are unavailable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagColumnSet {
    pub mode: Mode,
    pub filter: NetworkFilter,
    pub regions: Vec<RegionId>,
    pub period_labels: Vec<String>,
    pub network_lag: LagMatrix,
    pub network_delta: LagMatrix,
    pub spatial_lag: LagMatrix,
    pub spatial_delta: LagMatrix,
    pub own_rate_lag: LagMatrix,
    /// Regions with no contiguous neighbors (spatial lags fixed at 0.0).
    pub spatial_isolated: Vec<bool>,
}

impl LagColumnSet {
    pub fn column(&self, kind: LagKind) -> &LagMatrix {
        match kind {
            LagKind::NetworkLag => &self.network_lag,
            LagKind::NetworkDelta => &self.network_delta,
            LagKind::SpatialLag => &self.spatial_lag,
            LagKind::SpatialDelta => &self.spatial_delta,
            LagKind::OwnRateLag => &self.own_rate_lag,
        }
    }

    pub fn n_periods(&self) -> usize {
        self.period_labels.len()
    }
}

/// Signed per-period case rates of every region, one map per period.
pub fn period_rates(panel: &Panel) -> Result<Vec<RateMap>> {
    (0..panel.n_periods())
        .map(|t| {
            panel
                .regions()
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    case_rate(panel.signed_cases()[i][t] as f64, panel.population()[i] as f64)
                        .map(|v| (r.clone(), v))
                })
                .collect()
        })
        .collect()
}

/// Cumulative signed case rate of every region over all periods.
pub fn cumulative_rates(panel: &Panel) -> Result<RateMap> {
    panel
        .regions()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let total: i64 = panel.signed_cases()[i].iter().sum();
            case_rate(total as f64, panel.population()[i] as f64).map(|v| (r.clone(), v))
        })
        .collect()
}

fn with_cell<T>(res: Result<T>, region: &RegionId, period: &str) -> Result<T> {
    res.map_err(|e| match e {
        Error::UnknownRegion { region: r, context } => Error::UnknownRegion {
            region: r,
            context: format!("{context} (home `{region}`, period {period})"),
        },
        other => other,
    })
}

/// Computes every lag column for `panel`.
pub fn build_lag_columns(
    panel: &Panel,
    net: &FlowNetwork,
    contig: &ContiguityGraph,
    filter: NetworkFilter,
    mode: Mode,
) -> Result<LagColumnSet> {
    let n = panel.n_regions();
    let regions = panel.regions().to_vec();
    let spatial_isolated: Vec<bool> = regions.iter().map(|r| contig.degree(r) == 0).collect();
    match mode {
        Mode::Panel => {
            let t_count = panel.n_periods();
            if t_count < 2 {
                return Err(Error::InvalidData(
                    "lag columns need at least two periods".into(),
                ));
            }
            let rates = period_rates(panel)?;
            let mut set = LagColumnSet {
                mode,
                filter,
                regions: regions.clone(),
                period_labels: panel.periods().iter().map(|p| p.label.clone()).collect(),
                network_lag: vec![vec![None; t_count]; n],
                network_delta: vec![vec![None; t_count]; n],
                spatial_lag: vec![vec![None; t_count]; n],
                spatial_delta: vec![vec![None; t_count]; n],
                own_rate_lag: vec![vec![None; t_count]; n],
                spatial_isolated,
            };
            for t in 1..t_count {
                let label = &set.period_labels[t];
                let (prior, current) = (&rates[t - 1], &rates[t]);
                for (i, home) in regions.iter().enumerate() {
                    set.network_lag[i][t] =
                        with_cell(network_lag(net, prior, home, filter, contig), home, label)?;
                    set.network_delta[i][t] = with_cell(
                        network_delta_lag(net, prior, current, home, filter, contig),
                        home,
                        label,
                    )?;
                    set.spatial_lag[i][t] =
                        Some(with_cell(spatial_lag(contig, prior, home), home, label)?.value);
                    set.spatial_delta[i][t] = Some(
                        with_cell(spatial_delta_lag(contig, prior, current, home), home, label)?
                            .value,
                    );
                    set.own_rate_lag[i][t] = Some(prior[home]);
                }
            }
            Ok(set)
        }
        Mode::CrossSectional => {
            let rates = cumulative_rates(panel)?;
            let label = "cumulative".to_string();
            let mut set = LagColumnSet {
                mode,
                filter,
                regions: regions.clone(),
                period_labels: vec![label.clone()],
                network_lag: vec![vec![None]; n],
                network_delta: vec![vec![None]; n],
                spatial_lag: vec![vec![None]; n],
                spatial_delta: vec![vec![None]; n],
                own_rate_lag: vec![vec![None]; n],
                spatial_isolated,
            };
            for (i, home) in regions.iter().enumerate() {
                set.network_lag[i][0] =
                    with_cell(network_lag(net, &rates, home, filter, contig), home, &label)?;
                set.spatial_lag[i][0] =
                    Some(with_cell(spatial_lag(contig, &rates, home), home, &label)?.value);
                set.own_rate_lag[i][0] = Some(rates[home]);
            }
            Ok(set)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{FlowEdge, SelfFlows};
    use crate::panel::{PanelParts, Period};

    fn r(s: &str) -> RegionId {
        RegionId::new(s).unwrap()
    }

    fn net(edges: &[(&str, &str, u64)]) -> FlowNetwork {
        FlowNetwork::new(
            edges
                .iter()
                .map(|&(o, d, c)| FlowEdge {
                    origin: r(o),
                    dest: r(d),
                    commuters: c,
                })
                .collect(),
            SelfFlows::Exclude,
        )
        .unwrap()
    }

    fn rates(v: &[(&str, f64)]) -> RateMap {
        v.iter().map(|&(k, x)| (r(k), x)).collect()
    }

    #[test]
    fn case_rate_examples() {
        assert_eq!(case_rate(10.0, 10000.0).unwrap(), 100.0);
        assert_eq!(case_rate(0.0, 523.0).unwrap(), 0.0);
        assert_eq!(case_rate(30.0, 15000.0).unwrap(), 200.0);
        assert!(case_rate(1.0, 0.0).is_err());
        assert!(case_rate(1.0, -5.0).is_err());
        assert!(case_rate(-3.0, 1000.0).unwrap() < 0.0);
    }

    #[test]
    fn network_lag_hand_example() {
        let g = ContiguityGraph::default();
        let n = net(&[("A", "B", 60), ("A", "C", 40)]);
        let v = network_lag(&n, &rates(&[("B", 100.0), ("C", 200.0)]), &r("A"), NetworkFilter::All, &g)
            .unwrap()
            .unwrap();
        assert!((v - 140.0).abs() < 1e-12);
        let single = net(&[("A", "B", 7)]);
        let v = network_lag(&single, &rates(&[("B", 42.5)]), &r("A"), NetworkFilter::All, &g).unwrap();
        assert_eq!(v, Some(42.5));
        let v = network_lag(&n, &rates(&[("B", 0.0), ("C", 0.0)]), &r("A"), NetworkFilter::All, &g).unwrap();
        assert_eq!(v, Some(0.0));
    }

    #[test]
    fn network_lag_missing_vs_unknown() {
        let g = ContiguityGraph::default();
        let n = net(&[("A", "B", 60)]);
        // no outgoing flow at all → missing, not zero
        assert_eq!(
            network_lag(&n, &rates(&[("A", 1.0)]), &r("B"), NetworkFilter::All, &g).unwrap(),
            None
        );
        assert!(network_lag(&n, &RateMap::new(), &r("A"), NetworkFilter::All, &g).is_err());
    }

    #[test]
    fn filters_renormalize() {
        let (g, _) = ContiguityGraph::from_pairs([(r("A"), r("B"))]).unwrap();
        let n = net(&[("A", "B", 60), ("A", "C", 40)]);
        let rt = rates(&[("B", 100.0), ("C", 200.0)]);
        let c = network_lag(&n, &rt, &r("A"), NetworkFilter::ContiguousOnly, &g).unwrap();
        let nc = network_lag(&n, &rt, &r("A"), NetworkFilter::NoncontiguousOnly, &g).unwrap();
        assert_eq!(c, Some(100.0));
        assert_eq!(nc, Some(200.0));
        let only_far = net(&[("A", "C", 40)]);
        assert_eq!(
            network_lag(&only_far, &rt, &r("A"), NetworkFilter::ContiguousOnly, &g).unwrap(),
            None
        );
    }

    #[test]
    fn spatial_lag_examples() {
        let (g, _) = ContiguityGraph::from_pairs([(r("A"), r("B")), (r("A"), r("C"))]).unwrap();
        let g = g.with_regions([&r("Z")]);
        let rt = rates(&[("A", 5.0), ("B", 100.0), ("C", 300.0)]);
        assert_eq!(spatial_lag(&g, &rt, &r("A")).unwrap().value, 200.0);
        assert_eq!(spatial_lag(&g, &rt, &r("B")).unwrap().value, 5.0);
        let iso = spatial_lag(&g, &rt, &r("Z")).unwrap();
        assert_eq!(iso, SpatialLag { value: 0.0, isolated: true });
        assert!(spatial_lag(&g, &rates(&[("B", 1.0)]), &r("A")).is_err());
    }

    #[test]
    fn delta_lag_examples() {
        let (g, _) = ContiguityGraph::from_pairs([(r("A"), r("B")), (r("A"), r("C"))]).unwrap();
        let n = net(&[("A", "B", 60), ("A", "C", 40)]);
        let prior = rates(&[("B", 100.0), ("C", 100.0)]);
        let cur = rates(&[("B", 150.0), ("C", 150.0)]);
        let v = network_delta_lag(&n, &prior, &cur, &r("A"), NetworkFilter::All, &g).unwrap();
        assert!((v.unwrap() - 50.0).abs() < 1e-12);
        let s = spatial_delta_lag(&g, &prior, &cur, &r("A")).unwrap();
        assert!((s.value - 50.0).abs() < 1e-12);

        let prior = rates(&[("B", 100.0), ("C", 100.0)]);
        let cur = rates(&[("B", 110.0), ("C", 80.0)]);
        let v = network_delta_lag(&n, &prior, &cur, &r("A"), NetworkFilter::All, &g).unwrap();
        assert!((v.unwrap() - (-2.0)).abs() < 1e-12);

        let v = network_delta_lag(&n, &prior, &prior, &r("A"), NetworkFilter::All, &g).unwrap();
        assert_eq!(v, Some(0.0));
    }

    #[test]
    fn delta_sign_is_current_minus_prior() {
        let g = ContiguityGraph::default();
        let n = net(&[("A", "B", 1)]);
        let v = network_delta_lag(
            &n,
            &rates(&[("B", 10.0)]),
            &rates(&[("B", 30.0)]),
            &r("A"),
            NetworkFilter::All,
            &g,
        )
        .unwrap()
        .unwrap();
        assert!(v > 0.0, "rising destination rates must give a positive delta");
    }

    fn toy_panel(cases: Vec<Vec<u64>>, pop: Vec<u64>) -> Panel {
        let n = cases.len();
        let t = cases[0].len();
        let start = chrono::NaiveDate::from_ymd_opt(2020, 4, 1).unwrap();
        Panel::new(PanelParts {
            regions: (0..n).map(|i| r(&format!("R{i}"))).collect(),
            periods: Period::sequence(start, 14, t).unwrap(),
            deaths: vec![vec![0; t]; n],
            cases,
            signed_cases: None,
            signed_deaths: None,
            population: pop,
            groups: vec!["g".into(); n],
            covariates: vec![],
        })
        .unwrap()
    }

    #[test]
    fn two_by_two_panel_matches_cell_computation() {
        let panel = toy_panel(vec![vec![10, 20], vec![30, 5]], vec![1000, 2000]);
        let n = net(&[("R0", "R1", 3), ("R1", "R0", 5)]);
        let (g, _) = ContiguityGraph::from_pairs([(r("R0"), r("R1"))]).unwrap();
        let set = build_lag_columns(&panel, &n, &g, NetworkFilter::All, Mode::Panel).unwrap();
        // period 1 unavailable
        assert!(set.network_lag.iter().all(|row| row[0].is_none()));
        // rates t0: R0 = 1000, R1 = 1500; t1: R0 = 2000, R1 = 250
        assert_eq!(set.network_lag[0][1], Some(1500.0));
        assert_eq!(set.network_lag[1][1], Some(1000.0));
        assert_eq!(set.spatial_lag[0][1], Some(1500.0));
        assert_eq!(set.own_rate_lag[0][1], Some(1000.0));
        assert_eq!(set.own_rate_lag[1][1], Some(1500.0));
        assert_eq!(set.network_delta[0][1], Some(250.0 - 1500.0));
        assert_eq!(set.spatial_delta[1][1], Some(2000.0 - 1000.0));
    }

    #[test]
    fn identical_rates_give_identical_lags() {
        let panel = toy_panel(vec![vec![5, 5, 5]; 3], vec![1000; 3]);
        let n = net(&[("R0", "R1", 3), ("R0", "R2", 1), ("R1", "R2", 5), ("R2", "R0", 2)]);
        let (g, _) = ContiguityGraph::from_pairs([(r("R0"), r("R1")), (r("R1"), r("R2"))]).unwrap();
        let set = build_lag_columns(&panel, &n, &g, NetworkFilter::All, Mode::Panel).unwrap();
        for i in 0..3 {
            for t in 1..3 {
                let own = set.own_rate_lag[i][t].unwrap();
                assert!((set.network_lag[i][t].unwrap() - own).abs() < 1e-9);
                assert!((set.spatial_lag[i][t].unwrap() - own).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn contiguous_filter_flags_missing() {
        let panel = toy_panel(vec![vec![1, 2], vec![3, 4], vec![5, 6]], vec![100; 3]);
        let n = net(&[("R0", "R2", 3), ("R1", "R0", 1)]);
        let (g, _) = ContiguityGraph::from_pairs([(r("R0"), r("R1"))]).unwrap();
        let set =
            build_lag_columns(&panel, &n, &g, NetworkFilter::ContiguousOnly, Mode::Panel).unwrap();
        assert_eq!(set.network_lag[0][1], None);
        assert!(set.network_lag[1][1].is_some());
    }

    #[test]
    fn cross_sectional_uses_cumulative_rates() {
        let panel = toy_panel(vec![vec![10, 20], vec![30, 5]], vec![1000, 2000]);
        let n = net(&[("R0", "R1", 3)]);
        let g = ContiguityGraph::default();
        let set = build_lag_columns(&panel, &n, &g, NetworkFilter::All, Mode::CrossSectional).unwrap();
        assert_eq!(set.n_periods(), 1);
        assert!((set.network_lag[0][0].unwrap() - 1750.0).abs() < 1e-9);
        assert_eq!(set.own_rate_lag[0][0], Some(3000.0));
        assert_eq!(set.spatial_lag[0][0], Some(0.0));
        assert!(set.spatial_isolated[0]);
        assert_eq!(set.network_delta[0][0], None);
    }

    #[test]
    fn single_period_panel_rejected() {
        let panel = toy_panel(vec![vec![1]], vec![10]);
        let err = build_lag_columns(
            &panel,
            &net(&[]),
            &ContiguityGraph::default(),
            NetworkFilter::All,
            Mode::Panel,
        );
        assert!(err.is_err());
    }
}
