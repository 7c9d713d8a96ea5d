//! Commuter flow networks and contiguity graphs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::RegionId;

/// One directed origin → destination commuter count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEdge {
    pub origin: RegionId,
    pub dest: RegionId,
    pub commuters: u64,
}

/// Whether origin = destination flows count toward out-totals and lags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfFlows {
    #[default]
    Exclude,
    Include,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FlowNetworkParts {
    edges: Vec<FlowEdge>,
    #[serde(default)]
    self_flows: SelfFlows,
}

/// Weighted directed commuter network with cached per-origin out-totals.
///
/// Self-flows are always stored; under [`SelfFlows::Exclude`] they are left
/// out of `out_total` and of [`FlowNetwork::outgoing`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlowNetworkParts", into = "FlowNetworkParts")]
pub struct FlowNetwork {
    edges: Vec<FlowEdge>,
    self_flows: SelfFlows,
    out_total: BTreeMap<RegionId, u64>,
    by_origin: BTreeMap<RegionId, Vec<usize>>,
}

impl TryFrom<FlowNetworkParts> for FlowNetwork {
    type Error = Error;
    fn try_from(p: FlowNetworkParts) -> Result<Self> {
        FlowNetwork::new(p.edges, p.self_flows)
    }
}

impl From<FlowNetwork> for FlowNetworkParts {
    fn from(n: FlowNetwork) -> Self {
        FlowNetworkParts {
            edges: n.edges,
            self_flows: n.self_flows,
        }
    }
}

impl FlowNetwork {
    pub fn new(edges: Vec<FlowEdge>, self_flows: SelfFlows) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut out_total: BTreeMap<RegionId, u64> = BTreeMap::new();
        let mut by_origin: BTreeMap<RegionId, Vec<usize>> = BTreeMap::new();
        for (i, e) in edges.iter().enumerate() {
            if !seen.insert((e.origin.clone(), e.dest.clone())) {
                return Err(Error::InvalidData(format!(
                    "duplicate flow {} -> {}",
                    e.origin, e.dest
                )));
            }
            let total = out_total.entry(e.origin.clone()).or_insert(0);
            if e.origin == e.dest && self_flows == SelfFlows::Exclude {
                continue;
            }
            *total = total
                .checked_add(e.commuters)
                .ok_or_else(|| Error::InvalidData("commuter total overflow".into()))?;
            by_origin.entry(e.origin.clone()).or_default().push(i);
        }
        Ok(FlowNetwork {
            edges,
            self_flows,
            out_total,
            by_origin,
        })
    }

    /// Same edges under a different self-flow policy.
    pub fn with_self_flows(&self, policy: SelfFlows) -> FlowNetwork {
        FlowNetwork::new(self.edges.clone(), policy).expect("edges already validated")
    }

    pub fn edges(&self) -> &[FlowEdge] {
        &self.edges
    }

    pub fn self_flows(&self) -> SelfFlows {
        self.self_flows
    }

    /// Total outgoing commuters from `origin` (0 for unknown origins).
    pub fn out_total(&self, origin: &RegionId) -> u64 {
        self.out_total.get(origin).copied().unwrap_or(0)
    }

    pub fn origins(&self) -> impl Iterator<Item = &RegionId> {
        self.out_total.keys()
    }

    /// Edges leaving `origin` that count toward the out-total, in file order.
    pub fn outgoing<'a>(&'a self, origin: &RegionId) -> impl Iterator<Item = &'a FlowEdge> + 'a {
        self.by_origin
            .get(origin)
            .into_iter()
            .flatten()
            .map(move |&i| &self.edges[i])
    }

    /// All region ids mentioned as origin or destination.
    pub fn regions(&self) -> BTreeSet<RegionId> {
        self.edges
            .iter()
            .flat_map(|e| [e.origin.clone(), e.dest.clone()])
            .collect()
    }

    /// Keeps only edges whose endpoints satisfy `keep`.
    pub fn retain_regions(&self, keep: impl Fn(&RegionId) -> bool) -> FlowNetwork {
        let edges = self
            .edges
            .iter()
            .filter(|e| keep(&e.origin) && keep(&e.dest))
            .cloned()
            .collect();
        FlowNetwork::new(edges, self.self_flows).expect("subset of valid edges")
    }
}

/// Symmetric region adjacency without self-loops.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<RegionId, BTreeSet<RegionId>>", into = "BTreeMap<RegionId, BTreeSet<RegionId>>")]
pub struct ContiguityGraph {
    adjacency: BTreeMap<RegionId, BTreeSet<RegionId>>,
}

impl TryFrom<BTreeMap<RegionId, BTreeSet<RegionId>>> for ContiguityGraph {
    type Error = Error;
    fn try_from(adjacency: BTreeMap<RegionId, BTreeSet<RegionId>>) -> Result<Self> {
        ContiguityGraph::new(adjacency)
    }
}

impl From<ContiguityGraph> for BTreeMap<RegionId, BTreeSet<RegionId>> {
    fn from(g: ContiguityGraph) -> Self {
        g.adjacency
    }
}

/// Outcome of building a graph from possibly one-sided pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct SymmetrizeReport {
    /// Pairs `(a, b)` given without the reverse `(b, a)`.
    pub asymmetric_pairs: Vec<(RegionId, RegionId)>,
}

impl ContiguityGraph {
    /// Validates an adjacency map that must already be symmetric.
    pub fn new(adjacency: BTreeMap<RegionId, BTreeSet<RegionId>>) -> Result<Self> {
        for (a, nbrs) in &adjacency {
            for b in nbrs {
                if a == b {
                    return Err(Error::InvalidData(format!("self-loop on `{a}`")));
                }
                if !adjacency.get(b).is_some_and(|s| s.contains(a)) {
                    return Err(Error::InvalidData(format!(
                        "adjacency not symmetric: `{a}` -> `{b}`"
                    )));
                }
            }
        }
        Ok(ContiguityGraph { adjacency })
    }

    /// Builds a symmetric graph from undirected pairs, adding missing reverse
    /// edges and reporting which pairs were one-sided.
    pub fn from_pairs<I>(pairs: I) -> Result<(Self, SymmetrizeReport)>
    where
        I: IntoIterator<Item = (RegionId, RegionId)>,
    {
        let mut directed = BTreeSet::new();
        for (a, b) in pairs {
            if a == b {
                return Err(Error::InvalidData(format!("self-loop on `{a}`")));
            }
            directed.insert((a, b));
        }
        let mut report = SymmetrizeReport::default();
        let mut adjacency: BTreeMap<RegionId, BTreeSet<RegionId>> = BTreeMap::new();
        for (a, b) in &directed {
            if !directed.contains(&(b.clone(), a.clone())) {
                report.asymmetric_pairs.push((a.clone(), b.clone()));
            }
            adjacency.entry(a.clone()).or_default().insert(b.clone());
            adjacency.entry(b.clone()).or_default().insert(a.clone());
        }
        Ok((ContiguityGraph { adjacency }, report))
    }

    /// Registers regions with no neighbors so they appear in [`Self::regions`].
    pub fn with_regions<'a>(mut self, regions: impl IntoIterator<Item = &'a RegionId>) -> Self {
        for r in regions {
            self.adjacency.entry(r.clone()).or_default();
        }
        self
    }

    pub fn neighbors(&self, region: &RegionId) -> impl Iterator<Item = &RegionId> {
        self.adjacency.get(region).into_iter().flatten()
    }

    pub fn degree(&self, region: &RegionId) -> usize {
        self.adjacency.get(region).map_or(0, |s| s.len())
    }

    pub fn are_adjacent(&self, a: &RegionId, b: &RegionId) -> bool {
        self.adjacency.get(a).is_some_and(|s| s.contains(b))
    }

    pub fn regions(&self) -> impl Iterator<Item = &RegionId> {
        self.adjacency.keys()
    }

    /// Each undirected edge once, as `(a, b)` with `a < b`.
    pub fn pairs(&self) -> Vec<(RegionId, RegionId)> {
        self.adjacency
            .iter()
            .flat_map(|(a, nbrs)| {
                nbrs.iter()
                    .filter(move |b| a < *b)
                    .map(move |b| (a.clone(), b.clone()))
            })
            .collect()
    }

    pub fn retain_regions(&self, keep: impl Fn(&RegionId) -> bool) -> ContiguityGraph {
        let adjacency = self
            .adjacency
            .iter()
            .filter(|(a, _)| keep(a))
            .map(|(a, nbrs)| (a.clone(), nbrs.iter().filter(|b| keep(b)).cloned().collect()))
            .collect();
        ContiguityGraph { adjacency }
    }
}
