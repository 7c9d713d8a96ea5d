//! Spillover exposure measures over region panels linked by commuter flow
//! networks, negative binomial (mixed) count models, permutation importance
//! and propensity-weighted causal effects, with a simulation oracle.

pub mod causal;
pub mod design;
pub mod error;
pub mod exposure;
pub mod ingest;
pub mod negbin;
pub mod network;
pub mod optim;
pub mod panel;
pub mod permute;
pub mod pipeline;
pub mod simulate;

pub use design::{build_design, DesignTable, Mode, ModelSpec, Outcome, RandomLevel};
pub use error::{Error, Result};
pub use exposure::{build_lag_columns, LagColumnSet, LagKind, NetworkFilter};
pub use network::{ContiguityGraph, FlowEdge, FlowNetwork, SelfFlows};
pub use panel::{Panel, PanelParts, Period, RegionId};
