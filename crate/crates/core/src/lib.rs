//! Topology-aware robust optimization (TRO) over grouped data.
//!
//! The crate covers the full pipeline:
//!
//! 1. **Topology learning** ([`diffusion`], [`graph`]): either ingest a
//!    physical adjacency between groups or learn one from data with a
//!    diffusion Earth Mover's Distance between multiscale group densities.
//! 2. **Topological prior** ([`centrality`]): betweenness centrality of the
//!    training groups, normalized with a softmax.
//! 3. **Learning on topology** ([`optim`]): a primal-dual loop that descends
//!    on model parameters and ascends on group mixture weights, anchored to
//!    the prior by a squared-distance penalty. ERM, Group DRO and
//!    importance-weighted ERM baselines share the same machinery.
//!
//! Supporting modules provide small differentiable predictors with analytic
//! gradients ([`model`]), synthetic grouped datasets and CSV ingestion
//! ([`data`]), and per-group metrics with hop-distance aggregation
//! ([`eval`]).

pub mod centrality;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod simplex;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
pub use simplex::SimplexVector;
