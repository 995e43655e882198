//! Predictions under every composition strategy, and the three metrics.

mod metrics;
mod predict;

pub use metrics::{metrics, Metrics};
pub use predict::{evaluate, predict_ensemble, predict_fused, DomainAccuracy, EvalReport, FusedPredictions};
