//! Discrete-event harness: scenarios, the engine and metrics.

pub mod engine;
pub mod event;
pub mod metrics;
pub mod scenario;

pub use engine::{run, run_config, FlowStats, RunOutput};
pub use metrics::{summarize, summarize_window, write_csv, FlowSummary, MetricsRecord, Summary};
pub use scenario::{Scenario, ScenarioError, SimConfig};
