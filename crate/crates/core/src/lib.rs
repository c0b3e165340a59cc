//! Data pipeline, training orchestrator and benchmark scoring for multi-task
//! embodied planning models.

pub mod evalharness;
pub mod hash;
pub mod ingest;
pub mod monitor;
pub mod orchestrator;
pub mod rng;
pub mod sampler;
pub mod schema;
pub mod shardstore;

pub use evalharness::EvalReport;
pub use monitor::{Alert, AlertKind, MetricEvent, MetricKind};
pub use orchestrator::{RunConfig, RunError, RunSummary};
pub use sampler::SamplerState;
pub use schema::{
    validate_sample, Sample, SceneTag, SupervisionTarget, TaskType, Verdict, Violation, VisualInput, VisualKind,
};
pub use shardstore::{Cursor, ShardError, ShardReader};
