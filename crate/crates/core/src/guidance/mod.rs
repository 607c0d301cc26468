//! Noise schedules, noise-prediction backends and the score distillation
//! gradient.

mod backend;
mod conditions;
mod oracle;
mod registry;
mod schedule;
mod sds;

pub use backend::{BackendKind, Codec, ConditionedBackend, GuidanceBackend, IdentityCodec, NoisePredictor};
pub use conditions::{depth_condition, CameraDelta, ConditionSet};
pub use oracle::{AnalyticOracle, GaussianPosterior, PoseTargetOracle, TargetRenderer};
pub use registry::{BackendContext, BackendFactory, BackendRegistry};
pub use schedule::{BetaSchedule, NoiseSchedule, ScheduleConfig};
pub use sds::{sds_gradient, sds_gradient_at, SdsConfig, SdsSample, Weighting};
