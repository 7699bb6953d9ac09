//! Few-shot class-incremental learning with session-trainable parameters.
//!
//! A small MLP feature extractor is trained on a base session, after which
//! each few-shot session updates only the lowest-magnitude fraction of the
//! extractor while the rest stays frozen. Classes are recognised by their
//! nearest prototype.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod protocol;
pub mod prototypes;

pub use data::{Dataset, Samples, SyntheticSpec};
pub use error::{Error, Result};
pub use losses::{LossWeights, Reduction, TripletBatch};
pub use masking::SessionMask;
pub use model::{LayerSlot, ModelConfig, ParamAddr, ParamKey, ParamKind, ParameterStore};
pub use numerics::{Gradients, Tape, Tensor2};
pub use protocol::{
    build_schedule, run_protocol, ArchConfig, Method, MetricsReport, ProtocolConfig, ScheduleSpec, SessionSchedule,
    TrainConfig,
};
pub use prototypes::PrototypeRegistry;
