//! Federated block coordinate descent simulator.
//!
//! Clients train locally, upload only their assigned parameter block plus a
//! shared block, and the server averages blocks and applies heavy-ball
//! momentum per block. Everything runs in-process over a metered message bus.

pub mod algorithms;
pub mod compression;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod param_space;
pub mod problems;
pub mod seeding;
pub mod sweep;
pub mod transport;

pub use algorithms::{ControlScaling, ControlState, LocalConfig, LocalRule, LocalSteps};
pub use config::{ExperimentConfig, RawConfig};
pub use experiment::{run_experiment, Experiment};
pub use compression::{CompressedPayload, CompressionConfig, FloatUnit, KSelect, Scheme};
pub use data::{ClientShard, PartitionSpec};
pub use error::{Error, Result};
pub use federation::{FederatedProblem, RoundConfig, RoundPlan, ServerState};
pub use metrics::{FloatsToTarget, RoundLedger, RoundRecord, Target};
pub use param_space::{BlockId, BlockPartition, MomentumState, ParamVector};
pub use problems::{Dataset, Objective, ObjectiveKind};
pub use transport::{Bus, Meter, WireMessage};
