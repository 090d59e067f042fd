//! Physics-informed consistency models for elliptic PDEs on the unit square.
//!
//! The crate covers finite-difference operators and solvers, dataset
//! generation, the TrigFlow consistency parameterization, the split-decoder
//! network, two-stage training with self-adaptive weights, projection-based
//! constrained sampling and evaluation.

pub mod config;
pub mod consistency;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod grid;
pub mod inference;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod training;

pub use config::RunConfig;
pub use consistency::{ConsistencyModel, TangentMode, TimePoint, TimeProposal};
pub use datagen::{generate_dataset, Dataset, GenOptions, NormStats};
pub use error::{Error, Result};
pub use eval::{EvalReport, ManifoldSpec, PdeStudyConfig, ToyConfig, ToyMode};
pub use grid::{Grid2D, GridField, JointState, PdeKind};
pub use inference::{make_schedule, sample_unconditional, solve_constrained, Mask, ScheduleKind, TimeSchedule};
pub use nn::{Checkpoint, Net, Network, NetworkSpec, Phase, SplitConvNet, ToyMlp, WeightHead};
pub use params::Tensor;
pub use training::{Physics, SAWeights, StageReport, TrainConfig};
