//! Transient gas network simulation, stability-constrained Koopman
//! identification of pipeline dynamics, and electricity–gas dispatch.

pub mod dispatch;
pub mod error;
pub mod evaluation;
pub mod gas_dynamics;
pub mod koopman;
pub mod lp;
pub mod network;
pub mod scenario;
pub mod snapshots;
pub mod transient_sim;
pub mod units;

pub use error::{Error, Result};
pub use gas_dynamics::{FrictionMode, GridState, PipelineParams};
pub use network::{GasNetworkSpec, GasNode, NodeRole, PipelineSpec};
pub use transient_sim::{BoundaryProfile, NetworkState, Trajectory};
pub use units::Bases;
pub use snapshots::{generate_snapshots, ExcitationConfig, SnapshotSet};
pub use koopman::{DelayConfig, KoopmanModel, ObservableSet, StabilityMode, TrainConfig};
pub use lp::{solve_lp, LinearProgram, LpSolution};
pub use dispatch::{
    assemble_lp, solve_dispatch, CouplingSpec, DispatchHorizon, DispatchSolution, GasDispatchSpec, GasModel,
    PowerSystemSpec,
};
pub use scenario::{PipelineRun, Scenario};
pub use evaluation::{compare_models, metrics, nle_evaluate, ErrorReport, NleSettings};
