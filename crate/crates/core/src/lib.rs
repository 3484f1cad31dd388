//! Simulation and certificate checks for passivity-based distributed convex
//! optimization.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod objective;
pub mod topology;
pub mod dynamics;
pub mod certify;
pub mod simulate;
pub mod scenario;

pub use certify::{
    centralized_solve, certified_indices, convergence_gate, directed_conditions, kkt_residual, quadratic_indices,
    sample_supply_rate, Block, ConvergenceGate, DirectedCertificate, EipClaim, EipReport, OracleSolution, StorageKind,
};
pub use dynamics::{AgentKind, AgentState, AgentSystem, ControllerSystem, NetworkSystem, Signals, StateLayout};
pub use error::{Error, Result};
pub use objective::{ConstraintSet, Equality, Inequality, Objective, ObjectiveKind};
pub use topology::{CommKind, CommStructure, CommVariant, NullspaceFailure};
pub use scenario::{
    file_header, generate_default_scenario, generate_split_scenario, load_scenario, parse_scenario, validate, BuiltScenario, ComponentOracle,
    GateResult, ScenarioSpec,
};
pub use simulate::{
    component_oracle, convergence_rate, integrate, lyapunov_about_terminal, lyapunov_series, ComponentTrace, Equilibrium,
    Method, NetworkEvent, RateFit, SimConfig, Trajectory,
};
