//! Two-stage line parameter estimation for multiphase unbalanced distribution
//! feeders, driven by micro-PMU style time series.
//!
//! The crate bundles a synthetic measurement generator and the estimator it is
//! meant to exercise:
//!
//! * [`network`] — feeder model: buses with partial phase sets, branches with
//!   3x3 complex impedance blocks, bus admittance assembly, feeder file I/O.
//! * [`powerflow`] — polar power injections, Newton-Raphson operating points,
//!   analytic Jacobians with respect to states and line parameters.
//! * [`sim`] — stochastic dynamic-load simulation (an Ornstein-Uhlenbeck
//!   process around the operating point) and PMU measurement noise.
//! * [`stage1`] — covariance regression: lagged sample covariances, matrix
//!   logarithm recovery of the state matrix, WLS load time constants, and the
//!   initial per-branch conductance/susceptance estimates.
//! * [`stage2`] — Broyden quasi-Newton refinement of the stage-1 estimates on
//!   the power mismatch equations, plus the end-to-end pipeline.
//! * [`harness`] — Monte Carlo experiment driver, MAPE metric and report
//!   emission.

pub mod bundled;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod powerflow;
pub mod sim;
pub mod stage1;
pub mod stage2;

pub use network::{
    BranchAdmittance, BranchImpedance, BusAdmittance, NetworkModel, Phase, PhaseSet,
};
pub use powerflow::OperatingPoint;
pub use sim::{LoadDynamics, MeasurementSeries, NoiseSpec};
pub use stage2::run_pipeline;
