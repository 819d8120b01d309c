//! Data-driven stabilization of switched linear systems with unknown modes,
//! unknown switching times and bounded disturbances.
//!
//! The controller never sees the system matrices. It keeps a sliding window
//! of the last `T` input-state samples, watches the auxiliary function
//! `V(x) = x' P x`, injects a short excitation sequence when `V` stops
//! decreasing, and re-solves a robust semidefinite program on the window
//! until a stabilizing gain reappears.
//!
//! * [`numerics`]: SVD rank tests, spectral radius, discrete Lyapunov solver.
//! * [`plant`]: switched and fault-scheduled plants, disturbances.
//! * [`data_window`]: sample window, Hankel matrices, excitation levels.
//! * [`synthesis`]: robust and ideal programs and an interior-point solver.
//! * [`supervisor`]: the online excite/solve/hold logic.
//! * [`analysis`]: model-side bounds and trajectory checks.
//! * [`experiments`]: configuration files, runs and output files.

pub mod error;
pub mod numerics;
pub mod plant;
pub mod data_window;
pub mod synthesis;
pub mod supervisor;
pub mod analysis;
pub mod experiments;

pub use error::{Error, Result};
pub use experiments::{load_config, run_experiment, ExperimentConfig, RunResult};
pub use supervisor::{SupervisorConfig, SupervisorState};
pub use synthesis::{solve_robust_sdp, InteriorPoint, SdpSolution, SdpStatus};
