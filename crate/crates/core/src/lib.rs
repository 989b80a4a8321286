//! Variable speed limit control of LWR traffic on a single road.
//!
//! The crate simulates the road with a Godunov scheme, evaluates the tracking
//! cost of a speed-limit schedule, differentiates it with closed-form needle
//! variations and optimizes it with three policies: an instantaneous feedback
//! law, random exploration over binary schedules and projected gradient
//! descent.
//!
//! ```
//! use vsl::{Problem, Signal};
//!
//! let problem = Problem::test1().unwrap();
//! let v = problem.constant_control(1.0).unwrap();
//! let eval = problem.evaluate(&v).unwrap();
//! assert!(eval.cost.value > 0.0);
//! ```

pub mod cost;
pub mod error;
pub mod letmap;
pub mod model;
pub mod policies;
pub mod problem;
pub mod scenario;
pub mod solver;

pub use cost::{
    cost, fd_variation, measure_integral, needle_variation, CostReport, GradientOptions, IntegralWeights,
    NeedleOptions, NeedleSide, Sensitivity, TargetTerm, VariationVector,
};
pub use error::{Error, Result};
pub use letmap::{analytic_outflow, build_let, exit_time_offsets, AnalyticOutflow, ExitTimeMap, LetTable};
pub use model::{flux, projection, total_variation, DensityField, FluxParams, Preset, Side, Signal};
pub use policies::{
    fixed_speed, gradient_descent, instantaneous_policy, random_exploration, GdmOptions, PolicyKind, PolicyMeta,
    PolicyResult, ReOptions,
};
pub use problem::{Evaluation, Problem};
pub use solver::{godunov_flux, simulate, step, InitialDensity, SimulationTrace, SolverConfig};
