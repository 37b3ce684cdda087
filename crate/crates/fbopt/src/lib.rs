//! Online feedback optimization of exponentially stable LTI plants.
//!
//! A gradient flow on the plant's steady-state optimization problem is run in
//! closed loop with the plant itself, instead of against an algebraic model of
//! it. The toolkit certifies the largest controller gain `epsilon* = 1/(2 l b)`
//! for which the interconnection provably converges to the critical points of
//! the problem, simulates the loop with exact plant discretization, and tracks
//! a LaSalle function as a runtime convergence certificate.
//!
//! The `powergrid` module instantiates the machinery for frequency regulation,
//! congestion management, and economic re-dispatch on a DC-power-flow network
//! with swing and turbine-governor dynamics.

pub mod controller;
pub mod monitor;
pub mod numerics;
pub mod objective;
pub mod oracle;
pub mod plant;
pub mod powergrid;
pub mod sim;

pub use nalgebra;

pub use controller::{GradientController, StabilityCertificate};
pub use monitor::{LaSalleState, LambdaMatrix};
pub use objective::{Objective, PenaltyObjective};
pub use plant::{DiscretizedPlant, LtiPlant, SteadyStateMap};
pub use powergrid::{GridCase, GridEvent, GridPlant};
pub use sim::{Scenario, TrajectoryRecord};
