//! Control stack and closed-loop simulation harness for a tilt-rotor
//! quadcopter that rolls on two passive wheels.
//!
//! The crate covers the full loop: rigid-body plant with wheel contact
//! ([`sim`]), static tilt-rotor control allocation ([`allocation`]),
//! wrench-rate NMPC with contact-switched non-holonomic constraints
//! ([`nmpc`]), an external wrench estimator with servo-dynamics compensation
//! ([`estimator`]), parametric reference trajectories ([`trajectory`]) and a
//! scenario runner with metrics and CSV logs ([`harness`]).

pub mod allocation;
pub mod contact;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod math;
pub mod nmpc;
pub mod sim;
pub mod trajectory;
pub mod types;
pub mod vehicle;

pub use error::Error;
pub use math::{Quat, Vec3};
pub use types::{ActuatorCommands, ActuatorState, RigidBodyState, Wrench};
pub use vehicle::{VehicleConfig, VehicleParams, GRAVITY};
