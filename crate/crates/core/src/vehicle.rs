//! Vehicle parameterization and its configuration-file schema.
//!
//! All quantities are SI. The shipped defaults describe a ~1.5 kg tilt-rotor
//! quadcopter in a symmetric X layout with two passive wheels on one opposing
//! arm pair; geometry and coefficients are configuration-driven and
//! replaceable (see `scenarios/vehicle.toml` for the documented schema).

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math::Vec3;

/// Standard gravity magnitude [m/s²]; the inertial gravity vector is
/// `(0, 0, -GRAVITY)` in ENU.
pub const GRAVITY: f64 = 9.81;

/// Gravity vector in the inertial ENU frame [m/s²].
pub fn gravity_vector() -> Vec3 {
    Vec3::new(0.0, 0.0, -GRAVITY)
}

/// Physical vehicle parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleParams {
    /// Total mass [kg].
    pub mass: f64,
    /// Inertia tensor about the CoM [kg·m²], body frame. Symmetric
    /// positive-definite.
    pub inertia: Matrix3<f64>,
    /// Thrust coefficient c_t [N·s²/rad²] mapping Ω² to thrust.
    pub thrust_coeff: f64,
    /// Rotor drag-torque coefficient c_q [N·m·s²/rad²].
    pub drag_torque_coeff: f64,
    /// Zeroes the drag-torque contribution in the allocation matrix.
    pub neglect_drag_torque: bool,
    /// Rotor frame origins in the body frame [m].
    pub rotor_positions: [Vec3; 4],
    /// Unit vectors along each arm's central axis, pointing outward.
    pub arm_axes: [Vec3; 4],
    /// Spin direction per rotor: +1 counterclockwise, −1 clockwise.
    pub spin_dirs: [f64; 4],
    /// Passive wheel radius [m].
    pub wheel_radius: f64,
    /// Tilt-servo first-order time constant [s].
    pub servo_tau: f64,
    /// Per-rotor speed limit [rad/s].
    pub rotor_speed_max: f64,
    /// Mechanical servo range [rad], (lo, hi).
    pub tilt_range: (f64, f64),
}

impl VehicleParams {
    /// Validates mass/inertia/geometry invariants. Rank of the allocation
    /// matrix is checked separately by `allocation::build_allocation`, which
    /// [`validate_full`](Self::validate_full) also runs.
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.mass > 0.0) {
            return Err(Error::InvalidParams(format!("mass {} must be > 0", self.mass)));
        }
        for (name, v) in [
            ("thrust_coeff", self.thrust_coeff),
            ("wheel_radius", self.wheel_radius),
            ("servo_tau", self.servo_tau),
            ("rotor_speed_max", self.rotor_speed_max),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} {v} must be > 0")));
            }
        }
        if self.drag_torque_coeff < 0.0 {
            return Err(Error::InvalidParams("drag_torque_coeff must be >= 0".into()));
        }
        if self.tilt_range.0 >= self.tilt_range.1 {
            return Err(Error::InvalidParams("tilt_range lo must be < hi".into()));
        }
        // Inertia: symmetric within 1e-9, positive definite.
        let sym_err = (self.inertia - self.inertia.transpose()).abs().max();
        if sym_err > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "inertia asymmetry {sym_err:e} exceeds 1e-9"
            )));
        }
        if self.inertia.cholesky().is_none() {
            return Err(Error::InvalidParams("inertia is not positive definite".into()));
        }
        for (i, a) in self.arm_axes.iter().enumerate() {
            if (a.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParams(format!(
                    "arm_axes[{i}] norm {} not unit within 1e-9",
                    a.norm()
                )));
            }
        }
        // Rotor positions must have pairwise-distinct directions.
        for i in 0..4 {
            for j in (i + 1)..4 {
                let (ri, rj) = (self.rotor_positions[i], self.rotor_positions[j]);
                if ri.norm() < 1e-9 || rj.norm() < 1e-9 {
                    return Err(Error::InvalidParams(format!(
                        "rotor position {} at the CoM",
                        if ri.norm() < 1e-9 { i } else { j }
                    )));
                }
                if ri.normalize().cross(&rj.normalize()).norm() < 1e-9
                    && ri.normalize().dot(&rj.normalize()) > 0.0
                {
                    return Err(Error::InvalidParams(format!(
                        "rotor positions {i} and {j} share a direction"
                    )));
                }
            }
        }
        for (i, s) in self.spin_dirs.iter().enumerate() {
            if (s.abs() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParams(format!(
                    "spin_dirs[{i}] must be +1 or -1, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Full validation including the rank-6 allocation check.
    pub fn validate_full(&self) -> Result<(), Error> {
        self.validate()?;
        crate::allocation::build_allocation(self)?;
        Ok(())
    }

    /// Inverse inertia, assuming [`validate`](Self::validate) passed.
    pub fn inertia_inv(&self) -> Matrix3<f64> {
        self.inertia
            .try_inverse()
            .expect("validated inertia is invertible")
    }

    /// Per-rotor thrust cap c_t·Ω_max² [N].
    pub fn rotor_thrust_max(&self) -> f64 {
        self.thrust_coeff * self.rotor_speed_max * self.rotor_speed_max
    }

    /// Loads and validates parameters from a TOML file (see
    /// `scenarios/vehicle.toml` for the schema).
    pub fn from_toml_file(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        let raw: VehicleConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let params: VehicleParams = raw.into();
        params.validate_full()?;
        Ok(params)
    }
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleConfig::default().into()
    }
}

/// Serde/TOML view of [`VehicleParams`]. Every field has a default so scenario
/// files may override only what they need.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleConfig {
    /// Mass [kg].
    pub mass: f64,
    /// Diagonal of the inertia tensor [kg·m²]. Stand-in value: the airframe's
    /// true inertia is not published.
    pub inertia_diag: [f64; 3],
    /// Thrust coefficient c_t [N·s²/rad²]. Stand-in value.
    pub thrust_coeff: f64,
    /// Drag-torque coefficient c_q [N·m·s²/rad²]. Stand-in value.
    pub drag_torque_coeff: f64,
    /// Drop the drag-torque columns' contribution (sensitivity studies).
    pub neglect_drag_torque: bool,
    /// Horizontal arm length from CoM to rotor axis [m]. Stand-in value.
    pub arm_length: f64,
    /// Arm azimuths [deg] measured from body +x. The default X layout puts
    /// the wheel-carrying opposing pair on arms 2 and 4.
    pub arm_azimuths_deg: [f64; 4],
    /// Spin directions (+1 CCW for rotors 1–2, −1 CW for rotors 3–4).
    pub spin_dirs: [f64; 4],
    /// Passive wheel radius [m]. Stand-in value (not published).
    pub wheel_radius: f64,
    /// Servo time constant [s].
    pub servo_tau: f64,
    /// Rotor speed limit [rad/s].
    pub rotor_speed_max: f64,
    /// Servo mechanical range [rad].
    pub tilt_range: [f64; 2],
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self {
            mass: 1.5,
            inertia_diag: [0.012, 0.012, 0.02],
            // 2.4e-5 caps per-rotor thrust at 150 N with the 2500 rad/s limit,
            // enough to realize any wrench inside the controller's box.
            thrust_coeff: 2.4e-5,
            drag_torque_coeff: 1.9e-7,
            neglect_drag_torque: false,
            arm_length: 0.15,
            arm_azimuths_deg: [45.0, 135.0, -135.0, -45.0],
            spin_dirs: [1.0, 1.0, -1.0, -1.0],
            wheel_radius: 0.15,
            servo_tau: 0.05,
            rotor_speed_max: 2500.0,
            tilt_range: [-std::f64::consts::PI, std::f64::consts::PI],
        }
    }
}

impl From<VehicleConfig> for VehicleParams {
    fn from(c: VehicleConfig) -> Self {
        let mut rotor_positions = [Vec3::zeros(); 4];
        let mut arm_axes = [Vec3::zeros(); 4];
        for i in 0..4 {
            let az = c.arm_azimuths_deg[i].to_radians();
            let dir = Vec3::new(az.cos(), az.sin(), 0.0);
            arm_axes[i] = dir;
            rotor_positions[i] = dir * c.arm_length;
        }
        VehicleParams {
            mass: c.mass,
            inertia: Matrix3::from_diagonal(&Vec3::new(
                c.inertia_diag[0],
                c.inertia_diag[1],
                c.inertia_diag[2],
            )),
            thrust_coeff: c.thrust_coeff,
            drag_torque_coeff: c.drag_torque_coeff,
            neglect_drag_torque: c.neglect_drag_torque,
            rotor_positions,
            arm_axes,
            spin_dirs: c.spin_dirs,
            wheel_radius: c.wheel_radius,
            servo_tau: c.servo_tau,
            rotor_speed_max: c.rotor_speed_max,
            tilt_range: (c.tilt_range[0], c.tilt_range[1]),
        }
    }
}

/// Default tilt angle for a parked rotor (thrust along body +z).
pub const TILT_VERTICAL: f64 = FRAC_PI_2;
