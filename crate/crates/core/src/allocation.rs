//! Static control allocation between body wrenches and tilt-rotor commands.
//!
//! Each rotor's thrust is decomposed into a lateral component along the
//! horizontal tangential direction of its arm and a vertical component along
//! body +z. Stacking the four (lateral, vertical) pairs gives the
//! intermediate thrust vector T ∈ R⁸ with W = A·T for a constant 6×8 matrix A
//! that depends only on geometry and coefficients, never on the current tilt
//! angles. The tilt angle is α = atan2(T_v, T_l): α = π/2 is straight up,
//! α = 0 pushes along the tangential direction.

use nalgebra::{DMatrix, SMatrix, SVector, Vector6};

use crate::error::Error;
use crate::math::Vec3;
use crate::types::{ActuatorCommands, ActuatorState, Wrench};
use crate::vehicle::VehicleParams;

/// Below this per-rotor thrust [N] the tilt angle is held at its previous
/// command (atan2 is undefined at the origin) and the servo-rate map is
/// singular.
pub const DEFAULT_THRUST_EPS: f64 = 1e-4;

/// Relative singular-value cutoff for the pseudoinverse and the rank test.
const SV_CUTOFF: f64 = 1e-8;

/// Per-rotor (lateral, vertical) thrust components [N], body frame, stacked
/// as (T_1l, T_1v, …, T_4l, T_4v).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntermediateThrust(pub SVector<f64, 8>);

impl IntermediateThrust {
    /// (lateral, vertical) pair of rotor `i`.
    pub fn pair(&self, i: usize) -> (f64, f64) {
        (self.0[2 * i], self.0[2 * i + 1])
    }

    /// Thrust magnitude of rotor `i` [N].
    pub fn magnitude(&self, i: usize) -> f64 {
        let (l, v) = self.pair(i);
        l.hypot(v)
    }
}

/// The static allocation matrix and its Moore–Penrose pseudoinverse.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationModel {
    /// 6×8 map from intermediate thrust to wrench.
    pub a: SMatrix<f64, 6, 8>,
    /// 8×6 pseudoinverse, precomputed once.
    pub a_pinv: SMatrix<f64, 8, 6>,
}

/// Builds the allocation model from vehicle geometry.
///
/// Column 2i (lateral unit thrust at rotor i): force along the tangential
/// unit vector ẑ × arm_axes[i]; torque r_i × f plus the spin-signed drag
/// torque (c_q/c_t) about the thrust direction. Column 2i+1 (vertical unit
/// thrust): force along body z with the matching torque terms.
///
/// Fails when the resulting matrix has rank < 6, naming the wrench
/// directions that cannot be produced.
pub fn build_allocation(params: &VehicleParams) -> Result<AllocationModel, Error> {
    params.validate()?;
    let drag_ratio = if params.neglect_drag_torque {
        0.0
    } else {
        params.drag_torque_coeff / params.thrust_coeff
    };
    let z = Vec3::z();
    let mut a = SMatrix::<f64, 6, 8>::zeros();
    for i in 0..4 {
        let arm = params.arm_axes[i];
        let tangential = z.cross(&arm);
        let tn = tangential.norm();
        if tn < 1e-9 {
            return Err(Error::Allocation(format!(
                "arm axis {i} is vertical; no tangential tilt direction"
            )));
        }
        let e_t = tangential / tn;
        let r = params.rotor_positions[i];
        // Reaction drag torque opposes the rotor spin about the thrust axis.
        let drag = -params.spin_dirs[i] * drag_ratio;
        for (col, dir) in [(2 * i, e_t), (2 * i + 1, z)] {
            let torque = r.cross(&dir) + drag * dir;
            for k in 0..3 {
                a[(k, col)] = dir[k];
                a[(k + 3, col)] = torque[k];
            }
        }
    }

    let svd = DMatrix::from_fn(6, 8, |r, c| a[(r, c)]).svd(true, true);
    let sigma_max = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > SV_CUTOFF * sigma_max)
        .count();
    if rank < 6 {
        let u = svd.u.as_ref().expect("svd computed with u");
        let labels = ["Fx", "Fy", "Fz", "Mx", "My", "Mz"];
        let mut deficient = Vec::new();
        for (j, &s) in svd.singular_values.iter().enumerate() {
            if s <= SV_CUTOFF * sigma_max {
                let col = u.column(j);
                let dominant = (0..6).max_by(|&p, &q| {
                    col[p].abs().partial_cmp(&col[q].abs()).unwrap()
                });
                deficient.push(labels[dominant.unwrap()]);
            }
        }
        return Err(Error::Allocation(format!(
            "allocation matrix rank {rank} < 6; unreachable wrench directions near: {}",
            deficient.join(", ")
        )));
    }

    let pinv = svd
        .pseudo_inverse(SV_CUTOFF * sigma_max)
        .map_err(|e| Error::Allocation(e.to_string()))?;
    let mut a_pinv = SMatrix::<f64, 8, 6>::zeros();
    for r in 0..8 {
        for c in 0..6 {
            a_pinv[(r, c)] = pinv[(r, c)];
        }
    }
    Ok(AllocationModel { a, a_pinv })
}

/// Minimum-norm intermediate thrust realizing the wrench: T = A†·W.
pub fn inverse_allocate(model: &AllocationModel, w: &Wrench) -> IntermediateThrust {
    IntermediateThrust(model.a_pinv * w.as_vector6())
}

/// Saturation outcome of [`extract_commands`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SaturationReport {
    /// Rotors whose thrust demand exceeded c_t·Ω_max² (speed clamped).
    pub saturated: [bool; 4],
}

impl SaturationReport {
    pub fn any(&self) -> bool {
        self.saturated.iter().any(|&s| s)
    }
}

/// Converts an intermediate thrust vector into rotor-speed and tilt commands.
///
/// Per rotor: T_i = √(T_l² + T_v²), Ω_i = √(T_i / c_t), α_i = atan2(T_v, T_l).
/// Below `DEFAULT_THRUST_EPS` the previous tilt command is held. Demands above
/// the rotor thrust cap clamp the speed and raise the saturation flag.
pub fn extract_commands(
    thrust: &IntermediateThrust,
    params: &VehicleParams,
    prev_tilt: &[f64; 4],
) -> (ActuatorCommands, SaturationReport) {
    let cap = params.rotor_thrust_max();
    let mut cmds = ActuatorCommands {
        rotor_speeds: [0.0; 4],
        tilt_angles: *prev_tilt,
    };
    let mut report = SaturationReport::default();
    for i in 0..4 {
        let (l, v) = thrust.pair(i);
        let t = l.hypot(v);
        if t >= DEFAULT_THRUST_EPS {
            cmds.tilt_angles[i] = v.atan2(l);
        }
        let mut omega = (t / params.thrust_coeff).sqrt();
        if t > cap {
            report.saturated[i] = true;
            omega = params.rotor_speed_max;
        }
        cmds.rotor_speeds[i] = omega;
    }
    (cmds, report)
}

/// Wrench physically produced by an actuator state, using the ACTUAL tilt
/// angles. This is what the simulator applies and the wrench estimator
/// subtracts.
pub fn forward_wrench(
    model: &AllocationModel,
    actuators: &ActuatorState,
    params: &VehicleParams,
) -> Wrench {
    let mut t = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let thrust = params.thrust_coeff * actuators.rotor_speeds[i] * actuators.rotor_speeds[i];
        let alpha = actuators.tilt_angles[i];
        t[2 * i] = thrust * alpha.cos();
        t[2 * i + 1] = thrust * alpha.sin();
    }
    Wrench::from_vector6(&(model.a * t))
}

/// Servo angle rates implied by a wrench trajectory:
/// α̇_i = (T_l·Ṫ_v − T_v·Ṫ_l)/(T_l² + T_v²) with T = A†W and Ṫ = A†Ẇ.
///
/// Used to check that wrench-rate bounds keep the commanded tilt rates within
/// servo capability. Errors when any per-rotor thrust is at or below
/// `DEFAULT_THRUST_EPS` (the map is singular there).
pub fn servo_rates_from_wrench_rate(
    model: &AllocationModel,
    w: &Wrench,
    w_dot: &Vector6<f64>,
) -> Result<[f64; 4], Error> {
    let t = inverse_allocate(model, w);
    let td = model.a_pinv * w_dot;
    let mut rates = [0.0; 4];
    for i in 0..4 {
        let (l, v) = t.pair(i);
        let denom = l * l + v * v;
        if denom <= DEFAULT_THRUST_EPS * DEFAULT_THRUST_EPS {
            return Err(Error::SingularConfiguration(format!(
                "rotor {i} thrust {:.3e} N at or below {DEFAULT_THRUST_EPS:e}",
                denom.sqrt()
            )));
        }
        let (ld, vd) = (td[2 * i], td[2 * i + 1]);
        rates[i] = (l * vd - v * ld) / denom;
    }
    Ok(rates)
}
