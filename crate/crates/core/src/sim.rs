//! Fixed-step plant simulator: rigid-body integration, first-order servo and
//! rotor lag, wheel-ground contact and an IMU measurement model.

use nalgebra::Matrix3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{build_allocation, forward_wrench, AllocationModel};
use crate::contact::{solve_force_channels, solve_roll_channel, ContactGains};
use crate::error::Error;
use crate::math::{derivative, renormalize, rotate, rotate_inv, Vec3};
use crate::types::{ActuatorCommands, ActuatorState, RigidBodyState, Wrench};
use crate::vehicle::{gravity_vector, VehicleParams};

/// Full plant state: rigid body, actuators, and the contact bookkeeping that
/// the estimator is scored against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub body: RigidBodyState,
    pub actuators: ActuatorState,
    pub contact_active: bool,
    /// True reaction wrench currently applied by the ground, body frame.
    pub ground_reaction: Wrench,
}

impl PlantState {
    pub fn new(body: RigidBodyState, actuators: ActuatorState) -> Self {
        Self {
            body,
            actuators,
            contact_active: false,
            ground_reaction: Wrench::zero(),
        }
    }
}

/// IMU noise densities (one-sigma per sample).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    /// Accelerometer noise [m/s²].
    pub accel_sigma: f64,
    /// Gyroscope noise [rad/s].
    pub gyro_sigma: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            accel_sigma: 0.05,
            gyro_sigma: 0.005,
        }
    }
}

impl ImuNoise {
    pub fn off() -> Self {
        Self {
            accel_sigma: 0.0,
            gyro_sigma: 0.0,
        }
    }
}

/// Specific-force and angular-rate measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    /// Specific force [m/s²], body frame.
    pub accel: Vec3,
    /// Angular rate [rad/s], body frame.
    pub gyro: Vec3,
    /// Sample time [s].
    pub timestamp: f64,
}

/// Simulator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Integration step [s]; must lie in (0, 0.01].
    pub dt: f64,
    /// Coulomb friction coefficient at the wheel contacts.
    pub friction_coeff: f64,
    /// Height window above the wheel radius where contact can engage [m].
    pub contact_tol: f64,
    /// Baumgarte stabilization gains.
    pub contact_gains: ContactGains,
    /// Rotor speed first-order time constant [s]; 0 means instantaneous.
    pub rotor_tau: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            friction_coeff: 0.8,
            contact_tol: 2e-3,
            contact_gains: ContactGains::default(),
            rotor_tau: 0.0,
        }
    }
}

/// Continuous-time state derivative.
#[derive(Debug, Clone, Copy)]
pub struct StateDerivative {
    pub dp: Vec3,
    pub dv: Vec3,
    pub dq: crate::math::Quat,
    pub domega: Vec3,
}

/// Rigid-body derivative: ṗ = v, q̇ = ½q⊗(0,ω), v̇ = m⁻¹R(F+F_e) + g,
/// ω̇ = J⁻¹(M + M_e − ω×Jω). `w` is the actuator wrench and `w_ext` the
/// external wrench, both body frame.
pub fn dynamics_derivative(
    state: &RigidBodyState,
    w: &Wrench,
    w_ext: &Wrench,
    params: &VehicleParams,
) -> StateDerivative {
    let inertia_inv = params.inertia_inv();
    dynamics_derivative_cached(state, w, w_ext, params.mass, &params.inertia, &inertia_inv)
}

pub(crate) fn dynamics_derivative_cached(
    state: &RigidBodyState,
    w: &Wrench,
    w_ext: &Wrench,
    mass: f64,
    inertia: &Matrix3<f64>,
    inertia_inv: &Matrix3<f64>,
) -> StateDerivative {
    let force_world = rotate(&state.q, &(w.force + w_ext.force));
    let dv = force_world / mass + gravity_vector();
    let torque = w.torque + w_ext.torque - state.omega.cross(&(inertia * state.omega));
    StateDerivative {
        dp: state.v,
        dv,
        dq: derivative(&state.q, &state.omega),
        domega: inertia_inv * torque,
    }
}

/// Classical fixed-step 4th-order integration of the rigid body under
/// constant wrenches, quaternion renormalized afterwards.
pub(crate) fn rk4_step(
    state: &RigidBodyState,
    w: &Wrench,
    w_ext: &Wrench,
    mass: f64,
    inertia: &Matrix3<f64>,
    inertia_inv: &Matrix3<f64>,
    dt: f64,
) -> Result<RigidBodyState, Error> {
    let f = |s: &RigidBodyState| dynamics_derivative_cached(s, w, w_ext, mass, inertia, inertia_inv);
    let advance = |s: &RigidBodyState, d: &StateDerivative, h: f64| RigidBodyState {
        p: s.p + d.dp * h,
        v: s.v + d.dv * h,
        q: s.q + d.dq * h,
        omega: s.omega + d.domega * h,
    };
    let k1 = f(state);
    let k2 = f(&advance(state, &k1, 0.5 * dt));
    let k3 = f(&advance(state, &k2, 0.5 * dt));
    let k4 = f(&advance(state, &k3, dt));
    let mut next = RigidBodyState {
        p: state.p + (k1.dp + 2.0 * k2.dp + 2.0 * k3.dp + k4.dp) * (dt / 6.0),
        v: state.v + (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv) * (dt / 6.0),
        q: state.q + (k1.dq + 2.0 * k2.dq + 2.0 * k3.dq + k4.dq) * (dt / 6.0),
        omega: state.omega + (k1.domega + 2.0 * k2.domega + 2.0 * k3.domega + k4.domega) * (dt / 6.0),
    };
    renormalize(&mut next.q)?;
    next.check_finite()?;
    Ok(next)
}

/// Resolves wheel-ground contact at the current state.
///
/// Contact engages when p_z ≤ r + tol with non-positive vertical speed, or
/// persists from the previous step while the implied normal force stays
/// nonnegative. The reaction enforces p_z = r, v_{B,y} = 0 and ω_x = 0 via
/// Baumgarte feedback, subject to N ≥ 0 (releases otherwise) and
/// |f_y| ≤ μN (clamps and lets the lateral velocity evolve otherwise).
pub fn resolve_contact(
    body: &RigidBodyState,
    w_applied: &Wrench,
    was_active: bool,
    params: &VehicleParams,
    cfg: &SimConfig,
) -> (Wrench, bool) {
    let r = params.wheel_radius;
    let candidate = (body.p.z <= r + cfg.contact_tol && body.v.z <= 0.0) || was_active;
    if !candidate {
        return (Wrench::zero(), false);
    }

    let inertia_inv = params.inertia_inv();
    let accel_free = rotate(&body.q, &w_applied.force) / params.mass + gravity_vector();
    let ang_accel_free = inertia_inv
        * (w_applied.torque - body.omega.cross(&(params.inertia * body.omega)));

    let ch = solve_force_channels(body, &accel_free, r, &cfg.contact_gains);
    let mut normal = params.mass * ch.alpha;
    let mut lateral = params.mass * ch.beta;
    if normal < 0.0 {
        return (Wrench::zero(), false);
    }
    if lateral.abs() > cfg.friction_coeff * normal {
        // Sliding: clamp friction, re-balance the normal channel with the
        // clamped lateral force, and let v_{B,y} evolve freely.
        lateral = lateral.signum() * cfg.friction_coeff * normal;
        let beta_sat = lateral / params.mass;
        let alpha = ch.t_z - accel_free.z - ch.y_world.z * beta_sat;
        normal = params.mass * alpha;
        if normal < 0.0 {
            return (Wrench::zero(), false);
        }
    }

    let (tau_x, _) = solve_roll_channel(body, &ang_accel_free, &inertia_inv, &cfg.contact_gains);
    let force_world = Vec3::z() * normal + ch.y_world * lateral;
    let reaction = Wrench::new(rotate_inv(&body.q, &force_world), Vec3::new(tau_x, 0.0, 0.0));
    (reaction, true)
}

/// IMU model: a = qᵀ⊙(v̇ − g) + n_a (specific force; reads +g·ẑ at hover and
/// zero in free fall, the convention under which the wrench estimator reports
/// zero external force in unperturbed flight), ω_meas = ω + n_ω. The linear
/// acceleration is the finite difference of the velocity over `dt`.
pub fn sample_imu(
    prev: &RigidBodyState,
    curr: &RigidBodyState,
    dt: f64,
    noise: &ImuNoise,
    rng: &mut ChaCha8Rng,
) -> ImuSample {
    let vdot = (curr.v - prev.v) / dt;
    let mut accel = rotate_inv(&curr.q, &(vdot - gravity_vector()));
    let mut gyro = curr.omega;
    if noise.accel_sigma > 0.0 {
        for i in 0..3 {
            accel[i] += noise.accel_sigma * gauss(rng);
        }
    }
    if noise.gyro_sigma > 0.0 {
        for i in 0..3 {
            gyro[i] += noise.gyro_sigma * gauss(rng);
        }
    }
    ImuSample {
        accel,
        gyro,
        timestamp: 0.0,
    }
}

/// Standard normal via Box–Muller (keeps the dependency surface to `rand`'s
/// uniform source so seeded streams stay stable).
pub(crate) fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Single-owner stepped plant.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: VehicleParams,
    alloc: AllocationModel,
    cfg: SimConfig,
    inertia_inv: Matrix3<f64>,
    state: PlantState,
    time: f64,
}

impl Simulator {
    pub fn new(params: VehicleParams, cfg: SimConfig, initial: PlantState) -> Result<Self, Error> {
        if !(cfg.dt > 0.0 && cfg.dt <= 0.01) {
            return Err(Error::Config(format!(
                "sim dt {} outside (0, 0.01] s",
                cfg.dt
            )));
        }
        let alloc = build_allocation(&params)?;
        let inertia_inv = params.inertia_inv();
        Ok(Self {
            params,
            alloc,
            cfg,
            inertia_inv,
            state: initial,
            time: 0.0,
        })
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn allocation(&self) -> &AllocationModel {
        &self.alloc
    }

    /// Wrench the actuators currently produce (actual tilt angles).
    pub fn actuator_wrench(&self) -> Wrench {
        forward_wrench(&self.alloc, &self.state.actuators, &self.params)
    }

    /// Advances one fixed step under zero-order-held commands plus an
    /// injected external disturbance wrench (body frame).
    ///
    /// On divergence the simulator keeps the last valid state and returns
    /// [`Error::SimulationDiverged`].
    pub fn step(&mut self, commands: &ActuatorCommands, disturbance: &Wrench) -> Result<(), Error> {
        let dt = self.cfg.dt;
        let (lo, hi) = self.params.tilt_range;

        // Servo and rotor first-order lags, exact discretization.
        let servo_decay = (-dt / self.params.servo_tau).exp();
        let mut act = self.state.actuators;
        for i in 0..4 {
            let cmd = commands.tilt_angles[i].clamp(lo, hi);
            act.tilt_cmds[i] = cmd;
            act.tilt_angles[i] = cmd + (act.tilt_angles[i] - cmd) * servo_decay;
            let omega_cmd = commands.rotor_speeds[i].clamp(0.0, self.params.rotor_speed_max);
            act.rotor_speeds[i] = if self.cfg.rotor_tau > 0.0 {
                let rotor_decay = (-dt / self.cfg.rotor_tau).exp();
                omega_cmd + (act.rotor_speeds[i] - omega_cmd) * rotor_decay
            } else {
                omega_cmd
            };
        }

        let w_act = forward_wrench(&self.alloc, &act, &self.params);
        let w_applied = w_act + *disturbance;
        let (reaction, active) = resolve_contact(
            &self.state.body,
            &w_applied,
            self.state.contact_active,
            &self.params,
            &self.cfg,
        );

        let w_ext = reaction + *disturbance;
        let body = rk4_step(
            &self.state.body,
            &w_act,
            &w_ext,
            self.params.mass,
            &self.params.inertia,
            &self.inertia_inv,
            dt,
        )
        .map_err(|e| Error::SimulationDiverged(format!("t = {:.4} s: {e}", self.time)))?;

        self.state = PlantState {
            body,
            actuators: act,
            contact_active: active,
            ground_reaction: reaction,
        };
        self.time += dt;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{extract_commands, inverse_allocate};
    use crate::vehicle::GRAVITY;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn airborne_sim(p: Vec3) -> Simulator {
        let params = VehicleParams::default();
        let state = PlantState::new(RigidBodyState::at_rest(p), ActuatorState::at_rest());
        Simulator::new(params, SimConfig::default(), state).unwrap()
    }

    #[test]
    fn ballistic_drop_matches_closed_form() {
        let mut sim = airborne_sim(Vec3::new(0.0, 0.0, 2.0));
        let cmds = ActuatorCommands::zero_thrust();
        for _ in 0..500 {
            sim.step(&cmds, &Wrench::zero()).unwrap();
        }
        let expected = 2.0 - 0.5 * GRAVITY * 0.25;
        assert!((sim.state().body.p.z - expected).abs() < 1e-4);
    }

    #[test]
    fn servo_step_response() {
        let mut sim = airborne_sim(Vec3::new(0.0, 0.0, 5.0));
        // Start from tilt 0.
        let mut st = *sim.state();
        st.actuators.tilt_angles = [0.0; 4];
        sim.state = st;
        let cmds = ActuatorCommands {
            rotor_speeds: [0.0; 4],
            tilt_angles: [1.0; 4],
        };
        for _ in 0..50 {
            sim.step(&cmds, &Wrench::zero()).unwrap();
        }
        // One time constant: 1 − e⁻¹.
        assert_relative_eq!(
            sim.state().actuators.tilt_angles[0],
            1.0 - (-1.0f64).exp(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn hover_commands_hold_position() {
        let params = VehicleParams::default();
        let alloc = build_allocation(&params).unwrap();
        let w = Wrench::new(Vec3::new(0.0, 0.0, params.mass * GRAVITY), Vec3::zeros());
        let t = inverse_allocate(&alloc, &w);
        let (cmds, sat) = extract_commands(&t, &params, &[crate::vehicle::TILT_VERTICAL; 4]);
        assert!(!sat.any());

        let start = Vec3::new(0.0, 0.0, 1.5);
        let actuators = ActuatorState {
            rotor_speeds: cmds.rotor_speeds,
            tilt_angles: cmds.tilt_angles,
            tilt_cmds: cmds.tilt_angles,
        };
        let state = PlantState::new(RigidBodyState::at_rest(start), actuators);
        let mut sim = Simulator::new(params, SimConfig::default(), state).unwrap();
        for _ in 0..10_000 {
            sim.step(&cmds, &Wrench::zero()).unwrap();
        }
        assert!((sim.state().body.p - start).norm() <= 1e-3);
    }

    #[test]
    fn resting_contact_supports_weight() {
        let params = VehicleParams::default();
        let r = params.wheel_radius;
        let mg = params.mass * GRAVITY;
        let state = PlantState::new(
            RigidBodyState::at_rest(Vec3::new(0.0, 0.0, r)),
            ActuatorState::at_rest(),
        );
        let mut sim = Simulator::new(params, SimConfig::default(), state).unwrap();
        let cmds = ActuatorCommands::zero_thrust();
        for _ in 0..1000 {
            sim.step(&cmds, &Wrench::zero()).unwrap();
        }
        assert!(sim.state().contact_active);
        let reaction = sim.state().ground_reaction;
        assert!((reaction.force.z - mg).abs() / mg < 0.01);
        assert!((sim.state().body.p.z - r).abs() < 1e-3);
    }

    #[test]
    fn airborne_has_no_reaction() {
        let params = VehicleParams::default();
        let state = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 1.0));
        let (reaction, active) = resolve_contact(
            &state,
            &Wrench::zero(),
            false,
            &params,
            &SimConfig::default(),
        );
        assert!(!active);
        assert_eq!(reaction, Wrench::zero());
    }

    #[test]
    fn friction_holds_lateral_push_while_rolling() {
        let params = VehicleParams::default();
        let r = params.wheel_radius;
        let mut body = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, r));
        body.v = Vec3::new(1.0, 0.0, 0.0);
        let state = PlantState::new(body, ActuatorState::at_rest());
        let mut sim = Simulator::new(params, SimConfig::default(), state).unwrap();
        let cmds = ActuatorCommands::zero_thrust();
        let push = Wrench::new(Vec3::new(0.0, 0.1, 0.0), Vec3::zeros());
        for _ in 0..2000 {
            sim.step(&cmds, &push).unwrap();
        }
        let body = sim.state().body;
        let v_body = rotate_inv(&body.q, &body.v);
        assert!(v_body.y.abs() <= 1e-3, "lateral speed {}", v_body.y);
        assert!(sim.state().contact_active);
    }

    #[test]
    fn sustained_contact_residuals_small() {
        let params = VehicleParams::default();
        let r = params.wheel_radius;
        let mut body = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, r + 0.001));
        body.v = Vec3::new(0.5, 0.0, -0.05);
        body.omega = Vec3::new(0.05, 0.0, 0.1);
        let state = PlantState::new(body, ActuatorState::at_rest());
        let mut sim = Simulator::new(params.clone(), SimConfig::default(), state).unwrap();
        let cmds = ActuatorCommands::zero_thrust();
        for _ in 0..500 {
            sim.step(&cmds, &Wrench::zero()).unwrap();
        }
        for _ in 0..1000 {
            sim.step(&cmds, &Wrench::zero()).unwrap();
            let b = sim.state().body;
            let v_body = rotate_inv(&b.q, &b.v);
            assert!(v_body.y.abs() <= 1e-3);
            assert!(b.omega.x.abs() <= 1e-3);
            assert!((b.p.z - r).abs() <= 1e-3);
            // Complementarity: active contact keeps a nonnegative normal force.
            assert!(sim.state().ground_reaction.force.z >= -1e-9);
        }
    }

    #[test]
    fn energy_conserved_in_free_flight() {
        let params = VehicleParams::default();
        let mut body = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 600.0));
        body.v = Vec3::new(1.0, -0.5, 2.0);
        body.omega = Vec3::new(1.0, 2.0, 0.5);
        let state = PlantState::new(body, ActuatorState::at_rest());
        let mut sim = Simulator::new(params.clone(), SimConfig::default(), state).unwrap();

        let energy = |b: &RigidBodyState| {
            0.5 * params.mass * b.v.norm_squared()
                + params.mass * GRAVITY * b.p.z
                + 0.5 * b.omega.dot(&(params.inertia * b.omega))
        };
        let rot_energy = |b: &RigidBodyState| 0.5 * b.omega.dot(&(params.inertia * b.omega));

        let e0 = energy(&sim.state().body);
        let er0 = rot_energy(&sim.state().body);
        let cmds = ActuatorCommands::zero_thrust();
        for _ in 0..10_000 {
            sim.step(&cmds, &Wrench::zero()).unwrap();
            let n = sim.state().body.q.norm();
            assert!((n - 1.0).abs() <= 1e-9);
        }
        assert!(!sim.state().contact_active);
        let e1 = energy(&sim.state().body);
        let er1 = rot_energy(&sim.state().body);
        assert!((e1 - e0).abs() / e0.abs() <= 1e-6, "total drift {}", (e1 - e0) / e0);
        assert!((er1 - er0).abs() / er0 <= 1e-6, "rotational drift {}", (er1 - er0) / er0);
    }

    #[test]
    fn principal_axis_spin_has_no_gyroscopic_torque() {
        let params = VehicleParams::default();
        let mut state = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 10.0));
        state.omega = Vec3::new(0.0, 0.0, 2.0);
        let d = dynamics_derivative(&state, &Wrench::zero(), &Wrench::zero(), &params);
        assert_relative_eq!(d.domega, Vec3::zeros(), epsilon = 1e-14);
        assert_relative_eq!(d.dv, gravity_vector(), epsilon = 1e-14);
    }

    #[test]
    fn hover_gravity_cancellation() {
        let params = VehicleParams::default();
        let state = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 1.0));
        let w = Wrench::new(Vec3::new(0.0, 0.0, params.mass * GRAVITY), Vec3::zeros());
        let d = dynamics_derivative(&state, &w, &Wrench::zero(), &params);
        assert_relative_eq!(d.dv, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn imu_hover_reads_plus_g() {
        let state = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_imu(&state, &state, 0.01, &ImuNoise::off(), &mut rng);
        assert_relative_eq!(s.accel, Vec3::new(0.0, 0.0, GRAVITY), epsilon = 1e-12);
    }

    #[test]
    fn imu_free_fall_reads_zero() {
        let mut prev = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 10.0));
        let mut curr = prev;
        prev.v = Vec3::new(0.0, 0.0, -1.0);
        curr.v = Vec3::new(0.0, 0.0, -1.0 - GRAVITY * 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_imu(&prev, &curr, 0.01, &ImuNoise::off(), &mut rng);
        assert!(s.accel.norm() < 1e-9);
    }

    #[test]
    fn imu_pure_rotation_measures_rate() {
        let mut state = RigidBodyState::at_rest(Vec3::zeros());
        state.omega = Vec3::new(0.0, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_imu(&state, &state, 0.01, &ImuNoise::off(), &mut rng);
        assert_relative_eq!(s.gyro, Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }
}
