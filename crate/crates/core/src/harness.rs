//! Closed-loop scenario runner: wires simulator, estimator, NMPC, allocation
//! and trajectory generation; computes run metrics and writes CSV logs.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{build_allocation, extract_commands, inverse_allocate};
use crate::error::Error;
use crate::estimator::{EstimatorConfig, WrenchEstimator};
use crate::math::{rotate_inv, Vec3};
use crate::nmpc::{NmpcConfig, NmpcController, SolveStatus};
use crate::sim::{gauss, sample_imu, ImuNoise, PlantState, SimConfig, Simulator};
use crate::trajectory::{Phase, Trajectory, TrajectorySpec};
use crate::types::{ActuatorState, RigidBodyState, Wrench};
use crate::vehicle::{VehicleConfig, VehicleParams, GRAVITY, TILT_VERTICAL};

/// A constant external wrench applied over a time window (body frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbancePulse {
    pub t_start: f64,
    pub t_end: f64,
    pub force: [f64; 3],
    pub torque: [f64; 3],
}

impl DisturbancePulse {
    fn wrench(&self) -> Wrench {
        Wrench::new(Vec3::from(self.force), Vec3::from(self.torque))
    }
}

/// Aerodynamic power proxy configuration. The proxy reproduces the shape of
/// the measured electrical power (induced-power law) anchored at a
/// configured hover power; the acceptance claim is the ground/air RATIO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerConfig {
    /// Calibration target: total power at hover [W].
    pub hover_power: f64,
    /// Electronics baseline [W].
    pub base_power: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            hover_power: 650.0,
            base_power: 8.0,
        }
    }
}

/// Induced-power proxy: P = Σ κ·T_i^{3/2} + P_base with κ calibrated so that
/// hover at the vehicle mass draws `hover_power`.
pub fn power_proxy(actuators: &ActuatorState, power: &PowerConfig, params: &VehicleParams) -> f64 {
    let hover_thrust = params.mass * GRAVITY / 4.0;
    let kappa = (power.hover_power - power.base_power) / (4.0 * hover_thrust.powf(1.5));
    let mut p = power.base_power;
    for i in 0..4 {
        let t = params.thrust_coeff * actuators.rotor_speeds[i] * actuators.rotor_speeds[i];
        p += kappa * t.powf(1.5);
    }
    p
}

/// Sensor-noise switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Master switch; false zeroes every noise source.
    pub enabled: bool,
    pub imu: ImuNoise,
    /// Multiplicative rotor-speed telemetry noise (one sigma, relative).
    pub rotor_speed_rel: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            imu: ImuNoise::default(),
            rotor_speed_rel: 0.005,
        }
    }
}

/// Estimator wiring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSettings {
    /// Feed the NMPC the estimated external wrench; when false the true
    /// reaction-plus-disturbance wrench is fed (ground-truth mode).
    pub enabled: bool,
    #[serde(flatten)]
    pub config: EstimatorConfig,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            config: EstimatorConfig::default(),
        }
    }
}

/// Complete scenario description (TOML schema; see `scenarios/`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Simulation step [s].
    pub dt_sim: f64,
    /// Controller period [s]; must be an integer multiple of `dt_sim`.
    pub dt_ctrl: f64,
    /// Run length [s]; defaults to the trajectory duration.
    pub duration: Option<f64>,
    /// Start-pose offset from the reference start [m] (tracking-step tests).
    pub initial_offset: [f64; 3],
    pub vehicle: VehicleConfig,
    pub nmpc: NmpcConfig,
    pub estimator: EstimatorSettings,
    pub sim: SimConfig,
    pub noise: NoiseConfig,
    pub power: PowerConfig,
    pub trajectory: TrajectorySpec,
    pub disturbances: Vec<DisturbancePulse>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "unnamed".into(),
            seed: 1,
            dt_sim: 1e-3,
            dt_ctrl: 1e-2,
            duration: None,
            initial_offset: [0.0; 3],
            vehicle: VehicleConfig::default(),
            nmpc: NmpcConfig::default(),
            estimator: EstimatorSettings::default(),
            sim: SimConfig::default(),
            noise: NoiseConfig::default(),
            power: PowerConfig::default(),
            trajectory: TrajectorySpec::Hover {
                position: [0.0, 0.0, 1.0],
                yaw: 0.0,
                duration: 10.0,
            },
        disturbances: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.dt_sim > 0.0 && self.dt_sim <= 0.01) {
            return Err(Error::Config("dt_sim must lie in (0, 0.01]".into()));
        }
        let ratio = self.dt_ctrl / self.dt_sim;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::Config(
                "dt_ctrl must be an integer multiple of dt_sim".into(),
            ));
        }
        Ok(())
    }
}

/// One simulator-rate log record.
#[derive(Debug, Clone, Copy)]
pub struct SimRecord {
    pub t: f64,
    pub body: RigidBodyState,
    pub actuators: ActuatorState,
    pub applied: Wrench,
    pub reaction: Wrench,
    pub contact: bool,
    pub ref_p: Vec3,
    pub phase: Phase,
    /// Body-frame lateral speed [m/s].
    pub lateral_speed: f64,
    pub power: f64,
}

/// One controller-rate log record.
#[derive(Debug, Clone, Copy)]
pub struct CtrlRecord {
    pub t: f64,
    pub wrench_cmd: Wrench,
    pub u0: [f64; 6],
    pub kkt: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub delta_stages: usize,
    pub solve_ms: f64,
    pub estimate: Wrench,
    pub truth_external: Wrench,
    pub phase: Phase,
    pub saturated: bool,
}

/// In-memory run logs.
#[derive(Debug, Clone, Default)]
pub struct RunLogs {
    pub sim: Vec<SimRecord>,
    pub ctrl: Vec<CtrlRecord>,
}

/// Experiment-level quantities.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub completed: bool,
    pub failure: Option<String>,
    pub duration: f64,
    pub rmse_position: f64,
    pub rmse_aerial: Option<f64>,
    pub rmse_transition: Option<f64>,
    pub rmse_ground: Option<f64>,
    pub mean_power_aerial: Option<f64>,
    pub mean_power_ground: Option<f64>,
    /// mean_power_ground / mean_power_aerial.
    pub power_ratio: Option<f64>,
    pub max_lateral_speed_ground: Option<f64>,
    pub max_roll_rate_ground: Option<f64>,
    pub max_height_error_ground: Option<f64>,
    pub mean_ground_fz_cmd: Option<f64>,
    pub contact_events: usize,
    pub relaxed_solves: usize,
    pub solver_failures: usize,
    pub saturation_ticks: usize,
    pub mean_iterations: f64,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub estimator_rms_force_err: Option<f64>,
    pub estimator_rms_torque_err: Option<f64>,
}

impl RunMetrics {
    /// Human-readable report with stable formatting (deterministic bytes for
    /// identical runs).
    pub fn report(&self) -> String {
        let mut s = String::new();
        let fmt_opt = |v: &Option<f64>| match v {
            Some(x) => format!("{x:.9e}"),
            None => "n/a".into(),
        };
        let _ = writeln!(s, "completed            : {}", self.completed);
        if let Some(f) = &self.failure {
            let _ = writeln!(s, "failure              : {f}");
        }
        let _ = writeln!(s, "duration_s           : {:.9e}", self.duration);
        let _ = writeln!(s, "rmse_position_m      : {:.9e}", self.rmse_position);
        let _ = writeln!(s, "rmse_aerial_m        : {}", fmt_opt(&self.rmse_aerial));
        let _ = writeln!(s, "rmse_transition_m    : {}", fmt_opt(&self.rmse_transition));
        let _ = writeln!(s, "rmse_ground_m        : {}", fmt_opt(&self.rmse_ground));
        let _ = writeln!(s, "mean_power_aerial_w  : {}", fmt_opt(&self.mean_power_aerial));
        let _ = writeln!(s, "mean_power_ground_w  : {}", fmt_opt(&self.mean_power_ground));
        let _ = writeln!(s, "power_ratio          : {}", fmt_opt(&self.power_ratio));
        let _ = writeln!(s, "max_vby_ground_mps   : {}", fmt_opt(&self.max_lateral_speed_ground));
        let _ = writeln!(s, "max_wx_ground_radps  : {}", fmt_opt(&self.max_roll_rate_ground));
        let _ = writeln!(s, "max_dz_ground_m      : {}", fmt_opt(&self.max_height_error_ground));
        let _ = writeln!(s, "mean_ground_fz_cmd_n : {}", fmt_opt(&self.mean_ground_fz_cmd));
        let _ = writeln!(s, "contact_events       : {}", self.contact_events);
        let _ = writeln!(s, "relaxed_solves       : {}", self.relaxed_solves);
        let _ = writeln!(s, "solver_failures      : {}", self.solver_failures);
        let _ = writeln!(s, "saturation_ticks     : {}", self.saturation_ticks);
        let _ = writeln!(s, "mean_iterations      : {:.9e}", self.mean_iterations);
        let _ = writeln!(s, "mean_solve_ms        : {:.9e}", self.mean_solve_ms);
        let _ = writeln!(s, "max_solve_ms         : {:.9e}", self.max_solve_ms);
        let _ = writeln!(s, "est_rms_force_err_n  : {}", fmt_opt(&self.estimator_rms_force_err));
        let _ = writeln!(s, "est_rms_torque_err_nm: {}", fmt_opt(&self.estimator_rms_torque_err));
        s
    }
}

/// Output of a scenario run; `metrics.failure` is set when the run aborted
/// (partial logs retained).
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub logs: RunLogs,
}

/// Runs the closed loop: each controller tick samples the horizon, solves
/// the NMPC, allocates actuator commands and advances the plant; the
/// estimator runs at the controller rate from simulated IMU and rotor
/// telemetry. Deterministic under a fixed seed.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, Error> {
    cfg.validate()?;
    let params: VehicleParams = cfg.vehicle.clone().into();
    params.validate_full()?;
    let alloc = build_allocation(&params)?;
    let traj = Trajectory::build(&cfg.trajectory, params.wheel_radius)?;
    let duration = cfg.duration.unwrap_or_else(|| traj.duration());
    let n_sub = (cfg.dt_ctrl / cfg.dt_sim).round() as usize;
    let n_ticks = (duration / cfg.dt_ctrl).round() as usize;

    // Initial condition on (or offset from) the reference start.
    let r0 = traj.eval(0.0);
    let start_on_ground = r0.contact;
    let body0 = RigidBodyState::new(
        r0.p + Vec3::from(cfg.initial_offset),
        Vec3::zeros(),
        r0.q,
        Vec3::zeros(),
    )?;
    let w_init = if start_on_ground {
        Wrench::zero()
    } else {
        Wrench::new(Vec3::new(0.0, 0.0, params.mass * GRAVITY), Vec3::zeros())
    };
    let (init_cmds, _) = extract_commands(
        &inverse_allocate(&alloc, &w_init),
        &params,
        &[TILT_VERTICAL; 4],
    );
    let actuators0 = ActuatorState {
        rotor_speeds: init_cmds.rotor_speeds,
        tilt_angles: init_cmds.tilt_angles,
        tilt_cmds: init_cmds.tilt_angles,
    };

    let mut sim = Simulator::new(params.clone(), cfg.sim, PlantState::new(body0, actuators0))?;
    let mut controller = NmpcController::new(cfg.nmpc, params.clone(), w_init)?;
    let mut estimator = WrenchEstimator::new(cfg.estimator.config, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let imu_noise = if cfg.noise.enabled {
        cfg.noise.imu
    } else {
        ImuNoise::off()
    };

    let mut logs = RunLogs::default();
    logs.sim.reserve(n_ticks * n_sub + 1);
    logs.ctrl.reserve(n_ticks);
    let mut failure: Option<String> = None;
    let mut prev_body = sim.state().body;
    let mut prev_tilt_cmd = actuators0.tilt_cmds;

    'ticks: for tick in 0..n_ticks {
        let t = tick as f64 * cfg.dt_ctrl;
        let phase = traj.phase(t);
        let disturbance = disturbance_at(&cfg.disturbances, t);
        let truth_external = sim.state().ground_reaction + disturbance;

        // Sensors.
        let imu = sample_imu(&prev_body, &sim.state().body, cfg.dt_ctrl, &imu_noise, &mut rng);
        prev_body = sim.state().body;
        let mut rotor_meas = sim.state().actuators.rotor_speeds;
        if cfg.noise.enabled && cfg.noise.rotor_speed_rel > 0.0 {
            for w in rotor_meas.iter_mut() {
                *w *= 1.0 + cfg.noise.rotor_speed_rel * gauss(&mut rng);
            }
        }
        let estimate = estimator.update(
            &imu,
            &rotor_meas,
            &prev_tilt_cmd,
            cfg.dt_ctrl,
            &alloc,
            &params,
        );
        let w_ext_feed = if cfg.estimator.enabled {
            estimate.as_wrench()
        } else {
            truth_external
        };

        // Control.
        let refs = traj.sample_horizon(t, cfg.nmpc.horizon, cfg.nmpc.stage_dt);
        let out = match controller.step(&sim.state().body, &w_ext_feed, &refs, cfg.dt_ctrl) {
            Ok(out) => out,
            Err(e) => {
                failure = Some(format!("t = {t:.3} s: NMPC failure: {e}"));
                break 'ticks;
            }
        };
        let thrust = inverse_allocate(&alloc, &out.wrench_cmd);
        let (cmds, sat) = extract_commands(&thrust, &params, &prev_tilt_cmd);
        prev_tilt_cmd = cmds.tilt_angles;

        let delta_stages = refs
            .iter()
            .filter(|r| (r.p.z - params.wheel_radius).abs() <= cfg.nmpc.contact_tol)
            .count();

        logs.ctrl.push(CtrlRecord {
            t,
            wrench_cmd: out.wrench_cmd,
            u0: out.solution.inputs[0].as_slice().try_into().unwrap(),
            kkt: out.solution.kkt_residual,
            iterations: out.solution.iterations,
            status: out.solution.status,
            delta_stages,
            solve_ms: out.solve_time.as_secs_f64() * 1e3,
            estimate: estimate.as_wrench(),
            truth_external,
            phase,
            saturated: sat.any(),
        });

        // Plant substeps under zero-order-held commands.
        for sub in 0..n_sub {
            let t_sub = t + sub as f64 * cfg.dt_sim;
            let d = disturbance_at(&cfg.disturbances, t_sub);
            if let Err(e) = sim.step(&cmds, &d) {
                failure = Some(format!("t = {t_sub:.3} s: {e}"));
                break 'ticks;
            }
            let state = sim.state();
            let r = traj.eval(t_sub + cfg.dt_sim);
            let v_body = rotate_inv(&state.body.q, &state.body.v);
            logs.sim.push(SimRecord {
                t: t_sub + cfg.dt_sim,
                body: state.body,
                actuators: state.actuators,
                applied: sim.actuator_wrench(),
                reaction: state.ground_reaction,
                contact: state.contact_active,
                ref_p: r.p,
                phase: traj.phase(t_sub + cfg.dt_sim),
                lateral_speed: v_body.y,
                power: power_proxy(&state.actuators, &cfg.power, &params),
            });
        }
    }

    let mut metrics = compute_metrics(&logs, &params)?;
    metrics.completed = failure.is_none();
    metrics.failure = failure;
    Ok(RunOutput { metrics, logs })
}

fn disturbance_at(pulses: &[DisturbancePulse], t: f64) -> Wrench {
    let mut w = Wrench::zero();
    for p in pulses {
        if t >= p.t_start && t < p.t_end {
            w = w + p.wrench();
        }
    }
    w
}

/// Computes the run metrics from complete logs.
pub fn compute_metrics(logs: &RunLogs, params: &VehicleParams) -> Result<RunMetrics, Error> {
    if logs.sim.is_empty() {
        return Err(Error::Metrics("empty simulation log".into()));
    }
    let r = params.wheel_radius;

    let mut sq_sum = 0.0;
    let mut phase_sq = [0.0; 3];
    let mut phase_count = [0usize; 3];
    let mut phase_power = [0.0; 3];
    let mut max_vby: f64 = 0.0;
    let mut max_wx: f64 = 0.0;
    let mut max_dz: f64 = 0.0;
    let mut contact_events = 0;
    let mut prev_contact = logs.sim[0].contact;
    for rec in &logs.sim {
        let err = (rec.body.p - rec.ref_p).norm_squared();
        sq_sum += err;
        let pi = phase_index(rec.phase);
        phase_sq[pi] += err;
        phase_count[pi] += 1;
        phase_power[pi] += rec.power;
        if rec.phase == Phase::Ground {
            max_vby = max_vby.max(rec.lateral_speed.abs());
            max_wx = max_wx.max(rec.body.omega.x.abs());
            max_dz = max_dz.max((rec.body.p.z - r).abs());
        }
        if rec.contact != prev_contact {
            contact_events += 1;
            prev_contact = rec.contact;
        }
    }
    let n = logs.sim.len() as f64;
    let rmse_position = (sq_sum / n).sqrt();
    let phase_rmse = |i: usize| {
        if phase_count[i] > 0 {
            Some((phase_sq[i] / phase_count[i] as f64).sqrt())
        } else {
            None
        }
    };
    let phase_mean_power = |i: usize| {
        if phase_count[i] > 0 {
            Some(phase_power[i] / phase_count[i] as f64)
        } else {
            None
        }
    };
    let mean_power_aerial = phase_mean_power(0);
    let mean_power_ground = phase_mean_power(2);
    let power_ratio = match (mean_power_ground, mean_power_aerial) {
        (Some(g), Some(a)) if a > 0.0 => Some(g / a),
        _ => None,
    };
    let has_ground = phase_count[2] > 0;

    // Controller-side statistics.
    let mut relaxed = 0;
    let mut sat_ticks = 0;
    let mut iter_sum = 0.0;
    let mut solve_sum = 0.0;
    let mut solve_max: f64 = 0.0;
    let mut fz_sum = 0.0;
    let mut fz_count = 0usize;
    let mut est_f_sq = 0.0;
    let mut est_m_sq = 0.0;
    for rec in &logs.ctrl {
        if rec.status == SolveStatus::InfeasibleRelaxed {
            relaxed += 1;
        }
        if rec.saturated {
            sat_ticks += 1;
        }
        iter_sum += rec.iterations as f64;
        solve_sum += rec.solve_ms;
        solve_max = solve_max.max(rec.solve_ms);
        if rec.phase == Phase::Ground {
            fz_sum += rec.wrench_cmd.force.z;
            fz_count += 1;
        }
        est_f_sq += (rec.estimate.force - rec.truth_external.force).norm_squared();
        est_m_sq += (rec.estimate.torque - rec.truth_external.torque).norm_squared();
    }
    let n_ctrl = logs.ctrl.len() as f64;
    let (mean_iterations, mean_solve_ms, est_f, est_m) = if logs.ctrl.is_empty() {
        (0.0, 0.0, None, None)
    } else {
        (
            iter_sum / n_ctrl,
            solve_sum / n_ctrl,
            Some((est_f_sq / n_ctrl).sqrt()),
            Some((est_m_sq / n_ctrl).sqrt()),
        )
    };

    Ok(RunMetrics {
        completed: true,
        failure: None,
        duration: logs.sim.last().unwrap().t,
        rmse_position,
        rmse_aerial: phase_rmse(0),
        rmse_transition: phase_rmse(1),
        rmse_ground: phase_rmse(2),
        mean_power_aerial,
        mean_power_ground,
        power_ratio,
        max_lateral_speed_ground: has_ground.then_some(max_vby),
        max_roll_rate_ground: has_ground.then_some(max_wx),
        max_height_error_ground: has_ground.then_some(max_dz),
        mean_ground_fz_cmd: (fz_count > 0).then(|| fz_sum / fz_count as f64),
        contact_events,
        relaxed_solves: relaxed,
        solver_failures: 0,
        saturation_ticks: sat_ticks,
        mean_iterations,
        mean_solve_ms,
        max_solve_ms: solve_max,
        estimator_rms_force_err: est_f,
        estimator_rms_torque_err: est_m,
    })
}

fn phase_index(p: Phase) -> usize {
    match p {
        Phase::Aerial => 0,
        Phase::Transition => 1,
        Phase::Ground => 2,
    }
}

// ---------------------------------------------------------------------------
// CSV output.
// ---------------------------------------------------------------------------

pub const SIM_LOG_HEADER: &str = "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,\
omega0,omega1,omega2,omega3,alpha0,alpha1,alpha2,alpha3,\
alpha_cmd0,alpha_cmd1,alpha_cmd2,alpha_cmd3,\
fx,fy,fz,mx,my,mz,rfx,rfy,rfz,rmx,rmy,rmz,contact,\
ref_px,ref_py,ref_pz,v_by,phase,power";

pub const CTRL_LOG_HEADER: &str = "t,wcmd_fx,wcmd_fy,wcmd_fz,wcmd_mx,wcmd_my,wcmd_mz,\
u0_0,u0_1,u0_2,u0_3,u0_4,u0_5,kkt,iterations,status,delta_stages,solve_ms,\
fhat_x,fhat_y,fhat_z,mhat_x,mhat_y,mhat_z,\
ext_fx,ext_fy,ext_fz,ext_mx,ext_my,ext_mz,phase,saturated";

impl RunLogs {
    /// Writes `sim_log.csv`, `ctrl_log.csv` and `tracking.csv` (plot-ready
    /// position/reference series) into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir)?;
        let mut sim = std::io::BufWriter::new(std::fs::File::create(dir.join("sim_log.csv"))?);
        writeln!(sim, "{SIM_LOG_HEADER}")?;
        for r in &self.sim {
            let b = &r.body;
            let a = &r.actuators;
            writeln!(
                sim,
                "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},\
                 {:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},\
                 {:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},\
                 {:.9e},{:.9e},{:.9e},{:.9e},{},{:.9e}",
                r.t, b.p.x, b.p.y, b.p.z, b.v.x, b.v.y, b.v.z, b.q.w, b.q.i, b.q.j, b.q.k,
                b.omega.x, b.omega.y, b.omega.z,
                a.rotor_speeds[0], a.rotor_speeds[1], a.rotor_speeds[2], a.rotor_speeds[3],
                a.tilt_angles[0], a.tilt_angles[1], a.tilt_angles[2], a.tilt_angles[3],
                a.tilt_cmds[0], a.tilt_cmds[1], a.tilt_cmds[2], a.tilt_cmds[3],
                r.applied.force.x, r.applied.force.y, r.applied.force.z,
                r.applied.torque.x, r.applied.torque.y, r.applied.torque.z,
                r.reaction.force.x, r.reaction.force.y, r.reaction.force.z,
                r.reaction.torque.x, r.reaction.torque.y, r.reaction.torque.z,
                r.contact as u8,
                r.ref_p.x, r.ref_p.y, r.ref_p.z, r.lateral_speed,
                phase_index(r.phase), r.power,
            )?;
        }

        let mut ctrl = std::io::BufWriter::new(std::fs::File::create(dir.join("ctrl_log.csv"))?);
        writeln!(ctrl, "{CTRL_LOG_HEADER}")?;
        for r in &self.ctrl {
            writeln!(
                ctrl,
                "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},\
                 {:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{},{:.9e},\
                 {:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},\
                 {:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{}",
                r.t,
                r.wrench_cmd.force.x, r.wrench_cmd.force.y, r.wrench_cmd.force.z,
                r.wrench_cmd.torque.x, r.wrench_cmd.torque.y, r.wrench_cmd.torque.z,
                r.u0[0], r.u0[1], r.u0[2], r.u0[3], r.u0[4], r.u0[5],
                r.kkt, r.iterations, status_str(r.status), r.delta_stages, r.solve_ms,
                r.estimate.force.x, r.estimate.force.y, r.estimate.force.z,
                r.estimate.torque.x, r.estimate.torque.y, r.estimate.torque.z,
                r.truth_external.force.x, r.truth_external.force.y, r.truth_external.force.z,
                r.truth_external.torque.x, r.truth_external.torque.y, r.truth_external.torque.z,
                phase_index(r.phase), r.saturated as u8,
            )?;
        }

        let mut track = std::io::BufWriter::new(std::fs::File::create(dir.join("tracking.csv"))?);
        writeln!(track, "t,px,py,pz,ref_px,ref_py,ref_pz,err")?;
        for r in &self.sim {
            writeln!(
                track,
                "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                r.t,
                r.body.p.x,
                r.body.p.y,
                r.body.p.z,
                r.ref_p.x,
                r.ref_p.y,
                r.ref_p.z,
                (r.body.p - r.ref_p).norm()
            )?;
        }
        Ok(())
    }

    /// Reads logs back from a directory written by [`write_csv`]; only the
    /// fields needed by [`compute_metrics`] are populated for the controller
    /// log.
    pub fn read_csv(dir: &Path) -> Result<Self, Error> {
        let sim_text = std::fs::read_to_string(dir.join("sim_log.csv"))?;
        let ctrl_text = std::fs::read_to_string(dir.join("ctrl_log.csv"))?;
        let mut logs = RunLogs::default();

        for (ln, line) in sim_text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 45 {
                return Err(Error::Metrics(format!(
                    "sim_log.csv line {}: expected 45 fields, got {}",
                    ln + 1,
                    f.len()
                )));
            }
            let num = |i: usize| -> Result<f64, Error> {
                f[i].trim()
                    .parse()
                    .map_err(|e| Error::Metrics(format!("sim_log.csv line {}: {e}", ln + 1)))
            };
            let body = RigidBodyState {
                p: Vec3::new(num(1)?, num(2)?, num(3)?),
                v: Vec3::new(num(4)?, num(5)?, num(6)?),
                q: crate::math::Quat::from_parts(
                    num(7)?,
                    Vec3::new(num(8)?, num(9)?, num(10)?),
                ),
                omega: Vec3::new(num(11)?, num(12)?, num(13)?),
            };
            logs.sim.push(SimRecord {
                t: num(0)?,
                body,
                actuators: ActuatorState {
                    rotor_speeds: [num(14)?, num(15)?, num(16)?, num(17)?],
                    tilt_angles: [num(18)?, num(19)?, num(20)?, num(21)?],
                    tilt_cmds: [num(22)?, num(23)?, num(24)?, num(25)?],
                },
                applied: Wrench::new(
                    Vec3::new(num(26)?, num(27)?, num(28)?),
                    Vec3::new(num(29)?, num(30)?, num(31)?),
                ),
                reaction: Wrench::new(
                    Vec3::new(num(32)?, num(33)?, num(34)?),
                    Vec3::new(num(35)?, num(36)?, num(37)?),
                ),
                contact: f[38].trim() == "1",
                ref_p: Vec3::new(num(39)?, num(40)?, num(41)?),
                lateral_speed: num(42)?,
                phase: parse_phase(f[43].trim().chars().next().unwrap_or('0')),
                power: num(44)?,
            });
        }

        for (ln, line) in ctrl_text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 32 {
                return Err(Error::Metrics(format!(
                    "ctrl_log.csv line {}: expected 32 fields, got {}",
                    ln + 1,
                    f.len()
                )));
            }
            let num = |i: usize| -> Result<f64, Error> {
                f[i].trim()
                    .parse()
                    .map_err(|e| Error::Metrics(format!("ctrl_log.csv line {}: {e}", ln + 1)))
            };
            logs.ctrl.push(CtrlRecord {
                t: num(0)?,
                wrench_cmd: Wrench::new(
                    Vec3::new(num(1)?, num(2)?, num(3)?),
                    Vec3::new(num(4)?, num(5)?, num(6)?),
                ),
                u0: [num(7)?, num(8)?, num(9)?, num(10)?, num(11)?, num(12)?],
                kkt: num(13)?,
                iterations: num(14)? as usize,
                status: parse_status(f[15].trim()),
                delta_stages: num(16)? as usize,
                solve_ms: num(17)?,
                estimate: Wrench::new(
                    Vec3::new(num(18)?, num(19)?, num(20)?),
                    Vec3::new(num(21)?, num(22)?, num(23)?),
                ),
                truth_external: Wrench::new(
                    Vec3::new(num(24)?, num(25)?, num(26)?),
                    Vec3::new(num(27)?, num(28)?, num(29)?),
                ),
                phase: parse_phase(f[30].trim().chars().next().unwrap_or('0')),
                saturated: f[31].trim() == "1",
            });
        }
        Ok(logs)
    }
}

fn status_str(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIter => "max-iter",
        SolveStatus::InfeasibleRelaxed => "infeasible-relaxed",
    }
}

fn parse_status(s: &str) -> SolveStatus {
    match s {
        "max-iter" => SolveStatus::MaxIter,
        "infeasible-relaxed" => SolveStatus::InfeasibleRelaxed,
        _ => SolveStatus::Converged,
    }
}

fn parse_phase(c: char) -> Phase {
    match c {
        '1' => Phase::Transition,
        '2' => Phase::Ground,
        _ => Phase::Aerial,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_proxy_calibrated_at_hover() {
        let params = VehicleParams::default();
        let power = PowerConfig::default();
        let alloc = build_allocation(&params).unwrap();
        let mg = params.mass * GRAVITY;
        let (cmds, _) = extract_commands(
            &inverse_allocate(&alloc, &Wrench::new(Vec3::new(0.0, 0.0, mg), Vec3::zeros())),
            &params,
            &[TILT_VERTICAL; 4],
        );
        let actuators = ActuatorState {
            rotor_speeds: cmds.rotor_speeds,
            tilt_angles: cmds.tilt_angles,
            tilt_cmds: cmds.tilt_angles,
        };
        let p = power_proxy(&actuators, &power, &params);
        assert!((p - 650.0).abs() / 650.0 < 0.01, "hover power {p}");
    }

    #[test]
    fn power_proxy_baseline_when_off() {
        let params = VehicleParams::default();
        let power = PowerConfig::default();
        let p = power_proxy(&ActuatorState::at_rest(), &power, &params);
        assert_eq!(p, power.base_power);
    }

    #[test]
    fn power_proxy_three_halves_law() {
        let params = VehicleParams::default();
        let power = PowerConfig::default();
        let single = ActuatorState {
            rotor_speeds: [300.0; 4],
            tilt_angles: [TILT_VERTICAL; 4],
            tilt_cmds: [TILT_VERTICAL; 4],
        };
        let doubled = ActuatorState {
            rotor_speeds: [300.0 * 2f64.sqrt(); 4], // doubles T = c_t Ω²
            ..single
        };
        let p1 = power_proxy(&single, &power, &params) - power.base_power;
        let p2 = power_proxy(&doubled, &power, &params) - power.base_power;
        assert!((p2 / p1 - 2f64.powf(1.5)).abs() < 1e-9);
    }

    fn synthetic_record(t: f64, err_x: f64) -> SimRecord {
        SimRecord {
            t,
            body: RigidBodyState::at_rest(Vec3::new(err_x, 0.0, 1.0)),
            actuators: ActuatorState::at_rest(),
            applied: Wrench::zero(),
            reaction: Wrench::zero(),
            contact: false,
            ref_p: Vec3::new(0.0, 0.0, 1.0),
            phase: Phase::Aerial,
            lateral_speed: 0.0,
            power: 100.0,
        }
    }

    #[test]
    fn metrics_zero_error_log() {
        let logs = RunLogs {
            sim: (0..10).map(|k| synthetic_record(k as f64 * 0.1, 0.0)).collect(),
            ctrl: Vec::new(),
        };
        let m = compute_metrics(&logs, &VehicleParams::default()).unwrap();
        assert_eq!(m.rmse_position, 0.0);
    }

    #[test]
    fn metrics_constant_offset() {
        let logs = RunLogs {
            sim: (0..10).map(|k| synthetic_record(k as f64 * 0.1, 0.1)).collect(),
            ctrl: Vec::new(),
        };
        let m = compute_metrics(&logs, &VehicleParams::default()).unwrap();
        assert!((m.rmse_position - 0.1).abs() < 1e-12);
    }

    #[test]
    fn metrics_hand_computed_three_samples() {
        let errs = [0.1, 0.2, 0.4];
        let logs = RunLogs {
            sim: errs
                .iter()
                .enumerate()
                .map(|(k, &e)| synthetic_record(k as f64 * 0.1, e))
                .collect(),
            ctrl: Vec::new(),
        };
        let m = compute_metrics(&logs, &VehicleParams::default()).unwrap();
        let expect = ((0.01 + 0.04 + 0.16) / 3.0f64).sqrt();
        assert!((m.rmse_position - expect).abs() < 1e-12);
    }

    #[test]
    fn metrics_rejects_empty_logs() {
        let logs = RunLogs::default();
        assert!(compute_metrics(&logs, &VehicleParams::default()).is_err());
    }

    #[test]
    fn scenario_toml_roundtrip() {
        let cfg = ScenarioConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ScenarioConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.dt_ctrl, cfg.dt_ctrl);
    }

    #[test]
    fn scenario_validates_rates() {
        let mut cfg = ScenarioConfig::default();
        cfg.dt_ctrl = 0.0105;
        assert!(cfg.validate().is_err());
    }
}
