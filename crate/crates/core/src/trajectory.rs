//! Parametric reference generation: hover, aerial and ground figure-eights,
//! and hybrid missions with a smooth touchdown blend.
//!
//! Figure-eights follow the Lissajous curve
//! c(s) = center + (A_x sin s, A_y sin 2s, A_z sin 2s) with a time law s(t)
//! built from a curvature- and acceleration-limited speed profile over the
//! path (forward/backward passes), plus a smooth-step startup ramp from
//! rest. On ground trajectories the altitude is pinned to the wheel radius
//! and the yaw tracks the path tangent so the reference is trackable under
//! the no-side-slip constraint. Hybrid missions run the same curve
//! throughout and blend altitude (and optionally the speed profile) across
//! the transition window.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math::{quat_from_yaw, Quat, Vec3};

/// One sample of the reference trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    /// Position [m], inertial frame.
    pub p: Vec3,
    /// Velocity [m/s], inertial frame.
    pub v: Vec3,
    /// Attitude reference, unit quaternion.
    pub q: Quat,
    /// Body angular velocity reference [rad/s].
    pub omega: Vec3,
    /// True iff the reference height equals the wheel radius (ground phase).
    pub contact: bool,
}

/// Locomotion phase used for metric segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Aerial,
    Transition,
    Ground,
}

/// Yaw policy along figure-eights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum YawMode {
    /// Yaw follows the horizontal path tangent (required on the ground).
    #[default]
    Tangent,
    /// Constant yaw (aerial only).
    Constant,
}

/// Serializable trajectory description (scenario-file schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// Hold a pose.
    Hover {
        position: [f64; 3],
        #[serde(default)]
        yaw: f64,
        duration: f64,
    },
    /// Periodic figure-eight.
    FigureEight {
        #[serde(flatten)]
        shape: EightShape,
        /// Total duration [s] (ramp included).
        duration: f64,
        /// True pins the altitude to the wheel radius and flags contact.
        #[serde(default)]
        ground: bool,
    },
    /// Aerial eight, cubic descent blend, ground eight on the same footprint.
    Hybrid {
        #[serde(flatten)]
        shape: EightShape,
        aerial_duration: f64,
        transition_duration: f64,
        ground_duration: f64,
        /// Ground-phase speed limit [m/s]; defaults to the aerial one.
        #[serde(default)]
        ground_v_max: Option<f64>,
    },
}

/// Geometry and limits of a figure-eight.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EightShape {
    /// Center of the footprint [m]; `center[2]` is the aerial altitude.
    pub center: [f64; 3],
    /// Half-width A_x [m] (x extent is 2·A_x).
    pub half_width: f64,
    /// Half-height A_y [m] of the horizontal footprint.
    pub half_height: f64,
    /// Vertical undulation amplitude A_z [m] (aerial only).
    #[serde(default)]
    pub z_amplitude: f64,
    /// Peak speed [m/s].
    pub v_max: f64,
    /// Acceleration budget [m/s²].
    pub a_max: f64,
    /// Startup ramp from rest [s].
    #[serde(default = "default_ramp")]
    pub ramp_time: f64,
    #[serde(default)]
    pub yaw_mode: YawMode,
    /// Yaw value for `YawMode::Constant` [rad].
    #[serde(default)]
    pub constant_yaw: f64,
}

fn default_ramp() -> f64 {
    2.5
}

/// A built, immutable trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    kind: Kind,
    duration: f64,
}

#[derive(Debug, Clone)]
enum Kind {
    Hover { p: Vec3, yaw: f64 },
    Eight(EightTraj),
}

impl Trajectory {
    /// Builds a trajectory from its description; `wheel_radius` pins ground
    /// altitudes.
    pub fn build(spec: &TrajectorySpec, wheel_radius: f64) -> Result<Self, Error> {
        match spec {
            TrajectorySpec::Hover { position, yaw, duration } => {
                if !(*duration > 0.0) {
                    return Err(Error::Planning("hover duration must be > 0".into()));
                }
                Ok(Self {
                    kind: Kind::Hover {
                        p: Vec3::new(position[0], position[1], position[2]),
                        yaw: *yaw,
                    },
                    duration: *duration,
                })
            }
            TrajectorySpec::FigureEight { shape, duration, ground } => {
                if !(*duration > shape.ramp_time) {
                    return Err(Error::Planning(
                        "figure-eight duration must exceed the ramp".into(),
                    ));
                }
                let mut shape = *shape;
                if *ground {
                    shape.center[2] = wheel_radius;
                    shape.z_amplitude = 0.0;
                    shape.yaw_mode = YawMode::Tangent;
                }
                let mode = if *ground {
                    MissionMode::Ground
                } else {
                    MissionMode::Aerial
                };
                let eight = EightTraj::build(&shape, mode, *duration, wheel_radius, None)?;
                Ok(Self {
                    kind: Kind::Eight(eight),
                    duration: *duration,
                })
            }
            TrajectorySpec::Hybrid {
                shape,
                aerial_duration,
                transition_duration,
                ground_duration,
                ground_v_max,
            } => {
                if *transition_duration < 1.0 {
                    return Err(Error::Planning("transition duration must be ≥ 1 s".into()));
                }
                if !(*aerial_duration > shape.ramp_time && *ground_duration > 0.0) {
                    return Err(Error::Planning(
                        "hybrid phases must cover the ramp and a ground segment".into(),
                    ));
                }
                if shape.center[2] <= wheel_radius {
                    return Err(Error::Planning(format!(
                        "aerial altitude {} must clear the wheel radius {}",
                        shape.center[2], wheel_radius
                    )));
                }
                if let Some(vg) = ground_v_max {
                    if !(*vg > 0.0) {
                        return Err(Error::Planning("ground_v_max must be > 0".into()));
                    }
                }
                let mut shape = *shape;
                // Level approach keeps the altitude blend C¹ and tangent yaw
                // carries continuously into the ground phase.
                shape.z_amplitude = 0.0;
                shape.yaw_mode = YawMode::Tangent;
                let duration = aerial_duration + transition_duration + ground_duration;
                let mode = MissionMode::Hybrid {
                    t_aerial: *aerial_duration,
                    t_transition: *transition_duration,
                };
                let eight = EightTraj::build(&shape, mode, duration, wheel_radius, *ground_v_max)?;
                Ok(Self {
                    kind: Kind::Eight(eight),
                    duration,
                })
            }
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// Evaluates the reference at `t` (clamped to the trajectory domain).
    pub fn eval(&self, t: f64) -> ReferencePoint {
        let t = t.clamp(0.0, self.duration);
        match &self.kind {
            Kind::Hover { p, yaw } => ReferencePoint {
                p: *p,
                v: Vec3::zeros(),
                q: quat_from_yaw(*yaw),
                omega: Vec3::zeros(),
                contact: false,
            },
            Kind::Eight(e) => e.eval(t),
        }
    }

    /// Phase label at `t` for metric segmentation.
    pub fn phase(&self, t: f64) -> Phase {
        match &self.kind {
            Kind::Hover { .. } => Phase::Aerial,
            Kind::Eight(e) => e.phase(t.clamp(0.0, self.duration)),
        }
    }

    /// Stage-aligned reference points for the NMPC horizon; samples beyond
    /// the domain hold the terminal point.
    pub fn sample_horizon(&self, t: f64, stages: usize, stage_dt: f64) -> Vec<ReferencePoint> {
        (0..=stages)
            .map(|k| self.eval(t + k as f64 * stage_dt))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Figure-eight with a speed-profiled time law.
// ---------------------------------------------------------------------------

const GRID: usize = 4096;
const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
/// Acceleration headroom left for discretization error in the profile.
const ACCEL_MARGIN: f64 = 0.99;
/// Spacing of the time-law lookup table [s].
const TABLE_DT: f64 = 1e-3;
/// Rest period before the ramp, covering the table smoothing support [s].
const RAMP_PAD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
enum MissionMode {
    Aerial,
    Ground,
    /// Aerial until `t_aerial`, altitude/speed blend over `t_transition`,
    /// ground afterwards.
    Hybrid { t_aerial: f64, t_transition: f64 },
}

#[derive(Debug, Clone)]
struct EightTraj {
    shape: EightShape,
    mode: MissionMode,
    wheel_radius: f64,
    /// Path speed v(s) on the s-grid [m/s] (primary profile).
    speed: Vec<f64>,
    /// Ground-phase profile when it differs (hybrid with ground_v_max).
    speed_ground: Option<Vec<f64>>,
    /// Cumulative arc length at the s-grid nodes [m].
    ell_of_s: Vec<f64>,
    /// Lookup: arc length ℓ(t) at `TABLE_DT` spacing over the mission.
    ell_of_t: Vec<f64>,
    /// Smoothed path speed dℓ/dt on the same grid [m/s].
    speed_of_t: Vec<f64>,
}

impl EightTraj {
    fn build(
        shape: &EightShape,
        mode: MissionMode,
        duration: f64,
        wheel_radius: f64,
        ground_v_max: Option<f64>,
    ) -> Result<Self, Error> {
        if !(shape.half_width > 0.0 && shape.half_height > 0.0) {
            return Err(Error::Planning("figure-eight amplitudes must be > 0".into()));
        }
        if !(shape.v_max > 0.0 && shape.a_max > 0.0) {
            return Err(Error::Planning("v_max and a_max must be > 0".into()));
        }
        if shape.ramp_time < 1.0 {
            return Err(Error::Planning("ramp_time must be at least 1 s".into()));
        }

        let speed = speed_profile(shape, shape.v_max)?;
        let speed_ground = match (mode, ground_v_max) {
            (MissionMode::Hybrid { .. }, Some(vg)) => Some(speed_profile(shape, vg)?),
            _ => None,
        };

        let ds = TWO_PI / GRID as f64;
        let mut ell_of_s = Vec::with_capacity(GRID + 1);
        let mut acc = 0.0;
        ell_of_s.push(0.0);
        for i in 0..GRID {
            // Midpoint arc increment.
            let sm = (i as f64 + 0.5) * ds;
            acc += tangent_norm(shape, sm) * ds;
            ell_of_s.push(acc);
        }

        let mut traj = Self {
            shape: *shape,
            mode,
            wheel_radius,
            speed,
            speed_ground,
            ell_of_s,
            ell_of_t: Vec::new(),
            speed_of_t: Vec::new(),
        };
        traj.build_time_table(duration);
        Ok(traj)
    }

    /// Path parameter s for an arc length (periodic in whole laps).
    fn s_of_ell(&self, ell: f64) -> f64 {
        let lap = *self.ell_of_s.last().unwrap();
        let laps = (ell / lap).floor();
        let rem = ell - laps * lap;
        // Binary search in the monotone per-lap table.
        let idx = self.ell_of_s.partition_point(|&e| e <= rem).min(GRID);
        let i = idx.saturating_sub(1);
        let (e0, e1) = (self.ell_of_s[i], self.ell_of_s[i + 1]);
        let ds = TWO_PI / GRID as f64;
        let frac = if e1 > e0 { (rem - e0) / (e1 - e0) } else { 0.0 };
        laps * TWO_PI + (i as f64 + frac) * ds
    }

    /// Cubic blend factor 0→1 across the hybrid transition and its rate.
    fn blend(&self, t: f64) -> (f64, f64) {
        match self.mode {
            MissionMode::Aerial => (0.0, 0.0),
            MissionMode::Ground => (1.0, 0.0),
            MissionMode::Hybrid { t_aerial, t_transition } => {
                let u = ((t - t_aerial) / t_transition).clamp(0.0, 1.0);
                (
                    u * u * (3.0 - 2.0 * u),
                    (6.0 * u - 6.0 * u * u) / t_transition,
                )
            }
        }
    }

    fn phase(&self, t: f64) -> Phase {
        match self.mode {
            MissionMode::Aerial => Phase::Aerial,
            MissionMode::Ground => Phase::Ground,
            MissionMode::Hybrid { t_aerial, t_transition } => {
                if t < t_aerial {
                    Phase::Aerial
                } else if t < t_aerial + t_transition {
                    Phase::Transition
                } else {
                    Phase::Ground
                }
            }
        }
    }

    fn ramp(&self, t: f64) -> f64 {
        // The table smoothing spans ±RAMP_PAD, so motion is delayed by the
        // pad to keep the smoothed start exactly at rest on the start point.
        let x = ((t - RAMP_PAD) / self.shape.ramp_time).clamp(0.0, 1.0);
        x * x * (3.0 - 2.0 * x)
    }

    /// Profile speed at path parameter `s` and time `t` (hybrid blends the
    /// two profiles across the transition).
    fn profile_speed(&self, s: f64, t: f64) -> f64 {
        let v_air = interp_periodic(&self.speed, s);
        match &self.speed_ground {
            None => v_air,
            Some(g) => {
                let (b, _) = self.blend(t);
                v_air + (interp_periodic(g, s) - v_air) * b
            }
        }
    }

    fn ell_rate(&self, t: f64, ell: f64) -> f64 {
        self.ramp(t) * self.profile_speed(self.s_of_ell(ell), t)
    }

    fn build_time_table(&mut self, duration: f64) {
        let n = ((duration + 1.0) / TABLE_DT).ceil() as usize + 2;
        let mut table = Vec::with_capacity(n);
        let mut ell = 0.0;
        for k in 0..n {
            table.push(ell);
            let t = k as f64 * TABLE_DT;
            // Midpoint step keeps the table error ~O(dt²).
            let d1 = self.ell_rate(t, ell);
            let d2 = self.ell_rate(t + 0.5 * TABLE_DT, ell + 0.5 * TABLE_DT * d1);
            ell += TABLE_DT * d2;
        }
        // The speed profile has acceleration kinks where constraint regimes
        // switch; smearing the arc-length time law over ~80 ms makes the
        // sampled trajectory smooth at the table scale. Averaging cannot
        // raise the speed (table slope) or acceleration above their sups.
        smooth_table(&mut table, 40);
        smooth_table(&mut table, 40);
        self.speed_of_t = (0..table.len())
            .map(|k| {
                let lo = k.saturating_sub(1);
                let hi = (k + 1).min(table.len() - 1);
                (table[hi] - table[lo]) / ((hi - lo) as f64 * TABLE_DT)
            })
            .collect();
        self.ell_of_t = table;
    }

    /// Path parameter and its rate at time `t`, from the smoothed tables.
    fn s_and_rate_at(&self, t: f64) -> (f64, f64) {
        let t = t.max(0.0);
        let x = t / TABLE_DT;
        let i = (x as usize).min(self.ell_of_t.len() - 2);
        let frac = x - i as f64;
        let ell = self.ell_of_t[i] + (self.ell_of_t[i + 1] - self.ell_of_t[i]) * frac;
        let speed = self.speed_of_t[i] + (self.speed_of_t[i + 1] - self.speed_of_t[i]) * frac;
        let s = self.s_of_ell(ell);
        (s, speed / tangent_norm(&self.shape, s))
    }

    fn eval(&self, t: f64) -> ReferencePoint {
        let sh = &self.shape;
        let (s, s_dot) = self.s_and_rate_at(t);
        let mut p = curve(sh, s);
        let c1 = curve_d1(sh, s);
        let mut v = c1 * s_dot;

        // Altitude: aerial keeps the curve; ground pins the wheel radius;
        // hybrid blends between them.
        let (b, db) = self.blend(t);
        let contact = match self.mode {
            MissionMode::Aerial => false,
            MissionMode::Ground => true,
            MissionMode::Hybrid { t_aerial, t_transition } => t >= t_aerial + t_transition,
        };
        if b > 0.0 {
            let z_air = p.z;
            p.z = z_air + (self.wheel_radius - z_air) * b;
            v.z = v.z * (1.0 - b) + (self.wheel_radius - z_air) * db;
        }
        if contact {
            p.z = self.wheel_radius;
            v.z = 0.0;
        }

        let (q, omega) = match sh.yaw_mode {
            YawMode::Constant => (quat_from_yaw(sh.constant_yaw), Vec3::zeros()),
            YawMode::Tangent => {
                let c2 = curve_d2(sh, s);
                let (hx, hy) = (c1.x, c1.y);
                let yaw = hy.atan2(hx);
                let denom = hx * hx + hy * hy;
                let dyaw_ds = if denom > 1e-12 {
                    (hx * c2.y - hy * c2.x) / denom
                } else {
                    0.0
                };
                (quat_from_yaw(yaw), Vec3::new(0.0, 0.0, dyaw_ds * s_dot))
            }
        };

        ReferencePoint { p, v, q, omega, contact }
    }
}

fn curve(sh: &EightShape, s: f64) -> Vec3 {
    Vec3::new(
        sh.center[0] + sh.half_width * s.sin(),
        sh.center[1] + sh.half_height * (2.0 * s).sin(),
        sh.center[2] + sh.z_amplitude * (2.0 * s).sin(),
    )
}

fn curve_d1(sh: &EightShape, s: f64) -> Vec3 {
    Vec3::new(
        sh.half_width * s.cos(),
        2.0 * sh.half_height * (2.0 * s).cos(),
        2.0 * sh.z_amplitude * (2.0 * s).cos(),
    )
}

fn curve_d2(sh: &EightShape, s: f64) -> Vec3 {
    Vec3::new(
        -sh.half_width * s.sin(),
        -4.0 * sh.half_height * (2.0 * s).sin(),
        -4.0 * sh.z_amplitude * (2.0 * s).sin(),
    )
}

fn tangent_norm(sh: &EightShape, s: f64) -> f64 {
    curve_d1(sh, s).norm()
}

/// In-place moving average of half-width `m` cells; edges replicate the
/// boundary values (the vehicle is at rest before t = 0 and in steady motion
/// at the far end).
fn smooth_table(table: &mut Vec<f64>, m: usize) {
    let n = table.len();
    let w = 2 * m + 1;
    let get = |t: &Vec<f64>, i: isize| -> f64 {
        if i < 0 {
            t[0]
        } else if i as usize >= n {
            // Linear extrapolation with the final slope.
            let last = t[n - 1];
            let slope = t[n - 1] - t[n - 2];
            last + slope * (i as f64 - (n - 1) as f64)
        } else {
            t[i as usize]
        }
    };
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    for j in -(m as isize)..=(m as isize) {
        acc += get(table, j);
    }
    out.push(acc / w as f64);
    for k in 1..n {
        acc += get(table, k as isize + m as isize) - get(table, k as isize - 1 - m as isize);
        out.push(acc / w as f64);
    }
    *table = out;
}

fn interp_periodic(values: &[f64], s: f64) -> f64 {
    let n = values.len();
    let x = s.rem_euclid(TWO_PI) / (TWO_PI / n as f64);
    let i = (x as usize) % n;
    let frac = x - i as f64;
    let a = values[i];
    let b = values[(i + 1) % n];
    a + (b - a) * frac
}

/// Curvature- and acceleration-limited speed profile on the s-grid. The
/// tangential budget at each point is what the centripetal demand leaves of
/// a_max, so the total acceleration stays inside the budget. Errors when the
/// requested peak speed is unreachable anywhere on the path.
fn speed_profile(sh: &EightShape, v_max: f64) -> Result<Vec<f64>, Error> {
    let a_budget = ACCEL_MARGIN * sh.a_max;
    let v_cap = (1.0 - 5e-4) * v_max;
    let ds = TWO_PI / GRID as f64;

    let mut kappa = vec![0.0; GRID];
    let mut v = vec![0.0; GRID];
    for i in 0..GRID {
        let s = i as f64 * ds;
        let c1 = curve_d1(sh, s);
        let c2 = curve_d2(sh, s);
        let n1 = c1.norm();
        kappa[i] = c1.cross(&c2).norm() / (n1 * n1 * n1);
        let v_curv = if kappa[i] > 1e-9 {
            (a_budget / kappa[i]).sqrt()
        } else {
            f64::INFINITY
        };
        v[i] = v_cap.min(v_curv);
    }

    let arc: Vec<f64> = (0..GRID)
        .map(|i| tangent_norm(sh, i as f64 * ds) * ds)
        .collect();
    // Tangential budget left at grid point i for its current speed.
    let a_t = |kappa_i: f64, v_i: f64| -> f64 {
        let a_n = kappa_i * v_i * v_i;
        (a_budget * a_budget - a_n * a_n).max(0.0).sqrt()
    };
    for _ in 0..8 {
        let mut changed = false;
        for step in 0..2 * GRID {
            let i = step % GRID;
            let j = (i + 1) % GRID;
            let cap = (v[i] * v[i] + 2.0 * a_t(kappa[i], v[i]) * arc[i]).sqrt();
            if v[j] > cap + 1e-12 {
                v[j] = cap;
                changed = true;
            }
        }
        for step in 0..2 * GRID {
            let j = GRID - 1 - (step % GRID);
            let i = (j + 1) % GRID;
            let cap = (v[i] * v[i] + 2.0 * a_t(kappa[i], v[i]) * arc[j]).sqrt();
            if v[j] > cap + 1e-12 {
                v[j] = cap;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let peak = v.iter().cloned().fold(0.0, f64::max);
    if peak < 0.985 * v_max {
        return Err(Error::Planning(format!(
            "peak speed {v_max} m/s unreachable under a_max {} m/s² on this path (best {peak:.3})",
            sh.a_max
        )));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn desk_shape() -> EightShape {
        EightShape {
            center: [0.0, 0.0, 1.0],
            half_width: 1.0,
            half_height: 0.5,
            z_amplitude: 0.0,
            v_max: 1.5,
            a_max: 1.5,
            ramp_time: 2.5,
            yaw_mode: YawMode::Tangent,
            constant_yaw: 0.0,
        }
    }

    fn aerial_eight(duration: f64) -> Trajectory {
        Trajectory::build(
            &TrajectorySpec::FigureEight {
                shape: desk_shape(),
                duration,
                ground: false,
            },
            0.15,
        )
        .unwrap()
    }

    #[test]
    fn starts_at_center_at_rest() {
        let traj = aerial_eight(20.0);
        let r0 = traj.eval(0.0);
        assert_relative_eq!(r0.p, Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-9);
        assert!(r0.v.norm() < 1e-9);
        let r = traj.eval(3.0);
        assert!(r.v.norm() > 0.1);
    }

    #[test]
    fn peak_speed_reaches_v_max_within_one_percent() {
        let traj = aerial_eight(25.0);
        let mut peak: f64 = 0.0;
        let mut t = 0.0;
        while t < 25.0 {
            peak = peak.max(traj.eval(t).v.norm());
            t += 0.005;
        }
        assert!((peak - 1.5).abs() / 1.5 < 0.01, "peak speed {peak}");
        assert!(peak <= 1.5 + 1e-9);
    }

    #[test]
    fn finite_difference_velocity_matches_reference() {
        let traj = aerial_eight(20.0);
        let dt = 0.01;
        let mut t = 0.05;
        while t < 19.0 {
            let p0 = traj.eval(t - dt).p;
            let p1 = traj.eval(t + dt).p;
            let fd = (p1 - p0) / (2.0 * dt);
            let v = traj.eval(t).v;
            assert!((fd - v).norm() < 1e-3, "t = {t}: fd {fd:?} vs v {v:?}");
            t += 0.1;
        }
    }

    #[test]
    fn acceleration_stays_within_budget() {
        let traj = aerial_eight(30.0);
        let dt = 0.01;
        let mut t = dt;
        let mut peak: f64 = 0.0;
        while t < 30.0 - dt {
            let v0 = traj.eval(t - dt).v;
            let v1 = traj.eval(t + dt).v;
            let a = (v1 - v0).norm() / (2.0 * dt);
            peak = peak.max(a);
            t += 0.01;
        }
        assert!(peak <= 1.5 + 1e-3, "peak accel {peak}");
    }

    #[test]
    fn vertical_undulation_keeps_budget() {
        let mut shape = desk_shape();
        shape.z_amplitude = 0.15;
        let traj = Trajectory::build(
            &TrajectorySpec::FigureEight { shape, duration: 25.0, ground: false },
            0.15,
        )
        .unwrap();
        let dt = 0.01;
        let mut t = dt;
        let mut peak_a: f64 = 0.0;
        let mut peak_v: f64 = 0.0;
        while t < 25.0 - dt {
            let v0 = traj.eval(t - dt).v;
            let v1 = traj.eval(t + dt).v;
            peak_a = peak_a.max((v1 - v0).norm() / (2.0 * dt));
            peak_v = peak_v.max(traj.eval(t).v.norm());
            t += 0.01;
        }
        assert!(peak_a <= 1.5 + 1e-3, "peak accel {peak_a}");
        assert!(peak_v <= 1.5 + 1e-9, "peak speed {peak_v}");
        // z actually moves
        assert!(traj.eval(10.0).p.z != traj.eval(11.0).p.z);
    }

    #[test]
    fn ground_reference_has_zero_body_lateral_velocity() {
        let spec = TrajectorySpec::FigureEight {
            shape: desk_shape(),
            duration: 30.0,
            ground: true,
        };
        let traj = Trajectory::build(&spec, 0.15).unwrap();
        let mut t = 0.0;
        while t < 30.0 {
            let r = traj.eval(t);
            assert!(r.contact);
            assert_relative_eq!(r.p.z, 0.15, epsilon = 1e-12);
            let v_body = crate::math::rotate_inv(&r.q, &r.v);
            assert!(
                v_body.y.abs() <= 1e-6,
                "t = {t}: lateral reference speed {}",
                v_body.y
            );
            t += 0.05;
        }
    }

    #[test]
    fn ground_yaw_rate_matches_finite_difference() {
        let spec = TrajectorySpec::FigureEight {
            shape: desk_shape(),
            duration: 30.0,
            ground: true,
        };
        let traj = Trajectory::build(&spec, 0.15).unwrap();
        let dt = 1e-3;
        let mut t = 3.0;
        while t < 25.0 {
            let y0 = yaw_of(&traj.eval(t - dt).q);
            let y1 = yaw_of(&traj.eval(t + dt).q);
            let mut dy = y1 - y0;
            while dy > std::f64::consts::PI {
                dy -= TWO_PI;
            }
            while dy < -std::f64::consts::PI {
                dy += TWO_PI;
            }
            let fd = dy / (2.0 * dt);
            let w = traj.eval(t).omega.z;
            assert!((fd - w).abs() < 2e-2, "t = {t}: fd {fd} vs w {w}");
            t += 0.25;
        }
    }

    fn yaw_of(q: &Quat) -> f64 {
        let x = crate::math::rotate(q, &Vec3::x());
        x.y.atan2(x.x)
    }

    #[test]
    fn hover_horizon_is_constant() {
        let spec = TrajectorySpec::Hover {
            position: [1.0, 2.0, 1.5],
            yaw: 0.3,
            duration: 10.0,
        };
        let traj = Trajectory::build(&spec, 0.15).unwrap();
        let pts = traj.sample_horizon(3.0, 20, 0.1);
        assert_eq!(pts.len(), 21);
        for p in &pts {
            assert_eq!(p.p, Vec3::new(1.0, 2.0, 1.5));
            assert_eq!(p.v, Vec3::zeros());
        }
    }

    #[test]
    fn horizon_clamps_past_the_end() {
        let traj = aerial_eight(10.0);
        let terminal = traj.eval(10.0);
        let pts = traj.sample_horizon(9.5, 20, 0.1);
        for (k, p) in pts.iter().enumerate() {
            let t = 9.5 + k as f64 * 0.1;
            if t >= 10.0 {
                assert_eq!(p.p, terminal.p);
            }
        }
    }

    #[test]
    fn horizon_matches_direct_evaluation() {
        let traj = aerial_eight(20.0);
        let pts = traj.sample_horizon(4.2, 20, 0.1);
        for (k, p) in pts.iter().enumerate() {
            let direct = traj.eval(4.2 + k as f64 * 0.1);
            assert_relative_eq!(p.p, direct.p, epsilon = 1e-12);
            assert_relative_eq!(p.v, direct.v, epsilon = 1e-12);
        }
    }

    fn hybrid() -> Trajectory {
        Trajectory::build(
            &TrajectorySpec::Hybrid {
                shape: desk_shape(),
                aerial_duration: 12.0,
                transition_duration: 3.0,
                ground_duration: 20.0,
                ground_v_max: None,
            },
            0.15,
        )
        .unwrap()
    }

    #[test]
    fn hybrid_ground_phase_sits_on_wheel_radius() {
        let traj = hybrid();
        let mut t = 15.0;
        while t < 35.0 {
            let r = traj.eval(t);
            assert_relative_eq!(r.p.z, 0.15, epsilon = 1e-12);
            assert!(r.contact);
            assert_eq!(traj.phase(t), Phase::Ground);
            t += 0.1;
        }
        assert_eq!(traj.phase(5.0), Phase::Aerial);
        assert_eq!(traj.phase(13.0), Phase::Transition);
    }

    #[test]
    fn hybrid_horizontal_motion_continues_through_touchdown() {
        let traj = hybrid();
        // Horizontal speed must not collapse at the phase switches.
        for t in [11.9, 12.1, 14.9, 15.1, 20.0] {
            let v = traj.eval(t).v;
            let vh = (v.x * v.x + v.y * v.y).sqrt();
            assert!(vh > 0.3, "t = {t}: horizontal speed {vh}");
        }
    }

    #[test]
    fn hybrid_altitude_is_c1_across_transition() {
        let traj = hybrid();
        let dt = 1e-3;
        for t0 in [12.0, 15.0] {
            for k in -5..5 {
                let t = t0 + k as f64 * 0.01;
                let z0 = traj.eval(t - dt).p.z;
                let z1 = traj.eval(t).p.z;
                let z2 = traj.eval(t + dt).p.z;
                let az = (z2 - 2.0 * z1 + z0) / (dt * dt);
                assert!(az.abs() < 2.0, "t = {t}: vertical accel {az}");
            }
        }
    }

    #[test]
    fn hybrid_touchdown_speed_in_bounds() {
        let traj = hybrid();
        let vz = traj.eval(15.0 - 1e-6).v.z;
        assert!((-0.3..=0.0).contains(&vz), "touchdown vz {vz}");
    }

    #[test]
    fn hybrid_rejects_short_transition() {
        let res = Trajectory::build(
            &TrajectorySpec::Hybrid {
                shape: desk_shape(),
                aerial_duration: 10.0,
                transition_duration: 0.5,
                ground_duration: 10.0,
                ground_v_max: None,
            },
            0.15,
        );
        assert!(res.is_err());
    }

    #[test]
    fn hybrid_rejects_altitude_below_wheels() {
        let mut shape = desk_shape();
        shape.center[2] = 0.1;
        let res = Trajectory::build(
            &TrajectorySpec::Hybrid {
                shape,
                aerial_duration: 10.0,
                transition_duration: 3.0,
                ground_duration: 10.0,
                ground_v_max: None,
            },
            0.15,
        );
        assert!(res.is_err());
    }

    #[test]
    fn infeasible_speed_pairing_rejected() {
        let mut shape = desk_shape();
        shape.a_max = 0.001;
        let res = Trajectory::build(
            &TrajectorySpec::FigureEight {
                shape,
                duration: 10.0,
                ground: false,
            },
            0.15,
        );
        assert!(res.is_err());
    }
}
