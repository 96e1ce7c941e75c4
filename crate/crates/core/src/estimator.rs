//! External wrench estimation from IMU, measured rotor speeds and
//! servo-model-reconstructed tilt angles, plus the servo time-constant
//! identification procedure.
//!
//! The estimator integrates the momentum balance
//!
//!   F̂_e = K_f ∫ (m·a − F − F̂_e) dt
//!   M̂_e = K_m (Jω − ∫ (M + (Jω)×ω + M̂_e) dt)
//!
//! where (F, M) is the wrench the actuators actually produce, reconstructed
//! via the allocation model from measured rotor speeds and the tilt angles
//! predicted by the identified first-order servo model (hobby servos have no
//! angle feedback). Both channels behave as first-order low-pass filters of
//! the true external wrench with corner K.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::allocation::{forward_wrench, AllocationModel};
use crate::error::Error;
use crate::math::Vec3;
use crate::sim::ImuSample;
use crate::types::{ActuatorState, Wrench};
use crate::vehicle::{VehicleParams, GRAVITY};

/// Estimator gains and switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Diagonal force-channel gains [1/s].
    pub k_f: [f64; 3],
    /// Diagonal torque-channel gains [1/s].
    pub k_m: [f64; 3],
    /// Reconstruct servo angles through the identified first-order model;
    /// when false the commanded angles are used directly.
    pub servo_compensation: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            k_f: [10.0; 3],
            k_m: [10.0; 3],
            servo_compensation: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.k_f.iter().chain(self.k_m.iter()).any(|&k| !(k > 0.0)) {
            return Err(Error::Config("estimator gains must be > 0".into()));
        }
        Ok(())
    }
}

/// Current estimate snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WrenchEstimate {
    /// Estimated external force [N], body frame.
    pub force: Vec3,
    /// Estimated external torque [N·m], body frame.
    pub torque: Vec3,
    /// Reconstructed servo angles [rad].
    pub tilt_angles: [f64; 4],
    /// True when the numerical guard clamped the estimate.
    pub saturated: bool,
}

impl WrenchEstimate {
    pub fn as_wrench(&self) -> Wrench {
        Wrench::new(self.force, self.torque)
    }
}

/// Stepped external wrench estimator.
#[derive(Debug, Clone)]
pub struct WrenchEstimator {
    cfg: EstimatorConfig,
    servo_tau: f64,
    inertia: Matrix3<f64>,
    mass: f64,
    force_clamp: f64,
    torque_clamp: f64,
    alpha_hat: Option<[f64; 4]>,
    f_hat: Vec3,
    m_hat: Vec3,
    integral_f: Vec3,
    integral_m: Vec3,
    momentum_prev: Option<Vec3>,
    saturated: bool,
}

impl WrenchEstimator {
    pub fn new(cfg: EstimatorConfig, params: &VehicleParams) -> Result<Self, Error> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            servo_tau: params.servo_tau,
            inertia: params.inertia,
            mass: params.mass,
            force_clamp: 10.0 * params.mass * GRAVITY,
            torque_clamp: 10.0,
            alpha_hat: None,
            f_hat: Vec3::zeros(),
            m_hat: Vec3::zeros(),
            integral_f: Vec3::zeros(),
            integral_m: Vec3::zeros(),
            momentum_prev: None,
            saturated: false,
        })
    }

    /// Zeroes all accumulators and the reconstructed angles.
    pub fn reset(&mut self) {
        self.alpha_hat = None;
        self.f_hat = Vec3::zeros();
        self.m_hat = Vec3::zeros();
        self.integral_f = Vec3::zeros();
        self.integral_m = Vec3::zeros();
        self.momentum_prev = None;
        self.saturated = false;
    }

    pub fn estimate(&self) -> WrenchEstimate {
        WrenchEstimate {
            force: self.f_hat,
            torque: self.m_hat,
            tilt_angles: self.alpha_hat.unwrap_or([crate::vehicle::TILT_VERTICAL; 4]),
            saturated: self.saturated,
        }
    }

    /// Advances the estimate by one controller period.
    ///
    /// `rotor_speeds` are the measured speeds (ESC telemetry) and
    /// `tilt_cmds` the commanded servo angles for the elapsed period. The
    /// integrals advance by the exact discretization of the equivalent
    /// first-order filter (zero-order-held drive, linearly interpolated
    /// angular momentum), so the discrete response sits on the analytic
    /// filter at any rate.
    pub fn update(
        &mut self,
        imu: &ImuSample,
        rotor_speeds: &[f64; 4],
        tilt_cmds: &[f64; 4],
        dt: f64,
        model: &AllocationModel,
        params: &VehicleParams,
    ) -> WrenchEstimate {
        // Servo angles advance through the identified first-order model.
        let alpha = if self.cfg.servo_compensation {
            let mut a = self.alpha_hat.unwrap_or(*tilt_cmds);
            for i in 0..4 {
                a[i] = reconstruct_servo_angle(a[i], tilt_cmds[i], dt, self.servo_tau);
            }
            a
        } else {
            *tilt_cmds
        };
        self.alpha_hat = Some(alpha);

        // Applied wrench from measured rotor speeds and reconstructed angles.
        let applied = forward_wrench(
            model,
            &ActuatorState {
                rotor_speeds: *rotor_speeds,
                tilt_angles: alpha,
                tilt_cmds: *tilt_cmds,
            },
            params,
        );

        // Force channel: I' = (m·a − F − F̂), F̂ = K_f·I reduces to the
        // filter F̂' = K_f(u − F̂) with u = m·a − F; stepped exactly under a
        // zero-order-held drive.
        let drive = self.mass * imu.accel - applied.force;
        for i in 0..3 {
            let k = self.cfg.k_f[i];
            let decay = (-k * dt).exp();
            self.f_hat[i] = drive[i] + (self.f_hat[i] - drive[i]) * decay;
            self.integral_f[i] = self.f_hat[i] / k;
        }

        // Torque channel: M̂ = K_m(Jω − I), I' = M + (Jω)×ω + M̂. Exact
        // step of the linear ODE with the drive held and Jω interpolated
        // linearly across the period (keeps a ramping momentum unbiased).
        let momentum = self.inertia * imu.gyro;
        let momentum_prev = self.momentum_prev.unwrap_or(momentum);
        let torque_drive = applied.torque + momentum.cross(&imu.gyro);
        for i in 0..3 {
            let k = self.cfg.k_m[i];
            let decay = (-k * dt).exp();
            let dy = momentum[i] - momentum_prev[i];
            self.integral_m[i] = decay * self.integral_m[i]
                + torque_drive[i] * (1.0 - decay) / k
                + momentum_prev[i] * (1.0 - decay)
                + dy * (1.0 - (1.0 - decay) / (k * dt));
            self.m_hat[i] = k * (momentum[i] - self.integral_m[i]);
        }
        self.momentum_prev = Some(momentum);

        // Numerical guard.
        self.saturated = false;
        for i in 0..3 {
            if self.f_hat[i].abs() > self.force_clamp {
                self.f_hat[i] = self.f_hat[i].signum() * self.force_clamp;
                self.saturated = true;
            }
            if self.m_hat[i].abs() > self.torque_clamp {
                self.m_hat[i] = self.m_hat[i].signum() * self.torque_clamp;
                self.saturated = true;
            }
        }

        self.estimate()
    }
}

/// Exact first-order servo response over one period:
/// α̂ ← α_cmd + (α̂_prev − α_cmd)·exp(−dt/τ).
pub fn reconstruct_servo_angle(alpha_prev: f64, alpha_cmd: f64, dt: f64, tau: f64) -> f64 {
    alpha_cmd + (alpha_prev - alpha_cmd) * (-dt / tau).exp()
}

/// Recorded step-response experiment for servo identification.
#[derive(Debug, Clone)]
pub struct ServoIdDataset {
    /// (timestamp [s], command [rad], measured angle [rad]).
    samples: Vec<(f64, f64, f64)>,
}

impl ServoIdDataset {
    /// Validates sample count and strictly increasing timestamps.
    pub fn new(samples: Vec<(f64, f64, f64)>) -> Result<Self, Error> {
        if samples.len() < 20 {
            return Err(Error::Identification(format!(
                "need at least 20 samples, got {}",
                samples.len()
            )));
        }
        for w in samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Identification(
                    "timestamps must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, f64, f64)] {
        &self.samples
    }
}

/// Sum of squared residuals of the simulated first-order response against the
/// measurements, with the recorded command held between samples.
fn servo_fit_ssr(data: &ServoIdDataset, tau: f64) -> f64 {
    let s = data.samples();
    let mut alpha = s[0].2;
    let mut ssr = 0.0;
    for i in 1..s.len() {
        let dt = s[i].0 - s[i - 1].0;
        alpha = reconstruct_servo_angle(alpha, s[i - 1].1, dt, tau);
        let r = alpha - s[i].2;
        ssr += r * r;
    }
    ssr
}

/// Least-squares fit of the servo time constant by scalar minimization of the
/// step-response residual over τ ∈ [1 ms, 1 s]. Returns (τ̂, RMS residual).
pub fn identify_servo_tau(data: &ServoIdDataset) -> Result<(f64, f64), Error> {
    let s = data.samples();
    let cmd0 = s[0].1;
    if !s.iter().any(|&(_, c, _)| (c - cmd0).abs() > 1e-9) {
        return Err(Error::Identification(
            "command signal is flat; no excitation to fit against".into(),
        ));
    }

    // Golden-section search in log τ.
    let golden: f64 = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = ((1e-3f64).ln(), (1.0f64).ln());
    let mut x1 = hi - golden * (hi - lo);
    let mut x2 = lo + golden * (hi - lo);
    let mut f1 = servo_fit_ssr(data, x1.exp());
    let mut f2 = servo_fit_ssr(data, x2.exp());
    for _ in 0..100 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - golden * (hi - lo);
            f1 = servo_fit_ssr(data, x1.exp());
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + golden * (hi - lo);
            f2 = servo_fit_ssr(data, x2.exp());
        }
    }
    let tau = (0.5 * (lo + hi)).exp();
    let rms = (servo_fit_ssr(data, tau) / s.len() as f64).sqrt();
    Ok((tau, rms))
}
