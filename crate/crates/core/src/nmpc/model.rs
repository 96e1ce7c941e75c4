//! Prediction model for the wrench-rate NMPC.
//!
//! The optimizer state is x = [F, M, p, v, q, ω] ∈ R¹⁹ with input
//! u = [Ḟ, Ṁ] ∈ R⁶: the commanded wrench is part of the state and the
//! input is its rate. Perturbations live in an 18-dimensional tangent space
//! with the quaternion represented by a body-frame rotation-vector increment
//! (right multiplication), which keeps unit norm out of the constraint set.

use nalgebra::{Matrix3, SMatrix, SVector};

use crate::contact::{constrained_accels, ContactGains};
use crate::math::{quat_exp, quat_log, renormalize, Vec3};
use crate::sim::dynamics_derivative_cached;
use crate::types::{RigidBodyState, Wrench};
use crate::vehicle::VehicleParams;

/// Input dimension.
pub const NU: usize = 6;
/// Tangent-space state dimension.
pub const NTAN: usize = 18;

/// Finite-difference step for the tangent-space Jacobians.
const FD_STEP: f64 = 1e-5;

/// Full optimizer state: commanded wrench plus rigid-body state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcpState {
    pub wrench: Wrench,
    pub body: RigidBodyState,
}

impl OcpState {
    pub fn new(wrench: Wrench, body: RigidBodyState) -> Self {
        Self { wrench, body }
    }

    /// Retraction x ⊞ ξ: additive on the Euclidean blocks, right-multiplied
    /// quaternion exponential on the attitude.
    pub fn retract(&self, xi: &SVector<f64, NTAN>) -> Self {
        let d = |i: usize| Vec3::new(xi[i], xi[i + 1], xi[i + 2]);
        let mut q = self.body.q * quat_exp(&d(12));
        renormalize(&mut q).expect("retraction keeps unit norm");
        Self {
            wrench: Wrench::new(self.wrench.force + d(0), self.wrench.torque + d(3)),
            body: RigidBodyState {
                p: self.body.p + d(6),
                v: self.body.v + d(9),
                q,
                omega: self.body.omega + d(15),
            },
        }
    }

    /// Local difference: returns ξ with self ⊞ ξ = other.
    pub fn diff(&self, other: &Self) -> SVector<f64, NTAN> {
        let mut xi = SVector::<f64, NTAN>::zeros();
        let set = |xi: &mut SVector<f64, NTAN>, i: usize, v: Vec3| {
            xi[i] = v.x;
            xi[i + 1] = v.y;
            xi[i + 2] = v.z;
        };
        set(&mut xi, 0, other.wrench.force - self.wrench.force);
        set(&mut xi, 3, other.wrench.torque - self.wrench.torque);
        set(&mut xi, 6, other.body.p - self.body.p);
        set(&mut xi, 9, other.body.v - self.body.v);
        set(&mut xi, 12, quat_log(&(self.body.q.conjugate() * other.body.q)));
        set(&mut xi, 15, other.body.omega - self.body.omega);
        xi
    }

    pub fn is_finite(&self) -> bool {
        self.wrench.is_finite() && self.body.check_finite().is_ok()
    }
}

/// Per-stage integration context.
#[derive(Debug, Clone, Copy)]
pub struct StageModel<'a> {
    pub dt: f64,
    /// Contact-gated stage: constrained channels follow the Baumgarte
    /// feedback of the plant's contact law instead of the force balance.
    pub contact: bool,
    /// Estimated external wrench, held constant over the stage.
    pub w_ext: Wrench,
    pub gains: ContactGains,
    pub params: &'a VehicleParams,
    pub inertia_inv: &'a Matrix3<f64>,
}

impl StageModel<'_> {
    /// Continuous-time derivative of the 19-dimensional state.
    fn derivative(&self, x: &OcpState, u: &SVector<f64, NU>) -> Deriv {
        let d = dynamics_derivative_cached(
            &x.body,
            &x.wrench,
            &self.w_ext,
            self.params.mass,
            &self.params.inertia,
            self.inertia_inv,
        );
        let (dv, domega) = if self.contact {
            let sol = constrained_accels(
                &x.body,
                &d.dv,
                &d.domega,
                self.params.mass,
                self.inertia_inv,
                self.params.wheel_radius,
                &self.gains,
            );
            (sol.accel, sol.ang_accel)
        } else {
            (d.dv, d.domega)
        };
        Deriv {
            dforce: Vec3::new(u[0], u[1], u[2]),
            dtorque: Vec3::new(u[3], u[4], u[5]),
            dp: d.dp,
            dv,
            dq: d.dq,
            domega,
        }
    }

    /// Stage integration: classical 4th-order steps, quaternion renormalized.
    /// Contact-gated stages substep so the stiff constraint feedback
    /// (eigenvalues near −k_d) stays inside the integrator's stability
    /// region at the 0.1 s stage length.
    pub fn integrate(&self, x: &OcpState, u: &SVector<f64, NU>) -> OcpState {
        let substeps = if self.contact { 4 } else { 1 };
        let mut state = *x;
        for _ in 0..substeps {
            state = self.rk4(&state, u, self.dt / substeps as f64);
        }
        state
    }

    fn rk4(&self, x: &OcpState, u: &SVector<f64, NU>, dt: f64) -> OcpState {
        let f = |s: &OcpState| self.derivative(s, u);
        let advance = |s: &OcpState, d: &Deriv, h: f64| OcpState {
            wrench: Wrench::new(s.wrench.force + d.dforce * h, s.wrench.torque + d.dtorque * h),
            body: RigidBodyState {
                p: s.body.p + d.dp * h,
                v: s.body.v + d.dv * h,
                q: s.body.q + d.dq * h,
                omega: s.body.omega + d.domega * h,
            },
        };
        let k1 = f(x);
        let k2 = f(&advance(x, &k1, 0.5 * dt));
        let k3 = f(&advance(x, &k2, 0.5 * dt));
        let k4 = f(&advance(x, &k3, dt));
        let mut next = OcpState {
            wrench: Wrench::new(
                x.wrench.force + (k1.dforce + 2.0 * k2.dforce + 2.0 * k3.dforce + k4.dforce) * (dt / 6.0),
                x.wrench.torque
                    + (k1.dtorque + 2.0 * k2.dtorque + 2.0 * k3.dtorque + k4.dtorque) * (dt / 6.0),
            ),
            body: RigidBodyState {
                p: x.body.p + (k1.dp + 2.0 * k2.dp + 2.0 * k3.dp + k4.dp) * (dt / 6.0),
                v: x.body.v + (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv) * (dt / 6.0),
                q: x.body.q + (k1.dq + 2.0 * k2.dq + 2.0 * k3.dq + k4.dq) * (dt / 6.0),
                omega: x.body.omega
                    + (k1.domega + 2.0 * k2.domega + 2.0 * k3.domega + k4.domega) * (dt / 6.0),
            },
        };
        renormalize(&mut next.body.q).expect("stage integration keeps q valid");
        next
    }

    /// Tangent-space Jacobians of the discrete map by central differences:
    /// A = ∂(f(x ⊞ ξ, u) ⊟ f(x, u))/∂ξ, B likewise over u. `base_next`
    /// anchors the output tangent space (usually f(x, u)).
    pub fn jacobians(
        &self,
        x: &OcpState,
        u: &SVector<f64, NU>,
        base_next: &OcpState,
    ) -> (SMatrix<f64, NTAN, NTAN>, SMatrix<f64, NTAN, NU>) {
        let mut a = SMatrix::<f64, NTAN, NTAN>::zeros();
        let mut b = SMatrix::<f64, NTAN, NU>::zeros();
        let h = FD_STEP;
        for i in 0..NTAN {
            let mut e = SVector::<f64, NTAN>::zeros();
            e[i] = h;
            let fp = self.integrate(&x.retract(&e), u);
            e[i] = -h;
            let fm = self.integrate(&x.retract(&e), u);
            let col = (base_next.diff(&fp) - base_next.diff(&fm)) / (2.0 * h);
            a.set_column(i, &col);
        }
        for i in 0..NU {
            let mut up = *u;
            up[i] += h;
            let fp = self.integrate(x, &up);
            up[i] = u[i] - h;
            let fm = self.integrate(x, &up);
            let col = (base_next.diff(&fp) - base_next.diff(&fm)) / (2.0 * h);
            b.set_column(i, &col);
        }
        (a, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Deriv {
    dforce: Vec3,
    dtorque: Vec3,
    dp: Vec3,
    dv: Vec3,
    dq: crate::math::Quat,
    domega: Vec3,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::quat_from_yaw;
    use crate::vehicle::GRAVITY;
    use approx::assert_relative_eq;

    fn hover_state(params: &VehicleParams) -> OcpState {
        OcpState::new(
            Wrench::new(Vec3::new(0.0, 0.0, params.mass * GRAVITY), Vec3::zeros()),
            RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 1.0)),
        )
    }

    #[test]
    fn retract_diff_roundtrip() {
        let params = VehicleParams::default();
        let mut x = hover_state(&params);
        x.body.q = quat_from_yaw(0.7);
        let xi = SVector::<f64, NTAN>::from_fn(|i, _| 0.01 * (i as f64 + 1.0));
        let y = x.retract(&xi);
        let back = x.diff(&y);
        assert_relative_eq!(back, xi, epsilon = 1e-10);
    }

    #[test]
    fn hover_is_a_fixed_point_of_integration() {
        let params = VehicleParams::default();
        let inertia_inv = params.inertia_inv();
        let model = StageModel {
            dt: 0.1,
            contact: false,
            w_ext: Wrench::zero(),
            gains: ContactGains::default(),
            params: &params,
            inertia_inv: &inertia_inv,
        };
        let x = hover_state(&params);
        let next = model.integrate(&x, &SVector::zeros());
        assert!(x.diff(&next).norm() < 1e-12);
    }

    #[test]
    fn wrench_rate_integrates_linearly() {
        let params = VehicleParams::default();
        let inertia_inv = params.inertia_inv();
        let model = StageModel {
            dt: 0.1,
            contact: false,
            w_ext: Wrench::zero(),
            gains: ContactGains::default(),
            params: &params,
            inertia_inv: &inertia_inv,
        };
        let x = hover_state(&params);
        let mut u = SVector::<f64, NU>::zeros();
        u[2] = 2.0; // Ḟ_z at its bound
        let next = model.integrate(&x, &u);
        assert_relative_eq!(next.wrench.force.z, x.wrench.force.z + 0.2, epsilon = 1e-9);
    }

    #[test]
    fn contact_stage_ignores_vertical_thrust() {
        // Under contact the vertical channel follows the constraint feedback,
        // so F_z cannot push the model off the ground.
        let params = VehicleParams::default();
        let inertia_inv = params.inertia_inv();
        let model = StageModel {
            dt: 0.1,
            contact: true,
            w_ext: Wrench::zero(),
            gains: ContactGains::default(),
            params: &params,
            inertia_inv: &inertia_inv,
        };
        let x = OcpState::new(
            Wrench::new(Vec3::new(0.0, 0.0, 5.0), Vec3::zeros()),
            RigidBodyState::at_rest(Vec3::new(0.0, 0.0, params.wheel_radius)),
        );
        let next = model.integrate(&x, &SVector::zeros());
        assert!((next.body.p.z - params.wheel_radius).abs() < 1e-9);
        assert!(next.body.v.z.abs() < 1e-9);
    }

    #[test]
    fn jacobians_predict_small_perturbations() {
        let params = VehicleParams::default();
        let inertia_inv = params.inertia_inv();
        let model = StageModel {
            dt: 0.1,
            contact: false,
            w_ext: Wrench::new(Vec3::new(0.2, 0.0, 0.1), Vec3::new(0.0, 0.01, 0.0)),
            gains: ContactGains::default(),
            params: &params,
            inertia_inv: &inertia_inv,
        };
        let mut x = hover_state(&params);
        x.body.q = quat_from_yaw(0.4);
        x.body.v = Vec3::new(0.5, -0.2, 0.1);
        x.body.omega = Vec3::new(0.05, 0.1, -0.2);
        let u = SVector::<f64, NU>::from_fn(|i, _| 0.3 * (i as f64 - 2.5));
        let base = model.integrate(&x, &u);
        let (a, b) = model.jacobians(&x, &u, &base);

        let xi = SVector::<f64, NTAN>::from_fn(|i, _| 2e-4 * ((i % 5) as f64 - 2.0));
        let du = SVector::<f64, NU>::from_fn(|i, _| 2e-4 * (i as f64 - 3.0));
        let pred = a * xi + b * du;
        let actual = base.diff(&model.integrate(&x.retract(&xi), &(u + du)));
        assert!(
            (pred - actual).norm() < 2e-7,
            "linearization error {}",
            (pred - actual).norm()
        );
    }
}
