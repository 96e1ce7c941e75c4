//! Wrench-rate nonlinear model predictive control with contact-switched
//! non-holonomic constraints.
//!
//! The finite-horizon problem tracks a reference trajectory with the
//! commanded wrench as part of the state and its rate as the input:
//!
//!   min Σ x̃ᵀQ x̃ + uᵀR u + x̃_NᵀQ_N x̃_N
//!   s.t. x₀ = x_est, x_{k+1} = f(x_k, u_k),
//!        u ∈ [−u_max, u_max], W ∈ [W_min, W_max], |ω| ≤ ω_max,
//!        δ_k = 1 ⇒ v_{B,y} = 0, ω_x = 0, p_z = r.
//!
//! The wrench blocks of x̃ are penalized absolutely (no reference), which is
//! what lets the optimizer shed thrust onto the wheels in ground mode. The
//! solver is Gauss–Newton SQP over a condensed horizon: tangent-space
//! linearization (18-dimensional state increments, 3-parameter attitude),
//! a dense convex QP per iteration, ℓ1-merit backtracking, and shift-free
//! warm starting. A real-time-iteration mode runs exactly one iteration.

pub mod model;
pub mod qp;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::contact::ContactGains;
use crate::error::Error;
use crate::math::{quat_error, rotate_inv};
use crate::trajectory::ReferencePoint;
use crate::types::{RigidBodyState, Wrench};
use crate::vehicle::VehicleParams;

pub use model::{OcpState, StageModel, NTAN, NU};
use qp::{solve_dense_qp, DenseQp, QpStatus};

/// NMPC weights, bounds and solver switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmpcConfig {
    /// Horizon length N (stages).
    pub horizon: usize,
    /// Stage duration Δt [s].
    pub stage_dt: f64,
    /// Stage cost diagonal over the 18-dim error
    /// [F(3), M(3), p(3), v(3), q̃(3), ω(3)].
    pub q_weights: [f64; 18],
    /// Terminal cost diagonal.
    pub qn_weights: [f64; 18],
    /// Input cost diagonal over [Ḟ(3), Ṁ(3)].
    pub r_weights: [f64; 6],
    /// Wrench-rate bounds (Ḟ_max, Ṁ_max) [N/s, N·m/s].
    pub u_max: [f64; 6],
    /// Wrench lower bounds [N, N·m].
    pub w_min: [f64; 6],
    /// Wrench upper bounds [N, N·m].
    pub w_max: [f64; 6],
    /// Angular-velocity bounds [rad/s].
    pub omega_max: [f64; 3],
    /// Height window for the contact indicator [m].
    pub contact_tol: f64,
    /// SQP iteration cap (1 in RTI mode).
    pub max_iter: usize,
    /// Convergence threshold on the KKT residual proxy.
    pub kkt_tol: f64,
    /// Real-time-iteration mode: single full-step iteration per solve.
    pub rti: bool,
    /// Baumgarte gains of the in-model contact dynamics (matches the plant).
    pub contact_gains: ContactGains,
    /// Servo-rate capability used by feasibility checks [rad/s].
    pub servo_rate_limit: f64,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            stage_dt: 0.1,
            q_weights: [
                0.05, 0.05, 0.05, // F
                0.1, 0.1, 0.1, // M
                80.0, 80.0, 120.0, // p
                10.0, 10.0, 10.0, // v
                60.0, 60.0, 60.0, // q̃
                5.0, 5.0, 5.0, // ω
            ],
            qn_weights: [
                0.05, 0.05, 0.05, //
                0.1, 0.1, 0.1, //
                800.0, 800.0, 1200.0, //
                100.0, 100.0, 100.0, //
                600.0, 600.0, 600.0, //
                50.0, 50.0, 50.0,
            ],
            r_weights: [2.0; 6],
            u_max: [2.0, 2.0, 2.0, 2.0, 2.0, 2.0],
            w_min: [-0.2, -0.2, 0.0, -20.0, -20.0, -20.0],
            w_max: [0.2, 0.2, 20.0, 20.0, 20.0, 20.0],
            omega_max: [2.0, 2.0, 1.5],
            contact_tol: 0.02,
            max_iter: 30,
            kkt_tol: 1e-6,
            rti: false,
            contact_gains: ContactGains::default(),
            servo_rate_limit: 8.0,
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.horizon < 2 {
            return Err(Error::Config("horizon must be at least 2 stages".into()));
        }
        if !(self.stage_dt > 0.0) {
            return Err(Error::Config("stage_dt must be > 0".into()));
        }
        if self.q_weights.iter().chain(self.qn_weights.iter()).any(|&w| w < 0.0) {
            return Err(Error::Config("state weights must be >= 0".into()));
        }
        if self.r_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("input weights must be > 0".into()));
        }
        if self.u_max.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config("u_max must be > 0".into()));
        }
        for i in 0..6 {
            if self.w_min[i] > self.w_max[i] {
                return Err(Error::Config(format!(
                    "w_min[{i}] {} exceeds w_max[{i}] {}",
                    self.w_min[i], self.w_max[i]
                )));
            }
        }
        if self.omega_max.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config("omega_max must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Contact indicator δ: active iff both the reference height and the vehicle
/// height sit at the wheel radius (within `tol`).
pub fn contact_indicator(p_rz: f64, p_z: f64, wheel_radius: f64, tol: f64) -> bool {
    (p_rz - wheel_radius).abs() <= tol && (p_z - wheel_radius).abs() <= tol
}

/// 18-dimensional tracking error
/// [F; M; p − p_r; v − v_r; vec(q ⊗ q_r⁻¹); ω − ω_r].
///
/// The wrench blocks carry no reference: they are penalized absolutely.
pub fn stage_error(x: &OcpState, r: &ReferencePoint) -> SVector<f64, NTAN> {
    let mut e = SVector::<f64, NTAN>::zeros();
    let set = |e: &mut SVector<f64, NTAN>, i: usize, v: crate::math::Vec3| {
        e[i] = v.x;
        e[i + 1] = v.y;
        e[i + 2] = v.z;
    };
    set(&mut e, 0, x.wrench.force);
    set(&mut e, 3, x.wrench.torque);
    set(&mut e, 6, x.body.p - r.p);
    set(&mut e, 9, x.body.v - r.v);
    let qe = quat_error(&x.body.q, &r.q).expect("unit quaternions in stage error");
    set(&mut e, 12, qe.imag());
    set(&mut e, 15, x.body.omega - r.omega);
    e
}

/// Non-holonomic constraint residuals c(x) = [v_{B,y}, ω_x, p_z − r].
fn contact_residual(x: &OcpState, wheel_radius: f64) -> SVector<f64, 3> {
    let v_body = rotate_inv(&x.body.q, &x.body.v);
    SVector::<f64, 3>::new(v_body.y, x.body.omega.x, x.body.p.z - wheel_radius)
}

/// The assembled horizon problem.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub x_est: OcpState,
    pub refs: Vec<ReferencePoint>,
    /// Per-stage contact indicator δ_k, length N+1. Stage 0 gates on the
    /// measured height as well; later stages gate on the reference alone
    /// (predicted heights are decision variables).
    pub delta: Vec<bool>,
    /// External wrench estimate, held constant across the horizon.
    pub w_ext: Wrench,
    pub cfg: NmpcConfig,
    pub params: VehicleParams,
    /// ‖c(x_est)‖∞ when stage 0 is contact-gated (those equalities contain
    /// no decision variables; a violation is reported, not optimized).
    pub stage0_violation: f64,
}

impl OcpProblem {
    /// Number of non-holonomic equality rows carried by the problem
    /// (3 per δ-active stage k ≥ 1).
    pub fn contact_equality_rows(&self) -> usize {
        3 * self.delta[1..].iter().filter(|&&d| d).count()
    }
}

/// Builds the horizon problem from the current estimate and references.
pub fn build_ocp(
    x_est: &OcpState,
    refs: &[ReferencePoint],
    cfg: &NmpcConfig,
    params: &VehicleParams,
    w_ext: &Wrench,
) -> Result<OcpProblem, Error> {
    cfg.validate()?;
    let n = cfg.horizon;
    if refs.len() != n + 1 {
        return Err(Error::InvalidArgument(format!(
            "reference horizon holds {} points, need N+1 = {}",
            refs.len(),
            n + 1
        )));
    }
    if !x_est.is_finite() || !w_ext.is_finite() {
        return Err(Error::NonFinite("NMPC problem data".into()));
    }
    let r = params.wheel_radius;
    let mut delta = Vec::with_capacity(n + 1);
    delta.push(contact_indicator(refs[0].p.z, x_est.body.p.z, r, cfg.contact_tol));
    for point in refs.iter().skip(1) {
        delta.push((point.p.z - r).abs() <= cfg.contact_tol);
    }
    let stage0_violation = if delta[0] {
        contact_residual(x_est, r).abs().max()
    } else {
        0.0
    };
    Ok(OcpProblem {
        x_est: *x_est,
        refs: refs.to_vec(),
        delta,
        w_ext: *w_ext,
        cfg: *cfg,
        params: params.clone(),
        stage0_violation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    /// Stage-0 contact equalities violated by the measured state (reported,
    /// not optimizable) or equality rows relaxed to an ℓ1 penalty.
    InfeasibleRelaxed,
}

/// Horizon solution; also the warm-start carrier.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub states: Vec<OcpState>,
    pub inputs: Vec<SVector<f64, NU>>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

/// ℓ1 merit weight on dynamics defects and active contact residuals.
const MERIT_RHO: f64 = 1e4;
/// ℓ1 penalty weight when equality rows must be relaxed.
const RELAX_WEIGHT: f64 = 1e4;

/// Gauss–Newton SQP over the condensed horizon.
pub fn solve(problem: &OcpProblem, warm: Option<&OcpSolution>) -> Result<OcpSolution, Error> {
    let cfg = &problem.cfg;
    let params = &problem.params;
    let n = cfg.horizon;
    let n_var = NU * n;
    let inertia_inv = params.inertia_inv();

    let stage_model = |k: usize| StageModel {
        dt: cfg.stage_dt,
        contact: problem.delta[k],
        w_ext: problem.w_ext,
        gains: cfg.contact_gains,
        params,
        inertia_inv: &inertia_inv,
    };

    // Initial trajectory: warm start (with the fresh estimate at stage 0) or
    // a zero-input rollout.
    let mut inputs: Vec<SVector<f64, NU>>;
    let mut states: Vec<OcpState>;
    match warm {
        Some(w) if w.inputs.len() == n && w.states.len() == n + 1 => {
            inputs = w.inputs.clone();
            states = w.states.clone();
            states[0] = problem.x_est;
        }
        _ => {
            inputs = vec![SVector::zeros(); n];
            states = Vec::with_capacity(n + 1);
            states.push(problem.x_est);
            for k in 0..n {
                let next = stage_model(k).integrate(&states[k], &inputs[k]);
                states.push(next);
            }
        }
    }

    let relaxed_start = problem.stage0_violation > 1e-6;
    let mut relaxed_rows = false;
    let mut kkt_residual = f64::INFINITY;
    let mut iterations = 0;
    let max_iter = if cfg.rti { 1 } else { cfg.max_iter };
    let mut converged = false;

    // Contact-entry stages: equality rows kept hard in the QP. Rows at
    // interior contact stages are implied by the contact-mode dynamics
    // (their input gradient vanishes) and are enforced by integration.
    let entry_stages: Vec<usize> = (1..=n)
        .filter(|&k| problem.delta[k] && !problem.delta[k - 1])
        .collect();

    while iterations < max_iter {
        iterations += 1;
        let t_lin = Instant::now();

        // Linearize dynamics and errors around the current trajectory.
        let mut a_mats: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        let mut b_mats: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        let mut defects = Vec::with_capacity(n);
        for k in 0..n {
            let m = stage_model(k);
            let pred = m.integrate(&states[k], &inputs[k]);
            let (a, b) = m.jacobians(&states[k], &inputs[k], &states[k + 1]);
            let d = states[k + 1].diff(&pred);
            defects.push(DVector::from_column_slice(d.as_slice()));
            a_mats.push(to_dyn(a.as_slice(), NTAN, NTAN));
            b_mats.push(to_dyn(b.as_slice(), NTAN, NU));
        }

        // Prediction matrices: δx_k = M_k d + m_k with d the stacked δu.
        let mut pred_mat = vec![DMatrix::<f64>::zeros(NTAN, n_var)];
        let mut pred_off = vec![DVector::<f64>::zeros(NTAN)];
        for k in 0..n {
            let mut mk = &a_mats[k] * &pred_mat[k];
            mk.view_mut((0, NU * k), (NTAN, NU)).copy_from(&b_mats[k]);
            pred_mat.push(mk);
            pred_off.push(&a_mats[k] * &pred_off[k] + &defects[k]);
        }

        // Gauss–Newton cost: H, g over the stacked input increments. The
        // error Jacobian is identity outside the 3×3 attitude block, so EM
        // reuses the prediction matrix with three rows recombined.
        let mut h = DMatrix::<f64>::zeros(n_var, n_var);
        let mut g = DVector::<f64>::zeros(n_var);
        let mut em = DMatrix::<f64>::zeros(NTAN, n_var);
        let mut weighted = DMatrix::<f64>::zeros(NTAN, n_var);
        for k in 1..=n {
            let weights = if k == n { &cfg.qn_weights } else { &cfg.q_weights };
            let qblock = attitude_error_block(&states[k], &problem.refs[k]);
            em.copy_from(&pred_mat[k]);
            let att_rows = pred_mat[k].rows(12, 3);
            em.rows_mut(12, 3).copy_from(&(&qblock * &att_rows));
            let e_k = stage_error(&states[k], &problem.refs[k]);
            let mut resid = DVector::from_column_slice(e_k.as_slice());
            resid += &pred_off[k];
            // attitude rows of E·m need the block product; redo those three.
            let att_off = qblock * pred_off[k].rows(12, 3);
            for i in 0..3 {
                resid[12 + i] = e_k[12 + i] + att_off[i];
            }
            weighted.copy_from(&em);
            for (i, &w) in weights.iter().enumerate() {
                weighted.row_mut(i).scale_mut(w);
            }
            h.gemm_tr(2.0, &em, &weighted, 1.0);
            let mut wres = resid;
            for (i, &w) in weights.iter().enumerate() {
                wres[i] *= w;
            }
            g.gemv_tr(2.0, &em, &wres, 1.0);
        }
        for k in 0..n {
            for i in 0..NU {
                let idx = NU * k + i;
                h[(idx, idx)] += 2.0 * cfg.r_weights[i];
                g[idx] += 2.0 * cfg.r_weights[i] * inputs[k][i];
            }
        }

        if std::env::var_os("TILTWHEEL_TIMING").is_some() {
            eprintln!("linearize+condense: {:.2} ms", t_lin.elapsed().as_secs_f64()*1e3);
        }
        // Inequalities: input box rows plus screened state-bound rows.
        let mut in_rows: Vec<DVector<f64>> = Vec::new();
        let mut in_rhs: Vec<f64> = Vec::new();
        for k in 0..n {
            for i in 0..NU {
                let idx = NU * k + i;
                let mut row = DVector::zeros(n_var);
                row[idx] = 1.0;
                in_rows.push(row.clone());
                in_rhs.push(cfg.u_max[i] - inputs[k][i]);
                row[idx] = -1.0;
                in_rows.push(row);
                in_rhs.push(cfg.u_max[i] + inputs[k][i]);
            }
        }
        // A bound row can only activate within the input box; rows with more
        // slack than the box allows are dropped to keep the QP small.
        let du_span = 2.0 * cfg.u_max.iter().cloned().fold(0.0, f64::max);
        let push_state_row =
            |row: DVector<f64>, rhs: f64, rows: &mut Vec<DVector<f64>>, rhss: &mut Vec<f64>| {
                // |row·d| ≤ ‖row‖₁·‖d‖∞ bounds what the step can reach.
                if rhs <= row.lp_norm(1) * du_span {
                    rows.push(row);
                    rhss.push(rhs);
                }
            };
        for k in 1..=n {
            let wk = states[k].wrench.as_vector6();
            for i in 0..6 {
                let coeff = pred_mat[k].row(i);
                let off = pred_off[k][i];
                let upper = cfg.w_max[i] - wk[i] - off;
                let lower = wk[i] + off - cfg.w_min[i];
                push_state_row(coeff.transpose(), upper, &mut in_rows, &mut in_rhs);
                push_state_row(-coeff.transpose(), lower, &mut in_rows, &mut in_rhs);
            }
            for i in 0..3 {
                let coeff = pred_mat[k].row(15 + i);
                let off = pred_off[k][15 + i];
                let omega_ki = states[k].body.omega[i];
                let upper = cfg.omega_max[i] - omega_ki - off;
                let lower = omega_ki + off + cfg.omega_max[i];
                push_state_row(coeff.transpose(), upper, &mut in_rows, &mut in_rhs);
                push_state_row(-coeff.transpose(), lower, &mut in_rows, &mut in_rhs);
            }
        }

        // Hard non-holonomic equalities at contact-entry stages.
        let mut eq_rows: Vec<DVector<f64>> = Vec::new();
        let mut eq_rhs: Vec<f64> = Vec::new();
        for &k in &entry_stages {
            let c = contact_residual(&states[k], params.wheel_radius);
            let cjac = to_dyn(contact_jacobian(&states[k], params.wheel_radius).as_slice(), 3, NTAN);
            let cm = &cjac * &pred_mat[k];
            let c_off = DVector::from_column_slice(c.as_slice()) + &cjac * &pred_off[k];
            for i in 0..3 {
                eq_rows.push(cm.row(i).transpose());
                eq_rhs.push(-c_off[i]);
            }
        }

        let t_qp = Instant::now();
        let qp = assemble_qp(h, g, &eq_rows, &eq_rhs, &in_rows, &in_rhs, n_var);
        let mut sol = solve_dense_qp(&qp)?;
        if std::env::var_os("TILTWHEEL_TIMING").is_some() {
            eprintln!("qp: {} rows_in, {} rows_eq, {:.2} ms", in_rhs.len(), eq_rhs.len(), t_qp.elapsed().as_secs_f64()*1e3);
        }
        if sol.status == QpStatus::Infeasible && !eq_rows.is_empty() {
            // Contact-entry equalities unreachable within the rate bounds:
            // retry with the rows as an ℓ1 penalty.
            relaxed_rows = true;
            let qp = assemble_relaxed_qp(&qp, n_var);
            sol = solve_dense_qp(&qp)?;
        }
        if sol.status == QpStatus::Infeasible {
            return Err(Error::QpFailure(
                "QP infeasible with box constraints only".into(),
            ));
        }
        let d = DVector::from_iterator(n_var, sol.x.iter().cloned().take(n_var));

        // KKT proxy: Newton-step size plus current feasibility residuals.
        let defect_inf = defects.iter().map(|d| d.amax()).fold(0.0, f64::max);
        let entry_inf = entry_stages
            .iter()
            .map(|&k| contact_residual(&states[k], params.wheel_radius).abs().max())
            .fold(0.0, f64::max);
        kkt_residual = d.amax().max(defect_inf).max(entry_inf);
        if kkt_residual <= cfg.kkt_tol {
            converged = true;
            break;
        }

        // Candidate full step.
        let step = |alpha: f64| -> (Vec<OcpState>, Vec<SVector<f64, NU>>) {
            let mut new_states = Vec::with_capacity(n + 1);
            new_states.push(problem.x_est);
            for k in 1..=n {
                let dx = (&pred_mat[k] * &d + &pred_off[k]) * alpha;
                let dx = SVector::<f64, NTAN>::from_iterator(dx.iter().cloned());
                new_states.push(states[k].retract(&dx));
            }
            let mut new_inputs = Vec::with_capacity(n);
            for k in 0..n {
                let mut u = inputs[k];
                for i in 0..NU {
                    u[i] += alpha * d[NU * k + i];
                }
                new_inputs.push(u);
            }
            (new_states, new_inputs)
        };

        if cfg.rti {
            let (s, u) = step(1.0);
            states = s;
            inputs = u;
            break;
        }

        // ℓ1-merit backtracking line search.
        let merit_now = merit(problem, &states, &inputs, &entry_stages, &stage_model);
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..9 {
            let (s, u) = step(alpha);
            let m = merit(problem, &s, &u, &entry_stages, &stage_model);
            if m <= merit_now - 1e-10 * alpha * d.norm_squared() {
                states = s;
                inputs = u;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let status = if relaxed_start || relaxed_rows {
        SolveStatus::InfeasibleRelaxed
    } else if converged {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIter
    };
    Ok(OcpSolution {
        states,
        inputs,
        kkt_residual,
        iterations,
        status,
    })
}

/// Column-major slice into a dynamically sized matrix.
fn to_dyn(data: &[f64], nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(nrows, ncols, data)
}

/// 3×3 Jacobian of the quaternion-error vector part w.r.t. the attitude
/// increment (central FD). All other error blocks are exactly identity.
fn attitude_error_block(x: &OcpState, r: &ReferencePoint) -> SMatrix<f64, 3, 3> {
    let mut jac = SMatrix::<f64, 3, 3>::zeros();
    let h = 1e-6;
    for i in 0..3 {
        let mut e = SVector::<f64, NTAN>::zeros();
        e[12 + i] = h;
        let ep = stage_error(&x.retract(&e), r);
        e[12 + i] = -h;
        let em = stage_error(&x.retract(&e), r);
        let col = (ep.fixed_rows::<3>(12) - em.fixed_rows::<3>(12)) / (2.0 * h);
        jac.set_column(i, &col);
    }
    jac
}

/// Jacobian of the contact residual w.r.t. tangent increments.
fn contact_jacobian(x: &OcpState, wheel_radius: f64) -> SMatrix<f64, 3, NTAN> {
    let mut jac = SMatrix::<f64, 3, NTAN>::zeros();
    let h = 1e-6;
    for i in 0..NTAN {
        let mut e = SVector::<f64, NTAN>::zeros();
        e[i] = h;
        let cp = contact_residual(&x.retract(&e), wheel_radius);
        e[i] = -h;
        let cm = contact_residual(&x.retract(&e), wheel_radius);
        jac.set_column(i, &((cp - cm) / (2.0 * h)));
    }
    jac
}

fn assemble_qp(
    h: DMatrix<f64>,
    g: DVector<f64>,
    eq_rows: &[DVector<f64>],
    eq_rhs: &[f64],
    in_rows: &[DVector<f64>],
    in_rhs: &[f64],
    n_var: usize,
) -> DenseQp {
    let stack = |rows: &[DVector<f64>]| {
        let mut m = DMatrix::zeros(rows.len(), n_var);
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from(&r.transpose());
        }
        m
    };
    DenseQp {
        h,
        g,
        a_eq: stack(eq_rows),
        b_eq: DVector::from_vec(eq_rhs.to_vec()),
        a_in: stack(in_rows),
        b_in: DVector::from_vec(in_rhs.to_vec()),
    }
}

/// Rebuilds the QP with equality rows replaced by an ℓ1 penalty through
/// nonnegative slack pairs.
fn assemble_relaxed_qp(qp: &DenseQp, n_var: usize) -> DenseQp {
    let m_eq = qp.b_eq.len();
    let n_aug = n_var + 2 * m_eq;
    let mut h = DMatrix::zeros(n_aug, n_aug);
    h.view_mut((0, 0), (n_var, n_var)).copy_from(&qp.h);
    for i in n_var..n_aug {
        h[(i, i)] = 1e-9; // keep the KKT system well posed
    }
    let mut g = DVector::zeros(n_aug);
    g.rows_mut(0, n_var).copy_from(&qp.g);
    for i in n_var..n_aug {
        g[i] = RELAX_WEIGHT;
    }
    // Equalities become C d + s⁺ − s⁻ = rhs.
    let mut a_eq = DMatrix::zeros(m_eq, n_aug);
    a_eq.view_mut((0, 0), (m_eq, n_var)).copy_from(&qp.a_eq);
    for i in 0..m_eq {
        a_eq[(i, n_var + 2 * i)] = 1.0;
        a_eq[(i, n_var + 2 * i + 1)] = -1.0;
    }
    // Original inequalities plus s ≥ 0.
    let m_in = qp.b_in.len();
    let mut a_in = DMatrix::zeros(m_in + 2 * m_eq, n_aug);
    a_in.view_mut((0, 0), (m_in, n_var)).copy_from(&qp.a_in);
    for i in 0..2 * m_eq {
        a_in[(m_in + i, n_var + i)] = -1.0;
    }
    let mut b_in = DVector::zeros(m_in + 2 * m_eq);
    b_in.rows_mut(0, m_in).copy_from(&qp.b_in);
    DenseQp {
        h,
        g,
        a_eq,
        b_eq: qp.b_eq.clone(),
        a_in,
        b_in,
    }
}

/// ℓ1 merit: tracking cost plus weighted dynamics defects and contact-entry
/// residuals.
fn merit<'a, F>(
    problem: &'a OcpProblem,
    states: &[OcpState],
    inputs: &[SVector<f64, NU>],
    entry_stages: &[usize],
    stage_model: &F,
) -> f64
where
    F: Fn(usize) -> StageModel<'a>,
{
    let cfg = &problem.cfg;
    let n = cfg.horizon;
    let mut cost = 0.0;
    for k in 0..=n {
        let weights = if k == n { &cfg.qn_weights } else { &cfg.q_weights };
        let e = stage_error(&states[k], &problem.refs[k]);
        for i in 0..NTAN {
            cost += weights[i] * e[i] * e[i];
        }
        if k < n {
            for i in 0..NU {
                cost += cfg.r_weights[i] * inputs[k][i] * inputs[k][i];
            }
        }
    }
    let mut infeas = 0.0;
    for k in 0..n {
        let pred = stage_model(k).integrate(&states[k], &inputs[k]);
        infeas += states[k + 1].diff(&pred).abs().sum();
    }
    for &k in entry_stages {
        infeas += contact_residual(&states[k], problem.params.wheel_radius)
            .abs()
            .sum();
    }
    cost + MERIT_RHO * infeas
}

/// Output of one controller tick.
#[derive(Debug, Clone)]
pub struct ControlOutput {
    pub wrench_cmd: Wrench,
    pub solution: OcpSolution,
    pub solve_time: Duration,
}

/// Builds, solves and advances the wrench command by the stage-0 input over
/// one control period: W_cmd = W₀ + u₀·dt_ctrl.
pub fn control_step(
    x_est: &OcpState,
    refs: &[ReferencePoint],
    cfg: &NmpcConfig,
    params: &VehicleParams,
    w_ext: &Wrench,
    warm: Option<&OcpSolution>,
    dt_ctrl: f64,
) -> Result<(Wrench, OcpSolution), Error> {
    let problem = build_ocp(x_est, refs, cfg, params, w_ext)?;
    let solution = solve(&problem, warm)?;
    let u0 = solution.inputs[0];
    let mut w = x_est.wrench.as_vector6();
    for i in 0..6 {
        w[i] = (w[i] + u0[i] * dt_ctrl).clamp(cfg.w_min[i], cfg.w_max[i]);
    }
    Ok((Wrench::from_vector6(&w), solution))
}

/// Stepped controller owning its wrench state and warm-start memory.
#[derive(Debug, Clone)]
pub struct NmpcController {
    pub cfg: NmpcConfig,
    params: VehicleParams,
    wrench: Wrench,
    prev: Option<OcpSolution>,
}

impl NmpcController {
    pub fn new(cfg: NmpcConfig, params: VehicleParams, initial_wrench: Wrench) -> Result<Self, Error> {
        cfg.validate()?;
        params.validate()?;
        Ok(Self {
            cfg,
            params,
            wrench: initial_wrench,
            prev: None,
        })
    }

    /// Current wrench state (last command).
    pub fn wrench_state(&self) -> Wrench {
        self.wrench
    }

    pub fn reset(&mut self, wrench: Wrench) {
        self.wrench = wrench;
        self.prev = None;
    }

    /// One control tick from the measured rigid-body state and the external
    /// wrench estimate.
    pub fn step(
        &mut self,
        body: &RigidBodyState,
        w_ext: &Wrench,
        refs: &[ReferencePoint],
        dt_ctrl: f64,
    ) -> Result<ControlOutput, Error> {
        let x_est = OcpState::new(self.wrench, *body);
        let t0 = Instant::now();
        let (w_cmd, solution) = control_step(
            &x_est,
            refs,
            &self.cfg,
            &self.params,
            w_ext,
            self.prev.as_ref(),
            dt_ctrl,
        )?;
        let solve_time = t0.elapsed();
        self.wrench = w_cmd;
        self.prev = Some(solution.clone());
        Ok(ControlOutput {
            wrench_cmd: w_cmd,
            solution,
            solve_time,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{quat_from_yaw, Vec3};
    use crate::trajectory::ReferencePoint;
    use crate::vehicle::GRAVITY;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn hover_ref(p: Vec3) -> ReferencePoint {
        ReferencePoint {
            p,
            v: Vec3::zeros(),
            q: crate::math::Quat::identity(),
            omega: Vec3::zeros(),
            contact: false,
        }
    }

    fn ground_ref(p_xy: (f64, f64), r: f64) -> ReferencePoint {
        ReferencePoint {
            p: Vec3::new(p_xy.0, p_xy.1, r),
            v: Vec3::zeros(),
            q: crate::math::Quat::identity(),
            omega: Vec3::zeros(),
            contact: true,
        }
    }

    #[test]
    fn indicator_truth_table() {
        let r = 0.15;
        assert!(contact_indicator(r, r, r, 0.02));
        assert!(!contact_indicator(1.0, r, r, 0.02));
        assert!(!contact_indicator(r, r + 0.5, r, 0.02));
    }

    #[test]
    fn stage_error_zero_on_reference() {
        let r = hover_ref(Vec3::new(1.0, 2.0, 3.0));
        let x = OcpState::new(
            Wrench::zero(),
            RigidBodyState::at_rest(Vec3::new(1.0, 2.0, 3.0)),
        );
        assert_eq!(stage_error(&x, &r).norm(), 0.0);
    }

    #[test]
    fn stage_error_penalizes_wrench_absolutely() {
        let r = hover_ref(Vec3::new(0.0, 0.0, 1.0));
        let x = OcpState::new(
            Wrench::new(Vec3::new(0.0, 0.0, 14.715), Vec3::zeros()),
            RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 1.0)),
        );
        let e = stage_error(&x, &r);
        assert_relative_eq!(e[2], 14.715, epsilon = 1e-12);
        assert_eq!(e.rows_range(3..).norm(), 0.0);
    }

    #[test]
    fn stage_error_quaternion_block() {
        let mut r = hover_ref(Vec3::zeros());
        r.q = crate::math::Quat::identity();
        let mut body = RigidBodyState::at_rest(Vec3::zeros());
        body.q = quat_from_yaw(FRAC_PI_2);
        let x = OcpState::new(Wrench::zero(), body);
        let e = stage_error(&x, &r);
        assert_relative_eq!(e[14], (FRAC_PI_2 / 2.0).sin(), epsilon = 1e-12);
        assert_relative_eq!(e[12], 0.0, epsilon = 1e-12);
        assert_relative_eq!(e[13], 0.0, epsilon = 1e-12);
    }

    fn default_setup() -> (NmpcConfig, VehicleParams) {
        (NmpcConfig::default(), VehicleParams::default())
    }

    #[test]
    fn build_counts_equality_rows() {
        let (cfg, params) = default_setup();
        let r = params.wheel_radius;
        let n = cfg.horizon;

        // All-aerial: no rows.
        let x_air = OcpState::new(Wrench::zero(), RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 1.0)));
        let refs: Vec<_> = (0..=n).map(|_| hover_ref(Vec3::new(0.0, 0.0, 1.0))).collect();
        let p = build_ocp(&x_air, &refs, &cfg, &params, &Wrench::zero()).unwrap();
        assert_eq!(p.contact_equality_rows(), 0);
        assert!(p.delta.iter().all(|&d| !d));

        // All-ground with the vehicle on the ground: 3N rows.
        let x_gnd = OcpState::new(Wrench::zero(), RigidBodyState::at_rest(Vec3::new(0.0, 0.0, r)));
        let refs: Vec<_> = (0..=n).map(|_| ground_ref((0.0, 0.0), r)).collect();
        let p = build_ocp(&x_gnd, &refs, &cfg, &params, &Wrench::zero()).unwrap();
        assert_eq!(p.contact_equality_rows(), 3 * n);
        assert!(p.delta.iter().all(|&d| d));

        // Touchdown at stage 10: rows for stages 10..=N.
        let refs: Vec<_> = (0..=n)
            .map(|k| {
                if k < 10 {
                    hover_ref(Vec3::new(0.0, 0.0, 1.0))
                } else {
                    ground_ref((0.0, 0.0), r)
                }
            })
            .collect();
        let p = build_ocp(&x_air, &refs, &cfg, &params, &Wrench::zero()).unwrap();
        assert_eq!(p.contact_equality_rows(), 3 * (n - 9));
    }

    #[test]
    fn build_rejects_short_horizon() {
        let (cfg, params) = default_setup();
        let x = OcpState::new(Wrench::zero(), RigidBodyState::at_rest(Vec3::zeros()));
        let refs = vec![hover_ref(Vec3::zeros()); cfg.horizon];
        assert!(build_ocp(&x, &refs, &cfg, &params, &Wrench::zero()).is_err());
    }

    /// Equilibrium fixed point: hovering exactly on the reference with the
    /// gravity-compensating wrench and zero wrench weights gives u* ≈ 0.
    #[test]
    fn hover_equilibrium_yields_zero_input() {
        let (mut cfg, params) = default_setup();
        for i in 0..6 {
            cfg.q_weights[i] = 0.0;
            cfg.qn_weights[i] = 0.0;
        }
        let mg = params.mass * GRAVITY;
        let x = OcpState::new(
            Wrench::new(Vec3::new(0.0, 0.0, mg), Vec3::zeros()),
            RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 1.0)),
        );
        let refs = vec![hover_ref(Vec3::new(0.0, 0.0, 1.0)); cfg.horizon + 1];
        let problem = build_ocp(&x, &refs, &cfg, &params, &Wrench::zero()).unwrap();
        let sol = solve(&problem, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        let u_inf = sol
            .inputs
            .iter()
            .map(|u| u.abs().max())
            .fold(0.0, f64::max);
        assert!(u_inf <= 1e-6, "‖u‖∞ = {u_inf}");
        for (k, s) in sol.states.iter().enumerate() {
            assert!(
                (s.body.p - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-7,
                "stage {k} drifted"
            );
        }
    }

    #[test]
    fn control_step_integrates_rate() {
        let (mut cfg, params) = default_setup();
        for i in 0..6 {
            cfg.q_weights[i] = 0.0;
            cfg.qn_weights[i] = 0.0;
        }
        let mg = params.mass * GRAVITY;
        let x = OcpState::new(
            Wrench::new(Vec3::new(0.0, 0.0, mg), Vec3::zeros()),
            RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 1.0)),
        );
        let refs = vec![hover_ref(Vec3::new(0.0, 0.0, 1.0)); cfg.horizon + 1];
        let (w, _) = control_step(&x, &refs, &cfg, &params, &Wrench::zero(), None, 0.01).unwrap();
        assert_relative_eq!(w.force.z, mg, epsilon = 1e-5);
        assert!(w.force.x.abs() < 1e-5 && w.torque.norm() < 1e-5);
    }

    /// Ground stationary case: the absolute wrench penalty unloads thrust
    /// onto the wheels across the horizon while the predicted trajectory
    /// keeps the non-holonomic residuals at zero.
    #[test]
    fn ground_solution_unloads_thrust() {
        let (cfg, params) = default_setup();
        let r = params.wheel_radius;
        let mg = params.mass * GRAVITY;
        let x = OcpState::new(
            Wrench::new(Vec3::new(0.0, 0.0, mg), Vec3::zeros()),
            RigidBodyState::at_rest(Vec3::new(0.0, 0.0, r)),
        );
        let refs = vec![ground_ref((0.0, 0.0), r); cfg.horizon + 1];
        // Ground support measured by the estimator at touchdown: none yet.
        let problem = build_ocp(&x, &refs, &cfg, &params, &Wrench::zero()).unwrap();
        let sol = solve(&problem, None).unwrap();
        let fz_end = sol.states[cfg.horizon].wrench.force.z;
        assert!(fz_end < 0.96 * mg, "terminal F_z = {fz_end}, mg = {mg}");
        for w in sol.states.windows(2) {
            assert!(w[1].wrench.force.z <= w[0].wrench.force.z + 1e-9);
        }
        for (k, s) in sol.states.iter().enumerate() {
            let c = contact_residual(s, r);
            assert!(
                c.abs().max() <= 1e-6,
                "stage {k} residual {:?}",
                c
            );
        }
    }

    /// δ = 0 everywhere must leave solutions untouched by the contact
    /// machinery: two gate-equivalent configurations produce bit-identical
    /// first inputs.
    #[test]
    fn aerial_solution_independent_of_contact_gate_width() {
        let (cfg_a, params) = default_setup();
        let mut cfg_b = cfg_a;
        cfg_b.contact_tol = 1e-9;
        let x = OcpState::new(
            Wrench::new(Vec3::new(0.0, 0.0, 14.0), Vec3::zeros()),
            RigidBodyState::at_rest(Vec3::new(0.3, -0.2, 1.0)),
        );
        let refs = vec![hover_ref(Vec3::new(0.0, 0.0, 1.2)); cfg_a.horizon + 1];
        let sa = solve(
            &build_ocp(&x, &refs, &cfg_a, &params, &Wrench::zero()).unwrap(),
            None,
        )
        .unwrap();
        let sb = solve(
            &build_ocp(&x, &refs, &cfg_b, &params, &Wrench::zero()).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(sa.inputs[0], sb.inputs[0]);
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let (cfg, params) = default_setup();
        let x = OcpState::new(
            Wrench::new(Vec3::new(0.1, 0.0, 14.0), Vec3::new(0.0, 0.01, 0.0)),
            RigidBodyState::at_rest(Vec3::new(0.5, 0.0, 1.0)),
        );
        let refs = vec![hover_ref(Vec3::new(0.0, 0.0, 1.0)); cfg.horizon + 1];
        let p1 = build_ocp(&x, &refs, &cfg, &params, &Wrench::zero()).unwrap();
        let p2 = build_ocp(&x, &refs, &cfg, &params, &Wrench::zero()).unwrap();
        let s1 = solve(&p1, None).unwrap();
        let s2 = solve(&p2, None).unwrap();
        assert_eq!(s1.iterations, s2.iterations);
        for k in 0..cfg.horizon {
            assert_eq!(s1.inputs[k], s2.inputs[k]);
        }
    }

    #[test]
    fn stage0_contact_violation_reported() {
        let (cfg, params) = default_setup();
        let r = params.wheel_radius;
        let mut body = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, r));
        body.v = Vec3::new(0.0, 0.05, 0.0); // lateral slip at contact
        let x = OcpState::new(Wrench::zero(), body);
        let refs = vec![ground_ref((0.0, 0.0), r); cfg.horizon + 1];
        let problem = build_ocp(&x, &refs, &cfg, &params, &Wrench::zero()).unwrap();
        assert!(problem.stage0_violation > 0.01);
        let sol = solve(&problem, None).unwrap();
        assert_eq!(sol.status, SolveStatus::InfeasibleRelaxed);
    }
}
