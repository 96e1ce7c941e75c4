//! Dense convex-QP subproblem interface, backed by the Clarabel
//! interior-point solver.
//!
//! Problems arrive in the condensed form
//!   minimize ½ dᵀH d + gᵀd
//!   subject to A_eq d = b_eq,  A_in d ≤ b_in
//! with H positive definite (the Gauss–Newton Hessian plus the input
//! regularizer). Equalities map to the zero cone, inequalities to the
//! nonnegative cone.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus,
};
use nalgebra::{DMatrix, DVector};

use crate::error::Error;

/// Rows are stored densely; zeros are dropped during CSC conversion.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// Solved to reduced accuracy; the solution is still usable.
    Inaccurate,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
}

/// Upper-triangular CSC view of a symmetric dense matrix.
fn to_csc_upper(m: &DMatrix<f64>) -> CscMatrix<f64> {
    let n = m.ncols();
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for c in 0..n {
        for r in 0..=c {
            let v = m[(r, c)];
            if v != 0.0 {
                rowval.push(r);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(n, n, colptr, rowval, nzval)
}

/// CSC of the stacked constraint matrix [A_eq; A_in].
fn to_csc_stacked(a_eq: &DMatrix<f64>, a_in: &DMatrix<f64>) -> CscMatrix<f64> {
    let n = a_eq.ncols().max(a_in.ncols());
    let m_eq = a_eq.nrows();
    let m = m_eq + a_in.nrows();
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for c in 0..n {
        for r in 0..m_eq {
            let v = a_eq[(r, c)];
            if v != 0.0 {
                rowval.push(r);
                nzval.push(v);
            }
        }
        for r in 0..a_in.nrows() {
            let v = a_in[(r, c)];
            if v != 0.0 {
                rowval.push(m_eq + r);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

pub fn solve_dense_qp(qp: &DenseQp) -> Result<QpSolution, Error> {
    use clarabel::solver::SupportedConeT::{NonnegativeConeT, ZeroConeT};

    let n = qp.g.len();
    debug_assert_eq!(qp.h.nrows(), n);
    debug_assert_eq!(qp.a_eq.nrows(), qp.b_eq.len());
    debug_assert_eq!(qp.a_in.nrows(), qp.b_in.len());

    let p = to_csc_upper(&qp.h);
    let a = to_csc_stacked(&qp.a_eq, &qp.a_in);
    let mut b = Vec::with_capacity(qp.b_eq.len() + qp.b_in.len());
    b.extend_from_slice(qp.b_eq.as_slice());
    b.extend_from_slice(qp.b_in.as_slice());
    let cones = [ZeroConeT(qp.b_eq.len()), NonnegativeConeT(qp.b_in.len())];

    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(200)
        .build()
        .map_err(|e| Error::QpFailure(e.to_string()))?;

    let mut solver = DefaultSolver::new(&p, qp.g.as_slice(), &a, &b, &cones, settings)
        .map_err(|e| Error::QpFailure(format!("problem setup: {e}")))?;
    solver.solve();

    let status = match solver.solution.status {
        SolverStatus::Solved => QpStatus::Optimal,
        SolverStatus::AlmostSolved => QpStatus::Inaccurate,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            QpStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            return Err(Error::QpFailure("dual infeasible (unbounded below)".into()))
        }
        other => {
            return Err(Error::QpFailure(format!("solver returned {other:?}")));
        }
    };

    Ok(QpSolution {
        x: DVector::from_column_slice(&solver.solution.x),
        status,
    })
}
