//! Dense convex quadratic programs: minimize xᵀQx + cᵀx subject to linear
//! equalities, two-sided linear inequalities and an optional x ≥ 0.

mod admm;
mod dump;
mod ipm;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, max_asymmetry};

pub use admm::solve_admm;
pub use ipm::solve_ipm;
pub use dump::{problem_to_json, solution_to_json, DUMP_INLINE_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpMethod {
    InteriorPoint,
    /// Operator splitting with active-set polishing.
    Admm,
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub method: QpMethod,
    /// Iteration cap of the interior-point method.
    pub ipm_max_iter: usize,
    /// Relative residual and gap tolerance of the interior-point method.
    pub ipm_tol: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Iterations without a 1% improvement of the primal residual before the
    /// problem is declared infeasible.
    pub stagnation_window: usize,
    pub infeasibility_eps: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub rho: f64,
    pub check_every: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            method: QpMethod::InteriorPoint,
            ipm_max_iter: 200,
            ipm_tol: 1e-10,
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            max_iter: 200_000,
            stagnation_window: 10_000,
            infeasibility_eps: 1e-7,
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            check_every: 25,
            polish: true,
        }
    }
}

/// Inequality-capable solve with the configured method.
pub fn solve_ineq(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    match settings.method {
        QpMethod::InteriorPoint => solve_ipm(p, settings),
        QpMethod::Admm => solve_admm(p, settings),
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub nonneg: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// Solution with KKT diagnostics.
///
/// Inequality duals follow the sign convention y > 0 when the upper bound is
/// active and y < 0 when the lower bound is active; the nonnegativity duals are
/// therefore nonpositive.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub kkt_stationarity_residual: f64,
    pub primal_feasibility_residual: f64,
    pub dual_eq: DVector<f64>,
    pub dual_ineq: DVector<f64>,
    pub dual_nonneg: DVector<f64>,
    pub iterations: usize,
    pub status: QpStatus,
    pub polished: bool,
    pub notes: Vec<String>,
}

impl QpProblem {
    /// Equality-constrained problem.
    pub fn equality(q: DMatrix<f64>, c: DVector<f64>, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        let m = q.nrows();
        Self {
            q,
            c,
            a_eq,
            b_eq,
            a_ineq: DMatrix::zeros(0, m),
            lo: DVector::zeros(0),
            hi: DVector::zeros(0),
            nonneg: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dim();
        let bad = |what: &str| Err(Error::Dimension(format!("qp: {what}")));
        if self.q.ncols() != m {
            return bad("Q not square");
        }
        if self.c.len() != m {
            return bad("c length");
        }
        if self.a_eq.ncols() != m || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality block");
        }
        if self.a_ineq.ncols() != m || self.a_ineq.nrows() != self.lo.len() || self.lo.len() != self.hi.len() {
            return bad("inequality block");
        }
        if self.lo.iter().zip(self.hi.iter()).any(|(l, h)| l > h || l.is_nan() || h.is_nan()) {
            return Err(Error::InvalidArgument("qp: lower bound exceeds upper bound".into()));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&self.q) || !finite(&self.a_eq) || !finite(&self.a_ineq) {
            return Err(Error::InvalidArgument("qp: non-finite matrix entry".into()));
        }
        if !self.c.iter().chain(self.b_eq.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("qp: non-finite vector entry".into()));
        }
        let asym = max_asymmetry(&self.q);
        if asym > 1e-8 * (1.0 + max_abs(&self.q)) {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x)) + self.c.dot(x)
    }

    /// Largest violation of any constraint at `x`.
    pub fn primal_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst = 0.0_f64;
        let ax = &self.a_eq * x;
        for i in 0..ax.len() {
            worst = worst.max((ax[i] - self.b_eq[i]).abs());
        }
        let gx = &self.a_ineq * x;
        for i in 0..gx.len() {
            worst = worst.max(self.lo[i] - gx[i]).max(gx[i] - self.hi[i]);
        }
        if self.nonneg {
            for v in x.iter() {
                worst = worst.max(-v);
            }
        }
        worst
    }

    /// ‖2Qx + c + A_eqᵀν + A_ineqᵀy + μ‖∞.
    pub fn stationarity(&self, x: &DVector<f64>, nu: &DVector<f64>, y: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        let mut g = &self.q * x * 2.0 + &self.c + self.a_eq.transpose() * nu + self.a_ineq.transpose() * y;
        if self.nonneg {
            g += mu;
        }
        g.amax()
    }

    fn strictly_convex(&self) -> bool {
        Cholesky::new(self.q.clone()).is_some()
    }
}

/// Solves an equality-constrained QP through its KKT system [[2Q, Aᵀ], [A, 0]].
pub fn solve_eq(p: &QpProblem) -> Result<QpSolution> {
    p.validate()?;
    if p.a_ineq.nrows() > 0 || p.nonneg {
        return Err(Error::InvalidArgument("solve_eq takes equality constraints only".into()));
    }
    let m = p.dim();
    let k = p.a_eq.nrows();
    let mut kkt = DMatrix::zeros(m + k, m + k);
    kkt.view_mut((0, 0), (m, m)).copy_from(&(&p.q * 2.0));
    kkt.view_mut((0, m), (m, k)).copy_from(&p.a_eq.transpose());
    kkt.view_mut((m, 0), (k, m)).copy_from(&p.a_eq);
    let mut rhs = DVector::zeros(m + k);
    rhs.rows_mut(0, m).copy_from(&(-&p.c));
    rhs.rows_mut(m, k).copy_from(&p.b_eq);

    let lu = kkt.clone().lu();
    let u = lu.u();
    let pivot_max = (0..m + k).fold(0.0_f64, |a, i| a.max(u[(i, i)].abs()));
    let pivot_min = (0..m + k).fold(f64::INFINITY, |a, i| a.min(u[(i, i)].abs()));
    let singular = || Error::DegenerateProgram("singular KKT system".into());
    if m + k == 0 || pivot_max == 0.0 || pivot_min <= 1e-14 * pivot_max {
        return Err(singular());
    }
    let mut sol = lu.solve(&rhs).ok_or_else(singular)?;
    for _ in 0..2 {
        let resid = &rhs - &kkt * &sol;
        sol += lu.solve(&resid).ok_or_else(singular)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    let x = sol.rows(0, m).into_owned();
    let nu = sol.rows(m, k).into_owned();
    let empty = DVector::zeros(0);
    let stationarity = p.stationarity(&x, &nu, &empty, &empty);
    let mut notes = Vec::new();
    if !p.strictly_convex() {
        notes.push("objective is not strictly convex; optimum taken from the KKT solve".into());
    }
    Ok(QpSolution {
        objective: p.objective(&x),
        primal_feasibility_residual: p.primal_violation(&x),
        kkt_stationarity_residual: stationarity,
        x,
        dual_eq: nu,
        dual_ineq: DVector::zeros(0),
        dual_nonneg: DVector::zeros(0),
        iterations: 1,
        status: QpStatus::Optimal,
        polished: false,
        notes,
    })
}

/// The minimal-dispersion program whose solution equals the GLS implied weights:
/// minimize wᵀMΣMw subject to Σ_{Z=1}wᵢ = Σ_{Z=0}wᵢ = 1 and exact balance on
/// every non-intercept column of X.
///
/// The intercept balance row is implied by the two sum constraints and is left
/// out so the KKT matrix stays nonsingular.
pub fn minimal_dispersion_problem(x: &DMatrix<f64>, z: &[bool], sigma: &DMatrix<f64>) -> Result<QpProblem> {
    let n = z.len();
    if x.nrows() != n || sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::Dimension("minimal dispersion program".into()));
    }
    let sign: Vec<f64> = z.iter().map(|&t| if t { 1.0 } else { -1.0 }).collect();
    let q = DMatrix::from_fn(n, n, |i, j| sign[i] * sigma[(i, j)] * sign[j]);
    let p = x.ncols();
    let mut a = DMatrix::zeros(p + 1, n);
    let mut b = DVector::zeros(p + 1);
    for i in 0..n {
        a[(if z[i] { 0 } else { 1 }, i)] = 1.0;
        for j in 1..p {
            a[(j + 1, i)] = sign[i] * x[(i, j)];
        }
    }
    b[0] = 1.0;
    b[1] = 1.0;
    Ok(QpProblem::equality(q, DVector::zeros(n), a, b))
}
