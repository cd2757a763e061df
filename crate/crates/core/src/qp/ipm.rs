//! Mehrotra predictor–corrector interior-point method for dense convex QPs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{QpProblem, QpSettings, QpSolution, QpStatus};
use crate::error::{Error, Result};

/// Origin of each row of the one-sided system Gx ≤ h.
#[derive(Clone, Copy)]
enum Side {
    Upper(usize),
    Lower(usize),
}

/// The problem rewritten as min ½xᵀPx + cᵀx, Ax = b, G_d x ≤ h_d, and
/// (optionally) x ≥ 0 kept as a separate diagonal block. Rows are scaled to
/// unit max-norm.
struct Standard {
    p: DMatrix<f64>,
    c: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    a_scale: Vec<f64>,
    /// Equality rows taken from `a_eq` (None) or a degenerate inequality row.
    a_origin: Vec<Option<usize>>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    g_scale: Vec<f64>,
    g_origin: Vec<Side>,
    nonneg: bool,
}

fn row_scale(row: nalgebra::RowDVector<f64>) -> f64 {
    let m = row.amax();
    if m > 0.0 {
        1.0 / m
    } else {
        1.0
    }
}

impl Standard {
    fn new(pr: &QpProblem) -> Self {
        let m = pr.dim();
        let mut a_rows = Vec::new();
        let mut b = Vec::new();
        let mut a_scale = Vec::new();
        let mut a_origin = Vec::new();
        for i in 0..pr.a_eq.nrows() {
            let r = pr.a_eq.row(i).into_owned();
            let s = row_scale(r.clone());
            a_rows.push(r * s);
            b.push(pr.b_eq[i] * s);
            a_scale.push(s);
            a_origin.push(None);
        }
        let mut g_rows = Vec::new();
        let mut h = Vec::new();
        let mut g_scale = Vec::new();
        let mut g_origin = Vec::new();
        for i in 0..pr.a_ineq.nrows() {
            let r = pr.a_ineq.row(i).into_owned();
            let s = row_scale(r.clone());
            if pr.lo[i] == pr.hi[i] {
                a_rows.push(&r * s);
                b.push(pr.lo[i] * s);
                a_scale.push(s);
                a_origin.push(Some(i));
                continue;
            }
            if pr.hi[i].is_finite() {
                g_rows.push(&r * s);
                h.push(pr.hi[i] * s);
                g_scale.push(s);
                g_origin.push(Side::Upper(i));
            }
            if pr.lo[i].is_finite() {
                g_rows.push(&r * (-s));
                h.push(-pr.lo[i] * s);
                g_scale.push(s);
                g_origin.push(Side::Lower(i));
            }
        }
        let stack = |rows: &[nalgebra::RowDVector<f64>]| {
            if rows.is_empty() {
                DMatrix::zeros(0, m)
            } else {
                DMatrix::from_rows(rows)
            }
        };
        Self {
            p: &pr.q * 2.0,
            c: pr.c.clone(),
            a: stack(&a_rows),
            b: DVector::from_vec(b),
            a_scale,
            a_origin,
            g: stack(&g_rows),
            h: DVector::from_vec(h),
            g_scale,
            g_origin,
            nonneg: pr.nonneg,
        }
    }

    fn m(&self) -> usize {
        self.p.nrows()
    }

    fn n_ineq(&self) -> usize {
        self.g.nrows() + if self.nonneg { self.m() } else { 0 }
    }

    /// Gx over the full one-sided system.
    fn g_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_ineq());
        let nd = self.g.nrows();
        out.rows_mut(0, nd).copy_from(&(&self.g * x));
        if self.nonneg {
            out.rows_mut(nd, self.m()).copy_from(&(-x));
        }
        out
    }

    fn gt_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        let nd = self.g.nrows();
        let mut out = self.g.tr_mul(&z.rows(0, nd).into_owned());
        if self.nonneg {
            out -= z.rows(nd, self.m());
        }
        out
    }

    fn h_full(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_ineq());
        out.rows_mut(0, self.h.len()).copy_from(&self.h);
        out
    }
}

/// Factorization of the reduced Newton system for one iteration.
struct Newton<'a> {
    st: &'a Standard,
    h_chol: Cholesky<f64, Dyn>,
    schur: Option<Cholesky<f64, Dyn>>,
    hinv_at: DMatrix<f64>,
    d: DVector<f64>,
}

impl<'a> Newton<'a> {
    fn new(st: &'a Standard, s: &DVector<f64>, z: &DVector<f64>) -> Result<Self> {
        let m = st.m();
        let d = z.component_div(s);
        let nd = st.g.nrows();
        let mut h = st.p.clone();
        if nd > 0 {
            let mut dg = st.g.clone();
            for i in 0..nd {
                dg.row_mut(i).scale_mut(d[i]);
            }
            h += st.g.tr_mul(&dg);
        }
        if st.nonneg {
            for j in 0..m {
                h[(j, j)] += d[nd + j];
            }
        }
        // regularize relative to the unweighted Hessian, escalating only if needed
        let base = (0..m).fold(0.0_f64, |a, j| a.max(st.p[(j, j)]));
        let top = (0..m).fold(0.0_f64, |a, j| a.max(h[(j, j)]));
        let mut reg = 1e-13 * (1.0 + base);
        let h_chol = loop {
            let mut hr = h.clone();
            for j in 0..m {
                hr[(j, j)] += reg;
            }
            if let Some(c) = Cholesky::new(hr) {
                break c;
            }
            if reg > 1e-13 * (1.0 + top) {
                return Err(Error::DegenerateProgram("interior point: reduced Hessian is not positive definite".into()));
            }
            reg *= 100.0;
        };
        let hinv_at = h_chol.solve(&st.a.transpose());
        let schur = if st.a.nrows() > 0 {
            let mut sm = &st.a * &hinv_at;
            let sreg = 1e-14 * (1.0 + (0..sm.nrows()).fold(0.0_f64, |a, j| a.max(sm[(j, j)])));
            for j in 0..sm.nrows() {
                sm[(j, j)] += sreg;
            }
            Some(Cholesky::new(sm).ok_or_else(|| Error::DegenerateProgram("interior point: equality rows are dependent".into()))?)
        } else {
            None
        };
        Ok(Self { st, h_chol, schur, hinv_at, d })
    }

    /// Direction for residuals (rd, rp, ri) and complementarity target rc.
    fn solve(
        &self,
        s: &DVector<f64>,
        rd: &DVector<f64>,
        rp: &DVector<f64>,
        ri: &DVector<f64>,
        rc: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        let st = self.st;
        // Δz = D(GΔx + ri) − rc/s
        let t = DVector::from_fn(s.len(), |i, _| self.d[i] * ri[i] - rc[i] / s[i]);
        let r1 = -rd - st.gt_mul(&t);
        let hinv_r1 = self.h_chol.solve(&r1);
        let (dx, dy) = match &self.schur {
            Some(sc) => {
                let rhs = &st.a * &hinv_r1 + rp;
                let dy = sc.solve(&rhs);
                let dx = &hinv_r1 - &self.hinv_at * &dy;
                (dx, dy)
            }
            None => (hinv_r1, DVector::zeros(0)),
        };
        let gdx = st.g_mul(&dx);
        let dz = DVector::from_fn(s.len(), |i, _| self.d[i] * (gdx[i] + ri[i]) - rc[i] / s[i]);
        let ds = DVector::from_fn(s.len(), |i, _| -ri[i] - gdx[i]);
        (dx, dy, dz, ds)
    }

    /// `solve` followed by iterative refinement against the unreduced Newton
    /// equations; the regularized factorization is inexact when z/s spans many
    /// orders of magnitude.
    fn solve_refined(
        &self,
        s: &DVector<f64>,
        z: &DVector<f64>,
        rd: &DVector<f64>,
        rp: &DVector<f64>,
        ri: &DVector<f64>,
        rc: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        let st = self.st;
        let (mut dx, mut dy, mut dz, mut ds) = self.solve(s, rd, rp, ri, rc);
        for _ in 0..REFINE {
            let e1 = -rd - (&st.p * &dx + st.a.tr_mul(&dy) + st.gt_mul(&dz));
            let e2 = -rp - &st.a * &dx;
            let e3 = -ri - (st.g_mul(&dx) + &ds);
            let e4 = -rc - (s.component_mul(&dz) + z.component_mul(&ds));
            let size = e1.amax().max(e2.amax()).max(e3.amax());
            if !(size > 0.0) {
                break;
            }
            let (cx, cy, cz, cs) = self.solve(s, &-e1, &-e2, &-e3, &-e4);
            dx += cx;
            dy += cy;
            dz += cz;
            ds += cs;
        }
        (dx, dy, dz, ds)
    }
}

/// Refinement passes per Newton solve.
const REFINE: usize = 2;

/// Iterations without progress before the best iterate is accepted.
const STALL: usize = 5;
/// Largest scaled residual accepted at a stall.
const STALL_ACCEPT: f64 = 1e-8;

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut a = f64::INFINITY;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            a = a.min(-v[i] / dv[i]);
        }
    }
    a
}

/// Interior-point solve; primal infeasibility is reported through a Farkas
/// certificate extracted from the diverging dual iterates.
pub fn solve_ipm(pr: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    pr.validate()?;
    let st = Standard::new(pr);
    let m = st.m();
    let ni = st.n_ineq();
    let me = st.a.nrows();
    let h = st.h_full();
    let tol = settings.ipm_tol;

    let mut x = DVector::zeros(m);
    if st.nonneg {
        x.fill(1.0 / m.max(1) as f64);
    }
    let gx = st.g_mul(&x);
    let mut s = DVector::from_fn(ni, |i, _| (h[i] - gx[i]).max(1.0));
    let mut z = DVector::from_element(ni, 1.0);
    let mut y = DVector::zeros(me);

    let b_norm = st.b.amax().max(h.amax());
    let c_norm = st.c.amax();
    let mut status = QpStatus::MaxIter;
    let mut iterations = settings.ipm_max_iter;
    let mut best = (f64::INFINITY, 0usize, x.clone(), y.clone(), z.clone());

    for k in 0..settings.ipm_max_iter {
        let rd = &st.p * &x + &st.c + st.a.tr_mul(&y) + st.gt_mul(&z);
        let rp = &st.a * &x - &st.b;
        let ri = st.g_mul(&x) + &s - &h;
        let mu = if ni > 0 { s.dot(&z) / ni as f64 } else { 0.0 };
        let p_res = rp.amax().max(ri.amax());
        let d_res = rd.amax();
        let obj_scale = 1.0 + x.dot(&(&st.p * &x)).abs() + st.c.dot(&x).abs();
        let p_scale = 1.0 + b_norm.max((&st.a * &x).amax()).max(st.g_mul(&x).amax());
        let d_scale = 1.0 + c_norm.max((&st.p * &x).amax()).max(st.a.tr_mul(&y).amax()).max(st.gt_mul(&z).amax());
        let merit = (p_res / p_scale).max(d_res / d_scale).max(mu * ni as f64 / obj_scale);
        if merit <= tol {
            status = QpStatus::Optimal;
            iterations = k;
            break;
        }
        if merit < best.0 {
            best = (merit, k, x.clone(), y.clone(), z.clone());
        } else if k - best.1 >= STALL && best.0 <= STALL_ACCEPT {
            // rounding floor reached; the best iterate is kept
            (x, y, z) = (best.2.clone(), best.3.clone(), best.4.clone());
            status = QpStatus::Optimal;
            iterations = k;
            break;
        }
        if farkas(&st, &y, &z, &h, settings.infeasibility_eps) {
            status = QpStatus::Infeasible;
            iterations = k;
            break;
        }

        let newton = match Newton::new(&st, &s, &z) {
            Ok(nw) => nw,
            Err(e) if k == 0 => return Err(e),
            Err(_) => break,
        };
        let rc_aff = s.component_mul(&z);
        let (_, _, dza, dsa) = newton.solve_refined(&s, &z, &rd, &rp, &ri, &rc_aff);
        let alpha_aff = 1.0_f64.min(max_step(&s, &dsa)).min(max_step(&z, &dza));
        let sigma = if ni > 0 {
            let mu_aff = (&s + &dsa * alpha_aff).dot(&(&z + &dza * alpha_aff)) / ni as f64;
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let rc = DVector::from_fn(ni, |i, _| s[i] * z[i] + dsa[i] * dza[i] - sigma * mu);
        let (dx, dy, dz, ds) = newton.solve_refined(&s, &z, &rd, &rp, &ri, &rc);
        let alpha = 1.0_f64.min(0.99 * max_step(&s, &ds).min(max_step(&z, &dz)));
        x += &dx * alpha;
        y += &dy * alpha;
        z += &dz * alpha;
        s += &ds * alpha;
        if !(x.iter().chain(z.iter()).all(|v| v.is_finite())) {
            break;
        }
    }

    // map duals back to the original rows and sign convention
    let mut dual_eq = DVector::zeros(pr.a_eq.nrows());
    let mut dual_ineq = DVector::zeros(pr.a_ineq.nrows());
    for (r, origin) in st.a_origin.iter().enumerate() {
        match origin {
            None => dual_eq[r] = y[r] * st.a_scale[r],
            Some(i) => dual_ineq[*i] = y[r] * st.a_scale[r],
        }
    }
    for (r, side) in st.g_origin.iter().enumerate() {
        match side {
            Side::Upper(i) => dual_ineq[*i] += z[r] * st.g_scale[r],
            Side::Lower(i) => dual_ineq[*i] -= z[r] * st.g_scale[r],
        }
    }
    let nd = st.g.nrows();
    let dual_nonneg = if pr.nonneg { -z.rows(nd, m).into_owned() } else { DVector::zeros(0) };
    if pr.nonneg && status == QpStatus::Optimal {
        for v in x.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    let mut notes = Vec::new();
    if status == QpStatus::Infeasible {
        notes.push("primal infeasibility certificate found".into());
    }
    Ok(QpSolution {
        objective: pr.objective(&x),
        primal_feasibility_residual: pr.primal_violation(&x),
        kkt_stationarity_residual: pr.stationarity(&x, &dual_eq, &dual_ineq, &dual_nonneg),
        x,
        dual_eq,
        dual_ineq,
        dual_nonneg,
        iterations,
        status,
        polished: false,
        notes,
    })
}

/// (y, z ≥ 0) with Aᵀy + Gᵀz ≈ 0 and bᵀy + hᵀz < 0 proves Ax = b, Gx ≤ h empty.
fn farkas(st: &Standard, y: &DVector<f64>, z: &DVector<f64>, h: &DVector<f64>, eps: f64) -> bool {
    let norm = y.amax().max(z.amax());
    if !(norm > 1e6) {
        return false;
    }
    let (yn, zn) = (y / norm, z / norm);
    let resid = (st.a.tr_mul(&yn) + st.gt_mul(&zn)).amax();
    let support = st.b.dot(&yn) + h.dot(&zn);
    resid <= eps && support < -eps.sqrt()
}
