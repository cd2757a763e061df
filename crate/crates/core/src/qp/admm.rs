//! Operator-splitting solver for inequality-constrained problems, with an
//! active-set polishing step and infeasibility detection.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{QpProblem, QpSettings, QpSolution, QpStatus};
use crate::error::{Error, Result};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const EQ_RHO_FACTOR: f64 = 1e3;

#[derive(Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Eq,
    Ineq,
    Free,
}

/// Stacked constraints l ≤ Cx ≤ u with rows in the order equalities,
/// inequalities, nonnegativity.
struct Stacked {
    c: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    kind: Vec<RowKind>,
}

impl Stacked {
    fn new(p: &QpProblem) -> Self {
        let m = p.dim();
        let neq = p.a_eq.nrows();
        let nin = p.a_ineq.nrows();
        let nnn = if p.nonneg { m } else { 0 };
        let rows = neq + nin + nnn;
        let mut c = DMatrix::zeros(rows, m);
        let mut l = DVector::zeros(rows);
        let mut u = DVector::zeros(rows);
        let mut kind = Vec::with_capacity(rows);
        c.view_mut((0, 0), (neq, m)).copy_from(&p.a_eq);
        for i in 0..neq {
            l[i] = p.b_eq[i];
            u[i] = p.b_eq[i];
            kind.push(RowKind::Eq);
        }
        c.view_mut((neq, 0), (nin, m)).copy_from(&p.a_ineq);
        for i in 0..nin {
            l[neq + i] = p.lo[i];
            u[neq + i] = p.hi[i];
            kind.push(if p.lo[i] == p.hi[i] {
                RowKind::Eq
            } else if p.lo[i] == f64::NEG_INFINITY && p.hi[i] == f64::INFINITY {
                RowKind::Free
            } else {
                RowKind::Ineq
            });
        }
        for i in 0..nnn {
            c[(neq + nin + i, i)] = 1.0;
            l[neq + nin + i] = 0.0;
            u[neq + nin + i] = f64::INFINITY;
            kind.push(RowKind::Ineq);
        }
        Self { c, l, u, kind }
    }

    fn rows(&self) -> usize {
        self.c.nrows()
    }
}

struct Polished {
    x: DVector<f64>,
    y: DVector<f64>,
}

/// Solves min xᵀQx + cᵀx subject to equalities, two-sided inequalities and
/// optionally x ≥ 0.
///
/// Returns a solution whose status is `Infeasible` when a certificate of primal
/// infeasibility is found or the primal residual stagnates; dimension and
/// convexity problems are errors.
pub fn solve_admm(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    p.validate()?;
    let m = p.dim();
    let cons = Stacked::new(p);
    let rows = cons.rows();
    let pmat = &p.q * 2.0;
    let q = p.c.clone();

    let row_scale: Vec<f64> = (0..rows)
        .map(|i| {
            let nrm = cons.c.row(i).amax();
            if nrm > 0.0 {
                1.0 / nrm
            } else {
                1.0
            }
        })
        .collect();
    let mut cs = cons.c.clone();
    for i in 0..rows {
        cs.row_mut(i).scale_mut(row_scale[i]);
    }
    let ls = DVector::from_fn(rows, |i, _| cons.l[i] * row_scale[i]);
    let us = DVector::from_fn(rows, |i, _| cons.u[i] * row_scale[i]);

    let base_rho = |kind: RowKind, rho: f64| match kind {
        RowKind::Eq => (rho * EQ_RHO_FACTOR).min(RHO_MAX),
        RowKind::Ineq => rho,
        RowKind::Free => RHO_MIN,
    };
    let mut rho = settings.rho;
    let mut rho_vec = DVector::from_fn(rows, |i, _| base_rho(cons.kind[i], rho));
    let factor = |rho_vec: &DVector<f64>| -> Result<Cholesky<f64, Dyn>> {
        let mut k = pmat.clone();
        for j in 0..m {
            k[(j, j)] += settings.sigma;
        }
        let mut scaled = cs.clone();
        for i in 0..rows {
            scaled.row_mut(i).scale_mut(rho_vec[i]);
        }
        k += cs.transpose() * scaled;
        Cholesky::new(k).ok_or_else(|| Error::InvalidArgument("qp: objective matrix is not PSD".into()))
    };
    let mut chol = factor(&rho_vec)?;

    let mut x: DVector<f64> = DVector::zeros(m);
    let mut z: DVector<f64> = DVector::zeros(rows);
    let mut y: DVector<f64> = DVector::zeros(rows);
    let mut best_prim = f64::INFINITY;
    let mut last_improve = 0usize;
    let mut last_polish: Option<usize> = None;
    let mut status = QpStatus::MaxIter;
    let mut polished: Option<Polished> = None;
    let mut iterations = settings.max_iter;
    let alpha = settings.alpha;

    for k in 1..=settings.max_iter {
        let rz = DVector::from_fn(rows, |i, _| rho_vec[i] * z[i] - y[i]);
        let rhs = &x * settings.sigma - &q + cs.transpose() * rz;
        let xt = chol.solve(&rhs);
        let zt = &cs * &xt;
        let x_new = &xt * alpha + &x * (1.0 - alpha);
        let zr = &zt * alpha + &z * (1.0 - alpha);
        let z_new: DVector<f64> = DVector::from_fn(rows, |i, _| (zr[i] + y[i] / rho_vec[i]).clamp(ls[i], us[i]));
        let y_new = DVector::from_fn(rows, |i, _| y[i] + rho_vec[i] * (zr[i] - z_new[i]));
        let dy = &y_new - &y;
        x = x_new;
        z = z_new;
        y = y_new;

        if k % settings.check_every != 0 && k != settings.max_iter {
            continue;
        }

        let cx = &cs * &x;
        let prim = (0..rows).fold(0.0_f64, |a, i| a.max((cx[i] - z[i]).abs() / row_scale[i]));
        let px = &pmat * &x;
        let cty = cs.transpose() * &y;
        let dual = (&px + &q + &cty).amax();
        let cx_norm = (0..rows).fold(0.0_f64, |a, i| a.max(cx[i].abs() / row_scale[i]));
        let z_norm = (0..rows).fold(0.0_f64, |a, i| a.max(z[i].abs() / row_scale[i]));
        let prim_scale = cx_norm.max(z_norm);
        let dual_scale = px.amax().max(cty.amax()).max(q.amax());
        let prim_tol = settings.eps_abs + settings.eps_rel * prim_scale;
        let dual_tol = settings.eps_abs + settings.eps_rel * dual_scale;

        if certificate_of_infeasibility(&cs, &ls, &us, &dy, settings.infeasibility_eps) {
            status = QpStatus::Infeasible;
            iterations = k;
            break;
        }
        if prim < 0.99 * best_prim {
            best_prim = prim;
            last_improve = k;
        }
        if k - last_improve >= settings.stagnation_window && best_prim > 1e-6 * (1.0 + prim_scale) {
            status = QpStatus::Infeasible;
            iterations = k;
            break;
        }

        let converged = prim <= prim_tol && dual <= dual_tol;
        let close = prim <= 1e-4 * (1.0 + prim_scale) && dual <= 1e-4 * (1.0 + dual_scale);
        let polish_due = last_polish.is_none_or(|t| k - t >= 100);
        if settings.polish && (converged || (close && polish_due)) {
            last_polish = Some(k);
            let y_orig = DVector::from_fn(rows, |i, _| y[i] * row_scale[i]);
            let z_orig = DVector::from_fn(rows, |i, _| z[i] / row_scale[i]);
            if let Some(sol) = polish(&pmat, &q, &cons, &z_orig, &y_orig) {
                polished = Some(sol);
                status = QpStatus::Optimal;
                iterations = k;
                break;
            }
        }
        if converged {
            status = QpStatus::Optimal;
            iterations = k;
            break;
        }

        let prim_n = prim / prim_scale.max(1e-30);
        let dual_n = dual / dual_scale.max(1e-30);
        let new_rho = if prim_n > 10.0 * dual_n {
            (rho * 2.0).min(RHO_MAX)
        } else if dual_n > 10.0 * prim_n {
            (rho * 0.5).max(RHO_MIN)
        } else {
            rho
        };
        if new_rho != rho {
            rho = new_rho;
            for i in 0..rows {
                rho_vec[i] = base_rho(cons.kind[i], rho);
            }
            chol = factor(&rho_vec)?;
        }
    }

    let (mut x_out, y_out, was_polished) = match polished {
        Some(sol) => (sol.x, sol.y, true),
        None => (x, DVector::from_fn(rows, |i, _| y[i] * row_scale[i]), false),
    };
    if p.nonneg && status == QpStatus::Optimal {
        for v in x_out.iter_mut() {
            if *v < 0.0 && *v >= -1e-10 {
                *v = 0.0;
            }
        }
    }
    let neq = p.a_eq.nrows();
    let nin = p.a_ineq.nrows();
    let dual_eq = y_out.rows(0, neq).into_owned();
    let dual_ineq = y_out.rows(neq, nin).into_owned();
    let dual_nonneg = if p.nonneg { y_out.rows(neq + nin, m).into_owned() } else { DVector::zeros(0) };
    let stationarity = p.stationarity(&x_out, &dual_eq, &dual_ineq, &dual_nonneg);
    let mut notes = Vec::new();
    if !p.strictly_convex() {
        notes.push("objective is not strictly convex; the optimum returned is the limit of the proximal iteration".into());
    }
    if status == QpStatus::Infeasible {
        notes.push("primal infeasibility detected".into());
    }
    Ok(QpSolution {
        objective: p.objective(&x_out),
        primal_feasibility_residual: p.primal_violation(&x_out),
        kkt_stationarity_residual: stationarity,
        x: x_out,
        dual_eq,
        dual_ineq,
        dual_nonneg,
        iterations,
        status,
        polished: was_polished,
        notes,
    })
}

fn certificate_of_infeasibility(
    cs: &DMatrix<f64>,
    ls: &DVector<f64>,
    us: &DVector<f64>,
    dy: &DVector<f64>,
    eps: f64,
) -> bool {
    let norm = dy.amax();
    if norm <= 1e-14 {
        return false;
    }
    if (cs.transpose() * dy).amax() > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        if dy[i] > 0.0 {
            if us[i] == f64::INFINITY {
                return false;
            }
            support += us[i] * dy[i];
        } else if dy[i] < 0.0 {
            if ls[i] == f64::NEG_INFINITY {
                return false;
            }
            support += ls[i] * dy[i];
        }
    }
    support < -eps * norm
}

/// Guesses the active set from the iterate, solves the reduced KKT system and
/// accepts the result only if it is feasible, dual-feasible and stationary.
fn polish(pmat: &DMatrix<f64>, q: &DVector<f64>, cons: &Stacked, z: &DVector<f64>, y: &DVector<f64>) -> Option<Polished> {
    let m = pmat.nrows();
    let rows = cons.rows();
    let mut active = Vec::new();
    let mut target = Vec::new();
    for i in 0..rows {
        match cons.kind[i] {
            RowKind::Eq => {
                active.push(i);
                target.push(cons.l[i]);
            }
            RowKind::Free => {}
            RowKind::Ineq => {
                if z[i] - cons.l[i] < -y[i] {
                    active.push(i);
                    target.push(cons.l[i]);
                } else if cons.u[i] - z[i] < y[i] {
                    active.push(i);
                    target.push(cons.u[i]);
                }
            }
        }
    }
    let na = active.len();
    let mut kkt = DMatrix::zeros(m + na, m + na);
    kkt.view_mut((0, 0), (m, m)).copy_from(pmat);
    for (r, &i) in active.iter().enumerate() {
        for j in 0..m {
            kkt[(m + r, j)] = cons.c[(i, j)];
            kkt[(j, m + r)] = cons.c[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(m + na);
    rhs.rows_mut(0, m).copy_from(&(-q));
    for (r, t) in target.iter().enumerate() {
        rhs[m + r] = *t;
    }

    let direct = kkt.clone().lu().solve(&rhs).filter(|s| s.iter().all(|v| v.is_finite()));
    let sol = match direct {
        Some(s) if (&kkt * &s - &rhs).amax() <= 1e-10 * (1.0 + rhs.amax()) => s,
        _ => regularized_solve(&kkt, &rhs, m)?,
    };

    let x = sol.rows(0, m).into_owned();
    let mut y_full = DVector::zeros(rows);
    for (r, &i) in active.iter().enumerate() {
        y_full[i] = sol[m + r];
    }
    let cx = &cons.c * &x;
    let bound_scale = 1.0 + target.iter().fold(0.0_f64, |a, t| a.max(t.abs()));
    for i in 0..rows {
        let viol = (cons.l[i] - cx[i]).max(cx[i] - cons.u[i]);
        if viol > 1e-9 * bound_scale {
            return None;
        }
    }
    let y_scale = 1.0 + y_full.amax();
    for (r, &i) in active.iter().enumerate() {
        if cons.kind[i] == RowKind::Eq {
            continue;
        }
        let at_lower = target[r] == cons.l[i];
        let yi = y_full[i];
        if (at_lower && yi > 1e-8 * y_scale) || (!at_lower && yi < -1e-8 * y_scale) {
            return None;
        }
    }
    let px = pmat * &x;
    let cty = cons.c.transpose() * &y_full;
    let scale = 1.0 + px.amax().max(q.amax()).max(cty.amax());
    if (&px + q + &cty).amax() > 1e-8 * scale {
        return None;
    }
    Some(Polished { x, y: y_full })
}

/// Solves the quasi-definite system [[P + δI, Aᵀ], [A, −δI]] and refines
/// against the unregularized matrix.
fn regularized_solve(kkt: &DMatrix<f64>, rhs: &DVector<f64>, m: usize) -> Option<DVector<f64>> {
    let n = kkt.nrows();
    let delta = 1e-10 * (1.0 + kkt.amax());
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += if i < m { delta } else { -delta };
    }
    let lu = reg.lu();
    let mut sol = lu.solve(rhs)?;
    for _ in 0..25 {
        let resid = rhs - kkt * &sol;
        if resid.amax() <= 1e-12 * (1.0 + rhs.amax()) {
            break;
        }
        sol += lu.solve(&resid)?;
    }
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}
