//! Slow reference solvers used to cross-check the production code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{centered_basis, symmetrize};
use crate::structures::SpatialStructure;

/// Max of lᵀU over centered unit-norm U with I(U; S) = `i0`, by projected
/// gradient ascent from `restarts` random feasible starts.
///
/// Returns None when no start can be made feasible.
pub fn max_bias_projected_gradient(
    l: &DVector<f64>,
    st: &SpatialStructure,
    i0: f64,
    restarts: usize,
    seed: u64,
) -> Result<f64> {
    let n = st.n();
    if l.len() != n {
        return Err(Error::Dimension("l and S differ in size".into()));
    }
    let p = centered_basis(n);
    let t = symmetrize(&(p.transpose() * st.s() * &p)) / st.lambda_max();
    let d = &t - DMatrix::identity(n - 1, n - 1) * i0;
    let h = p.transpose() * l;
    let q = |a: &DVector<f64>| a.dot(&(&d * a));

    // Extreme eigenvectors only seed the starting points.
    let eig = SymmetricEigen::new(t.clone());
    let imax = eig.eigenvalues.imax();
    let imin = eig.eigenvalues.imin();
    let top = eig.eigenvectors.column(imax).into_owned();
    let bottom = eig.eigenvectors.column(imin).into_owned();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..restarts {
        let noise = |rng: &mut ChaCha8Rng| {
            let r: DVector<f64> = DVector::from_fn(n - 1, |_, _| StandardNormal.sample(rng));
            &r / r.norm()
        };
        let mut start = None;
        let mut scale = 8.0;
        while start.is_none() && scale > 1e-6 {
            let plus = &top + noise(&mut rng) * scale;
            let minus = &bottom + noise(&mut rng) * scale;
            start = bridge(&plus, &minus, &q);
            scale *= 0.5;
        }
        let Some(mut a) = start else { continue };
        if h.dot(&a) < 0.0 {
            a = -a;
        }
        let mut step = 1.0;
        let mut f = h.dot(&a);
        let mut flat = 0;
        for _ in 0..200_000 {
            let g = tangent(&h, &a, &(&d * &a));
            let gn = g.norm();
            if gn <= 1e-13 * h.norm().max(1e-300) {
                break;
            }
            let mut accepted = false;
            while step > 1e-18 {
                if let Some(cand) = retract(&(&a + &g * step), &d) {
                    let fc = h.dot(&cand);
                    if fc >= f + 1e-4 * step * gn * gn {
                        flat = if fc - f <= 1e-14 * f.abs() { flat + 1 } else { 0 };
                        a = cand;
                        f = fc;
                        step *= 2.0;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted || flat >= 50 {
                break;
            }
        }
        best = best.max(f);
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::InvalidArgument(format!("no feasible start for Moran's I {i0}")))
    }
}

/// Unit vector on the segment between `p` and `m` with q = 0, given q(p) > 0 > q(m).
fn bridge(p: &DVector<f64>, m: &DVector<f64>, q: &impl Fn(&DVector<f64>) -> f64) -> Option<DVector<f64>> {
    let at = |s: f64| p * (1.0 - s) + m * s;
    let (qp, qm) = (q(p), q(m));
    if qp.abs() < 1e-15 {
        return Some(p / p.norm());
    }
    if qm.abs() < 1e-15 {
        return Some(m / m.norm());
    }
    if qp.signum() == qm.signum() {
        return None;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if q(&at(mid)).signum() == qp.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = at(0.5 * (lo + hi));
    Some(&a / a.norm())
}

/// Component of `h` orthogonal to `a` and `da`.
fn tangent(h: &DVector<f64>, a: &DVector<f64>, da: &DVector<f64>) -> DVector<f64> {
    let e1 = a / a.norm();
    let mut e2 = da - &e1 * e1.dot(da);
    let n2 = e2.norm();
    let mut g = h - &e1 * e1.dot(h);
    if n2 > 1e-14 {
        e2 /= n2;
        g -= &e2 * e2.dot(h);
    }
    g
}

/// Moves `a` along D a onto {aᵀDa = 0}, then normalizes.
fn retract(a: &DVector<f64>, d: &DMatrix<f64>) -> Option<DVector<f64>> {
    let da = d * a;
    let c0 = a.dot(&da);
    let c1 = -2.0 * da.dot(&da);
    let c2 = da.dot(&(d * &da));
    let t = if c2.abs() < 1e-300 {
        -c0 / c1
    } else {
        let disc = c1 * c1 - 4.0 * c2 * c0;
        if disc < 0.0 {
            return None;
        }
        // root of smaller magnitude, computed stably
        let qv = -0.5 * (c1 + c1.signum() * disc.sqrt());
        let r1 = qv / c2;
        let r2 = c0 / qv;
        if r1.abs() < r2.abs() { r1 } else { r2 }
    };
    if !t.is_finite() {
        return None;
    }
    let b = a - da * t;
    let nb = b.norm();
    (nb > 0.0).then(|| b / nb)
}

/// Minimizes a convex function over the probability simplex in m ≤ 3
/// dimensions by exhaustive grid search at resolution 1/`steps`, subject to
/// `feasible`. Returns the best point and its value.
pub fn simplex_grid_search(
    m: usize,
    steps: usize,
    objective: impl Fn(&[f64]) -> f64,
    feasible: impl Fn(&[f64]) -> bool,
) -> Option<(Vec<f64>, f64)> {
    assert!((1..=3).contains(&m), "grid search supports up to three variables");
    let h = 1.0 / steps as f64;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |w: Vec<f64>| {
        if feasible(&w) {
            let v = objective(&w);
            if best.as_ref().is_none_or(|(_, b)| v < *b) {
                best = Some((w, v));
            }
        }
    };
    match m {
        1 => consider(vec![1.0]),
        2 => (0..=steps).for_each(|i| consider(vec![i as f64 * h, 1.0 - i as f64 * h])),
        _ => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let (a, b) = (i as f64 * h, j as f64 * h);
                    consider(vec![a, b, (1.0 - a - b).max(0.0)]);
                }
            }
        }
    }
    best
}
