//! Augmented inverse propensity weighting for the ATT with parametric nuisances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::ThinQr;

const PROPENSITY_CLIP: f64 = 1e-6;

/// Logistic regression by Newton–Raphson with step halving. Returns fitted
/// probabilities clipped to [1e-6, 1 − 1e-6].
pub fn logistic_fit(x: &DMatrix<f64>, z: &[bool]) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if z.len() != n {
        return Err(Error::Dimension("logistic design and response differ in length".into()));
    }
    let t = DVector::from_fn(n, |i, _| if z[i] { 1.0 } else { 0.0 });
    let loglik = |beta: &DVector<f64>| -> f64 {
        let eta = x * beta;
        (0..n).map(|i| t[i] * eta[i] - eta[i].max(0.0) - (-eta[i].abs()).exp().ln_1p()).sum()
    };
    let mut beta = DVector::zeros(p);
    let mut ll = loglik(&beta);
    for _ in 0..100 {
        let eta = x * &beta;
        let mu = eta.map(sigmoid);
        let grad = x.transpose() * (&t - &mu);
        let wdiag = mu.map(|m| (m * (1.0 - m)).max(1e-12));
        let mut h = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = x.row(i);
            h += row.transpose() * row * wdiag[i];
        }
        // small ridge keeps separated fits finite
        for j in 0..p {
            h[(j, j)] += 1e-8;
        }
        let step = h.cholesky().ok_or(Error::CollinearDesign)?.solve(&grad);
        let mut scale = 1.0;
        let mut improved = false;
        while scale > 1e-10 {
            let cand = &beta + &step * scale;
            let lc = loglik(&cand);
            if lc >= ll - 1e-12 {
                improved = lc > ll + 1e-12 * ll.abs().max(1.0);
                beta = cand;
                ll = lc;
                break;
            }
            scale *= 0.5;
        }
        if !improved || step.amax() * scale < 1e-10 {
            break;
        }
    }
    Ok((x * beta).map(|e| sigmoid(e).clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)))
}

fn sigmoid(e: f64) -> f64 {
    if e >= 0.0 {
        1.0 / (1.0 + (-e).exp())
    } else {
        let a = e.exp();
        a / (1.0 + a)
    }
}

/// Control-outcome regression fitted on controls and predicted for every unit.
pub fn control_outcome_fit(x: &DMatrix<f64>, z: &[bool], y: &DVector<f64>) -> Result<DVector<f64>> {
    let controls: Vec<usize> = (0..z.len()).filter(|&i| !z[i]).collect();
    let xc = x.select_rows(&controls);
    let yc = DVector::from_fn(controls.len(), |i, _| y[controls[i]]);
    let coef = ThinQr::new(&xc)?.solve(&yc);
    Ok(x * coef)
}

/// (1/n_t)[Σ YᵢZᵢ − Σ (Yᵢ(1−Zᵢ)π̂ᵢ + m̂₀ᵢ(Zᵢ − π̂ᵢ)) / (1 − π̂ᵢ)].
pub fn aipw_att(y: &DVector<f64>, z: &[bool], pi: &DVector<f64>, m0: &DVector<f64>) -> Result<f64> {
    let n = z.len();
    if y.len() != n || pi.len() != n || m0.len() != n {
        return Err(Error::Dimension("AIPW inputs differ in length".into()));
    }
    let nt = z.iter().filter(|&&t| t).count();
    if nt == 0 {
        return Err(Error::InvalidDataset("no treated units".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let zi = if z[i] { 1.0 } else { 0.0 };
        total += y[i] * zi - (y[i] * (1.0 - zi) * pi[i] + m0[i] * (zi - pi[i])) / (1.0 - pi[i]);
    }
    Ok(total / nt as f64)
}

/// AIPW with a logistic propensity and a linear control-outcome model, both on
/// the columns of `x` (which should include an intercept).
pub fn aipw_linear(x: &DMatrix<f64>, z: &[bool], y: &DVector<f64>) -> Result<f64> {
    let pi = logistic_fit(x, z)?;
    let m0 = control_outcome_fit(x, z, y)?;
    aipw_att(y, z, &pi, &m0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logistic_recovers_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 4.0 - 2.0 });
        let z: Vec<bool> = (0..n).map(|i| rng.random::<f64>() < sigmoid(-0.5 + 1.5 * x[(i, 1)])).collect();
        let pi = logistic_fit(&x, &z).unwrap();
        // fitted probability at x = 0 and x = 1 via two units
        let i0 = (0..n).min_by(|&a, &b| x[(a, 1)].abs().total_cmp(&x[(b, 1)].abs())).unwrap();
        assert!((pi[i0] - sigmoid(-0.5 + 1.5 * x[(i0, 1)])).abs() < 0.05);
    }

    #[test]
    fn correct_outcome_model_gives_exact_att() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 60;
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() });
        let z: Vec<bool> = (0..n).map(|i| x[(i, 1)] + 0.3 * rng.random::<f64>() > 0.6).collect();
        let y = DVector::from_fn(n, |i, _| 1.0 + 2.0 * x[(i, 1)] - x[(i, 2)] + if z[i] { 0.7 } else { 0.0 });
        assert!((aipw_linear(&x, &z, &y).unwrap() - 0.7).abs() < 1e-10);
    }

    #[test]
    fn uniform_propensity_and_zero_model() {
        let y = DVector::from_vec(vec![3.0, 1.0, 2.0, 4.0]);
        let z = [true, false, true, false];
        let pi = DVector::from_element(4, 0.5);
        let m0 = DVector::zeros(4);
        // treated mean minus control mean, reweighted by π/(1−π) = 1
        assert!((aipw_att(&y, &z, &pi, &m0).unwrap() - (2.5 - 2.5)).abs() < 1e-12);
    }
}
