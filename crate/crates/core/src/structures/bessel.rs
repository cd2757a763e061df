//! Modified Bessel function of the second kind and the Matérn correlation.
//!
//! `bessel_k` follows the classic Temme series (x < 2) / Steed continued
//! fraction (x >= 2) split for the fractional order |mu| <= 1/2, then recurses
//! upward to the requested order.

use std::f64::consts::PI;

use statrs::function::gamma::gamma;

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Taylor coefficients of 1/Γ(1+x) around 0, orders 1..=7.
const RECIP_GAMMA_1P: [f64; 7] = [
    EULER_GAMMA,
    -0.655_878_071_520_253_8,
    -0.042_002_635_034_095_2,
    0.166_538_611_382_291_5,
    -0.042_197_734_555_544_3,
    -0.009_621_971_527_877_0,
    0.007_218_943_246_663_0,
];

/// Returns (gam1, gam2, 1/Γ(1+mu), 1/Γ(1-mu)) for |mu| <= 1/2.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    let gampl = 1.0 / gamma(1.0 + mu);
    let gammi = 1.0 / gamma(1.0 - mu);
    if mu.abs() < 1e-2 {
        let c = &RECIP_GAMMA_1P;
        let m2 = mu * mu;
        let gam1 = -(c[0] + m2 * (c[2] + m2 * (c[4] + m2 * c[6])));
        let gam2 = 1.0 + m2 * (c[1] + m2 * (c[3] + m2 * c[5]));
        (gam1, gam2, gampl, gammi)
    } else {
        ((gammi - gampl) / (2.0 * mu), 0.5 * (gammi + gampl), gampl, gammi)
    }
}

/// K_ν(x) for ν >= 0 and x > 0.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x > 0.0, "bessel_k requires nu >= 0 and x > 0");
    let nl = (nu + 0.5).floor() as usize;
    let xmu = nu - nl as f64;
    let xmu2 = xmu * xmu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;

    let (mut rkmu, mut rk1);
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * xmu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = xmu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(xmu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..=MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - xmu2);
            c *= dd / fi;
            p /= fi - xmu;
            q /= fi + xmu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        rkmu = sum;
        rk1 = sum1 * xi2;
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut delh = d;
        let mut h = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - xmu2;
        let mut c = a1;
        let mut q = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..=MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        rkmu = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        rk1 = rkmu * (xmu + x + 0.5 - h) * xi;
    }
    for i in 1..=nl {
        let next = (xmu + i as f64) * xi2 * rk1 + rkmu;
        rkmu = rk1;
        rk1 = next;
    }
    rkmu
}

/// Matérn correlation (2^{1-κ}/Γ(κ)) t^κ K_κ(t) with t = d/φ; equals 1 at d = 0.
pub fn matern(d: f64, kappa: f64, phi: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let t = d / phi;
    let k = bessel_k(kappa, t);
    if k == 0.0 {
        return 0.0;
    }
    let log_val = (1.0 - kappa) * std::f64::consts::LN_2 - statrs::function::gamma::ln_gamma(kappa)
        + kappa * t.ln()
        + k.ln();
    log_val.exp().clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// K_ν(x) = ∫_0^∞ exp(-x cosh t) cosh(ν t) dt by the trapezoid rule,
    /// which converges geometrically for this analytic, rapidly decaying integrand.
    fn k_by_quadrature(nu: f64, x: f64) -> f64 {
        let h: f64 = 1e-3;
        let mut total = 0.5 * (-x).exp();
        let mut t: f64 = h;
        loop {
            let f = (-x * t.cosh()).exp() * (nu * t).cosh();
            total += f;
            if f < 1e-30 && t > 1.0 {
                break;
            }
            t += h;
        }
        total * h
    }

    #[test]
    fn half_integer_closed_forms() {
        for &x in &[0.01, 0.3, 1.0, 1.99, 2.0, 3.7, 12.0, 40.0] {
            let base = (PI / (2.0 * x)).sqrt() * (-x).exp();
            let k05 = bessel_k(0.5, x);
            assert!((k05 / base - 1.0).abs() < 1e-12, "x={x}");
            let k15 = bessel_k(1.5, x);
            assert!((k15 / (base * (1.0 + 1.0 / x)) - 1.0).abs() < 1e-12, "x={x}");
            let k25 = bessel_k(2.5, x);
            assert!((k25 / (base * (1.0 + 3.0 / x + 3.0 / (x * x))) - 1.0).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn tabulated_integer_orders() {
        assert!((bessel_k(0.0, 1.0) - 0.421_024_438_240_708_3).abs() < 1e-13);
        assert!((bessel_k(1.0, 1.0) - 0.601_907_230_197_234_6).abs() < 1e-13);
        assert!((bessel_k(0.0, 2.0) - 0.113_893_872_749_533_4).abs() < 1e-13);
        assert!((bessel_k(1.0, 2.0) - 0.139_865_881_816_522_4).abs() < 1e-13);
    }

    #[test]
    fn agrees_with_integral_representation() {
        for &nu in &[0.011, 0.2, 0.37, 0.5, 0.93, 1.7, 3.2, 6.5, 10.0] {
            for &x in &[0.05, 0.6, 1.5, 2.5, 7.0] {
                let a = bessel_k(nu, x);
                let b = k_by_quadrature(nu, x);
                assert!((a / b - 1.0).abs() < 1e-9, "nu={nu} x={x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn matern_reduces_to_exponential_at_half() {
        let phi = 1234.5;
        assert_eq!(matern(0.0, 0.5, phi), 1.0);
        assert!((matern(phi, 0.5, phi) - (-1.0f64).exp()).abs() < 1e-10);
        for &d in &[1.0, 500.0, 5000.0] {
            assert!((matern(d, 0.5, phi) - (-d / phi).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn matern_is_a_decreasing_correlation() {
        for &kappa in &[0.02, 0.2, 1.0, 2.5, 9.5] {
            let mut prev = 1.0;
            for step in 1..200 {
                let v = matern(step as f64 * 0.05, kappa, 1.0);
                assert!((0.0..=1.0).contains(&v));
                assert!(v <= prev + 1e-12, "kappa={kappa}");
                prev = v;
            }
            assert!(matern(1e-9, kappa, 1.0) > 0.99 || kappa < 0.1);
        }
    }
}
