//! Location-zero skew-normal law SN(0, ω, ψ) and the normal tail helpers it needs.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub fn delta(psi: f64) -> f64 {
    psi / (1.0 + psi * psi).sqrt()
}

pub fn log_phi(x: f64) -> f64 {
    -0.5 * (LN_2PI + x * x)
}

/// log Φ(x), accurate deep into the lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > 5.0 {
        // Φ(x) = 1 − Φ(−x); ln_1p keeps precision
        (-0.5 * erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else if x > -30.0 {
        (0.5 * erfc(-x * FRAC_1_SQRT_2)).ln()
    } else {
        // Φ(x) ≈ φ(x)/|x| · (1 − 1/x² + 3/x⁴ − 15/x⁶)
        let z = 1.0 / (x * x);
        log_phi(x) - (-x).ln() + (1.0 - z + 3.0 * z * z - 15.0 * z * z * z).ln()
    }
}

/// φ(x)/Φ(x).
pub fn inv_mills(x: f64) -> f64 {
    (log_phi(x) - log_norm_cdf(x)).exp()
}

pub fn mean(omega: f64, psi: f64) -> f64 {
    omega * delta(psi) * (2.0 / std::f64::consts::PI).sqrt()
}

pub fn variance(omega: f64, psi: f64) -> f64 {
    let d = delta(psi);
    omega * omega * (1.0 - 2.0 * d * d / std::f64::consts::PI)
}

pub fn sd(omega: f64, psi: f64) -> f64 {
    variance(omega, psi).sqrt()
}

pub fn log_density(e: f64, omega: f64, psi: f64) -> Result<f64> {
    if !(omega > 0.0) {
        return Err(Error::Domain(format!("skew-normal scale must be positive, got {omega}")));
    }
    Ok(log_density_unchecked(e, omega, psi))
}

#[inline]
pub fn log_density_unchecked(e: f64, omega: f64, psi: f64) -> f64 {
    let z = e / omega;
    std::f64::consts::LN_2 - omega.ln() + log_phi(z) + log_norm_cdf(psi * z)
}

pub fn draw<R: Rng + ?Sized>(omega: f64, psi: f64, rng: &mut R) -> Result<f64> {
    if !(omega > 0.0) {
        return Err(Error::Domain(format!("skew-normal scale must be positive, got {omega}")));
    }
    Ok(draw_unchecked(omega, psi, rng))
}

#[inline]
pub fn draw_unchecked<R: Rng + ?Sized>(omega: f64, psi: f64, rng: &mut R) -> f64 {
    let d = delta(psi);
    let z0: f64 = rng.sample(StandardNormal);
    let z1: f64 = rng.sample(StandardNormal);
    omega * (d * z0.abs() + (1.0 - d * d).sqrt() * z1)
}

/// Standard normal truncated to `(lower, ∞)`.
pub fn std_normal_above<R: Rng + ?Sized>(lower: f64, rng: &mut R) -> f64 {
    if lower <= 0.45 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z > lower {
                return z;
            }
        }
    }
    // exponential proposal with the optimal rate
    let lam = 0.5 * (lower + (lower * lower + 4.0).sqrt());
    let exp = Exp::new(lam).expect("positive rate");
    loop {
        let x = lower + exp.sample(rng);
        let u: f64 = rng.random();
        if u <= (-0.5 * (x - lam) * (x - lam)).exp() {
            return x;
        }
    }
}

/// N(m, s²) truncated to `(0, ∞)`.
pub fn normal_positive<R: Rng + ?Sized>(m: f64, s: f64, rng: &mut R) -> f64 {
    m + s * std_normal_above(-m / s, rng)
}
