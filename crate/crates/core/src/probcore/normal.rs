//! Univariate standard normal distribution functions.

use crate::error::{DhnError, Result};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Largest |x| accepted by [`log_std_normal_cdf`]. Anything beyond this is
/// treated as a sign that optimisation has run away.
pub const LOG_CDF_DOMAIN: f64 = 40.0;

/// Below this point `log Φ` switches to the asymptotic tail expansion.
const TAIL_SWITCH: f64 = -10.0;

#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

#[inline]
pub fn log_std_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Φ(x), evaluated through the complementary error function so that the
/// lower tail keeps full relative precision.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// log Φ(x) on `[-40, 40]`.
///
/// Uses `erfc` directly in the body, `log1p` on the upper side and the
/// asymptotic Mills-ratio series for x < -10, so the result is finite over
/// the whole domain.
pub fn log_std_normal_cdf(x: f64) -> Result<f64> {
    if !x.is_finite() || x.abs() > LOG_CDF_DOMAIN {
        return Err(DhnError::Numerical(format!(
            "log normal cdf argument {x} outside [-{LOG_CDF_DOMAIN}, {LOG_CDF_DOMAIN}]"
        )));
    }
    Ok(log_std_normal_cdf_unchecked(x))
}

pub(crate) fn log_std_normal_cdf_unchecked(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        log_cdf_lower_tail(x)
    } else if x < 0.0 {
        std_normal_cdf(x).ln()
    } else {
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    }
}

/// log Φ(x) = -x²/2 - log(-x) - log√(2π) + log Σ (-1)ⁿ (2n-1)!! / x²ⁿ
fn log_cdf_lower_tail(x: f64) -> f64 {
    let inv_x2 = 1.0 / (x * x);
    let mut term = 1.0;
    let mut series = 1.0;
    for n in 1..60 {
        let next = -term * (2 * n - 1) as f64 * inv_x2;
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        series += term;
        if term.abs() < 1e-17 {
            break;
        }
    }
    -0.5 * x * x - (-x).ln() - LN_SQRT_2PI + series.ln()
}

/// φ(x) / Φ(x), the derivative of log Φ, computed in the log domain.
#[inline]
pub fn inverse_mills_ratio(x: f64) -> f64 {
    (log_std_normal_pdf(x) - log_std_normal_cdf_unchecked(x)).exp()
}

/// softplus(x) = log(1 + eˣ) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log((1/k) Σ exp(vᵢ)) with a max shift. Exact for a single value.
pub fn log_sum_exp_mean(values: &[f64]) -> f64 {
    assert!(
        !values.is_empty(),
        "log_sum_exp_mean needs at least one value"
    );
    if values.len() == 1 {
        return values[0];
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

/// log Γ(n + 1).
pub fn log_factorial(n: u64) -> f64 {
    if n < 2 {
        0.0
    } else {
        libm::lgamma(n as f64 + 1.0)
    }
}
