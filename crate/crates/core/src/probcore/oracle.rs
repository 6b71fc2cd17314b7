//! Brute-force reference computations for tests.
//!
//! Everything here goes through deterministic quadrature or dense linear
//! algebra and shares no code path with the Monte-Carlo estimators it is
//! used to check.

use ndarray::Array2;

use super::{std_normal_cdf, std_normal_pdf};
use crate::error::{DhnError, Result};

const SIMPSON_INTERVALS: usize = 600;
const SPAN_SIGMAS: f64 = 10.0;

fn simpson(lo: f64, hi: f64, n: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n };
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// P(uᵢ ≥ 0 ∀i) for u ~ N(m, s), by sequential conditioning on the first
/// coordinate and nested Simpson integration.
fn positive_orthant(m: &[f64], s: &Array2<f64>) -> f64 {
    let d = m.len();
    let sd = s[[0, 0]].sqrt();
    if d == 1 {
        return std_normal_cdf(m[0] / sd);
    }
    let hi = m[0] + SPAN_SIGMAS * sd;
    if hi <= 0.0 {
        return 0.0;
    }
    let lo = (m[0] - SPAN_SIGMAS * sd).max(0.0);
    let mut cond_cov = Array2::<f64>::zeros((d - 1, d - 1));
    for i in 1..d {
        for j in 1..d {
            cond_cov[[i - 1, j - 1]] = s[[i, j]] - s[[i, 0]] * s[[0, j]] / s[[0, 0]];
        }
    }
    let slopes: Vec<f64> = (1..d).map(|i| s[[i, 0]] / s[[0, 0]]).collect();
    simpson(lo, hi, SIMPSON_INTERVALS, |u| {
        let cond_mean: Vec<f64> = (1..d).map(|i| m[i] + slopes[i - 1] * (u - m[0])).collect();
        std_normal_pdf((u - m[0]) / sd) / sd * positive_orthant(&cond_mean, &cond_cov)
    })
}

/// Probability that `signs[j] * r[j] >= 0` for every j, `r ~ N(mean, cov)`.
pub fn orthant_probability(mean: &[f64], cov: &Array2<f64>, signs: &[f64]) -> Result<f64> {
    let d = mean.len();
    if d == 0 || d > 3 {
        return Err(DhnError::Usage(format!(
            "orthant oracle supports dimensions 1..=3, got {d}"
        )));
    }
    if cov.dim() != (d, d) || signs.len() != d {
        return Err(DhnError::Config("orthant oracle dimension mismatch".into()));
    }
    let m: Vec<f64> = mean.iter().zip(signs).map(|(a, s)| a * s).collect();
    let s = Array2::from_shape_fn((d, d), |(i, j)| signs[i] * signs[j] * cov[[i, j]]);
    Ok(positive_orthant(&m, &s))
}

/// ∫ Poisson(y; eˢ) N(s; mean, var) ds.
pub fn poisson_lognormal_quadrature(y: u64, mean: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let mut log_fact = 0.0;
    for i in 2..=y {
        log_fact += (i as f64).ln();
    }
    simpson(mean - 12.0 * sd, mean + 12.0 * sd, 20_000, |s| {
        let log_pmf = y as f64 * s - s.exp() - log_fact;
        log_pmf.exp() * std_normal_pdf((s - mean) / sd) / sd
    })
}

/// Gauss-Jordan inverse and determinant with partial pivoting.
pub fn dense_inverse_and_det(a: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = a.nrows();
    let mut work = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| work[[i, col]].abs().total_cmp(&work[[j, col]].abs()))
            .unwrap();
        if pivot != col {
            for k in 0..n {
                work.swap([pivot, k], [col, k]);
                inv.swap([pivot, k], [col, k]);
            }
            det = -det;
        }
        let p = work[[col, col]];
        det *= p;
        for k in 0..n {
            work[[col, k]] /= p;
            inv[[col, k]] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = work[[r, col]];
                for k in 0..n {
                    work[[r, k]] -= f * work[[col, k]];
                    inv[[r, k]] -= f * inv[[col, k]];
                }
            }
        }
    }
    (inv, det)
}

/// Multivariate normal log-density through an explicit inverse and
/// determinant.
pub fn dense_normal_log_density(x: &[f64], mean: &[f64], cov: &Array2<f64>) -> f64 {
    let (inv, det) = dense_inverse_and_det(cov);
    let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut quad = 0.0;
    for i in 0..r.len() {
        for j in 0..r.len() {
            quad += r[i] * inv[[i, j]] * r[j];
        }
    }
    -0.5 * (r.len() as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad)
}

/// Central finite-difference derivative.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// |a - b| / max(|a|, |b|, floor).
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn independent_quadrant() {
        let p = orthant_probability(&[0.0, 0.0], &Array2::eye(2), &[1.0, 1.0]).unwrap();
        assert!((p - 0.25).abs() < 1e-6);
    }

    #[test]
    fn correlated_quadrant_closed_form() {
        let cov = array![[1.0, 0.5], [0.5, 1.0]];
        let p = orthant_probability(&[0.0, 0.0], &cov, &[1.0, 1.0]).unwrap();
        let exact = 0.25 + 0.5f64.asin() / (2.0 * std::f64::consts::PI);
        assert!((p - exact).abs() < 1e-6);
        assert!((p - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn univariate_reduction() {
        let p = orthant_probability(&[1.0], &array![[1.0]], &[1.0]).unwrap();
        assert!((p - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn trivariate_independent_factorises() {
        let mean = [0.3, -0.7, 1.1];
        let cov = Array2::from_diag(&ndarray::arr1(&[1.0, 2.0, 0.5]));
        let signs = [1.0, -1.0, 1.0];
        let p = orthant_probability(&mean, &cov, &signs).unwrap();
        let exact = std_normal_cdf(0.3)
            * std_normal_cdf(0.7 / 2f64.sqrt())
            * std_normal_cdf(1.1 / 0.5f64.sqrt());
        assert!((p - exact).abs() < 1e-6, "{p} vs {exact}");
    }

    #[test]
    fn too_many_dimensions() {
        assert!(orthant_probability(&[0.0; 4], &Array2::eye(4), &[1.0; 4]).is_err());
    }

    #[test]
    fn quadrature_degenerate_variance_is_poisson() {
        // tiny variance → Poisson(2; 1)
        let p = poisson_lognormal_quadrature(2, 0.0, 1e-8);
        assert!((p - (-1.0f64).exp() / 2.0).abs() < 1e-6);
    }

    #[test]
    fn dense_density_standard() {
        let v = dense_normal_log_density(&[0.0], &[0.0], &array![[1.0]]);
        assert!((v + 0.918_938_533_204_672_8).abs() < 1e-14);
    }
}
