//! Probability primitives: normal CDF/PDF in the log domain, Cholesky
//! factorisation, seeded sampling and log-sum-exp.

mod cholesky;
mod normal;
mod rng;

#[cfg(any(test, feature = "oracles"))]
pub mod oracle;

pub use cholesky::{cholesky, CholeskyFactor};
pub(crate) use normal::log_std_normal_cdf_unchecked;
pub use normal::{
    inverse_mills_ratio, log_factorial, log_std_normal_cdf, log_std_normal_pdf, log_sum_exp_mean,
    sigmoid, softplus, softplus_inverse, std_normal_cdf, std_normal_pdf, LN_SQRT_2PI,
    LOG_CDF_DOMAIN,
};
pub use rng::RngStream;

use ndarray::Array2;

use crate::error::{DhnError, Result};

/// Draws `k` rows of `mean + L v` with `v ~ N(0, I)`.
pub fn sample_mvn(
    mean: &[f64],
    factor: &CholeskyFactor,
    rng: &mut RngStream,
    k: usize,
) -> Result<Array2<f64>> {
    let n = mean.len();
    if factor.dim() != n {
        return Err(DhnError::Config(format!(
            "mean has length {n} but factor is {}x{}",
            factor.dim(),
            factor.dim()
        )));
    }
    let noise = rng.normal_matrix(k, n);
    let mut out = noise.dot(&factor.lower().t());
    for mut row in out.rows_mut() {
        for (v, m) in row.iter_mut().zip(mean) {
            *v += m;
        }
    }
    Ok(out)
}
