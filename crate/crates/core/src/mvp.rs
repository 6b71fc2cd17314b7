//! Multivariate probit likelihood of the zero/positive pattern.
//!
//! With `Σ = I + C Cᵀ`, the orthant probability of a sign pattern equals
//! `E_w[Π_j Φ(±w_j)]` for `w ~ N(μ, C Cᵀ)`. The estimator draws
//! `w⁽ᵏ⁾ = μ + C v⁽ᵏ⁾` and scores each coordinate with `log Φ(w)` for
//! positive targets and `log(1 - Φ(w))` for zeros, so no sign matrix is
//! ever formed.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DhnError, Result};
use crate::probcore::{softplus, softplus_inverse, std_normal_cdf, CholeskyFactor, RngStream};

/// Added to the softplus-mapped diagonal of every covariance factor.
pub const DIAG_FLOOR: f64 = 1e-4;

/// Diagonal value of a freshly initialised factor.
pub const INIT_DIAG: f64 = 0.05;

/// Off-diagonal initialisation scale.
pub const INIT_OFF_DIAG_SD: f64 = 0.01;

/// Which targets are positive in one label row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryPattern(Vec<bool>);

impl BinaryPattern {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// `y'_j = 1` iff `y_j > 0`.
    pub fn from_labels(labels: &[f64]) -> Self {
        Self(labels.iter().map(|&y| y > 0.0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn flipped(&self) -> Self {
        Self(self.0.iter().map(|b| !b).collect())
    }

    pub fn positives(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }
}

/// Free parameters of a covariance `Σ = I + C Cᵀ`.
///
/// `raw` is L x L; entries above the diagonal are ignored, entries below
/// are used as-is and the diagonal goes through `softplus(·) + 1e-4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParam {
    raw: Array2<f64>,
}

impl CovarianceParam {
    pub fn from_raw(raw: Array2<f64>) -> Result<Self> {
        if raw.nrows() != raw.ncols() {
            return Err(DhnError::Config(format!(
                "covariance parameter must be square, got {:?}",
                raw.dim()
            )));
        }
        Ok(Self { raw })
    }

    /// Random start near independence.
    pub fn initial(dim: usize, rng: &mut RngStream) -> Self {
        let diag = softplus_inverse(INIT_DIAG - DIAG_FLOOR);
        let mut raw = Array2::<f64>::zeros((dim, dim));
        for i in 0..dim {
            raw[[i, i]] = diag;
            for j in 0..i {
                raw[[i, j]] = INIT_OFF_DIAG_SD * rng.standard_normal();
            }
        }
        Self { raw }
    }

    /// Inverse of [`CovarianceParam::factor`]: recovers raw values from a
    /// lower-triangular factor whose diagonal exceeds the floor.
    pub fn from_factor(factor: &Array2<f64>) -> Result<Self> {
        let n = factor.nrows();
        if factor.ncols() != n {
            return Err(DhnError::Config("factor must be square".into()));
        }
        let mut raw = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let d = factor[[i, i]] - DIAG_FLOOR;
            if !(d > 0.0) {
                return Err(DhnError::Config(format!(
                    "factor diagonal entry {i} must exceed {DIAG_FLOOR}"
                )));
            }
            raw[[i, i]] = softplus_inverse(d);
            for j in 0..n {
                if j < i {
                    raw[[i, j]] = factor[[i, j]];
                } else if j > i && factor[[i, j]] != 0.0 {
                    return Err(DhnError::Config("factor must be lower triangular".into()));
                }
            }
        }
        Ok(Self { raw })
    }

    pub fn dim(&self) -> usize {
        self.raw.nrows()
    }

    pub fn raw(&self) -> &Array2<f64> {
        &self.raw
    }

    /// The lower-triangular factor C.
    pub fn factor(&self) -> Array2<f64> {
        factor_from_raw(&self.raw)
    }

    pub fn sigma(&self) -> Array2<f64> {
        let c = self.factor();
        c.dot(&c.t()) + Array2::<f64>::eye(self.dim())
    }

    /// `(Σ, C)` where C is returned as the Cholesky factor of `Σ - I`.
    pub fn sigma_from_factor(&self) -> (Array2<f64>, CholeskyFactor) {
        let c = self.factor();
        let sigma = c.dot(&c.t()) + Array2::<f64>::eye(self.dim());
        let chol = CholeskyFactor::from_lower(c).expect("floored diagonal is positive");
        (sigma, chol)
    }
}

pub fn factor_from_raw(raw: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(raw.dim(), |(i, j)| match i.cmp(&j) {
        std::cmp::Ordering::Greater => raw[[i, j]],
        std::cmp::Ordering::Equal => softplus(raw[[i, i]]) + DIAG_FLOOR,
        std::cmp::Ordering::Less => 0.0,
    })
}

/// Records `C` from its raw parameter node.
pub fn factor_on_tape(tape: &mut Tape, raw: Var) -> Var {
    let (n, _) = tape.shape(raw);
    let strict_lower = Array2::from_shape_fn((n, n), |(i, j)| if i > j { 1.0 } else { 0.0 });
    let eye = Array2::<f64>::eye(n);
    let lower_mask = tape.constant(strict_lower);
    let eye_mask = tape.constant(eye.clone());
    let floor = tape.constant(eye * DIAG_FLOOR);
    let off = tape.mul(raw, lower_mask);
    let diag = tape.softplus(raw);
    let diag = tape.mul(diag, eye_mask);
    let c = tape.add(off, diag);
    tape.add(c, floor)
}

/// Records `Σ = I + C Cᵀ`.
pub fn sigma_on_tape(tape: &mut Tape, factor: Var) -> Var {
    let (n, _) = tape.shape(factor);
    let cct = tape.matmul_t(factor, factor);
    let eye = tape.constant(Array2::eye(n));
    tape.add(cct, eye)
}

/// Draws `mean_i + C v` for `k` noise rows per batch row: the result has
/// `rows * k` rows, row `i*k + s` using noise row `i*k + s`.
pub fn reparameterized_draws(tape: &mut Tape, mean: Var, factor: Var, noise: &Array2<f64>) -> Var {
    let (rows, l) = tape.shape(mean);
    assert_eq!(noise.ncols(), l, "noise width");
    assert_eq!(
        noise.nrows() % rows.max(1),
        0,
        "noise rows must be a multiple of batch rows"
    );
    let k = noise.nrows() / rows;
    let centre = tape.repeat_rows(mean, k);
    let v = tape.constant(noise.clone());
    let spread = tape.matmul_t(v, factor);
    tape.add(centre, spread)
}

/// Log-likelihood estimate together with the sample count behind it.
#[derive(Debug, Clone, Copy)]
pub struct MvpLikelihoodEstimate {
    pub log_likelihood: Var,
    pub samples: usize,
}

/// Batched estimator with caller-supplied noise.
///
/// `mean` is (B x L), `factor` the L x L node for C, `noise` holds
/// `B * K` standard-normal rows grouped by batch row. Returns a (B x 1)
/// node of per-row log-likelihood estimates.
pub fn mvp_log_likelihood_with_noise(
    tape: &mut Tape,
    mean: Var,
    factor: Var,
    patterns: &[BinaryPattern],
    noise: &Array2<f64>,
) -> Result<Var> {
    let (rows, l) = tape.shape(mean);
    if patterns.len() != rows || patterns.iter().any(|p| p.len() != l) {
        return Err(DhnError::Config(format!(
            "expected {rows} binary patterns of length {l}"
        )));
    }
    if rows == 0 || noise.nrows() % rows != 0 || noise.nrows() == 0 {
        return Err(DhnError::Config(
            "noise must hold K >= 1 rows per batch row".into(),
        ));
    }
    let k = noise.nrows() / rows;
    let w = reparameterized_draws(tape, mean, factor, noise);
    let indicator = Array2::from_shape_fn((rows * k, l), |(r, j)| {
        if patterns[r / k].bits()[j] {
            1.0
        } else {
            0.0
        }
    });
    let per_coord = tape
        .signed_log_norm_cdf(w, indicator)
        .map_err(|e| match e {
            DhnError::Numerical(msg) => DhnError::Numerical(format!("probit head diverged: {msg}")),
            other => other,
        })?;
    let per_sample = tape.row_sum(per_coord);
    let grouped = tape.reshape(per_sample, rows, k);
    Ok(tape.log_mean_exp_rows(grouped))
}

/// Batched estimator drawing `k` fresh noise rows per batch row from `rng`.
pub fn mvp_log_likelihood(
    tape: &mut Tape,
    mean: Var,
    factor: Var,
    patterns: &[BinaryPattern],
    k: usize,
    rng: &mut RngStream,
) -> Result<MvpLikelihoodEstimate> {
    if k == 0 {
        return Err(DhnError::Config("sample count K must be at least 1".into()));
    }
    let (rows, l) = tape.shape(mean);
    let noise = rng.normal_matrix(rows * k, l);
    let log_likelihood = mvp_log_likelihood_with_noise(tape, mean, factor, patterns, &noise)?;
    Ok(MvpLikelihoodEstimate {
        log_likelihood,
        samples: k,
    })
}

/// Marginal positive probabilities `Φ(μ_j / √Σ_jj)`.
pub fn positive_probabilities(mean: &[f64], sigma: &Array2<f64>) -> Vec<f64> {
    mean.iter()
        .enumerate()
        .map(|(j, m)| std_normal_cdf(m / sigma[[j, j]].sqrt()))
        .collect()
}
