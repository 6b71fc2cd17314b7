//! Likelihoods for the positive part of a label row.
//!
//! Continuous data: `log y⁺ ~ N(μ'⁺, Σ'⁺)`, scored as the density of
//! `log y⁺` (the change-of-variables Jacobian is constant in the
//! parameters and left out). Count data: `y⁺_j ~ Poisson(λ_j)` with
//! `log λ ~ N(μ', Σ')`, integrated by Monte Carlo.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{DhnError, Result};
use crate::probcore::RngStream;

pub use crate::probcore::log_factorial;

/// Largest log-rate accepted before `exp` is considered to have blown up.
pub const MAX_LOG_RATE: f64 = 700.0;

/// Target positions scored by an abundance head, with their labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PositiveSubset {
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl PositiveSubset {
    /// Positions with `y_j > 0`.
    pub fn from_labels(labels: &[f64]) -> Self {
        let (indices, values) = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y > 0.0)
            .map(|(j, &y)| (j, y))
            .unzip();
        Self { indices, values }
    }

    /// Every position, zeros included. Used when the probit gate is
    /// switched off and the abundance head alone must explain the row.
    pub fn all_targets(labels: &[f64]) -> Self {
        Self {
            indices: (0..labels.len()).collect(),
            values: labels.to_vec(),
        }
    }

    pub fn new(indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(DhnError::Config(
                "subset indices and values differ in length".into(),
            ));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DhnError::Config(
                "subset indices must be strictly increasing".into(),
            ));
        }
        Ok(Self { indices, values })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_width(subsets: &[PositiveSubset], rows: usize, l: usize) -> Result<()> {
    if subsets.len() != rows {
        return Err(DhnError::Config(format!(
            "{} subsets supplied for {rows} rows",
            subsets.len()
        )));
    }
    if let Some(bad) = subsets
        .iter()
        .find(|s| s.indices.last().is_some_and(|&j| j >= l))
    {
        return Err(DhnError::Config(format!(
            "subset index {:?} outside [0, {l})",
            bad.indices.last()
        )));
    }
    Ok(())
}

/// Per-row log-density of `log y⁺` under `N(μ'⁺, Σ'⁺)`.
///
/// `mean` is (B x L), `sigma` the L x L node for Σ'. Rows with an empty
/// subset contribute 0.
pub fn mlnd_log_density(
    tape: &mut Tape,
    mean: Var,
    sigma: Var,
    subsets: &[PositiveSubset],
) -> Result<Var> {
    let (rows, l) = tape.shape(mean);
    check_width(subsets, rows, l)?;
    let mut obs = Array2::<f64>::zeros((rows, l));
    for (i, s) in subsets.iter().enumerate() {
        for (&j, &y) in s.indices.iter().zip(&s.values) {
            if !(y > 0.0 && y.is_finite()) {
                return Err(DhnError::Data(format!(
                    "log-normal head needs positive values, got {y} at row {i}, target {j}"
                )));
            }
            obs[[i, j]] = y.ln();
        }
    }
    let index_sets: Vec<Vec<usize>> = subsets.iter().map(|s| s.indices.clone()).collect();
    tape.subset_normal_log_density(mean, sigma, &obs, &index_sets)
        .map_err(|e| DhnError::Numerical(format!("internal: {e}")))
}

/// Monte-Carlo Poisson-log-normal log-likelihood from sampled log-rates.
///
/// `log_rates` holds `B * K` rows of L log-rates grouped by batch row.
/// Returns (B x 1) estimates of
/// `log (1/K) Σ_k exp Σ_{j∈S} [y_j log λ_j - λ_j - log y_j!]`.
pub fn poisson_lognormal_from_log_rates(
    tape: &mut Tape,
    log_rates: Var,
    subsets: &[PositiveSubset],
) -> Result<Var> {
    let rows = subsets.len();
    let (total, l) = tape.shape(log_rates);
    if rows == 0 || total % rows != 0 {
        return Err(DhnError::Config(
            "log-rate rows must be a nonzero multiple of the subset count".into(),
        ));
    }
    check_width(subsets, rows, l)?;
    let k = total / rows;
    let mut counts = Array2::<f64>::zeros((rows, l));
    let mut mask = Array2::<f64>::zeros((rows, l));
    let mut log_fact = Array2::<f64>::zeros((rows, l));
    for (i, s) in subsets.iter().enumerate() {
        for (&j, &y) in s.indices.iter().zip(&s.values) {
            if !(y >= 0.0 && y.fract() == 0.0 && y.is_finite()) {
                return Err(DhnError::Data(format!(
                    "count head needs nonnegative integers, got {y} at row {i}, target {j}"
                )));
            }
            counts[[i, j]] = y;
            mask[[i, j]] = 1.0;
            log_fact[[i, j]] = log_factorial(y as u64);
        }
    }
    let rates = tape.value(log_rates);
    for r in 0..total {
        for j in 0..l {
            if mask[[r / k, j]] > 0.0 && !(rates[[r, j]] <= MAX_LOG_RATE) {
                return Err(DhnError::Numerical(format!(
                    "count head diverged: log-rate {} exceeds {MAX_LOG_RATE} for row {}, target {j}",
                    rates[[r, j]],
                    r / k
                )));
            }
        }
    }
    let expand = |m: &Array2<f64>| Array2::from_shape_fn((total, l), |(r, j)| m[[r / k, j]]);
    let counts = tape.constant(expand(&counts));
    let mask = tape.constant(expand(&mask));
    let log_fact = tape.constant(expand(&log_fact));
    let weighted = tape.mul(log_rates, counts);
    let rate = tape.exp(log_rates);
    let rate = tape.mul(rate, mask);
    let terms = tape.sub(weighted, rate);
    let terms = tape.sub(terms, log_fact);
    let per_sample = tape.row_sum(terms);
    let grouped = tape.reshape(per_sample, rows, k);
    Ok(tape.log_mean_exp_rows(grouped))
}

/// Count-head estimator with caller-supplied noise.
///
/// With `Σ' = I + C'C'ᵀ`, `log λ = μ' + z + C'v` for independent standard
/// normal `z` (`identity_noise`) and `v` (`factor_noise`) has exactly the
/// law `N(μ', Σ')`. Both noise matrices hold `B * K` rows.
pub fn poisson_lognormal_log_likelihood_with_noise(
    tape: &mut Tape,
    mean: Var,
    factor: Var,
    subsets: &[PositiveSubset],
    identity_noise: &Array2<f64>,
    factor_noise: &Array2<f64>,
) -> Result<Var> {
    let (rows, l) = tape.shape(mean);
    if identity_noise.dim() != factor_noise.dim()
        || identity_noise.ncols() != l
        || rows == 0
        || identity_noise.nrows() % rows != 0
        || identity_noise.nrows() == 0
    {
        return Err(DhnError::Config(
            "count head noise must hold K >= 1 rows of width L per batch row".into(),
        ));
    }
    let spread = crate::mvp::reparameterized_draws(tape, mean, factor, factor_noise);
    let z = tape.constant(identity_noise.clone());
    let log_rates = tape.add(spread, z);
    poisson_lognormal_from_log_rates(tape, log_rates, subsets)
}

/// Count-head estimator drawing `k` samples per row from `rng`.
pub fn poisson_lognormal_log_likelihood(
    tape: &mut Tape,
    mean: Var,
    factor: Var,
    subsets: &[PositiveSubset],
    k: usize,
    rng: &mut RngStream,
) -> Result<Var> {
    if k == 0 {
        return Err(DhnError::Config("sample count K must be at least 1".into()));
    }
    let (rows, l) = tape.shape(mean);
    let identity_noise = rng.normal_matrix(rows * k, l);
    let factor_noise = rng.normal_matrix(rows * k, l);
    poisson_lognormal_log_likelihood_with_noise(
        tape,
        mean,
        factor,
        subsets,
        &identity_noise,
        &factor_noise,
    )
}
