//! The hurdle network: shared encoder, probit head, abundance head and the
//! covariance-coupling penalty, with training, prediction and persistence.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abundance::{
    mlnd_log_density, poisson_lognormal_log_likelihood_with_noise, PositiveSubset,
};
use crate::autodiff::{
    apply_stack, forward_stack, Activation, BoundParams, DenseLayer, OptimizerConfig,
    OptimizerState, ParamId, ParamStore, Tape, Var,
};
use crate::data::{batches, DataKind, Dataset, SplitIndex, Standardizer};
use crate::error::{DhnError, Result};
use crate::mvp::{
    factor_on_tape, mvp_log_likelihood_with_noise, sigma_on_tape, BinaryPattern, CovarianceParam,
};
use crate::probcore::{std_normal_cdf, RngStream};

pub const MODEL_FORMAT: &str = "dhn-model";
pub const MODEL_VERSION: u32 = 1;

/// Rows per tape. Fixed so results do not depend on the thread count.
pub const CHUNK_ROWS: usize = 32;

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VALIDATION: u64 = 3;
pub(crate) const STREAM_TEST: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Both heads read the raw features directly.
    NoEncoder,
    /// Only the abundance head is trained; predictions are ungated.
    MlndOnly,
    /// Σ and Σ' are learned without coupling.
    NoCovPenalty,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoEncoder => "no-encoder",
            Ablation::MlndOnly => "mlnd-only",
            Ablation::NoCovPenalty => "no-cov-penalty",
        })
    }
}

impl FromStr for Ablation {
    type Err = DhnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-encoder" => Ok(Ablation::NoEncoder),
            "mlnd-only" => Ok(Ablation::MlndOnly),
            "no-cov-penalty" => Ok(Ablation::NoCovPenalty),
            other => Err(DhnError::Usage(format!(
                "unknown ablation '{other}', expected full, no-encoder, mlnd-only or no-cov-penalty"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhnConfig {
    pub n_features: usize,
    pub n_targets: usize,
    pub kind: DataKind,
    /// Hidden widths of the encoder; empty exactly for the no-encoder ablation.
    pub encoder_dims: Vec<usize>,
    /// Width of the shared latent features.
    pub latent_dim: usize,
    pub head_hidden_dim: usize,
    pub k_train: usize,
    pub k_eval: usize,
    pub cov_penalty: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub ablation: Ablation,
    pub threads: usize,
}

impl DhnConfig {
    pub fn new(n_features: usize, n_targets: usize, kind: DataKind) -> Self {
        Self {
            n_features,
            n_targets,
            kind,
            encoder_dims: vec![512, 256],
            latent_dim: 256,
            head_hidden_dim: 256,
            k_train: 64,
            k_eval: 1024,
            cov_penalty: 1.0,
            epochs: 100,
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            ablation: Ablation::Full,
            threads: 1,
        }
    }

    /// Switches ablation and adjusts the fields it constrains: the encoder
    /// is cleared for `NoEncoder` and the penalty zeroed for `NoCovPenalty`.
    /// Leaving `NoCovPenalty` restores a penalty weight of 1 if it was 0.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        match ablation {
            Ablation::NoEncoder => self.encoder_dims.clear(),
            Ablation::NoCovPenalty => self.cov_penalty = 0.0,
            _ => {}
        }
        if ablation != Ablation::NoEncoder && self.encoder_dims.is_empty() {
            self.encoder_dims = vec![512, 256];
        }
        if ablation != Ablation::NoCovPenalty && self.cov_penalty == 0.0 {
            self.cov_penalty = 1.0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DhnError::Config(m));
        if self.n_features == 0 || self.n_targets == 0 {
            return bad("feature and target counts must be positive".into());
        }
        match (self.ablation, self.encoder_dims.is_empty()) {
            (Ablation::NoEncoder, false) => {
                return bad("the no-encoder ablation requires empty encoder dims".into())
            }
            (a, true) if a != Ablation::NoEncoder => {
                return bad(
                    "encoder dims must be nonempty unless the ablation is no-encoder".into(),
                )
            }
            _ => {}
        }
        if self.encoder_dims.contains(&0) || self.latent_dim == 0 || self.head_hidden_dim == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.k_train == 0 || self.k_eval == 0 {
            return bad("sample counts must be positive".into());
        }
        if !(self.cov_penalty >= 0.0 && self.cov_penalty.is_finite()) {
            return bad(format!(
                "penalty weight must be nonnegative, got {}",
                self.cov_penalty
            ));
        }
        if (self.cov_penalty == 0.0) != (self.ablation == Ablation::NoCovPenalty) {
            return bad("penalty weight is zero exactly for the no-cov-penalty ablation".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return bad("epochs, batch size and threads must be positive".into());
        }
        self.optimizer.validate()
    }

    /// Width of the features the two heads consume.
    pub fn head_input_dim(&self) -> usize {
        if self.ablation == Ablation::NoEncoder {
            self.n_features
        } else {
            self.latent_dim
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Standard-normal noise consumed by one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossNoise {
    /// `rows * K` rows for the probit head.
    pub probit: Array2<f64>,
    /// Identity and factor noise for the count head, `rows * K` rows each.
    pub count: Option<(Array2<f64>, Array2<f64>)>,
}

impl LossNoise {
    pub fn draw(kind: DataKind, rows: usize, l: usize, k: usize, stream: &mut RngStream) -> Self {
        let probit = stream.normal_matrix(rows * k, l);
        let count = (kind == DataKind::Count).then(|| {
            (
                stream.normal_matrix(rows * k, l),
                stream.normal_matrix(rows * k, l),
            )
        });
        Self { probit, count }
    }
}

/// Batch objective and its parts.
#[derive(Debug, Clone)]
pub struct LossEval {
    /// Mean negative log-likelihood over the batch rows.
    pub nll: f64,
    /// Weighted covariance penalty.
    pub penalty: f64,
    pub loss: f64,
    /// One gradient per parameter, empty when not requested.
    pub grads: Vec<Array2<f64>>,
}

/// Point predictions for a block of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Positive probabilities, rows x L.
    pub probabilities: Array2<f64>,
    /// Gated conditional means, rows x L.
    pub expected: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhnModel {
    config: DhnConfig,
    standardizer: Standardizer,
    params: ParamStore,
    encoder: Vec<DenseLayer>,
    probit_mlp: Vec<DenseLayer>,
    abundance_mlp: Vec<DenseLayer>,
    probit_cov: ParamId,
    abundance_cov: ParamId,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    n_features: usize,
    n_targets: usize,
    seed: u64,
    model: DhnModel,
}

fn mlp(
    store: &mut ParamStore,
    name: &str,
    input: usize,
    hidden: usize,
    output: usize,
    rng: &mut RngStream,
) -> Vec<DenseLayer> {
    vec![
        DenseLayer::new(
            store,
            &format!("{name}.0"),
            input,
            hidden,
            Activation::Relu,
            rng,
        ),
        DenseLayer::new(
            store,
            &format!("{name}.1"),
            hidden,
            output,
            Activation::Identity,
            rng,
        ),
    ]
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(CHUNK_ROWS)
        .map(|s| (s, (s + CHUNK_ROWS).min(n)))
        .collect()
}

fn run_chunks<T: Send>(
    n_chunks: usize,
    threads: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if threads <= 1 || n_chunks <= 1 {
        return (0..n_chunks).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| DhnError::Config(format!("cannot start worker threads: {e}")))?;
    pool.install(|| (0..n_chunks).into_par_iter().map(f).collect())
}

impl DhnModel {
    /// Fresh model with parameters drawn from the config seed. Both
    /// covariance parameters start from the same draw.
    pub fn new(config: DhnConfig, standardizer: Standardizer) -> Result<Self> {
        config.validate()?;
        if standardizer.mean.len() != config.n_features
            || standardizer.scale.len() != config.n_features
        {
            return Err(DhnError::Config(
                "standardizer width differs from feature count".into(),
            ));
        }
        let mut rng = RngStream::new(config.seed).derive(&[STREAM_INIT]);
        let mut store = ParamStore::new();
        let mut encoder = Vec::new();
        if config.ablation != Ablation::NoEncoder {
            let mut width = config.n_features;
            for (i, &h) in config.encoder_dims.iter().enumerate() {
                encoder.push(DenseLayer::new(
                    &mut store,
                    &format!("encoder.{i}"),
                    width,
                    h,
                    Activation::Relu,
                    &mut rng,
                ));
                width = h;
            }
            encoder.push(DenseLayer::new(
                &mut store,
                &format!("encoder.{}", config.encoder_dims.len()),
                width,
                config.latent_dim,
                Activation::Relu,
                &mut rng,
            ));
        }
        let input = config.head_input_dim();
        let probit_mlp = mlp(
            &mut store,
            "probit",
            input,
            config.head_hidden_dim,
            config.n_targets,
            &mut rng,
        );
        let abundance_mlp = mlp(
            &mut store,
            "abundance",
            input,
            config.head_hidden_dim,
            config.n_targets,
            &mut rng,
        );
        let cov = CovarianceParam::initial(config.n_targets, &mut rng);
        let probit_cov = store.add("probit.cov", cov.raw().clone());
        let abundance_cov = store.add("abundance.cov", cov.raw().clone());
        Ok(Self {
            config,
            standardizer,
            params: store,
            encoder,
            probit_mlp,
            abundance_mlp,
            probit_cov,
            abundance_cov,
        })
    }

    pub fn config(&self) -> &DhnConfig {
        &self.config
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Input width of the first layer of each head.
    pub fn head_input_width(&self) -> usize {
        self.probit_mlp[0].in_dim
    }

    pub fn probit_covariance(&self) -> CovarianceParam {
        CovarianceParam::from_raw(self.params.value(self.probit_cov).clone()).expect("square")
    }

    pub fn abundance_covariance(&self) -> CovarianceParam {
        CovarianceParam::from_raw(self.params.value(self.abundance_cov).clone()).expect("square")
    }

    pub fn probit_cov_id(&self) -> ParamId {
        self.probit_cov
    }

    pub fn abundance_cov_id(&self) -> ParamId {
        self.abundance_cov
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let layers = self
            .encoder
            .iter()
            .chain(&self.probit_mlp)
            .chain(&self.abundance_mlp);
        for layer in layers {
            layer.validate(&self.params)?;
        }
        let first_width = self
            .encoder
            .first()
            .map_or(self.probit_mlp[0].in_dim, |l| l.in_dim);
        if first_width != c.n_features {
            return Err(DhnError::Config(format!(
                "config declares {} features but the stored network takes {first_width}",
                c.n_features
            )));
        }
        if self.encoder.len()
            != if c.ablation == Ablation::NoEncoder {
                0
            } else {
                c.encoder_dims.len() + 1
            }
        {
            return Err(DhnError::Config(
                "stored encoder depth disagrees with config".into(),
            ));
        }
        for head in [&self.probit_mlp, &self.abundance_mlp] {
            if head.len() != 2
                || head[0].in_dim != c.head_input_dim()
                || head[1].out_dim != c.n_targets
            {
                return Err(DhnError::Config(format!(
                    "stored head shape disagrees with config (L = {})",
                    c.n_targets
                )));
            }
        }
        for id in [self.probit_cov, self.abundance_cov] {
            if self.params.value(id).dim() != (c.n_targets, c.n_targets) {
                return Err(DhnError::Config(format!(
                    "covariance parameter must be {0}x{0}",
                    c.n_targets
                )));
            }
        }
        if self.standardizer.mean.len() != c.n_features
            || self.standardizer.scale.len() != c.n_features
        {
            return Err(DhnError::Config(
                "standardizer width differs from feature count".into(),
            ));
        }
        if self
            .params
            .iter()
            .any(|(_, _, v)| v.iter().any(|x| !x.is_finite()))
        {
            return Err(DhnError::Config(
                "stored parameters contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Per-row negative log-likelihood (rows x 1) for standardised
    /// features `x` and labels `y`, using caller-supplied noise.
    pub fn row_nll(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: &Array2<f64>,
        y: &Array2<f64>,
        noise: &LossNoise,
    ) -> Result<Var> {
        let c = &self.config;
        if x.ncols() != c.n_features || y.ncols() != c.n_targets || x.nrows() != y.nrows() {
            return Err(DhnError::Config(format!(
                "batch is {}x{} features and {}x{} labels, model expects M = {} and L = {}",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols(),
                c.n_features,
                c.n_targets
            )));
        }
        if x.nrows() == 0 {
            return Err(DhnError::Usage("empty batch".into()));
        }
        let input = tape.constant(x.clone());
        let latent = forward_stack(&self.encoder, tape, bound, input)?;
        let abundance_mean = forward_stack(&self.abundance_mlp, tape, bound, latent)?;
        let abundance_factor = factor_on_tape(tape, bound.get(self.abundance_cov));
        let mlnd_only = c.ablation == Ablation::MlndOnly;
        let rows: Vec<_> = y.rows().into_iter().map(|r| r.to_vec()).collect();
        let head = match c.kind {
            DataKind::Continuous => {
                let subsets: Vec<_> = rows
                    .iter()
                    .map(|r| PositiveSubset::from_labels(r))
                    .collect();
                let sigma = sigma_on_tape(tape, abundance_factor);
                mlnd_log_density(tape, abundance_mean, sigma, &subsets)?
            }
            DataKind::Count => {
                let subsets: Vec<_> = rows
                    .iter()
                    .map(|r| {
                        if mlnd_only && r.iter().any(|v| *v > 0.0) {
                            PositiveSubset::all_targets(r)
                        } else {
                            PositiveSubset::from_labels(r)
                        }
                    })
                    .collect();
                let (identity, factor) = noise
                    .count
                    .as_ref()
                    .ok_or_else(|| DhnError::Usage("count head needs count noise".into()))?;
                poisson_lognormal_log_likelihood_with_noise(
                    tape,
                    abundance_mean,
                    abundance_factor,
                    &subsets,
                    identity,
                    factor,
                )?
            }
        };
        let total = if mlnd_only {
            head
        } else {
            let probit_mean = forward_stack(&self.probit_mlp, tape, bound, latent)?;
            let probit_factor = factor_on_tape(tape, bound.get(self.probit_cov));
            let patterns: Vec<_> = rows.iter().map(|r| BinaryPattern::from_labels(r)).collect();
            let mvp = mvp_log_likelihood_with_noise(
                tape,
                probit_mean,
                probit_factor,
                &patterns,
                &noise.probit,
            )?;
            tape.add(mvp, head)
        };
        Ok(tape.neg(total))
    }

    /// `λ Σ_ij |Σ_ij - Σ'_ij|` evaluated without a tape.
    pub fn penalty_value(&self) -> f64 {
        if self.config.cov_penalty == 0.0 {
            return 0.0;
        }
        let a = self.probit_covariance().sigma();
        let b = self.abundance_covariance().sigma();
        self.config.cov_penalty * (&a - &b).iter().map(|v| v.abs()).sum::<f64>()
    }

    fn penalty_with_grads(&self, grads: &mut [Array2<f64>]) -> Result<f64> {
        if self.config.cov_penalty == 0.0 {
            return Ok(0.0);
        }
        let mut tape = Tape::new();
        let a = tape.param(self.probit_cov, self.params.value(self.probit_cov).clone());
        let b = tape.param(
            self.abundance_cov,
            self.params.value(self.abundance_cov).clone(),
        );
        let fa = factor_on_tape(&mut tape, a);
        let fb = factor_on_tape(&mut tape, b);
        let sa = sigma_on_tape(&mut tape, fa);
        let sb = sigma_on_tape(&mut tape, fb);
        let d = tape.sub(sa, sb);
        let d = tape.abs(d);
        let s = tape.sum(d);
        let p = tape.scale(s, self.config.cov_penalty);
        let g = tape.backward(p)?;
        for (id, var) in [(self.probit_cov, a), (self.abundance_cov, b)] {
            if let Some(v) = g.get(var) {
                grads[id.0] += v;
            }
        }
        Ok(tape.scalar_value(p))
    }

    fn chunk_eval(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        rows: &[usize],
        noise: &LossNoise,
        weight: f64,
        want_grads: bool,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xb = x.select(Axis(0), rows);
        let yb = y.select(Axis(0), rows);
        let per_row = self.row_nll(&mut tape, &bound, &xb, &yb, noise)?;
        if let Some(pos) = tape.value(per_row).iter().position(|v| !v.is_finite()) {
            return Err(DhnError::Divergence(format!(
                "non-finite loss {} at row {}",
                tape.value(per_row)[[pos, 0]],
                rows[pos]
            )));
        }
        let sum = tape.sum(per_row);
        let scaled = tape.scale(sum, weight);
        let value = tape.scalar_value(sum);
        let grads = if want_grads {
            let g = tape.backward(scaled)?;
            self.params.collect_grads(&bound, &g)
        } else {
            Vec::new()
        };
        Ok((value, grads))
    }

    fn chunk_noise(&self, stream: &RngStream, chunk: usize, rows: usize, k: usize) -> LossNoise {
        let mut s = stream.derive(&[chunk as u64]);
        LossNoise::draw(self.config.kind, rows, self.config.n_targets, k, &mut s)
    }

    /// Batch objective over `rows` of standardised `x` and labels `y`.
    ///
    /// Rows are split into fixed chunks whose noise comes from
    /// `stream.derive(&[chunk])`, so for a given stream the result is the
    /// same for any thread count.
    pub fn loss(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        rows: &[usize],
        stream: &RngStream,
        want_grads: bool,
    ) -> Result<LossEval> {
        if rows.is_empty() {
            return Err(DhnError::Usage("empty batch".into()));
        }
        let ranges = chunk_ranges(rows.len());
        let weight = 1.0 / rows.len() as f64;
        let k = self.config.k_train;
        let parts = run_chunks(ranges.len(), self.config.threads, |c| {
            let (s, e) = ranges[c];
            let noise = self.chunk_noise(stream, c, e - s, k);
            self.chunk_eval(x, y, &rows[s..e], &noise, weight, want_grads)
        })?;
        let mut grads = if want_grads {
            self.params.zeros_like()
        } else {
            Vec::new()
        };
        let mut total = 0.0;
        for (value, g) in parts {
            total += value;
            for (acc, gi) in grads.iter_mut().zip(g) {
                *acc += &gi;
            }
        }
        let nll = total * weight;
        let penalty = if want_grads {
            self.penalty_with_grads(&mut grads)?
        } else {
            self.penalty_value()
        };
        let loss = nll + penalty;
        if !loss.is_finite() {
            return Err(DhnError::Divergence(format!("non-finite objective {loss}")));
        }
        Ok(LossEval {
            nll,
            penalty,
            loss,
            grads,
        })
    }

    /// Mean per-row negative log-likelihood with `k` samples, no penalty.
    pub fn nll(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        rows: &[usize],
        k: usize,
        stream: &RngStream,
    ) -> Result<f64> {
        if rows.is_empty() {
            return Err(DhnError::Usage("no rows to evaluate".into()));
        }
        let ranges = chunk_ranges(rows.len());
        let parts = run_chunks(ranges.len(), self.config.threads, |c| {
            let (s, e) = ranges[c];
            let noise = self.chunk_noise(stream, c, e - s, k);
            self.chunk_eval(x, y, &rows[s..e], &noise, 1.0, false)
        })?;
        Ok(parts.iter().map(|p| p.0).sum::<f64>() / rows.len() as f64)
    }

    /// Mean negative log-likelihood on raw (unstandardised) data rows, using
    /// `k_eval` samples and a stream fixed by the seed and `tag`.
    pub fn dataset_nll(&self, data: &Dataset, rows: &[usize], tag: u64) -> Result<f64> {
        let x = self.standardizer.transform(data.features());
        let stream = RngStream::new(self.config.seed).derive(&[tag]);
        self.nll(&x, data.labels(), rows, self.config.k_eval, &stream)
    }

    /// Gated predictions for raw feature rows.
    ///
    /// `p_j = Φ(μ_j / √Σ_jj)` and `ŷ_j = p_j exp(μ'_j + Σ'_jj / 2)`. Under
    /// the mlnd-only ablation the gate is open (`p_j = 1`).
    pub fn predict(&self, features: &Array2<f64>) -> Result<Prediction> {
        let c = &self.config;
        if features.ncols() != c.n_features {
            return Err(DhnError::Config(format!(
                "model expects {} features, got {}",
                c.n_features,
                features.ncols()
            )));
        }
        let x = self.standardizer.transform(features);
        let latent = apply_stack(&self.encoder, &self.params, &x)?;
        let abundance_mean = apply_stack(&self.abundance_mlp, &self.params, &latent)?;
        let sigma_a = self.abundance_covariance().sigma();
        let probabilities = if c.ablation == Ablation::MlndOnly {
            Array2::ones(abundance_mean.dim())
        } else {
            let mu = apply_stack(&self.probit_mlp, &self.params, &latent)?;
            let sigma = self.probit_covariance().sigma();
            Array2::from_shape_fn(mu.dim(), |(i, j)| {
                std_normal_cdf(mu[[i, j]] / sigma[[j, j]].sqrt())
            })
        };
        let expected = Array2::from_shape_fn(abundance_mean.dim(), |(i, j)| {
            probabilities[[i, j]] * (abundance_mean[[i, j]] + 0.5 * sigma_a[[j, j]]).exp()
        });
        Ok(Prediction {
            probabilities,
            expected,
        })
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            n_features: self.config.n_features,
            n_targets: self.config.n_targets,
            seed: self.config.seed,
            model: self.clone(),
        };
        serde_json::to_string(&file).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| DhnError::Load(format!("malformed model file: {e}")))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(MODEL_FORMAT) => {}
            other => {
                return Err(DhnError::Load(format!(
                    "not a model file (format {other:?}, expected \"{MODEL_FORMAT}\")"
                )))
            }
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_VERSION as u64 => {}
            other => {
                return Err(DhnError::Load(format!(
                    "unsupported model version {other:?}, this build reads version {MODEL_VERSION}"
                )))
            }
        }
        let file: ModelFile = serde_json::from_value(value)
            .map_err(|e| DhnError::Load(format!("malformed model file: {e}")))?;
        let c = &file.model.config;
        if file.n_features != c.n_features || file.n_targets != c.n_targets {
            return Err(DhnError::Load(format!(
                "header declares M = {}, L = {} but the stored config has M = {}, L = {}",
                file.n_features, file.n_targets, c.n_features, c.n_targets
            )));
        }
        file.model
            .validate()
            .map_err(|e| DhnError::Load(format!("inconsistent model: {e}")))?;
        Ok(file.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| DhnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DhnError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            DhnError::Load(m) => DhnError::Load(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub penalty: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation NLL before the first update.
    pub initial_val_nll: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; 0 if none finished.
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn val_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_nll).collect()
    }

    /// `key=value` lines without wall-clock fields, so identical runs give
    /// identical text.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "initial_val_nll={}\nepochs={}\nbest_epoch={}\n",
            self.initial_val_nll,
            self.epochs.len(),
            self.best_epoch
        );
        for e in &self.epochs {
            out += &format!(
                "epoch.{0}.train_nll={1}\nepoch.{0}.val_nll={2}\nepoch.{0}.penalty={3}\n",
                e.epoch, e.train_nll, e.val_nll, e.penalty
            );
        }
        out
    }

    pub fn timing_text(&self) -> String {
        let total: f64 = self.epochs.iter().map(|e| e.seconds).sum();
        let mut out = format!("total_seconds={total}\n");
        for e in &self.epochs {
            out += &format!("epoch.{}.seconds={}\n", e.epoch, e.seconds);
        }
        out
    }
}

/// A training run stopped by a numerical failure.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: DhnError,
    /// Parameters from before the failing step.
    pub checkpoint: DhnModel,
    pub report: TrainReport,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (after {} complete epochs)",
            self.error,
            self.report.epochs.len()
        )
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Setup failures surface as the plain error; failures during optimisation
/// carry the last finite parameters.
#[derive(Debug)]
pub enum TrainError {
    Setup(DhnError),
    Aborted(Box<TrainAbort>),
}

impl TrainError {
    pub fn error(&self) -> &DhnError {
        match self {
            TrainError::Setup(e) => e,
            TrainError::Aborted(a) => &a.error,
        }
    }

    pub fn into_error(self) -> DhnError {
        match self {
            TrainError::Setup(e) => e,
            TrainError::Aborted(a) => a.error,
        }
    }
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Setup(e) => e.fmt(f),
            TrainError::Aborted(a) => a.fmt(f),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<DhnError> for TrainError {
    fn from(e: DhnError) -> Self {
        TrainError::Setup(e)
    }
}

pub fn train(
    data: &Dataset,
    split: &SplitIndex,
    config: &DhnConfig,
) -> std::result::Result<(DhnModel, TrainReport), TrainError> {
    train_with_progress(data, split, config, |_| {})
}

/// Minibatch training with best-validation selection. `progress` is called
/// after each epoch.
pub fn train_with_progress(
    data: &Dataset,
    split: &SplitIndex,
    config: &DhnConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> std::result::Result<(DhnModel, TrainReport), TrainError> {
    config.validate()?;
    if data.n_features() != config.n_features || data.n_targets() != config.n_targets {
        return Err(DhnError::Config(format!(
            "data has M = {}, L = {} but config has M = {}, L = {}",
            data.n_features(),
            data.n_targets(),
            config.n_features,
            config.n_targets
        ))
        .into());
    }
    if data.kind() != config.kind {
        return Err(DhnError::Config(format!(
            "data kind {} differs from config kind {}",
            data.kind(),
            config.kind
        ))
        .into());
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(
            DhnError::Usage("training and validation splits must be nonempty".into()).into(),
        );
    }
    let standardizer = Standardizer::fit(data.features(), &split.train);
    let x = standardizer.transform(data.features());
    let y = data.labels();
    let mut model = DhnModel::new(config.clone(), standardizer)?;
    let mut optimizer = OptimizerState::new(config.optimizer.clone(), &model.params);
    let root = RngStream::new(config.seed);
    let val_stream = root.derive(&[STREAM_VALIDATION]);
    let mut report = TrainReport::default();
    let abort = |error: DhnError, checkpoint: &DhnModel, report: &TrainReport| {
        TrainError::Aborted(Box::new(TrainAbort {
            error,
            checkpoint: checkpoint.clone(),
            report: report.clone(),
        }))
    };
    report.initial_val_nll = model
        .nll(&x, y, &split.val, config.k_eval, &val_stream)
        .map_err(|e| abort(e, &model, &report))?;
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut nll_sum = 0.0;
        let mut rows_seen = 0usize;
        for (b, batch) in batches(&split.train, config.batch_size, config.seed, epoch)
            .iter()
            .enumerate()
        {
            let stream = root.derive(&[STREAM_TRAIN, epoch as u64, b as u64]);
            let eval = model
                .loss(&x, y, batch, &stream, true)
                .map_err(|e| abort(e, &model, &report))?;
            let before = model.params.clone();
            if let Err(e) = optimizer.step(&mut model.params, &eval.grads, epoch) {
                model.params = before;
                return Err(abort(e, &model, &report));
            }
            if model
                .params
                .iter()
                .any(|(_, _, v)| v.iter().any(|p| !p.is_finite()))
            {
                model.params = before;
                return Err(abort(
                    DhnError::Divergence(format!(
                        "parameters became non-finite at epoch {} batch {b}",
                        epoch + 1
                    )),
                    &model,
                    &report,
                ));
            }
            nll_sum += eval.nll * batch.len() as f64;
            rows_seen += batch.len();
        }
        let val_nll = model
            .nll(&x, y, &split.val, config.k_eval, &val_stream)
            .map_err(|e| abort(e, &model, &report))?;
        if !val_nll.is_finite() {
            return Err(abort(
                DhnError::Divergence(format!(
                    "validation NLL is {val_nll} after epoch {}",
                    epoch + 1
                )),
                &model,
                &report,
            ));
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_nll: nll_sum / rows_seen as f64,
            val_nll,
            penalty: model.penalty_value(),
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&record);
        if best.as_ref().is_none_or(|(v, _)| val_nll < *v) {
            best = Some((val_nll, model.params.clone()));
            report.best_epoch = epoch + 1;
        }
        report.epochs.push(record);
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, report))
}
