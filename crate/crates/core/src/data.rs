//! Dataset ingestion, splitting, batching, standardisation and the
//! synthetic generator.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{DhnError, Result};
use crate::mvp::DIAG_FLOOR;
use crate::probcore::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Continuous,
    Count,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::Continuous => "continuous",
            DataKind::Count => "count",
        })
    }
}

impl FromStr for DataKind {
    type Err = DhnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(DataKind::Continuous),
            "count" => Ok(DataKind::Count),
            other => Err(DhnError::Usage(format!(
                "unknown data kind '{other}', expected 'continuous' or 'count'"
            ))),
        }
    }
}

/// Feature matrix (N x M) with nonnegative labels (N x L).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Array2<f64>,
    kind: DataKind,
    feature_names: Vec<String>,
    target_names: Vec<String>,
}

fn default_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

impl Dataset {
    /// Builds a validated dataset.
    pub fn new(
        features: Array2<f64>,
        labels: Array2<f64>,
        kind: DataKind,
        feature_names: Option<Vec<String>>,
        target_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let ds = Self::unchecked(features, labels, kind, feature_names, target_names)?;
        ds.validate()?;
        Ok(ds)
    }

    fn unchecked(
        features: Array2<f64>,
        labels: Array2<f64>,
        kind: DataKind,
        feature_names: Option<Vec<String>>,
        target_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if features.nrows() != labels.nrows() {
            return Err(DhnError::Data(format!(
                "{} feature rows but {} label rows",
                features.nrows(),
                labels.nrows()
            )));
        }
        let feature_names = feature_names.unwrap_or_else(|| default_names("x", features.ncols()));
        let target_names = target_names.unwrap_or_else(|| default_names("y", labels.ncols()));
        if feature_names.len() != features.ncols() || target_names.len() != labels.ncols() {
            return Err(DhnError::Data(
                "column names do not match matrix widths".into(),
            ));
        }
        Ok(Self {
            features,
            labels,
            kind,
            feature_names,
            target_names,
        })
    }

    fn validate(&self) -> Result<()> {
        for ((i, j), v) in self.features.indexed_iter() {
            if !v.is_finite() {
                return Err(DhnError::DataAt {
                    row: i + 1,
                    column: self.feature_names[j].clone(),
                    message: format!("non-finite feature value {v}"),
                });
            }
        }
        for ((i, j), &v) in self.labels.indexed_iter() {
            check_label(v, self.kind).map_err(|message| DhnError::DataAt {
                row: i + 1,
                column: self.target_names[j].clone(),
                message,
            })?;
        }
        if self.labels.nrows() > 0 && !self.labels.iter().any(|v| *v > 0.0) {
            return Err(DhnError::Data(
                "dataset has no positive labels; the abundance head cannot be trained".into(),
            ));
        }
        Ok(())
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Array2<f64> {
        &self.labels
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_names(&self) -> &[String] {
        &self.target_names
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_targets(&self) -> usize {
        self.labels.ncols()
    }

    /// Fraction of label entries that are strictly positive.
    pub fn nonzero_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|v| **v > 0.0).count() as f64 / self.labels.len() as f64
    }

    /// Rows in the given order. The result is not re-validated, so a
    /// subset without positives is allowed.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: self.labels.select(Axis(0), rows),
            kind: self.kind,
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        }
    }

    pub fn with_features(&self, features: Array2<f64>) -> Dataset {
        assert_eq!(features.dim(), self.features.dim());
        Dataset {
            features,
            ..self.clone()
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            kind: self.kind,
            features: self.feature_names.clone(),
            targets: self.target_names.clone(),
        }
    }

    /// Writes features then targets with a header row. Values use the
    /// shortest decimal form that parses back to the same `f64`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let header: Vec<&str> = self
            .feature_names
            .iter()
            .chain(&self.target_names)
            .map(String::as_str)
            .collect();
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (x, y) in self.features.rows().into_iter().zip(self.labels.rows()) {
            let record: Vec<String> = x.iter().chain(y.iter()).map(|v| v.to_string()).collect();
            w.write_record(&record).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| DhnError::io(path, e))
    }
}

fn check_label(v: f64, kind: DataKind) -> std::result::Result<(), String> {
    if !v.is_finite() {
        return Err(format!("non-finite label {v}"));
    }
    if v < 0.0 {
        return Err(format!("negative label {v}"));
    }
    if kind == DataKind::Count && v.fract() != 0.0 {
        return Err(format!("count label {v} is not an integer"));
    }
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> DhnError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DhnError::io(path, io),
        other => DhnError::Data(format!("{}: {:?}", path.display(), other)),
    }
}

/// Declares which CSV columns are features and targets, and the label kind.
///
/// Stored as TOML:
///
/// ```toml
/// kind = "count"
/// features = ["depth", "temp"]
/// targets = ["cod", "haddock"]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub kind: DataKind,
    pub features: Vec<String>,
    pub targets: Vec<String>,
}

impl Schema {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DhnError::io(path, e))?;
        let schema: Schema = toml::from_str(&text)
            .map_err(|e| DhnError::Data(format!("schema {}: {e}", path.display())))?;
        if schema.features.is_empty() || schema.targets.is_empty() {
            return Err(DhnError::Data(format!(
                "schema {} must name at least one feature and one target",
                path.display()
            )));
        }
        Ok(schema)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| DhnError::io(path, e))
    }
}

fn column_positions(
    path: &Path,
    header: &csv::StringRecord,
    names: &[String],
) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|name| {
            header.iter().position(|h| h.trim() == name).ok_or_else(|| {
                DhnError::Data(format!("{}: missing column '{name}'", path.display()))
            })
        })
        .collect()
}

fn parse_cell(record: &csv::StringRecord, pos: usize, row: usize, column: &str) -> Result<f64> {
    let raw = record.get(pos).unwrap_or("").trim();
    raw.parse::<f64>().map_err(|_| DhnError::DataAt {
        row,
        column: column.to_string(),
        message: format!("non-numeric value '{raw}'"),
    })
}

/// Reads a headed CSV file according to `schema` and validates it.
/// Reported row numbers count data rows from 1 (the header is row 0).
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let fpos = column_positions(path, &header, &schema.features)?;
    let tpos = column_positions(path, &header, &schema.targets)?;
    let (m, l) = (fpos.len(), tpos.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_error(path, e))?;
        for (&p, name) in fpos.iter().zip(&schema.features) {
            let v = parse_cell(&record, p, row, name)?;
            if !v.is_finite() {
                return Err(DhnError::DataAt {
                    row,
                    column: name.clone(),
                    message: format!("non-finite feature value {v}"),
                });
            }
            xs.push(v);
        }
        for (&p, name) in tpos.iter().zip(&schema.targets) {
            let v = parse_cell(&record, p, row, name)?;
            check_label(v, schema.kind).map_err(|message| DhnError::DataAt {
                row,
                column: name.clone(),
                message,
            })?;
            ys.push(v);
        }
    }
    let n = xs.len() / m;
    let features = Array2::from_shape_vec((n, m), xs).expect("row-major fill");
    let labels = Array2::from_shape_vec((n, l), ys).expect("row-major fill");
    Dataset::new(
        features,
        labels,
        schema.kind,
        Some(schema.features.clone()),
        Some(schema.targets.clone()),
    )
}

/// Reads the named feature columns from a headed CSV. An empty file or a
/// header-only file yields zero rows.
pub fn load_feature_csv(path: impl AsRef<Path>, names: &[String]) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DhnError::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Array2::zeros((0, names.len())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let pos = column_positions(path, &header, names)?;
    let mut xs = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        for (&p, name) in pos.iter().zip(names) {
            let v = parse_cell(&record, p, i + 1, name)?;
            if !v.is_finite() {
                return Err(DhnError::DataAt {
                    row: i + 1,
                    column: name.clone(),
                    message: format!("non-finite feature value {v}"),
                });
            }
            xs.push(v);
        }
    }
    let n = xs.len() / names.len().max(1);
    Ok(Array2::from_shape_vec((n, names.len()), xs).expect("row-major fill"))
}

/// Disjoint train/validation/test row lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

pub const MIN_SPLIT_ROWS: usize = 10;

impl SplitIndex {
    /// Seeded shuffle, then 15% validation and 15% test (floored) with the
    /// remainder going to training.
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n < MIN_SPLIT_ROWS {
            return Err(DhnError::Usage(format!(
                "need at least {MIN_SPLIT_ROWS} rows to split, got {n}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(seed).derive(&[0x5b117]).shuffle(&mut order);
        let held = n * 15 / 100;
        let train_len = n - 2 * held;
        let test = order.split_off(train_len + held);
        let val = order.split_off(train_len);
        Ok(Self {
            train: order,
            val,
            test,
            seed,
        })
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Shuffles `indices` with a stream fixed by `(seed, epoch)` and cuts it
/// into batches; the last batch may be short.
pub fn batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order = indices.to_vec();
    RngStream::new(seed)
        .derive(&[0xba7c4, epoch as u64])
        .shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Per-feature centring and scaling fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Zero-variance features get scale 1.
    pub fn fit(features: &Array2<f64>, rows: &[usize]) -> Self {
        let m = features.ncols();
        if rows.is_empty() {
            return Self {
                mean: vec![0.0; m],
                scale: vec![1.0; m],
            };
        }
        let sub = features.select(Axis(0), rows);
        let mean: Array1<f64> = sub.mean_axis(Axis(0)).expect("nonempty");
        let var = sub.var_axis(Axis(0), 0.0);
        let scale = var
            .iter()
            .map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self {
            mean: mean.to_vec(),
            scale,
        }
    }

    pub fn identity(m: usize) -> Self {
        Self {
            mean: vec![0.0; m],
            scale: vec![1.0; m],
        }
    }

    pub fn transform(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut out = features.clone();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Standardises every row with statistics from the training split.
pub fn standardize(dataset: &Dataset, split: &SplitIndex) -> (Dataset, Standardizer) {
    let st = Standardizer::fit(dataset.features(), &split.train);
    let ds = dataset.with_features(st.transform(dataset.features()));
    (ds, st)
}

/// Linear ground truth for the synthetic hurdle process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// L x M map to the probit mean.
    pub probit_weights: Array2<f64>,
    pub probit_offset: Vec<f64>,
    /// L x M map to the abundance mean.
    pub abundance_weights: Array2<f64>,
    pub abundance_offset: Vec<f64>,
    /// Lower-triangular factor C with Σ = I + C Cᵀ.
    pub probit_factor: Array2<f64>,
    /// Lower-triangular factor C' with Σ' = I + C' C'ᵀ.
    pub abundance_factor: Array2<f64>,
}

impl GroundTruth {
    /// Random linear maps and a one-factor covariance shared by both
    /// heads: every target loads `strength` on the first latent direction,
    /// plus a small idiosyncratic diagonal. Map entries have standard
    /// deviation `signal / √M` for each head.
    pub fn random(m: usize, l: usize, params: &TruthParams, seed: u64) -> Self {
        let mut rng = RngStream::new(seed).derive(&[0x7407]);
        let scale = 1.0 / (m as f64).sqrt();
        let probit_weights = rng.normal_matrix(l, m) * (params.probit_signal * scale);
        let abundance_weights = rng.normal_matrix(l, m) * (params.abundance_signal * scale);
        let strength = params.strength;
        let factor = Array2::from_shape_fn((l, l), |(i, j)| {
            if j == 0 {
                if i == 0 {
                    strength.max(0.1)
                } else {
                    strength
                }
            } else if i == j {
                0.1
            } else {
                0.0
            }
        });
        Self {
            probit_weights,
            probit_offset: vec![params.probit_offset; l],
            abundance_weights,
            abundance_offset: vec![params.abundance_offset; l],
            probit_factor: factor.clone(),
            abundance_factor: factor,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let (l, m) = self.probit_weights.dim();
        (m, l)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, l) = self.dims();
        if l == 0 || m == 0 {
            return Err(DhnError::Config(
                "ground truth needs L >= 1 and M >= 1".into(),
            ));
        }
        if self.abundance_weights.dim() != (l, m)
            || self.probit_offset.len() != l
            || self.abundance_offset.len() != l
        {
            return Err(DhnError::Config("ground-truth shapes disagree".into()));
        }
        for (name, f) in [
            ("probit", &self.probit_factor),
            ("abundance", &self.abundance_factor),
        ] {
            if f.dim() != (l, l) {
                return Err(DhnError::Config(format!("{name} factor must be {l}x{l}")));
            }
            for i in 0..l {
                if !(f[[i, i]] > DIAG_FLOOR) {
                    return Err(DhnError::Config(format!(
                        "{name} factor diagonal {i} must exceed {DIAG_FLOOR}"
                    )));
                }
                if (i + 1..l).any(|j| f[[i, j]] != 0.0) {
                    return Err(DhnError::Config(format!(
                        "{name} factor must be lower triangular"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn probit_sigma(&self) -> Array2<f64> {
        let (_, l) = self.dims();
        self.probit_factor.dot(&self.probit_factor.t()) + Array2::<f64>::eye(l)
    }

    pub fn abundance_sigma(&self) -> Array2<f64> {
        let (_, l) = self.dims();
        self.abundance_factor.dot(&self.abundance_factor.t()) + Array2::<f64>::eye(l)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| DhnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DhnError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DhnError::Data(format!("{}: {e}", path.display())))
    }
}

/// Knobs for [`GroundTruth::random`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthParams {
    /// Loading of every target on the shared latent factor.
    pub strength: f64,
    pub probit_signal: f64,
    pub abundance_signal: f64,
    pub probit_offset: f64,
    pub abundance_offset: f64,
}

impl Default for TruthParams {
    fn default() -> Self {
        Self {
            strength: 0.7,
            probit_signal: 5.0,
            abundance_signal: 1.5,
            probit_offset: -0.5,
            abundance_offset: 0.5,
        }
    }
}

impl TruthParams {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.strength,
            self.probit_signal,
            self.abundance_signal,
            self.probit_offset,
            self.abundance_offset,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(DhnError::Usage(
                "generator parameters must be finite".into(),
            ));
        }
        if self.probit_signal < 0.0 || self.abundance_signal < 0.0 {
            return Err(DhnError::Usage("signal scales must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n: usize,
    pub kind: DataKind,
    pub seed: u64,
    pub truth: GroundTruth,
}

/// Draws from `λ ~ Poisson` conditioned on a nonzero outcome.
pub fn sample_zero_truncated_poisson(lambda: f64, rng: &mut RngStream) -> f64 {
    if lambda >= 1.0 {
        let dist = Poisson::new(lambda).expect("positive finite rate");
        loop {
            let y: f64 = dist.sample(rng.inner());
            if y >= 1.0 {
                return y;
            }
        }
    }
    // inverse CDF on {1, 2, ...}
    let target = rng.uniform() * (-(-lambda).exp_m1());
    let mut p = (-lambda).exp() * lambda;
    let mut acc = p;
    let mut k = 1.0;
    while acc < target && k < 1000.0 {
        k += 1.0;
        p *= lambda / k;
        acc += p;
    }
    k
}

/// Samples a dataset from the hurdle process defined by `config.truth`.
///
/// For each row: `x ~ N(0, I)`, `r ~ N(A x + a, Σ)`, positive pattern
/// `r > 0`; positives draw `s ~ N(B x + b, Σ')` and become `exp(s)`
/// (continuous) or a zero-truncated Poisson draw with rate `exp(s)`
/// (count).
pub fn generate_synthetic(config: &GenConfig) -> Result<(Dataset, GroundTruth)> {
    let truth = &config.truth;
    truth.validate()?;
    let (m, l) = truth.dims();
    let mut rng = RngStream::new(config.seed).derive(&[0x5717]);
    let mut features = Array2::<f64>::zeros((config.n, m));
    let mut labels = Array2::<f64>::zeros((config.n, l));
    for i in 0..config.n {
        let x = Array1::from_shape_simple_fn(m, || rng.standard_normal());
        let mu = truth.probit_weights.dot(&x) + Array1::from(truth.probit_offset.clone());
        let mu_a = truth.abundance_weights.dot(&x) + Array1::from(truth.abundance_offset.clone());
        let z = Array1::from_shape_simple_fn(l, || rng.standard_normal());
        let v = Array1::from_shape_simple_fn(l, || rng.standard_normal());
        let r = &mu + &z + truth.probit_factor.dot(&v);
        let z2 = Array1::from_shape_simple_fn(l, || rng.standard_normal());
        let v2 = Array1::from_shape_simple_fn(l, || rng.standard_normal());
        let s = &mu_a + &z2 + truth.abundance_factor.dot(&v2);
        for j in 0..l {
            if r[j] > 0.0 {
                labels[[i, j]] = match config.kind {
                    DataKind::Continuous => s[j].exp(),
                    DataKind::Count => sample_zero_truncated_poisson(s[j].exp(), &mut rng),
                };
            }
        }
        features.row_mut(i).assign(&x);
    }
    let ds = Dataset::new(features, labels, config.kind, None, None)?;
    Ok((ds, truth.clone()))
}
