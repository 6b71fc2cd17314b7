//! Average correlation (ACC), zero-inflated RMSE and the test-split
//! evaluation driver.

use std::time::Instant;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitIndex};
use crate::error::{DhnError, Result};
use crate::model::{DhnModel, STREAM_TEST};

/// Per-target Pearson correlations and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccResult {
    pub acc: f64,
    /// `None` for excluded targets.
    pub per_target: Vec<Option<f64>>,
    /// Targets where either column is constant.
    pub excluded: Vec<usize>,
}

fn check_shapes(actual: &Array2<f64>, predicted: &Array2<f64>) -> Result<()> {
    if actual.dim() != predicted.dim() {
        return Err(DhnError::Data(format!(
            "actual is {:?} but predicted is {:?}",
            actual.dim(),
            predicted.dim()
        )));
    }
    Ok(())
}

/// Pearson correlation, or `None` when either side has zero variance.
pub fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn acc(actual: &Array2<f64>, predicted: &Array2<f64>) -> Result<AccResult> {
    check_shapes(actual, predicted)?;
    if actual.nrows() < 2 {
        return Err(DhnError::Data("correlation needs at least two rows".into()));
    }
    let per_target: Vec<Option<f64>> = actual
        .axis_iter(Axis(1))
        .zip(predicted.axis_iter(Axis(1)))
        .map(|(a, p)| pearson(a, p))
        .collect();
    let excluded: Vec<usize> = (0..per_target.len())
        .filter(|&j| per_target[j].is_none())
        .collect();
    let kept: Vec<f64> = per_target.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(DhnError::Data(
            "every target has a constant actual or predicted column; correlation is undefined"
                .into(),
        ));
    }
    Ok(AccResult {
        acc: kept.iter().sum::<f64>() / kept.len() as f64,
        per_target,
        excluded,
    })
}

/// Mean over rows of
/// `sqrt(α mean_{y=0} ŷ² + (1-α) mean_{y>0} (y-ŷ)²)`; an empty side
/// contributes 0.
pub fn zrmse(actual: &Array2<f64>, predicted: &Array2<f64>, alpha: f64) -> Result<f64> {
    check_shapes(actual, predicted)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DhnError::Usage(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if actual.iter().any(|v| !(*v >= 0.0)) {
        return Err(DhnError::Data("actual values must be nonnegative".into()));
    }
    if actual.nrows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = actual
        .rows()
        .into_iter()
        .zip(predicted.rows())
        .map(|(y, p)| {
            let (mut zero_sq, mut zeros, mut pos_sq, mut pos) = (0.0, 0usize, 0.0, 0usize);
            for (a, b) in y.iter().zip(p.iter()) {
                if *a == 0.0 {
                    zero_sq += b * b;
                    zeros += 1;
                } else {
                    pos_sq += (a - b) * (a - b);
                    pos += 1;
                }
            }
            let zero_part = if zeros > 0 {
                zero_sq / zeros as f64
            } else {
                0.0
            };
            let pos_part = if pos > 0 { pos_sq / pos as f64 } else { 0.0 };
            (alpha * zero_part + (1.0 - alpha) * pos_part).sqrt()
        })
        .sum();
    Ok(total / actual.nrows() as f64)
}

/// `(alpha, zrmse)` for each requested weight.
pub fn alpha_sweep(
    actual: &Array2<f64>,
    predicted: &Array2<f64>,
    alphas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    alphas
        .iter()
        .map(|&a| zrmse(actual, predicted, a).map(|z| (a, z)))
        .collect()
}

pub fn sweep_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("alpha,zrmse\n");
    for (a, z) in points {
        out += &format!("{a},{z}\n");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: usize,
    pub acc: f64,
    pub zrmse: f64,
    pub alpha: f64,
    pub test_nll: f64,
    pub per_target: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
    pub seconds: f64,
}

impl EvalReport {
    /// `key=value` lines without the wall-clock field.
    pub fn to_text(&self) -> String {
        let excluded: Vec<String> = self.excluded.iter().map(|j| (j + 1).to_string()).collect();
        let mut out = format!(
            "rows={}\nacc={}\nzrmse={}\nalpha={}\ntest_nll={}\nexcluded_targets={}\n",
            self.rows,
            self.acc,
            self.zrmse,
            self.alpha,
            self.test_nll,
            excluded.join(",")
        );
        for (j, c) in self.per_target.iter().enumerate() {
            match c {
                Some(c) => out += &format!("corr.{}={c}\n", j + 1),
                None => out += &format!("corr.{}=excluded\n", j + 1),
            }
        }
        out
    }
}

/// Scores `model` on the test rows of `data`.
pub fn evaluate(
    model: &DhnModel,
    data: &Dataset,
    split: &SplitIndex,
    alpha: f64,
) -> Result<EvalReport> {
    if split.test.is_empty() {
        return Err(DhnError::Usage("test split is empty".into()));
    }
    evaluate_rows(model, data, &split.test, alpha)
}

/// Scores `model` on the given rows of `data`.
pub fn evaluate_rows(
    model: &DhnModel,
    data: &Dataset,
    rows: &[usize],
    alpha: f64,
) -> Result<EvalReport> {
    let c = model.config();
    if data.n_features() != c.n_features || data.n_targets() != c.n_targets {
        return Err(DhnError::Data(format!(
            "model expects M = {}, L = {} but data has M = {}, L = {}",
            c.n_features,
            c.n_targets,
            data.n_features(),
            data.n_targets()
        )));
    }
    if data.kind() != c.kind {
        return Err(DhnError::Data(format!(
            "model was trained on {} data, got {}",
            c.kind,
            data.kind()
        )));
    }
    let start = Instant::now();
    let subset = data.select_rows(rows);
    let prediction = model.predict(subset.features())?;
    let a = acc(subset.labels(), &prediction.expected)?;
    let z = zrmse(subset.labels(), &prediction.expected, alpha)?;
    let test_nll = model.dataset_nll(data, rows, STREAM_TEST)?;
    Ok(EvalReport {
        rows: rows.len(),
        acc: a.acc,
        zrmse: z,
        alpha,
        test_nll,
        per_target: a.per_target,
        excluded: a.excluded,
        seconds: start.elapsed().as_secs_f64(),
    })
}
