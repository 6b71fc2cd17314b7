use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Axis, Zip};

use super::params::ParamId;
use crate::error::{DhnError, Result};
use crate::probcore::{
    cholesky, inverse_mills_ratio, log_std_normal_cdf_unchecked, sigmoid, softplus, std_normal_cdf,
    std_normal_pdf, LN_SQRT_2PI, LOG_CDF_DOMAIN,
};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node recorded on a [`Tape`].
///
/// Every node holds a dense row-major matrix; a scalar is the 1x1 case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    NormCdf(Var),
    LogNormCdf(Var),
    SignedLogNormCdf(Var, Array2<f64>),
    SumAll(Var),
    RowSum(Var),
    Reshape(Var),
    RepeatRows(Var, usize),
    LogMeanExpRows(Var),
    NormalLogDensity {
        mean: Var,
        cov: Var,
        d_mean: Array2<f64>,
        d_cov: Vec<Option<Array2<f64>>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a define-by-run computation.
///
/// Nodes are stored in creation order, so parents always precede children
/// and a single reverse sweep visits every node once.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    pub fn contains(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Differentiable leaf that is not tied to a stored parameter.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf holding the current value of a stored parameter.
    pub fn param(&mut self, id: ParamId, value: Array2<f64>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    /// Parameter leaves in creation order.
    pub fn params(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.node(v).value
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar_value on a non-scalar node");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = -self.value(a);
        let ng = self.needs(&[a]);
        self.push(value, Op::Neg(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// `a + row` with `row` (1 x n) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row: row vector shape");
        let value = self.value(a) + self.value(row);
        let ng = self.needs(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul: inner dimensions");
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a).1,
            self.shape(b).1,
            "matmul_t: inner dimensions"
        );
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.needs(&[a, b]);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        let ng = self.needs(&[a]);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.needs(&[a]);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let ng = self.needs(&[a]);
        self.push(value, Op::Log(a), ng)
    }

    /// max(x, 0); the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        let ng = self.needs(&[a]);
        self.push(value, Op::Softplus(a), ng)
    }

    /// |x| with derivative sign(x), 0 at exact ties.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let ng = self.needs(&[a]);
        self.push(value, Op::Abs(a), ng)
    }

    /// Standard normal CDF Φ.
    pub fn norm_cdf(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(std_normal_cdf);
        let ng = self.needs(&[a]);
        self.push(value, Op::NormCdf(a), ng)
    }

    fn check_log_cdf_domain(values: &Array2<f64>) -> Result<()> {
        if let Some(bad) = values
            .iter()
            .find(|x| !x.is_finite() || x.abs() > LOG_CDF_DOMAIN)
        {
            return Err(DhnError::Numerical(format!(
                "log normal cdf argument {bad} outside [-{LOG_CDF_DOMAIN}, {LOG_CDF_DOMAIN}]"
            )));
        }
        Ok(())
    }

    /// log Φ(x), elementwise.
    pub fn log_norm_cdf(&mut self, a: Var) -> Result<Var> {
        Self::check_log_cdf_domain(self.value(a))?;
        let value = self.value(a).mapv(log_std_normal_cdf_unchecked);
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::LogNormCdf(a), ng))
    }

    /// `y·log Φ(w) + (1 - y)·log(1 - Φ(w))` for a 0/1 indicator matrix `y`.
    ///
    /// Only the branch selected by each indicator is evaluated.
    pub fn signed_log_norm_cdf(&mut self, w: Var, indicator: Array2<f64>) -> Result<Var> {
        assert_eq!(
            self.shape(w),
            indicator.dim(),
            "signed_log_norm_cdf: indicator shape"
        );
        Self::check_log_cdf_domain(self.value(w))?;
        let mut value = Array2::<f64>::zeros(indicator.dim());
        Zip::from(&mut value)
            .and(self.value(w))
            .and(&indicator)
            .for_each(|out, &x, &y| {
                *out = if y > 0.5 {
                    log_std_normal_cdf_unchecked(x)
                } else {
                    log_std_normal_cdf_unchecked(-x)
                };
            });
        let ng = self.needs(&[w]);
        Ok(self.push(value, Op::SignedLogNormCdf(w, indicator), ng))
    }

    /// Sum of every entry, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row: (m x n) -> (m x 1).
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.needs(&[a]);
        self.push(value, Op::RowSum(a), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: element count");
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("shape checked");
        let ng = self.needs(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Repeats each row `k` times consecutively: row `i` lands on rows
    /// `i*k .. (i+1)*k` of the result.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        assert!(k >= 1, "repeat_rows needs k >= 1");
        let src = self.value(a);
        let (m, n) = src.dim();
        let value = Array2::from_shape_fn((m * k, n), |(r, c)| src[[r / k, c]]);
        let ng = self.needs(&[a]);
        self.push(value, Op::RepeatRows(a, k), ng)
    }

    /// Row-wise `log((1/k) Σⱼ exp(a_ij))` with a max shift: (m x k) -> (m x 1).
    pub fn log_mean_exp_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let k = src.ncols() as f64;
        let value = Array2::from_shape_fn((src.nrows(), 1), |(i, _)| {
            let row = src.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return max;
            }
            let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
            max + (s / k).ln()
        });
        let ng = self.needs(&[a]);
        self.push(value, Op::LogMeanExpRows(a), ng)
    }

    /// Per-row Gaussian log-density restricted to a subset of coordinates.
    ///
    /// Row `i` scores `obs[i, S_i]` under `N(mean[i, S_i], cov[S_i, S_i])`
    /// where `S_i = subsets[i]`; rows with an empty subset contribute 0. The
    /// principal submatrix is factorised by Cholesky; the quadratic form
    /// uses triangular solves.
    pub fn subset_normal_log_density(
        &mut self,
        mean: Var,
        cov: Var,
        obs: &Array2<f64>,
        subsets: &[Vec<usize>],
    ) -> Result<Var> {
        let (b, l) = self.shape(mean);
        assert_eq!(
            self.shape(cov),
            (l, l),
            "subset_normal_log_density: covariance shape"
        );
        assert_eq!(
            obs.dim(),
            (b, l),
            "subset_normal_log_density: observation shape"
        );
        assert_eq!(
            subsets.len(),
            b,
            "subset_normal_log_density: one subset per row"
        );
        let mean_v = self.value(mean);
        let cov_v = self.value(cov);
        let mut out = Array2::<f64>::zeros((b, 1));
        let mut d_mean = Array2::<f64>::zeros((b, l));
        let mut d_cov = Vec::with_capacity(b);
        for (i, subset) in subsets.iter().enumerate() {
            if subset.is_empty() {
                d_cov.push(None);
                continue;
            }
            let p = subset.len();
            let sub = Array2::from_shape_fn((p, p), |(r, c)| cov_v[[subset[r], subset[c]]]);
            let factor = cholesky(&sub).map_err(|e| {
                DhnError::Numerical(format!("covariance submatrix for row {i}: {e}"))
            })?;
            let resid: Vec<f64> = subset
                .iter()
                .map(|&j| obs[[i, j]] - mean_v[[i, j]])
                .collect();
            let half = factor.solve_lower(&resid);
            let quad = half.dot(&half);
            out[[i, 0]] = -0.5 * (2.0 * p as f64 * LN_SQRT_2PI + factor.log_det() + quad);

            let alpha = factor.solve_upper(half.as_slice().expect("contiguous"));
            let inv = factor.inverse();
            let mut dc = Array2::<f64>::zeros((l, l));
            for (r, &jr) in subset.iter().enumerate() {
                d_mean[[i, jr]] = alpha[r];
                for (c, &jc) in subset.iter().enumerate() {
                    dc[[jr, jc]] = 0.5 * (alpha[r] * alpha[c] - inv[[r, c]]);
                }
            }
            d_cov.push(Some(dc));
        }
        let ng = self.needs(&[mean, cov]);
        Ok(self.push(
            out,
            Op::NormalLogDensity {
                mean,
                cov,
                d_mean,
                d_cov,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.contains(loss) {
            return Err(DhnError::Usage(
                "backward called with a node that is not on this tape".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(DhnError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.nodes[v.index].needs_grad {
            return;
        }
        match &mut grads[v.index] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.index].value;
        let wants = |v: Var| self.nodes[v.index].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if wants(*b) {
                    self.accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g * val(*b));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g * val(*a));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, -g),
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if wants(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MatMul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.dot(val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().as_standard_layout().into_owned()),
            Op::Exp(a) => self.accumulate(grads, *a, g * &node.value),
            Op::Log(a) => self.accumulate(grads, *a, g / val(*a)),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Softplus(a) => self.accumulate(grads, *a, g * &val(*a).mapv(sigmoid)),
            Op::Abs(a) => {
                let sign = val(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, g * &sign);
            }
            Op::NormCdf(a) => self.accumulate(grads, *a, g * &val(*a).mapv(std_normal_pdf)),
            Op::LogNormCdf(a) => self.accumulate(grads, *a, g * &val(*a).mapv(inverse_mills_ratio)),
            Op::SignedLogNormCdf(w, indicator) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*w))
                    .and(indicator)
                    .for_each(|d, &x, &y| {
                        *d *= if y > 0.5 {
                            inverse_mills_ratio(x)
                        } else {
                            -inverse_mills_ratio(-x)
                        };
                    });
                self.accumulate(grads, *w, d);
            }
            Op::SumAll(a) => {
                let shape = val(*a).dim();
                self.accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::RowSum(a) => {
                let shape = val(*a).dim();
                let d = Array2::from_shape_fn(shape, |(i, _)| g[[i, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let shape = val(*a).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                self.accumulate(
                    grads,
                    *a,
                    Array2::from_shape_vec(shape, flat).expect("same element count"),
                );
            }
            Op::RepeatRows(a, k) => {
                let (m, n) = val(*a).dim();
                let mut d = Array2::<f64>::zeros((m, n));
                for (r, row) in g.rows().into_iter().enumerate() {
                    let mut target = d.row_mut(r / k);
                    target += &row;
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogMeanExpRows(a) => {
                let src = val(*a);
                let k = src.ncols() as f64;
                let d = Array2::from_shape_fn(src.dim(), |(i, j)| {
                    let out = node.value[[i, 0]];
                    if g[[i, 0]] == 0.0 || !out.is_finite() {
                        0.0
                    } else {
                        g[[i, 0]] * (src[[i, j]] - out).exp() / k
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::NormalLogDensity {
                mean,
                cov,
                d_mean,
                d_cov,
            } => {
                if wants(*mean) {
                    let d = d_mean * g;
                    self.accumulate(grads, *mean, d);
                }
                if wants(*cov) {
                    let l = val(*cov).nrows();
                    let mut d = Array2::<f64>::zeros((l, l));
                    for (i, dc) in d_cov.iter().enumerate() {
                        if let Some(dc) = dc {
                            d.scaled_add(g[[i, 0]], dc);
                        }
                    }
                    self.accumulate(grads, *cov, d);
                }
            }
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` is not upstream of
    /// the loss.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`; zeros of the given shape if disconnected.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}
