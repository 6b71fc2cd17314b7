use ndarray::{Array1, Array2};

use crate::error::{DhnError, Result};

const PIVOT_FLOOR: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

/// Lower-triangular `L` with `L Lᵀ = A` and a strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: Array2<f64>,
}

/// Factorises a symmetric positive-definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<CholeskyFactor> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(DhnError::Numerical(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (a[[i, j]], a[[j, i]]);
            if (x - y).abs() > SYMMETRY_TOL * x.abs().max(y.abs()).max(1.0) {
                return Err(DhnError::Numerical(format!(
                    "matrix is not symmetric at ({i}, {j}): {x} vs {y}"
                )));
            }
        }
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > PIVOT_FLOOR) {
            return Err(DhnError::Numerical(format!(
                "matrix is not positive definite: pivot {j} is {d:e}"
            )));
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Ok(CholeskyFactor { lower: l })
}

impl CholeskyFactor {
    /// Wraps an existing lower-triangular factor.
    pub fn from_lower(lower: Array2<f64>) -> Result<Self> {
        let n = lower.nrows();
        if lower.ncols() != n {
            return Err(DhnError::Numerical("factor must be square".into()));
        }
        for i in 0..n {
            if !(lower[[i, i]] > 0.0) {
                return Err(DhnError::Numerical(format!(
                    "factor diagonal entry {i} is not positive"
                )));
            }
            for j in (i + 1)..n {
                if lower[[i, j]] != 0.0 {
                    return Err(DhnError::Numerical(format!(
                        "factor has a nonzero entry above the diagonal at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { lower })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn into_lower(self) -> Array2<f64> {
        self.lower
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        self.lower.dot(&self.lower.t())
    }

    /// log det(L Lᵀ).
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L x = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Array1<f64> {
        let n = self.dim();
        let mut x = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lower[[i, k]] * x[k];
            }
            x[i] = s / self.lower[[i, i]];
        }
        x
    }

    /// Solves `Lᵀ x = b` by back substitution.
    pub fn solve_upper(&self, b: &[f64]) -> Array1<f64> {
        let n = self.dim();
        let mut x = Array1::<f64>::zeros(n);
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.lower[[k, i]] * x[k];
            }
            x[i] = s / self.lower[[i, i]];
        }
        x
    }

    /// Solves `L Lᵀ x = b`.
    pub fn solve(&self, b: &[f64]) -> Array1<f64> {
        let y = self.solve_lower(b);
        self.solve_upper(y.as_slice().expect("contiguous"))
    }

    /// (L Lᵀ)⁻¹, assembled column by column from triangular solves.
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.dim();
        let mut inv = Array2::<f64>::zeros((n, n));
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            inv.column_mut(j).assign(&col);
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn identity_factor() {
        let f = cholesky(&Array2::eye(3)).unwrap();
        assert_eq!(f.lower(), &Array2::<f64>::eye(3));
    }

    #[test]
    fn hand_two_by_two() {
        let f = cholesky(&array![[4.0, 2.0], [2.0, 5.0]]).unwrap();
        assert_eq!(f.lower(), &array![[2.0, 0.0], [1.0, 2.0]]);
    }

    #[test]
    fn indefinite_names_pivot() {
        let err = cholesky(&array![[1.0, 2.0], [2.0, 1.0]]).unwrap_err();
        assert!(err.to_string().contains("pivot 1"), "{err}");
    }

    #[test]
    fn asymmetric_rejected() {
        assert!(cholesky(&array![[1.0, 0.5], [0.4, 1.0]]).is_err());
    }

    #[test]
    fn solves_and_log_det() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let f = cholesky(&a).unwrap();
        let x = f.solve(&[1.0, -2.0, 0.5]);
        let back = a.dot(&x);
        for (got, want) in back.iter().zip([1.0, -2.0, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
        let prod = a.dot(&f.inverse());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - want).abs() < 1e-12);
            }
        }
        // det = 4(15-1) - 2(6-0.4) + 0.4(2-2) = 44.8
        assert!((f.log_det() - 44.8f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn reconstructs_random_spd(entries in proptest::collection::vec(-2.0f64..2.0, 16)) {
            let b = Array2::from_shape_vec((4, 4), entries).unwrap();
            let a = b.dot(&b.t()) + Array2::<f64>::eye(4);
            let f = cholesky(&a).unwrap();
            let diff = &f.reconstruct() - &a;
            let rel = diff.iter().map(|v| v * v).sum::<f64>().sqrt()
                / a.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(rel < 1e-10);
            prop_assert!(f.lower().diag().iter().all(|d| *d > 0.0));
        }
    }
}
