//! Regularized Gram matrices kept in sync with a lower-triangular Cholesky
//! factor under rank-one updates.

use ndarray::{Array1, Array2, ArrayView1};

/// `Lambda = rho I + sum_i x_i x_i^T` together with `L` such that
/// `L L^T = Lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    matrix: Array2<f64>,
    chol: Array2<f64>,
}

impl Gram {
    pub fn new(dim: usize, rho: f64) -> Self {
        let sqrt_rho = rho.sqrt();
        Self {
            matrix: Array2::eye(dim) * rho,
            chol: Array2::eye(dim) * sqrt_rho,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn cholesky(&self) -> &Array2<f64> {
        &self.chol
    }

    /// `Lambda += x x^T`, updating the factor in `O(d^2)`.
    pub fn add_outer(&mut self, x: ArrayView1<'_, f64>) {
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                self.matrix[[i, j]] += x[i] * x[j];
            }
        }
        cholesky_rank_one_update(&mut self.chol, x);
    }

    /// `Lambda^{-1} rhs` via forward and backward substitution.
    pub fn solve(&self, rhs: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut y = forward_substitution(&self.chol, rhs);
        backward_substitution_transposed(&self.chol, &mut y);
        y
    }

    /// `sqrt(x^T Lambda^{-1} x) = ||L^{-1} x||_2`.
    pub fn inverse_norm(&self, x: ArrayView1<'_, f64>) -> f64 {
        let y = forward_substitution(&self.chol, x);
        y.dot(&y).sqrt()
    }
}

/// In-place update of a lower-triangular `L` so that `L' L'^T = L L^T + x x^T`.
pub fn cholesky_rank_one_update(l: &mut Array2<f64>, x: ArrayView1<'_, f64>) {
    let n = l.nrows();
    let mut w = x.to_owned();
    for k in 0..n {
        if w[k] == 0.0 {
            continue;
        }
        let lkk = l[[k, k]];
        let r = lkk.hypot(w[k]);
        let c = r / lkk;
        let s = w[k] / lkk;
        l[[k, k]] = r;
        for i in k + 1..n {
            l[[i, k]] = (l[[i, k]] + s * w[i]) / c;
            w[i] = c * w[i] - s * l[[i, k]];
        }
    }
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn forward_substitution(l: &Array2<f64>, b: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l[[i, j]] * y[j];
        }
        y[i] = acc / l[[i, i]];
    }
    y
}

/// Solves `L^T x = y` in place.
pub fn backward_substitution_transposed(l: &Array2<f64>, y: &mut Array1<f64>) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut acc = y[i];
        for j in i + 1..n {
            acc -= l[[j, i]] * y[j];
        }
        y[i] = acc / l[[i, i]];
    }
}
