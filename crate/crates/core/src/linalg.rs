/// Lower-triangular Cholesky factor `L` of a symmetric positive-definite
/// matrix `A = L L^T`, stored densely row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

/// Failed factorization: the pivot at `index` was not positive, or was at
/// rounding level of its diagonal entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NotPositiveDefinite {
    pub index: usize,
    pub pivot: f64,
}

impl Cholesky {
    /// Factors the row-major `dim x dim` matrix `a`. Only the lower triangle
    /// is read.
    pub fn factor(a: &[f64], dim: usize) -> Result<Self, NotPositiveDefinite> {
        assert_eq!(a.len(), dim * dim, "matrix length does not match dim");
        let mut l = vec![0.0; dim * dim];
        for j in 0..dim {
            let row_j = &l[j * dim..j * dim + j];
            let diag = a[j * dim + j];
            let d = diag - row_j.iter().map(|v| v * v).sum::<f64>();
            // A pivot at rounding level of its diagonal entry means rank loss.
            if !(d > dim as f64 * f64::EPSILON * diag.abs() && d.is_finite()) {
                return Err(NotPositiveDefinite { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l[j * dim + j] = djj;
            for i in (j + 1)..dim {
                let (head, tail) = l.split_at_mut(i * dim);
                let row_j = &head[j * dim..j * dim + j];
                let row_i = &mut tail[..dim];
                let dot: f64 = row_i[..j].iter().zip(row_j).map(|(x, y)| x * y).sum();
                row_i[j] = (a[i * dim + j] - dot) / djj;
            }
        }
        Ok(Cholesky { dim, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major lower factor.
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(l, y)| l * y).sum();
            b[i] = (b[i] - s) / self.lower[i * n + i];
        }
    }

    /// Solves `L^T x = y` in place.
    pub fn solve_upper_in_place(&self, y: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
    }

    /// `b^T A^{-1} b`, computed as the squared norm of `L^{-1} b`.
    pub fn quadratic_form_inverse(&self, b: &[f64]) -> f64 {
        let mut y = b.to_vec();
        self.solve_lower_in_place(&mut y);
        y.iter().map(|v| v * v).sum()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.lower[i * self.dim + i].ln())
            .sum::<f64>()
            * 2.0
    }

    /// Explicit `A^{-1}`, row-major. Diagnostics only.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.dim;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}
