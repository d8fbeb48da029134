//! Dense row-major matrices and the vector helpers the losses are built on.

use crate::error::{Error, Result};

/// Norms below this are treated as degenerate by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-30;

/// Row-major `rows x cols` matrix of `f64`.
///
/// A matrix may have zero rows (an empty batch or an empty negative set);
/// the column count is always at least one.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols > 0, "matrix must have at least one column");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 || data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols} ({} values)", rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    expected: format!("row of length {cols}"),
                    got: format!("row {i} of length {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut out = Self::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= MIN_NORM) || !n.is_finite() {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Pulls `grad_out` (taken with respect to `v / ||v||`) back to `v`.
///
/// The radial component is annihilated and the tangent component is
/// scaled by `1 / ||v||`.
pub fn l2_normalize_backward(v: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= MIN_NORM) || !n.is_finite() {
        return Err(Error::ZeroVector { norm: n });
    }
    let radial = dot(v, grad_out) / n;
    Ok(v.iter()
        .zip(grad_out)
        .map(|(vi, gi)| (gi - radial * vi / n) / n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::numerical_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_three_four_five() {
        let u = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15);
        assert!((u[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_unit_vector_is_identity() {
        let u = l2_normalize(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(u, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_random_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let v: Vec<f64> = (0..17).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert!((norm(&l2_normalize(&v).unwrap()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_zero_vector_fails() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector { .. })));
        assert!(matches!(
            l2_normalize_backward(&[0.0; 3], &[1.0; 3]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn backward_kills_radial_and_keeps_tangent() {
        let v = [0.6, 0.8];
        let g = l2_normalize_backward(&v, &v).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
        let t = [-0.8, 0.6];
        let g = l2_normalize_backward(&v, &t).unwrap();
        assert!((g[0] - t[0]).abs() < 1e-15 && (g[1] - t[1]).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let v: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic = l2_normalize_backward(&v, &g).unwrap();
            // d/dv <g, normalize(v)>
            let numeric =
                numerical_gradient(|x| dot(&g, &l2_normalize(x).unwrap()), &v, 1e-5).unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
                assert!(rel < 1e-6, "analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn matrix_shape_checks() {
        assert!(DenseMatrix::from_vec(2, 3, vec![0.0; 5]).is_err());
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], 2).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0]);
        assert_eq!(m.select_rows(&[1, 0]).row(0), &[3.0, 4.0]);
    }

    proptest::proptest! {
        #[test]
        fn normalized_rows_have_unit_norm(v in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            proptest::prop_assume!(norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            proptest::prop_assert!((norm(&u) - 1.0).abs() <= 1e-12);
        }
    }
}
