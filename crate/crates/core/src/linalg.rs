//! Ordered symmetric 3×3 eigen decomposition on top of nalgebra.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

/// Eigen decomposition with eigenvalues ordered `values[0] ≥ values[1] ≥ values[2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetricEigen3 {
    pub values: [f64; 3],
    pub vectors: [Vector3<f64>; 3],
}

impl SymmetricEigen3 {
    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn min(&self) -> f64 {
        self.values[2]
    }

    /// Eigenvector paired with the smallest eigenvalue.
    pub fn min_vector(&self) -> Vector3<f64> {
        self.vectors[2]
    }
}

/// Largest absolute asymmetry `|a_ij − a_ji|`.
pub fn asymmetry(m: &Matrix3<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..3 {
        for j in (i + 1)..3 {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues in descending order. Only the lower triangle is read.
pub fn symmetric_eigenvalues(m: &Matrix3<f64>) -> [f64; 3] {
    let v = m.symmetric_eigenvalues();
    let mut out = [v[0], v[1], v[2]];
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

/// Full eigen decomposition of a symmetric matrix.
pub fn symmetric_eigen(m: &Matrix3<f64>) -> SymmetricEigen3 {
    let e = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| e.eigenvalues[j].total_cmp(&e.eigenvalues[i]));
    SymmetricEigen3 {
        values: order.map(|i| e.eigenvalues[i]),
        vectors: order.map(|i| e.eigenvectors.column(i).normalize()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn diagonal_matrices_sort_descending() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 3.0, 2.0));
        assert_eq!(symmetric_eigenvalues(&m), [3.0, 2.0, 1.0]);
        let e = symmetric_eigen(&m);
        assert_relative_eq!(e.vectors[0].x.abs(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(e.vectors[0].y.abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn repeated_eigenvalues_give_orthonormal_vectors() {
        // I − 0.999·nnᵀ has spectrum {1, 1, 0.001}
        let n = Vector3::new(1.0, 2.0, -2.0).normalize();
        let m = Matrix3::identity() - n * n.transpose() * 0.999;
        let e = symmetric_eigen(&m);
        assert_relative_eq!(e.values[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(e.values[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(e.values[2], 0.001, epsilon = 1e-12);
        assert_relative_eq!(e.min_vector().dot(&n).abs(), 1.0, epsilon = 1e-9);
        for i in 0..3 {
            assert!((m * e.vectors[i] - e.vectors[i] * e.values[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn rank_one_has_tiny_trailing_eigenvalues() {
        let n = Vector3::new(0.3, -0.5, 0.81).normalize();
        let m = n * n.transpose() * 1e3;
        let v = symmetric_eigenvalues(&m);
        assert_relative_eq!(v[0], 1e3, epsilon = 1e-9);
        assert!(v[1].abs() < 1e-10 && v[2].abs() < 1e-10, "{v:?}");
    }

    #[test]
    fn zero_matrix() {
        let e = symmetric_eigen(&Matrix3::zeros());
        assert_eq!(e.values, [0.0, 0.0, 0.0]);
    }
}
