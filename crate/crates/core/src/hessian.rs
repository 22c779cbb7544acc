//! Correspondences, the translational Gauss-Newton Hessian `H_tt = Σ w·n nᵀ`,
//! and the degeneracy score derived from its smallest eigenvalue.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{IndexedCloud, PointCloud};
use crate::linalg::{self, SymmetricEigen3};

/// Upper clamp on plane-to-plane weights.
pub const MAX_WEIGHT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub scan_index: usize,
    pub target_index: usize,
    pub normal: Vector3<f64>,
    pub weight: f64,
}

/// Plane-to-plane weight `1 / nᵀ(C_a + C_b)n`, clamped to `[0, MAX_WEIGHT]`.
/// Without a target covariance the weight is 1.
pub fn plane_weight(
    normal: &Vector3<f64>,
    scan_cov: Option<&Matrix3<f64>>,
    target_cov: Option<&Matrix3<f64>>,
) -> f64 {
    let Some(cb) = target_cov else {
        return 1.0;
    };
    let combined = match scan_cov {
        Some(ca) => ca + cb,
        None => *cb,
    };
    let denom = normal.dot(&(combined * normal));
    if denom > 0.0 {
        (1.0 / denom).min(MAX_WEIGHT)
    } else {
        MAX_WEIGHT
    }
}

/// Nearest target point within `max_dist` for every scan point.
pub fn find_correspondences(
    scan: &PointCloud,
    target: &IndexedCloud,
    max_dist: f64,
) -> Result<Vec<Correspondence>> {
    if !(max_dist > 0.0) {
        return Err(invalid(format!(
            "max correspondence distance must be positive, got {max_dist}"
        )));
    }
    let normals = target
        .cloud()
        .normals()
        .ok_or_else(|| invalid("correspondence target has no normals"))?;
    let target_covs = target.cloud().covariances();
    let scan_covs = scan.covariances();
    let mut out = Vec::new();
    for (i, p) in scan.points().iter().enumerate() {
        if let Some((j, _)) = target.nearest_within(p, max_dist) {
            let n = normals[j];
            out.push(Correspondence {
                scan_index: i,
                target_index: j,
                normal: n,
                weight: plane_weight(&n, scan_covs.map(|c| &c[i]), target_covs.map(|c| &c[j])),
            });
        }
    }
    Ok(out)
}

/// Symmetric PSD 3×3 translational Hessian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hessian3(Matrix3<f64>);

impl Default for Hessian3 {
    fn default() -> Self {
        Self::zero()
    }
}

impl Hessian3 {
    pub fn zero() -> Self {
        Self(Matrix3::zeros())
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Add one correspondence term `w·n nᵀ`.
    #[inline]
    pub fn accumulate(&mut self, normal: &Vector3<f64>, weight: f64) {
        for i in 0..3 {
            for j in i..3 {
                let v = weight * normal[i] * normal[j];
                self.0[(i, j)] += v;
                if i != j {
                    self.0[(j, i)] += v;
                }
            }
        }
    }

    pub fn eigenvalues(&self) -> [f64; 3] {
        linalg::symmetric_eigenvalues(&self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[2]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}

impl std::ops::Add for Hessian3 {
    type Output = Hessian3;

    fn add(self, rhs: Hessian3) -> Hessian3 {
        Hessian3(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Hessian3 {
    fn add_assign(&mut self, rhs: Hessian3) {
        self.0 += rhs.0;
    }
}

/// `H_tt = Σ w_c n_c n_cᵀ`: each correspondence's translational Jacobian row
/// is `√w_c · n_cᵀ`.
pub fn translational_hessian(correspondences: &[Correspondence]) -> Hessian3 {
    let mut h = Hessian3::zero();
    for c in correspondences {
        h.accumulate(&c.normal, c.weight);
    }
    h
}

/// Ordered eigen decomposition; rejects matrices asymmetric beyond 1e-12
/// relative to their largest entry.
pub fn eigen3(h: &Hessian3) -> Result<SymmetricEigen3> {
    let scale = h.0.abs().max().max(1.0);
    if linalg::asymmetry(&h.0) > 1e-12 * scale {
        return Err(invalid("matrix is not symmetric"));
    }
    Ok(linalg::symmetric_eigen(&h.0))
}

/// Degeneracy configuration: `m` (meters) and `z` (dimensionless) scale the
/// score, `beta` is the keyframe threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyParams {
    pub m: f64,
    pub z: f64,
    pub beta: f64,
}

impl DegeneracyParams {
    pub fn new(m: f64, z: f64, beta: f64) -> Result<Self> {
        if !(m > 0.0 && z > 0.0 && beta > 0.0) {
            return Err(invalid("degeneracy parameters m, z, beta must be positive"));
        }
        Ok(Self { m, z, beta })
    }

    pub fn is_degenerate(&self, d: f64) -> bool {
        d >= self.beta
    }
}

/// `d = m² / (λ_min · √z)`; a non-positive `λ_min` yields `+∞`.
pub fn degeneracy(h: &Hessian3, params: &DegeneracyParams) -> f64 {
    degeneracy_from_lambda(h.min_eigenvalue(), params.m, params.z)
}

pub fn degeneracy_from_lambda(lambda_min: f64, m: f64, z: f64) -> f64 {
    if lambda_min > 0.0 && z > 0.0 {
        m * m / (lambda_min * z.sqrt())
    } else {
        f64::INFINITY
    }
}

/// Uniform random subset of `⌈fraction·n⌉` points in original order.
pub fn subsample_scan(scan: &PointCloud, fraction: f64, seed: u64) -> Result<PointCloud> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = scan.len();
    if fraction == 1.0 {
        return Ok(scan.clone());
    }
    // guard against products like 0.1·30 = 3.0000000000000004
    let amount = ((fraction * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, amount).into_vec();
    idx.sort_unstable();
    Ok(scan.select(&idx))
}
