//! Point-cloud containers, rigid poses, spatial indexing and the voxel-level
//! set operations (downsampling, subtraction, Jaccard overlap).

mod kdtree;
pub mod ply;

use std::collections::{HashMap, HashSet};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg;

pub use kdtree::KdTree;

pub type Point3 = nalgebra::Point3<f64>;

/// Default plane-to-plane covariance regularizer (eigenvalue along the normal).
pub const PLANE_EPSILON: f64 = 1e-3;

/// Ordered points with optional per-point normals and covariances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Vector3<f64>>>,
    covariances: Option<Vec<Matrix3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            normals: None,
            covariances: None,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_normals(mut self, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(invalid(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(invalid(format!("normal {i} is not unit length")));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_covariances(mut self, covariances: Vec<Matrix3<f64>>) -> Result<Self> {
        if covariances.len() != self.points.len() {
            return Err(invalid(format!(
                "{} covariances for {} points",
                covariances.len(),
                self.points.len()
            )));
        }
        for (i, c) in covariances.iter().enumerate() {
            let scale = c.abs().max().max(1.0);
            if linalg::asymmetry(c) > 1e-9 * scale {
                return Err(invalid(format!("covariance {i} is not symmetric")));
            }
            if linalg::symmetric_eigenvalues(c)[2] < -1e-9 * scale {
                return Err(invalid(format!(
                    "covariance {i} is not positive semidefinite"
                )));
            }
        }
        self.covariances = Some(covariances);
        Ok(self)
    }

    /// Attach normals and derive the regularized plane covariances
    /// `I − (1 − ε)·n nᵀ` (eigenvalues `{1, 1, ε}`).
    pub fn with_plane_normals(self, normals: Vec<Vector3<f64>>, epsilon: f64) -> Result<Self> {
        let covs = normals
            .iter()
            .map(|n| plane_covariance(n, epsilon))
            .collect();
        self.with_normals(normals)?.with_covariances(covs)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn covariances(&self) -> Option<&[Matrix3<f64>]> {
        self.covariances.as_deref()
    }

    /// Sub-cloud of the given indices, carrying attributes along.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
            covariances: self
                .covariances
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    /// Concatenate clouds; attributes survive only if every part carries them.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a PointCloud>) -> Self {
        let parts: Vec<&PointCloud> = parts.into_iter().collect();
        let points = parts
            .iter()
            .flat_map(|c| c.points.iter().copied())
            .collect();
        let normals = parts
            .iter()
            .map(|c| c.normals.as_ref())
            .collect::<Option<Vec<_>>>()
            .map(|ns| ns.into_iter().flatten().copied().collect());
        let covariances = parts
            .iter()
            .map(|c| c.covariances.as_ref())
            .collect::<Option<Vec<_>>>()
            .map(|cs| cs.into_iter().flatten().copied().collect());
        Self {
            points,
            normals,
            covariances,
        }
    }

    /// Approximate in-memory footprint used by the deterministic memory proxy.
    pub fn byte_size(&self) -> usize {
        let n = self.points.len();
        let mut bytes = n * 3 * 8;
        if self.normals.is_some() {
            bytes += n * 3 * 8;
        }
        if self.covariances.is_some() {
            bytes += n * 9 * 8;
        }
        bytes
    }
}

pub fn plane_covariance(normal: &Vector3<f64>, epsilon: f64) -> Matrix3<f64> {
    Matrix3::identity() - normal * normal.transpose() * (1.0 - epsilon)
}

/// Rigid transform: translation in meters plus a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct Pose {
    translation: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
}

/// Wire form of a pose: `t = [x, y, z]`, `q = [w, x, y, z]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoseRecord {
    pub t: [f64; 3],
    pub q: [f64; 4],
}

impl TryFrom<PoseRecord> for Pose {
    type Error = crate::Error;

    fn try_from(r: PoseRecord) -> Result<Self> {
        Pose::new(Vector3::from(r.t), r.q)
    }
}

impl From<Pose> for PoseRecord {
    fn from(p: Pose) -> Self {
        let q = p.rotation.quaternion();
        PoseRecord {
            t: p.translation.into(),
            q: [q.w, q.i, q.j, q.k],
        }
    }
}

impl Pose {
    /// Quaternion given as `[w, x, y, z]`; must be unit within 1e-9.
    pub fn new(translation: Vector3<f64>, q: [f64; 4]) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(invalid("pose translation is not finite"));
        }
        if !((quat.norm() - 1.0).abs() <= 1e-9) {
            return Err(invalid(format!(
                "quaternion norm {} is not 1 ± 1e-9",
                quat.norm()
            )));
        }
        Ok(Self {
            translation,
            rotation: UnitQuaternion::new_unchecked(quat),
        })
    }

    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            translation: t,
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_parts(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self {
            translation: -(inv * self.translation),
            rotation: inv,
        }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }
}

/// Integer voxel coordinates `floor(coord / resolution)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelKey {
    pub fn of(p: &Point3, resolution: f64) -> Self {
        Self {
            ix: (p.x / resolution).floor() as i64,
            iy: (p.y / resolution).floor() as i64,
            iz: (p.z / resolution).floor() as i64,
        }
    }

    pub fn center(&self, resolution: f64) -> Point3 {
        Point3::new(
            (self.ix as f64 + 0.5) * resolution,
            (self.iy as f64 + 0.5) * resolution,
            (self.iz as f64 + 0.5) * resolution,
        )
    }
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive, got {value}")))
    }
}

/// One centroid per occupied voxel, in order of first occupancy.
pub fn voxel_downsample(cloud: &PointCloud, resolution: f64) -> Result<PointCloud> {
    check_positive("voxel resolution", resolution)?;
    let mut slots: HashMap<VoxelKey, usize> = HashMap::new();
    let mut sums: Vec<(Vector3<f64>, usize)> = Vec::new();
    for p in cloud.points() {
        let key = VoxelKey::of(p, resolution);
        let slot = *slots.entry(key).or_insert_with(|| {
            sums.push((Vector3::zeros(), 0));
            sums.len() - 1
        });
        sums[slot].0 += p.coords;
        sums[slot].1 += 1;
    }
    PointCloud::new(
        sums.into_iter()
            .map(|(s, n)| Point3::from(s / n as f64))
            .collect(),
    )
}

pub fn occupied_voxels(cloud: &PointCloud, resolution: f64) -> HashSet<VoxelKey> {
    cloud
        .points()
        .iter()
        .map(|p| VoxelKey::of(p, resolution))
        .collect()
}

/// Voxelized 3D Jaccard index `|V_a ∩ V_b| / |V_a ∪ V_b|`.
pub fn jaccard_index(a: &PointCloud, b: &PointCloud, resolution: f64) -> Result<f64> {
    check_positive("voxel resolution", resolution)?;
    if a.is_empty() && b.is_empty() {
        return Err(invalid("jaccard index of two empty clouds is undefined"));
    }
    let va = occupied_voxels(a, resolution);
    let vb = occupied_voxels(b, resolution);
    let inter = va.intersection(&vb).count();
    let union = va.len() + vb.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// A cloud together with its kd-tree.
#[derive(Debug, Clone)]
pub struct IndexedCloud {
    cloud: PointCloud,
    tree: KdTree,
}

impl IndexedCloud {
    pub fn new(cloud: PointCloud) -> Self {
        let tree = KdTree::build(cloud.points());
        Self { cloud, tree }
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn tree(&self) -> &KdTree {
        &self.tree
    }

    pub fn into_cloud(self) -> PointCloud {
        self.cloud
    }

    pub fn nearest_within(&self, query: &Point3, max_dist: f64) -> Option<(usize, f64)> {
        self.tree.nearest_within(query, max_dist)
    }
}

/// Nearest point of an indexed cloud within `max_dist`.
pub fn nearest_neighbor(
    index: &IndexedCloud,
    query: &Point3,
    max_dist: f64,
) -> Option<(usize, f64)> {
    index.nearest_within(query, max_dist)
}

/// Apply `p → R p + t`; normals are rotated and covariances conjugated.
pub fn transform_cloud(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    let rot = pose.rotation.to_rotation_matrix();
    let r = rot.matrix();
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| pose.transform_point(p))
            .collect(),
        normals: cloud
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| r * n).collect()),
        covariances: cloud
            .covariances
            .as_ref()
            .map(|cs| cs.iter().map(|c| r * c * r.transpose()).collect()),
    }
}

/// Points of `a` with no neighbor in `b` within `radius`, order preserved.
pub fn point_set_subtract(a: &PointCloud, b: &PointCloud, radius: f64) -> Result<PointCloud> {
    check_positive("subtraction radius", radius)?;
    let tree = KdTree::build(b.points());
    let keep: Vec<usize> = (0..a.len())
        .filter(|&i| !tree.any_within(&a.points[i], radius))
        .collect();
    Ok(a.select(&keep))
}

/// Fit per-point normals from the `k` nearest neighbors (the point itself
/// included) and attach the regularized plane covariances.
///
/// Normals are sign-canonicalized so their largest-magnitude component is
/// positive.
pub fn estimate_normals_covariances(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    estimate_normals_with_epsilon(cloud, k, PLANE_EPSILON)
}

pub fn estimate_normals_with_epsilon(
    cloud: &PointCloud,
    k: usize,
    epsilon: f64,
) -> Result<PointCloud> {
    if k < 3 {
        return Err(invalid(format!("normal estimation needs k ≥ 3, got {k}")));
    }
    if cloud.len() < k {
        return Err(invalid(format!(
            "normal estimation needs at least {k} points, cloud has {}",
            cloud.len()
        )));
    }
    let tree = KdTree::build(cloud.points());
    let normals: Vec<Vector3<f64>> = cloud
        .points()
        .iter()
        .map(|p| {
            let nbrs = tree.k_nearest(p, k);
            let mean = nbrs.iter().fold(Vector3::zeros(), |acc, &(i, _)| {
                acc + cloud.points[i].coords
            }) / nbrs.len() as f64;
            let cov = nbrs.iter().fold(Matrix3::zeros(), |acc, &(i, _)| {
                let d = cloud.points[i].coords - mean;
                acc + d * d.transpose()
            }) / nbrs.len() as f64;
            canonical_sign(linalg::symmetric_eigen(&cov).min_vector())
        })
        .collect();
    PointCloud {
        points: cloud.points.clone(),
        normals: None,
        covariances: None,
    }
    .with_plane_normals(normals, epsilon)
}

fn canonical_sign(n: Vector3<f64>) -> Vector3<f64> {
    let n = n.normalize();
    let lead = n.iamax();
    if n[lead] < 0.0 {
        -n
    } else {
        n
    }
}
