//! Scan descriptors on the unit hypersphere.
//!
//! Two deterministic backends are provided: a range-image histogram that
//! summarizes scan appearance, and an oracle that embeds an externally
//! supplied 3-D tag so tests can dictate similarity exactly.

use nalgebra::{DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::PointCloud;

pub const DEFAULT_DIM: usize = 256;

const UNIT_TOLERANCE: f64 = 1e-9;

/// A unit-norm descriptor vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    /// Normalize an arbitrary non-zero vector onto the unit sphere.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(invalid("cannot normalize a zero or non-finite descriptor"));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wrap a vector that must already be unit norm (± 1e-9).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(invalid(format!("descriptor norm {norm} is not 1 ± 1e-9")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance to another descriptor of the same dimension.
    ///
    /// Unchecked fast path for inner loops; see [`descriptor_distance`].
    #[inline]
    pub fn distance(&self, other: &Descriptor) -> f64 {
        euclidean(&self.0, &other.0)
    }
}

#[inline]
pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Checked Euclidean distance between unit descriptors, in `[0, 2]`.
pub fn descriptor_distance(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid(format!(
            "descriptor dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    for d in [a, b] {
        if !((d.norm() - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(invalid("descriptor is not unit norm"));
        }
    }
    Ok(a.distance(b))
}

/// Spherical projection of a sensor-frame cloud; `0` marks cells with no return.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    rows: usize,
    cols: usize,
    ranges: Vec<f64>,
}

impl RangeImage {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.ranges[row * self.cols + col]
    }

    pub fn ranges(&self) -> &[f64] {
        &self.ranges
    }
}

/// Project onto a `rows × cols` grid. Azimuth bins cover `[−π, π)`; elevation
/// bins cover `[−fov/2, +fov/2]` top row first. Each cell keeps its nearest
/// return; points beyond `max_range`, outside the field of view, or at the
/// origin are dropped.
pub fn project_range_image(
    cloud: &PointCloud,
    rows: usize,
    cols: usize,
    max_range: f64,
    vertical_fov_deg: f64,
) -> RangeImage {
    let rows = rows.max(1);
    let cols = cols.max(1);
    let mut ranges = vec![0.0; rows * cols];
    let half = vertical_fov_deg.to_radians() / 2.0;
    let fov = 2.0 * half;
    for p in cloud.points() {
        let r = p.coords.norm();
        if !(r > 0.0) || r > max_range {
            continue;
        }
        let elevation = (p.z / r).clamp(-1.0, 1.0).asin();
        if elevation > half + 1e-12 || elevation < -half - 1e-12 {
            continue;
        }
        let row = if fov > 0.0 {
            (((half - elevation) / fov) * rows as f64)
                .floor()
                .clamp(0.0, (rows - 1) as f64) as usize
        } else {
            0
        };
        let azimuth = p.y.atan2(p.x);
        let mut col = (((azimuth + std::f64::consts::PI) / std::f64::consts::TAU) * cols as f64)
            .floor() as usize;
        if col >= cols {
            col = 0; // azimuth == π wraps onto −π
        }
        let cell = &mut ranges[row * cols + col];
        if *cell == 0.0 || r < *cell {
            *cell = r;
        }
    }
    RangeImage { rows, cols, ranges }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeHistogramParams {
    pub rows: usize,
    pub cols: usize,
    pub max_range: f64,
    pub vertical_fov_deg: f64,
    pub dim: usize,
}

impl Default for RangeHistogramParams {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 64,
            max_range: 60.0,
            vertical_fov_deg: 45.0,
            dim: DEFAULT_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub seed: u64,
    pub dim: usize,
    /// Angular frequency (rad per meter) applied to each tag coordinate.
    pub scale: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: DEFAULT_DIM,
            scale: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DescriptorBackend {
    RangeHistogram(RangeHistogramParams),
    Oracle(OracleParams),
}

impl Default for DescriptorBackend {
    fn default() -> Self {
        Self::RangeHistogram(RangeHistogramParams::default())
    }
}

impl DescriptorBackend {
    pub fn dim(&self) -> usize {
        match self {
            Self::RangeHistogram(p) => p.dim,
            Self::Oracle(p) => p.dim,
        }
    }

    /// Describe a scan. The oracle backend ignores the cloud and embeds `tag`.
    pub fn describe(&self, cloud: &PointCloud, tag: Option<&Vector3<f64>>) -> Result<Descriptor> {
        match self {
            Self::RangeHistogram(p) => range_histogram(cloud, p),
            Self::Oracle(p) => {
                let tag = tag.ok_or_else(|| invalid("oracle backend requires a tag"))?;
                oracle_embedding(tag, p)
            }
        }
    }
}

pub fn compute_descriptor(
    cloud: &PointCloud,
    backend: &DescriptorBackend,
    tag: Option<&Vector3<f64>>,
) -> Result<Descriptor> {
    backend.describe(cloud, tag)
}

fn range_histogram(cloud: &PointCloud, p: &RangeHistogramParams) -> Result<Descriptor> {
    if cloud.is_empty() {
        return Err(invalid(
            "range-histogram descriptor needs a non-empty cloud",
        ));
    }
    if p.rows == 0 || p.cols == 0 || p.dim == 0 || !(p.max_range > 0.0) {
        return Err(invalid("range-histogram parameters must be positive"));
    }
    let image = project_range_image(cloud, p.rows, p.cols, p.max_range, p.vertical_fov_deg);
    let mut means = Vec::with_capacity(p.cols);
    let mut occupancy = Vec::with_capacity(p.cols);
    let mut variances = Vec::with_capacity(p.cols);
    for c in 0..p.cols {
        let hits: Vec<f64> = (0..p.rows)
            .map(|r| image.get(r, c))
            .filter(|&v| v > 0.0)
            .map(|v| v / p.max_range)
            .collect();
        let n = hits.len() as f64;
        let mean = if hits.is_empty() {
            0.0
        } else {
            hits.iter().sum::<f64>() / n
        };
        let var = if hits.is_empty() {
            0.0
        } else {
            hits.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / n
        };
        means.push(mean);
        occupancy.push(n / p.rows as f64);
        variances.push(var);
    }
    // Each statistic block is scaled to unit length so that near-constant
    // occupancy cannot swamp the range profile.
    unit_block(&mut means);
    unit_block(&mut occupancy);
    unit_block(&mut variances);
    let mut values = Vec::with_capacity(p.dim);
    values.extend_from_slice(&means);
    values.extend_from_slice(&occupancy);
    values.extend_from_slice(&variances);
    let bins = p.dim.saturating_sub(values.len());
    if bins > 0 {
        let mut hist = vec![0.0; bins];
        let hits: Vec<f64> = image
            .ranges()
            .iter()
            .copied()
            .filter(|&v| v > 0.0)
            .collect();
        for r in &hits {
            let b = ((r / p.max_range) * bins as f64)
                .floor()
                .min((bins - 1) as f64) as usize;
            hist[b] += 1.0;
        }
        if !hits.is_empty() {
            for h in &mut hist {
                *h /= hits.len() as f64;
            }
        }
        unit_block(&mut hist);
        values.extend(hist);
    }
    values.truncate(p.dim);
    Descriptor::normalized(values)
        .map_err(|_| invalid("cloud has no returns inside the range image"))
}

fn unit_block(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Tag coordinates become three phase pairs `(cos sθ, sin sθ)`, padded to
/// `dim`, then rotated by a fixed seeded orthogonal map. Distances are a
/// monotone function of per-axis tag offsets while `s·|Δ| ≤ π`.
fn oracle_embedding(tag: &Vector3<f64>, p: &OracleParams) -> Result<Descriptor> {
    if p.dim < 6 {
        return Err(invalid("oracle descriptors need at least 6 dimensions"));
    }
    let mut v = DVector::<f64>::zeros(p.dim);
    let k = 1.0 / 3f64.sqrt();
    for axis in 0..3 {
        let theta = p.scale * tag[axis];
        v[2 * axis] = k * theta.cos();
        v[2 * axis + 1] = k * theta.sin();
    }
    // three Householder reflections drawn from the seed
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    for _ in 0..3 {
        let u = DVector::<f64>::from_fn(p.dim, |_, _| StandardNormal.sample(&mut rng));
        let u = u.normalize();
        let proj = u.dot(&v);
        v -= &u * (2.0 * proj);
    }
    Descriptor::normalized(v.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    #[test]
    fn range_image_examples() {
        let img = project_range_image(&PointCloud::empty(), 4, 8, 60.0, 45.0);
        assert!(img.ranges().iter().all(|&r| r == 0.0));

        let img = project_range_image(&cloud(&[[1.0, 0.0, 0.0]]), 4, 8, 60.0, 45.0);
        let nz: Vec<f64> = img.ranges().iter().copied().filter(|&r| r != 0.0).collect();
        assert_eq!(nz, vec![1.0]);

        let img = project_range_image(
            &cloud(&[[3.0, 0.0, 0.0], [2.0, 0.0, 0.0]]),
            4,
            8,
            60.0,
            45.0,
        );
        let nz: Vec<f64> = img.ranges().iter().copied().filter(|&r| r != 0.0).collect();
        assert_eq!(nz, vec![2.0]);

        let img = project_range_image(&cloud(&[[100.0, 0.0, 0.0]]), 4, 8, 60.0, 45.0);
        assert!(img.ranges().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn azimuth_pi_wraps_to_first_column() {
        let img = project_range_image(&cloud(&[[-1.0, 0.0, 0.0]]), 1, 8, 60.0, 45.0);
        assert_eq!(img.get(0, 0), 1.0);
    }

    #[test]
    fn distance_examples() {
        let a = Descriptor::from_unit(vec![1.0, 0.0, 0.0]).unwrap();
        let b = Descriptor::from_unit(vec![-1.0, 0.0, 0.0]).unwrap();
        let c = Descriptor::from_unit(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(descriptor_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(descriptor_distance(&a, &b).unwrap(), 2.0);
        assert_relative_eq!(
            descriptor_distance(&a, &c).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-15
        );
        assert!(Descriptor::from_unit(vec![2.0, 0.0]).is_err());
        let short = Descriptor::from_unit(vec![1.0, 0.0]).unwrap();
        assert!(descriptor_distance(&a, &short).is_err());
    }

    #[test]
    fn range_histogram_is_unit_and_deterministic() {
        let c = cloud(&[[5.0, 1.0, 0.2], [-3.0, 2.0, -0.5], [0.0, -7.0, 1.0]]);
        let backend = DescriptorBackend::default();
        let a = backend.describe(&c, None).unwrap();
        let b = backend.describe(&c, None).unwrap();
        assert_eq!(a.dim(), DEFAULT_DIM);
        assert!((a.norm() - 1.0).abs() <= 1e-9);
        assert_eq!(a, b);
        assert_eq!(a.distance(&b), 0.0);
        assert!(backend.describe(&PointCloud::empty(), None).is_err());
    }

    #[test]
    fn oracle_tags() {
        let backend = DescriptorBackend::Oracle(OracleParams::default());
        let empty = PointCloud::empty();
        let ta = Vector3::new(1.0, 2.0, 0.0);
        let tb = Vector3::new(4.0, 2.0, 0.0);
        let a1 = backend.describe(&empty, Some(&ta)).unwrap();
        let a2 = backend.describe(&empty, Some(&ta)).unwrap();
        let b = backend.describe(&empty, Some(&tb)).unwrap();
        assert_eq!(a1.distance(&a2), 0.0);
        assert!(a1.distance(&b) > 0.0);
        assert!(backend.describe(&empty, None).is_err());
    }

    #[test]
    fn oracle_distance_monotone_along_an_axis() {
        let p = OracleParams::default();
        let origin = oracle_embedding(&Vector3::zeros(), &p).unwrap();
        let mut last = 0.0;
        for step in 1..40 {
            let d = origin
                .distance(&oracle_embedding(&Vector3::new(step as f64, 0.0, 0.0), &p).unwrap());
            assert!(d > last);
            last = d;
        }
    }

    proptest! {
        #[test]
        fn triangle_inequality(seed in 0u64..1000, x in prop::array::uniform3(-50.0f64..50.0), y in prop::array::uniform3(-50.0f64..50.0), z in prop::array::uniform3(-50.0f64..50.0)) {
            let p = OracleParams { seed, dim: 16, scale: 0.05 };
            let a = oracle_embedding(&Vector3::from(x), &p).unwrap();
            let b = oracle_embedding(&Vector3::from(y), &p).unwrap();
            let c = oracle_embedding(&Vector3::from(z), &p).unwrap();
            prop_assert!((a.norm() - 1.0).abs() <= 1e-9);
            prop_assert!(a.distance(&c) <= a.distance(&b) + b.distance(&c) + 1e-12);
            prop_assert!(a.distance(&b) <= 2.0);
        }
    }
}
