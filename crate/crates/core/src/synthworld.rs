//! Synthetic environments built from axis-aligned panels and vertical
//! cylinders, trajectories through them, and ray-cast LiDAR scans.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Point3, PointCloud, Pose};

/// Rays must travel at least this far to register a hit.
const MIN_HIT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// The two in-plane coordinates, in increasing axis order.
    fn others(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }

    pub fn unit(self) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        v[self.index()] = 1.0;
        v
    }
}

/// Rectangle on the plane `coord[axis] = offset`, bounded by `min..max` in the
/// two remaining coordinates (taken in x, y, z order).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub axis: Axis,
    pub offset: f64,
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Panel {
    pub fn new(axis: Axis, offset: f64, min: [f64; 2], max: [f64; 2]) -> Self {
        Self {
            axis,
            offset,
            min,
            max,
        }
    }

    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]).max(0.0) * (self.max[1] - self.min[1]).max(0.0)
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let a = self.axis.index();
        if d[a] == 0.0 {
            return None;
        }
        let t = (self.offset - o[a]) / d[a];
        if !(t > MIN_HIT) {
            return None;
        }
        let (u, v) = self.axis.others();
        let pu = o[u] + t * d[u];
        let pv = o[v] + t * d[v];
        (pu >= self.min[0] && pu <= self.max[0] && pv >= self.min[1] && pv <= self.max[1])
            .then_some(t)
    }
}

/// Vertical cylinder (side surface only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub radius: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Cylinder {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let (ox, oy) = (o.x - self.center[0], o.y - self.center[1]);
        let a = d.x * d.x + d.y * d.y;
        if a == 0.0 {
            return None;
        }
        let b = ox * d.x + oy * d.y;
        let c = ox * ox + oy * oy - self.radius * self.radius;
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| {
            let z = o.z + t * d.z;
            t > MIN_HIT && z >= self.z_min && z <= self.z_max
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    #[serde(default)]
    pub panels: Vec<Panel>,
    #[serde(default)]
    pub cylinders: Vec<Cylinder>,
}

impl WorldSpec {
    /// The same geometry moved by `v`.
    pub fn translated(mut self, v: &Vector3<f64>) -> Self {
        for p in &mut self.panels {
            let (u, w) = p.axis.others();
            p.offset += v[p.axis.index()];
            p.min = [p.min[0] + v[u], p.min[1] + v[w]];
            p.max = [p.max[0] + v[u], p.max[1] + v[w]];
        }
        for c in &mut self.cylinders {
            c.center = [c.center[0] + v.x, c.center[1] + v.y];
            c.z_min += v.z;
            c.z_max += v.z;
        }
        self
    }
}

/// Immutable, validated world with a ray query.
#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
}

pub fn build_world(spec: WorldSpec) -> Result<World> {
    if spec.panels.is_empty() && spec.cylinders.is_empty() {
        return Err(invalid("world has no panels or cylinders"));
    }
    for (i, p) in spec.panels.iter().enumerate() {
        let finite = p.offset.is_finite() && p.min.iter().chain(&p.max).all(|v| v.is_finite());
        if !finite || !(p.area() > 0.0) {
            return Err(invalid(format!(
                "panel {i} has zero area or non-finite bounds"
            )));
        }
    }
    for (i, c) in spec.cylinders.iter().enumerate() {
        if !(c.radius > 0.0 && c.z_max > c.z_min) {
            return Err(invalid(format!("cylinder {i} is degenerate")));
        }
    }
    Ok(World { spec })
}

impl World {
    /// An empty world: every ray misses.
    pub fn empty() -> Self {
        Self {
            spec: WorldSpec::default(),
        }
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    /// Distance to the nearest surface along unit direction `d`, if within
    /// `max_range`.
    pub fn intersect(
        &self,
        origin: &Vector3<f64>,
        d: &Vector3<f64>,
        max_range: f64,
    ) -> Option<f64> {
        let mut best = f64::INFINITY;
        for p in &self.spec.panels {
            if let Some(t) = p.intersect(origin, d) {
                best = best.min(t);
            }
        }
        for c in &self.spec.cylinders {
            if let Some(t) = c.intersect(origin, d) {
                best = best.min(t);
            }
        }
        (best <= max_range).then_some(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamPattern {
    pub rings: usize,
    pub steps: usize,
    pub vertical_fov_deg: f64,
    pub max_range: f64,
    pub noise_sigma: f64,
}

impl Default for BeamPattern {
    fn default() -> Self {
        Self {
            rings: 16,
            steps: 360,
            vertical_fov_deg: 45.0,
            max_range: 60.0,
            noise_sigma: 0.01,
        }
    }
}

impl BeamPattern {
    pub fn validate(&self) -> Result<()> {
        if self.rings == 0 || self.steps == 0 {
            return Err(invalid("beam pattern needs at least one ring and one step"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.max_range > 0.0) {
            return Err(invalid(
                "beam noise must be non-negative and range positive",
            ));
        }
        if !(self.vertical_fov_deg >= 0.0 && self.vertical_fov_deg < 180.0) {
            return Err(invalid("vertical field of view must be in [0, 180)"));
        }
        Ok(())
    }

    /// Sensor-frame unit ray directions, ring-major from the lowest ring.
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let fov = self.vertical_fov_deg.to_radians();
        let mut out = Vec::with_capacity(self.rings * self.steps);
        for r in 0..self.rings {
            let el = if self.rings == 1 {
                0.0
            } else {
                -fov / 2.0 + fov * r as f64 / (self.rings - 1) as f64
            };
            for s in 0..self.steps {
                let az = -PI + 2.0 * PI * s as f64 / self.steps as f64;
                out.push(Vector3::new(
                    el.cos() * az.cos(),
                    el.cos() * az.sin(),
                    el.sin(),
                ));
            }
        }
        out
    }
}

/// Cast every beam from `pose`; hits are returned in the sensor frame with
/// Gaussian range noise. Rays that miss are dropped.
pub fn raycast_scan(
    world: &World,
    pose: &Pose,
    pattern: &BeamPattern,
    seed: u64,
) -> Result<PointCloud> {
    pattern.validate()?;
    let noise = Normal::new(0.0, pattern.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = pose.translation();
    let rot = pose.rotation();
    let mut points = Vec::new();
    for d in pattern.directions() {
        let Some(r) = world.intersect(origin, &(rot * d), pattern.max_range) else {
            continue;
        };
        let r = if pattern.noise_sigma > 0.0 {
            r + noise.sample(&mut rng)
        } else {
            r
        };
        if r > 0.0 {
            points.push(Point3::from(d * r));
        }
    }
    PointCloud::new(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interval {
    Meters(f64),
    /// Converted to distance through the trajectory speed.
    Seconds(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Pose>,
    pub interval: Interval,
    /// Meters per second; sets scan timestamps.
    #[serde(default = "unit_speed")]
    pub speed: f64,
}

fn unit_speed() -> f64 {
    1.0
}

impl Trajectory {
    pub fn new(waypoints: Vec<Pose>, interval: Interval) -> Result<Self> {
        let t = Self {
            waypoints,
            interval,
            speed: 1.0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(invalid("trajectory has no waypoints"));
        }
        if self
            .waypoints
            .windows(2)
            .any(|w| (w[0].translation() - w[1].translation()).norm() == 0.0)
        {
            return Err(invalid("consecutive waypoints coincide"));
        }
        if !(self.speed > 0.0) {
            return Err(invalid("trajectory speed must be positive"));
        }
        if !(self.step() > 0.0 && self.step().is_finite()) {
            return Err(invalid("scan interval must be positive"));
        }
        Ok(())
    }

    fn step(&self) -> f64 {
        match self.interval {
            Interval::Meters(m) => m,
            Interval::Seconds(s) => s * self.speed,
        }
    }

    pub fn length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (w[1].translation() - w[0].translation()).norm())
            .sum()
    }

    /// Poses every `interval` along the polyline, starting at the first
    /// waypoint, paired with their arc length.
    pub fn samples(&self) -> Result<Vec<(f64, Pose)>> {
        self.validate()?;
        let step = self.step();
        let total = self.length();
        let count = ((total / step) + 1e-9).floor() as usize + 1;
        let mut out = Vec::with_capacity(count);
        let mut seg = 0;
        let mut seg_start = 0.0;
        for i in 0..count {
            let s = i as f64 * step;
            if self.waypoints.len() == 1 {
                out.push((s, self.waypoints[0]));
                continue;
            }
            loop {
                let len = (self.waypoints[seg + 1].translation()
                    - self.waypoints[seg].translation())
                .norm();
                if s <= seg_start + len + 1e-9 || seg + 2 >= self.waypoints.len() {
                    let f = ((s - seg_start) / len).clamp(0.0, 1.0);
                    let (a, b) = (&self.waypoints[seg], &self.waypoints[seg + 1]);
                    let t = a.translation() + (b.translation() - a.translation()) * f;
                    let q = a.rotation().slerp(b.rotation(), f);
                    out.push((s, Pose::from_parts(t, q)));
                    break;
                }
                seg_start += len;
                seg += 1;
            }
        }
        Ok(out)
    }

    /// Replace the waypoints with `n ≥ 2` points evenly spaced by arc length
    /// along the current polyline.
    pub fn resampled(&self, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid("need at least two waypoints"));
        }
        let total = self.length();
        let spacing = total / (n - 1) as f64;
        let dense = Trajectory {
            interval: Interval::Meters(spacing),
            speed: 1.0,
            ..self.clone()
        };
        let mut poses: Vec<Pose> = dense.samples()?.into_iter().map(|(_, p)| p).collect();
        poses.truncate(n);
        if poses.len() < n {
            poses.push(
                self.waypoints
                    .last()
                    .cloned()
                    .unwrap_or_else(Pose::identity),
            );
        }
        Trajectory {
            waypoints: poses,
            ..self.clone()
        }
        .validated()
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }
}

/// One simulated scan; the cloud is in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionScan {
    pub scan_id: u64,
    pub timestamp: f64,
    pub pose: Pose,
    pub cloud: PointCloud,
}

/// Noise seed for one scan of a session.
pub fn scan_seed(seed: u64, scan_id: u64) -> u64 {
    let mut z = seed ^ scan_id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_session(
    world: &World,
    trajectory: &Trajectory,
    pattern: &BeamPattern,
    seed: u64,
) -> Result<Vec<SessionScan>> {
    trajectory
        .samples()?
        .into_iter()
        .enumerate()
        .map(|(i, (s, pose))| {
            let id = i as u64;
            let cloud = raycast_scan(world, &pose, pattern, scan_seed(seed, id))?;
            Ok(SessionScan {
                scan_id: id,
                timestamp: s / trajectory.speed,
                pose,
                cloud,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    CornerRoom,
    Corridor,
    Loop,
    ForestProxy,
}

impl std::str::FromStr for Preset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corner-room" => Ok(Preset::CornerRoom),
            "corridor" => Ok(Preset::Corridor),
            "loop" => Ok(Preset::Loop),
            "forest-proxy" => Ok(Preset::ForestProxy),
            other => Err(invalid(format!(
                "unknown preset `{other}` (expected corner-room, corridor, loop, forest-proxy)"
            ))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::CornerRoom => "corner-room",
            Preset::Corridor => "corridor",
            Preset::Loop => "loop",
            Preset::ForestProxy => "forest-proxy",
        })
    }
}

/// Floor, ceiling and four walls of the box `[x0,x1]×[y0,y1]×[z0,z1]`; walls
/// face inward or outward identically since only geometry matters.
fn box_panels(x: [f64; 2], y: [f64; 2], z: [f64; 2], floor: bool, ceiling: bool) -> Vec<Panel> {
    let mut p = Vec::new();
    if floor {
        p.push(Panel::new(Axis::Z, z[0], [x[0], y[0]], [x[1], y[1]]));
    }
    if ceiling {
        p.push(Panel::new(Axis::Z, z[1], [x[0], y[0]], [x[1], y[1]]));
    }
    for xo in x {
        p.push(Panel::new(Axis::X, xo, [y[0], z[0]], [y[1], z[1]]));
    }
    for yo in y {
        p.push(Panel::new(Axis::Y, yo, [x[0], z[0]], [x[1], z[1]]));
    }
    p
}

const SENSOR_HEIGHT: f64 = 1.2;

/// Presets are laid out on round coordinates and then moved by this offset,
/// so that axis-aligned surfaces sit mid-voxel for 0.25, 0.5 and 1 m grids
/// rather than on cell boundaries where range noise flips occupancy.
const PRESET_ORIGIN: [f64; 3] = [0.375, 0.375, 0.125];

fn preset_origin() -> Vector3<f64> {
    Vector3::from(PRESET_ORIGIN)
}

fn at(x: f64, y: f64) -> Pose {
    Pose::from_translation(Vector3::new(x, y, SENSOR_HEIGHT) + preset_origin())
}

impl Preset {
    pub fn world(self, seed: u64) -> WorldSpec {
        self.layout(seed).translated(&preset_origin())
    }

    fn layout(self, seed: u64) -> WorldSpec {
        match self {
            Preset::CornerRoom => WorldSpec {
                panels: box_panels([-6.0, 6.0], [-5.0, 5.0], [0.0, 3.0], true, true),
                cylinders: Vec::new(),
            },
            Preset::Corridor => WorldSpec {
                panels: vec![
                    Panel::new(Axis::Z, 0.0, [-100.0, -2.0], [100.0, 2.0]),
                    Panel::new(Axis::Y, -2.0, [-100.0, 0.0], [100.0, 3.0]),
                    Panel::new(Axis::Y, 2.0, [-100.0, 0.0], [100.0, 3.0]),
                ],
                cylinders: Vec::new(),
            },
            Preset::Loop => {
                let mut panels = box_panels([-25.0, 25.0], [-18.0, 18.0], [0.0, 4.0], true, true);
                // central block, walls only
                panels.extend(box_panels(
                    [-10.0, 10.0],
                    [-5.0, 5.0],
                    [0.0, 4.0],
                    false,
                    false,
                ));
                // alcoves along the outer walls break the symmetry between sides
                panels.push(Panel::new(Axis::X, -12.0, [-18.0, 0.0], [-15.0, 4.0]));
                panels.push(Panel::new(Axis::Y, 14.0, [5.0, 0.0], [25.0, 4.0]));
                panels.push(Panel::new(Axis::X, 20.0, [-5.0, 0.0], [5.0, 2.0]));
                let cylinders = [
                    (-20.0, 13.0),
                    (0.0, -12.0),
                    (12.0, 9.0),
                    (-5.0, 10.0),
                    (21.0, -14.0),
                ]
                .into_iter()
                .map(|(x, y)| Cylinder {
                    center: [x, y],
                    radius: 0.6,
                    z_min: 0.0,
                    z_max: 4.0,
                })
                .collect();
                WorldSpec { panels, cylinders }
            }
            Preset::ForestProxy => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut cylinders = Vec::new();
                while cylinders.len() < 150 {
                    let x: f64 = rng.random_range(-45.0..45.0);
                    let y: f64 = rng.random_range(-45.0..45.0);
                    // keep the circular path clear
                    let r = (x * x + y * y).sqrt();
                    if (r - 20.0).abs() < 2.5 {
                        continue;
                    }
                    cylinders.push(Cylinder {
                        center: [x, y],
                        radius: rng.random_range(0.15..0.5),
                        z_min: 0.0,
                        z_max: rng.random_range(4.0..12.0),
                    });
                }
                WorldSpec {
                    panels: vec![Panel::new(Axis::Z, 0.0, [-50.0, -50.0], [50.0, 50.0])],
                    cylinders,
                }
            }
        }
    }

    /// Default path through the preset world; all poses share one heading.
    pub fn trajectory(self) -> Trajectory {
        let (waypoints, interval) = match self {
            Preset::CornerRoom => (
                vec![
                    at(-3.0, -2.0),
                    at(3.0, -2.0),
                    at(3.0, 2.0),
                    at(-3.0, 2.0),
                    at(-3.0, -1.5),
                ],
                0.5,
            ),
            Preset::Corridor => (vec![at(-40.0, 0.0), at(40.0, 0.0)], 2.0),
            Preset::Loop => {
                let lap = [
                    at(-17.0, -11.5),
                    at(17.0, -11.5),
                    at(17.0, 11.5),
                    at(-17.0, 11.5),
                ];
                let mut w: Vec<Pose> = lap.iter().chain(&lap).cloned().collect();
                w.push(lap[0]);
                (w, 0.75)
            }
            Preset::ForestProxy => {
                let w = (0..=24)
                    .map(|i| {
                        let a = 2.0 * PI * i as f64 / 24.0 - PI / 2.0;
                        at(20.0 * a.cos(), 20.0 * a.sin())
                    })
                    .collect();
                (w, 1.0)
            }
        };
        Trajectory {
            waypoints,
            interval: Interval::Meters(interval),
            speed: 1.0,
        }
    }
}
