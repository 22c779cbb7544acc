//! Static 3-D kd-tree over a point slice.
//!
//! Nodes are laid out implicitly over a permuted index array: the subtree for
//! `[lo, hi)` stores its splitting point at `mid = (lo + hi) / 2` and splits on
//! axis `depth % 3`. Every query breaks distance ties by the lowest original
//! point index.

use super::Point3;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<u32>,
}

#[derive(Clone, Copy)]
struct Best {
    dist2: f64,
    index: u32,
}

impl Best {
    fn beats(&self, dist2: f64, index: u32) -> bool {
        dist2 < self.dist2 || (dist2 == self.dist2 && index < self.index)
    }
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        assert!(
            points.len() < u32::MAX as usize,
            "kd-tree limited to u32 indices"
        );
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<u32> = (0..coords.len() as u32).collect();
        build_rec(&coords, &mut order, 0);
        Self {
            points: coords,
            order,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Closest point with distance `≤ max_dist`, as `(index, distance)`.
    pub fn nearest_within(&self, query: &Point3, max_dist: f64) -> Option<(usize, f64)> {
        if self.points.is_empty() || !(max_dist >= 0.0) {
            return None;
        }
        let q = [query.x, query.y, query.z];
        let mut best = Best {
            dist2: max_dist * max_dist,
            index: u32::MAX,
        };
        self.nearest_rec(&q, 0, self.order.len(), 0, &mut best);
        (best.index != u32::MAX).then(|| (best.index as usize, best.dist2.sqrt()))
    }

    pub fn nearest(&self, query: &Point3) -> Option<(usize, f64)> {
        self.nearest_within(query, f64::INFINITY)
    }

    /// True when some point lies within `radius` (inclusive).
    pub fn any_within(&self, query: &Point3, radius: f64) -> bool {
        if self.points.is_empty() {
            return false;
        }
        let q = [query.x, query.y, query.z];
        self.any_rec(&q, radius * radius, 0, self.order.len(), 0)
    }

    /// The `k` nearest points sorted by `(distance, index)`.
    pub fn k_nearest(&self, query: &Point3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut heap: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.knn_rec(&q, k, 0, self.order.len(), 0, &mut heap);
        heap.into_iter()
            .map(|(d2, i)| (i as usize, d2.sqrt()))
            .collect()
    }

    fn nearest_rec(&self, q: &[f64; 3], lo: usize, hi: usize, depth: usize, best: &mut Best) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx as usize];
        let d2 = dist2(p, q);
        if best.beats(d2, idx) {
            best.dist2 = d2;
            best.index = idx;
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(q, near.0, near.1, depth + 1, best);
        if diff * diff <= best.dist2 {
            self.nearest_rec(q, far.0, far.1, depth + 1, best);
        }
    }

    fn any_rec(&self, q: &[f64; 3], r2: f64, lo: usize, hi: usize, depth: usize) -> bool {
        if lo >= hi {
            return false;
        }
        let mid = (lo + hi) / 2;
        let p = &self.points[self.order[mid] as usize];
        if dist2(p, q) <= r2 {
            return true;
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.any_rec(q, r2, near.0, near.1, depth + 1)
            || (diff * diff <= r2 && self.any_rec(q, r2, far.0, far.1, depth + 1))
    }

    fn knn_rec(
        &self,
        q: &[f64; 3],
        k: usize,
        lo: usize,
        hi: usize,
        depth: usize,
        heap: &mut Vec<(f64, u32)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx as usize];
        let d2 = dist2(p, q);
        let worst = heap.last().copied();
        let admit =
            heap.len() < k || worst.is_some_and(|(wd, wi)| d2 < wd || (d2 == wd && idx < wi));
        if admit {
            let pos = heap.partition_point(|&(hd, hi_)| hd < d2 || (hd == d2 && hi_ < idx));
            heap.insert(pos, (d2, idx));
            heap.truncate(k);
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(q, k, near.0, near.1, depth + 1, heap);
        let bound = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.last().map_or(f64::INFINITY, |w| w.0)
        };
        if diff * diff <= bound {
            self.knn_rec(q, k, far.0, far.1, depth + 1, heap);
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn build_rec(points: &[[f64; 3]], order: &mut [u32], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    let (left, rest) = order.split_at_mut(mid);
    build_rec(points, left, depth + 1);
    build_rec(points, &mut rest[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_nearest(points: &[Point3], q: &Point3, max: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm();
            if d <= max && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best
    }

    #[test]
    fn empty_tree() {
        let t = KdTree::build(&[]);
        assert!(t.nearest(&Point3::origin()).is_none());
        assert!(!t.any_within(&Point3::origin(), 10.0));
        assert!(t.k_nearest(&Point3::origin(), 3).is_empty());
    }

    #[test]
    fn duplicate_points_resolve_to_lowest_index() {
        let pts = vec![Point3::new(1.0, 0.0, 0.0); 7];
        let t = KdTree::build(&pts);
        assert_eq!(t.nearest(&Point3::origin()).unwrap().0, 0);
        let knn: Vec<usize> = t
            .k_nearest(&Point3::origin(), 3)
            .iter()
            .map(|x| x.0)
            .collect();
        assert_eq!(knn, vec![0, 1, 2]);
    }

    fn arb_points() -> impl Strategy<Value = Vec<Point3>> {
        prop::collection::vec(
            (-5i32..5, -5i32..5, -5i32..5)
                .prop_map(|(x, y, z)| Point3::new(x as f64 * 0.5, y as f64 * 0.5, z as f64 * 0.5)),
            1..60,
        )
    }

    proptest! {
        #[test]
        fn nearest_matches_exhaustive(points in arb_points(), qx in -3.0f64..3.0, qy in -3.0f64..3.0, qz in -3.0f64..3.0, max in 0.1f64..4.0) {
            let t = KdTree::build(&points);
            let q = Point3::new(qx, qy, qz);
            let got = t.nearest_within(&q, max);
            let want = brute_nearest(&points, &q, max);
            prop_assert_eq!(got.map(|g| g.0), want.map(|w| w.0));
            prop_assert_eq!(t.any_within(&q, max), want.is_some());
        }

        #[test]
        fn knn_matches_exhaustive(points in arb_points(), k in 1usize..8) {
            let t = KdTree::build(&points);
            let q = Point3::new(0.3, -0.2, 0.1);
            let mut all: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, (p - q).norm_squared())).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let want: Vec<usize> = all.iter().take(k).map(|a| a.0).collect();
            let got: Vec<usize> = t.k_nearest(&q, k).iter().map(|a| a.0).collect();
            prop_assert_eq!(got, want);
        }
    }
}
