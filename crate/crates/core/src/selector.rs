//! Online keyframe selection with a descriptor-distance trigger, a degeneracy
//! trigger, and a running suboptimality ledger.

use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{invalid, Result};
use crate::geometry::{IndexedCloud, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trigger {
    /// First scan of a session.
    Bootstrap,
    /// Descriptor distance to every keyframe exceeded `alpha`.
    Feature,
    /// Alignment against the current submap was too poorly constrained.
    Degeneracy,
    /// Distance-threshold baseline policy.
    Distance,
}

impl Trigger {
    pub fn as_str(&self) -> &'static str {
        match self {
            Trigger::Bootstrap => "bootstrap",
            Trigger::Feature => "feature",
            Trigger::Degeneracy => "degeneracy",
            Trigger::Distance => "distance",
        }
    }
}

impl std::fmt::Display for Trigger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Trigger {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrap" => Ok(Trigger::Bootstrap),
            "feature" => Ok(Trigger::Feature),
            "degeneracy" => Ok(Trigger::Degeneracy),
            "distance" => Ok(Trigger::Distance),
            other => Err(invalid(format!("unknown trigger `{other}`"))),
        }
    }
}

/// A scan kept as a registration target. The cloud is in the world frame and
/// carries normals and covariances.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: u64,
    pub pose: Pose,
    pub cloud: IndexedCloud,
    pub descriptor: Descriptor,
    pub trigger: Trigger,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 10.0,
        }
    }
}

impl SelectorConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let c = Self { alpha, beta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(invalid(format!(
                "alpha must be in (0, 2), got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0) {
            return Err(invalid(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Outcome of testing one scan against the selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub selected: bool,
    pub trigger: Option<Trigger>,
    pub gamma: f64,
    /// Minimum descriptor distance to the existing keyframes, `None` when
    /// there are none.
    pub d_f: Option<f64>,
}

/// Returned by [`SelectorState::suboptimality_bound`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    /// `alpha · |K_nonbootstrap| − Σγ`, a certified lower bound on the
    /// achieved selection objective.
    pub bound: f64,
    pub gamma_sum: f64,
    /// Keyframes counted by the bound (bootstrap excluded).
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct SelectorState {
    config: SelectorConfig,
    keyframes: Vec<Keyframe>,
    gamma_sum: f64,
    objective: f64,
}

impl SelectorState {
    pub fn new(config: SelectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            keyframes: Vec::new(),
            gamma_sum: 0.0,
            objective: 0.0,
        })
    }

    /// Rebuild a state from keyframes in selection order, recomputing the
    /// ledger from their descriptors and gammas.
    pub fn from_keyframes(config: SelectorConfig, keyframes: Vec<Keyframe>) -> Result<Self> {
        let mut state = Self::new(config)?;
        for kf in keyframes {
            let d_f = if state.keyframes.is_empty() {
                None
            } else {
                Some(min_descriptor_distance(&kf.descriptor, &state.keyframes)?.0)
            };
            state.push(kf, d_f)?;
        }
        Ok(state)
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn gamma_sum(&self) -> f64 {
        self.gamma_sum
    }

    /// Running value of [`selection_objective`] over the stored keyframes.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    /// Apply the selection rule without mutating the state.
    pub fn decide(&self, descriptor: &Descriptor, degeneracy: f64) -> Decision {
        if self.keyframes.is_empty() {
            return Decision {
                selected: true,
                trigger: Some(Trigger::Bootstrap),
                gamma: 0.0,
                d_f: None,
            };
        }
        let (d_f, _) = nearest_keyframe(descriptor, &self.keyframes);
        let alpha = self.config.alpha;
        if d_f > alpha {
            Decision {
                selected: true,
                trigger: Some(Trigger::Feature),
                gamma: 0.0,
                d_f: Some(d_f),
            }
        } else if degeneracy >= self.config.beta {
            Decision {
                selected: true,
                trigger: Some(Trigger::Degeneracy),
                gamma: (alpha - d_f).clamp(0.0, alpha),
                d_f: Some(d_f),
            }
        } else {
            Decision {
                selected: false,
                trigger: None,
                gamma: 0.0,
                d_f: Some(d_f),
            }
        }
    }

    /// Decision for an externally imposed trigger (baseline policies). The
    /// recorded gamma keeps the ledger sound: `max(0, alpha − d_f)`.
    pub fn decide_forced(&self, descriptor: &Descriptor, trigger: Trigger) -> Decision {
        if self.keyframes.is_empty() {
            return self.decide(descriptor, 0.0);
        }
        let (d_f, _) = nearest_keyframe(descriptor, &self.keyframes);
        Decision {
            selected: true,
            trigger: Some(trigger),
            gamma: (self.config.alpha - d_f).max(0.0),
            d_f: Some(d_f),
        }
    }

    /// Test a scan and, if selected, append it as keyframe `id`.
    pub fn should_keyframe(
        &mut self,
        id: u64,
        pose: Pose,
        cloud: IndexedCloud,
        descriptor: Descriptor,
        degeneracy: f64,
    ) -> Result<Decision> {
        let decision = self.decide(&descriptor, degeneracy);
        if decision.selected {
            self.commit(&decision, id, pose, cloud, descriptor)?;
        }
        Ok(decision)
    }

    /// Append a keyframe for a selected decision.
    pub fn commit(
        &mut self,
        decision: &Decision,
        id: u64,
        pose: Pose,
        cloud: IndexedCloud,
        descriptor: Descriptor,
    ) -> Result<()> {
        let trigger = match (decision.selected, decision.trigger) {
            (true, Some(t)) => t,
            _ => return Err(invalid("cannot commit a rejected decision")),
        };
        let kf = Keyframe {
            id,
            pose,
            cloud,
            descriptor,
            trigger,
            gamma: decision.gamma,
        };
        self.push(kf, decision.d_f)
    }

    fn push(&mut self, kf: Keyframe, d_f: Option<f64>) -> Result<()> {
        if let Some(last) = self.keyframes.last() {
            if kf.id <= last.id {
                return Err(invalid(format!(
                    "keyframe id {} does not follow {}",
                    kf.id, last.id
                )));
            }
            if kf.descriptor.dim() != last.descriptor.dim() {
                return Err(invalid("keyframe descriptor dimension changed"));
            }
        }
        if !(kf.gamma >= 0.0) {
            return Err(invalid("keyframe gamma must be non-negative"));
        }
        self.objective += d_f.unwrap_or(0.0);
        self.gamma_sum += kf.gamma;
        self.keyframes.push(kf);
        Ok(())
    }

    pub fn suboptimality_bound(&self) -> Bound {
        let count = self
            .keyframes
            .iter()
            .filter(|k| k.trigger != Trigger::Bootstrap)
            .count();
        Bound {
            bound: self.config.alpha * count as f64 - self.gamma_sum,
            gamma_sum: self.gamma_sum,
            count,
        }
    }
}

fn nearest_keyframe(d: &Descriptor, keyframes: &[Keyframe]) -> (f64, u64) {
    let mut best = (f64::INFINITY, u64::MAX);
    for k in keyframes {
        let dist = d.distance(&k.descriptor);
        if dist < best.0 || (dist == best.0 && k.id < best.1) {
            best = (dist, k.id);
        }
    }
    best
}

/// Smallest descriptor distance to any keyframe and the keyframe achieving
/// it (lowest id on ties).
pub fn min_descriptor_distance(d: &Descriptor, keyframes: &[Keyframe]) -> Result<(f64, u64)> {
    if keyframes.is_empty() {
        return Err(invalid("no keyframes to compare against"));
    }
    if keyframes.iter().any(|k| k.descriptor.dim() != d.dim()) {
        return Err(invalid("descriptor dimensions differ"));
    }
    Ok(nearest_keyframe(d, keyframes))
}

/// Sum over keyframes of the minimum distance to strictly earlier ones; the
/// first keyframe contributes 0.
pub fn selection_objective<'a>(descriptors: impl IntoIterator<Item = &'a Descriptor>) -> f64 {
    let mut seen: Vec<&Descriptor> = Vec::new();
    let mut total = 0.0;
    for d in descriptors {
        if let Some(m) = seen
            .iter()
            .map(|s| d.distance(s))
            .min_by(|a, b| a.total_cmp(b))
        {
            total += m;
        }
        seen.push(d);
    }
    total
}

/// One selection-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub scan_id: u64,
    pub selected: bool,
    pub trigger: Option<Trigger>,
    pub d_f: Option<f64>,
    #[serde(with = "crate::serde_inf")]
    pub degeneracy: f64,
    pub gamma: f64,
    pub running_bound: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Descriptor {
        Descriptor::normalized(v.to_vec()).unwrap()
    }

    fn kf(id: u64, d: Descriptor, trigger: Trigger, gamma: f64) -> Keyframe {
        Keyframe {
            id,
            pose: Pose::identity(),
            cloud: IndexedCloud::new(PointCloud::empty()),
            descriptor: d,
            trigger,
            gamma,
        }
    }

    fn empty_cloud() -> IndexedCloud {
        IndexedCloud::new(PointCloud::empty())
    }

    /// A descriptor at distance exactly `dist` from `e1` in the e1/e2 plane.
    fn at_distance(dist: f64) -> Descriptor {
        // |e1 − (cos θ, sin θ)| = 2 sin(θ/2)
        let theta = 2.0 * (dist / 2.0).asin();
        unit(&[theta.cos(), theta.sin(), 0.0])
    }

    #[test]
    fn min_distance_examples() {
        let e = [
            unit(&[1.0, 0.0, 0.0]),
            unit(&[0.0, 1.0, 0.0]),
            unit(&[0.0, 0.0, 1.0]),
        ];
        let kfs: Vec<_> = e
            .iter()
            .enumerate()
            .map(|(i, d)| kf(i as u64 * 3, d.clone(), Trigger::Feature, 0.0))
            .collect();
        assert_eq!(min_descriptor_distance(&e[1], &kfs).unwrap(), (0.0, 3));
        let single = vec![kf(9, e[0].clone(), Trigger::Bootstrap, 0.0)];
        let (d, id) = min_descriptor_distance(&unit(&[-1.0, 0.0, 0.0]), &single).unwrap();
        assert_eq!((d, id), (2.0, 9));
        assert!(min_descriptor_distance(&e[0], &[]).is_err());
        // equidistant from e2 and e3 → lowest id
        let (_, id) = min_descriptor_distance(&unit(&[0.0, 1.0, 1.0]), &kfs).unwrap();
        assert_eq!(id, 3);
    }

    #[test]
    fn min_distance_matches_exhaustive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let ds: Vec<_> = (0..4)
                .map(|_| {
                    unit(
                        &(0..4)
                            .map(|_| rng.random_range(-1.0..1.0))
                            .collect::<Vec<f64>>(),
                    )
                })
                .collect();
            let kfs: Vec<_> = ds[..3]
                .iter()
                .enumerate()
                .map(|(i, d)| kf(i as u64, d.clone(), Trigger::Feature, 0.0))
                .collect();
            let brute = ds[..3]
                .iter()
                .map(|d| ds[3].distance(d))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(min_descriptor_distance(&ds[3], &kfs).unwrap().0, brute);
        }
    }

    #[test]
    fn decision_examples() {
        let mut s = SelectorState::new(SelectorConfig::new(0.3, 10.0).unwrap()).unwrap();
        let base = unit(&[1.0, 0.0, 0.0]);
        let d = s
            .should_keyframe(0, Pose::identity(), empty_cloud(), base, 0.0)
            .unwrap();
        assert_eq!(
            (d.selected, d.trigger, d.gamma),
            (true, Some(Trigger::Bootstrap), 0.0)
        );

        let far = s.decide(&at_distance(0.5), 0.0);
        assert_eq!(
            (far.selected, far.trigger, far.gamma),
            (true, Some(Trigger::Feature), 0.0)
        );

        let near = s.decide(&at_distance(0.1), 12.0);
        assert!(near.selected);
        assert_eq!(near.trigger, Some(Trigger::Degeneracy));
        assert_relative_eq!(near.gamma, 0.2, epsilon = 1e-12);

        let quiet = s.decide(&at_distance(0.1), 5.0);
        assert!(!quiet.selected);
        assert!(s
            .commit(&quiet, 1, Pose::identity(), empty_cloud(), at_distance(0.1))
            .is_err());

        // infinite degeneracy always triggers
        assert!(s.decide(&at_distance(0.0), f64::INFINITY).selected);
    }

    #[test]
    fn objective_examples() {
        assert_eq!(selection_objective([]), 0.0);
        let e1 = unit(&[1.0, 0.0, 0.0]);
        assert_eq!(selection_objective([&e1]), 0.0);
        let e = [e1, unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0])];
        assert_relative_eq!(selection_objective(&e), 2.0 * 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn bound_examples() {
        let cfg = SelectorConfig::new(0.3, 10.0).unwrap();
        assert_eq!(
            SelectorState::new(cfg).unwrap().suboptimality_bound(),
            Bound {
                bound: 0.0,
                gamma_sum: 0.0,
                count: 0
            }
        );

        let mut kfs = vec![kf(
            0,
            unit(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            Trigger::Bootstrap,
            0.0,
        )];
        for i in 1..6 {
            let mut v = vec![0.0; 6];
            v[i] = 1.0;
            kfs.push(kf(i as u64, unit(&v), Trigger::Feature, 0.0));
        }
        let s = SelectorState::from_keyframes(cfg, kfs).unwrap();
        let b = s.suboptimality_bound();
        assert_relative_eq!(b.bound, 1.5, epsilon = 1e-12);
        assert_eq!((b.gamma_sum, b.count), (0.0, 5));

        let kfs = vec![
            kf(0, unit(&[1.0, 0.0, 0.0, 0.0]), Trigger::Bootstrap, 0.0),
            kf(1, unit(&[0.0, 1.0, 0.0, 0.0]), Trigger::Feature, 0.0),
            kf(2, unit(&[0.0, 0.0, 1.0, 0.0]), Trigger::Feature, 0.0),
            kf(3, unit(&[0.0, 0.0, 0.0, 1.0]), Trigger::Degeneracy, 0.2),
        ];
        let b = SelectorState::from_keyframes(cfg, kfs)
            .unwrap()
            .suboptimality_bound();
        assert_relative_eq!(b.bound, 0.7, epsilon = 1e-12);
        assert_eq!(b.gamma_sum, 0.2);
        assert_eq!(b.count, 3);
    }

    #[test]
    fn ids_must_increase() {
        let cfg = SelectorConfig::default();
        let kfs = vec![
            kf(4, unit(&[1.0, 0.0]), Trigger::Bootstrap, 0.0),
            kf(4, unit(&[0.0, 1.0]), Trigger::Feature, 0.0),
        ];
        assert!(SelectorState::from_keyframes(cfg, kfs).is_err());
    }

    #[test]
    fn config_ranges() {
        assert!(SelectorConfig::new(0.0, 1.0).is_err());
        assert!(SelectorConfig::new(2.0, 1.0).is_err());
        assert!(SelectorConfig::new(0.5, 0.0).is_err());
    }

    #[test]
    fn record_round_trips_infinite_degeneracy() {
        let r = SelectionRecord {
            scan_id: 3,
            selected: true,
            trigger: Some(Trigger::Degeneracy),
            d_f: Some(0.1),
            degeneracy: f64::INFINITY,
            gamma: 0.15,
            running_bound: 0.1,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"degeneracy\":null"), "{s}");
        assert_eq!(serde_json::from_str::<SelectionRecord>(&s).unwrap(), r);
    }

    fn arb_stream() -> impl Strategy<Value = Vec<(Vec<f64>, f64)>> {
        prop::collection::vec(
            (
                prop::collection::vec(-1.0f64..1.0, 5),
                prop_oneof![0.0f64..20.0, Just(f64::INFINITY)],
            ),
            1..25,
        )
    }

    proptest! {
        #[test]
        fn ledger_holds_on_random_streams(stream in arb_stream(), alpha in 0.05f64..1.5) {
            let mut s = SelectorState::new(SelectorConfig::new(alpha, 10.0).unwrap()).unwrap();
            let mut last_obj = 0.0;
            for (i, (v, deg)) in stream.iter().enumerate() {
                let Ok(d) = Descriptor::normalized(v.clone()) else { continue };
                s.should_keyframe(i as u64, Pose::identity(), empty_cloud(), d, *deg).unwrap();
                let obj = selection_objective(s.keyframes().iter().map(|k| &k.descriptor));
                prop_assert!(obj >= last_obj);
                last_obj = obj;
                prop_assert!((obj - s.objective()).abs() <= 1e-9);
                let b = s.suboptimality_bound();
                prop_assert!(obj >= b.bound - 1e-9);
                let logged: f64 = s.keyframes().iter().map(|k| k.gamma).sum();
                prop_assert_eq!(logged, b.gamma_sum);
                for k in s.keyframes() {
                    match k.trigger {
                        Trigger::Degeneracy => prop_assert!(k.gamma > 0.0 && k.gamma <= alpha),
                        _ => prop_assert_eq!(k.gamma, 0.0),
                    }
                }
            }
        }
    }
}
