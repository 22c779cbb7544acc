//! Greedy submap generation that maximizes the minimum eigenvalue of the
//! translational Hessian, with sub-Hessian point removal and eigenvalue-bound
//! pruning.
//!
//! Each candidate keyframe is matched against the scan once; its
//! correspondences are kept in a table. A keyframe's sub-Hessian given the
//! keyframes already in the submap is the sum over its correspondences whose
//! scan point has not been matched by an earlier submap keyframe. The greedy
//! loop, the brute-force oracle and the submodularity ratio all read the same
//! table, so they agree on the objective exactly.
//!
//! Candidates are ranked by the gain vector `(Δλ_min, Δλ_mid, Δλ_max)` of the
//! ascending eigenvalues, compared lexicographically with tolerance
//! `tau_gain` per component and lowest id on ties. Ranking on `Δλ_min` alone
//! cannot tell a keyframe that adds a new constraint direction from a
//! redundant one while `λ_min` is still zero. Since every eigenvalue of
//! `H + ∂H` exceeds that of `H` by at most `λ_max(∂H) ≤ λ_max(H(E, K))`, the
//! full-match `λ_max` bounds every gain component and pruning stays exact.

use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{IndexedCloud, PointCloud};
use crate::hessian::{find_correspondences, Hessian3};
use crate::par;
use crate::selector::Keyframe;

pub const DEFAULT_TAU_GAIN: f64 = 1e-9;

/// Keyframe ids whose translation lies strictly within `2·sensor_range` of
/// the scan position.
pub fn candidate_gate(
    keyframes: &[Keyframe],
    scan_translation: &Vector3<f64>,
    sensor_range: f64,
) -> Result<Vec<u64>> {
    Ok(gate_indices(keyframes, scan_translation, sensor_range)?
        .into_iter()
        .map(|i| keyframes[i].id)
        .collect())
}

/// Like [`candidate_gate`] but returns positions in `keyframes`.
pub fn gate_indices(
    keyframes: &[Keyframe],
    scan_translation: &Vector3<f64>,
    sensor_range: f64,
) -> Result<Vec<usize>> {
    if !(sensor_range > 0.0) {
        return Err(invalid(format!(
            "sensor range must be positive, got {sensor_range}"
        )));
    }
    let limit = 2.0 * sensor_range;
    Ok(keyframes
        .iter()
        .enumerate()
        .filter(|(_, k)| (k.pose.translation() - scan_translation).norm() < limit)
        .map(|(i, _)| i)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateBound {
    pub id: u64,
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Match {
    scan_index: u32,
    normal: Vector3<f64>,
    weight: f64,
}

#[derive(Debug, Clone)]
struct Candidate {
    id: u64,
    matches: Vec<Match>,
    bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubmapConfig {
    /// Maximum submap size.
    pub n: usize,
    /// Correspondence search radius, meters.
    pub max_correspondence_dist: f64,
    /// Skip candidates whose bound cannot beat the current best.
    pub prune: bool,
    /// Evaluate every candidate and record what pruning would have skipped.
    pub audit: bool,
    pub tau_gain: f64,
    /// Worker threads for correspondence matching (0 = auto).
    pub threads: usize,
}

impl Default for SubmapConfig {
    fn default() -> Self {
        Self {
            n: 10,
            max_correspondence_dist: 1.0,
            prune: true,
            audit: false,
            tau_gain: DEFAULT_TAU_GAIN,
            threads: 1,
        }
    }
}

impl SubmapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("submap size N must be at least 1"));
        }
        if !(self.max_correspondence_dist > 0.0) {
            return Err(invalid("correspondence distance must be positive"));
        }
        if !(self.tau_gain >= 0.0) {
            return Err(invalid("tau_gain must be non-negative"));
        }
        Ok(())
    }
}

/// One candidate evaluation recorded in audit mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub iteration: usize,
    pub id: u64,
    pub gains: [f64; 3],
    pub bound: f64,
    pub would_prune: bool,
}

impl AuditEntry {
    pub fn marginal(&self) -> f64 {
        self.gains[0]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubmapSelection {
    /// Keyframe ids in selection order.
    pub ids: Vec<u64>,
    /// `Δλ_min` realized by each selected keyframe.
    pub marginals: Vec<f64>,
    /// Full ascending-eigenvalue gain vector of each selected keyframe.
    pub gains: Vec<[f64; 3]>,
    pub lambda_min: f64,
    pub hessian: Hessian3,
    /// Number of scan points with a correspondence in the submap.
    pub matched_points: usize,
    pub candidates: usize,
    /// Candidate evaluations performed across all iterations.
    pub candidates_considered: usize,
    /// Candidate evaluations skipped by the bound.
    pub candidates_pruned: usize,
    pub audit: Vec<AuditEntry>,
}

/// Lexicographic comparison of gain vectors with per-component tolerance.
fn compare_gains(a: &[f64; 3], b: &[f64; 3], tau: f64) -> std::cmp::Ordering {
    for i in 0..3 {
        if (a[i] - b[i]).abs() > tau {
            return a[i].total_cmp(&b[i]);
        }
    }
    std::cmp::Ordering::Equal
}

/// Whether a gain vector improves on doing nothing: its first component
/// that differs from zero by more than `tau` is positive.
pub fn is_constructive(gains: &[f64; 3], tau: f64) -> bool {
    compare_gains(gains, &[0.0; 3], tau) == std::cmp::Ordering::Greater
}

fn ascending(h: &Hessian3) -> [f64; 3] {
    let e = h.eigenvalues();
    [e[2], e[1], e[0]]
}

fn gain_vector(base: &[f64; 3], next: &Hessian3) -> [f64; 3] {
    let n = ascending(next);
    [n[0] - base[0], n[1] - base[1], n[2] - base[2]]
}

/// Per-candidate correspondence table for one scan.
#[derive(Debug, Clone)]
pub struct SubmapProblem {
    scan_len: usize,
    candidates: Vec<Candidate>,
}

impl SubmapProblem {
    /// Match `scan` against every candidate cloud on its own. Candidate ids
    /// must be distinct.
    pub fn new(
        scan: &PointCloud,
        candidates: &[(u64, &IndexedCloud)],
        max_correspondence_dist: f64,
        threads: usize,
    ) -> Result<Self> {
        let mut ids: Vec<u64> = candidates.iter().map(|c| c.0).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate candidate ids"));
        }
        if scan.len() > u32::MAX as usize {
            return Err(invalid("scan too large"));
        }
        let built = par::map_indexed(candidates.len(), threads, |i| {
            let (id, cloud) = candidates[i];
            let corrs = find_correspondences(scan, cloud, max_correspondence_dist)?;
            let mut h = Hessian3::zero();
            let matches: Vec<Match> = corrs
                .iter()
                .map(|c| {
                    h.accumulate(&c.normal, c.weight);
                    Match {
                        scan_index: c.scan_index as u32,
                        normal: c.normal,
                        weight: c.weight,
                    }
                })
                .collect();
            Ok(Candidate {
                id,
                matches,
                bound: h.max_eigenvalue().max(0.0),
            })
        });
        Ok(Self {
            scan_len: scan.len(),
            candidates: built.into_iter().collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.candidates.iter().map(|c| c.id).collect()
    }

    /// Bounds sorted descending, lowest id first among equal bounds.
    pub fn bounds(&self) -> Vec<CandidateBound> {
        self.bound_order()
            .into_iter()
            .map(|i| CandidateBound {
                id: self.candidates[i].id,
                bound: self.candidates[i].bound,
            })
            .collect()
    }

    fn bound_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.candidates.len()).collect();
        order.sort_by(|&a, &b| {
            let (ca, cb) = (&self.candidates[a], &self.candidates[b]);
            cb.bound.total_cmp(&ca.bound).then(ca.id.cmp(&cb.id))
        });
        order
    }

    fn sub_hessian(&self, c: usize, consumed: &[bool]) -> Hessian3 {
        let mut h = Hessian3::zero();
        for m in &self.candidates[c].matches {
            if !consumed[m.scan_index as usize] {
                h.accumulate(&m.normal, m.weight);
            }
        }
        h
    }

    fn consume(&self, c: usize, consumed: &mut [bool]) -> usize {
        let mut fresh = 0;
        for m in &self.candidates[c].matches {
            let slot = &mut consumed[m.scan_index as usize];
            if !*slot {
                *slot = true;
                fresh += 1;
            }
        }
        fresh
    }

    /// Accumulated Hessian of an ordered construction, given as candidate
    /// positions.
    pub fn sequence_hessian(&self, order: &[usize]) -> Hessian3 {
        let mut consumed = vec![false; self.scan_len];
        let mut h = Hessian3::zero();
        for &c in order {
            h += self.sub_hessian(c, &consumed);
            self.consume(c, &mut consumed);
        }
        h
    }

    /// `λ_min` of an ordered construction.
    pub fn sequence_value(&self, order: &[usize]) -> f64 {
        self.sequence_hessian(order).min_eigenvalue()
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.candidates.iter().position(|c| c.id == id)
    }

    /// The greedy loop.
    pub fn greedy(&self, config: &SubmapConfig) -> Result<SubmapSelection> {
        config.validate()?;
        let tau = config.tau_gain;
        let order = self.bound_order();
        let mut consumed = vec![false; self.scan_len];
        let mut taken = vec![false; self.candidates.len()];
        let mut sel = SubmapSelection {
            candidates: self.candidates.len(),
            ..Default::default()
        };
        let mut h = Hessian3::zero();
        let prune = config.prune && !config.audit;

        for iteration in 0..config.n.min(self.candidates.len()) {
            let base = ascending(&h);
            let mut best: Option<(usize, [f64; 3], Hessian3)> = None;
            let mut cut = false;
            for (rank, &c) in order.iter().enumerate() {
                if taken[c] {
                    continue;
                }
                let cand = &self.candidates[c];
                // every gain component is at most the bound
                if !cut {
                    if let Some((_, g, _)) = &best {
                        cut = cand.bound < g[0] - 2.0 * tau;
                    }
                }
                if cut && prune {
                    sel.candidates_pruned += order[rank..].iter().filter(|&&o| !taken[o]).count();
                    break;
                }
                sel.candidates_considered += 1;
                let dh = self.sub_hessian(c, &consumed);
                let gains = gain_vector(&base, &(h + dh));
                if config.audit {
                    sel.audit.push(AuditEntry {
                        iteration,
                        id: cand.id,
                        gains,
                        bound: cand.bound,
                        would_prune: cut,
                    });
                }
                let better = match &best {
                    None => true,
                    Some((b, bg, _)) => match compare_gains(&gains, bg, tau) {
                        std::cmp::Ordering::Greater => true,
                        std::cmp::Ordering::Equal => cand.id < self.candidates[*b].id,
                        std::cmp::Ordering::Less => false,
                    },
                };
                if better {
                    best = Some((c, gains, dh));
                }
            }
            let Some((c, gains, dh)) = best else { break };
            if !is_constructive(&gains, tau) {
                break;
            }
            h += dh;
            taken[c] = true;
            sel.matched_points += self.consume(c, &mut consumed);
            sel.ids.push(self.candidates[c].id);
            sel.marginals.push(gains[0]);
            sel.gains.push(gains);
        }
        sel.lambda_min = h.min_eigenvalue();
        sel.hessian = h;
        Ok(sel)
    }

    /// Exhaustive maximum of `λ_min` over ordered constructions of up to `n`
    /// candidates. Returns the best order as candidate ids and its value.
    pub fn brute_force(&self, n: usize) -> Result<(Vec<u64>, f64)> {
        let m = self.candidates.len();
        if m > 12 || n > 4 {
            return Err(invalid(format!(
                "brute force limited to 12 candidates and N ≤ 4, got {m} and {n}"
            )));
        }
        if n == 0 {
            return Err(invalid("submap size N must be at least 1"));
        }
        // adding a keyframe never lowers λ_min, so full-length orders suffice
        let len = n.min(m);
        let mut best: (Vec<usize>, f64) = (Vec::new(), 0.0);
        let mut seq = Vec::with_capacity(len);
        let mut used = vec![false; m];
        self.permute(len, &mut seq, &mut used, &mut best);
        Ok((
            best.0.iter().map(|&c| self.candidates[c].id).collect(),
            best.1,
        ))
    }

    fn permute(
        &self,
        len: usize,
        seq: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut (Vec<usize>, f64),
    ) {
        if seq.len() == len {
            let v = self.sequence_value(seq);
            if best.0.is_empty() || v > best.1 {
                *best = (seq.clone(), v);
            }
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                seq.push(c);
                self.permute(len, seq, used, best);
                seq.pop();
                used[c] = false;
            }
        }
    }
}

/// Per-candidate bounds `λ_max(H(E, K))`, sorted descending.
pub fn precompute_upper_bounds(
    scan: &PointCloud,
    candidates: &[(u64, &IndexedCloud)],
    max_correspondence_dist: f64,
) -> Result<Vec<CandidateBound>> {
    Ok(SubmapProblem::new(scan, candidates, max_correspondence_dist, 1)?.bounds())
}

/// Greedy submap over `candidates` (already gated). An empty candidate list
/// yields an empty selection with `λ_min = 0`.
pub fn generate_submap(
    scan: &PointCloud,
    candidates: &[&Keyframe],
    config: &SubmapConfig,
) -> Result<SubmapSelection> {
    config.validate()?;
    if scan.is_empty() {
        return Err(invalid("cannot build a submap for an empty scan"));
    }
    let refs: Vec<(u64, &IndexedCloud)> = candidates.iter().map(|k| (k.id, &k.cloud)).collect();
    SubmapProblem::new(scan, &refs, config.max_correspondence_dist, config.threads)?.greedy(config)
}

/// Exhaustive oracle over at most 12 candidates and `n ≤ 4`.
pub fn brute_force_submap(
    scan: &PointCloud,
    candidates: &[&Keyframe],
    n: usize,
    max_correspondence_dist: f64,
) -> Result<(Vec<u64>, f64)> {
    if candidates.len() > 12 || n > 4 {
        return Err(invalid("brute force limited to 12 candidates and N ≤ 4"));
    }
    let refs: Vec<(u64, &IndexedCloud)> = candidates.iter().map(|k| (k.id, &k.cloud)).collect();
    SubmapProblem::new(scan, &refs, max_correspondence_dist, 1)?.brute_force(n)
}

/// Submodularity ratio of a set function over ground elements `0..ground`:
///
/// `min over L ⊆ base, S ∩ L = ∅, 1 ≤ |S| ≤ kappa` of
/// `Σ_{e∈S} (f(L ∪ e) − f(L)) / (f(L ∪ S) − f(L))`.
///
/// `f` receives element sequences: `L` in `base` order followed by the
/// added elements in ascending order. Pairs whose denominator is at most
/// `1e-9` are skipped; with no valid pair the ratio is 1.
pub fn submodularity_ratio<F>(ground: usize, base: &[usize], kappa: usize, mut f: F) -> Result<f64>
where
    F: FnMut(&[usize]) -> f64,
{
    if ground > 10 {
        return Err(invalid(format!(
            "ground set of {ground} exceeds the limit of 10"
        )));
    }
    if base.iter().any(|&b| b >= ground) {
        return Err(invalid("base element outside the ground set"));
    }
    let mut gamma = 1.0f64;
    let mut any = false;
    for lmask in 0u32..(1 << base.len()) {
        let l: Vec<usize> = base
            .iter()
            .enumerate()
            .filter(|(i, _)| lmask & (1 << i) != 0)
            .map(|(_, &e)| e)
            .collect();
        let rest: Vec<usize> = (0..ground).filter(|e| !l.contains(e)).collect();
        let fl = f(&l);
        let mut seq = l.clone();
        let singles: Vec<f64> = rest
            .iter()
            .map(|&e| {
                seq.truncate(l.len());
                seq.push(e);
                f(&seq) - fl
            })
            .collect();
        for smask in 1u32..(1 << rest.len()) {
            if smask.count_ones() as usize > kappa {
                continue;
            }
            seq.truncate(l.len());
            let mut num = 0.0;
            for (j, &e) in rest.iter().enumerate() {
                if smask & (1 << j) != 0 {
                    seq.push(e);
                    num += singles[j];
                }
            }
            let den = f(&seq) - fl;
            if den > 1e-9 {
                any = true;
                gamma = gamma.min(num / den);
            }
        }
    }
    Ok(if any { gamma.max(0.0) } else { 1.0 })
}

impl SubmapProblem {
    /// Submodularity ratio of the sub-Hessian `λ_min` objective around the
    /// given selection (candidate ids), with `kappa` = its size.
    pub fn submodularity_ratio(&self, selection: &[u64], kappa: usize) -> Result<f64> {
        let base: Vec<usize> = selection
            .iter()
            .map(|&id| {
                self.position_of(id)
                    .ok_or_else(|| invalid(format!("unknown candidate {id}")))
            })
            .collect::<Result<_>>()?;
        submodularity_ratio(self.candidates.len(), &base, kappa, |seq| {
            self.sequence_value(seq)
        })
    }
}

/// One submap-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmapRecord {
    pub scan_id: u64,
    pub selected_ids: Vec<u64>,
    pub marginals: Vec<f64>,
    pub lambda_min: f64,
    pub candidates_considered: usize,
    pub candidates_pruned: usize,
    /// Wall time in milliseconds.
    pub elapsed: f64,
}

impl SubmapRecord {
    pub fn new(scan_id: u64, sel: &SubmapSelection, started: Instant) -> Self {
        Self {
            scan_id,
            selected_ids: sel.ids.clone(),
            marginals: sel.marginals.clone(),
            lambda_min: sel.lambda_min,
            candidates_considered: sel.candidates_considered,
            candidates_pruned: sel.candidates_pruned,
            elapsed: started.elapsed().as_secs_f64() * 1e3,
        }
    }
}
