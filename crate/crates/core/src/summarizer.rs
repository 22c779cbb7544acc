//! Post-session map summarization on the k-medoid objective
//! `f(K) = L({e0}) − L(K ∪ {e0})`, where `L` averages each scan's distance to
//! its nearest selected descriptor and `e0` is the zero vector, at distance
//! exactly 1 from every unit descriptor.

use serde::{Deserialize, Serialize};

use crate::descriptor::{euclidean, Descriptor};
use crate::error::{invalid, Result};

/// Distance from every unit descriptor to the auxiliary zero vector.
const AUX_DISTANCE: f64 = 1.0;

fn check_ids(keyframes: &[usize], n: usize) -> Result<()> {
    if let Some(&bad) = keyframes.iter().find(|&&k| k >= n) {
        return Err(invalid(format!("keyframe index {bad} outside {n} scans")));
    }
    Ok(())
}

/// Average over scans of the distance to the nearest keyframe (and to `e0`
/// when `with_aux`).
pub fn kmedoid_loss(keyframes: &[usize], scans: &[Descriptor], with_aux: bool) -> Result<f64> {
    if scans.is_empty() {
        return Err(invalid("loss needs at least one scan"));
    }
    if keyframes.is_empty() && !with_aux {
        return Err(invalid(
            "loss of an empty keyframe set needs the auxiliary element",
        ));
    }
    check_ids(keyframes, scans.len())?;
    let total: f64 = scans
        .iter()
        .map(|s| {
            let start = if with_aux {
                AUX_DISTANCE
            } else {
                f64::INFINITY
            };
            keyframes
                .iter()
                .map(|&k| s.distance(&scans[k]))
                .fold(start, f64::min)
        })
        .sum();
    Ok(total / scans.len() as f64)
}

/// `1 − L(K ∪ {e0})`; `f(∅) = 0` and `f ≤ 1`.
pub fn summary_objective(keyframes: &[usize], scans: &[Descriptor]) -> Result<f64> {
    if scans.is_empty() {
        return Ok(0.0);
    }
    Ok(AUX_DISTANCE - kmedoid_loss(keyframes, scans, true)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryResult {
    /// Selected scan indices in selection order.
    pub ids: Vec<usize>,
    pub value: f64,
    /// `L(K ∪ {e0})`.
    pub loss: f64,
    /// Marginal-value evaluations performed.
    pub evaluations: u64,
    /// Number of optimum guesses the sieve maintained (0 for other methods).
    pub guesses: usize,
}

/// Current nearest distance of every scan to a candidate set (initialized to
/// the auxiliary element) and the set's objective value.
#[derive(Debug, Clone)]
struct Coverage {
    nearest: Vec<f64>,
    members: Vec<usize>,
    value: f64,
}

impl Coverage {
    fn new(n: usize) -> Self {
        Self {
            nearest: vec![AUX_DISTANCE; n],
            members: Vec::new(),
            value: 0.0,
        }
    }

    /// `f(S ∪ e) − f(S)` given the distances from `e` to every scan.
    fn marginal(&self, row: &[f64]) -> f64 {
        let gain: f64 = self
            .nearest
            .iter()
            .zip(row)
            .map(|(&cur, &d)| (cur - d).max(0.0))
            .sum();
        gain / self.nearest.len() as f64
    }

    fn add(&mut self, e: usize, row: &[f64], gain: f64) {
        for (cur, &d) in self.nearest.iter_mut().zip(row) {
            if d < *cur {
                *cur = d;
            }
        }
        self.members.push(e);
        self.value += gain;
    }
}

fn distance_row(e: &Descriptor, scans: &[Descriptor], row: &mut [f64]) {
    let a = e.as_slice();
    for (r, s) in row.iter_mut().zip(scans) {
        *r = euclidean(a, s.as_slice());
    }
}

fn check_dims(scans: &[Descriptor]) -> Result<()> {
    if let Some(first) = scans.first() {
        if scans.iter().any(|s| s.dim() != first.dim()) {
            return Err(invalid("descriptor dimensions differ"));
        }
    }
    Ok(())
}

fn finish(
    ids: Vec<usize>,
    scans: &[Descriptor],
    evaluations: u64,
    guesses: usize,
) -> Result<SummaryResult> {
    let loss = if scans.is_empty() {
        AUX_DISTANCE
    } else {
        kmedoid_loss(&ids, scans, true)?
    };
    Ok(SummaryResult {
        ids,
        value: AUX_DISTANCE - loss,
        loss,
        evaluations,
        guesses,
    })
}

/// Single-pass sieve-streaming over the scans in order.
///
/// Before the pass, one sweep over the stream computes every singleton value
/// to find the largest, `m`. Guesses of the optimum are `(1+ε)^i` in
/// `[m, k·m]`. Singleton values are cached so a guess whose set is still
/// empty costs no further evaluation.
pub fn sieve_stream_summarize(
    scans: &[Descriptor],
    k: usize,
    epsilon: f64,
) -> Result<SummaryResult> {
    if k == 0 {
        return Err(invalid("summary size k must be at least 1"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    check_dims(scans)?;
    let n = scans.len();
    if n == 0 {
        return finish(Vec::new(), scans, 0, 0);
    }
    let mut evaluations = 0u64;
    let mut row = vec![0.0; n];

    let empty = Coverage::new(n);
    let mut singletons = Vec::with_capacity(n);
    for e in scans {
        distance_row(e, scans, &mut row);
        singletons.push(empty.marginal(&row));
        evaluations += 1;
    }
    let m = singletons.iter().copied().fold(0.0, f64::max);
    if !(m > 0.0) {
        return finish(Vec::new(), scans, evaluations, 0);
    }
    if k == 1 {
        // the single guess m admits exactly the best singleton
        let best = (0..n).fold(0, |b, i| if singletons[i] > singletons[b] { i } else { b });
        return finish(vec![best], scans, evaluations, 1);
    }

    let base = 1.0 + epsilon;
    let lo = (m.ln() / base.ln()).ceil() as i64;
    let hi = ((k as f64 * m).ln() / base.ln()).floor() as i64;
    let guesses: Vec<f64> = (lo..=hi)
        .map(|i| base.powi(i as i32))
        .filter(|&v| v >= m * (1.0 - 1e-12) && v <= k as f64 * m * (1.0 + 1e-12))
        .collect();
    let mut sets: Vec<Coverage> = guesses.iter().map(|_| Coverage::new(n)).collect();

    for (e, desc) in scans.iter().enumerate() {
        distance_row(desc, scans, &mut row);
        for (v, set) in guesses.iter().zip(sets.iter_mut()) {
            let size = set.members.len();
            if size >= k {
                continue;
            }
            let gain = if size == 0 {
                singletons[e]
            } else {
                evaluations += 1;
                set.marginal(&row)
            };
            let threshold = (v / 2.0 - set.value) / (k - size) as f64;
            if gain >= threshold && gain > 0.0 {
                set.add(e, &row, gain);
            }
        }
    }
    let best = sets
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, s)| match acc {
            Some((_, bv)) if bv >= s.value => acc,
            _ => Some((i, s.value)),
        })
        .map_or(0, |(i, _)| i);
    let ids = sets.swap_remove(best).members;
    finish(ids, scans, evaluations, guesses.len())
}

/// `k` rounds of exact best-marginal selection, each a full pass over the
/// scans; ties go to the lowest scan index.
pub fn greedy_summarize(scans: &[Descriptor], k: usize) -> Result<SummaryResult> {
    if k == 0 {
        return Err(invalid("summary size k must be at least 1"));
    }
    check_dims(scans)?;
    let n = scans.len();
    let mut cov = Coverage::new(n);
    let mut taken = vec![false; n];
    let mut row = vec![0.0; n];
    let mut best_row = vec![0.0; n];
    let mut evaluations = 0u64;
    for _ in 0..k.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for e in 0..n {
            if taken[e] {
                continue;
            }
            distance_row(&scans[e], scans, &mut row);
            let gain = cov.marginal(&row);
            evaluations += 1;
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((e, gain));
                best_row.copy_from_slice(&row);
            }
        }
        let Some((e, gain)) = best else { break };
        taken[e] = true;
        cov.add(e, &best_row, gain);
    }
    finish(cov.members, scans, evaluations, 0)
}

/// Exhaustive optimum over all `k`-subsets; limited to 20 scans and `k ≤ 4`.
pub fn brute_force_summary(scans: &[Descriptor], k: usize) -> Result<SummaryResult> {
    let n = scans.len();
    if n > 20 || k > 4 {
        return Err(invalid(format!(
            "brute force limited to 20 scans and k ≤ 4, got {n} and {k}"
        )));
    }
    if k == 0 {
        return Err(invalid("summary size k must be at least 1"));
    }
    check_dims(scans)?;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        distance_row(&scans[i], scans, &mut dist[i]);
    }
    // f is monotone, so subsets of exactly min(k, n) elements suffice
    let size = k.min(n);
    let mut best: (Vec<usize>, f64) = (Vec::new(), f64::NEG_INFINITY);
    let mut combo: Vec<usize> = (0..size).collect();
    loop {
        let total: f64 = (0..n)
            .map(|j| {
                combo
                    .iter()
                    .map(|&c| dist[c][j])
                    .fold(AUX_DISTANCE, f64::min)
            })
            .sum();
        let value = AUX_DISTANCE - total / n as f64;
        if value > best.1 {
            best = (combo.clone(), value);
        }
        // next combination in lexicographic order
        let mut i = size;
        loop {
            if i == 0 {
                return finish(best.0, scans, 0, 0);
            }
            i -= 1;
            if combo[i] < n - size + i {
                combo[i] += 1;
                for j in i + 1..size {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
    }
}
