#![allow(dead_code)]

use kfe_core::descriptor::Descriptor;
use kfe_core::synthworld::{
    build_world, generate_session, BeamPattern, Interval, Preset, SessionScan,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const SESSION_SEED: u64 = 1;

pub fn session(preset: Preset) -> Vec<SessionScan> {
    let world = build_world(preset.world(SESSION_SEED)).unwrap();
    generate_session(
        &world,
        &preset.trajectory(),
        &BeamPattern::default(),
        SESSION_SEED,
    )
    .unwrap()
}

/// The preset path resampled to exactly `n` scans.
pub fn session_with(preset: Preset, n: usize) -> Vec<SessionScan> {
    let world = build_world(preset.world(SESSION_SEED)).unwrap();
    let mut traj = preset.trajectory();
    traj.interval = Interval::Meters(traj.length() / (n - 1) as f64);
    let mut s = generate_session(&world, &traj, &BeamPattern::default(), SESSION_SEED).unwrap();
    s.truncate(n);
    s
}

pub fn random_descriptor(rng: &mut ChaCha8Rng, p: usize) -> Descriptor {
    let v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    Descriptor::normalized(v).unwrap()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}
