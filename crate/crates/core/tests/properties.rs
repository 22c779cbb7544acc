mod common;

use common::{random_descriptor, session, spearman, SESSION_SEED};
use kfe_core::descriptor::Descriptor;
use kfe_core::geometry::{estimate_normals_covariances, jaccard_index, IndexedCloud, PointCloud};
use kfe_core::hessian::{eigen3, find_correspondences, translational_hessian, Hessian3};
use kfe_core::io::save_session;
use kfe_core::pipeline::{prepare_scan, PipelineConfig, PreparedScan};
use kfe_core::selector::selection_objective;
use kfe_core::summarizer::{greedy_summarize, sieve_stream_summarize};
use kfe_core::synthworld::{build_world, generate_session, BeamPattern, Preset, SessionScan};
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prepared(scans: &[SessionScan]) -> Vec<PreparedScan> {
    let cfg = PipelineConfig::default();
    scans
        .iter()
        .map(|s| prepare_scan(s, &cfg).unwrap())
        .collect()
}

/// Rank correlation of descriptor distance against `1 − J` over all pairs of
/// every `stride`-th scan.
fn ordering_correlation(preset: Preset, stride: usize) -> (usize, f64) {
    let p = prepared(&session(preset));
    let picked: Vec<&PreparedScan> = p.iter().step_by(stride).collect();
    let (mut d, mut overlap) = (Vec::new(), Vec::new());
    for (i, a) in picked.iter().enumerate() {
        for b in &picked[i + 1..] {
            d.push(a.descriptor.distance(&b.descriptor));
            overlap.push(1.0 - jaccard_index(&a.world, &b.world, 0.25).unwrap());
        }
    }
    (d.len(), spearman(&d, &overlap))
}

#[test]
fn descriptor_distance_tracks_overlap() {
    for (preset, stride) in [(Preset::CornerRoom, 1), (Preset::ForestProxy, 5)] {
        let (pairs, rho) = ordering_correlation(preset, stride);
        assert!(pairs >= 200, "{preset}: only {pairs} pairs");
        assert!(rho >= 0.6, "{preset}: Spearman {rho:.3} over {pairs} pairs");
    }
}

fn noiseless_ratios(preset: Preset) -> Vec<f64> {
    let world = build_world(preset.world(SESSION_SEED)).unwrap();
    let pattern = BeamPattern {
        noise_sigma: 0.0,
        ..Default::default()
    };
    let scans = generate_session(&world, &preset.trajectory(), &pattern, SESSION_SEED).unwrap();
    let p = prepared(&scans);
    p.windows(2)
        .map(|w| {
            let target = IndexedCloud::new(estimate_normals_covariances(&w[0].world, 10).unwrap());
            let h =
                translational_hessian(&find_correspondences(&w[1].world, &target, 1.0).unwrap());
            h.min_eigenvalue() / h.max_eigenvalue()
        })
        .collect()
}

#[test]
fn preset_geometry_forces_conditioning() {
    assert!(noiseless_ratios(Preset::CornerRoom)
        .iter()
        .all(|&r| r >= 0.1));
    assert!(noiseless_ratios(Preset::Corridor)
        .iter()
        .all(|&r| r <= 0.05));
}

#[test]
fn loop_closes_on_itself() {
    let scans = session(Preset::Loop);
    let p = prepared(&[scans[0].clone(), scans.last().unwrap().clone()]);
    let j = jaccard_index(&p[0].world, &p[1].world, 0.25).unwrap();
    assert!(j > 0.5, "first/last Jaccard {j}");
}

#[test]
fn sessions_are_byte_identical_across_runs() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        save_session(d.path(), &session(Preset::CornerRoom)).unwrap();
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() > 1);
    for name in names {
        let a = std::fs::read(dirs[0].path().join(&name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
}

#[test]
fn oracle_descriptor_ignores_cloud() {
    let cfg = PipelineConfig::default();
    let tag = Vector3::new(1.0, 2.0, 0.5);
    let oracle = kfe_core::descriptor::DescriptorBackend::Oracle(Default::default());
    let a = oracle.describe(&PointCloud::empty(), Some(&tag)).unwrap();
    let b = oracle
        .describe(&session(Preset::CornerRoom)[0].cloud, Some(&tag))
        .unwrap();
    assert_eq!(a, b);
    assert!(cfg.backend.describe(&PointCloud::empty(), None).is_err());
}

proptest! {
    #[test]
    fn objective_grows_by_at_most_two(seed in 0u64..500, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<Descriptor> = (0..n).map(|_| random_descriptor(&mut rng, 16)).collect();
        let mut prev = 0.0;
        for i in 1..=n {
            let f = selection_objective(&d[..i]);
            prop_assert!(f >= prev);
            prop_assert!(f - prev <= 2.0);
            prev = f;
        }
    }

    #[test]
    fn eigen3_recovers_spectrum(
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in 0.0f64..std::f64::consts::TAU,
        mut spectrum in prop::array::uniform3(0.0f64..1e3),
    ) {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis) + Vector3::new(0.0, 0.0, 1e-3)), angle);
        let q = rot.matrix();
        let m = q * Matrix3::from_diagonal(&Vector3::from(spectrum)) * q.transpose();
        let m = (m + m.transpose()) * 0.5;
        let e = eigen3(&Hessian3::from_matrix(m)).unwrap();
        spectrum.sort_by(|a, b| b.total_cmp(a));
        for i in 0..3 {
            prop_assert!((e.values[i] - spectrum[i]).abs() <= 1e-8, "{:?} vs {:?}", e.values, spectrum);
        }
    }

    #[test]
    fn summaries_respect_k(seed in 0u64..500, n in 1usize..30, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<Descriptor> = (0..n).map(|_| random_descriptor(&mut rng, 8)).collect();
        let sieve = sieve_stream_summarize(&d, k, 0.1).unwrap();
        let greedy = greedy_summarize(&d, k).unwrap();
        prop_assert!(sieve.ids.len() <= k && greedy.ids.len() <= k);
        prop_assert!(sieve.value <= 1.0 && greedy.value <= 1.0);
    }
}
