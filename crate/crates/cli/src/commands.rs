//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kfe_core::descriptor::{DescriptorBackend, OracleParams, RangeHistogramParams};
use kfe_core::geometry::ply::write_ply;
use kfe_core::io::{
    load_database, load_session, save_database, save_session, write_csv, write_jsonl,
    write_metrics, MetricsFormat,
};
use kfe_core::pipeline::{
    merged_map, prepare_scan, run_eval, run_select, submap_problem, summarize, summarize_eval,
    summary_items_from_session, summary_items_from_state, PipelineConfig, SelectRun, SummaryBudget,
    EVAL_HEADER,
};
use kfe_core::selector::{SelectionRecord, Trigger};
use kfe_core::submap::{AuditEntry, CandidateBound, SubmapSelection};
use kfe_core::synthworld::{
    build_world, generate_session, BeamPattern, Interval, Preset, Trajectory, WorldSpec,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::args::{BackendArg, EvalArgs, SelectArgs, SimulateArgs, SubmapArgs, SummarizeArgs};

/// A run finished but its output failed a consistency recheck.
#[derive(Debug, thiserror::Error)]
#[error("invariant violated: {0}")]
pub struct InvariantViolation(pub String);

/// Slack for floating-point rechecks.
const RECHECK_TOL: f64 = 1e-9;

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().with_context(|| format!("{flag} is required"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let out = required(&a.out, "--out")?;
    let preset: Preset = a.preset.into();
    let spec: WorldSpec = match &a.world {
        Some(p) => read_json(p)?,
        None => preset.world(a.seed),
    };
    let mut traj: Trajectory = match &a.trajectory {
        Some(p) => read_json(p)?,
        None => preset.trajectory(),
    };
    if let Some(n) = a.waypoints {
        traj = traj.resampled(n)?;
    }
    if let Some(i) = a.interval {
        traj.interval = Interval::Meters(i);
    }
    let pattern = BeamPattern {
        rings: a.rings,
        steps: a.steps,
        vertical_fov_deg: a.vertical_fov,
        max_range: a.max_range,
        noise_sigma: a.noise,
    };
    let world = build_world(spec)?;
    let scans = generate_session(&world, &traj, &pattern, a.seed)?;
    save_session(out, &scans)?;
    let points: usize = scans.iter().map(|s| s.cloud.len()).sum();
    println!(
        "wrote {} scans ({points} points) to {}",
        scans.len(),
        out.display()
    );
    Ok(())
}

/// Recheck the keyframe ledger of a finished run.
fn recheck_ledger(run: &SelectRun) -> std::result::Result<(), InvariantViolation> {
    let alpha = run.state.config().alpha;
    let mut gamma_sum = 0.0;
    for k in run.state.keyframes() {
        if !(k.gamma >= 0.0 && k.gamma <= alpha + RECHECK_TOL) {
            return Err(InvariantViolation(format!(
                "keyframe {} has gamma {} outside [0, alpha]",
                k.id, k.gamma
            )));
        }
        gamma_sum += k.gamma;
    }
    let bound = run.state.suboptimality_bound();
    if (gamma_sum - bound.gamma_sum).abs() > RECHECK_TOL * (1.0 + gamma_sum) {
        return Err(InvariantViolation(format!(
            "gamma sum {} disagrees with ledger {}",
            gamma_sum, bound.gamma_sum
        )));
    }
    if bound.bound < -RECHECK_TOL {
        return Err(InvariantViolation(format!(
            "negative suboptimality bound {}",
            bound.bound
        )));
    }
    let mut prev = 0.0;
    for r in &run.selection_log {
        if r.running_bound < prev - RECHECK_TOL {
            return Err(InvariantViolation(format!(
                "running bound decreased at scan {}",
                r.scan_id
            )));
        }
        prev = r.running_bound;
    }
    let selected = run
        .selection_log
        .iter()
        .filter(|r: &&SelectionRecord| r.selected)
        .count();
    if selected != run.state.keyframes().len() {
        return Err(InvariantViolation(format!(
            "log selects {selected} scans but the database holds {}",
            run.state.keyframes().len()
        )));
    }
    Ok(())
}

pub fn select(a: &SelectArgs) -> Result<()> {
    let session = required(&a.session, "--session")?;
    let out = required(&a.out, "--out")?;
    let cfg = a.pipeline.to_config()?;
    let scans = load_session(session)?;
    let run = run_select(&scans, &cfg)?;
    recheck_ledger(&run)?;

    save_database(&run.state, &cfg.backend, out)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| out.join("metrics.csv"));
    write_metrics(&run.metrics, &metrics, MetricsFormat::from_path(&metrics))?;
    write_jsonl(
        &a.log.clone().unwrap_or_else(|| out.join("selection.jsonl")),
        &run.selection_log,
    )?;
    write_jsonl(
        &a.submap_log
            .clone()
            .unwrap_or_else(|| out.join("submaps.jsonl")),
        &run.submap_log,
    )?;

    let bound = run.state.suboptimality_bound();
    let triggers: Vec<String> = [
        Trigger::Bootstrap,
        Trigger::Feature,
        Trigger::Degeneracy,
        Trigger::Distance,
    ]
    .iter()
    .map(|&t| (t, run.trigger_count(t)))
    .filter(|&(_, c)| c > 0)
    .map(|(t, c)| format!("{t} {c}"))
    .collect();
    println!(
        "{} scans, {} keyframes ({}), gamma sum {:.4}, bound {:.4}",
        scans.len(),
        run.state.keyframes().len(),
        triggers.join(", "),
        bound.gamma_sum,
        bound.bound
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct BruteForceReport {
    ids: Vec<u64>,
    lambda_min: f64,
}

#[derive(Debug, Serialize)]
struct SubmapReport {
    scan_id: u64,
    keyframes_before: usize,
    candidates: Vec<CandidateBound>,
    selected_ids: Vec<u64>,
    marginals: Vec<f64>,
    gains: Vec<[f64; 3]>,
    lambda_min: f64,
    eigenvalues: [f64; 3],
    matched_points: usize,
    degeneracy: f64,
    candidates_considered: usize,
    candidates_pruned: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    audit: Vec<AuditEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    brute_force: Option<BruteForceReport>,
}

/// Recheck what the greedy guarantees: non-negative marginals and, in audit
/// mode, that nothing pruned could have beaten its bound.
fn recheck_submap(sel: &SubmapSelection) -> std::result::Result<(), InvariantViolation> {
    if let Some((id, m)) = sel
        .ids
        .iter()
        .zip(&sel.marginals)
        .find(|(_, &m)| m < -RECHECK_TOL)
    {
        return Err(InvariantViolation(format!(
            "keyframe {id} has negative marginal {m}"
        )));
    }
    if let Some(e) = sel
        .audit
        .iter()
        .find(|e| e.marginal() > e.bound + RECHECK_TOL * (1.0 + e.bound.abs()))
    {
        return Err(InvariantViolation(format!(
            "candidate {} gains {} above its bound {}",
            e.id,
            e.marginal(),
            e.bound
        )));
    }
    Ok(())
}

pub fn submap(a: &SubmapArgs) -> Result<()> {
    let db_dir = required(&a.db, "--db")?;
    let session = required(&a.session, "--session")?;
    let scan_id = *required(&a.scan, "--scan")?;
    let mut cfg = a.pipeline.to_config()?;
    let db = load_database(db_dir)?;
    cfg.backend = db.backend;
    cfg.submap.audit = a.audit;

    let scans = load_session(session)?;
    let scan = scans
        .iter()
        .find(|s| s.scan_id == scan_id)
        .with_context(|| format!("scan {scan_id} is not in {}", session.display()))?;
    // keyframes that existed when the scan arrived
    let before: Vec<_> = db
        .state
        .keyframes()
        .iter()
        .filter(|k| k.id < scan_id)
        .cloned()
        .collect();
    let prepared = prepare_scan(scan, &cfg)?;
    let problem = submap_problem(&prepared, scan.pose.translation(), &before, &cfg)?;
    let sel = problem.greedy(&cfg.submap)?;
    recheck_submap(&sel)?;
    let brute_force = if a.brute_force {
        let (ids, lambda_min) = problem.brute_force(cfg.submap.n)?;
        Some(BruteForceReport { ids, lambda_min })
    } else {
        None
    };

    let report = SubmapReport {
        scan_id,
        keyframes_before: before.len(),
        candidates: problem.bounds(),
        selected_ids: sel.ids.clone(),
        marginals: sel.marginals.clone(),
        gains: sel.gains.clone(),
        lambda_min: sel.lambda_min,
        eigenvalues: sel.hessian.eigenvalues(),
        matched_points: sel.matched_points,
        degeneracy: cfg.degeneracy(sel.lambda_min, sel.matched_points),
        candidates_considered: sel.candidates_considered,
        candidates_pruned: sel.candidates_pruned,
        audit: sel.audit.clone(),
        brute_force,
    };
    match &a.out {
        Some(path) => {
            write_json(path, &report)?;
            println!(
                "scan {scan_id}: {} of {} candidates, lambda_min {:.4}",
                report.selected_ids.len(),
                report.candidates.len(),
                report.lambda_min
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn summary_backend(backend: BackendArg, dim: usize) -> DescriptorBackend {
    match backend {
        BackendArg::RangeHistogram => DescriptorBackend::RangeHistogram(RangeHistogramParams {
            dim,
            ..Default::default()
        }),
        BackendArg::Oracle => DescriptorBackend::Oracle(OracleParams {
            dim,
            ..Default::default()
        }),
    }
}

pub fn summarize_cmd(a: &SummarizeArgs) -> Result<()> {
    let out = required(&a.out, "--out")?;
    if !(a.epsilon > 0.0 && a.epsilon < 1.0) {
        bail!("--epsilon must lie in (0, 1), got {}", a.epsilon);
    }
    let budget = match (a.k, a.budget) {
        (Some(0), None) => bail!("--k must be at least 1"),
        (Some(k), None) => SummaryBudget::Count(k),
        (None, Some(b)) => SummaryBudget::Bytes(b),
        _ => bail!("give exactly one of --k and --budget"),
    };
    let items = match (&a.db, &a.session) {
        (Some(db), None) => summary_items_from_state(&load_database(db)?.state),
        (None, Some(session)) => {
            let cfg = PipelineConfig {
                backend: summary_backend(a.backend, a.dim),
                voxel_size: a.voxel_size,
                ..Default::default()
            };
            cfg.validate()?;
            summary_items_from_session(&load_session(session)?, &cfg)?
        }
        _ => bail!("give exactly one of --db and --session"),
    };

    let mut run = summarize(&items, a.method.into(), budget, a.epsilon)?;
    let m = &run.manifest;
    if m.selected_ids.len() > m.k {
        return Err(InvariantViolation(format!(
            "{} keyframes selected for k = {}",
            m.selected_ids.len(),
            m.k
        ))
        .into());
    }
    if let Some(b) = m.byte_budget.filter(|&b| m.serialized_bytes > b) {
        return Err(InvariantViolation(format!(
            "summary takes {} bytes, budget {b}",
            m.serialized_bytes
        ))
        .into());
    }
    if let Some(path) = &a.merged_ply {
        write_ply(path, &merged_map(&items, &run.positions))?;
        run.manifest.merged_map = Some(PathBuf::from(path));
    }
    write_json(out, &run.manifest)?;
    let m = &run.manifest;
    println!(
        "{}: {} of {} keyframes, f {:.4}, loss {:.4}, {} evaluations, {} bytes, {:.1} ms",
        m.method,
        m.selected_ids.len(),
        m.scan_count,
        m.value,
        m.loss,
        m.evaluations,
        m.serialized_bytes,
        m.elapsed_ms
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let session = required(&a.session, "--session")?;
    let out = required(&a.out, "--out")?;
    let cfg = a.pipeline.to_config()?;
    let scans = load_session(session)?;
    let rows = run_eval(&scans, &cfg, a.baseline_k)?;
    write_csv(out, &EVAL_HEADER, &rows)?;
    let s = summarize_eval(&rows);
    println!(
        "{} scans matched; greedy size {:.2}, lambda_min {:.2}, {:.2} ms; baseline size {:.2}, lambda_min {:.2}, {:.2} ms",
        s.scans,
        s.greedy_avg_size,
        s.greedy_avg_lambda_min,
        s.greedy_avg_ms,
        s.baseline_avg_size,
        s.baseline_avg_lambda_min,
        s.baseline_avg_ms
    );
    Ok(())
}
