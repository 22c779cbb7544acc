//! Session-level drivers: online keyframe selection, submap comparison
//! against a k-nearest baseline, and summarization of a finished map.

use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::descriptor::{Descriptor, DescriptorBackend};
use crate::error::{invalid, Result};
use crate::geometry::{
    estimate_normals_covariances, ply, transform_cloud, voxel_downsample, IndexedCloud, PointCloud,
};
use crate::hessian::{degeneracy_from_lambda, subsample_scan, Hessian3};
use crate::io::{MetricsRecord, SummaryManifest};
use crate::selector::{
    Decision, Keyframe, SelectionRecord, SelectorConfig, SelectorState, Trigger,
};
use crate::submap::{gate_indices, SubmapConfig, SubmapProblem, SubmapRecord, SubmapSelection};
use crate::summarizer::{greedy_summarize, sieve_stream_summarize, SummaryResult};
use crate::synthworld::{scan_seed, SessionScan};

/// How keyframes are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Policy {
    /// Descriptor-distance and degeneracy triggers.
    Descriptor,
    /// A new keyframe whenever the sensor is `meters` from the most recent
    /// keyframe.
    Distance { meters: f64 },
}

impl std::str::FromStr for Policy {
    type Err = crate::Error;

    /// `descriptor`, `distance:5`, or `distance:5m`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "descriptor" {
            return Ok(Policy::Descriptor);
        }
        if let Some(rest) = s.strip_prefix("distance:") {
            let meters: f64 = rest
                .trim_end_matches('m')
                .parse()
                .map_err(|_| invalid(format!("bad distance in policy `{s}`")))?;
            if !(meters > 0.0) {
                return Err(invalid("distance policy needs a positive threshold"));
            }
            return Ok(Policy::Distance { meters });
        }
        Err(invalid(format!(
            "unknown policy `{s}` (expected descriptor or distance:<meters>)"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub backend: DescriptorBackend,
    pub selector: SelectorConfig,
    pub submap: SubmapConfig,
    pub policy: Policy,
    /// Meters; gates submap candidates and is the default degeneracy scale.
    pub sensor_range: f64,
    pub subsample_fraction: f64,
    pub seed: u64,
    /// Voxel size applied to every scan before matching and storage.
    pub voxel_size: f64,
    /// Neighbors used for keyframe normal estimation.
    pub normal_neighbors: usize,
    /// Degeneracy scale `m`; defaults to `sensor_range`.
    pub degeneracy_m: Option<f64>,
    /// Degeneracy count `z`; defaults to the number of correspondences.
    pub degeneracy_z: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backend: DescriptorBackend::default(),
            selector: SelectorConfig::default(),
            submap: SubmapConfig::default(),
            policy: Policy::Descriptor,
            sensor_range: 60.0,
            subsample_fraction: 0.25,
            seed: 0,
            voxel_size: 0.25,
            normal_neighbors: 10,
            degeneracy_m: None,
            degeneracy_z: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.selector.validate()?;
        self.submap.validate()?;
        if !(self.sensor_range > 0.0) {
            return Err(invalid("sensor range must be positive"));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(invalid("subsample fraction must be in (0, 1]"));
        }
        if !(self.voxel_size > 0.0) {
            return Err(invalid("voxel size must be positive"));
        }
        if self.normal_neighbors < 3 {
            return Err(invalid("normal estimation needs at least 3 neighbors"));
        }
        for (name, v) in [("m", self.degeneracy_m), ("z", self.degeneracy_z)] {
            if v.is_some_and(|v| !(v > 0.0)) {
                return Err(invalid(format!("degeneracy {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Degeneracy of a submap with the given `λ_min` and correspondence count.
    pub fn degeneracy(&self, lambda_min: f64, correspondences: usize) -> f64 {
        let m = self.degeneracy_m.unwrap_or(self.sensor_range);
        let z = self.degeneracy_z.unwrap_or(correspondences as f64);
        degeneracy_from_lambda(lambda_min, m, z)
    }
}

/// A scan after descriptor extraction and downsampling, in the world frame.
#[derive(Debug, Clone)]
pub struct PreparedScan {
    pub scan_id: u64,
    pub descriptor: Descriptor,
    pub world: PointCloud,
}

pub fn prepare_scan(scan: &SessionScan, cfg: &PipelineConfig) -> Result<PreparedScan> {
    let descriptor = cfg
        .backend
        .describe(&scan.cloud, Some(scan.pose.translation()))?;
    let local = voxel_downsample(&scan.cloud, cfg.voxel_size)?;
    Ok(PreparedScan {
        scan_id: scan.scan_id,
        descriptor,
        world: transform_cloud(&local, &scan.pose),
    })
}

/// Matching input for one scan: a seeded subsample of its world cloud.
fn match_cloud(p: &PreparedScan, cfg: &PipelineConfig) -> Result<PointCloud> {
    subsample_scan(
        &p.world,
        cfg.subsample_fraction,
        scan_seed(cfg.seed, p.scan_id),
    )
}

fn keyframe_cloud(p: &PreparedScan, cfg: &PipelineConfig) -> Result<IndexedCloud> {
    Ok(IndexedCloud::new(estimate_normals_covariances(
        &p.world,
        cfg.normal_neighbors,
    )?))
}

/// Matching problem of a scan at `position` against the keyframes within
/// twice the sensor range.
pub fn submap_problem(
    prepared: &PreparedScan,
    position: &Vector3<f64>,
    keyframes: &[Keyframe],
    cfg: &PipelineConfig,
) -> Result<SubmapProblem> {
    let query = match_cloud(prepared, cfg)?;
    let gated = gate_indices(keyframes, position, cfg.sensor_range)?;
    let refs: Vec<(u64, &IndexedCloud)> = gated
        .iter()
        .map(|&i| (keyframes[i].id, &keyframes[i].cloud))
        .collect();
    SubmapProblem::new(
        &query,
        &refs,
        cfg.submap.max_correspondence_dist,
        cfg.submap.threads,
    )
}

#[derive(Debug, Clone)]
pub struct SelectRun {
    pub state: SelectorState,
    pub selection_log: Vec<SelectionRecord>,
    pub submap_log: Vec<SubmapRecord>,
    pub metrics: Vec<MetricsRecord>,
}

impl SelectRun {
    pub fn trigger_count(&self, t: Trigger) -> usize {
        self.state
            .keyframes()
            .iter()
            .filter(|k| k.trigger == t)
            .count()
    }
}

fn retained_bytes(state: &SelectorState) -> u64 {
    state
        .keyframes()
        .iter()
        .map(|k| (k.cloud.cloud().byte_size() + 8 * k.descriptor.dim()) as u64)
        .sum()
}

/// Stream a session through submap generation, degeneracy scoring and
/// keyframe selection.
pub fn run_select(scans: &[SessionScan], cfg: &PipelineConfig) -> Result<SelectRun> {
    cfg.validate()?;
    let mut state = SelectorState::new(cfg.selector)?;
    let mut selection_log = Vec::with_capacity(scans.len());
    let mut submap_log = Vec::with_capacity(scans.len());
    let mut metrics = Vec::with_capacity(scans.len());

    for scan in scans {
        let started = Instant::now();
        let prepared = prepare_scan(scan, cfg)?;
        let sel = if state.keyframes().is_empty() || prepared.world.is_empty() {
            SubmapSelection::default()
        } else {
            submap_problem(&prepared, scan.pose.translation(), state.keyframes(), cfg)?
                .greedy(&cfg.submap)?
        };
        let degeneracy = cfg.degeneracy(sel.lambda_min, sel.matched_points);

        let decision = match cfg.policy {
            Policy::Descriptor => state.decide(&prepared.descriptor, degeneracy),
            Policy::Distance { meters } => match state.keyframes().last() {
                None => state.decide(&prepared.descriptor, degeneracy),
                Some(last)
                    if (last.pose.translation() - scan.pose.translation()).norm() >= meters =>
                {
                    state.decide_forced(&prepared.descriptor, Trigger::Distance)
                }
                Some(_) => Decision {
                    selected: false,
                    trigger: None,
                    gamma: 0.0,
                    d_f: Some(
                        crate::selector::min_descriptor_distance(
                            &prepared.descriptor,
                            state.keyframes(),
                        )?
                        .0,
                    ),
                },
            },
        };
        if decision.selected {
            let cloud = keyframe_cloud(&prepared, cfg)?;
            state.commit(
                &decision,
                scan.scan_id,
                scan.pose,
                cloud,
                prepared.descriptor.clone(),
            )?;
        }

        submap_log.push(SubmapRecord::new(scan.scan_id, &sel, started));
        selection_log.push(SelectionRecord {
            scan_id: scan.scan_id,
            selected: decision.selected,
            trigger: decision.trigger,
            d_f: decision.d_f,
            degeneracy,
            gamma: decision.gamma,
            running_bound: state.suboptimality_bound().bound,
        });
        metrics.push(MetricsRecord {
            scan_id: scan.scan_id,
            keyframe_count: state.keyframes().len(),
            submap_size: sel.ids.len(),
            lambda_min: sel.lambda_min.max(0.0),
            degeneracy,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
            rss_proxy_bytes: retained_bytes(&state),
        });
    }
    Ok(SelectRun {
        state,
        selection_log,
        submap_log,
        metrics,
    })
}

/// Per-scan comparison of greedy and k-nearest submaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scan_id: u64,
    pub keyframe_count: usize,
    pub greedy_size: usize,
    pub greedy_lambda_min: f64,
    pub greedy_ms: f64,
    pub baseline_size: usize,
    pub baseline_lambda_min: f64,
    pub baseline_ms: f64,
}

pub const EVAL_HEADER: [&str; 8] = [
    "scan_id",
    "keyframe_count",
    "greedy_size",
    "greedy_lambda_min",
    "greedy_ms",
    "baseline_size",
    "baseline_lambda_min",
    "baseline_ms",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Scans that had at least one candidate keyframe.
    pub scans: usize,
    pub greedy_avg_size: f64,
    pub greedy_avg_lambda_min: f64,
    pub greedy_avg_ms: f64,
    pub baseline_avg_size: f64,
    pub baseline_avg_lambda_min: f64,
    pub baseline_avg_ms: f64,
}

pub fn summarize_eval(rows: &[EvalRow]) -> EvalSummary {
    let used: Vec<&EvalRow> = rows.iter().filter(|r| r.keyframe_count > 0).collect();
    let n = used.len().max(1) as f64;
    let avg = |f: &dyn Fn(&EvalRow) -> f64| used.iter().map(|r| f(r)).sum::<f64>() / n;
    EvalSummary {
        scans: used.len(),
        greedy_avg_size: avg(&|r| r.greedy_size as f64),
        greedy_avg_lambda_min: avg(&|r| r.greedy_lambda_min),
        greedy_avg_ms: avg(&|r| r.greedy_ms),
        baseline_avg_size: avg(&|r| r.baseline_size as f64),
        baseline_avg_lambda_min: avg(&|r| r.baseline_lambda_min),
        baseline_avg_ms: avg(&|r| r.baseline_ms),
    }
}

/// Keyframes are chosen by `cfg.policy` from the scans seen so far; each
/// scan is then matched against a greedy submap of size ≤ `cfg.submap.n` and
/// against its `baseline_k` nearest gated keyframes. Points already matched
/// by a nearer baseline keyframe are not matched again, mirroring a
/// concatenated submap.
pub fn run_eval(
    scans: &[SessionScan],
    cfg: &PipelineConfig,
    baseline_k: usize,
) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    if baseline_k == 0 {
        return Err(invalid("baseline size must be at least 1"));
    }
    let mut state = SelectorState::new(cfg.selector)?;
    let mut rows = Vec::with_capacity(scans.len());
    for scan in scans {
        let prepared = prepare_scan(scan, cfg)?;
        let mut row = EvalRow {
            scan_id: scan.scan_id,
            keyframe_count: state.keyframes().len(),
            greedy_size: 0,
            greedy_lambda_min: 0.0,
            greedy_ms: 0.0,
            baseline_size: 0,
            baseline_lambda_min: 0.0,
            baseline_ms: 0.0,
        };
        let mut degeneracy = f64::INFINITY;
        if !state.keyframes().is_empty() && !prepared.world.is_empty() {
            let query = match_cloud(&prepared, cfg)?;
            let t = scan.pose.translation();
            let gated = gate_indices(state.keyframes(), t, cfg.sensor_range)?;
            let kfs = state.keyframes();

            let started = Instant::now();
            let refs: Vec<(u64, &IndexedCloud)> =
                gated.iter().map(|&i| (kfs[i].id, &kfs[i].cloud)).collect();
            let sel = SubmapProblem::new(
                &query,
                &refs,
                cfg.submap.max_correspondence_dist,
                cfg.submap.threads,
            )?
            .greedy(&cfg.submap)?;
            row.greedy_ms = started.elapsed().as_secs_f64() * 1e3;
            row.greedy_size = sel.ids.len();
            row.greedy_lambda_min = sel.lambda_min.max(0.0);
            degeneracy = cfg.degeneracy(sel.lambda_min, sel.matched_points);

            let started = Instant::now();
            let mut nearest = gated.clone();
            nearest.sort_by(|&a, &b| {
                let da = (kfs[a].pose.translation() - t).norm();
                let db = (kfs[b].pose.translation() - t).norm();
                da.total_cmp(&db).then(kfs[a].id.cmp(&kfs[b].id))
            });
            nearest.truncate(baseline_k);
            let refs: Vec<(u64, &IndexedCloud)> = nearest
                .iter()
                .map(|&i| (kfs[i].id, &kfs[i].cloud))
                .collect();
            let problem = SubmapProblem::new(
                &query,
                &refs,
                cfg.submap.max_correspondence_dist,
                cfg.submap.threads,
            )?;
            let order: Vec<usize> = (0..refs.len()).collect();
            let h: Hessian3 = problem.sequence_hessian(&order);
            row.baseline_ms = started.elapsed().as_secs_f64() * 1e3;
            row.baseline_size = refs.len();
            row.baseline_lambda_min = h.min_eigenvalue().max(0.0);
        }
        let decision = match cfg.policy {
            Policy::Descriptor => state.decide(&prepared.descriptor, degeneracy),
            Policy::Distance { meters } => match state.keyframes().last() {
                Some(last)
                    if (last.pose.translation() - scan.pose.translation()).norm() < meters =>
                {
                    Decision {
                        selected: false,
                        trigger: None,
                        gamma: 0.0,
                        d_f: None,
                    }
                }
                Some(_) => state.decide_forced(&prepared.descriptor, Trigger::Distance),
                None => state.decide(&prepared.descriptor, degeneracy),
            },
        };
        if decision.selected {
            let cloud = keyframe_cloud(&prepared, cfg)?;
            state.commit(
                &decision,
                scan.scan_id,
                scan.pose,
                cloud,
                prepared.descriptor.clone(),
            )?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// One element of a summarization ground set.
#[derive(Debug, Clone)]
pub struct SummaryItem {
    pub id: u64,
    pub descriptor: Descriptor,
    /// World-frame cloud that a summary map would retain.
    pub cloud: PointCloud,
}

impl SummaryItem {
    /// Serialized size: the PLY cloud plus the descriptor blob entry.
    pub fn serialized_bytes(&self) -> u64 {
        (ply::to_ply_string(&self.cloud).len() + 4 + 8 * self.descriptor.dim()) as u64
    }
}

/// Ground set from a session: one item per scan.
pub fn summary_items_from_session(
    scans: &[SessionScan],
    cfg: &PipelineConfig,
) -> Result<Vec<SummaryItem>> {
    scans
        .iter()
        .map(|s| {
            let p = prepare_scan(s, cfg)?;
            Ok(SummaryItem {
                id: p.scan_id,
                descriptor: p.descriptor,
                cloud: p.world,
            })
        })
        .collect()
}

/// Ground set from keyframes of a database.
pub fn summary_items_from_state(state: &SelectorState) -> Vec<SummaryItem> {
    state
        .keyframes()
        .iter()
        .map(|k| SummaryItem {
            id: k.id,
            descriptor: k.descriptor.clone(),
            cloud: k.cloud.cloud().clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryMethod {
    Sieve,
    Greedy,
}

impl std::str::FromStr for SummaryMethod {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sieve" => Ok(SummaryMethod::Sieve),
            "greedy" => Ok(SummaryMethod::Greedy),
            other => Err(invalid(format!(
                "unknown method `{other}` (expected sieve or greedy)"
            ))),
        }
    }
}

impl SummaryMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SummaryMethod::Sieve => "sieve",
            SummaryMethod::Greedy => "greedy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SummaryBudget {
    Count(usize),
    Bytes(u64),
}

/// Output of [`summarize`]: the manifest plus the selected positions.
#[derive(Debug, Clone)]
pub struct SummaryRun {
    pub manifest: SummaryManifest,
    pub positions: Vec<usize>,
}

fn run_method(
    descs: &[Descriptor],
    method: SummaryMethod,
    k: usize,
    epsilon: f64,
) -> Result<SummaryResult> {
    match method {
        SummaryMethod::Sieve => sieve_stream_summarize(descs, k, epsilon),
        SummaryMethod::Greedy => greedy_summarize(descs, k),
    }
}

/// Summarize a ground set under a keyframe count or a byte budget.
///
/// A byte budget is turned into a count by dividing by the median item
/// size; the count is then lowered until the selected items fit.
pub fn summarize(
    items: &[SummaryItem],
    method: SummaryMethod,
    budget: SummaryBudget,
    epsilon: f64,
) -> Result<SummaryRun> {
    let descs: Vec<Descriptor> = items.iter().map(|i| i.descriptor.clone()).collect();
    let sizes: Vec<u64> = items.iter().map(SummaryItem::serialized_bytes).collect();
    let started = Instant::now();
    let (k, result, bytes) = match budget {
        SummaryBudget::Count(k) => {
            if k == 0 {
                return Err(invalid("summary size k must be at least 1"));
            }
            let r = run_method(&descs, method, k, epsilon)?;
            let bytes = r.ids.iter().map(|&i| sizes[i]).sum();
            (k, r, bytes)
        }
        SummaryBudget::Bytes(budget) => {
            if items.is_empty() {
                return Err(invalid("nothing to summarize"));
            }
            let mut sorted = sizes.clone();
            sorted.sort_unstable();
            let median = sorted[sorted.len() / 2].max(1);
            let mut k = (budget / median) as usize;
            if k == 0 {
                return Err(invalid(format!(
                    "byte budget {budget} is below the median keyframe size {median}"
                )));
            }
            loop {
                let r = run_method(&descs, method, k, epsilon)?;
                let bytes: u64 = r.ids.iter().map(|&i| sizes[i]).sum();
                if bytes <= budget {
                    break (k, r, bytes);
                }
                if k == 1 {
                    return Err(invalid(format!("no summary fits in {budget} bytes")));
                }
                k -= 1;
            }
        }
    };
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(SummaryRun {
        manifest: SummaryManifest {
            method: method.as_str().to_string(),
            k,
            epsilon,
            byte_budget: match budget {
                SummaryBudget::Bytes(b) => Some(b),
                SummaryBudget::Count(_) => None,
            },
            scan_count: items.len(),
            selected_ids: result.ids.iter().map(|&i| items[i].id).collect(),
            value: result.value,
            loss: result.loss,
            evaluations: result.evaluations,
            elapsed_ms,
            serialized_bytes: bytes,
            merged_map: None,
        },
        positions: result.ids,
    })
}

/// Union of the selected items' clouds.
pub fn merged_map(items: &[SummaryItem], positions: &[usize]) -> PointCloud {
    PointCloud::concat(positions.iter().map(|&i| &items[i].cloud))
}
