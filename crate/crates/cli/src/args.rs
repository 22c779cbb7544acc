//! Command-line flags and JSON config merging.
//!
//! Every subcommand accepts `--config FILE`. Keys of the JSON object use the
//! flag names with underscores (`sensor_range` for `--sensor-range`); a flag
//! given on the command line wins over the file, the file wins over the
//! built-in default.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use kfe_core::descriptor::{DescriptorBackend, OracleParams, RangeHistogramParams};
use kfe_core::pipeline::{PipelineConfig, Policy, SummaryMethod};
use kfe_core::selector::SelectorConfig;
use kfe_core::submap::SubmapConfig;
use kfe_core::synthworld::Preset;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Environment variable capping worker threads (0 = all cores).
pub const THREADS_ENV: &str = "KFE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "kfe",
    version,
    about = "Keyframe selection, submap generation and map summarization on LiDAR sessions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ray-cast a synthetic session into a directory.
    Simulate(SimulateArgs),
    /// Stream a session through keyframe selection and save the database.
    Select(SelectArgs),
    /// Build the submap of one scan against a saved database.
    Submap(SubmapArgs),
    /// Summarize a database or session under a keyframe or byte budget.
    Summarize(SummarizeArgs),
    /// Compare greedy submaps with a k-nearest baseline over a session.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    CornerRoom,
    Corridor,
    Loop,
    ForestProxy,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::CornerRoom => Preset::CornerRoom,
            PresetArg::Corridor => Preset::Corridor,
            PresetArg::Loop => Preset::Loop,
            PresetArg::ForestProxy => Preset::ForestProxy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendArg {
    RangeHistogram,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Sieve,
    Greedy,
}

impl From<MethodArg> for SummaryMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Sieve => SummaryMethod::Sieve,
            MethodArg::Greedy => SummaryMethod::Greedy,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// JSON config file; command-line flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Built-in world and path.
    #[arg(long, value_enum, default_value = "corner-room")]
    pub preset: PresetArg,
    /// World file (panels and cylinders) replacing the preset world.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Trajectory file replacing the preset path.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Resample the path to this many evenly spaced waypoints.
    #[arg(long)]
    pub waypoints: Option<usize>,
    /// Scan spacing in meters [default: the trajectory's own interval].
    #[arg(long)]
    pub interval: Option<f64>,
    /// Output session directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for range noise (and forest layout).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Elevation rings.
    #[arg(long, default_value_t = 16)]
    pub rings: usize,
    /// Azimuth steps per ring.
    #[arg(long, default_value_t = 360)]
    pub steps: usize,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 45.0)]
    pub vertical_fov: f64,
    /// Maximum beam range in meters.
    #[arg(long, default_value_t = 60.0)]
    pub max_range: f64,
    /// Range noise standard deviation in meters.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
}

/// Options shared by every command that runs the selection pipeline.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PipelineArgs {
    /// Feature threshold α on descriptor distance, in (0, 2).
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
    /// Degeneracy threshold β.
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    /// Maximum submap size N.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Sensor range in meters; keyframes within twice this are candidates.
    #[arg(long, default_value_t = 60.0)]
    pub sensor_range: f64,
    /// Fraction of each scan used for matching, in (0, 1].
    #[arg(long, default_value_t = 0.25)]
    pub subsample: f64,
    /// Seed for scan subsampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keyframe policy: `descriptor` or `distance:<meters>` (e.g. distance:5m).
    #[arg(long, default_value = "descriptor")]
    pub policy: String,
    /// Descriptor backend.
    #[arg(long, value_enum, default_value = "range-histogram")]
    pub backend: BackendArg,
    /// Descriptor dimension p.
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    /// Voxel size in meters applied to every scan.
    #[arg(long, default_value_t = 0.25)]
    pub voxel_size: f64,
    /// Correspondence search radius in meters.
    #[arg(long, default_value_t = 1.0)]
    pub max_correspondence_dist: f64,
    /// Gain tolerance τ for accepting a submap keyframe.
    #[arg(long, default_value_t = 1e-9)]
    pub tau_gain: f64,
    /// Disable bound-based pruning of submap candidates.
    #[arg(long, default_value_t = false)]
    pub no_prune: bool,
    /// Degeneracy scale m [default: the sensor range].
    #[arg(long)]
    pub degeneracy_m: Option<f64>,
    /// Degeneracy count z [default: matched scan points].
    #[arg(long)]
    pub degeneracy_z: Option<f64>,
}

impl PipelineArgs {
    pub fn to_config(&self) -> anyhow::Result<PipelineConfig> {
        let policy: Policy = self.policy.parse()?;
        let backend = match self.backend {
            BackendArg::RangeHistogram => DescriptorBackend::RangeHistogram(RangeHistogramParams {
                dim: self.dim,
                ..Default::default()
            }),
            BackendArg::Oracle => DescriptorBackend::Oracle(OracleParams {
                dim: self.dim,
                ..Default::default()
            }),
        };
        let cfg = PipelineConfig {
            backend,
            selector: SelectorConfig::new(self.alpha, self.beta)?,
            submap: SubmapConfig {
                n: self.n,
                max_correspondence_dist: self.max_correspondence_dist,
                prune: !self.no_prune,
                audit: false,
                tau_gain: self.tau_gain,
                threads: threads_from_env()?,
            },
            policy,
            sensor_range: self.sensor_range,
            subsample_fraction: self.subsample,
            seed: self.seed,
            voxel_size: self.voxel_size,
            degeneracy_m: self.degeneracy_m,
            degeneracy_z: self.degeneracy_z,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SelectArgs {
    /// JSON config file; command-line flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Session directory.
    #[arg(long)]
    pub session: Option<PathBuf>,
    /// Output database directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-scan metrics; `.json` for JSON, CSV otherwise [default: <out>/metrics.csv].
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Selection log, JSON lines [default: <out>/selection.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Submap log, JSON lines [default: <out>/submaps.jsonl].
    #[arg(long)]
    pub submap_log: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SubmapArgs {
    /// JSON config file; command-line flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Keyframe database directory.
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// Session directory holding the scan.
    #[arg(long)]
    pub session: Option<PathBuf>,
    /// Id of the scan to match.
    #[arg(long)]
    pub scan: Option<u64>,
    /// Write the result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate every candidate and report what pruning skips.
    #[arg(long, default_value_t = false)]
    pub audit: bool,
    /// Also report the exhaustive optimum (at most 12 candidates, N ≤ 4).
    #[arg(long, default_value_t = false)]
    pub brute_force: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SummarizeArgs {
    /// JSON config file; command-line flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Keyframe database to summarize.
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// Session to summarize, one element per scan.
    #[arg(long)]
    pub session: Option<PathBuf>,
    /// Number of keyframes to keep.
    #[arg(long)]
    pub k: Option<usize>,
    /// Byte budget for the serialized summary.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Summarization algorithm.
    #[arg(long, value_enum, default_value = "sieve")]
    pub method: MethodArg,
    /// Sieve guess spacing ε, in (0, 1).
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// Output manifest (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the union of the selected clouds as PLY.
    #[arg(long)]
    pub merged_ply: Option<PathBuf>,
    /// Descriptor backend for session input.
    #[arg(long, value_enum, default_value = "range-histogram")]
    pub backend: BackendArg,
    /// Descriptor dimension p for session input.
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    /// Voxel size in meters for session input.
    #[arg(long, default_value_t = 0.25)]
    pub voxel_size: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// JSON config file; command-line flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Session directory.
    #[arg(long)]
    pub session: Option<PathBuf>,
    /// Per-scan comparison CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Size of the nearest-keyframe baseline submap.
    #[arg(long, default_value_t = 10)]
    pub baseline_k: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub pipeline: PipelineArgs,
}

pub fn threads_from_env() -> anyhow::Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a non-negative integer, got `{v}`")),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => bail!("{THREADS_ENV}: {e}"),
    }
}

/// Every config key any subcommand understands.
fn known_keys() -> BTreeSet<String> {
    Cli::command()
        .get_subcommands()
        .flat_map(|s| {
            s.get_arguments()
                .map(|a| a.get_id().to_string())
                .collect::<Vec<_>>()
        })
        .filter(|id| id != "config" && id != "help")
        .collect()
}

/// Fill `parsed` from the config file wherever the flag was not given on
/// the command line.
pub fn merge_config<T: Serialize + DeserializeOwned>(
    parsed: T,
    matches: &ArgMatches,
    config: Option<&Path>,
) -> anyhow::Result<T> {
    let Some(path) = config else {
        return Ok(parsed);
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let file: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let serde_json::Value::Object(file) = file else {
        bail!("config {} must hold a JSON object", path.display());
    };
    let known = known_keys();
    let mut value = serde_json::to_value(parsed)?;
    let fields = value
        .as_object_mut()
        .expect("argument structs serialize to objects");
    for (key, v) in file {
        if !known.contains(&key) {
            bail!("unknown config key `{key}`");
        }
        // keys of other subcommands are allowed so one file can serve several
        if fields.contains_key(&key) && matches.value_source(&key) != Some(ValueSource::CommandLine)
        {
            fields.insert(key, v);
        }
    }
    serde_json::from_value(value)
        .with_context(|| format!("invalid value in config {}", path.display()))
}
