//! On-disk formats: simulated sessions, keyframe databases, metrics tables
//! and JSON Lines logs.
//!
//! A keyframe database is a directory holding `manifest.json`, a descriptor
//! blob `descriptors.bin` (per keyframe: `u32` LE dimension followed by that
//! many `f64` LE values) and one ASCII PLY cloud per keyframe. The manifest
//! checksum is the hex SHA-256 of the manifest serialized with an empty
//! checksum field, followed by the blob bytes.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::descriptor::{Descriptor, DescriptorBackend};
use crate::error::{format_err, invalid, Error, Result};
use crate::geometry::{ply, IndexedCloud, Pose, PoseRecord};
use crate::selector::{Keyframe, SelectorConfig, SelectorState, Trigger};
use crate::synthworld::SessionScan;

pub const FORMAT_VERSION: &str = "kfe-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "descriptors.bin";
pub const SESSION_FILE: &str = "session.jsonl";

/// One line of `session.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub scan_id: u64,
    pub timestamp: f64,
    pub t: [f64; 3],
    pub q: [f64; 4],
    pub cloud: String,
}

fn scan_file_name(id: u64) -> String {
    format!("scan_{id:06}.ply")
}

/// Write a session directory (created if missing).
pub fn save_session(dir: &Path, scans: &[SessionScan]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(scans.len());
    for s in scans {
        let name = scan_file_name(s.scan_id);
        ply::write_ply(&dir.join(&name), &s.cloud)?;
        let pose = PoseRecord::from(s.pose);
        records.push(SessionRecord {
            scan_id: s.scan_id,
            timestamp: s.timestamp,
            t: pose.t,
            q: pose.q,
            cloud: name,
        });
    }
    write_jsonl(&dir.join(SESSION_FILE), &records)
}

pub fn load_session(dir: &Path) -> Result<Vec<SessionScan>> {
    let index = dir.join(SESSION_FILE);
    if !index.is_file() {
        return Err(format_err(
            "session",
            format!("{} not found", index.display()),
        ));
    }
    let records: Vec<SessionRecord> = read_jsonl(&index)?;
    let mut last: Option<u64> = None;
    records
        .into_iter()
        .map(|r| {
            if last.is_some_and(|l| r.scan_id <= l) {
                return Err(format_err(
                    "session",
                    format!("scan ids not increasing at {}", r.scan_id),
                ));
            }
            last = Some(r.scan_id);
            let path = dir.join(&r.cloud);
            if !path.is_file() {
                return Err(Error::MissingCloud(path));
            }
            Ok(SessionScan {
                scan_id: r.scan_id,
                timestamp: r.timestamp,
                pose: Pose::try_from(PoseRecord { t: r.t, q: r.q })?,
                cloud: ply::read_ply(&path)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub id: u64,
    pub pose: Pose,
    pub gamma: f64,
    pub trigger: Trigger,
    pub cloud_file: String,
    /// Byte offset of this keyframe's entry in the descriptor blob.
    pub descriptor_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub descriptor_dim: usize,
    pub backend: DescriptorBackend,
    pub selector: SelectorConfig,
    pub keyframes: Vec<KeyframeRecord>,
    #[serde(default)]
    pub checksum: String,
}

/// A loaded database: the selector state plus the backend that produced the
/// descriptors.
#[derive(Debug, Clone)]
pub struct KeyframeDatabase {
    pub state: SelectorState,
    pub backend: DescriptorBackend,
}

fn checksum(manifest: &Manifest, blob: &[u8]) -> Result<String> {
    let mut body = manifest.clone();
    body.checksum.clear();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&body)?);
    h.update(blob);
    Ok(hex::encode(h.finalize()))
}

fn entry_len(dim: usize) -> u64 {
    4 + 8 * dim as u64
}

pub fn save_database(state: &SelectorState, backend: &DescriptorBackend, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let dim = state
        .keyframes()
        .first()
        .map_or(backend.dim(), |k| k.descriptor.dim());
    let mut blob = Vec::with_capacity(state.keyframes().len() * entry_len(dim) as usize);
    let mut records = Vec::with_capacity(state.keyframes().len());
    for k in state.keyframes() {
        if k.descriptor.dim() != dim {
            return Err(invalid("keyframe descriptors differ in dimension"));
        }
        let name = format!("keyframe_{:06}.ply", k.id);
        ply::write_ply(&dir.join(&name), k.cloud.cloud())?;
        records.push(KeyframeRecord {
            id: k.id,
            pose: k.pose,
            gamma: k.gamma,
            trigger: k.trigger,
            cloud_file: name,
            descriptor_offset: blob.len() as u64,
        });
        blob.extend_from_slice(&(dim as u32).to_le_bytes());
        for v in k.descriptor.as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION.to_string(),
        descriptor_dim: dim,
        backend: *backend,
        selector: *state.config(),
        keyframes: records,
        checksum: String::new(),
    };
    manifest.checksum = checksum(&manifest, &blob)?;
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_database(dir: &Path) -> Result<KeyframeDatabase> {
    let text = fs::read(dir.join(MANIFEST_FILE))?;
    // check the version before committing to the rest of the layout
    let probe: serde_json::Value = serde_json::from_slice(&text)?;
    let found = probe
        .get("format_version")
        .and_then(|v| v.as_str())
        .unwrap_or("")
        .to_string();
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION.to_string(),
            found,
        });
    }
    let manifest: Manifest = serde_json::from_value(probe)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let dim = manifest.descriptor_dim;
    let expected = manifest.keyframes.len() as u64 * entry_len(dim);
    if blob.len() as u64 != expected {
        return Err(Error::BlobLength {
            expected,
            actual: blob.len() as u64,
        });
    }
    if manifest.keyframes.windows(2).any(|w| w[0].id >= w[1].id) {
        return Err(format_err(
            "manifest",
            "keyframe ids are not unique and sorted",
        ));
    }
    for r in &manifest.keyframes {
        let path = dir.join(&r.cloud_file);
        if !path.is_file() {
            return Err(Error::MissingCloud(path));
        }
    }
    let computed = checksum(&manifest, &blob)?;
    if computed != manifest.checksum {
        return Err(Error::ChecksumMismatch {
            recorded: manifest.checksum.clone(),
            computed,
        });
    }

    let mut keyframes = Vec::with_capacity(manifest.keyframes.len());
    for r in &manifest.keyframes {
        let off = r.descriptor_offset as usize;
        let end = off + entry_len(dim) as usize;
        if end > blob.len() {
            return Err(format_err(
                "descriptor blob",
                format!("offset {off} out of range"),
            ));
        }
        let entry = &blob[off..end];
        let stored = u32::from_le_bytes(entry[..4].try_into().expect("4-byte slice")) as usize;
        if stored != dim {
            return Err(format_err(
                "descriptor blob",
                format!("entry dimension {stored} != {dim}"),
            ));
        }
        let values: Vec<f64> = entry[4..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let cloud = ply::read_ply(&dir.join(&r.cloud_file))?;
        keyframes.push(Keyframe {
            id: r.id,
            pose: r.pose,
            cloud: IndexedCloud::new(cloud),
            descriptor: Descriptor::from_unit(values)?,
            trigger: r.trigger,
            gamma: r.gamma,
        });
    }
    Ok(KeyframeDatabase {
        state: SelectorState::from_keyframes(manifest.selector, keyframes)?,
        backend: manifest.backend,
    })
}

/// One metrics row per processed scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scan_id: u64,
    pub keyframe_count: usize,
    pub submap_size: usize,
    pub lambda_min: f64,
    #[serde(with = "crate::serde_inf")]
    pub degeneracy: f64,
    pub elapsed_ms: f64,
    pub rss_proxy_bytes: u64,
}

pub const METRICS_HEADER: [&str; 7] = [
    "scan_id",
    "keyframe_count",
    "submap_size",
    "lambda_min",
    "degeneracy",
    "elapsed_ms",
    "rss_proxy_bytes",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsFormat {
    Csv,
    Json,
}

impl MetricsFormat {
    /// `json` for a `.json` extension, CSV otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => MetricsFormat::Json,
            _ => MetricsFormat::Csv,
        }
    }
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path, format: MetricsFormat) -> Result<()> {
    match format {
        MetricsFormat::Csv => write_csv(path, &METRICS_HEADER, records),
        MetricsFormat::Json => {
            let mut w = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut w, records)?;
            w.write_all(b"\n")?;
            w.flush()?;
            Ok(())
        }
    }
}

/// CSV with an explicit header row, written even when `rows` is empty.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| {
                format_err("json lines", format!("{}:{}: {e}", path.display(), i + 1))
            })?,
        );
    }
    Ok(out)
}

/// Result file of a summarization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryManifest {
    pub method: String,
    pub k: usize,
    pub epsilon: f64,
    pub byte_budget: Option<u64>,
    pub scan_count: usize,
    pub selected_ids: Vec<u64>,
    pub value: f64,
    pub loss: f64,
    pub evaluations: u64,
    pub elapsed_ms: f64,
    pub serialized_bytes: u64,
    pub merged_map: Option<PathBuf>,
}
