//! Crash-consistent checkpoint directories.
//!
//! A checkpoint is staged in `.ckpt-<step>.tmp`: the five payload files are
//! written and fsynced, then `manifest.json` with their hashes, then the
//! empty `COMPLETE` marker, and finally the directory is renamed into place.
//! A directory counts as consistent only if `COMPLETE` exists and every
//! hash in its manifest verifies.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{fnv1a64, to_hex};
use crate::monitor::Monitor;
use crate::sampler::SamplerState;
use crate::schema::TaskType;
use crate::shardstore::SealedCursor;

use super::trainer::TrainerBlobs;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const COMPLETE_MARKER: &str = "COMPLETE";
pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD_FILES: [&str; 5] = [
    "model.bin",
    "optimizer.bin",
    "sampler.json",
    "cursor.json",
    "monitor.json",
];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("IO_FAILURE on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("injected crash at write boundary {0}")]
    InjectedCrash(u64),
    #[error("checkpoint {path} is inconsistent: {reason}")]
    Inconsistent { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Periodic,
    Emergency,
}

pub fn checkpoint_dir_name(step: u64, kind: CheckpointKind) -> String {
    match kind {
        CheckpointKind::Periodic => format!("ckpt-{step:09}"),
        CheckpointKind::Emergency => format!("ckpt-{step:09}-emergency"),
    }
}

fn parse_dir_name(name: &str) -> Option<(u64, CheckpointKind)> {
    let rest = name.strip_prefix("ckpt-")?;
    let (digits, kind) = match rest.strip_suffix("-emergency") {
        Some(d) => (d, CheckpointKind::Emergency),
        None => (rest, CheckpointKind::Periodic),
    };
    (digits.len() == 9 && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| (digits.parse().expect("nine digits"), kind))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub step: u64,
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub data_manifest_hash: String,
    /// File name to FNV-1a 64 hex of its bytes.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CursorFile {
    pub step: u64,
    pub cursors: BTreeMap<TaskType, SealedCursor>,
    /// Simulated milliseconds elapsed, the clock behind metric `wall_time`.
    #[serde(default)]
    pub elapsed_ms: f64,
}

/// Everything needed to continue a run after `step` completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub step: u64,
    pub kind: CheckpointKind,
    pub config_hash: u64,
    pub data_manifest_hash: u64,
    pub blobs: TrainerBlobs,
    pub sampler: SamplerState,
    pub cursors: CursorFile,
    pub monitor: Monitor,
}

/// Counts checkpoint write boundaries and optionally fails at one of them.
///
/// Boundaries are numbered from zero across every checkpoint written
/// through the same injector. The boundary inside each payload write leaves
/// a torn file behind.
#[derive(Debug, Clone, Default)]
pub struct FaultInjector {
    crash_at: Option<u64>,
    ticks: u64,
}

impl FaultInjector {
    pub fn counting() -> Self {
        Self::default()
    }

    pub fn crash_at(boundary: u64) -> Self {
        Self {
            crash_at: Some(boundary),
            ticks: 0,
        }
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    fn tick(&mut self) -> Result<(), CheckpointError> {
        let now = self.ticks;
        self.ticks += 1;
        if self.crash_at == Some(now) {
            Err(CheckpointError::InjectedCrash(now))
        } else {
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: &[u8], faults: &mut FaultInjector) -> Result<(), CheckpointError> {
    faults.tick()?;
    let mut f = File::create(path).map_err(io_err(path))?;
    let half = bytes.len() / 2;
    f.write_all(&bytes[..half]).map_err(io_err(path))?;
    if let Err(e) = faults.tick() {
        let _ = f.sync_all();
        return Err(e);
    }
    f.write_all(&bytes[half..]).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))?;
    faults.tick()
}

fn sync_dir(dir: &Path) -> Result<(), CheckpointError> {
    File::open(dir).and_then(|d| d.sync_all()).map_err(io_err(dir))
}

/// Removes a checkpoint directory so that it stops looking consistent
/// before any payload disappears.
pub fn remove_checkpoint(dir: &Path) -> Result<(), CheckpointError> {
    match fs::remove_file(dir.join(COMPLETE_MARKER)) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(io_err(dir)(e)),
    }
    match fs::remove_dir_all(dir) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(io_err(dir)(e)),
    }
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("checkpoint serialization");
    v.push(b'\n');
    v
}

pub fn write_checkpoint(
    state: &CheckpointState,
    out_dir: &Path,
    faults: &mut FaultInjector,
) -> Result<PathBuf, CheckpointError> {
    let name = checkpoint_dir_name(state.step, state.kind);
    let tmp = out_dir.join(format!(".{name}.tmp"));
    let dest = out_dir.join(&name);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;

    let payloads: [(&str, Vec<u8>); 5] = [
        (PAYLOAD_FILES[0], state.blobs.model.clone()),
        (PAYLOAD_FILES[1], state.blobs.optimizer.clone()),
        (PAYLOAD_FILES[2], json(&state.sampler)),
        (PAYLOAD_FILES[3], json(&state.cursors)),
        (PAYLOAD_FILES[4], json(&state.monitor)),
    ];
    let mut files = BTreeMap::new();
    for (file, bytes) in &payloads {
        write_file(&tmp.join(file), bytes, faults)?;
        files.insert(file.to_string(), to_hex(fnv1a64(bytes)));
    }
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        step: state.step,
        kind: state.kind,
        config_hash: to_hex(state.config_hash),
        data_manifest_hash: to_hex(state.data_manifest_hash),
        files,
    };
    write_file(&tmp.join(MANIFEST), &json(&manifest), faults)?;
    write_file(&tmp.join(COMPLETE_MARKER), &[], faults)?;
    sync_dir(&tmp)?;

    faults.tick()?;
    if dest.exists() {
        remove_checkpoint(&dest)?;
    }
    fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
    sync_dir(out_dir)?;
    faults.tick()?;
    Ok(dest)
}

fn inconsistent(path: &Path, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Inconsistent {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Verifies the marker and every hash; returns the manifest.
pub fn verify_checkpoint(dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    if !dir.join(COMPLETE_MARKER).is_file() {
        return Err(inconsistent(dir, "no COMPLETE marker"));
    }
    let text = fs::read(dir.join(MANIFEST)).map_err(|e| inconsistent(dir, e.to_string()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text).map_err(|e| inconsistent(dir, e.to_string()))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(inconsistent(dir, format!("schema_version {}", manifest.schema_version)));
    }
    let expected: Vec<&str> = PAYLOAD_FILES.to_vec();
    let listed: Vec<&str> = manifest.files.keys().map(String::as_str).collect();
    let mut sorted = expected.clone();
    sorted.sort_unstable();
    if listed != sorted {
        return Err(inconsistent(dir, "manifest lists the wrong files"));
    }
    for (file, hash) in &manifest.files {
        let bytes = fs::read(dir.join(file)).map_err(|e| inconsistent(dir, format!("{file}: {e}")))?;
        if to_hex(fnv1a64(&bytes)) != *hash {
            return Err(inconsistent(dir, format!("{file} hash mismatch")));
        }
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointState, CheckpointError> {
    let manifest = verify_checkpoint(dir)?;
    let read = |f: &str| fs::read(dir.join(f)).map_err(io_err(dir));
    let parse_hex = |s: &str| crate::hash::from_hex(s).ok_or_else(|| inconsistent(dir, format!("bad hash `{s}`")));
    let decode = |f: &str, e: serde_json::Error| inconsistent(dir, format!("{f}: {e}"));
    Ok(CheckpointState {
        step: manifest.step,
        kind: manifest.kind,
        config_hash: parse_hex(&manifest.config_hash)?,
        data_manifest_hash: parse_hex(&manifest.data_manifest_hash)?,
        blobs: TrainerBlobs {
            model: read("model.bin")?,
            optimizer: read("optimizer.bin")?,
        },
        sampler: serde_json::from_slice(&read("sampler.json")?).map_err(|e| decode("sampler.json", e))?,
        cursors: serde_json::from_slice(&read("cursor.json")?).map_err(|e| decode("cursor.json", e))?,
        monitor: serde_json::from_slice(&read("monitor.json")?).map_err(|e| decode("monitor.json", e))?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointEntry {
    pub step: u64,
    pub kind: CheckpointKind,
    pub path: PathBuf,
}

/// Checkpoint directories by descending step, periodic before emergency at
/// equal steps.
pub fn list_checkpoints(out_dir: &Path) -> Result<Vec<CheckpointEntry>, CheckpointError> {
    let mut entries = Vec::new();
    let rd = match fs::read_dir(out_dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(entries),
        Err(e) => return Err(io_err(out_dir)(e)),
    };
    for entry in rd {
        let entry = entry.map_err(io_err(out_dir))?;
        let name = entry.file_name();
        if let Some((step, kind)) = name.to_str().and_then(parse_dir_name) {
            entries.push(CheckpointEntry {
                step,
                kind,
                path: entry.path(),
            });
        }
    }
    entries.sort_by(|a, b| b.step.cmp(&a.step).then(a.kind.cmp(&b.kind)));
    Ok(entries)
}

/// Highest-step consistent checkpoint, if any.
pub fn latest_consistent(out_dir: &Path) -> Result<Option<CheckpointEntry>, CheckpointError> {
    for e in list_checkpoints(out_dir)? {
        match verify_checkpoint(&e.path) {
            Ok(_) => return Ok(Some(e)),
            Err(err) => log::warn!("skipping {}: {err}", e.path.display()),
        }
    }
    Ok(None)
}

/// Keeps the newest `keep_last` checkpoints plus periodic ones whose step is
/// a multiple of `keep_every`; removes the rest.
pub fn apply_retention(out_dir: &Path, keep_last: usize, keep_every: Option<u64>) -> Result<Vec<u64>, CheckpointError> {
    let mut removed = Vec::new();
    for (i, e) in list_checkpoints(out_dir)?.into_iter().enumerate() {
        let strided = e.kind == CheckpointKind::Periodic && keep_every.is_some_and(|k| k > 0 && e.step % k == 0);
        if i >= keep_last && !strided {
            remove_checkpoint(&e.path)?;
            removed.push(e.step);
        }
    }
    Ok(removed)
}

/// Deletes staging directories left by an interrupted write.
pub fn clean_staging(out_dir: &Path) -> Result<(), CheckpointError> {
    let Ok(rd) = fs::read_dir(out_dir) else {
        return Ok(());
    };
    for entry in rd.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with(".ckpt-") && name.ends_with(".tmp") {
            fs::remove_dir_all(entry.path()).map_err(io_err(&entry.path()))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::MonitorConfig;

    pub(crate) fn state(step: u64, kind: CheckpointKind) -> CheckpointState {
        CheckpointState {
            step,
            kind,
            config_hash: 1,
            data_manifest_hash: 2,
            blobs: TrainerBlobs {
                model: vec![1, 2, 3, step as u8],
                optimizer: vec![9; 17],
            },
            sampler: SamplerState::init(&[TaskType::PlanningQa], 0.0, 1.0, step).unwrap(),
            cursors: CursorFile {
                step,
                cursors: BTreeMap::new(),
                elapsed_ms: 0.0,
            },
            monitor: Monitor::new(MonitorConfig::default()),
        }
    }

    #[test]
    fn names() {
        assert_eq!(checkpoint_dir_name(10, CheckpointKind::Periodic), "ckpt-000000010");
        assert_eq!(
            parse_dir_name("ckpt-000000010-emergency"),
            Some((10, CheckpointKind::Emergency))
        );
        assert_eq!(parse_dir_name(".ckpt-000000010.tmp"), None);
        assert_eq!(parse_dir_name("ckpt-10"), None);
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let s = state(10, CheckpointKind::Periodic);
        let path = write_checkpoint(&s, dir.path(), &mut FaultInjector::counting()).unwrap();
        assert!(path.ends_with("ckpt-000000010"));
        assert_eq!(load_checkpoint(&path).unwrap(), s);
    }

    #[test]
    fn boundary_count_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = FaultInjector::counting();
        write_checkpoint(&state(1, CheckpointKind::Periodic), dir.path(), &mut f).unwrap();
        // three per file for five payloads, manifest and marker, plus two around the rename
        assert_eq!(f.ticks(), 3 * 7 + 2);
    }

    #[test]
    fn crash_at_every_boundary() {
        let mut total = FaultInjector::counting();
        let probe = tempfile::tempdir().unwrap();
        write_checkpoint(&state(1, CheckpointKind::Periodic), probe.path(), &mut total).unwrap();
        for b in 0..total.ticks() {
            let dir = tempfile::tempdir().unwrap();
            write_checkpoint(
                &state(10, CheckpointKind::Periodic),
                dir.path(),
                &mut FaultInjector::counting(),
            )
            .unwrap();
            let r = write_checkpoint(
                &state(20, CheckpointKind::Periodic),
                dir.path(),
                &mut FaultInjector::crash_at(b),
            );
            assert!(matches!(r, Err(CheckpointError::InjectedCrash(x)) if x == b));
            for e in list_checkpoints(dir.path()).unwrap() {
                if e.path.join(COMPLETE_MARKER).exists() {
                    verify_checkpoint(&e.path).unwrap();
                }
            }
            let latest = latest_consistent(dir.path()).unwrap().unwrap();
            let renamed = b + 1 == total.ticks();
            assert_eq!(latest.step, if renamed { 20 } else { 10 }, "boundary {b}");
        }
    }

    #[test]
    fn corrupted_checkpoint_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        for step in [10, 20, 30, 40, 50] {
            write_checkpoint(
                &state(step, CheckpointKind::Periodic),
                dir.path(),
                &mut FaultInjector::counting(),
            )
            .unwrap();
        }
        assert_eq!(latest_consistent(dir.path()).unwrap().unwrap().step, 50);
        let victim = dir.path().join("ckpt-000000050/sampler.json");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[5] ^= 1;
        fs::write(&victim, bytes).unwrap();
        assert_eq!(latest_consistent(dir.path()).unwrap().unwrap().step, 40);
    }

    #[test]
    fn periodic_wins_ties() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = FaultInjector::counting();
        write_checkpoint(&state(30, CheckpointKind::Emergency), dir.path(), &mut f).unwrap();
        write_checkpoint(&state(30, CheckpointKind::Periodic), dir.path(), &mut f).unwrap();
        let latest = latest_consistent(dir.path()).unwrap().unwrap();
        assert_eq!(latest.kind, CheckpointKind::Periodic);
    }

    #[test]
    fn retention_keeps_recent_and_strided() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = FaultInjector::counting();
        for step in (10..=100).step_by(10) {
            write_checkpoint(&state(step, CheckpointKind::Periodic), dir.path(), &mut f).unwrap();
        }
        apply_retention(dir.path(), 3, Some(40)).unwrap();
        let left: Vec<u64> = list_checkpoints(dir.path()).unwrap().iter().map(|e| e.step).collect();
        assert_eq!(left, vec![100, 90, 80, 40]);
    }

    #[test]
    fn empty_dir_has_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(latest_consistent(dir.path()).unwrap().is_none());
        assert!(latest_consistent(&dir.path().join("missing")).unwrap().is_none());
    }
}
