//! Sharded corpus storage with a streaming reader and a resumable cursor.
//!
//! A shard set is a directory holding `manifest.json` and contiguous files
//! `shard-00000`, `shard-00001`, .... Each shard is a sequence of records,
//! each a 4-byte little-endian length followed by that many bytes of UTF-8
//! JSON. The manifest records every shard's record count and its FNV-1a 64
//! content hash; readers verify the hash whenever they open a shard.
//!
//! Within an epoch records come back in writer order. A [`Cursor`] names the
//! next record to read and survives serialization, so a reader can resume at
//! any record without rereading earlier ones.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Seek, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{fnv1a64, fnv1a64_reader, from_hex, to_hex, Fnv1a64};

pub const SHARD_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

pub fn shard_file_name(index: usize) -> String {
    format!("shard-{index:05}")
}

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("IO_FAILURE on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("HASH_MISMATCH: {file} does not match the hash computed while writing")]
    HashMismatch { file: String },
    #[error("CORRUPT_SHARD: {file}: {reason}")]
    CorruptShard { file: String, reason: String },
    #[error("CURSOR_MANIFEST_MISMATCH: {0}")]
    CursorManifestMismatch(String),
    #[error("invalid shard manifest: {0}")]
    InvalidManifest(String),
    #[error("output directory {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("shard_size must be at least 1")]
    InvalidShardSize,
    #[error("record encoding failed: {0}")]
    Encode(#[source] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ShardError + '_ {
    move |source| ShardError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardEntry {
    pub file: String,
    pub record_count: u64,
    /// FNV-1a 64 of the raw shard bytes, 16 lowercase hex digits.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardManifest {
    pub schema_version: u32,
    pub creation_seed: u64,
    /// Always `none`; reserved for a future codec.
    pub compression: String,
    pub shards: Vec<ShardEntry>,
    pub total_records: u64,
}

impl ShardManifest {
    pub fn load(dir: &Path) -> Result<Self, ShardError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: ShardManifest =
            serde_json::from_str(&text).map_err(|e| ShardError::InvalidManifest(e.to_string()))?;
        manifest.check()?;
        Ok(manifest)
    }

    /// Structural invariants: contiguous names, nonempty shards, matching total.
    pub fn check(&self) -> Result<(), ShardError> {
        let bad = |m: String| Err(ShardError::InvalidManifest(m));
        if self.compression != "none" {
            return bad(format!("unsupported compression `{}`", self.compression));
        }
        let mut total = 0u64;
        for (i, s) in self.shards.iter().enumerate() {
            if s.file != shard_file_name(i) {
                return bad(format!("shard {i} is named `{}`", s.file));
            }
            if s.record_count == 0 {
                return bad(format!("shard {i} is empty"));
            }
            if from_hex(&s.content_hash).is_none() {
                return bad(format!("shard {i} has malformed hash `{}`", s.content_hash));
            }
            total += s.record_count;
        }
        if total != self.total_records {
            return bad(format!(
                "total_records {} but shards sum to {total}",
                self.total_records
            ));
        }
        Ok(())
    }

    /// Stable identity of the shard layout and contents.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a64::new();
        h.update(&self.schema_version.to_le_bytes());
        for s in &self.shards {
            h.update(s.file.as_bytes());
            h.update(&s.record_count.to_le_bytes());
            h.update(s.content_hash.as_bytes());
        }
        h.finish()
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, ShardError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(ShardError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn finish_shard(
    dir: &Path,
    index: usize,
    writer: BufWriter<File>,
    hasher: Fnv1a64,
    records: u64,
) -> Result<ShardEntry, ShardError> {
    let file = shard_file_name(index);
    let path = dir.join(&file);
    let f = writer.into_inner().map_err(|e| io_err(&path)(e.into_error()))?;
    f.sync_all().map_err(io_err(&path))?;
    drop(f);
    let on_disk = fnv1a64_reader(File::open(&path).map_err(io_err(&path))?).map_err(io_err(&path))?;
    if on_disk != hasher.finish() {
        return Err(ShardError::HashMismatch { file });
    }
    Ok(ShardEntry {
        file,
        record_count: records,
        content_hash: to_hex(on_disk),
    })
}

/// Streams records into shards of `shard_size`, holding one encoded record
/// and one output buffer at a time.
pub fn write_shards<T, I>(
    records: I,
    shard_size: usize,
    out_dir: &Path,
    creation_seed: u64,
) -> Result<ShardManifest, ShardError>
where
    T: Serialize,
    I: IntoIterator<Item = T>,
{
    if shard_size == 0 {
        return Err(ShardError::InvalidShardSize);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let _lock = DirLock::acquire(out_dir)?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    match fs::remove_file(&manifest_path) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(io_err(&manifest_path)(e)),
    }

    let mut shards = Vec::new();
    let mut current: Option<(BufWriter<File>, Fnv1a64, u64)> = None;
    let mut buf = Vec::new();
    for record in records {
        if current.is_none() {
            let path = out_dir.join(shard_file_name(shards.len()));
            let f = File::create(&path).map_err(io_err(&path))?;
            current = Some((BufWriter::with_capacity(64 * 1024, f), Fnv1a64::new(), 0));
        }
        let (writer, hasher, count) = current.as_mut().expect("open shard");
        buf.clear();
        serde_json::to_writer(&mut buf, &record).map_err(ShardError::Encode)?;
        let len = u32::try_from(buf.len())
            .map_err(|_| ShardError::Encode(serde::ser::Error::custom("record longer than 4 GiB")))?;
        let prefix = len.to_le_bytes();
        let path = out_dir.join(shard_file_name(shards.len()));
        writer.write_all(&prefix).map_err(io_err(&path))?;
        writer.write_all(&buf).map_err(io_err(&path))?;
        hasher.update(&prefix);
        hasher.update(&buf);
        *count += 1;
        if *count as usize == shard_size {
            let (w, h, c) = current.take().expect("open shard");
            shards.push(finish_shard(out_dir, shards.len(), w, h, c)?);
        }
    }
    if let Some((w, h, c)) = current.take() {
        shards.push(finish_shard(out_dir, shards.len(), w, h, c)?);
    }

    // drop shards left over from an earlier, longer write
    let mut stale = shards.len();
    loop {
        let path = out_dir.join(shard_file_name(stale));
        match fs::remove_file(&path) {
            Ok(()) => stale += 1,
            Err(e) if e.kind() == io::ErrorKind::NotFound => break,
            Err(e) => return Err(io_err(&path)(e)),
        }
    }

    let manifest = ShardManifest {
        schema_version: SHARD_SCHEMA_VERSION,
        creation_seed,
        compression: "none".into(),
        total_records: shards.iter().map(|s| s.record_count).sum(),
        shards,
    };
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(ShardError::Encode)?;
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, &manifest_path).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// Read position within a shard set.
///
/// `shard_index == shard_count` with `record_index == 0` is the
/// end-of-epoch sentinel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub shard_index: usize,
    pub record_index: u64,
    /// Sampler draws serviced from this stream; carried, not interpreted.
    pub draws_consumed: u64,
}

impl Cursor {
    pub fn at(shard_index: usize, record_index: u64) -> Self {
        Self {
            shard_index,
            record_index,
            ..Default::default()
        }
    }

    pub fn is_end_of_epoch(&self, manifest: &ShardManifest) -> bool {
        self.shard_index == manifest.shard_count() && self.record_index == 0
    }

    pub fn check(&self, manifest: &ShardManifest) -> Result<(), ShardError> {
        if self.is_end_of_epoch(manifest) {
            return Ok(());
        }
        match manifest.shards.get(self.shard_index) {
            None => Err(ShardError::CursorManifestMismatch(format!(
                "shard_index {} but manifest has {} shards",
                self.shard_index,
                manifest.shard_count()
            ))),
            Some(s) if self.record_index >= s.record_count => Err(ShardError::CursorManifestMismatch(format!(
                "record_index {} but {} holds {} records",
                self.record_index, s.file, s.record_count
            ))),
            Some(_) => Ok(()),
        }
    }

    fn advanced(self, manifest: &ShardManifest) -> Self {
        let count = manifest.shards[self.shard_index].record_count;
        if self.record_index + 1 < count {
            Self {
                record_index: self.record_index + 1,
                ..self
            }
        } else {
            Self {
                shard_index: self.shard_index + 1,
                record_index: 0,
                ..self
            }
        }
    }
}

/// A cursor fenced to the manifest it was taken against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SealedCursor {
    pub schema_version: u32,
    pub manifest_fingerprint: String,
    #[serde(flatten)]
    pub cursor: Cursor,
}

impl SealedCursor {
    pub fn seal(cursor: Cursor, manifest: &ShardManifest) -> Self {
        Self {
            schema_version: manifest.schema_version,
            manifest_fingerprint: to_hex(manifest.fingerprint()),
            cursor,
        }
    }

    pub fn unseal(&self, manifest: &ShardManifest) -> Result<Cursor, ShardError> {
        if self.schema_version != manifest.schema_version {
            return Err(ShardError::CursorManifestMismatch(format!(
                "cursor schema_version {} against manifest version {}",
                self.schema_version, manifest.schema_version
            )));
        }
        if self.manifest_fingerprint != to_hex(manifest.fingerprint()) {
            return Err(ShardError::CursorManifestMismatch(
                "cursor was taken against a different shard set".into(),
            ));
        }
        self.cursor.check(manifest)?;
        Ok(self.cursor)
    }
}

pub fn serialize_cursor(cursor: &Cursor, manifest: &ShardManifest) -> Vec<u8> {
    serde_json::to_vec(&SealedCursor::seal(*cursor, manifest)).expect("cursor serialization")
}

pub fn restore_cursor(bytes: &[u8], manifest: &ShardManifest) -> Result<Cursor, ShardError> {
    let sealed: SealedCursor = serde_json::from_slice(bytes)
        .map_err(|e| ShardError::CursorManifestMismatch(format!("unreadable cursor: {e}")))?;
    sealed.unseal(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Next<T> {
    Record(T, Cursor),
    /// Returned when reading at the sentinel; carries the first cursor of the next epoch.
    EndOfEpoch(Cursor),
}

struct OpenShard {
    index: usize,
    reader: BufReader<File>,
    next_record: u64,
}

/// Streaming reader. Memory is one open shard's buffer plus the largest record.
pub struct ShardReader<T> {
    dir: PathBuf,
    manifest: ShardManifest,
    open: Option<OpenShard>,
    buf: Vec<u8>,
    _record: PhantomData<fn() -> T>,
}

impl<T: DeserializeOwned> ShardReader<T> {
    pub fn open(dir: &Path) -> Result<Self, ShardError> {
        let manifest = ShardManifest::load(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            open: None,
            buf: Vec::new(),
            _record: PhantomData,
        })
    }

    pub fn manifest(&self) -> &ShardManifest {
        &self.manifest
    }

    fn corrupt(&self, index: usize, reason: impl Into<String>) -> ShardError {
        ShardError::CorruptShard {
            file: shard_file_name(index),
            reason: reason.into(),
        }
    }

    fn open_shard(&mut self, index: usize) -> Result<(), ShardError> {
        let entry = &self.manifest.shards[index];
        let path = self.dir.join(&entry.file);
        let mut file = File::open(&path).map_err(io_err(&path))?;
        let actual = fnv1a64_reader(&mut file).map_err(io_err(&path))?;
        if Some(actual) != from_hex(&entry.content_hash) {
            return Err(self.corrupt(index, "content hash mismatch"));
        }
        file.rewind().map_err(io_err(&path))?;
        self.open = Some(OpenShard {
            index,
            reader: BufReader::with_capacity(64 * 1024, file),
            next_record: 0,
        });
        Ok(())
    }

    fn read_len(&mut self, index: usize) -> Result<u32, ShardError> {
        let shard = self.open.as_mut().expect("open shard");
        let mut prefix = [0u8; 4];
        shard
            .reader
            .read_exact(&mut prefix)
            .map_err(|e| ShardError::CorruptShard {
                file: shard_file_name(index),
                reason: format!("truncated length prefix: {e}"),
            })?;
        Ok(u32::from_le_bytes(prefix))
    }

    fn position(&mut self, cursor: &Cursor) -> Result<(), ShardError> {
        let reusable =
            matches!(&self.open, Some(s) if s.index == cursor.shard_index && s.next_record <= cursor.record_index);
        if !reusable {
            self.open_shard(cursor.shard_index)?;
        }
        while self.open.as_ref().expect("open shard").next_record < cursor.record_index {
            let len = self.read_len(cursor.shard_index)?;
            let shard = self.open.as_mut().expect("open shard");
            shard
                .reader
                .seek_relative(i64::from(len))
                .map_err(|e| ShardError::CorruptShard {
                    file: shard_file_name(cursor.shard_index),
                    reason: e.to_string(),
                })?;
            shard.next_record += 1;
        }
        Ok(())
    }

    /// Reads the record under `cursor` and returns the advanced cursor.
    pub fn next(&mut self, cursor: &Cursor) -> Result<Next<T>, ShardError> {
        cursor.check(&self.manifest)?;
        if cursor.is_end_of_epoch(&self.manifest) {
            return Ok(Next::EndOfEpoch(Cursor {
                epoch: cursor.epoch + 1,
                shard_index: 0,
                record_index: 0,
                draws_consumed: cursor.draws_consumed,
            }));
        }
        self.position(cursor)?;
        let index = cursor.shard_index;
        let len = self.read_len(index)? as usize;
        self.buf.resize(len, 0);
        let shard = self.open.as_mut().expect("open shard");
        shard
            .reader
            .read_exact(&mut self.buf)
            .map_err(|e| ShardError::CorruptShard {
                file: shard_file_name(index),
                reason: format!("truncated record: {e}"),
            })?;
        shard.next_record += 1;
        let record = serde_json::from_slice(&self.buf)
            .map_err(|e| self.corrupt(index, format!("record {} does not decode: {e}", cursor.record_index)))?;
        Ok(Next::Record(record, cursor.advanced(&self.manifest)))
    }

    /// Iterates one epoch from `cursor` to the sentinel.
    pub fn epoch_from(&mut self, cursor: Cursor) -> EpochIter<'_, T> {
        EpochIter {
            reader: self,
            cursor: Some(cursor),
        }
    }
}

pub struct EpochIter<'a, T> {
    reader: &'a mut ShardReader<T>,
    cursor: Option<Cursor>,
}

impl<T: DeserializeOwned> Iterator for EpochIter<'_, T> {
    type Item = Result<(T, Cursor), ShardError>;

    fn next(&mut self) -> Option<Self::Item> {
        let cursor = self.cursor.take()?;
        match self.reader.next(&cursor) {
            Ok(Next::Record(record, next)) => {
                self.cursor = Some(next);
                Some(Ok((record, next)))
            }
            Ok(Next::EndOfEpoch(_)) => None,
            Err(e) => Some(Err(e)),
        }
    }
}

/// Identity of a shard set's manifest file bytes.
pub fn manifest_file_hash(dir: &Path) -> Result<u64, ShardError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(fnv1a64(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("rec-{i}")).collect()
    }

    fn read_all(dir: &Path) -> Vec<String> {
        let mut r = ShardReader::<String>::open(dir).unwrap();
        r.epoch_from(Cursor::default()).map(|x| x.unwrap().0).collect()
    }

    #[test]
    fn ten_records_in_shards_of_four() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_shards(ids(10), 4, dir.path(), 0).unwrap();
        let counts: Vec<u64> = m.shards.iter().map(|s| s.record_count).collect();
        assert_eq!(counts, vec![4, 4, 2]);
        assert_eq!(m.total_records, 10);
        assert_eq!(m.shards[2].file, "shard-00002");
        assert_eq!(read_all(dir.path()), ids(10));
        assert!(!dir.path().join(LOCK_FILE).exists());
    }

    #[test]
    fn empty_input_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_shards(Vec::<String>::new(), 4, dir.path(), 0).unwrap();
        assert!(m.shards.is_empty());
        assert_eq!(m.total_records, 0);
        let mut r = ShardReader::<String>::open(dir.path()).unwrap();
        assert_eq!(
            r.next(&Cursor::default()).unwrap(),
            Next::EndOfEpoch(Cursor {
                epoch: 1,
                ..Default::default()
            })
        );
    }

    #[test]
    fn next_walks_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        write_shards(ids(10), 4, dir.path(), 0).unwrap();
        let mut r = ShardReader::<String>::open(dir.path()).unwrap();

        assert_eq!(
            r.next(&Cursor::at(0, 0)).unwrap(),
            Next::Record("rec-0".into(), Cursor::at(0, 1))
        );
        assert_eq!(
            r.next(&Cursor::at(0, 3)).unwrap(),
            Next::Record("rec-3".into(), Cursor::at(1, 0))
        );
        let Next::Record(last, sentinel) = r.next(&Cursor::at(2, 1)).unwrap() else {
            panic!("expected a record");
        };
        assert_eq!(last, "rec-9");
        assert_eq!(sentinel, Cursor::at(3, 0));
        assert_eq!(
            r.next(&sentinel).unwrap(),
            Next::EndOfEpoch(Cursor {
                epoch: 1,
                ..Default::default()
            })
        );
    }

    #[test]
    fn cursor_fencing() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_shards(ids(10), 4, dir.path(), 0).unwrap();
        let c = Cursor {
            epoch: 2,
            shard_index: 1,
            record_index: 3,
            draws_consumed: 17,
        };
        assert_eq!(restore_cursor(&serialize_cursor(&c, &m), &m).unwrap(), c);

        let bad = Cursor::at(7, 0);
        assert!(matches!(
            restore_cursor(&serialize_cursor(&bad, &m), &m),
            Err(ShardError::CursorManifestMismatch(_))
        ));

        let mut v2 = m.clone();
        v2.schema_version = 2;
        assert!(matches!(
            restore_cursor(&serialize_cursor(&c, &m), &v2),
            Err(ShardError::CursorManifestMismatch(_))
        ));
    }

    #[test]
    fn corrupted_shard_is_detected_on_open() {
        let dir = tempfile::tempdir().unwrap();
        write_shards(ids(10), 4, dir.path(), 0).unwrap();
        let path = dir.path().join("shard-00001");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 2;
        bytes[last] ^= 0x20;
        fs::write(&path, bytes).unwrap();
        let mut r = ShardReader::<String>::open(dir.path()).unwrap();
        assert!(r.next(&Cursor::at(0, 0)).is_ok());
        assert!(matches!(
            r.next(&Cursor::at(1, 0)),
            Err(ShardError::CorruptShard { .. })
        ));
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let _held = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            write_shards(ids(3), 2, dir.path(), 0),
            Err(ShardError::Locked(_))
        ));
    }

    #[test]
    fn rewrite_removes_stale_shards() {
        let dir = tempfile::tempdir().unwrap();
        write_shards(ids(10), 2, dir.path(), 0).unwrap();
        write_shards(ids(3), 2, dir.path(), 0).unwrap();
        assert!(!dir.path().join("shard-00002").exists());
        assert_eq!(read_all(dir.path()), ids(3));
    }

    #[test]
    fn zero_shard_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_shards(ids(3), 0, dir.path(), 0),
            Err(ShardError::InvalidShardSize)
        ));
    }
}
