//! Persistent time-series store partitioned by (pseudonym, sensor, UTC day).
//!
//! ```text
//! <root>/MANIFEST                               last checkpointed batch seq
//! <root>/wal.log                                write-ahead log of whole batches
//! <root>/<pseudonym>/chunks.idx                 dedupe tags written with batches
//! <root>/<pseudonym>/<sensor_id>/<day>.log      append log, one frame per batch
//! <root>/<pseudonym>/<sensor_id>/<day>.seg      compacted sorted blocks + index
//! ```
//!
//! A batch is acknowledged once its WAL frame is written (and synced when
//! `StoreOptions::sync` is set). It is then appended to each partition log it
//! touches. On open, WAL frames newer than a partition's last applied seq are
//! replayed, which makes every acknowledged batch visible exactly once.

mod format;
#[cfg(feature = "fault-injection")]
pub mod harness;
mod verify;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::logpack::record::{self, record_span, RecordDecoder};
use crate::logpack::{ChunkId, LogpackError, SensorReading};
use crate::study::{Pseudonym, SensorCatalog, SensorId};
use crate::{TsMs, MS_PER_DAY, MS_PER_HOUR};

use format::{RunHeader, SegFooter, SegWriter, FRAME_OVERHEAD, RUN_HEADER_LEN};

pub use verify::{verify_dir, VerifyReport};

const WAL_FILE: &str = "wal.log";
const MANIFEST_FILE: &str = "MANIFEST";
const TAGS_FILE: &str = "chunks.idx";
/// 9999-12-31T23:59:59.999Z
const MAX_TS: TsMs = 253_402_300_799_999;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage quota exceeded: {used} of {quota} bytes in use")]
    StorageFull { used: u64, quota: u64 },
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("store data is corrupt: {0}")]
    Corrupt(String),
    #[error("invalid reading: {0}")]
    InvalidReading(#[from] LogpackError),
    #[error("chunk {0} is already stored")]
    DuplicateTag(ChunkId),
    #[error("store crashed at an injected fault point; reopen it")]
    Crashed,
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// fsync the WAL before acknowledging a batch.
    pub sync: bool,
    /// Reject writes that would grow the store past this many bytes.
    pub quota_bytes: Option<u64>,
    /// Checkpoint once the WAL grows past this size.
    pub wal_checkpoint_bytes: u64,
    /// A partition log is compacted once it is at least this large and at
    /// least as large as the partition's segment.
    pub compact_min_bytes: u64,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            sync: true,
            quota_bytes: None,
            wal_checkpoint_bytes: 64 << 20,
            compact_min_bytes: 4 << 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartitionKey {
    pub pseudonym: Pseudonym,
    pub sensor_id: SensorId,
    pub day: NaiveDate,
}

/// Readings written per partition by one batch.
pub type BatchCounts = BTreeMap<PartitionKey, u64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PartitionInfo {
    pub sensor_id: SensorId,
    pub day: NaiveDate,
    pub count: u64,
    pub hour_mask: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EraseReport {
    pub readings: u64,
    pub partitions: u64,
    pub chunk_tags: u64,
}

/// Places where a fault-injection harness can kill the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    BeforeWal,
    /// Half of the WAL frame reaches the file.
    TornWal,
    /// WAL frame durable, batch not yet acknowledged.
    AfterWal,
    /// Half of a partition-log frame reaches the file.
    TornPartitionWrite,
    /// After the first partition of a multi-partition batch is applied.
    MidApply,
    BeforeManifest,
    AfterManifest,
    CompactionBeforeRename,
    CompactionAfterRename,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 9] = [
        CrashPoint::BeforeWal,
        CrashPoint::TornWal,
        CrashPoint::AfterWal,
        CrashPoint::TornPartitionWrite,
        CrashPoint::MidApply,
        CrashPoint::BeforeManifest,
        CrashPoint::AfterManifest,
        CrashPoint::CompactionBeforeRename,
        CrashPoint::CompactionAfterRename,
    ];
}

pub fn day_of(ts: TsMs) -> NaiveDate {
    chrono::DateTime::from_timestamp_millis(ts.div_euclid(MS_PER_DAY) * MS_PER_DAY)
        .expect("timestamp in range")
        .date_naive()
}

pub fn day_start(day: NaiveDate) -> TsMs {
    day.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp_millis()
}

fn hour_bit(ts: TsMs) -> u32 {
    1 << (ts.rem_euclid(MS_PER_DAY) / MS_PER_HOUR)
}

#[derive(Debug, Clone)]
struct LogFrame {
    /// Offset of the frame body in the log file.
    body_offset: u64,
    body_len: u64,
    run: RunHeader,
}

#[derive(Debug, Default)]
struct Partition {
    seg: Option<SegFooter>,
    seg_len: u64,
    frames: Vec<LogFrame>,
    log_len: u64,
    max_seq: u64,
}

impl Partition {
    fn count(&self) -> u64 {
        self.seg.as_ref().map_or(0, |s| s.count) + self.frames.iter().map(|f| f.run.count as u64).sum::<u64>()
    }

    fn hour_mask(&self) -> u32 {
        self.frames
            .iter()
            .fold(self.seg.as_ref().map_or(0, |s| s.hour_mask), |m, f| m | f.run.hour_mask)
    }
}

#[derive(Debug, Default)]
struct Participant {
    partitions: BTreeMap<(SensorId, NaiveDate), Partition>,
    tags: HashMap<ChunkId, u32>,
    tags_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    applied_seq: u64,
}

struct Inner {
    root: PathBuf,
    opts: StoreOptions,
    catalog: &'static SensorCatalog,
    wal: File,
    wal_len: u64,
    applied_seq: u64,
    next_seq: u64,
    participants: BTreeMap<Pseudonym, Participant>,
    dirty: BTreeSet<PathBuf>,
    used_bytes: u64,
    poisoned: bool,
    armed: Option<(CrashPoint, u32)>,
}

/// Handle to an open store. Cheap to share behind an `Arc`; writers are
/// serialized, readers run concurrently and see only committed batches.
pub struct Store {
    inner: RwLock<Inner>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.inner.read().root).finish()
    }
}

fn pseudonym_dir(root: &Path, p: Pseudonym) -> PathBuf {
    root.join(p.to_hex())
}

fn partition_base(root: &Path, p: Pseudonym, sensor: SensorId, day: NaiveDate) -> PathBuf {
    pseudonym_dir(root, p)
        .join(sensor.0.to_string())
        .join(day.format("%Y-%m-%d").to_string())
}

fn append(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(bytes)
}

fn write_atomically(path: &Path, bytes: &[u8], sync: bool) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(bytes)?;
    if sync {
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn read_range(path: &Path, offset: u64, len: u64) -> io::Result<Vec<u8>> {
    let mut f = File::open(path)?;
    f.seek(SeekFrom::Start(offset))?;
    let mut buf = vec![0u8; len as usize];
    f.read_exact(&mut buf)?;
    Ok(buf)
}

fn decode_record(bytes: &[u8], catalog: &SensorCatalog) -> Result<SensorReading, StoreError> {
    match RecordDecoder::new(bytes, catalog).next() {
        Some(Ok(r)) => Ok(r),
        Some(Err(e)) => Err(StoreError::Corrupt(e.to_string())),
        None => Err(StoreError::Corrupt("empty record".into())),
    }
}

/// Splits concatenated records into per-partition runs, preserving order.
fn group_records(
    records: &[u8],
    catalog: &SensorCatalog,
) -> Result<BTreeMap<(SensorId, NaiveDate), Vec<(TsMs, Range<usize>)>>, LogpackError> {
    let mut groups: BTreeMap<_, Vec<_>> = BTreeMap::new();
    let mut pos = 0;
    while pos < records.len() {
        let (sensor, ts, end) = record_span(records, pos, catalog)?;
        groups.entry((sensor, day_of(ts))).or_default().push((ts, pos..end));
        pos = end;
    }
    Ok(groups)
}

fn encode_wal_body(p: Pseudonym, tag: Option<ChunkId>, records: &[u8]) -> Vec<u8> {
    let mut body = Vec::with_capacity(33 + records.len());
    body.extend_from_slice(p.as_bytes());
    match tag {
        Some(t) => {
            body.push(1);
            body.extend_from_slice(t.as_bytes());
        }
        None => body.push(0),
    }
    body.extend_from_slice(records);
    body
}

fn decode_wal_body(body: &[u8]) -> Option<(Pseudonym, Option<ChunkId>, &[u8])> {
    let p = Pseudonym(body.get(..16)?.try_into().ok()?);
    match *body.get(16)? {
        0 => Some((p, None, &body[17..])),
        1 => Some((p, Some(ChunkId(body.get(17..33)?.try_into().ok()?)), &body[33..])),
        _ => None,
    }
}

impl Inner {
    fn crash(&mut self) -> StoreError {
        self.poisoned = true;
        StoreError::Crashed
    }

    fn hit(&mut self, point: CrashPoint) -> bool {
        match &mut self.armed {
            Some((p, n)) if *p == point => {
                if *n == 0 {
                    self.armed = None;
                    true
                } else {
                    *n -= 1;
                    false
                }
            }
            _ => false,
        }
    }

    fn check_live(&self) -> Result<(), StoreError> {
        if self.poisoned {
            Err(StoreError::Crashed)
        } else {
            Ok(())
        }
    }

    fn write(
        &mut self,
        p: Pseudonym,
        readings: &[SensorReading],
        tag: Option<ChunkId>,
    ) -> Result<BatchCounts, StoreError> {
        self.check_live()?;
        if let Some(t) = tag {
            if self.participants.get(&p).is_some_and(|s| s.tags.contains_key(&t)) {
                return Err(StoreError::DuplicateTag(t));
            }
        }
        if readings.is_empty() && tag.is_none() {
            return Ok(BatchCounts::new());
        }
        let mut records = Vec::with_capacity(readings.iter().map(|r| r.encoded_len()).sum());
        for r in readings {
            r.validate(self.catalog)?;
            record::encode(r, &mut records);
        }
        let body = encode_wal_body(p, tag, &records);
        if let Some(quota) = self.opts.quota_bytes {
            let partitions = readings.len().min(64) as u64;
            let estimate = 2 * body.len() as u64 + partitions * (FRAME_OVERHEAD + RUN_HEADER_LEN) as u64;
            if self.used_bytes + estimate > quota {
                return Err(StoreError::StorageFull {
                    used: self.used_bytes,
                    quota,
                });
            }
        }

        let seq = self.next_seq;
        let mut frame = Vec::with_capacity(body.len() + FRAME_OVERHEAD);
        format::put_frame(&mut frame, seq, &body);
        if self.hit(CrashPoint::BeforeWal) {
            return Err(self.crash());
        }
        if self.hit(CrashPoint::TornWal) {
            self.wal.write_all(&frame[..frame.len() / 2])?;
            return Err(self.crash());
        }
        self.wal.write_all(&frame)?;
        if self.opts.sync {
            self.wal.sync_data()?;
        }
        self.wal_len += frame.len() as u64;
        self.used_bytes += frame.len() as u64;
        self.next_seq += 1;
        if self.hit(CrashPoint::AfterWal) {
            return Err(self.crash());
        }

        let counts = self.apply(seq, p, tag, &records)?;
        if self.wal_len >= self.opts.wal_checkpoint_bytes {
            self.checkpoint()?;
        }
        let touched: Vec<_> = counts.keys().map(|k| (k.sensor_id, k.day)).collect();
        for (sensor, day) in touched {
            let part = &self.participants[&p].partitions[&(sensor, day)];
            if part.log_len >= self.opts.compact_min_bytes.max(part.seg_len) {
                self.compact(p, sensor, day)?;
            }
        }
        Ok(counts)
    }

    /// Appends a logged batch to its partitions. Partitions that already hold
    /// `seq` are skipped, so replaying the WAL is idempotent.
    fn apply(
        &mut self,
        seq: u64,
        p: Pseudonym,
        tag: Option<ChunkId>,
        records: &[u8],
    ) -> Result<BatchCounts, StoreError> {
        let groups = group_records(records, self.catalog).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        let mut counts = BatchCounts::new();
        let mut applied = 0;
        let mut total = 0u32;
        for ((sensor, day), spans) in groups {
            total += spans.len() as u32;
            let base = partition_base(&self.root, p, sensor, day);
            let part = self
                .participants
                .entry(p)
                .or_default()
                .partitions
                .entry((sensor, day))
                .or_default();
            if part.max_seq >= seq {
                continue;
            }
            let run = RunHeader {
                count: spans.len() as u32,
                min_ts: spans.iter().map(|s| s.0).min().unwrap(),
                max_ts: spans.iter().map(|s| s.0).max().unwrap(),
                hour_mask: spans.iter().fold(0, |m, s| m | hour_bit(s.0)),
            };
            let mut body = Vec::with_capacity(RUN_HEADER_LEN + spans.iter().map(|s| s.1.len()).sum::<usize>());
            run.put(&mut body);
            for (_, range) in &spans {
                body.extend_from_slice(&records[range.clone()]);
            }
            let mut frame = Vec::with_capacity(body.len() + FRAME_OVERHEAD);
            format::put_frame(&mut frame, seq, &body);

            let log_path = base.with_extension("log");
            fs::create_dir_all(log_path.parent().unwrap())?;
            let torn = self.hit(CrashPoint::TornPartitionWrite);
            let part = self.participants.get_mut(&p).unwrap().partitions.get_mut(&(sensor, day)).unwrap();
            if torn {
                append(&log_path, &frame[..frame.len() / 2])?;
                return Err(self.crash());
            }
            append(&log_path, &frame)?;
            part.frames.push(LogFrame {
                body_offset: part.log_len + FRAME_OVERHEAD as u64,
                body_len: body.len() as u64,
                run,
            });
            part.log_len += frame.len() as u64;
            part.max_seq = seq;
            self.used_bytes += frame.len() as u64;
            self.dirty.insert(log_path);
            counts.insert(
                PartitionKey {
                    pseudonym: p,
                    sensor_id: sensor,
                    day,
                },
                run.count as u64,
            );
            applied += 1;
            if applied == 1 && self.hit(CrashPoint::MidApply) {
                return Err(self.crash());
            }
        }

        if let Some(t) = tag {
            let state = self.participants.entry(p).or_default();
            if !state.tags.contains_key(&t) {
                let mut body = Vec::with_capacity(20);
                body.extend_from_slice(t.as_bytes());
                body.extend_from_slice(&total.to_le_bytes());
                let mut frame = Vec::new();
                format::put_frame(&mut frame, seq, &body);
                let dir = pseudonym_dir(&self.root, p);
                fs::create_dir_all(&dir)?;
                let path = dir.join(TAGS_FILE);
                append(&path, &frame)?;
                state.tags.insert(t, total);
                state.tags_len += frame.len() as u64;
                self.used_bytes += frame.len() as u64;
                self.dirty.insert(path);
            }
        }
        Ok(counts)
    }

    fn checkpoint(&mut self) -> Result<(), StoreError> {
        self.check_live()?;
        if self.opts.sync {
            for path in &self.dirty {
                if let Ok(f) = File::open(path) {
                    f.sync_all()?;
                }
            }
        }
        if self.hit(CrashPoint::BeforeManifest) {
            return Err(self.crash());
        }
        let applied = self.next_seq - 1;
        let manifest = Manifest {
            format: 1,
            applied_seq: applied,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        write_atomically(&self.root.join(MANIFEST_FILE), &json, self.opts.sync)?;
        if self.hit(CrashPoint::AfterManifest) {
            return Err(self.crash());
        }
        self.wal.set_len(0)?;
        self.used_bytes -= self.wal_len;
        self.wal_len = 0;
        self.applied_seq = applied;
        self.dirty.clear();
        Ok(())
    }

    /// Rewrites a partition's segment and log into a new sorted segment.
    fn compact(&mut self, p: Pseudonym, sensor: SensorId, day: NaiveDate) -> Result<(), StoreError> {
        let base = partition_base(&self.root, p, sensor, day);
        let seg_path = base.with_extension("seg");
        let log_path = base.with_extension("log");
        let part = &self.participants[&p].partitions[&(sensor, day)];
        if part.frames.is_empty() {
            return Ok(());
        }

        let seg_bytes = if part.seg.is_some() { fs::read(&seg_path)? } else { Vec::new() };
        let log_bytes = fs::read(&log_path)?;
        // (ts, source, byte range); seg records first so ties keep arrival order
        let mut spans: Vec<(TsMs, bool, Range<usize>)> = Vec::with_capacity(part.count() as usize);
        if let Some(seg) = &part.seg {
            for b in &seg.blocks {
                let recs = format::block_records(&seg_bytes, b).map_err(StoreError::Corrupt)?;
                let start = b.offset as usize + 8;
                let mut pos = 0;
                while pos < recs.len() {
                    let (_, ts, end) = record_span(recs, pos, self.catalog).map_err(|e| StoreError::Corrupt(e.to_string()))?;
                    spans.push((ts, false, start + pos..start + end));
                    pos = end;
                }
            }
        }
        for f in &part.frames {
            let start = (f.body_offset as usize) + RUN_HEADER_LEN;
            let end = (f.body_offset + f.body_len) as usize;
            let recs = log_bytes
                .get(start..end)
                .ok_or_else(|| StoreError::Corrupt(format!("{} shorter than its index", log_path.display())))?;
            let mut pos = 0;
            while pos < recs.len() {
                let (_, ts, e) = record_span(recs, pos, self.catalog).map_err(|e| StoreError::Corrupt(e.to_string()))?;
                spans.push((ts, true, start + pos..start + e));
                pos = e;
            }
        }
        spans.sort_by_key(|s| s.0);

        let mut w = SegWriter::new(part.max_seq);
        for (ts, from_log, range) in &spans {
            let src = if *from_log { &log_bytes } else { &seg_bytes };
            w.push(*ts, hour_bit(*ts), &src[range.clone()]);
        }
        let (file, footer) = w.finish();
        let tmp = seg_path.with_extension("tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(&file)?;
        if self.opts.sync {
            f.sync_all()?;
        }
        if self.hit(CrashPoint::CompactionBeforeRename) {
            return Err(self.crash());
        }
        fs::rename(&tmp, &seg_path)?;
        if self.hit(CrashPoint::CompactionAfterRename) {
            return Err(self.crash());
        }
        fs::remove_file(&log_path)?;
        self.dirty.remove(&log_path);

        let part = self.participants.get_mut(&p).unwrap().partitions.get_mut(&(sensor, day)).unwrap();
        self.used_bytes = self.used_bytes + file.len() as u64 - part.seg_len - part.log_len;
        part.seg = Some(footer);
        part.seg_len = file.len() as u64;
        part.frames.clear();
        part.log_len = 0;
        Ok(())
    }

    fn scan(
        &self,
        p: Pseudonym,
        sensor: SensorId,
        t0: TsMs,
        t1: TsMs,
        f: &mut dyn FnMut(SensorReading),
    ) -> Result<u64, StoreError> {
        // keep day arithmetic inside chrono's range
        let (t0, t1) = (t0.max(0), t1.min(MAX_TS));
        if t0 >= t1 {
            return Ok(0);
        }
        let Some(state) = self.participants.get(&p) else { return Ok(0) };
        let mut n = 0u64;
        let first_day = day_of(t0);
        let last_day = day_of(t1 - 1);
        for (&(_, day), part) in state.partitions.range((sensor, first_day)..=(sensor, last_day)) {
            let base = partition_base(&self.root, p, sensor, day);

            let mut log_recs: Vec<(TsMs, Vec<u8>)> = Vec::new();
            for fr in part.frames.iter().filter(|fr| fr.run.max_ts >= t0 && fr.run.min_ts < t1) {
                let body = read_range(&base.with_extension("log"), fr.body_offset, fr.body_len)?;
                let recs = &body[RUN_HEADER_LEN..];
                let mut pos = 0;
                while pos < recs.len() {
                    let (_, ts, end) = record_span(recs, pos, self.catalog).map_err(|e| StoreError::Corrupt(e.to_string()))?;
                    if ts >= t0 && ts < t1 {
                        log_recs.push((ts, recs[pos..end].to_vec()));
                    }
                    pos = end;
                }
            }
            log_recs.sort_by_key(|r| r.0);
            let mut log_iter = log_recs.into_iter().peekable();

            if let Some(seg) = &part.seg {
                let lo = seg.blocks.partition_point(|b| b.last_ts < t0);
                let hi = lo + seg.blocks[lo..].partition_point(|b| b.first_ts < t1);
                if lo < hi {
                    let start = seg.blocks[lo].offset;
                    let end = seg.blocks[hi - 1].offset + 8 + seg.blocks[hi - 1].len as u64;
                    let region = read_range(&base.with_extension("seg"), start, end - start)?;
                    for b in &seg.blocks[lo..hi] {
                        let rel = format::BlockMeta {
                            offset: b.offset - start,
                            ..*b
                        };
                        let recs = format::block_records(&region, &rel).map_err(StoreError::Corrupt)?;
                        let mut pos = 0;
                        while pos < recs.len() {
                            let (_, ts, end) =
                                record_span(recs, pos, self.catalog).map_err(|e| StoreError::Corrupt(e.to_string()))?;
                            if ts >= t0 && ts < t1 {
                                while log_iter.peek().is_some_and(|(lts, _)| *lts < ts) {
                                    let (_, bytes) = log_iter.next().unwrap();
                                    f(decode_record(&bytes, self.catalog)?);
                                    n += 1;
                                }
                                f(decode_record(&recs[pos..end], self.catalog)?);
                                n += 1;
                            }
                            pos = end;
                        }
                    }
                }
            }
            for (_, bytes) in log_iter {
                f(decode_record(&bytes, self.catalog)?);
                n += 1;
            }
        }
        Ok(n)
    }
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(root, StoreOptions::default())
    }

    pub fn open_with(root: impl AsRef<Path>, opts: StoreOptions) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let catalog = SensorCatalog::standard();

        let applied_seq = match fs::read(root.join(MANIFEST_FILE)) {
            Ok(bytes) => {
                let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt(format!("MANIFEST: {e}")))?;
                m.applied_seq
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };

        let mut used_bytes = 0u64;
        let mut max_seq = applied_seq;
        let mut participants = BTreeMap::new();
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(p) = name.to_str().and_then(|s| s.parse::<Pseudonym>().ok()) else { continue };
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let (state, bytes, seq) = load_participant(&entry.path())?;
            used_bytes += bytes;
            max_seq = max_seq.max(seq);
            participants.insert(p, state);
        }

        let wal_path = root.join(WAL_FILE);
        let wal_bytes = match fs::read(&wal_path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let (frames, valid) = format::scan_frames(&wal_bytes);
        let wal = OpenOptions::new().create(true).append(true).open(&wal_path)?;
        if valid < wal_bytes.len() {
            tracing::warn!(dropped = wal_bytes.len() - valid, "truncating torn WAL tail");
            wal.set_len(valid as u64)?;
        }
        used_bytes += valid as u64;

        let mut inner = Inner {
            root,
            opts,
            catalog,
            wal,
            wal_len: valid as u64,
            applied_seq,
            next_seq: 0,
            participants,
            dirty: BTreeSet::new(),
            used_bytes,
            poisoned: false,
            armed: None,
        };
        let mut replayed = 0;
        for fr in &frames {
            max_seq = max_seq.max(fr.seq);
            if fr.seq <= applied_seq {
                continue;
            }
            let (p, tag, records) = decode_wal_body(&wal_bytes[fr.body.clone()])
                .ok_or_else(|| StoreError::Corrupt(format!("WAL frame {} is malformed", fr.seq)))?;
            inner.apply(fr.seq, p, tag, records)?;
            replayed += 1;
        }
        inner.next_seq = max_seq + 1;
        if replayed > 0 {
            tracing::info!(replayed, "replayed WAL batches");
        }
        Ok(Self {
            inner: RwLock::new(inner),
        })
    }

    pub fn root(&self) -> PathBuf {
        self.inner.read().root.clone()
    }

    /// Writes a batch atomically; readings may span partitions and arrive in
    /// any order.
    pub fn write_batch(&self, p: Pseudonym, readings: &[SensorReading]) -> Result<BatchCounts, StoreError> {
        self.inner.write().write(p, readings, None)
    }

    /// Like `write_batch`, and records `tag` in the same atomic step. A tag
    /// already present is rejected with `DuplicateTag` and nothing is written.
    pub fn write_batch_tagged(
        &self,
        p: Pseudonym,
        readings: &[SensorReading],
        tag: ChunkId,
    ) -> Result<BatchCounts, StoreError> {
        self.inner.write().write(p, readings, Some(tag))
    }

    pub fn has_tag(&self, p: Pseudonym, tag: ChunkId) -> bool {
        self.inner.read().participants.get(&p).is_some_and(|s| s.tags.contains_key(&tag))
    }

    pub fn tags(&self, p: Pseudonym) -> Vec<ChunkId> {
        let inner = self.inner.read();
        let mut tags: Vec<_> = inner.participants.get(&p).map(|s| s.tags.keys().copied().collect()).unwrap_or_default();
        tags.sort();
        tags
    }

    /// Visits readings with `ts_ms` in `[t0, t1)` in timestamp order; ties
    /// come out in arrival order. Returns how many were visited.
    pub fn scan_range(
        &self,
        p: Pseudonym,
        sensor: SensorId,
        t0: TsMs,
        t1: TsMs,
        mut f: impl FnMut(SensorReading),
    ) -> Result<u64, StoreError> {
        self.inner.read().scan(p, sensor, t0, t1, &mut f)
    }

    pub fn query_range(&self, p: Pseudonym, sensor: SensorId, t0: TsMs, t1: TsMs) -> Result<Vec<SensorReading>, StoreError> {
        let mut out = Vec::new();
        self.scan_range(p, sensor, t0, t1, |r| out.push(r))?;
        Ok(out)
    }

    /// Distinct wall-clock hours of the UTC day holding at least one reading.
    pub fn coverage_hours(&self, p: Pseudonym, sensor: SensorId, day: NaiveDate) -> u32 {
        self.inner
            .read()
            .participants
            .get(&p)
            .and_then(|s| s.partitions.get(&(sensor, day)))
            .map_or(0, |part| part.hour_mask().count_ones())
    }

    pub fn pseudonyms(&self) -> Vec<Pseudonym> {
        self.inner.read().participants.keys().copied().collect()
    }

    pub fn partitions(&self, p: Pseudonym) -> Vec<PartitionInfo> {
        let inner = self.inner.read();
        let Some(state) = inner.participants.get(&p) else { return Vec::new() };
        state
            .partitions
            .iter()
            .filter(|(_, part)| part.count() > 0)
            .map(|(&(sensor_id, day), part)| PartitionInfo {
                sensor_id,
                day,
                count: part.count(),
                hour_mask: part.hour_mask(),
            })
            .collect()
    }

    pub fn reading_count(&self, p: Pseudonym) -> u64 {
        let inner = self.inner.read();
        inner
            .participants
            .get(&p)
            .map_or(0, |s| s.partitions.values().map(Partition::count).sum())
    }

    pub fn total_readings(&self) -> u64 {
        let inner = self.inner.read();
        inner
            .participants
            .values()
            .flat_map(|s| s.partitions.values())
            .map(Partition::count)
            .sum()
    }

    pub fn used_bytes(&self) -> u64 {
        self.inner.read().used_bytes
    }

    /// Syncs partition files, records the applied seq and truncates the WAL.
    pub fn checkpoint(&self) -> Result<(), StoreError> {
        self.inner.write().checkpoint()
    }

    /// Compacts every partition that has uncompacted log frames.
    pub fn compact_all(&self) -> Result<usize, StoreError> {
        let mut inner = self.inner.write();
        inner.check_live()?;
        let todo: Vec<_> = inner
            .participants
            .iter()
            .flat_map(|(p, s)| {
                s.partitions
                    .iter()
                    .filter(|(_, part)| !part.frames.is_empty())
                    .map(move |(&(sensor, day), _)| (*p, sensor, day))
            })
            .collect();
        for &(p, sensor, day) in &todo {
            inner.compact(p, sensor, day)?;
        }
        Ok(todo.len())
    }

    /// Removes every reading and dedupe tag of a pseudonym. Returns `None`
    /// when the store holds nothing for it.
    pub fn erase(&self, p: Pseudonym) -> Result<Option<EraseReport>, StoreError> {
        let mut inner = self.inner.write();
        inner.check_live()?;
        let dir = pseudonym_dir(&inner.root, p);
        let Some(state) = inner.participants.get(&p) else {
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            return Ok(None);
        };
        let report = EraseReport {
            readings: state.partitions.values().map(Partition::count).sum(),
            partitions: state.partitions.values().filter(|p| p.count() > 0).count() as u64,
            chunk_tags: state.tags.len() as u64,
        };
        let bytes: u64 = state.tags_len + state.partitions.values().map(|p| p.seg_len + p.log_len).sum::<u64>();
        // the WAL still holds this pseudonym's batches until a checkpoint drops them
        inner.checkpoint()?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        inner.participants.remove(&p);
        inner.dirty.retain(|path| !path.starts_with(&dir));
        inner.used_bytes -= bytes.min(inner.used_bytes);
        Ok(Some(report))
    }

    /// Arms a crash at the `skip + 1`-th time `point` is reached.
    #[cfg(feature = "fault-injection")]
    pub fn arm_crash(&self, point: CrashPoint, skip: u32) {
        self.inner.write().armed = Some((point, skip));
    }

    #[cfg(feature = "fault-injection")]
    pub fn disarm(&self) {
        self.inner.write().armed = None;
    }
}

fn load_participant(dir: &Path) -> Result<(Participant, u64, u64), StoreError> {
    let mut state = Participant::default();
    let mut bytes = 0u64;
    let mut max_seq = 0u64;

    let tags_path = dir.join(TAGS_FILE);
    if let Ok(buf) = fs::read(&tags_path) {
        let (frames, valid) = format::scan_frames(&buf);
        if valid < buf.len() {
            OpenOptions::new().write(true).open(&tags_path)?.set_len(valid as u64)?;
        }
        for fr in frames {
            let body = &buf[fr.body];
            if body.len() != 20 {
                return Err(StoreError::Corrupt(format!("{}: bad tag record", tags_path.display())));
            }
            let id = ChunkId(body[..16].try_into().unwrap());
            state.tags.insert(id, u32::from_le_bytes(body[16..20].try_into().unwrap()));
            max_seq = max_seq.max(fr.seq);
        }
        state.tags_len = valid as u64;
        bytes += valid as u64;
    }

    for sensor_entry in fs::read_dir(dir)? {
        let sensor_entry = sensor_entry?;
        if !sensor_entry.file_type()?.is_dir() {
            continue;
        }
        let Some(sensor) = sensor_entry.file_name().to_str().and_then(|s| s.parse::<u16>().ok()).map(SensorId) else {
            continue;
        };
        let mut days = BTreeSet::new();
        for f in fs::read_dir(sensor_entry.path())? {
            let path = f?.path();
            match path.extension().and_then(|e| e.to_str()) {
                Some("tmp") => fs::remove_file(&path)?,
                Some("log") | Some("seg") => {
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    if let Ok(day) = NaiveDate::parse_from_str(stem, "%Y-%m-%d") {
                        days.insert(day);
                    }
                }
                _ => {}
            }
        }
        for day in days {
            let base = sensor_entry.path().join(day.format("%Y-%m-%d").to_string());
            let mut part = Partition::default();
            let seg_path = base.with_extension("seg");
            if seg_path.exists() {
                let file = fs::read(&seg_path)?;
                let footer = format::parse_seg_footer(&file)
                    .map_err(|e| StoreError::Corrupt(format!("{}: {e}", seg_path.display())))?;
                part.max_seq = footer.compacted_seq;
                part.seg_len = file.len() as u64;
                part.seg = Some(footer);
            }
            let log_path = base.with_extension("log");
            if log_path.exists() {
                let buf = fs::read(&log_path)?;
                let (frames, valid) = format::scan_frames(&buf);
                if valid < buf.len() {
                    tracing::warn!(path = %log_path.display(), "truncating torn partition log tail");
                    OpenOptions::new().write(true).open(&log_path)?.set_len(valid as u64)?;
                }
                let compacted = part.seg.as_ref().map_or(0, |s| s.compacted_seq);
                for fr in frames {
                    if fr.seq <= compacted {
                        continue;
                    }
                    let run = RunHeader::parse(&buf[fr.body.clone()])
                        .ok_or_else(|| StoreError::Corrupt(format!("{}: short run header", log_path.display())))?;
                    part.frames.push(LogFrame {
                        body_offset: fr.body.start as u64,
                        body_len: fr.body.len() as u64,
                        run,
                    });
                    part.max_seq = part.max_seq.max(fr.seq);
                }
                part.log_len = valid as u64;
            }
            bytes += part.seg_len + part.log_len;
            max_seq = max_seq.max(part.max_seq);
            state.partitions.insert((sensor, day), part);
        }
    }
    Ok((state, bytes, max_seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logpack::Value;
    use crate::study::ids;

    fn accel(ts: TsMs, x: f64) -> SensorReading {
        SensorReading::new(ids::ACCELERATION, ts, vec![Value::Num(x), Value::Num(0.0), Value::Num(9.8)])
    }

    fn open(dir: &Path) -> Store {
        Store::open_with(dir, StoreOptions { sync: false, ..Default::default() }).unwrap()
    }

    const MIDNIGHT: TsMs = 1_548_720_000_000; // 2019-01-29T00:00Z

    #[test]
    fn day_math() {
        assert_eq!(day_of(MIDNIGHT), NaiveDate::from_ymd_opt(2019, 1, 29).unwrap());
        assert_eq!(day_of(MIDNIGHT - 1), NaiveDate::from_ymd_opt(2019, 1, 28).unwrap());
        assert_eq!(day_start(day_of(MIDNIGHT + 5)), MIDNIGHT);
        assert_eq!(hour_bit(MIDNIGHT + 23 * MS_PER_HOUR + 1), 1 << 23);
    }

    #[test]
    fn midnight_split_touches_two_partitions() {
        let dir = tempfile::tempdir().unwrap();
        let store = open(dir.path());
        let p = Pseudonym::random();
        let batch: Vec<_> = (0..1000).map(|i| accel(MIDNIGHT - 25_000 + i * 50, i as f64)).collect();
        let counts = store.write_batch(p, &batch).unwrap();
        assert_eq!(counts.len(), 2);
        assert_eq!(counts.values().sum::<u64>(), 1000);
        assert_eq!(counts.values().next(), Some(&500));
    }

    #[test]
    fn empty_batch_does_no_io() {
        let dir = tempfile::tempdir().unwrap();
        let store = open(dir.path());
        assert!(store.write_batch(Pseudonym::random(), &[]).unwrap().is_empty());
        assert_eq!(fs::metadata(dir.path().join(WAL_FILE)).unwrap().len(), 0);
        assert_eq!(store.used_bytes(), 0);
    }

    #[test]
    fn unsorted_batch_reads_back_sorted_with_stable_ties() {
        let dir = tempfile::tempdir().unwrap();
        let store = open(dir.path());
        let p = Pseudonym::random();
        let batch = vec![accel(MIDNIGHT + 30, 1.0), accel(MIDNIGHT + 10, 2.0), accel(MIDNIGHT + 30, 3.0)];
        store.write_batch(p, &batch).unwrap();
        store.write_batch(p, &[accel(MIDNIGHT + 10, 4.0)]).unwrap();
        let got = store.query_range(p, ids::ACCELERATION, MIDNIGHT, MIDNIGHT + 100).unwrap();
        let xs: Vec<_> = got.iter().map(|r| r.values[0].as_f64().unwrap()).collect();
        assert_eq!(xs, [2.0, 4.0, 1.0, 3.0]);
        store.compact_all().unwrap();
        let again = store.query_range(p, ids::ACCELERATION, MIDNIGHT, MIDNIGHT + 100).unwrap();
        assert_eq!(again, got);
    }

    #[test]
    fn empty_interval_and_unknowns_are_empty() {
        let dir = tempfile::tempdir().unwrap();
        let store = open(dir.path());
        let p = Pseudonym::random();
        store.write_batch(p, &[accel(MIDNIGHT, 1.0)]).unwrap();
        assert!(store.query_range(p, ids::ACCELERATION, MIDNIGHT, MIDNIGHT).unwrap().is_empty());
        assert!(store.query_range(p, ids::GYROSCOPE, 0, i64::MAX).unwrap().is_empty());
        assert!(store.query_range(Pseudonym::random(), ids::ACCELERATION, 0, i64::MAX).unwrap().is_empty());
    }

    #[test]
    fn coverage_counts_distinct_hours() {
        let dir = tempfile::tempdir().unwrap();
        let store = open(dir.path());
        let p = Pseudonym::random();
        let day = day_of(MIDNIGHT);
        assert_eq!(store.coverage_hours(p, ids::ACCELERATION, day), 0);
        let mut batch: Vec<_> = (0..60).map(|m| accel(MIDNIGHT + 9 * MS_PER_HOUR + m * 60_000, 0.0)).collect();
        batch.push(accel(MIDNIGHT + 14 * MS_PER_HOUR + 30 * 60_000, 0.0));
        store.write_batch(p, &batch).unwrap();
        assert_eq!(store.coverage_hours(p, ids::ACCELERATION, day), 2);
        store.compact_all().unwrap();
        assert_eq!(store.coverage_hours(p, ids::ACCELERATION, day), 2);
    }

    #[test]
    fn reopen_replays_unchecked_batches() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pseudonym::random();
        {
            let store = open(dir.path());
            store.write_batch(p, &[accel(MIDNIGHT + 1, 1.0)]).unwrap();
            store.checkpoint().unwrap();
            store.write_batch(p, &[accel(MIDNIGHT + 2, 2.0)]).unwrap();
        }
        // lose the partition log entirely: the WAL alone must restore the batch
        let log = partition_base(dir.path(), p, ids::ACCELERATION, day_of(MIDNIGHT)).with_extension("log");
        let buf = fs::read(&log).unwrap();
        let (frames, _) = format::scan_frames(&buf);
        fs::write(&log, &buf[..frames[1].offset as usize]).unwrap();
        let store = open(dir.path());
        assert_eq!(store.reading_count(p), 2);
        drop(store);
        let store = open(dir.path());
        assert_eq!(store.reading_count(p), 2);
    }

    #[test]
    fn tags_are_persisted_and_duplicates_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pseudonym::random();
        let tag = ChunkId::random();
        {
            let store = open(dir.path());
            store.write_batch_tagged(p, &[accel(MIDNIGHT, 0.0)], tag).unwrap();
            assert!(matches!(
                store.write_batch_tagged(p, &[accel(MIDNIGHT, 0.0)], tag),
                Err(StoreError::DuplicateTag(_))
            ));
        }
        let store = open(dir.path());
        assert!(store.has_tag(p, tag));
        assert_eq!(store.reading_count(p), 1);
    }

    #[test]
    fn quota_refuses_writes() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open_with(
            dir.path(),
            StoreOptions {
                sync: false,
                quota_bytes: Some(1000),
                ..Default::default()
            },
        )
        .unwrap();
        let batch: Vec<_> = (0..100).map(|i| accel(MIDNIGHT + i, 0.0)).collect();
        assert!(matches!(store.write_batch(Pseudonym::random(), &batch), Err(StoreError::StorageFull { .. })));
    }

    #[test]
    fn erase_removes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let store = open(dir.path());
        let (a, b) = (Pseudonym::random(), Pseudonym::random());
        store.write_batch_tagged(a, &[accel(MIDNIGHT, 0.0), accel(MIDNIGHT + MS_PER_DAY, 0.0)], ChunkId::random()).unwrap();
        store.write_batch(b, &[accel(MIDNIGHT, 0.0)]).unwrap();
        let report = store.erase(a).unwrap().unwrap();
        assert_eq!(report, EraseReport { readings: 2, partitions: 2, chunk_tags: 1 });
        assert_eq!(store.erase(a).unwrap(), None);
        assert!(store.query_range(a, ids::ACCELERATION, 0, i64::MAX).unwrap().is_empty());
        assert!(!pseudonym_dir(dir.path(), a).exists());
        drop(store);
        let store = open(dir.path());
        assert_eq!(store.pseudonyms(), vec![b]);
        let wal = fs::read(dir.path().join(WAL_FILE)).unwrap();
        assert!(!wal.windows(16).any(|w| w == a.as_bytes()));
    }

    #[test]
    fn invalid_reading_rejected_without_io() {
        let dir = tempfile::tempdir().unwrap();
        let store = open(dir.path());
        let bad = SensorReading::new(ids::ACCELERATION, MIDNIGHT, vec![Value::Num(1.0)]);
        assert!(matches!(store.write_batch(Pseudonym::random(), &[bad]), Err(StoreError::InvalidReading(_))));
        assert_eq!(store.used_bytes(), 0);
    }

    #[test]
    fn automatic_compaction_keeps_results() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open_with(
            dir.path(),
            StoreOptions {
                sync: false,
                compact_min_bytes: 2048,
                wal_checkpoint_bytes: 8192,
                ..Default::default()
            },
        )
        .unwrap();
        let p = Pseudonym::random();
        for i in 0..200 {
            store.write_batch(p, &[accel(MIDNIGHT + (i * 7919) % 1000, i as f64)]).unwrap();
        }
        let got = store.query_range(p, ids::ACCELERATION, MIDNIGHT, MIDNIGHT + 1000).unwrap();
        assert_eq!(got.len(), 200);
        assert!(got.windows(2).all(|w| w[0].ts_ms <= w[1].ts_ms));
        drop(store);
        let store = open(dir.path());
        assert_eq!(store.query_range(p, ids::ACCELERATION, MIDNIGHT, MIDNIGHT + 1000).unwrap(), got);
    }
}
