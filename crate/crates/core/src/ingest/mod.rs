//! The ingest backend: registration, task distribution, chunk upload,
//! answers, the supervisor surface and participant erasure.
//!
//! Data directory:
//!
//! ```text
//! <data>/store/                      series store
//! <data>/diary/                      answers and telemetry
//! <data>/receipts/<p>.jsonl          one line per stored chunk
//! <data>/dead-letter/<p>/<id>.chunk  authenticated chunks that failed to decode
//! <data>/identity/                   ledger, linkage and collection tables
//! <data>/erasure.log                 one line of counts per erasure
//! ```

mod registry;
mod token;
mod wire;

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::diary::{DiaryStore, StoredAnswer};
use crate::logpack::{open_chunk, ChunkId, LogChunk, LogpackError};
use crate::scheduler::{generate_timeline, SchedulerError, TaskKind, TaskQueue, TimelineCursor};
use crate::store::{day_start, Store, StoreError, StoreOptions};
use crate::study::{verify_study_code, CollectionRow, IdentityRow, Pseudonym, StudyConfig};
use crate::{TsMs, MS_PER_DAY, MS_PER_HOUR};

pub use registry::Registry;
pub use token::{SessionToken, TokenSigner};
pub use wire::{
    AnswerStatus, CommandKind, ErasureReport, ErrorBody, IngestApi, IngestError, ParticipantStatus, RegisterRequest,
    RegisterResponse, SubmittedAnswer, SupervisorStatus, SyncCommand, TaskFeed, UploadReceipt, UploadStatus,
};

/// Tasks stay answerable for this long after the last study day.
pub const CLOSE_GRACE_MS: i64 = MS_PER_DAY;

#[derive(Debug, Clone)]
pub struct BackendOptions {
    pub data_dir: PathBuf,
    pub mac_key: [u8; 32],
    pub supervisor_token: String,
    pub silence_threshold_ms: i64,
    /// fsync answers, receipts and tables before acknowledging.
    pub sync: bool,
    pub store: StoreOptions,
}

impl BackendOptions {
    pub fn new(data_dir: impl Into<PathBuf>, mac_key: [u8; 32], supervisor_token: impl Into<String>) -> Self {
        Self {
            data_dir: data_dir.into(),
            mac_key,
            supervisor_token: supervisor_token.into(),
            silence_threshold_ms: 24 * MS_PER_HOUR,
            sync: true,
            store: StoreOptions::default(),
        }
    }

    /// Options for tests and simulations: no fsync anywhere.
    pub fn unsynced(mut self) -> Self {
        self.sync = false;
        self.store.sync = false;
        self
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Receipt {
    chunk_id: ChunkId,
    received_at: TsMs,
    readings: u64,
}

#[derive(Debug, Serialize)]
struct ErasureLogLine {
    erased_at: TsMs,
    #[serde(flatten)]
    counts: ErasureReport,
}

#[derive(Debug)]
struct Session {
    registered_at: TsMs,
    queue: TaskQueue,
    cursor: TimelineCursor,
    closed: bool,
    commands: Vec<SyncCommand>,
    last_chunk_at: Option<TsMs>,
    chunks_total: u64,
    readings_total: u64,
}

impl Session {
    fn advance(&mut self, now: TsMs, close_at: TsMs) {
        if self.closed {
            return;
        }
        self.cursor.emit_into(&mut self.queue, now);
        self.queue.expire_overdue(now);
        if now >= close_at {
            self.queue.close();
            self.closed = true;
        }
    }
}

pub struct Backend {
    config: StudyConfig,
    opts: BackendOptions,
    signer: TokenSigner,
    store: Store,
    diary: DiaryStore,
    registry: Mutex<Registry>,
    sessions: RwLock<HashMap<Pseudonym, Arc<Mutex<Session>>>>,
    /// Serializes the file-level side effects of registration and erasure.
    files: Mutex<()>,
}

fn internal(e: impl std::fmt::Display) -> IngestError {
    IngestError::Internal(e.to_string())
}

fn store_error(e: StoreError) -> IngestError {
    match e {
        StoreError::StorageFull { .. } => IngestError::StorageFull,
        other => internal(other),
    }
}

impl Backend {
    pub fn open(config: StudyConfig, opts: BackendOptions) -> Result<Self, IngestError> {
        config.validate().map_err(|e| IngestError::BadRequest(e.to_string()))?;
        let dir = &opts.data_dir;
        fs::create_dir_all(dir.join("receipts")).map_err(internal)?;
        fs::create_dir_all(dir.join("dead-letter")).map_err(internal)?;
        let store = Store::open_with(dir.join("store"), opts.store.clone()).map_err(store_error)?;
        let diary = DiaryStore::open(dir.join("diary"), opts.sync).map_err(internal)?;
        let registry = Registry::open(&dir.join("identity"), opts.sync).map_err(internal)?;
        let backend = Self {
            signer: TokenSigner::new(opts.mac_key),
            config,
            store,
            diary,
            registry: Mutex::new(registry),
            sessions: RwLock::new(HashMap::new()),
            files: Mutex::new(()),
            opts,
        };
        let rows: Vec<CollectionRow> = backend.registry.lock().rows().filter(|r| r.consent == crate::study::Consent::Granted).cloned().collect();
        let mut sessions = HashMap::new();
        for row in rows {
            let s = backend.restore_session(&row).map_err(internal)?;
            sessions.insert(row.pseudonym_id, Arc::new(Mutex::new(s)));
        }
        *backend.sessions.write() = sessions;
        Ok(backend)
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn diary(&self) -> &DiaryStore {
        &self.diary
    }

    pub fn data_dir(&self) -> &Path {
        &self.opts.data_dir
    }

    fn study_end_ms(&self) -> TsMs {
        day_start(self.config.end) + MS_PER_DAY
    }

    fn close_at(&self) -> TsMs {
        self.study_end_ms() + CLOSE_GRACE_MS
    }

    fn new_session(&self, row: &CollectionRow) -> Session {
        Session {
            registered_at: row.registered_at,
            queue: TaskQueue::new(&self.config),
            cursor: TimelineCursor::new(generate_timeline(&self.config, row.tz_offset_min)),
            closed: false,
            commands: Vec::new(),
            last_chunk_at: None,
            chunks_total: 0,
            readings_total: 0,
        }
    }

    fn restore_session(&self, row: &CollectionRow) -> io::Result<Session> {
        let p = row.pseudonym_id;
        let mut s = self.new_session(row);
        let answers = self.diary.answers(p);
        let last = answers
            .iter()
            .filter(|a| a.answer.kind == TaskKind::Episode)
            .max_by_key(|a| a.answer.episode_start)
            .map(|a| a.answer.answers.clone());
        s.queue.restore_answered(answers.iter().map(|a| a.answer.task_id), last);
        for r in self.receipts(p)? {
            s.chunks_total += 1;
            s.readings_total += r.readings;
            s.last_chunk_at = s.last_chunk_at.max(Some(r.received_at));
        }
        Ok(s)
    }

    fn receipts_path(&self, p: Pseudonym) -> PathBuf {
        self.opts.data_dir.join("receipts").join(format!("{}.jsonl", p.to_hex()))
    }

    fn dead_letter_dir(&self, p: Pseudonym) -> PathBuf {
        self.opts.data_dir.join("dead-letter").join(p.to_hex())
    }

    fn receipts(&self, p: Pseudonym) -> io::Result<Vec<Receipt>> {
        let file = match fs::File::open(self.receipts_path(p)) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut out = Vec::new();
        for line in io::BufReader::new(file).lines() {
            if let Ok(r) = serde_json::from_str(&line?) {
                out.push(r);
            }
        }
        Ok(out)
    }

    fn append_line(&self, path: &Path, line: &impl Serialize) -> io::Result<()> {
        let mut bytes = serde_json::to_vec(line).expect("log line serializes");
        bytes.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(&bytes)?;
        if self.opts.sync {
            f.sync_data()?;
        }
        Ok(())
    }

    fn session(&self, p: Pseudonym) -> Option<Arc<Mutex<Session>>> {
        self.sessions.read().get(&p).cloned()
    }

    /// Checks a device token and returns the participant's session.
    fn authenticate(&self, token: &str) -> Result<(Pseudonym, Arc<Mutex<Session>>), IngestError> {
        let t = self.signer.verify(token).ok_or(IngestError::AuthFailure)?;
        let s = self.session(t.pseudonym).ok_or(IngestError::AuthFailure)?;
        Ok((t.pseudonym, s))
    }

    pub fn check_supervisor(&self, credential: &str) -> Result<(), IngestError> {
        let expected = self.opts.supervisor_token.as_bytes();
        if !expected.is_empty() && bool::from(credential.as_bytes().ct_eq(expected)) {
            Ok(())
        } else {
            Err(IngestError::Unauthorized)
        }
    }

    pub fn pseudonym_of(&self, token: &str) -> Option<Pseudonym> {
        self.signer.verify(token).map(|t| t.pseudonym)
    }

    /// Participants with active consent, in pseudonym order.
    pub fn participants(&self) -> Vec<Pseudonym> {
        let mut v: Vec<_> = self.sessions.read().keys().copied().collect();
        v.sort();
        v
    }

    /// Every enrolled pseudonym, including revoked ones.
    pub fn registered(&self) -> Vec<CollectionRow> {
        self.registry.lock().rows().cloned().collect()
    }

    /// Admin export of the identity ledger. No network endpoint serves it.
    pub fn identity_ledger(&self) -> Vec<IdentityRow> {
        self.registry.lock().identity_rows().to_vec()
    }

    pub fn supervisor_status(&self, credential: &str, now: TsMs) -> Result<SupervisorStatus, IngestError> {
        self.check_supervisor(credential)?;
        let threshold = self.opts.silence_threshold_ms;
        let sessions: Vec<_> = self.sessions.read().iter().map(|(p, s)| (*p, s.clone())).collect();
        let close_at = self.close_at();
        let mut participants: Vec<ParticipantStatus> = sessions
            .into_iter()
            .map(|(p, s)| {
                let mut s = s.lock();
                s.advance(now, close_at);
                // a device that never uploaded is measured from its registration
                let reference = s.last_chunk_at.unwrap_or(s.registered_at);
                ParticipantStatus {
                    pseudonym: p,
                    registered_at: s.registered_at,
                    last_chunk_at: s.last_chunk_at,
                    last_answer_at: self.diary.last_answer_at(p),
                    chunks_total: s.chunks_total,
                    readings_total: s.readings_total,
                    answers_total: self.diary.count(p),
                    backlog_size: s.queue.len() as u64,
                    silent: now - reference > threshold,
                    pending_commands: s.commands.clone(),
                }
            })
            .collect();
        participants.sort_by_key(|r| r.pseudonym);
        Ok(SupervisorStatus {
            generated_at: now,
            silence_threshold_ms: threshold,
            participants,
        })
    }

    /// Queues a Wi-Fi sync for the device's next poll. A pending command of
    /// the same kind is returned instead of queuing a second one.
    pub fn trigger_sync(&self, credential: &str, p: Pseudonym, now: TsMs) -> Result<SyncCommand, IngestError> {
        self.check_supervisor(credential)?;
        let s = self.session(p).ok_or(IngestError::UnknownParticipant)?;
        let mut s = s.lock();
        let kind = CommandKind::ForceSyncWifi;
        if let Some(c) = s.commands.iter().find(|c| c.kind == kind) {
            return Ok(c.clone());
        }
        let cmd = SyncCommand {
            participant: p,
            kind,
            issued_at: now,
            delivered_at: None,
        };
        s.commands.push(cmd.clone());
        Ok(cmd)
    }

    pub fn erase_participant(&self, credential: &str, p: Pseudonym, now: TsMs) -> Result<ErasureReport, IngestError> {
        self.check_supervisor(credential)?;
        self.erase(p, now)
    }

    /// Erasure requested by the participant's own device.
    pub fn erase_self(&self, token: &str, now: TsMs) -> Result<ErasureReport, IngestError> {
        let t = self.signer.verify(token).ok_or(IngestError::AuthFailure)?;
        self.erase(t.pseudonym, now)
    }

    fn erase(&self, p: Pseudonym, now: TsMs) -> Result<ErasureReport, IngestError> {
        let _files = self.files.lock();
        if self.registry.lock().get(p).is_none() {
            return Err(IngestError::UnknownParticipant);
        }
        // hold the session while its data goes away so no upload interleaves
        let session = self.sessions.write().remove(&p);
        let _guard = session.as_ref().map(|s| s.lock());

        let stored = self.store.erase(p).map_err(store_error)?.unwrap_or_default();
        let answers = self.diary.erase(p).map_err(internal)?;
        let dl_dir = self.dead_letter_dir(p);
        let dead_letters = match fs::read_dir(&dl_dir) {
            Ok(rd) => rd.count() as u64,
            Err(_) => 0,
        };
        if dl_dir.exists() {
            fs::remove_dir_all(&dl_dir).map_err(internal)?;
        }
        let receipts = self.receipts_path(p);
        if receipts.exists() {
            fs::remove_file(&receipts).map_err(internal)?;
        }
        self.registry.lock().erase(p).map_err(internal)?;
        let report = ErasureReport {
            readings: stored.readings,
            partitions: stored.partitions,
            chunks: stored.chunk_tags,
            answers,
            telemetry: answers,
            dead_letters,
        };
        self.append_line(
            &self.opts.data_dir.join("erasure.log"),
            &ErasureLogLine {
                erased_at: now,
                counts: report,
            },
        )
        .map_err(internal)?;
        tracing::info!(readings = report.readings, answers = report.answers, "participant erased");
        Ok(report)
    }

    fn quarantine(&self, p: Pseudonym, name: &str, bytes: &[u8]) -> io::Result<()> {
        let dir = self.dead_letter_dir(p);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(format!("{name}.chunk")), bytes)
    }

    /// Number of quarantined chunks of `p`.
    pub fn dead_letters(&self, p: Pseudonym) -> u64 {
        fs::read_dir(self.dead_letter_dir(p)).map_or(0, |rd| rd.count() as u64)
    }
}

impl IngestApi for Backend {
    fn register(&self, req: &RegisterRequest, now: TsMs) -> Result<RegisterResponse, IngestError> {
        if !verify_study_code(&req.study_code, &self.config) {
            return Err(IngestError::BadStudyCode);
        }
        if now >= self.study_end_ms() {
            return Err(IngestError::StudyClosed);
        }
        if req.contact.trim().is_empty() {
            return Err(IngestError::BadRequest("contact is required".into()));
        }
        let _files = self.files.lock();
        let enrolled = self
            .registry
            .lock()
            .enroll(req.contact.trim(), req.background.clone(), req.tz_offset_min, now)
            .map_err(internal)?;
        let record = enrolled.record;
        let row = CollectionRow {
            pseudonym_id: record.pseudonym_id,
            device_key: record.device_key.clone(),
            consent: record.consent,
            registered_at: now,
            background: record.background.clone(),
            tz_offset_min: record.tz_offset_min,
        };
        let mut sessions = self.sessions.write();
        if let Some(old) = enrolled.revoked {
            sessions.remove(&old);
        }
        sessions.insert(record.pseudonym_id, Arc::new(Mutex::new(self.new_session(&row))));
        Ok(RegisterResponse {
            pseudonym: record.pseudonym_id,
            token: self.signer.issue(record.pseudonym_id, now),
            device_key: record.device_key,
        })
    }

    fn upload_chunk(&self, token: &str, bytes: &[u8], now: TsMs) -> Result<UploadReceipt, IngestError> {
        let (p, session) = self.authenticate(token)?;
        let chunk = LogChunk::from_bytes(bytes).map_err(|_| IngestError::AuthFailure)?;
        if chunk.header.pseudonym != p {
            return Err(IngestError::PseudonymMismatch);
        }
        let chunk_id = chunk.chunk_id();
        let mut s = session.lock();
        if self.store.has_tag(p, chunk_id) {
            return Ok(UploadReceipt {
                chunk_id,
                status: UploadStatus::Duplicate,
                readings_stored: 0,
            });
        }
        let key = self.registry.lock().get(p).map(|r| r.device_key.clone()).ok_or(IngestError::AuthFailure)?;
        let readings = match open_chunk(&chunk, &key) {
            Ok(r) => r,
            Err(LogpackError::AuthFailure) => return Err(IngestError::AuthFailure),
            Err(e) => {
                tracing::warn!(chunk = %chunk_id, error = %e, "quarantining undecodable chunk");
                self.quarantine(p, &chunk_id.to_hex(), bytes).map_err(internal)?;
                return Err(IngestError::DecodeError(e.to_string()));
            }
        };
        let n = readings.len() as u64;
        match self.store.write_batch_tagged(p, &readings, chunk_id) {
            Ok(_) => {}
            Err(StoreError::DuplicateTag(_)) => {
                return Ok(UploadReceipt {
                    chunk_id,
                    status: UploadStatus::Duplicate,
                    readings_stored: 0,
                })
            }
            Err(StoreError::InvalidReading(e)) => {
                self.quarantine(p, &chunk_id.to_hex(), bytes).map_err(internal)?;
                return Err(IngestError::DecodeError(e.to_string()));
            }
            Err(e) => return Err(store_error(e)),
        }
        let receipt = Receipt {
            chunk_id,
            received_at: now,
            readings: n,
        };
        self.append_line(&self.receipts_path(p), &receipt).map_err(internal)?;
        s.chunks_total += 1;
        s.readings_total += n;
        s.last_chunk_at = s.last_chunk_at.max(Some(now));
        Ok(UploadReceipt {
            chunk_id,
            status: UploadStatus::Stored,
            readings_stored: n,
        })
    }

    fn fetch_tasks(&self, token: &str, offline_since: Option<TsMs>, now: TsMs) -> Result<TaskFeed, IngestError> {
        let (_, session) = self.authenticate(token)?;
        let mut s = session.lock();
        s.advance(now, self.close_at());
        s.queue.deliver_pending(now, offline_since);
        let tasks = s.queue.pending().filter(|t| t.emit_at <= now).cloned().collect();
        let mut commands: Vec<SyncCommand> = s.commands.drain(..).collect();
        for c in &mut commands {
            c.delivered_at = Some(now);
        }
        Ok(TaskFeed { tasks, commands })
    }

    fn submit_answers(&self, token: &str, answers: &[SubmittedAnswer], now: TsMs) -> Result<Vec<AnswerStatus>, IngestError> {
        let (p, session) = self.authenticate(token)?;
        let mut s = session.lock();
        s.advance(now, self.close_at());
        let mut out = Vec::with_capacity(answers.len());
        for sub in answers {
            let task_id = sub.answer.task_id;
            if self.diary.contains(p, task_id) {
                out.push(AnswerStatus::Duplicate { task_id });
                continue;
            }
            // the device clock decides unless it claims a time before the
            // server handed the task out
            let delivered = s.queue.delivery(task_id).map(|d| d.at);
            let notified_at = match (sub.notified_at, delivered) {
                (Some(n), Some(d)) => n.max(d),
                (None, Some(d)) => d,
                (Some(n), None) => n,
                (None, None) => sub.answer.answered_at_start,
            };
            let status = match s.queue.accept_answer(&self.config, sub.answer.clone(), notified_at) {
                Ok((answer, telemetry)) => {
                    self.diary.append(p, StoredAnswer { answer, telemetry }).map_err(internal)?;
                    AnswerStatus::Accepted { task_id }
                }
                Err(SchedulerError::AlreadyAnswered(_)) => AnswerStatus::Duplicate { task_id },
                Err(SchedulerError::WindowExpired(_)) => AnswerStatus::WindowExpired { task_id },
                Err(SchedulerError::InvalidAnswer(reason)) => AnswerStatus::InvalidAnswer { task_id, reason },
                Err(SchedulerError::UnknownTask(_) | SchedulerError::DuplicateTask(_)) => {
                    AnswerStatus::UnknownTask { task_id }
                }
            };
            out.push(status);
        }
        Ok(out)
    }
}

/// Key material from a passphrase, for configurations that carry one.
pub fn derive_mac_key(secret: &str) -> [u8; 32] {
    Sha256::new_with_prefix(b"ilog-mac-key-v1").chain_update(secret.as_bytes()).finalize().into()
}
