//! JSON bodies exchanged between devices, the supervisor and the backend.

use serde::{Deserialize, Serialize};

use crate::logpack::ChunkId;
use crate::scheduler::{DiaryAnswer, DiaryTask, TaskId};
use crate::study::{Background, DeviceKey, Pseudonym};
use crate::TsMs;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub study_code: String,
    #[serde(default)]
    pub background: Background,
    pub contact: String,
    /// Fixed offset of the participant's local time east of UTC.
    #[serde(default)]
    pub tz_offset_min: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub pseudonym: Pseudonym,
    pub token: String,
    pub device_key: DeviceKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UploadStatus {
    Stored,
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadReceipt {
    pub chunk_id: ChunkId,
    pub status: UploadStatus,
    pub readings_stored: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    ForceSyncWifi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncCommand {
    pub participant: Pseudonym,
    pub kind: CommandKind,
    pub issued_at: TsMs,
    pub delivered_at: Option<TsMs>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaskFeed {
    pub tasks: Vec<DiaryTask>,
    pub commands: Vec<SyncCommand>,
}

/// A diary answer as sent by the device, with the moment the device showed
/// the notification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmittedAnswer {
    #[serde(flatten)]
    pub answer: DiaryAnswer,
    #[serde(default)]
    pub notified_at: Option<TsMs>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AnswerStatus {
    Accepted { task_id: TaskId },
    /// Already stored; the resubmission changed nothing.
    Duplicate { task_id: TaskId },
    UnknownTask { task_id: TaskId },
    WindowExpired { task_id: TaskId },
    InvalidAnswer { task_id: TaskId, reason: String },
}

impl AnswerStatus {
    pub fn task_id(&self) -> TaskId {
        match self {
            AnswerStatus::Accepted { task_id }
            | AnswerStatus::Duplicate { task_id }
            | AnswerStatus::UnknownTask { task_id }
            | AnswerStatus::WindowExpired { task_id }
            | AnswerStatus::InvalidAnswer { task_id, .. } => *task_id,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, AnswerStatus::Accepted { .. } | AnswerStatus::Duplicate { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantStatus {
    pub pseudonym: Pseudonym,
    pub registered_at: TsMs,
    pub last_chunk_at: Option<TsMs>,
    pub last_answer_at: Option<TsMs>,
    pub chunks_total: u64,
    pub readings_total: u64,
    pub answers_total: u64,
    pub backlog_size: u64,
    pub silent: bool,
    pub pending_commands: Vec<SyncCommand>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisorStatus {
    pub generated_at: TsMs,
    pub silence_threshold_ms: i64,
    pub participants: Vec<ParticipantStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErasureReport {
    pub readings: u64,
    pub partitions: u64,
    pub chunks: u64,
    pub answers: u64,
    pub telemetry: u64,
    pub dead_letters: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IngestError {
    #[error("study code does not match")]
    BadStudyCode,
    #[error("the study has ended")]
    StudyClosed,
    #[error("authentication failed")]
    AuthFailure,
    #[error("chunk belongs to another participant")]
    PseudonymMismatch,
    #[error("chunk could not be decoded: {0}")]
    DecodeError(String),
    #[error("unknown participant")]
    UnknownParticipant,
    #[error("supervisor credential required")]
    Unauthorized,
    #[error("storage is full")]
    StorageFull,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("internal error: {0}")]
    Internal(String),
    /// Transport-level failure; the request may be retried.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

/// Error body on the wire: `{"error":"auth_failure","message":"..."}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::BadStudyCode => "bad_study_code",
            IngestError::StudyClosed => "study_closed",
            IngestError::AuthFailure => "auth_failure",
            IngestError::PseudonymMismatch => "pseudonym_mismatch",
            IngestError::DecodeError(_) => "decode_error",
            IngestError::UnknownParticipant => "unknown_participant",
            IngestError::Unauthorized => "unauthorized",
            IngestError::StorageFull => "storage_full",
            IngestError::BadRequest(_) => "bad_request",
            IngestError::Internal(_) => "internal",
            IngestError::Unavailable(_) => "unavailable",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            IngestError::BadStudyCode | IngestError::PseudonymMismatch => 403,
            IngestError::AuthFailure | IngestError::Unauthorized => 401,
            IngestError::StudyClosed => 409,
            IngestError::DecodeError(_) => 422,
            IngestError::UnknownParticipant => 404,
            IngestError::StorageFull => 507,
            IngestError::BadRequest(_) => 400,
            IngestError::Internal(_) => 500,
            IngestError::Unavailable(_) => 503,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: self.code().to_string(),
            message: self.to_string(),
        }
    }

    pub fn from_body(body: &ErrorBody) -> Self {
        let detail = body.message.clone();
        match body.error.as_str() {
            "bad_study_code" => IngestError::BadStudyCode,
            "study_closed" => IngestError::StudyClosed,
            "auth_failure" => IngestError::AuthFailure,
            "pseudonym_mismatch" => IngestError::PseudonymMismatch,
            "decode_error" => IngestError::DecodeError(detail),
            "unknown_participant" => IngestError::UnknownParticipant,
            "unauthorized" => IngestError::Unauthorized,
            "storage_full" => IngestError::StorageFull,
            "bad_request" => IngestError::BadRequest(detail),
            "unavailable" => IngestError::Unavailable(detail),
            _ => IngestError::Internal(detail),
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, IngestError::Unavailable(_) | IngestError::Internal(_))
    }
}

/// The device-facing surface of the backend, implemented in-process by
/// `Backend` and over HTTP by the server crate's client. `now` is the
/// caller's clock; remote implementations may ignore it.
pub trait IngestApi: Send + Sync {
    fn register(&self, req: &RegisterRequest, now: TsMs) -> Result<RegisterResponse, IngestError>;
    fn upload_chunk(&self, token: &str, bytes: &[u8], now: TsMs) -> Result<UploadReceipt, IngestError>;
    fn fetch_tasks(&self, token: &str, offline_since: Option<TsMs>, now: TsMs) -> Result<TaskFeed, IngestError>;
    fn submit_answers(
        &self,
        token: &str,
        answers: &[SubmittedAnswer],
        now: TsMs,
    ) -> Result<Vec<AnswerStatus>, IngestError>;
}
