//! Diary task timelines and the per-device task queue.

mod queue;
mod timeline;

use serde::{Deserialize, Serialize};

use crate::study::CodebookId;
use crate::TsMs;

pub use queue::{
    AcceptedAnswer, Delivery, ExpiryReason, OutcomeCounts, TaskOutcome, TaskQueue, TimelineCursor,
};
pub use timeline::{generate_timeline, local_midnight_ms, DiaryTask, Question, TaskId, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchedulerError {
    #[error("task {0} is not pending")]
    UnknownTask(TaskId),
    #[error("task {0} is already pending or terminated")]
    DuplicateTask(TaskId),
    #[error("task {0} was already answered")]
    AlreadyAnswered(TaskId),
    #[error("reply window for task {0} has passed")]
    WindowExpired(TaskId),
    #[error("invalid answer: {0}")]
    InvalidAnswer(String),
}

/// Either a codebook code or free text for an "Other (specify)" answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerValue {
    Code(u8),
    OpenText(String),
}

/// One answered question. On the wire: `{"codebook":"activity","code":4}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerItem {
    pub codebook: CodebookId,
    #[serde(flatten)]
    pub value: AnswerValue,
}

impl AnswerItem {
    pub fn code(codebook: CodebookId, code: u8) -> Self {
        Self {
            codebook,
            value: AnswerValue::Code(code),
        }
    }

    pub fn open_text(codebook: CodebookId, text: impl Into<String>) -> Self {
        Self {
            codebook,
            value: AnswerValue::OpenText(text.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiaryAnswer {
    pub task_id: TaskId,
    #[serde(default)]
    pub answers: Vec<AnswerItem>,
    /// When the respondent opened the task.
    pub answered_at_start: TsMs,
    /// When the respondent submitted it.
    pub answered_at_end: TsMs,
    #[serde(default)]
    pub same_as_previous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTelemetry {
    pub task_id: TaskId,
    pub notified_at: TsMs,
    pub reaction_ms: i64,
    pub completion_ms: i64,
    pub delivered_offline: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_item_wire_shape() {
        let item = AnswerItem::code(CodebookId::Activity, 4);
        assert_eq!(
            serde_json::to_string(&item).unwrap(),
            r#"{"codebook":"activity","code":4}"#
        );
        let text: AnswerItem =
            serde_json::from_str(r#"{"codebook":"location","open_text":"garden"}"#).unwrap();
        assert_eq!(text, AnswerItem::open_text(CodebookId::Location, "garden"));
    }
}
