//! Study configuration, sensor catalog, answer codebooks and the participant
//! identity model shared by every other module.

mod catalog;
mod codebook;
mod config;
mod participant;

pub use catalog::{
    default_events_per_day, ids, Rate, Sampling, SensorCatalog, SensorId, SensorKind, SensorSpec,
    ValueKind,
};
pub use codebook::{default_codebook, Codebook, CodebookEntry, CodebookId, DEFAULT_TRAVEL_CODE};
pub use config::{
    expected_daily_readings, expected_daily_volume, load_study_config, verify_study_code,
    ReplyWindow, SensorOverride, StudyConfig, DEFAULT_BYTES_PER_READING,
    DEFAULT_CHUNK_TARGET_BYTES, MINUTES_PER_DAY,
};
pub use participant::{
    Background, CollectionRow, Consent, ContactRef, DeviceKey, IdentityRow, LinkageRow,
    ParticipantRecord, Pseudonym,
};

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("malformed study document: {0}")]
    Parse(String),
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("sensor {0} samples on change and has no fixed daily count")]
    NotDeterministic(String),
}

impl StudyError {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        StudyError::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_field(self, field: &str) -> Self {
        match self {
            StudyError::Validation { reason, .. } => StudyError::validation(field, reason),
            other => other,
        }
    }
}
