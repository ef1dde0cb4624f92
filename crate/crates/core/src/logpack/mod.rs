//! On-device log representation: the reading buffer, sealed chunk files and
//! the decoder the backend uses to open them.

mod chunk;
pub mod record;

use serde::{Deserialize, Serialize};

use crate::study::{DeviceKey, Pseudonym, SensorCatalog, SensorId, StudyConfig, ValueKind};
use crate::TsMs;

pub use chunk::{
    open_chunk, seal_readings, verify_chunk, ChunkHeader, ChunkId, ChunkSummary, LogChunk,
    HEADER_LEN, MAGIC, NONCE_LEN, TAG_LEN,
};

#[derive(Debug, thiserror::Error)]
pub enum LogpackError {
    #[error("sensor {0} is not in the catalog")]
    UnknownSensor(SensorId),
    #[error("sensor {sensor} takes {expected} values, got {got}")]
    ArityMismatch {
        sensor: SensorId,
        expected: u8,
        got: usize,
    },
    #[error("sensor {sensor} takes {expected:?} values")]
    KindMismatch { sensor: SensorId, expected: ValueKind },
    #[error("timestamp {0} is not after the epoch")]
    InvalidTimestamp(TsMs),
    #[error("cannot seal an empty buffer")]
    EmptyBuffer,
    #[error("{0} readings do not fit in one chunk")]
    TooLarge(usize),
    #[error("chunk failed authentication")]
    AuthFailure,
    #[error("chunk authenticated but payload is invalid: {0}")]
    CorruptPayload(String),
    #[error("header declares {header} readings, payload holds {decoded}")]
    CountMismatch { header: u32, decoded: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One value of a reading; every value of a sensor has the catalog's kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Bool(bool),
    Text(String),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Num(_) => ValueKind::Numeric,
            Value::Bool(_) => ValueKind::Boolean,
            Value::Text(_) => ValueKind::Text,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            _ => None,
        }
    }
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Num(x) => write!(f, "{x}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

/// A timestamp and one or more values from one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub sensor_id: SensorId,
    pub ts_ms: TsMs,
    pub values: Vec<Value>,
}

impl SensorReading {
    pub fn new(sensor_id: SensorId, ts_ms: TsMs, values: Vec<Value>) -> Self {
        Self {
            sensor_id,
            ts_ms,
            values,
        }
    }

    pub fn validate(&self, catalog: &SensorCatalog) -> Result<(), LogpackError> {
        let spec = catalog
            .get(self.sensor_id)
            .ok_or(LogpackError::UnknownSensor(self.sensor_id))?;
        if self.values.len() != spec.value_arity as usize {
            return Err(LogpackError::ArityMismatch {
                sensor: self.sensor_id,
                expected: spec.value_arity,
                got: self.values.len(),
            });
        }
        if self.values.iter().any(|v| v.kind() != spec.value_kind) {
            return Err(LogpackError::KindMismatch {
                sensor: self.sensor_id,
                expected: spec.value_kind,
            });
        }
        if self.ts_ms <= 0 {
            return Err(LogpackError::InvalidTimestamp(self.ts_ms));
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        record::encoded_len(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Buffered,
    /// The buffer reached the chunk target; the caller must seal now.
    SealRequested,
}

/// In-memory buffer of readings waiting to be sealed into a chunk.
#[derive(Debug, Clone)]
pub struct ReadingBuffer {
    pseudonym: Pseudonym,
    pending: Vec<SensorReading>,
    byte_estimate: u64,
    opened_at: Option<TsMs>,
}

impl ReadingBuffer {
    pub fn new(pseudonym: Pseudonym) -> Self {
        Self {
            pseudonym,
            pending: Vec::new(),
            byte_estimate: 0,
            opened_at: None,
        }
    }

    pub fn pseudonym(&self) -> Pseudonym {
        self.pseudonym
    }

    pub fn pending(&self) -> &[SensorReading] {
        &self.pending
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Serialized size of everything pending, in bytes.
    pub fn byte_estimate(&self) -> u64 {
        self.byte_estimate
    }

    /// Timestamp of the first reading appended since the last seal.
    pub fn opened_at(&self) -> Option<TsMs> {
        self.opened_at
    }

    pub fn append(
        &mut self,
        reading: SensorReading,
        config: &StudyConfig,
    ) -> Result<AppendOutcome, LogpackError> {
        reading.validate(config.catalog())?;
        self.byte_estimate += reading.encoded_len() as u64;
        self.opened_at.get_or_insert(reading.ts_ms);
        self.pending.push(reading);
        Ok(if self.byte_estimate >= config.chunk_target_bytes {
            AppendOutcome::SealRequested
        } else {
            AppendOutcome::Buffered
        })
    }

    /// Seals everything pending into one chunk and empties the buffer.
    pub fn seal(&mut self, key: &DeviceKey) -> Result<LogChunk, LogpackError> {
        if self.pending.is_empty() {
            return Err(LogpackError::EmptyBuffer);
        }
        let readings = std::mem::take(&mut self.pending);
        self.byte_estimate = 0;
        self.opened_at = None;
        seal_readings(self.pseudonym, readings, key)
    }
}
