//! Sealed chunk files.
//!
//! ```text
//! offset  size  field           encoding
//!      0     4  magic           "ILG1"
//!      4    16  chunk_id        random bytes
//!     20    16  pseudonym_id    raw bytes
//!     36     4  reading_count   u32 big-endian
//!     40     8  ts_min          i64 big-endian (ms since epoch)
//!     48     8  ts_max          i64 big-endian
//!     56     8  plaintext_len   u64 big-endian (serialized records, before compression)
//!     64    12  nonce           random bytes
//!     76     n  ciphertext      AES-256-GCM(deflate(records)), header bytes as AAD
//!   76+n    16  auth_tag        GCM tag
//! ```
//!
//! The whole 76-byte header is authenticated, so a chunk cannot be moved to
//! another pseudonym or have its counts rewritten without failing to open.

use std::io::{Read, Write};
use std::path::Path;

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Key, Nonce, Tag};
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use rand::RngCore;
use serde::Serialize;

use crate::study::{DeviceKey, Pseudonym, SensorCatalog};
use crate::TsMs;

use super::record::{self, RecordDecoder};
use super::{LogpackError, SensorReading};

pub const MAGIC: [u8; 4] = *b"ILG1";
pub const HEADER_LEN: usize = 76;
pub const TAG_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;

hex_id!(
    /// Random 128-bit chunk identifier; the ingest dedupe key.
    ChunkId,
    16
);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkHeader {
    pub chunk_id: ChunkId,
    pub pseudonym: Pseudonym,
    pub reading_count: u32,
    pub ts_min: TsMs,
    pub ts_max: TsMs,
    pub plaintext_len: u64,
    pub nonce: [u8; NONCE_LEN],
}

impl ChunkHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..20].copy_from_slice(&self.chunk_id.0);
        b[20..36].copy_from_slice(&self.pseudonym.0);
        b[36..40].copy_from_slice(&self.reading_count.to_be_bytes());
        b[40..48].copy_from_slice(&self.ts_min.to_be_bytes());
        b[48..56].copy_from_slice(&self.ts_max.to_be_bytes());
        b[56..64].copy_from_slice(&self.plaintext_len.to_be_bytes());
        b[64..76].copy_from_slice(&self.nonce);
        b
    }

    /// Parses header bytes. Nothing here is trusted until the tag verifies.
    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() < HEADER_LEN || b[0..4] != MAGIC {
            return None;
        }
        Some(Self {
            chunk_id: ChunkId(b[4..20].try_into().ok()?),
            pseudonym: Pseudonym(b[20..36].try_into().ok()?),
            reading_count: u32::from_be_bytes(b[36..40].try_into().ok()?),
            ts_min: i64::from_be_bytes(b[40..48].try_into().ok()?),
            ts_max: i64::from_be_bytes(b[48..56].try_into().ok()?),
            plaintext_len: u64::from_be_bytes(b[56..64].try_into().ok()?),
            nonce: b[64..76].try_into().ok()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogChunk {
    pub header: ChunkHeader,
    pub ciphertext: Vec<u8>,
    pub auth_tag: [u8; TAG_LEN],
}

/// What an ingest gate learns from a chunk that authenticates and decodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChunkSummary {
    pub chunk_id: ChunkId,
    pub pseudonym: Pseudonym,
    pub reading_count: u32,
    pub ts_min: TsMs,
    pub ts_max: TsMs,
}

impl LogChunk {
    pub fn chunk_id(&self) -> ChunkId {
        self.header.chunk_id
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.ciphertext.len() + TAG_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.auth_tag);
        out
    }

    /// Splits a chunk file into its parts. Files too short to hold a header
    /// and tag, or with the wrong magic, cannot authenticate and are reported
    /// as [`LogpackError::AuthFailure`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LogpackError> {
        if bytes.len() < HEADER_LEN + TAG_LEN {
            return Err(LogpackError::AuthFailure);
        }
        let header = ChunkHeader::from_bytes(&bytes[..HEADER_LEN]).ok_or(LogpackError::AuthFailure)?;
        let tag_at = bytes.len() - TAG_LEN;
        Ok(Self {
            header,
            ciphertext: bytes[HEADER_LEN..tag_at].to_vec(),
            auth_tag: bytes[tag_at..].try_into().unwrap(),
        })
    }

    pub fn write_to(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn read_from(path: &Path) -> Result<Self, LogpackError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn cipher(key: &DeviceKey) -> Aes256Gcm {
    Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key.as_bytes()))
}

/// Sorts, serializes, compresses and encrypts a batch of readings.
///
/// Readings are not validated here; callers go through
/// [`ReadingBuffer`](super::ReadingBuffer), which checks them on append.
pub fn seal_readings(
    pseudonym: Pseudonym,
    mut readings: Vec<SensorReading>,
    key: &DeviceKey,
) -> Result<LogChunk, LogpackError> {
    if readings.is_empty() {
        return Err(LogpackError::EmptyBuffer);
    }
    readings.sort_by_key(|r| (r.ts_ms, r.sensor_id));
    let reading_count =
        u32::try_from(readings.len()).map_err(|_| LogpackError::TooLarge(readings.len()))?;

    let plaintext_len: usize = readings.iter().map(record::encoded_len).sum();
    let mut plain = Vec::with_capacity(plaintext_len);
    for r in &readings {
        record::encode(r, &mut plain);
    }
    debug_assert_eq!(plain.len(), plaintext_len);

    let mut rng = rand::rng();
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let mut chunk_id = [0u8; 16];
    rng.fill_bytes(&mut chunk_id);

    let header = ChunkHeader {
        chunk_id: ChunkId(chunk_id),
        pseudonym,
        reading_count,
        ts_min: readings.first().unwrap().ts_ms,
        ts_max: readings.last().unwrap().ts_ms,
        plaintext_len: plaintext_len as u64,
        nonce,
    };
    encrypt(header, &plain, key)
}

fn encrypt(header: ChunkHeader, plain: &[u8], key: &DeviceKey) -> Result<LogChunk, LogpackError> {
    let mut enc = DeflateEncoder::new(Vec::with_capacity(plain.len() / 2), Compression::fast());
    enc.write_all(plain)?;
    let mut body = enc.finish()?;

    let aad = header.to_bytes();
    let tag = cipher(key)
        .encrypt_in_place_detached(Nonce::from_slice(&header.nonce), &aad, &mut body)
        .map_err(|_| LogpackError::AuthFailure)?;
    Ok(LogChunk {
        header,
        ciphertext: body,
        auth_tag: tag.into(),
    })
}

/// Authenticates the chunk and returns the decompressed record bytes.
fn authenticate(chunk: &LogChunk, key: &DeviceKey) -> Result<Vec<u8>, LogpackError> {
    let aad = chunk.header.to_bytes();
    let mut body = chunk.ciphertext.clone();
    cipher(key)
        .decrypt_in_place_detached(
            Nonce::from_slice(&chunk.header.nonce),
            &aad,
            &mut body,
            Tag::from_slice(&chunk.auth_tag),
        )
        .map_err(|_| LogpackError::AuthFailure)?;

    let expected = chunk.header.plaintext_len;
    let mut plain = Vec::with_capacity(expected.min(1 << 28) as usize);
    DeflateDecoder::new(body.as_slice())
        .take(expected.saturating_add(1))
        .read_to_end(&mut plain)
        .map_err(|e| LogpackError::CorruptPayload(format!("decompression failed: {e}")))?;
    if plain.len() as u64 != expected {
        return Err(LogpackError::CorruptPayload(format!(
            "plaintext is {} bytes, header says {expected}",
            plain.len()
        )));
    }
    Ok(plain)
}

fn check_reading(header: &ChunkHeader, r: &SensorReading) -> Result<(), LogpackError> {
    if r.ts_ms < header.ts_min || r.ts_ms > header.ts_max {
        return Err(LogpackError::CorruptPayload(format!(
            "reading at {} outside [{}, {}]",
            r.ts_ms, header.ts_min, header.ts_max
        )));
    }
    Ok(())
}

fn check_header(header: &ChunkHeader) -> Result<(), LogpackError> {
    if header.reading_count == 0 || header.ts_min > header.ts_max {
        return Err(LogpackError::CorruptPayload("inconsistent header".into()));
    }
    Ok(())
}

/// Decrypts and decodes a chunk, returning its readings in sealed order.
pub fn open_chunk(chunk: &LogChunk, key: &DeviceKey) -> Result<Vec<SensorReading>, LogpackError> {
    let plain = authenticate(chunk, key)?;
    check_header(&chunk.header)?;
    let mut out = Vec::with_capacity(chunk.header.reading_count as usize);
    for r in RecordDecoder::new(&plain, SensorCatalog::standard()) {
        let r = r?;
        check_reading(&chunk.header, &r)?;
        out.push(r);
    }
    if out.len() != chunk.header.reading_count as usize {
        return Err(LogpackError::CountMismatch {
            header: chunk.header.reading_count,
            decoded: out.len(),
        });
    }
    Ok(out)
}

/// Same checks as [`open_chunk`] without keeping the decoded readings.
pub fn verify_chunk(chunk: &LogChunk, key: &DeviceKey) -> Result<ChunkSummary, LogpackError> {
    let plain = authenticate(chunk, key)?;
    check_header(&chunk.header)?;
    let mut decoded = 0usize;
    for r in RecordDecoder::new(&plain, SensorCatalog::standard()) {
        check_reading(&chunk.header, &r?)?;
        decoded += 1;
    }
    if decoded != chunk.header.reading_count as usize {
        return Err(LogpackError::CountMismatch {
            header: chunk.header.reading_count,
            decoded,
        });
    }
    Ok(ChunkSummary {
        chunk_id: chunk.header.chunk_id,
        pseudonym: chunk.header.pseudonym,
        reading_count: chunk.header.reading_count,
        ts_min: chunk.header.ts_min,
        ts_max: chunk.header.ts_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logpack::Value;
    use crate::study::ids;

    fn sample(n: usize) -> Vec<SensorReading> {
        (0..n)
            .map(|i| {
                SensorReading::new(
                    ids::ACCELERATION,
                    1_548_633_600_000 + (n - i) as i64 * 50,
                    vec![Value::Num(i as f64), Value::Num(0.5), Value::Num(-9.81)],
                )
            })
            .collect()
    }

    /// Encrypts arbitrary records under an arbitrary (possibly lying) header.
    fn seal_raw(header: ChunkHeader, readings: &[SensorReading], key: &DeviceKey) -> LogChunk {
        let mut plain = Vec::new();
        for r in readings {
            record::encode(r, &mut plain);
        }
        let header = ChunkHeader {
            plaintext_len: plain.len() as u64,
            ..header
        };
        encrypt(header, &plain, key).unwrap()
    }

    #[test]
    fn header_is_76_bytes_with_magic_first() {
        let key = DeviceKey::generate();
        let chunk = seal_readings(Pseudonym::random(), sample(3), &key).unwrap();
        let bytes = chunk.to_bytes();
        assert_eq!(&bytes[..4], b"ILG1");
        assert_eq!(u32::from_be_bytes(bytes[36..40].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), HEADER_LEN + chunk.ciphertext.len() + TAG_LEN);
        assert_eq!(LogChunk::from_bytes(&bytes).unwrap(), chunk);
    }

    #[test]
    fn header_bookkeeping() {
        let key = DeviceKey::generate();
        let readings = sample(3);
        let chunk = seal_readings(Pseudonym::random(), readings.clone(), &key).unwrap();
        assert_eq!(chunk.header.reading_count, 3);
        assert_eq!(chunk.header.ts_min, readings.iter().map(|r| r.ts_ms).min().unwrap());
        assert_eq!(chunk.header.ts_max, readings.iter().map(|r| r.ts_ms).max().unwrap());
        assert_eq!(chunk.header.plaintext_len, 3 * 33);
    }

    #[test]
    fn round_trip_sorts_by_time() {
        let key = DeviceKey::generate();
        let readings = sample(10);
        let chunk = seal_readings(Pseudonym::random(), readings.clone(), &key).unwrap();
        let mut expected = readings;
        expected.sort_by_key(|r| (r.ts_ms, r.sensor_id));
        assert_eq!(open_chunk(&chunk, &key).unwrap(), expected);
    }

    #[test]
    fn wrong_key_fails_authentication() {
        let key = DeviceKey::generate();
        let chunk = seal_readings(Pseudonym::random(), sample(4), &key).unwrap();
        assert!(matches!(
            open_chunk(&chunk, &DeviceKey::generate()),
            Err(LogpackError::AuthFailure)
        ));
    }

    #[test]
    fn flipped_ciphertext_byte_fails_authentication() {
        let key = DeviceKey::generate();
        let chunk = seal_readings(Pseudonym::random(), sample(4), &key).unwrap();
        let mut bytes = chunk.to_bytes();
        bytes[HEADER_LEN + 7] ^= 0x01;
        let tampered = LogChunk::from_bytes(&bytes).unwrap();
        assert!(matches!(open_chunk(&tampered, &key), Err(LogpackError::AuthFailure)));
    }

    #[test]
    fn header_rebinding_fails_authentication() {
        let key = DeviceKey::generate();
        let mut chunk = seal_readings(Pseudonym::random(), sample(4), &key).unwrap();
        chunk.header.pseudonym = Pseudonym::random();
        assert!(matches!(verify_chunk(&chunk, &key), Err(LogpackError::AuthFailure)));
    }

    #[test]
    fn truncated_file_fails_authentication() {
        let key = DeviceKey::generate();
        let chunk = seal_readings(Pseudonym::random(), sample(4), &key).unwrap();
        let bytes = chunk.to_bytes();
        assert!(matches!(
            LogChunk::from_bytes(&bytes[..HEADER_LEN]),
            Err(LogpackError::AuthFailure)
        ));
        let cut = LogChunk::from_bytes(&bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(verify_chunk(&cut, &key), Err(LogpackError::AuthFailure)));
    }

    #[test]
    fn verify_reports_header_counts() {
        let key = DeviceKey::generate();
        let chunk = seal_readings(Pseudonym::random(), sample(7), &key).unwrap();
        let summary = verify_chunk(&chunk, &key).unwrap();
        assert_eq!(summary.reading_count, 7);
        assert_eq!((summary.ts_min, summary.ts_max), (chunk.header.ts_min, chunk.header.ts_max));
    }

    #[test]
    fn readings_outside_header_range_are_corrupt() {
        let key = DeviceKey::generate();
        let readings = sample(3);
        let header = ChunkHeader {
            chunk_id: ChunkId::random(),
            pseudonym: Pseudonym::random(),
            reading_count: 3,
            ts_min: 0,
            ts_max: 1,
            plaintext_len: 0,
            nonce: [7; NONCE_LEN],
        };
        let chunk = seal_raw(header, &readings, &key);
        assert!(matches!(verify_chunk(&chunk, &key), Err(LogpackError::CorruptPayload(_))));
        assert!(matches!(open_chunk(&chunk, &key), Err(LogpackError::CorruptPayload(_))));
    }

    #[test]
    fn count_mismatch_detected() {
        let key = DeviceKey::generate();
        let readings = sample(3);
        let header = ChunkHeader {
            chunk_id: ChunkId::random(),
            pseudonym: Pseudonym::random(),
            reading_count: 5,
            ts_min: 0,
            ts_max: i64::MAX,
            plaintext_len: 0,
            nonce: [9; NONCE_LEN],
        };
        let chunk = seal_raw(header, &readings, &key);
        assert!(matches!(
            open_chunk(&chunk, &key),
            Err(LogpackError::CountMismatch { header: 5, decoded: 3 })
        ));
    }

    #[test]
    fn undecodable_records_are_corrupt() {
        let key = DeviceKey::generate();
        let header = ChunkHeader {
            chunk_id: ChunkId::random(),
            pseudonym: Pseudonym::random(),
            reading_count: 1,
            ts_min: 0,
            ts_max: i64::MAX,
            plaintext_len: 3,
            nonce: [1; NONCE_LEN],
        };
        let chunk = encrypt(header, &[200, 200, 200], &key).unwrap();
        assert!(matches!(open_chunk(&chunk, &key), Err(LogpackError::CorruptPayload(_))));
    }

    #[test]
    fn exhaustive_single_bit_tamper() {
        let key = DeviceKey::generate();
        let readings = vec![
            SensorReading::new(ids::SCREEN_STATUS, 1_000, vec![Value::Bool(true)]),
            SensorReading::new(ids::NOTIFICATIONS, 2_000, vec![Value::Text("mail".into())]),
            SensorReading::new(ids::LOCATION, 3_000, vec![Value::Num(46.07), Value::Num(11.12), Value::Num(8.0)]),
        ];
        let bytes = seal_readings(Pseudonym::random(), readings, &key).unwrap().to_bytes();
        assert!(bytes.len() <= 1024);
        for bit in 0..bytes.len() * 8 {
            let mut t = bytes.clone();
            t[bit / 8] ^= 1 << (bit % 8);
            let result = LogChunk::from_bytes(&t).and_then(|c| open_chunk(&c, &key));
            assert!(matches!(result, Err(LogpackError::AuthFailure)), "bit {bit} not detected");
        }
    }
}
