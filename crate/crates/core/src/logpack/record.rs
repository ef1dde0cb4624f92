//! Byte layout of one serialized reading.
//!
//! ```text
//! varint   sensor_id (LEB128)
//! i64 LE   ts_ms
//! payload  value_arity values of the sensor's value kind:
//!            numeric  f64 LE (8 bytes)
//!            text     varint byte length, then UTF-8 bytes
//!            boolean  one byte, 0 or 1
//! ```
//!
//! The layout is not self-describing: arity and value kind come from the
//! sensor catalog.

use crate::study::{SensorCatalog, SensorId, ValueKind};

use super::{LogpackError, SensorReading, Value};

pub fn varint_len(mut v: u64) -> usize {
    let mut n = 1;
    while v >= 0x80 {
        v >>= 7;
        n += 1;
    }
    n
}

pub fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

pub fn get_varint(buf: &[u8], pos: &mut usize) -> Option<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *buf.get(*pos)?;
        *pos += 1;
        v |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Some(v);
        }
    }
    None
}

/// Serialized size of a reading in bytes.
pub fn encoded_len(reading: &SensorReading) -> usize {
    let payload: usize = reading
        .values
        .iter()
        .map(|v| match v {
            Value::Num(_) => 8,
            Value::Bool(_) => 1,
            Value::Text(s) => varint_len(s.len() as u64) + s.len(),
        })
        .sum();
    varint_len(reading.sensor_id.0 as u64) + 8 + payload
}

pub fn encode(reading: &SensorReading, out: &mut Vec<u8>) {
    put_varint(out, reading.sensor_id.0 as u64);
    out.extend_from_slice(&reading.ts_ms.to_le_bytes());
    for value in &reading.values {
        match value {
            Value::Num(x) => out.extend_from_slice(&x.to_le_bytes()),
            Value::Bool(b) => out.push(*b as u8),
            Value::Text(s) => {
                put_varint(out, s.len() as u64);
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
}

/// Locates the record starting at `pos` without decoding its values.
/// Returns the sensor, timestamp and the offset one past the record.
pub fn record_span(
    buf: &[u8],
    pos: usize,
    catalog: &SensorCatalog,
) -> Result<(SensorId, i64, usize), LogpackError> {
    let bad = |what: &str| LogpackError::CorruptPayload(format!("{what} at byte {pos}"));
    let mut p = pos;
    let raw_id = get_varint(buf, &mut p).ok_or_else(|| bad("bad sensor id"))?;
    let sensor_id = u16::try_from(raw_id).map(SensorId).map_err(|_| bad("sensor id out of range"))?;
    let spec = catalog.get(sensor_id).ok_or_else(|| bad("unknown sensor id"))?;
    let ts_bytes = buf.get(p..p + 8).ok_or_else(|| bad("truncated record"))?;
    let ts = i64::from_le_bytes(ts_bytes.try_into().unwrap());
    p += 8;
    match spec.value_kind {
        ValueKind::Numeric => p += 8 * spec.value_arity as usize,
        ValueKind::Boolean => p += spec.value_arity as usize,
        ValueKind::Text => {
            for _ in 0..spec.value_arity {
                let len = get_varint(buf, &mut p).ok_or_else(|| bad("bad text length"))?;
                p = p.checked_add(len as usize).ok_or_else(|| bad("text too long"))?;
            }
        }
    }
    if p > buf.len() {
        return Err(bad("truncated record"));
    }
    Ok((sensor_id, ts, p))
}

/// Streaming decoder over a buffer of concatenated records.
pub struct RecordDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    catalog: &'a SensorCatalog,
}

impl<'a> RecordDecoder<'a> {
    pub fn new(buf: &'a [u8], catalog: &'a SensorCatalog) -> Self {
        Self { buf, pos: 0, catalog }
    }

    fn corrupt(&self, what: &str) -> LogpackError {
        LogpackError::CorruptPayload(format!("{what} at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], LogpackError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt("truncated record")),
        }
    }

    fn decode_one(&mut self) -> Result<SensorReading, LogpackError> {
        let raw_id = get_varint(self.buf, &mut self.pos).ok_or_else(|| self.corrupt("bad sensor id"))?;
        let sensor_id = u16::try_from(raw_id)
            .map(SensorId)
            .map_err(|_| self.corrupt("sensor id out of range"))?;
        let spec = self
            .catalog
            .get(sensor_id)
            .ok_or_else(|| self.corrupt("unknown sensor id"))?;
        let ts_ms = i64::from_le_bytes(self.take(8)?.try_into().unwrap());
        let mut values = Vec::with_capacity(spec.value_arity as usize);
        for _ in 0..spec.value_arity {
            let value = match spec.value_kind {
                ValueKind::Numeric => Value::Num(f64::from_le_bytes(self.take(8)?.try_into().unwrap())),
                ValueKind::Boolean => match self.take(1)?[0] {
                    0 => Value::Bool(false),
                    1 => Value::Bool(true),
                    _ => return Err(self.corrupt("boolean byte not 0/1")),
                },
                ValueKind::Text => {
                    let len = get_varint(self.buf, &mut self.pos)
                        .ok_or_else(|| self.corrupt("bad text length"))?;
                    let len = usize::try_from(len).map_err(|_| self.corrupt("text too long"))?;
                    let bytes = self.take(len)?;
                    let text = std::str::from_utf8(bytes).map_err(|_| self.corrupt("invalid UTF-8"))?;
                    Value::Text(text.to_owned())
                }
            };
            values.push(value);
        }
        Ok(SensorReading {
            sensor_id,
            ts_ms,
            values,
        })
    }
}

impl Iterator for RecordDecoder<'_> {
    type Item = Result<SensorReading, LogpackError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.buf.len() {
            return None;
        }
        let item = self.decode_one();
        if item.is_err() {
            // stop after the first error; the rest of the buffer is unparseable
            self.pos = self.buf.len();
        }
        Some(item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study::ids;

    #[test]
    fn varint_boundaries() {
        for v in [0u64, 1, 127, 128, 255, 16_383, 16_384, u16::MAX as u64, u64::MAX] {
            let mut buf = Vec::new();
            put_varint(&mut buf, v);
            assert_eq!(buf.len(), varint_len(v));
            let mut pos = 0;
            assert_eq!(get_varint(&buf, &mut pos), Some(v));
            assert_eq!(pos, buf.len());
        }
    }

    #[test]
    fn layout_is_byte_exact() {
        let r = SensorReading::new(ids::SCREEN_STATUS, 0x0102_0304_0506_0708, vec![Value::Bool(true)]);
        let mut buf = Vec::new();
        encode(&r, &mut buf);
        assert_eq!(buf, [11, 8, 7, 6, 5, 4, 3, 2, 1, 1]);
        assert_eq!(encoded_len(&r), buf.len());

        let r = SensorReading::new(ids::NOTIFICATIONS, 1, vec![Value::Text("ab".into())]);
        buf.clear();
        encode(&r, &mut buf);
        assert_eq!(buf, [25, 1, 0, 0, 0, 0, 0, 0, 0, 2, b'a', b'b']);

        let r = SensorReading::new(ids::BATTERY_LEVEL, 2, vec![Value::Num(1.0)]);
        buf.clear();
        encode(&r, &mut buf);
        let mut expected = vec![15, 2, 0, 0, 0, 0, 0, 0, 0];
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn three_axis_record_is_33_bytes() {
        let r = SensorReading::new(ids::ACCELERATION, 5, vec![Value::Num(0.0); 3]);
        assert_eq!(encoded_len(&r), 33);
    }

    #[test]
    fn span_matches_encoded_len() {
        let cat = SensorCatalog::standard();
        let readings = [
            SensorReading::new(ids::ACCELERATION, 7, vec![Value::Num(1.0); 3]),
            SensorReading::new(ids::SCREEN_STATUS, 8, vec![Value::Bool(false)]),
            SensorReading::new(ids::NOTIFICATIONS, 9, vec![Value::Text("héllo".into())]),
        ];
        let mut buf = Vec::new();
        for r in &readings {
            encode(r, &mut buf);
        }
        let mut pos = 0;
        let mut last_start = 0;
        for r in &readings {
            let (id, ts, end) = record_span(&buf, pos, cat).unwrap();
            assert_eq!((id, ts, end - pos), (r.sensor_id, r.ts_ms, encoded_len(r)));
            last_start = pos;
            pos = end;
        }
        assert!(record_span(&buf[..buf.len() - 1], last_start, cat).is_err());
    }

    #[test]
    fn decoder_rejects_bad_boolean() {
        let cat = SensorCatalog::standard();
        let buf = [11u8, 1, 0, 0, 0, 0, 0, 0, 0, 2];
        let out: Vec<_> = RecordDecoder::new(&buf, cat).collect();
        assert!(matches!(out[..], [Err(LogpackError::CorruptPayload(_))]));
    }

    #[test]
    fn decoder_rejects_truncation_and_unknown_ids() {
        let cat = SensorCatalog::standard();
        let out: Vec<_> = RecordDecoder::new(&[1u8, 0, 0], cat).collect();
        assert!(matches!(out[..], [Err(LogpackError::CorruptPayload(_))]));
        let out: Vec<_> = RecordDecoder::new(&[99u8, 0, 0, 0, 0, 0, 0, 0, 0], cat).collect();
        assert!(matches!(out[..], [Err(LogpackError::CorruptPayload(_))]));
    }
}
