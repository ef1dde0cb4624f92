//! On-disk framing shared by the write-ahead log, partition logs and the
//! dedupe tag files, plus the compacted segment layout.
//!
//! Frame: `u32 len | u32 crc32(seq..body) | u64 seq | body`, where `len`
//! counts the seq and body bytes. All integers little-endian.
//!
//! Segment: a run of blocks `u32 len | u32 crc32 | records`, each at most
//! 4 KiB unless a single record is larger, then a footer and the trailer
//! `u32 footer_len | u32 crc32(footer) | "ILSG"`.

use std::ops::Range;

use crate::TsMs;

pub const FRAME_OVERHEAD: usize = 16;
pub const BLOCK_TARGET: usize = 4096;
pub const SEG_MAGIC: &[u8; 4] = b"ILSG";
const TRAILER_LEN: usize = 12;

pub fn put_frame(out: &mut Vec<u8>, seq: u64, body: &[u8]) {
    let len = (8 + body.len()) as u32;
    let mut h = crc32fast::Hasher::new();
    h.update(&seq.to_le_bytes());
    h.update(body);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&h.finalize().to_le_bytes());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(body);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRef {
    pub seq: u64,
    /// Offset of the frame's first byte in the file.
    pub offset: u64,
    pub body: Range<usize>,
}

/// Parses consecutive frames. Stops at the first short or corrupt frame and
/// reports how many leading bytes are valid.
pub fn scan_frames(buf: &[u8]) -> (Vec<FrameRef>, usize) {
    let mut frames = Vec::new();
    let mut pos = 0usize;
    while buf.len() - pos >= FRAME_OVERHEAD {
        let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(buf[pos + 4..pos + 8].try_into().unwrap());
        if len < 8 || buf.len() - pos - 8 < len {
            break;
        }
        let payload = &buf[pos + 8..pos + 8 + len];
        if crc32fast::hash(payload) != crc {
            break;
        }
        frames.push(FrameRef {
            seq: u64::from_le_bytes(payload[..8].try_into().unwrap()),
            offset: pos as u64,
            body: pos + 16..pos + 8 + len,
        });
        pos += 8 + len;
    }
    (frames, pos)
}

/// Header at the front of every partition-log frame body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunHeader {
    pub count: u32,
    pub min_ts: TsMs,
    pub max_ts: TsMs,
    pub hour_mask: u32,
}

pub const RUN_HEADER_LEN: usize = 24;

impl RunHeader {
    pub fn put(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.min_ts.to_le_bytes());
        out.extend_from_slice(&self.max_ts.to_le_bytes());
        out.extend_from_slice(&self.hour_mask.to_le_bytes());
    }

    pub fn parse(b: &[u8]) -> Option<Self> {
        if b.len() < RUN_HEADER_LEN {
            return None;
        }
        Some(Self {
            count: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            min_ts: i64::from_le_bytes(b[4..12].try_into().unwrap()),
            max_ts: i64::from_le_bytes(b[12..20].try_into().unwrap()),
            hour_mask: u32::from_le_bytes(b[20..24].try_into().unwrap()),
        })
    }
}

/// Sparse index entry for one segment block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMeta {
    pub first_ts: TsMs,
    pub last_ts: TsMs,
    pub offset: u64,
    /// Record bytes, excluding the 8-byte block header.
    pub len: u32,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegFooter {
    pub blocks: Vec<BlockMeta>,
    pub count: u64,
    pub hour_mask: u32,
    pub compacted_seq: u64,
}

impl SegFooter {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.blocks.len() * 32);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&b.first_ts.to_le_bytes());
            out.extend_from_slice(&b.last_ts.to_le_bytes());
            out.extend_from_slice(&b.offset.to_le_bytes());
            out.extend_from_slice(&b.len.to_le_bytes());
            out.extend_from_slice(&b.count.to_le_bytes());
        }
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.hour_mask.to_le_bytes());
        out.extend_from_slice(&self.compacted_seq.to_le_bytes());
        out
    }

    fn decode(b: &[u8]) -> Option<Self> {
        let n = u32::from_le_bytes(b.get(0..4)?.try_into().ok()?) as usize;
        if b.len() != 4 + n * 32 + 20 {
            return None;
        }
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let e = &b[4 + i * 32..4 + (i + 1) * 32];
            blocks.push(BlockMeta {
                first_ts: i64::from_le_bytes(e[0..8].try_into().unwrap()),
                last_ts: i64::from_le_bytes(e[8..16].try_into().unwrap()),
                offset: u64::from_le_bytes(e[16..24].try_into().unwrap()),
                len: u32::from_le_bytes(e[24..28].try_into().unwrap()),
                count: u32::from_le_bytes(e[28..32].try_into().unwrap()),
            });
        }
        let t = &b[4 + n * 32..];
        Some(Self {
            blocks,
            count: u64::from_le_bytes(t[0..8].try_into().unwrap()),
            hour_mask: u32::from_le_bytes(t[8..12].try_into().unwrap()),
            compacted_seq: u64::from_le_bytes(t[12..20].try_into().unwrap()),
        })
    }
}

/// Builds a segment file image from records already in final order.
pub struct SegWriter {
    out: Vec<u8>,
    block: Vec<u8>,
    meta: Option<BlockMeta>,
    footer: SegFooter,
}

impl SegWriter {
    pub fn new(compacted_seq: u64) -> Self {
        Self {
            out: Vec::new(),
            block: Vec::with_capacity(BLOCK_TARGET),
            meta: None,
            footer: SegFooter {
                blocks: Vec::new(),
                count: 0,
                hour_mask: 0,
                compacted_seq,
            },
        }
    }

    pub fn push(&mut self, ts: TsMs, hour_bit: u32, record: &[u8]) {
        if !self.block.is_empty() && self.block.len() + record.len() > BLOCK_TARGET {
            self.flush_block();
        }
        let meta = self.meta.get_or_insert(BlockMeta {
            first_ts: ts,
            last_ts: ts,
            offset: 0,
            len: 0,
            count: 0,
        });
        meta.last_ts = ts;
        meta.count += 1;
        self.block.extend_from_slice(record);
        self.footer.count += 1;
        self.footer.hour_mask |= hour_bit;
    }

    fn flush_block(&mut self) {
        let Some(mut meta) = self.meta.take() else { return };
        meta.offset = self.out.len() as u64;
        meta.len = self.block.len() as u32;
        self.out.extend_from_slice(&meta.len.to_le_bytes());
        self.out.extend_from_slice(&crc32fast::hash(&self.block).to_le_bytes());
        self.out.extend_from_slice(&self.block);
        self.block.clear();
        self.footer.blocks.push(meta);
    }

    pub fn finish(mut self) -> (Vec<u8>, SegFooter) {
        self.flush_block();
        let footer = self.footer.encode();
        self.out.extend_from_slice(&footer);
        self.out.extend_from_slice(&(footer.len() as u32).to_le_bytes());
        self.out.extend_from_slice(&crc32fast::hash(&footer).to_le_bytes());
        self.out.extend_from_slice(SEG_MAGIC);
        (self.out, self.footer)
    }
}

/// Reads the footer from the tail of a segment file image.
pub fn parse_seg_footer(file: &[u8]) -> Result<SegFooter, String> {
    if file.len() < TRAILER_LEN || &file[file.len() - 4..] != SEG_MAGIC {
        return Err("missing segment trailer".into());
    }
    let t = file.len() - TRAILER_LEN;
    let flen = u32::from_le_bytes(file[t..t + 4].try_into().unwrap()) as usize;
    let fcrc = u32::from_le_bytes(file[t + 4..t + 8].try_into().unwrap());
    let fstart = t.checked_sub(flen).ok_or("footer length exceeds file")?;
    let fbytes = &file[fstart..t];
    if crc32fast::hash(fbytes) != fcrc {
        return Err("footer checksum mismatch".into());
    }
    let footer = SegFooter::decode(fbytes).ok_or("malformed footer")?;
    for b in &footer.blocks {
        if b.offset + 8 + b.len as u64 > fstart as u64 {
            return Err(format!("block at {} overruns the footer", b.offset));
        }
    }
    Ok(footer)
}

/// Returns the record bytes of a block after checking its checksum.
pub fn block_records<'a>(file: &'a [u8], meta: &BlockMeta) -> Result<&'a [u8], String> {
    let o = meta.offset as usize;
    let hdr = file.get(o..o + 8).ok_or("block header out of range")?;
    let len = u32::from_le_bytes(hdr[0..4].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(hdr[4..8].try_into().unwrap());
    if len != meta.len as usize {
        return Err(format!("block at {o}: length disagrees with index"));
    }
    let recs = file.get(o + 8..o + 8 + len).ok_or("block out of range")?;
    if crc32fast::hash(recs) != crc {
        return Err(format!("block at {o}: checksum mismatch"));
    }
    Ok(recs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip_and_stop_at_torn_tail() {
        let mut buf = Vec::new();
        put_frame(&mut buf, 1, b"hello");
        put_frame(&mut buf, 2, b"");
        let good = buf.len();
        put_frame(&mut buf, 3, b"world");
        buf.truncate(buf.len() - 2);
        let (frames, valid) = scan_frames(&buf);
        assert_eq!(valid, good);
        assert_eq!(frames.len(), 2);
        assert_eq!(&buf[frames[0].body.clone()], b"hello");
        assert_eq!(frames[1].seq, 2);
    }

    #[test]
    fn corrupt_frame_ends_scan() {
        let mut buf = Vec::new();
        put_frame(&mut buf, 1, b"aaaa");
        put_frame(&mut buf, 2, b"bbbb");
        let n = buf.len();
        buf[n - 1] ^= 1;
        let (frames, valid) = scan_frames(&buf);
        assert_eq!(frames.len(), 1);
        assert_eq!(valid, FRAME_OVERHEAD + 4);
    }

    #[test]
    fn segment_blocks_respect_target() {
        let mut w = SegWriter::new(9);
        let rec = [7u8; 33];
        for ts in 0..1000 {
            w.push(ts, 1, &rec);
        }
        let (file, footer) = w.finish();
        assert_eq!(parse_seg_footer(&file).unwrap(), footer);
        assert_eq!(footer.count, 1000);
        assert_eq!(footer.compacted_seq, 9);
        let per_block = BLOCK_TARGET / 33;
        assert_eq!(footer.blocks.len(), 1000usize.div_ceil(per_block));
        for b in &footer.blocks {
            assert!(b.len as usize <= BLOCK_TARGET);
            assert_eq!(block_records(&file, b).unwrap().len(), b.len as usize);
        }
    }

    #[test]
    fn damaged_segment_detected() {
        let mut w = SegWriter::new(0);
        w.push(1, 1, &[1, 2, 3]);
        let (mut file, footer) = w.finish();
        file[9] ^= 0xff;
        assert!(block_records(&file, &footer.blocks[0]).is_err());
        let n = file.len();
        file[n - 13] ^= 0xff;
        assert!(parse_seg_footer(&file).is_err());
    }
}
