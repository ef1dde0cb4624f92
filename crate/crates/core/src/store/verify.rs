use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::logpack::record::record_span;
use crate::study::SensorCatalog;

use super::format::{self, RunHeader};
use super::{day_of, WAL_FILE};

/// Result of an offline consistency check of a store directory.
#[derive(Debug, Default, Clone, Serialize)]
pub struct VerifyReport {
    pub segments: u64,
    pub blocks: u64,
    pub log_frames: u64,
    pub wal_frames: u64,
    pub readings: u64,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Checks every checksum, index entry and record boundary under `root`
/// without modifying anything.
pub fn verify_dir(root: &Path) -> io::Result<VerifyReport> {
    let catalog = SensorCatalog::standard();
    let mut report = VerifyReport::default();

    if let Ok(wal) = fs::read(root.join(WAL_FILE)) {
        let (frames, valid) = format::scan_frames(&wal);
        report.wal_frames = frames.len() as u64;
        if valid < wal.len() {
            report.problems.push(format!("wal.log: {} trailing bytes do not form a frame", wal.len() - valid));
        }
    }

    for p in fs::read_dir(root)? {
        let p = p?;
        if !p.file_type()?.is_dir() {
            continue;
        }
        for s in fs::read_dir(p.path())? {
            let s = s?;
            if !s.file_type()?.is_dir() {
                continue;
            }
            for f in fs::read_dir(s.path())? {
                let path = f?.path();
                let name = path.display().to_string();
                let day = path
                    .file_stem()
                    .and_then(|x| x.to_str())
                    .and_then(|x| chrono::NaiveDate::parse_from_str(x, "%Y-%m-%d").ok());
                match path.extension().and_then(|e| e.to_str()) {
                    Some("seg") => {
                        report.segments += 1;
                        let file = fs::read(&path)?;
                        let footer = match format::parse_seg_footer(&file) {
                            Ok(f) => f,
                            Err(e) => {
                                report.problems.push(format!("{name}: {e}"));
                                continue;
                            }
                        };
                        let mut n = 0u64;
                        let mut prev = i64::MIN;
                        for b in &footer.blocks {
                            report.blocks += 1;
                            let recs = match format::block_records(&file, b) {
                                Ok(r) => r,
                                Err(e) => {
                                    report.problems.push(format!("{name}: {e}"));
                                    continue;
                                }
                            };
                            let mut pos = 0;
                            let mut in_block = 0u32;
                            while pos < recs.len() {
                                match record_span(recs, pos, catalog) {
                                    Ok((_, ts, end)) => {
                                        if ts < prev {
                                            report.problems.push(format!("{name}: records out of order at ts {ts}"));
                                        }
                                        if day.is_some_and(|d| day_of(ts) != d) {
                                            report.problems.push(format!("{name}: ts {ts} outside the partition day"));
                                        }
                                        prev = ts;
                                        in_block += 1;
                                        pos = end;
                                    }
                                    Err(e) => {
                                        report.problems.push(format!("{name}: {e}"));
                                        break;
                                    }
                                }
                            }
                            if in_block != b.count {
                                report.problems.push(format!("{name}: block at {} holds {in_block} records, index says {}", b.offset, b.count));
                            }
                            n += in_block as u64;
                        }
                        if n != footer.count {
                            report.problems.push(format!("{name}: footer count {} but {n} records found", footer.count));
                        }
                        report.readings += n;
                    }
                    Some("log") => {
                        let buf = fs::read(&path)?;
                        let (frames, valid) = format::scan_frames(&buf);
                        if valid < buf.len() {
                            report.problems.push(format!("{name}: {} trailing bytes do not form a frame", buf.len() - valid));
                        }
                        for fr in frames {
                            report.log_frames += 1;
                            let body = &buf[fr.body];
                            let Some(run) = RunHeader::parse(body) else {
                                report.problems.push(format!("{name}: short run header"));
                                continue;
                            };
                            let recs = &body[format::RUN_HEADER_LEN..];
                            let mut pos = 0;
                            let mut n = 0u32;
                            while pos < recs.len() {
                                match record_span(recs, pos, catalog) {
                                    Ok((_, _, end)) => {
                                        n += 1;
                                        pos = end;
                                    }
                                    Err(e) => {
                                        report.problems.push(format!("{name}: {e}"));
                                        break;
                                    }
                                }
                            }
                            if n != run.count {
                                report.problems.push(format!("{name}: frame {} holds {n} records, header says {}", fr.seq, run.count));
                            }
                            report.readings += n as u64;
                        }
                    }
                    Some("tmp") => report.problems.push(format!("{name}: leftover temporary file")),
                    _ => {}
                }
            }
        }
    }
    Ok(report)
}
