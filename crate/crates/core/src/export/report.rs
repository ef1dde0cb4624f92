use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::diary::DiaryStore;
use crate::store::{day_of, Store};
use crate::study::{Pseudonym, SensorCatalog, SensorId, StudyConfig};

/// Relative deviation from the expected daily volume above which a device
/// day is flagged.
pub const VOLUME_FLAG_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayStats {
    pub day: NaiveDate,
    pub participants_reporting: u64,
    pub sensor_hours: u64,
    pub diary_entries: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorHours {
    pub sensor_id: SensorId,
    pub sensor: String,
    pub hours: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantStats {
    pub pseudonym: Pseudonym,
    pub reporting_days: u64,
    pub entries: u64,
    /// Entries per day on which the participant reported data.
    pub entries_per_day: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub first_day: NaiveDate,
    pub last_day: NaiveDate,
    pub registered: u64,
    /// Participants with at least one reading anywhere in the span.
    pub participants_with_data: u64,
    pub days: Vec<DayStats>,
    pub sensors: Vec<SensorHours>,
    pub participants: Vec<ParticipantStats>,
    pub total_sensor_hours: u64,
    pub total_entries: u64,
    /// Total entries over the sum of daily reporting participants.
    pub mean_entries_per_reporting_day: f64,
}

/// Figures 4 to 6 of the pilot: who reported, how many sensor hours and how
/// many diary entries, per UTC day of the study span. Diary entries count on
/// the day their episode starts, clamped into the span.
pub fn compliance_report(store: &Store, diary: &DiaryStore, config: &StudyConfig, registered: u64) -> ComplianceReport {
    let (first, last) = (config.start, config.end);
    let days: Vec<NaiveDate> = config.days().collect();
    let index: BTreeMap<NaiveDate, usize> = days.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let mut stats: Vec<DayStats> = days
        .iter()
        .map(|&day| DayStats {
            day,
            participants_reporting: 0,
            sensor_hours: 0,
            diary_entries: 0,
        })
        .collect();
    let mut sensor_hours: BTreeMap<SensorId, u64> = BTreeMap::new();
    let mut per_participant: BTreeMap<Pseudonym, (BTreeSet<NaiveDate>, u64)> = BTreeMap::new();

    for p in store.pseudonyms() {
        for part in store.partitions(p) {
            let Some(&i) = index.get(&part.day) else { continue };
            let hours = part.hour_mask.count_ones() as u64;
            stats[i].sensor_hours += hours;
            *sensor_hours.entry(part.sensor_id).or_default() += hours;
            per_participant.entry(p).or_default().0.insert(part.day);
        }
    }
    for (_, (reporting, _)) in per_participant.iter() {
        for d in reporting {
            stats[index[d]].participants_reporting += 1;
        }
    }
    for (p, a) in diary.all() {
        let day = day_of(a.answer.episode_start).clamp(first, last);
        stats[index[&day]].diary_entries += 1;
        per_participant.entry(p).or_default().1 += 1;
    }

    let participants_with_data = per_participant.values().filter(|(d, _)| !d.is_empty()).count() as u64;
    let participants = per_participant
        .into_iter()
        .map(|(pseudonym, (reporting, entries))| ParticipantStats {
            pseudonym,
            reporting_days: reporting.len() as u64,
            entries,
            entries_per_day: if reporting.is_empty() {
                0.0
            } else {
                entries as f64 / reporting.len() as f64
            },
        })
        .collect();
    let catalog = SensorCatalog::standard();
    let sensors = sensor_hours
        .into_iter()
        .map(|(id, hours)| SensorHours {
            sensor_id: id,
            sensor: catalog.get(id).map_or_else(|| id.to_string(), |s| s.slug()),
            hours,
        })
        .collect();
    let total_entries: u64 = stats.iter().map(|d| d.diary_entries).sum();
    let reporting_days: u64 = stats.iter().map(|d| d.participants_reporting).sum();
    ComplianceReport {
        first_day: first,
        last_day: last,
        registered: registered.max(participants_with_data),
        participants_with_data,
        total_sensor_hours: stats.iter().map(|d| d.sensor_hours).sum(),
        total_entries,
        mean_entries_per_reporting_day: if reporting_days == 0 {
            0.0
        } else {
            total_entries as f64 / reporting_days as f64
        },
        days: stats,
        sensors,
        participants,
    }
}

fn write_series(path: &Path, column: &str, rows: impl Iterator<Item = (String, String)>) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["day", column])?;
    for (a, b) in rows {
        w.write_record([a, b])?;
    }
    w.flush()
}

/// Writes `report.txt`, `report.json` and the per-day series CSVs the
/// supervisor dashboard plots.
pub fn write_compliance(report: &ComplianceReport, out: &Path) -> io::Result<()> {
    fs::create_dir_all(out)?;
    let day_rows = |f: fn(&DayStats) -> u64| report.days.iter().map(move |d| (d.day.to_string(), f(d).to_string()));
    write_series(&out.join("participants_per_day.csv"), "participants_reporting", day_rows(|d| d.participants_reporting))?;
    write_series(&out.join("sensor_hours_per_day.csv"), "sensor_hours", day_rows(|d| d.sensor_hours))?;
    write_series(&out.join("entries_per_day.csv"), "diary_entries", day_rows(|d| d.diary_entries))?;

    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(out.join("sensor_hours.csv"))?;
    w.write_record(["sensor", "hours"])?;
    for s in &report.sensors {
        w.write_record([s.sensor.clone(), s.hours.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(out.join("participants.csv"))?;
    w.write_record(["pseudonym", "reporting_days", "entries", "entries_per_day"])?;
    for p in &report.participants {
        w.write_record([
            p.pseudonym.to_hex(),
            p.reporting_days.to_string(),
            p.entries.to_string(),
            format!("{:.3}", p.entries_per_day),
        ])?;
    }
    w.flush()?;

    fs::write(out.join("report.json"), serde_json::to_vec_pretty(report).expect("report serializes"))?;
    fs::write(out.join("report.txt"), render_text(report))
}

fn render_text(r: &ComplianceReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Study span: {} .. {}", r.first_day, r.last_day);
    let _ = writeln!(s, "Registered participants: {}", r.registered);
    let _ = writeln!(s, "Participants with data: {}", r.participants_with_data);
    let _ = writeln!(s, "Total sensor hours: {}", r.total_sensor_hours);
    let _ = writeln!(s, "Total diary entries: {}", r.total_entries);
    let _ = writeln!(s, "Mean entries per reporting participant-day: {:.2}", r.mean_entries_per_reporting_day);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<12} {:>12} {:>14} {:>14}", "day", "reporting", "sensor_hours", "diary_entries");
    for d in &r.days {
        let _ = writeln!(
            s,
            "{:<12} {:>12} {:>14} {:>14}",
            d.day.to_string(),
            d.participants_reporting,
            d.sensor_hours,
            d.diary_entries
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<28} {:>10}", "sensor", "hours");
    for x in &r.sensors {
        let _ = writeln!(s, "{:<28} {:>10}", x.sensor, x.hours);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub pseudonym: Pseudonym,
    pub day: NaiveDate,
    pub readings: u64,
    /// Uncompressed-equivalent size: readings times the record size.
    pub bytes: u64,
    pub expected_bytes: u64,
    /// Signed relative deviation from `expected_bytes`.
    pub deviation: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub bytes_per_reading: u64,
    pub rows: Vec<VolumeRow>,
}

impl VolumeReport {
    pub fn flagged(&self) -> impl Iterator<Item = &VolumeRow> {
        self.rows.iter().filter(|r| r.flagged)
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        w.write_record(["pseudonym", "day", "readings", "bytes", "expected_bytes", "deviation", "flagged"])?;
        for r in &self.rows {
            w.write_record([
                r.pseudonym.to_hex(),
                r.day.to_string(),
                r.readings.to_string(),
                r.bytes.to_string(),
                r.expected_bytes.to_string(),
                format!("{:.4}", r.deviation),
                r.flagged.to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Per device and UTC day in `[first, last]`: readings by timestamp, their
/// uncompressed size, and whether it strays more than 50% from the device's
/// own expected daily volume (`expected` is evaluated per pseudonym so
/// devices with a reduced sensor set are judged against that set).
pub fn volume_report(
    store: &Store,
    first: NaiveDate,
    last: NaiveDate,
    bytes_per_reading: u64,
    expected: impl Fn(Pseudonym) -> u64,
) -> VolumeReport {
    let mut pseudonyms = store.pseudonyms();
    pseudonyms.sort();
    let mut rows = Vec::new();
    for p in pseudonyms {
        let mut per_day: BTreeMap<NaiveDate, u64> = first.iter_days().take_while(|d| *d <= last).map(|d| (d, 0)).collect();
        for part in store.partitions(p) {
            if let Some(n) = per_day.get_mut(&part.day) {
                *n += part.count;
            }
        }
        let expected_bytes = expected(p);
        for (day, readings) in per_day {
            let bytes = readings * bytes_per_reading;
            let deviation = if expected_bytes == 0 {
                if bytes == 0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (bytes as f64 - expected_bytes as f64) / expected_bytes as f64
            };
            rows.push(VolumeRow {
                pseudonym: p,
                day,
                readings,
                bytes,
                expected_bytes,
                deviation,
                flagged: deviation.abs() > VOLUME_FLAG_THRESHOLD,
            });
        }
    }
    VolumeReport {
        bytes_per_reading,
        rows,
    }
}
