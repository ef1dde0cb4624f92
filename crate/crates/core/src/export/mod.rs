//! Batch exports to delimited files and the compliance and volume reports.

mod report;
mod tables;

pub use report::{
    compliance_report, volume_report, write_compliance, ComplianceReport, DayStats, ParticipantStats, SensorHours,
    VolumeReport, VolumeRow, VOLUME_FLAG_THRESHOLD,
};
pub use tables::{export_tables, ExportManifest, TableEntry, ANSWERS_TABLE, TELEMETRY_TABLE};
