use std::path::Path;

use chrono::NaiveDate;
use ilog_core::diary::DiaryStore;
use ilog_core::export::{compliance_report, export_tables, volume_report, write_compliance, ANSWERS_TABLE, TELEMETRY_TABLE};
use ilog_core::ingest::{Backend, BackendOptions, IngestApi, RegisterRequest, SubmittedAnswer};
use ilog_core::logpack::{seal_readings, SensorReading, Value};
use ilog_core::scheduler::{AnswerItem, DiaryAnswer, TaskKind};
use ilog_core::store::{day_of, Store, StoreOptions};
use ilog_core::study::{expected_daily_volume, ids, CodebookId, Pseudonym, StudyConfig};
use ilog_core::{TsMs, MS_PER_DAY, MS_PER_HOUR};

const DAY0: TsMs = 1_548_633_600_000;
const SUP: &str = "sup";

fn fast_store(dir: &Path) -> Store {
    Store::open_with(
        dir,
        StoreOptions {
            sync: false,
            ..StoreOptions::default()
        },
    )
    .unwrap()
}

fn write_accel_day(store: &Store, p: Pseudonym, day0: TsMs, step_ms: i64) -> u64 {
    let mut batch = Vec::with_capacity(50_000);
    let mut n = 0;
    let mut t = day0;
    while t < day0 + MS_PER_DAY {
        batch.push(SensorReading::new(
            ids::ACCELERATION,
            t,
            vec![Value::Num((t % 1000) as f64 / 8.0), Value::Num(-0.25), Value::Num(9.81)],
        ));
        if batch.len() == 50_000 {
            store.write_batch(p, &batch).unwrap();
            batch.clear();
        }
        n += 1;
        t += step_ms;
    }
    store.write_batch(p, &batch).unwrap();
    n
}

fn csv_rows(path: &Path) -> u64 {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().count() as u64 - 1
}

#[test]
fn full_rate_day_exports_every_row_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let store = fast_store(&dir.path().join("store"));
    let diary = DiaryStore::open(dir.path().join("diary"), false).unwrap();
    let p = Pseudonym::random();
    let n = write_accel_day(&store, p, DAY0, 50);
    assert_eq!(n, 1_728_000);
    let screen: Vec<_> = (0..40)
        .map(|i| SensorReading::new(ids::SCREEN_STATUS, DAY0 + i * 997_000, vec![Value::Bool(i % 2 == 0)]))
        .collect();
    store.write_batch(p, &screen).unwrap();

    let out1 = dir.path().join("e1");
    let out2 = dir.path().join("e2");
    let m1 = export_tables(&store, &diary, DAY0, DAY0 + MS_PER_DAY, &out1, 1).unwrap();
    let m2 = export_tables(&store, &diary, DAY0, DAY0 + MS_PER_DAY, &out2, 2).unwrap();
    let accel = m1.table("acceleration").unwrap();
    assert_eq!(accel.row_count, 1_728_000);
    assert_eq!(csv_rows(&out1.join(&accel.file)), 1_728_000);
    assert_eq!(m1.table("screen_status").unwrap().row_count, 40);
    assert_eq!(m1.export_id, m2.export_id);
    for t in &m1.tables {
        let a = std::fs::read(out1.join(&t.file)).unwrap();
        let b = std::fs::read(out2.join(&t.file)).unwrap();
        assert!(a == b, "{} differs between runs", t.file);
    }

    // row conservation over a partial range
    let (t0, t1) = (DAY0 + 5 * MS_PER_HOUR + 17, DAY0 + 9 * MS_PER_HOUR);
    let m = export_tables(&store, &diary, t0, t1, &dir.path().join("e3"), 3).unwrap();
    let expect = store.scan_range(p, ids::ACCELERATION, t0, t1, |_| {}).unwrap();
    assert_eq!(m.table("acceleration").unwrap().row_count, expect);

    let header = std::fs::read_to_string(out1.join("acceleration.csv")).unwrap();
    let first_two: Vec<_> = header.lines().take(2).collect();
    assert_eq!(first_two[0], "pseudonym:str,ts_ms:i64,value_1:f64,value_2:f64,value_3:f64");
    assert!(first_two[1].starts_with(&format!("{},{}", p.to_hex(), DAY0)));
}

#[test]
fn empty_range_and_erased_store_give_empty_tables() {
    let dir = tempfile::tempdir().unwrap();
    let store = fast_store(&dir.path().join("store"));
    let diary = DiaryStore::open(dir.path().join("diary"), false).unwrap();
    let m = export_tables(&store, &diary, DAY0, DAY0, &dir.path().join("a"), 0).unwrap();
    assert!(m.tables.iter().all(|t| t.row_count == 0));
    assert!(m.table("acceleration").is_none());

    let p = Pseudonym::random();
    write_accel_day(&store, p, DAY0, 60_000);
    store.erase(p).unwrap();
    let m = export_tables(&store, &diary, 0, TsMs::MAX, &dir.path().join("b"), 0).unwrap();
    assert_eq!(m.tables.len(), 2);
    assert!(m.tables.iter().all(|t| t.row_count == 0));
}

fn one_day_study() -> StudyConfig {
    let mut c = StudyConfig::hackathon_2019();
    c.end = c.start;
    c
}

fn compliant_day(b: &Backend, contact: &str) -> Pseudonym {
    let req = RegisterRequest {
        study_code: b.config().study_code.clone(),
        background: Default::default(),
        contact: contact.into(),
        tz_offset_min: 0,
    };
    let r = b.register(&req, DAY0 - MS_PER_HOUR).unwrap();
    let readings: Vec<_> = (0..24)
        .map(|h| SensorReading::new(ids::SCREEN_STATUS, DAY0 + h * MS_PER_HOUR + 60_000, vec![Value::Bool(true)]))
        .collect();
    let chunk = seal_readings(r.pseudonym, readings, &r.device_key).unwrap();
    b.upload_chunk(&r.token, &chunk.to_bytes(), DAY0 + MS_PER_DAY).unwrap();
    let mut now = DAY0;
    while now <= DAY0 + MS_PER_DAY {
        let feed = b.fetch_tasks(&r.token, None, now).unwrap();
        let answers: Vec<_> = feed
            .tasks
            .iter()
            .map(|t| {
                let items = match t.kind {
                    TaskKind::MoodPrompt => vec![AnswerItem::code(CodebookId::Mood, 6)],
                    TaskKind::Episode => vec![AnswerItem::code(CodebookId::Activity, 1), AnswerItem::code(CodebookId::Location, 1)],
                };
                SubmittedAnswer {
                    answer: DiaryAnswer {
                        task_id: t.task_id,
                        answers: items,
                        answered_at_start: now + 500,
                        answered_at_end: now + 2500,
                        same_as_previous: false,
                    },
                    notified_at: Some(now),
                }
            })
            .collect();
        let st = b.submit_answers(&r.token, &answers, now + 3000).unwrap();
        assert!(st.iter().all(|s| s.is_ok()), "{st:?}");
        now += 30 * 60_000;
    }
    r.pseudonym
}

#[test]
fn compliant_device_day_gives_twenty_six_entries() {
    let dir = tempfile::tempdir().unwrap();
    let b = Backend::open(one_day_study(), BackendOptions::new(dir.path(), [1; 32], SUP).unsynced()).unwrap();
    let p = compliant_day(&b, "x@example.org");
    let report = compliance_report(b.store(), b.diary(), b.config(), 1);
    assert_eq!(report.days.len(), 1);
    assert_eq!(report.days[0].participants_reporting, 1);
    assert_eq!(report.days[0].diary_entries, 26);
    assert_eq!(report.days[0].sensor_hours, 24);
    assert_eq!(report.total_entries, b.diary().count(p));
    assert_eq!(report.participants[0].entries_per_day, 26.0);

    let out = dir.path().join("report");
    write_compliance(&report, &out).unwrap();
    let series = std::fs::read_to_string(out.join("entries_per_day.csv")).unwrap();
    assert_eq!(series, "day,diary_entries\n2019-01-28,26\n");
    assert!(out.join("report.txt").exists());

    let m = export_tables(b.store(), b.diary(), 0, TsMs::MAX, &dir.path().join("export"), 0).unwrap();
    assert_eq!(m.table(TELEMETRY_TABLE).unwrap().row_count, 26);
    // 24 episodes with two items each, two mood prompts with one
    assert_eq!(m.table(ANSWERS_TABLE).unwrap().row_count, 50);
}

#[test]
fn empty_store_reports_zeros_and_days_add_up() {
    let dir = tempfile::tempdir().unwrap();
    let store = fast_store(&dir.path().join("store"));
    let diary = DiaryStore::open(dir.path().join("diary"), false).unwrap();
    let config = StudyConfig::hackathon_2019();
    let r = compliance_report(&store, &diary, &config, 0);
    assert_eq!(r.days.len(), 14);
    assert!(r.days.iter().all(|d| d.participants_reporting == 0 && d.sensor_hours == 0 && d.diary_entries == 0));
    assert_eq!(r.total_entries, 0);
    assert_eq!(r.mean_entries_per_reporting_day, 0.0);

    let dir = tempfile::tempdir().unwrap();
    let mut two_days = StudyConfig::hackathon_2019();
    two_days.end = NaiveDate::from_ymd_opt(2019, 1, 29).unwrap();
    let b = Backend::open(two_days, BackendOptions::new(dir.path(), [1; 32], SUP).unsynced()).unwrap();
    compliant_day(&b, "a@example.org");
    compliant_day(&b, "b@example.org");
    let r = compliance_report(b.store(), b.diary(), b.config(), 2);
    let summed: u64 = r.days.iter().map(|d| d.diary_entries).sum();
    assert_eq!(summed, b.diary().all().len() as u64);
    assert!(r.days.iter().all(|d| d.participants_reporting <= r.registered));
}

#[test]
fn volume_is_attributed_by_timestamp_and_judged_per_device() {
    let dir = tempfile::tempdir().unwrap();
    let store = fast_store(dir.path());
    let full = Pseudonym::random();
    let sparse = Pseudonym::random();
    write_accel_day(&store, full, DAY0, 50);
    // a device with acceleration disabled that only logs the screen
    let screen: Vec<_> = (0..100)
        .map(|i| SensorReading::new(ids::SCREEN_STATUS, DAY0 + MS_PER_DAY + i * 60_000, vec![Value::Bool(true)]))
        .collect();
    store.write_batch(sparse, &screen).unwrap();

    let accel_only = StudyConfig::hackathon_2019().with_sensors([ids::ACCELERATION]);
    let expected_full = expected_daily_volume(&accel_only, 32);
    assert_eq!(expected_full, 1_728_000 * 32);
    let day1 = day_of(DAY0);
    let day2 = day1.succ_opt().unwrap();
    let report = volume_report(&store, day1, day2, 32, |p| if p == full { expected_full } else { 100 * 32 });

    let row = |p, d| report.rows.iter().find(|r| r.pseudonym == p && r.day == d).unwrap();
    assert_eq!(row(full, day1).bytes, 1_728_000 * 32);
    assert!(!row(full, day1).flagged);
    assert!(row(full, day2).flagged);
    assert_eq!(row(sparse, day1).readings, 0);
    assert_eq!(row(sparse, day2).readings, 100);
    assert!(!row(sparse, day2).flagged);
    assert_eq!(report.rows.len(), 4);
}
