use std::sync::Arc;

use ilog_core::ingest::{
    AnswerStatus, Backend, BackendOptions, IngestApi, IngestError, RegisterRequest, SubmittedAnswer, UploadStatus,
};
use ilog_core::logpack::{seal_readings, SensorReading, Value};
use ilog_core::scheduler::{AnswerItem, DiaryAnswer};
use ilog_core::study::{ids, CodebookId, StudyConfig};
use ilog_core::{TsMs, MS_PER_DAY, MS_PER_HOUR};
use ilog_server::{spawn, HttpClient, RunningServer, ServerOptions, NOW_HEADER};
use ilog_sim::calibration::{hackathon_fleet, DEFAULT_SEED};
use ilog_sim::{run_fleet, SimOptions};

const DAY0: TsMs = 1_548_633_600_000;
const SUP: &str = "supervisor-secret";

struct Fixture {
    _dir: tempfile::TempDir,
    backend: Arc<Backend>,
    server: RunningServer,
}

fn fixture(config: StudyConfig, trust_clock: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let backend = Arc::new(Backend::open(config, BackendOptions::new(dir.path(), [5; 32], SUP).unsynced()).unwrap());
    let server = spawn(
        backend.clone(),
        ServerOptions {
            trust_client_clock: trust_clock,
        },
        "127.0.0.1:0",
    )
    .unwrap();
    Fixture {
        _dir: dir,
        backend,
        server,
    }
}

fn request(contact: &str) -> RegisterRequest {
    RegisterRequest {
        study_code: "4821".into(),
        background: Default::default(),
        contact: contact.into(),
        tz_offset_min: 0,
    }
}

fn screen_chunk(p: ilog_core::study::Pseudonym, key: &ilog_core::study::DeviceKey, n: i64) -> Vec<u8> {
    let readings = (0..n)
        .map(|i| SensorReading::new(ids::SCREEN_STATUS, DAY0 + i * 60_000, vec![Value::Bool(i % 2 == 0)]))
        .collect();
    seal_readings(p, readings, key).unwrap().to_bytes()
}

#[test]
fn device_round_trip_over_http() {
    let f = fixture(StudyConfig::hackathon_2019(), true);
    let c = HttpClient::new(&f.server.base_url()).with_sim_clock();
    c.health().unwrap();
    assert!(matches!(
        c.register(&RegisterRequest { study_code: "0000".into(), ..request("a") }, DAY0),
        Err(IngestError::BadStudyCode)
    ));
    let r = c.register(&request("a@example.org"), DAY0 - MS_PER_HOUR).unwrap();
    let chunk = screen_chunk(r.pseudonym, &r.device_key, 30);
    let first = c.upload_chunk(&r.token, &chunk, DAY0 + MS_PER_HOUR).unwrap();
    assert_eq!((first.status, first.readings_stored), (UploadStatus::Stored, 30));
    let again = c.upload_chunk(&r.token, &chunk, DAY0 + MS_PER_HOUR).unwrap();
    assert_eq!((again.status, again.readings_stored), (UploadStatus::Duplicate, 0));
    assert_eq!(f.backend.store().reading_count(r.pseudonym), 30);
    assert!(matches!(c.upload_chunk("forged", &chunk, DAY0), Err(IngestError::AuthFailure)));

    let feed = c.fetch_tasks(&r.token, None, DAY0 + 3 * MS_PER_HOUR + 60_000).unwrap();
    assert_eq!(feed.tasks.len(), 3);
    let t = &feed.tasks[0];
    let answer = SubmittedAnswer {
        answer: DiaryAnswer {
            task_id: t.task_id,
            answers: vec![AnswerItem::code(CodebookId::Activity, 2), AnswerItem::code(CodebookId::Mood, 3)],
            answered_at_start: DAY0 + 3 * MS_PER_HOUR + 61_000,
            answered_at_end: DAY0 + 3 * MS_PER_HOUR + 65_000,
            same_as_previous: false,
        },
        notified_at: None,
    };
    let statuses = c.submit_answers(&r.token, &[answer.clone(), answer], DAY0 + 4 * MS_PER_HOUR).unwrap();
    assert!(matches!(statuses[0], AnswerStatus::Accepted { .. }));
    assert!(matches!(statuses[1], AnswerStatus::Duplicate { .. }));
    let stored = f.backend.diary().answers(r.pseudonym);
    assert_eq!(stored[0].telemetry.reaction_ms, 1000);
}

#[test]
fn errors_carry_status_and_body() {
    let f = fixture(StudyConfig::hackathon_2019(), false);
    let http = reqwest::blocking::Client::new();
    let base = f.server.base_url();

    let resp = http
        .post(format!("{base}/v1/register"))
        .body(r#"{"study_code":"1111","contact":"x"}"#)
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 403);
    let body: serde_json::Value = resp.json().unwrap();
    assert_eq!(body["error"], "bad_study_code");

    let resp = http.post(format!("{base}/v1/register")).body("{not json").send().unwrap();
    assert_eq!(resp.status().as_u16(), 400);

    let resp = http.get(format!("{base}/v1/supervisor/status")).send().unwrap();
    assert_eq!(resp.status().as_u16(), 401);
    let resp = http
        .get(format!("{base}/v1/supervisor/status"))
        .header("Authorization", "wrong")
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 401);

    let resp = http.get(format!("{base}/v1/nothing")).send().unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    let resp = http
        .post(format!("{base}/v1/chunks"))
        .header("Authorization", "bogus")
        .body(vec![0u8; 10])
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 401);
}

#[test]
fn client_clock_is_ignored_unless_trusted() {
    let f = fixture(StudyConfig::hackathon_2019(), false);
    let c = HttpClient::new(&f.server.base_url()).with_sim_clock();
    // the real clock is years past the study, so registration is refused
    assert!(matches!(c.register(&request("late"), DAY0), Err(IngestError::StudyClosed)));
    let http = reqwest::blocking::Client::new();
    let resp = http
        .get(format!("{}/v1/supervisor/status", f.server.base_url()))
        .header("Authorization", SUP)
        .header(NOW_HEADER, "garbage")
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);
}

fn pending(c: &HttpClient, p: ilog_core::study::Pseudonym, now: TsMs) -> usize {
    let status = c.supervisor_status(SUP, now).unwrap();
    status.participants.iter().find(|x| x.pseudonym == p).unwrap().pending_commands.len()
}

#[test]
fn supervisor_can_watch_nudge_and_erase() {
    let f = fixture(StudyConfig::hackathon_2019(), true);
    let c = HttpClient::new(&f.server.base_url()).with_sim_clock();
    let r = c.register(&request("quiet@example.org"), DAY0 - MS_PER_HOUR).unwrap();
    let other = c.register(&request("busy@example.org"), DAY0 - MS_PER_HOUR).unwrap();
    c.upload_chunk(&other.token, &screen_chunk(other.pseudonym, &other.device_key, 5), DAY0 + 20 * MS_PER_HOUR)
        .unwrap();

    let now = DAY0 + 30 * MS_PER_HOUR;
    let status = c.supervisor_status(SUP, now).unwrap();
    assert_eq!(status.participants.len(), 2);
    let row = |p| status.participants.iter().find(|x| x.pseudonym == p).unwrap().clone();
    assert!(row(r.pseudonym).silent);
    assert!(!row(other.pseudonym).silent);

    let cmd = c.trigger_sync(SUP, r.pseudonym, now).unwrap();
    let again = c.trigger_sync(SUP, r.pseudonym, now + 1000).unwrap();
    assert_eq!(cmd, again);
    assert_eq!(pending(&c, r.pseudonym, now), 1);
    let feed = c.fetch_tasks(&r.token, None, now + 60_000).unwrap();
    assert_eq!(feed.commands.len(), 1);
    assert_eq!(pending(&c, r.pseudonym, now), 0);
    assert!(matches!(c.trigger_sync("nope", r.pseudonym, now), Err(IngestError::Unauthorized)));

    // a participant may erase themselves but nobody else
    assert!(matches!(c.erase(&r.token, other.pseudonym, now), Err(IngestError::Unauthorized)));
    let report = c.erase(&r.token, r.pseudonym, now).unwrap();
    assert_eq!(report.readings, 0);
    let report = c.erase(SUP, other.pseudonym, now).unwrap();
    assert_eq!(report.readings, 5);
    assert!(matches!(c.erase(SUP, other.pseudonym, now), Err(IngestError::UnknownParticipant)));
    assert!(matches!(c.trigger_sync(SUP, other.pseudonym, now), Err(IngestError::UnknownParticipant)));
    assert!(c.supervisor_status(SUP, now).unwrap().participants.is_empty());
}

#[test]
fn fleet_over_http_with_duplicate_uploads_stores_once() {
    let mut config = StudyConfig::hackathon_2019();
    config.end = config.start.succ_opt().unwrap();
    let f = fixture(config.clone(), true);
    let c = HttpClient::new(&f.server.base_url()).with_sim_clock();
    let mut fleet = hackathon_fleet(DEFAULT_SEED);
    fleet.profiles.retain(|p| p.active && p.connectivity.windows.is_empty());
    fleet.profiles.truncate(4);
    for p in &mut fleet.profiles {
        p.behavior.absent_days.clear();
        p.behavior.dropout_day = None;
    }
    let opts = SimOptions {
        duplicate_uploads: true,
        ..SimOptions::thinned()
    };
    let run = run_fleet(&config, &fleet, 5, &c, &opts).unwrap();
    let sealed: u64 = run.report.devices.iter().map(|d| d.readings).sum();
    assert_eq!(f.backend.store().total_readings(), sealed);
    assert!(run.report.devices.iter().all(|d| d.chunk_duplicates == d.chunks_stored));
    let report = c.compliance(SUP, DAY0 + 3 * MS_PER_DAY).unwrap();
    assert_eq!(report.total_entries, run.report.entries);
    assert_eq!(report.participants_with_data, 4);

    // nothing a device or the supervisor sees carries contact data
    let status = serde_json::to_string(&c.supervisor_status(SUP, DAY0).unwrap()).unwrap();
    let report = serde_json::to_string(&report).unwrap();
    for body in [status, report] {
        assert!(!body.contains("devices.invalid"));
    }
}
