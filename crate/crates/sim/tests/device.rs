use std::sync::Arc;

use ilog_core::ingest::{Backend, BackendOptions};
use ilog_core::study::{ids, StudyConfig};
use ilog_core::{TsMs, MS_PER_DAY, MS_PER_HOUR};
use ilog_sim::{
    BehaviorModel, ConnectivityModel, DeviceProfile, DeviceSim, FaultModel, LinkKind, LinkWindow, LogNormalSpec,
    SensorSynth, SimOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DAY0: TsMs = 1_548_633_600_000;
const SUP: &str = "sup";
const TICK: i64 = 60_000;

fn one_day_study() -> StudyConfig {
    let mut c = StudyConfig::hackathon_2019();
    c.end = c.start;
    c
}

fn backend(dir: &std::path::Path, config: StudyConfig) -> Backend {
    Backend::open(config, BackendOptions::new(dir, [7; 32], SUP).unsynced()).unwrap()
}

fn profile(id: &str, answer_prob: f64) -> DeviceProfile {
    DeviceProfile {
        id: id.into(),
        seed: None,
        active: true,
        tz_offset_min: 0,
        registers_at: None,
        enabled_sensors: None,
        behavior: BehaviorModel {
            answer_prob,
            reaction_delay: LogNormalSpec {
                median_s: 120.0,
                sigma: 0.5,
            },
            completion_time: LogNormalSpec {
                median_s: 30.0,
                sigma: 0.3,
            },
            dropout_day: None,
            same_as_previous_prob: 0.0,
            absent_days: Vec::new(),
        },
        connectivity: ConnectivityModel::default(),
    }
}

fn device(p: DeviceProfile, config: &StudyConfig, seed: u64, opts: &SimOptions) -> DeviceSim {
    DeviceSim::new(p, Arc::new(config.clone()), seed, opts).unwrap()
}

/// Steps `dev` over `[from, to)`, then finishes at `to` when asked.
fn run(dev: &mut DeviceSim, b: &Backend, from: TsMs, to: TsMs, finish: bool) {
    let mut t = from;
    while t < to {
        dev.step(t, b).unwrap();
        t += TICK;
    }
    if finish {
        dev.finish(to, b).unwrap();
    }
}

#[test]
fn full_rate_acceleration_gives_1200_readings_per_minute() {
    let dir = tempfile::tempdir().unwrap();
    let config = one_day_study();
    let b = backend(dir.path(), config.clone());
    let mut p = profile("a", 0.0);
    p.enabled_sensors = Some(vec!["Acceleration".into()]);
    let mut dev = device(p, &config, 1, &SimOptions::default());
    run(&mut dev, &b, DAY0 - MS_PER_HOUR, DAY0, false);
    for k in 0..3 {
        let out = dev.step(DAY0 + k * TICK, &b).unwrap();
        assert_eq!(out.per_sensor[&ids::ACCELERATION], 1200);
        assert_eq!(out.readings, 1200);
    }
}

#[test]
fn inactive_device_registers_and_does_nothing_else() {
    let dir = tempfile::tempdir().unwrap();
    let config = one_day_study();
    let b = backend(dir.path(), config.clone());
    let mut p = profile("idle", 1.0);
    p.active = false;
    let mut dev = device(p, &config, 1, &SimOptions::thinned());
    let mut t = DAY0 - MS_PER_HOUR;
    while t < DAY0 + MS_PER_DAY {
        let out = dev.step(t, &b).unwrap();
        assert_eq!(out.readings, 0);
        assert!(out.uploads.is_empty() && out.answers.is_empty() && out.fetched.is_none());
        t += TICK;
    }
    assert!(dev.stats().registered);
    assert_eq!(b.registered().len(), 1);
    assert_eq!(b.store().total_readings(), 0);
}

#[test]
fn offline_window_holds_uploads_and_loses_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let config = one_day_study();
    let b = backend(dir.path(), config.clone());
    let mut p = profile("o", 0.0);
    let (w0, w1) = (DAY0 + 10 * MS_PER_HOUR, DAY0 + 14 * MS_PER_HOUR);
    p.connectivity.windows = vec![LinkWindow {
        start: w0,
        end: w1,
        kind: LinkKind::Offline,
    }];
    let mut dev = device(p, &config, 3, &SimOptions::thinned());
    let mut t = DAY0 - MS_PER_HOUR;
    let mut backlog_at_window_end = 0;
    while t < DAY0 + MS_PER_DAY {
        let out = dev.step(t, &b).unwrap();
        if (w0..w1).contains(&t) {
            assert!(out.uploads.is_empty(), "upload at {t} while offline");
            assert!(out.fetched.is_none());
        }
        if t == w1 - TICK {
            backlog_at_window_end = dev.backlog_readings();
        }
        t += TICK;
    }
    // four hours of data waited on the device
    assert!(backlog_at_window_end > 100, "{backlog_at_window_end}");
    dev.finish(t, &b).unwrap();
    let s = dev.stats();
    assert_eq!(dev.backlog_readings(), 0);
    assert_eq!(s.readings_acked, s.readings);
    assert_eq!(b.store().reading_count(dev.pseudonym().unwrap()), s.readings);
    assert!(s.missed_polls >= 15);
}

#[test]
fn no_wifi_defers_uploads_until_the_supervisor_forces_a_sync() {
    let dir = tempfile::tempdir().unwrap();
    let config = one_day_study();
    let b = backend(dir.path(), config.clone());
    let mut p = profile("w", 0.0);
    p.connectivity.windows = vec![LinkWindow {
        start: DAY0,
        end: DAY0 + MS_PER_DAY,
        kind: LinkKind::NoWifi,
    }];
    let mut dev = device(p, &config, 4, &SimOptions::thinned());
    run(&mut dev, &b, DAY0 - MS_PER_HOUR, DAY0 + 3 * MS_PER_HOUR, false);
    let pseudonym = dev.pseudonym().unwrap();
    assert_eq!(b.store().reading_count(pseudonym), 0);
    assert!(dev.stats().fetches > 0, "polls continue over mobile data");

    let issued = DAY0 + 3 * MS_PER_HOUR;
    b.trigger_sync(SUP, pseudonym, issued).unwrap();
    let period = config.sync_period_s as i64 * 1000;
    let mut t = issued;
    let mut uploaded_at = None;
    while t <= issued + period {
        if !dev.step(t, &b).unwrap().uploads.is_empty() {
            uploaded_at = Some(t);
            break;
        }
        t += TICK;
    }
    let at = uploaded_at.expect("an upload within one poll period");
    assert!(at - issued <= period);
    assert_eq!(dev.backlog_readings(), 0);
    assert_eq!(b.store().reading_count(pseudonym), dev.stats().readings);
}

#[test]
fn compliant_device_answers_every_task_of_a_day() {
    let dir = tempfile::tempdir().unwrap();
    let config = one_day_study();
    let b = backend(dir.path(), config.clone());
    let mut dev = device(profile("c", 1.0), &config, 5, &SimOptions::thinned());
    run(&mut dev, &b, DAY0 - MS_PER_HOUR, DAY0 + 2 * MS_PER_DAY, true);
    let p = dev.pseudonym().unwrap();
    assert_eq!(b.diary().count(p), 26);
    assert_eq!(dev.stats().answers_accepted, 26);
    assert_eq!(dev.stats().answers_rejected, 0);
}

#[test]
fn same_as_previous_answers_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let config = one_day_study();
    let b = backend(dir.path(), config.clone());
    let mut p = profile("s", 1.0);
    p.behavior.same_as_previous_prob = 0.5;
    let mut dev = device(p, &config, 6, &SimOptions::thinned());
    run(&mut dev, &b, DAY0 - MS_PER_HOUR, DAY0 + 2 * MS_PER_DAY, true);
    let stored = b.diary().answers(dev.pseudonym().unwrap());
    assert_eq!(stored.len(), 26);
    assert!(stored.iter().any(|a| a.answer.same_as_previous));
    assert!(stored.iter().all(|a| !a.answer.answers.is_empty()));
}

#[test]
fn duplicate_uploads_and_lost_acks_store_each_reading_once() {
    let dir = tempfile::tempdir().unwrap();
    let config = one_day_study();
    let b = backend(dir.path(), config.clone());
    let opts = SimOptions {
        duplicate_uploads: true,
        faults: FaultModel {
            fail_before: 0.2,
            lose_ack: 0.2,
        },
        ..SimOptions::thinned()
    };
    let mut dev = device(profile("d", 0.5), &config, 7, &opts);
    run(&mut dev, &b, DAY0 - MS_PER_HOUR, DAY0 + 2 * MS_PER_DAY, true);
    let s = dev.stats();
    assert!(s.uploads_duplicate >= s.uploads_stored);
    assert!(s.upload_attempts > 2 * s.uploads_stored);
    assert_eq!(b.store().reading_count(dev.pseudonym().unwrap()), s.readings);
}

#[test]
fn same_seed_same_device() {
    let config = one_day_study();
    let stats = |seed| {
        let dir = tempfile::tempdir().unwrap();
        let b = backend(dir.path(), config.clone());
        let mut dev = device(profile("x", 0.6), &config, seed, &SimOptions::thinned());
        run(&mut dev, &b, DAY0 - MS_PER_HOUR, DAY0 + 2 * MS_PER_DAY, true);
        let mut answers: Vec<_> = b
            .diary()
            .answers(dev.pseudonym().unwrap())
            .into_iter()
            .map(|a| (a.answer.task_id, a.answer.answers, a.telemetry.reaction_ms))
            .collect();
        answers.sort_by_key(|a| a.0);
        (dev.stats().clone(), answers)
    };
    assert_eq!(stats(11), stats(11));
    assert_ne!(stats(11), stats(12));
}

#[test]
fn answer_rate_matches_the_profile() {
    let config = StudyConfig::hackathon_2019();
    let dir = tempfile::tempdir().unwrap();
    let b = backend(dir.path(), config.clone());
    let p = 0.5;
    let devices = 5;
    let mut accepted = 0;
    for i in 0..devices {
        let mut dev = device(profile(&format!("r{i}"), p), &config, 100 + i, &SimOptions::thinned());
        run(&mut dev, &b, DAY0 - MS_PER_HOUR, DAY0 + 15 * MS_PER_DAY, true);
        accepted += dev.stats().answers_accepted;
        assert_eq!(dev.stats().answers_rejected, 0);
    }
    let trials = devices as f64 * 14.0 * 26.0;
    let sd = (trials * p * (1.0 - p)).sqrt();
    let mean = trials * p;
    assert!((accepted as f64 - mean).abs() < 4.0 * sd, "{accepted} vs {mean}");
}

/// Smallest k with P(X <= k) >= q for X ~ Poisson(lambda).
fn poisson_quantile(lambda: f64, q: f64) -> u64 {
    let mut pmf = (-lambda).exp();
    let mut cdf = pmf;
    let mut k = 0;
    while cdf < q {
        k += 1;
        pmf *= lambda / k as f64;
        cdf += pmf;
    }
    k
}

#[test]
fn screen_events_fall_in_the_poisson_band() {
    let config = StudyConfig::hackathon_2019();
    let lambda = config.events_per_day(ids::SCREEN_STATUS);
    let (lo, hi) = (poisson_quantile(lambda, 0.005), poisson_quantile(lambda, 0.995));
    let runs = 400;
    let mut inside = 0;
    for seed in 0..runs {
        let mut synth = SensorSynth::new(&config, &[ids::SCREEN_STATUS], 1, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = synth
            .synthesize_on_change(ids::SCREEN_STATUS, DAY0, DAY0 + MS_PER_DAY, &mut rng)
            .unwrap()
            .len() as u64;
        if (lo..=hi).contains(&n) {
            inside += 1;
        }
    }
    // 99% expected inside; allow for sampling noise over 400 runs
    assert!(inside >= runs * 97 / 100, "{inside} of {runs} inside [{lo}, {hi}]");
}

#[test]
fn battery_level_only_rises_when_charging() {
    let config = StudyConfig::hackathon_2019();
    let mut synth = SensorSynth::new(&config, &[ids::BATTERY_LEVEL], 1, 1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let levels: Vec<f64> = synth
        .synthesize_on_change(ids::BATTERY_LEVEL, DAY0, DAY0 + 7 * MS_PER_DAY, &mut rng)
        .unwrap()
        .iter()
        .map(|r| r.values[0].as_f64().unwrap())
        .collect();
    assert!(levels.len() > 300);
    let mut charges = 0;
    for w in levels.windows(2) {
        if w[1] > w[0] {
            assert_eq!(w[1], 100.0);
            charges += 1;
        }
    }
    assert!(charges > 0);
    assert!(levels.iter().all(|l| (15.0..=100.0).contains(l)));
}

#[test]
fn evicted_tasks_are_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let config = one_day_study();
    let b = backend(dir.path(), config.clone());
    let mut p = profile("slow", 1.0);
    // answers take about ten hours; most tasks are evicted first
    p.behavior.reaction_delay = LogNormalSpec {
        median_s: 36_000.0,
        sigma: 0.1,
    };
    let mut dev = device(p, &config, 8, &SimOptions::thinned());
    run(&mut dev, &b, DAY0 - MS_PER_HOUR, DAY0 + 2 * MS_PER_DAY, true);
    let s = dev.stats();
    assert!(s.answers_rejected > 0);
    assert_eq!(s.answers_accepted + s.answers_rejected, s.answers_planned);
    let stored = b.diary().count(dev.pseudonym().unwrap());
    assert_eq!(stored, s.answers_accepted);
}
