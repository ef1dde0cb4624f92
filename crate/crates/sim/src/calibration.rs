//! The calibration fleet: 95 registered participants in the two-week
//! hackathon pilot, 66 of whom ever produced data.
//!
//! The daily reporting curve is set explicitly through each profile's
//! absent days and dropout day, so the fleet reproduces the observed
//! participation by construction. What a run checks is that registration,
//! collection, upload, storage and reporting carry that curve through
//! intact, and that the diary behaviour lands the entry totals.

use chrono::{NaiveDate, NaiveTime};
use ilog_core::study::StudyConfig;
use ilog_core::{TsMs, MS_PER_HOUR};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::profile::{BehaviorModel, ConnectivityModel, DeviceProfile, Fleet, FleetMeta, LinkKind, LinkWindow, LogNormalSpec};

pub const REGISTERED: usize = 95;
pub const WITH_DATA: usize = 66;
pub const DROPOUTS: usize = 11;
/// Participants reporting data on each study day.
pub const REPORTING_CURVE: [u32; 14] = [51, 47, 45, 43, 42, 41, 41, 40, 40, 40, 40, 40, 40, 40];
pub const TARGET_ENTRIES: u64 = 8548;
pub const DEFAULT_SEED: u64 = 2019;
pub const TZ_OFFSET_MIN: i32 = 60;

const ABSENT_ATTEMPTS: usize = 1000;

/// Diary tasks whose episode falls on each study day for a participant at
/// `TZ_OFFSET_MIN`; day counts follow the UTC day of the episode start.
fn tasks_per_day(config: &StudyConfig) -> Vec<f64> {
    let n = config.span_days() as usize;
    let start = ilog_core::scheduler::local_midnight_ms(config.start, 0);
    let mut out = vec![0.0; n];
    for t in ilog_core::scheduler::generate_timeline(config, TZ_OFFSET_MIN) {
        let d = (t.episode_start - start).div_euclid(ilog_core::MS_PER_DAY).clamp(0, n as i64 - 1);
        out[d as usize] += 1.0;
    }
    out
}

fn utc(day: NaiveDate, hour: u32) -> TsMs {
    day.and_time(NaiveTime::from_hms_opt(hour, 0, 0).unwrap()).and_utc().timestamp_millis()
}

/// Builds the calibration fleet for the hackathon preset.
pub fn hackathon_fleet(seed: u64) -> Fleet {
    let config = StudyConfig::hackathon_2019();
    let span = config.span_days() as usize;
    assert_eq!(span, REPORTING_CURVE.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..REGISTERED).collect();
    order.shuffle(&mut rng);
    let active: Vec<usize> = order[..WITH_DATA].to_vec();
    let mut dropout = vec![None; REGISTERED];
    for &i in &active[..DROPOUTS] {
        dropout[i] = Some(rng.random_range(3..=13u32));
    }

    // absent days: on day d, choose A_d - R_d of the A_d participants still in
    let absent = (0..ABSENT_ATTEMPTS)
        .find_map(|_| {
            let mut absent: Vec<Vec<u32>> = vec![Vec::new(); REGISTERED];
            for (d, &target) in REPORTING_CURVE.iter().enumerate() {
                let eligible: Vec<usize> = active
                    .iter()
                    .copied()
                    .filter(|&i| dropout[i].is_none_or(|x| d < x as usize))
                    .collect();
                let k = eligible.len() - target as usize;
                for j in sample(&mut rng, eligible.len(), k) {
                    absent[eligible[j]].push(d as u32);
                }
            }
            let everyone_reports = active.iter().all(|&i| {
                let last = dropout[i].map_or(span, |x| x as usize);
                absent[i].len() < last
            });
            everyone_reports.then_some(absent)
        })
        .expect("a feasible absence pattern");

    let tasks = tasks_per_day(&config);
    let raw: Vec<f64> = (0..REGISTERED).map(|_| rng.random_range(0.40..0.72)).collect();
    let expected_tasks = |i: usize| -> f64 {
        (0..span)
            .filter(|&d| dropout[i].is_none_or(|x| d < x as usize) && !absent[i].contains(&(d as u32)))
            .map(|d| tasks[d])
            .sum()
    };
    let raw_entries: f64 = active.iter().map(|&i| raw[i] * expected_tasks(i)).sum();
    let scale = TARGET_ENTRIES as f64 / raw_entries;

    let all_sensors: Vec<String> = config.enabled_specs().iter().map(|s| s.name.clone()).collect();
    let mut profiles = Vec::with_capacity(REGISTERED);
    let mut rest: Vec<usize> = active[DROPOUTS..].to_vec();
    rest.shuffle(&mut rng);
    let offline: Vec<usize> = rest[..8].to_vec();
    let no_wifi: Vec<usize> = rest[8..13].to_vec();
    let reduced: Vec<usize> = rest[13..23].to_vec();

    for i in 0..REGISTERED {
        let is_active = active.contains(&i);
        let reaction_median = rng.random_range(300.0..700.0f64).round();
        let completion_median = rng.random_range(30.0..60.0f64).round();
        let mut windows = Vec::new();
        if offline.contains(&i) {
            let day = config.start + chrono::Days::new(rng.random_range(1..12));
            windows.push(LinkWindow {
                start: utc(day, 21),
                end: utc(day, 21) + 9 * MS_PER_HOUR,
                kind: LinkKind::Offline,
            });
        }
        if no_wifi.contains(&i) {
            let day = config.start + chrono::Days::new(rng.random_range(1..11));
            windows.push(LinkWindow {
                start: utc(day, 6),
                end: utc(day, 6) + 54 * MS_PER_HOUR,
                kind: LinkKind::NoWifi,
            });
        }
        let enabled_sensors = reduced.contains(&i).then(|| {
            all_sensors
                .iter()
                .filter(|n| !matches!(n.as_str(), "Temperature" | "Humidity"))
                .cloned()
                .collect()
        });
        profiles.push(DeviceProfile {
            id: format!("p{:02}", i + 1),
            seed: None,
            active: is_active,
            tz_offset_min: TZ_OFFSET_MIN,
            registers_at: None,
            enabled_sensors,
            behavior: BehaviorModel {
                answer_prob: ((raw[i] * scale).min(1.0) * 1e4).round() / 1e4,
                reaction_delay: LogNormalSpec {
                    median_s: reaction_median,
                    sigma: 0.9,
                },
                completion_time: LogNormalSpec {
                    median_s: completion_median,
                    sigma: 0.5,
                },
                dropout_day: dropout[i],
                same_as_previous_prob: 0.15,
                absent_days: if is_active { absent[i].clone() } else { Vec::new() },
            },
            connectivity: ConnectivityModel {
                windows,
                sync_period_s: None,
            },
        });
    }
    Fleet {
        fleet: FleetMeta {
            name: "hackathon2019".into(),
        },
        profiles,
    }
}

/// The fleet file as shipped, with a header saying where it comes from.
pub fn render(fleet: &Fleet) -> String {
    format!(
        "# Calibration fleet for the hackathon2019 preset.\n# Generated by `cargo run -p ilog-sim --example write_fleet`; edit the generator, not this file.\n\n{}",
        fleet.to_toml()
    )
}

/// Number of active participants present on each study day.
pub fn planned_reporting(fleet: &Fleet, span_days: u32) -> Vec<u32> {
    (0..span_days)
        .map(|d| {
            fleet
                .profiles
                .iter()
                .filter(|p| p.active && p.behavior.present_on(d))
                .count() as u32
        })
        .collect()
}
