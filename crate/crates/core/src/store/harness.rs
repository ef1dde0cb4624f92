//! Crash-recovery harness: drives a store through random batches, kills it at
//! armed crash points, reopens it and checks that no acknowledged batch was
//! lost and no unacknowledged batch is partially visible.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};

use crate::logpack::{SensorReading, Value};
use crate::study::{ids, Pseudonym, SensorId};
use crate::{TsMs, MS_PER_DAY};

use super::{CrashPoint, Store, StoreError, StoreOptions};

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct CrashReport {
    pub crashes: u32,
    pub acknowledged_batches: u64,
    pub acknowledged_readings: u64,
    /// Acknowledged readings missing after recovery.
    pub lost: u64,
    /// Crashes after which the in-flight batch was only partly visible.
    pub partial: u32,
    /// Crashed batches that became visible in full after recovery.
    pub recovered_in_flight: u32,
    pub per_point: Vec<(CrashPoint, u32)>,
}

const SENSORS: [SensorId; 3] = [ids::ACCELERATION, ids::SCREEN_STATUS, ids::RUNNING_APPLICATION];

fn reading(rng: &mut impl Rng, base: TsMs) -> SensorReading {
    let sensor = *SENSORS.choose(rng).unwrap();
    let ts = base + rng.random_range(0..2 * MS_PER_DAY);
    let values = match sensor {
        ids::ACCELERATION => (0..3).map(|_| Value::Num(rng.random_range(-20.0..20.0))).collect(),
        ids::SCREEN_STATUS => vec![Value::Bool(rng.random())],
        _ => vec![Value::Text(format!("app{}", rng.random_range(0..50)))],
    };
    SensorReading::new(sensor, ts, values)
}

fn sorted_model(model: &[SensorReading], sensor: SensorId) -> Vec<SensorReading> {
    let mut v: Vec<_> = model.iter().filter(|r| r.sensor_id == sensor).cloned().collect();
    v.sort_by_key(|r| r.ts_ms);
    v
}

/// Runs until `crashes` injected crashes have happened. Small checkpoint and
/// compaction thresholds make every crash point reachable.
pub fn run_crash_harness(dir: &Path, crashes: u32, seed: u64) -> Result<CrashReport, StoreError> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let opts = StoreOptions {
        sync: false,
        quota_bytes: None,
        wal_checkpoint_bytes: 16 << 10,
        compact_min_bytes: 4 << 10,
    };
    let p = Pseudonym(rng.random());
    let base: TsMs = 1_548_633_600_000;
    let mut model: Vec<SensorReading> = Vec::new();
    let mut report = CrashReport {
        per_point: CrashPoint::ALL.iter().map(|&c| (c, 0)).collect(),
        ..Default::default()
    };

    let mut store = Store::open_with(dir, opts.clone())?;
    while report.crashes < crashes {
        let idx = report.crashes as usize % CrashPoint::ALL.len();
        let point = CrashPoint::ALL[idx];
        store.arm_crash(point, rng.random_range(0..4));

        let mut in_flight = None;
        for _ in 0..400 {
            let n = rng.random_range(1..40);
            let batch: Vec<_> = (0..n).map(|_| reading(&mut rng, base)).collect();
            match store.write_batch(p, &batch) {
                Ok(_) => {
                    report.acknowledged_batches += 1;
                    report.acknowledged_readings += batch.len() as u64;
                    model.extend(batch);
                }
                Err(StoreError::Crashed) => {
                    in_flight = Some(batch);
                    break;
                }
                Err(e) => return Err(e),
            }
            if rng.random_ratio(1, 25) {
                match store.checkpoint() {
                    Ok(()) => {}
                    Err(StoreError::Crashed) => {
                        in_flight = Some(Vec::new());
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let Some(in_flight) = in_flight else {
            // point not reached in this round; try it again
            store.disarm();
            continue;
        };
        report.crashes += 1;
        report.per_point[idx].1 += 1;
        drop(store);
        store = Store::open_with(dir, opts.clone())?;

        let mut with_batch = model.clone();
        with_batch.extend(in_flight.iter().cloned());
        let mut saw_batch = None;
        for sensor in SENSORS {
            let got = store.query_range(p, sensor, 0, TsMs::MAX)?;
            let without = sorted_model(&model, sensor);
            let with = sorted_model(&with_batch, sensor);
            let has = if got == without && got == with {
                None
            } else if got == without {
                Some(false)
            } else if got == with {
                Some(true)
            } else {
                let missing = without.iter().filter(|r| !got.contains(r)).count() as u64;
                report.lost += missing;
                report.partial += 1;
                continue;
            };
            match (saw_batch, has) {
                (Some(a), Some(b)) if a != b => report.partial += 1,
                (None, Some(b)) => saw_batch = Some(b),
                _ => {}
            }
        }
        if saw_batch == Some(true) {
            report.recovered_in_flight += 1;
            model.extend(in_flight);
        }
    }
    Ok(report)
}
