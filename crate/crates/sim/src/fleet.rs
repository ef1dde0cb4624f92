//! Running a whole fleet against one backend.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use ilog_core::ingest::IngestApi;
use ilog_core::scheduler::local_midnight_ms;
use ilog_core::study::{Pseudonym, StudyConfig};
use ilog_core::{TsMs, MS_PER_DAY, MS_PER_HOUR};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::device::{DeviceSim, FaultModel};
use crate::profile::{DeviceProfile, Fleet};
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Tick length; must divide an hour.
    pub tick_ms: i64,
    /// Keep every n-th sample of fixed-rate sensors.
    pub rate_divisor: u64,
    /// Keep every n-th sample of polled sensors.
    pub poll_divisor: u64,
    /// Send every chunk twice.
    pub duplicate_uploads: bool,
    pub faults: FaultModel,
    /// Simulated seconds per wall-clock second; unpaced when absent.
    pub pace: Option<f64>,
    /// Attempts per request before the backend counts as unavailable.
    pub retry_budget: u32,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            tick_ms: 60_000,
            rate_divisor: 1,
            poll_divisor: 1,
            duplicate_uploads: false,
            faults: FaultModel::default(),
            pace: None,
            retry_budget: 8,
        }
    }
}

impl SimOptions {
    /// Thinned sampling for long fleet runs: one reading per sensor and hour
    /// for fixed-rate sensors, polled sensors at a sixtieth of their rate.
    pub fn thinned() -> Self {
        Self {
            rate_divisor: 72_000,
            poll_divisor: 60,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Options(m.into()));
        if self.tick_ms <= 0 || MS_PER_HOUR % self.tick_ms != 0 {
            return bad("tick_ms must divide an hour");
        }
        if self.rate_divisor == 0 || self.poll_divisor == 0 {
            return bad("divisors must be positive");
        }
        if self.retry_budget == 0 {
            return bad("retry_budget must be positive");
        }
        if self.pace.is_some_and(|p| !(p > 0.0 && p.is_finite())) {
            return bad("pace must be positive");
        }
        for p in [self.faults.fail_before, self.faults.lose_ack] {
            if !(0.0..1.0).contains(&p) {
                return bad("fault probabilities must be within [0, 1)");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetDay {
    pub day: NaiveDate,
    pub participants_reporting: u64,
    pub sensor_hours: u64,
    pub diary_entries: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub id: String,
    pub active: bool,
    pub registered: bool,
    pub readings: u64,
    pub readings_acked: u64,
    pub chunks_stored: u64,
    pub chunk_duplicates: u64,
    pub tasks_seen: u64,
    pub answers_planned: u64,
    pub answers_accepted: u64,
    pub answers_rejected: u64,
    pub reporting_days: u64,
}

/// What the devices themselves observed. Holds no pseudonyms, so two runs
/// with the same fleet and seed give identical reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetReport {
    pub master_seed: u64,
    pub registered: u64,
    pub participants_with_data: u64,
    pub readings: u64,
    pub entries: u64,
    pub days: Vec<FleetDay>,
    pub devices: Vec<DeviceSummary>,
}

#[derive(Debug, Clone)]
pub struct FleetRun {
    pub report: FleetReport,
    /// Profile id to the pseudonym the backend assigned.
    pub pseudonyms: BTreeMap<String, Pseudonym>,
    pub wall_time: Duration,
}

/// Seed of one device: the profile's own, or one derived from the master
/// seed and the profile id.
pub fn device_seed(master_seed: u64, profile: &DeviceProfile) -> u64 {
    profile.seed.unwrap_or_else(|| {
        let mut h = Sha256::new();
        h.update(master_seed.to_be_bytes());
        h.update(profile.id.as_bytes());
        u64::from_be_bytes(h.finalize()[..8].try_into().unwrap())
    })
}

/// Last simulated instant: one day after the study's final UTC day.
pub fn run_end(config: &StudyConfig) -> TsMs {
    local_midnight_ms(config.end, 0) + 2 * MS_PER_DAY
}

fn run_device(mut dev: DeviceSim, api: &dyn IngestApi, end: TsMs, opts: &SimOptions) -> Result<DeviceSim, SimError> {
    let tick = opts.tick_ms;
    let mut t = dev.registers_at().div_euclid(tick) * tick;
    let started = Instant::now();
    let t0 = t;
    while t < end {
        dev.step(t, api)?;
        if !dev.profile().active && dev.stats().registered {
            return Ok(dev);
        }
        t += tick;
        if let Some(pace) = opts.pace {
            let due = Duration::from_secs_f64((t - t0) as f64 / 1000.0 / pace);
            if let Some(wait) = due.checked_sub(started.elapsed()) {
                std::thread::sleep(wait);
            }
        }
    }
    dev.finish(end, api)?;
    Ok(dev)
}

/// Runs every profile of `fleet` from its registration until a day after
/// the study ends. Unpaced runs spread devices over the rayon pool; paced
/// runs give each device its own thread so they advance together.
pub fn run_fleet(
    config: &StudyConfig,
    fleet: &Fleet,
    master_seed: u64,
    api: &dyn IngestApi,
    opts: &SimOptions,
) -> Result<FleetRun, SimError> {
    opts.validate()?;
    fleet.validate()?;
    let started = Instant::now();
    let config = Arc::new(config.clone());
    let end = run_end(&config);
    let devices = fleet
        .profiles
        .iter()
        .map(|p| DeviceSim::new(p.clone(), config.clone(), device_seed(master_seed, p), opts))
        .collect::<Result<Vec<_>, _>>()?;

    let finished: Result<Vec<DeviceSim>, SimError> = if opts.pace.is_some() {
        std::thread::scope(|s| {
            let handles: Vec<_> = devices
                .into_iter()
                .map(|d| s.spawn(move || run_device(d, api, end, opts)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("device thread panicked")).collect()
        })
    } else {
        devices.into_par_iter().map(|d| run_device(d, api, end, opts)).collect()
    };
    let finished = finished?;

    let pseudonyms = finished
        .iter()
        .filter_map(|d| d.pseudonym().map(|p| (d.profile().id.clone(), p)))
        .collect();
    Ok(FleetRun {
        report: summarize(&config, master_seed, &finished),
        pseudonyms,
        wall_time: started.elapsed(),
    })
}

fn summarize(config: &StudyConfig, master_seed: u64, devices: &[DeviceSim]) -> FleetReport {
    let mut days: Vec<FleetDay> = config
        .days()
        .map(|day| FleetDay {
            day,
            participants_reporting: 0,
            sensor_hours: 0,
            diary_entries: 0,
        })
        .collect();
    let mut summaries = Vec::with_capacity(devices.len());
    for d in devices {
        let s = d.stats();
        for (&i, _) in s.readings_per_day.iter() {
            days[i as usize].participants_reporting += 1;
        }
        for (&i, &h) in s.sensor_hours_per_day.iter() {
            days[i as usize].sensor_hours += h;
        }
        for (&i, &n) in s.entries_per_day.iter() {
            days[i as usize].diary_entries += n;
        }
        summaries.push(DeviceSummary {
            id: d.profile().id.clone(),
            active: d.profile().active,
            registered: s.registered,
            readings: s.readings,
            readings_acked: s.readings_acked,
            chunks_stored: s.uploads_stored,
            chunk_duplicates: s.uploads_duplicate,
            tasks_seen: s.tasks_seen,
            answers_planned: s.answers_planned,
            answers_accepted: s.answers_accepted,
            answers_rejected: s.answers_rejected,
            reporting_days: s.readings_per_day.len() as u64,
        });
    }
    FleetReport {
        master_seed,
        registered: summaries.iter().filter(|s| s.registered).count() as u64,
        participants_with_data: summaries.iter().filter(|s| s.reporting_days > 0).count() as u64,
        readings: summaries.iter().map(|s| s.readings).sum(),
        entries: summaries.iter().map(|s| s.answers_accepted).sum(),
        days,
        devices: summaries,
    }
}
