//! Synthetic sensor streams.
//!
//! Fixed-rate and polled sensors follow their schedule exactly: reading `i`
//! of a sensor sampled every `p = den / num` seconds lies at
//! `floor(i * 1000 * p)` ms since the epoch, so consecutive ticks never
//! overlap or drop a sample. A divisor of `k` keeps every `k`-th slot,
//! which is how long fleet runs stay affordable. On-change sensors
//! fire a Poisson number of events per interval at uniform times.

use std::collections::BTreeMap;

use ilog_core::logpack::{SensorReading, Value};
use ilog_core::study::{ids, Rate, Sampling, SensorId, SensorSpec, StudyConfig, ValueKind};
use ilog_core::{TsMs, MS_PER_DAY, MS_PER_HOUR};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::SimError;

const APPS: [&str; 8] = [
    "com.whatsapp",
    "com.android.chrome",
    "com.google.android.gm",
    "com.spotify.music",
    "com.instagram.android",
    "com.android.dialer",
    "lu.uni.ilog",
    "com.google.android.apps.maps",
];
const SSIDS: [&str; 4] = ["home", "eduroam", "office", "disconnected"];
const AUDIO_MODES: [&str; 3] = ["normal", "vibrate", "silent"];
const CELL: [&str; 3] = ["LTE", "HSPA", "EDGE"];

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Timestamps of a fixed-rate stream inside `[from, to)`.
pub fn fixed_rate_timestamps(rate: Rate, divisor: u64, from: TsMs, to: TsMs) -> impl Iterator<Item = TsMs> {
    // period in ms is step / num
    let step = 1000 * rate.denom() as i128 * divisor as i128;
    let num = rate.numer() as i128;
    let first = (from as i128 * num).div_euclid(step) + i128::from((from as i128 * num).rem_euclid(step) != 0);
    (first..)
        .map(move |i| (i * step).div_euclid(num) as TsMs)
        .take_while(move |&t| t < to)
}

/// Timestamps of a polled stream inside `[from, to)`.
pub fn polled_timestamps(period_s: u32, divisor: u64, from: TsMs, to: TsMs) -> impl Iterator<Item = TsMs> {
    let step = period_s as i64 * 1000 * divisor as i64;
    let first = from.div_euclid(step) * step + if from.rem_euclid(step) == 0 { 0 } else { step };
    (0..).map(move |i| first + i * step).take_while(move |&t| t < to)
}

#[derive(Debug, Clone, Default)]
struct OnChangeState {
    flag: bool,
    count: u64,
    level: f64,
}

/// Per-device generator for the sensors the device collects.
#[derive(Debug, Clone)]
pub struct SensorSynth {
    specs: Vec<SensorSpec>,
    rate_divisor: u64,
    poll_divisor: u64,
    tz_offset_min: i32,
    events_per_day: BTreeMap<SensorId, f64>,
    state: BTreeMap<SensorId, OnChangeState>,
    position: (f64, f64),
    app: usize,
}

impl SensorSynth {
    /// `rate_divisor` thins fixed-rate sensors, `poll_divisor` polled ones.
    pub fn new(config: &StudyConfig, sensors: &[SensorId], rate_divisor: u64, poll_divisor: u64, tz_offset_min: i32) -> Self {
        let specs: Vec<SensorSpec> = sensors.iter().filter_map(|&id| config.effective_spec(id)).collect();
        let events_per_day = specs
            .iter()
            .filter(|s| s.is_on_change())
            .map(|s| (s.id, config.events_per_day(s.id)))
            .collect();
        Self {
            specs,
            rate_divisor: rate_divisor.max(1),
            poll_divisor: poll_divisor.max(1),
            tz_offset_min,
            events_per_day,
            state: BTreeMap::new(),
            position: (49.6116, 6.1319),
            app: 0,
        }
    }

    pub fn sensors(&self) -> impl Iterator<Item = SensorId> + '_ {
        self.specs.iter().map(|s| s.id)
    }

    /// Readings every sensor produces in `[from, to)`, grouped by sensor.
    pub fn synthesize(&mut self, from: TsMs, to: TsMs, rng: &mut impl Rng) -> Vec<SensorReading> {
        let mut out = Vec::new();
        for i in 0..self.specs.len() {
            let spec = self.specs[i].clone();
            match spec.sampling {
                Sampling::FixedRate(rate) => {
                    for t in fixed_rate_timestamps(rate, self.rate_divisor, from, to) {
                        out.push(SensorReading::new(spec.id, t, self.motion_values(&spec, t, rng)));
                    }
                }
                Sampling::Polled { period_s } => {
                    for t in polled_timestamps(period_s, self.poll_divisor, from, to) {
                        out.push(SensorReading::new(spec.id, t, self.polled_values(&spec, rng)));
                    }
                }
                Sampling::OnChange => {
                    out.extend(self.synthesize_on_change(spec.id, from, to, rng).expect("on-change sensor"));
                }
            }
        }
        out
    }

    /// Events of one on-change sensor in `[from, to)`, in time order.
    pub fn synthesize_on_change(
        &mut self,
        id: SensorId,
        from: TsMs,
        to: TsMs,
        rng: &mut impl Rng,
    ) -> Result<Vec<SensorReading>, SimError> {
        let spec = self
            .specs
            .iter()
            .find(|s| s.id == id && s.is_on_change())
            .cloned()
            .ok_or(SimError::WrongKind(id))?;
        let per_day = self.events_per_day.get(&id).copied().unwrap_or(0.0);
        let mean = per_day * (to - from).max(0) as f64 / MS_PER_DAY as f64;
        if mean <= 0.0 {
            return Ok(Vec::new());
        }
        let n = Poisson::new(mean).expect("positive mean").sample(rng) as usize;
        let mut times: Vec<TsMs> = (0..n).map(|_| rng.random_range(from..to)).collect();
        times.sort_unstable();
        Ok(times
            .into_iter()
            .map(|t| SensorReading::new(id, t, vec![self.event_value(&spec, rng)]))
            .collect())
    }

    fn activity(&self, t: TsMs) -> f64 {
        let local_hour = (t + self.tz_offset_min as i64 * 60_000).rem_euclid(MS_PER_DAY) / MS_PER_HOUR;
        if (7..23).contains(&local_hour) {
            1.0
        } else {
            0.1
        }
    }

    fn motion_values(&self, spec: &SensorSpec, t: TsMs, rng: &mut impl Rng) -> Vec<Value> {
        let (base, swing): ([f64; 3], f64) = match spec.id {
            ids::ACCELERATION => ([0.0, 0.0, 9.81], 1.5),
            ids::LINEAR_ACCELERATION => ([0.0; 3], 1.5),
            ids::GYROSCOPE => ([0.0; 3], 0.8),
            ids::GRAVITY => ([0.0, 0.0, 9.81], 0.3),
            ids::ROTATION_VECTOR => ([0.1, 0.2, 0.7], 0.1),
            ids::MAGNETIC_FIELD => ([20.0, -5.0, -40.0], 3.0),
            ids::ORIENTATION => ([180.0, 0.0, 0.0], 20.0),
            ids::TEMPERATURE => ([21.0; 3], 0.5),
            ids::ATMOSPHERIC_PRESSURE => ([1013.0; 3], 0.8),
            ids::HUMIDITY => ([45.0; 3], 2.0),
            _ => ([0.0; 3], 1.0),
        };
        let amp = swing * self.activity(t);
        let noise = Normal::new(0.0, 0.05 * swing).expect("finite sigma");
        let secs = t as f64 / 1000.0;
        (0..spec.value_arity as usize)
            .map(|axis| {
                let wave = (std::f64::consts::TAU * 0.5 * secs + axis as f64).sin();
                Value::Num(round3(base[axis.min(2)] + amp * wave + noise.sample(rng)))
            })
            .collect()
    }

    fn polled_values(&mut self, spec: &SensorSpec, rng: &mut impl Rng) -> Vec<Value> {
        match spec.id {
            ids::LOCATION => {
                let step = Normal::new(0.0, 1e-4).expect("finite sigma");
                self.position.0 += step.sample(rng);
                self.position.1 += step.sample(rng);
                let r6 = |x: f64| (x * 1e6).round() / 1e6;
                vec![
                    Value::Num(r6(self.position.0)),
                    Value::Num(r6(self.position.1)),
                    Value::Num(rng.random_range(5..30) as f64),
                ]
            }
            ids::RUNNING_APPLICATION => {
                if rng.random_bool(0.1) {
                    self.app = rng.random_range(0..APPS.len());
                }
                vec![Value::Text(APPS[self.app].into())]
            }
            ids::WIFI_AVAILABLE => vec![Value::Num(rng.random_range(0..12) as f64)],
            ids::BLUETOOTH_AVAILABLE => vec![Value::Num(rng.random_range(0..6) as f64)],
            ids::BLUETOOTH_LE_AVAILABLE => vec![Value::Num(rng.random_range(0..10) as f64)],
            _ => self.generic(spec, rng),
        }
    }

    fn generic(&self, spec: &SensorSpec, rng: &mut impl Rng) -> Vec<Value> {
        (0..spec.value_arity)
            .map(|_| match spec.value_kind {
                ValueKind::Numeric => Value::Num(rng.random_range(0..100) as f64),
                ValueKind::Boolean => Value::Bool(rng.random_bool(0.5)),
                ValueKind::Text => Value::Text("unknown".into()),
            })
            .collect()
    }

    fn event_value(&mut self, spec: &SensorSpec, rng: &mut impl Rng) -> Value {
        let st = self.state.entry(spec.id).or_default();
        st.count += 1;
        match spec.id {
            ids::SCREEN_STATUS
            | ids::FLIGHT_MODE
            | ids::BATTERY_CHARGE
            | ids::DOZE_MODALITY
            | ids::HEADSET
            | ids::MUSIC_PLAYBACK => {
                st.flag = !st.flag;
                Value::Bool(st.flag)
            }
            ids::BATTERY_LEVEL => {
                if st.count == 1 {
                    st.level = rng.random_range(60..=100) as f64;
                } else if st.level <= 15.0 {
                    // plugged in and recharged
                    st.level = 100.0;
                } else {
                    st.level -= 1.0;
                }
                Value::Num(st.level)
            }
            ids::PROXIMITY => {
                st.flag = !st.flag;
                Value::Num(if st.flag { 0.0 } else { 5.0 })
            }
            ids::AUDIO_MODE => Value::Text(AUDIO_MODES[(st.count % 3) as usize].into()),
            ids::WIFI_CONNECTED => Value::Text(SSIDS[rng.random_range(0..SSIDS.len())].into()),
            ids::CELLULAR_NETWORK => Value::Text(CELL[rng.random_range(0..CELL.len())].into()),
            ids::NOTIFICATIONS => Value::Text(APPS[rng.random_range(0..APPS.len())].into()),
            ids::INCOMING_CALLS | ids::OUTGOING_CALLS => Value::Num(rng.random_range(5..600) as f64),
            ids::INCOMING_SMS | ids::OUTGOING_SMS => Value::Num(rng.random_range(1..=160) as f64),
            ids::TOUCH_EVENT => Value::Num(1.0),
            _ => self.generic(spec, rng).remove(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ilog_core::study::SensorCatalog;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_rate_ticks_tile_exactly() {
        let rate = Rate::hz(20);
        let all: Vec<_> = fixed_rate_timestamps(rate, 1, 1000, 61_000).collect();
        assert_eq!(all.len(), 1200);
        assert_eq!(all[0], 1000);
        assert_eq!(all[1], 1050);
        let split: Vec<_> = fixed_rate_timestamps(rate, 1, 1000, 30_017)
            .chain(fixed_rate_timestamps(rate, 1, 30_017, 61_000))
            .collect();
        assert_eq!(split, all);
        // a 3 Hz stream has non-integer millisecond periods
        let third = Rate::new(3, 1).unwrap();
        let v: Vec<_> = fixed_rate_timestamps(third, 1, 0, 1000).collect();
        assert_eq!(v, vec![0, 333, 666]);
        assert_eq!(fixed_rate_timestamps(rate, 1200, 0, MS_PER_HOUR).count(), 60);
    }

    #[test]
    fn polled_grid_is_aligned() {
        let v: Vec<_> = polled_timestamps(60, 1, 59_999, 180_001).collect();
        assert_eq!(v, vec![60_000, 120_000, 180_000]);
        assert_eq!(polled_timestamps(5, 1, 0, MS_PER_DAY).count(), 17_280);
        assert_eq!(polled_timestamps(5, 12, 0, MS_PER_DAY).count(), 1440);
    }

    #[test]
    fn readings_validate_against_the_catalog() {
        let config = StudyConfig::hackathon_2019();
        let all: Vec<_> = config.enabled_specs().iter().map(|s| s.id).collect();
        let mut synth = SensorSynth::new(&config, &all, 600, 10, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let readings = synth.synthesize(1_548_633_600_000, 1_548_633_600_000 + MS_PER_DAY, &mut rng);
        for r in &readings {
            r.validate(SensorCatalog::standard()).unwrap();
        }
        assert!(readings.iter().any(|r| r.sensor_id == ids::TOUCH_EVENT));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let config = StudyConfig::hackathon_2019();
        let mut synth = SensorSynth::new(&config, &[ids::ACCELERATION], 1, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            synth.synthesize_on_change(ids::ACCELERATION, 0, MS_PER_DAY, &mut rng),
            Err(SimError::WrongKind(_))
        ));
    }
}
