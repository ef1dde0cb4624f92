//! The sensor catalog: every data source a device can log, with its default
//! collection frequency.
//!
//! Sensor ids are stable wire codes. New sensors are appended with the next
//! free id; existing ids are never renumbered.

use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use super::StudyError;

/// Stable catalog code of a sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SensorId(pub u16);

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Hardware,
    Software,
}

/// A positive rational sampling rate in hertz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    num: u64,
    den: u64,
}

impl Rate {
    pub fn new(num: u64, den: u64) -> Result<Self, StudyError> {
        if num == 0 || den == 0 {
            return Err(StudyError::validation("hz", "rate must be a positive rational"));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub const fn hz(hz: u64) -> Self {
        Self { num: hz, den: 1 }
    }

    pub fn numer(&self) -> u64 {
        self.num
    }

    pub fn denom(&self) -> u64 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Parses `"20"`, `"0.5"` or `"1/60"`.
    pub fn parse(text: &str) -> Result<Self, StudyError> {
        let text = text.trim();
        let bad = || StudyError::validation("hz", format!("cannot parse rate {text:?}"));
        if let Some((n, d)) = text.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Self::new(n, d);
        }
        match text.split_once('.') {
            None => Self::new(text.parse().map_err(|_| bad())?, 1),
            Some((int, frac)) => {
                if frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                let den = 10u64.pow(frac.len() as u32);
                let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
                let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
                Self::new(int * den + frac, den)
            }
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    FixedRate(Rate),
    OnChange,
    Polled { period_s: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Numeric,
    Text,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub id: SensorId,
    pub name: String,
    pub kind: SensorKind,
    pub sampling: Sampling,
    pub value_arity: u8,
    pub value_kind: ValueKind,
}

impl SensorSpec {
    pub fn is_on_change(&self) -> bool {
        matches!(self.sampling, Sampling::OnChange)
    }

    /// Lowercase, underscore-separated name used for file and table names.
    pub fn slug(&self) -> String {
        let mut out = String::with_capacity(self.name.len());
        for ch in self.name.chars() {
            if ch.is_ascii_alphanumeric() {
                out.push(ch.to_ascii_lowercase());
            } else if !out.ends_with('_') {
                out.push('_');
            }
        }
        out.trim_matches('_').to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorCatalog {
    entries: Vec<SensorSpec>,
}

impl SensorCatalog {
    /// The shipped catalog: the full list of sensors an i-Log style device can collect.
    pub fn standard() -> &'static SensorCatalog {
        static CATALOG: LazyLock<SensorCatalog> = LazyLock::new(build_standard);
        &CATALOG
    }

    pub fn from_entries(entries: Vec<SensorSpec>) -> Result<Self, StudyError> {
        let mut seen = std::collections::BTreeSet::new();
        for spec in &entries {
            if !seen.insert(spec.id) {
                return Err(StudyError::validation(
                    "sensors",
                    format!("duplicate sensor id {}", spec.id),
                ));
            }
            if spec.value_arity == 0 {
                return Err(StudyError::validation(
                    "sensors",
                    format!("{} has zero value arity", spec.name),
                ));
            }
            match spec.sampling {
                Sampling::Polled { period_s: 0 } => {
                    return Err(StudyError::validation(
                        "sensors",
                        format!("{} polled with period 0", spec.name),
                    ))
                }
                _ => {}
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[SensorSpec] {
        &self.entries
    }

    pub fn get(&self, id: SensorId) -> Option<&SensorSpec> {
        // ids are dense from 1 in the standard catalog; fall back to a scan otherwise
        match self.entries.get((id.0 as usize).wrapping_sub(1)) {
            Some(spec) if spec.id == id => Some(spec),
            _ => self.entries.iter().find(|s| s.id == id),
        }
    }

    pub fn by_name(&self, name: &str) -> Option<&SensorSpec> {
        self.entries
            .iter()
            .find(|s| s.name.eq_ignore_ascii_case(name.trim()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub mod ids {
    use super::SensorId;

    pub const ACCELERATION: SensorId = SensorId(1);
    pub const LINEAR_ACCELERATION: SensorId = SensorId(2);
    pub const GYROSCOPE: SensorId = SensorId(3);
    pub const GRAVITY: SensorId = SensorId(4);
    pub const ROTATION_VECTOR: SensorId = SensorId(5);
    pub const MAGNETIC_FIELD: SensorId = SensorId(6);
    pub const ORIENTATION: SensorId = SensorId(7);
    pub const TEMPERATURE: SensorId = SensorId(8);
    pub const ATMOSPHERIC_PRESSURE: SensorId = SensorId(9);
    pub const HUMIDITY: SensorId = SensorId(10);
    pub const SCREEN_STATUS: SensorId = SensorId(11);
    pub const FLIGHT_MODE: SensorId = SensorId(12);
    pub const AUDIO_MODE: SensorId = SensorId(13);
    pub const BATTERY_CHARGE: SensorId = SensorId(14);
    pub const BATTERY_LEVEL: SensorId = SensorId(15);
    pub const DOZE_MODALITY: SensorId = SensorId(16);
    pub const HEADSET: SensorId = SensorId(17);
    pub const MUSIC_PLAYBACK: SensorId = SensorId(18);
    pub const WIFI_CONNECTED: SensorId = SensorId(19);
    pub const PROXIMITY: SensorId = SensorId(20);
    pub const INCOMING_CALLS: SensorId = SensorId(21);
    pub const OUTGOING_CALLS: SensorId = SensorId(22);
    pub const INCOMING_SMS: SensorId = SensorId(23);
    pub const OUTGOING_SMS: SensorId = SensorId(24);
    pub const NOTIFICATIONS: SensorId = SensorId(25);
    pub const TOUCH_EVENT: SensorId = SensorId(26);
    pub const WIFI_AVAILABLE: SensorId = SensorId(27);
    pub const BLUETOOTH_AVAILABLE: SensorId = SensorId(28);
    pub const BLUETOOTH_LE_AVAILABLE: SensorId = SensorId(29);
    pub const LOCATION: SensorId = SensorId(30);
    pub const RUNNING_APPLICATION: SensorId = SensorId(31);
    pub const CELLULAR_NETWORK: SensorId = SensorId(32);
}

fn build_standard() -> SensorCatalog {
    use SensorKind::*;
    use ValueKind::*;

    let hz20 = Sampling::FixedRate(Rate::hz(20));
    let minute = Sampling::Polled { period_s: 60 };
    let rows: [(&str, SensorKind, Sampling, u8, ValueKind); 32] = [
        ("Acceleration", Hardware, hz20, 3, Numeric),
        ("Linear Acceleration", Hardware, hz20, 3, Numeric),
        ("Gyroscope", Hardware, hz20, 3, Numeric),
        ("Gravity", Hardware, hz20, 3, Numeric),
        ("Rotation Vector", Hardware, hz20, 3, Numeric),
        ("Magnetic Field", Hardware, hz20, 3, Numeric),
        ("Orientation", Hardware, hz20, 3, Numeric),
        ("Temperature", Hardware, hz20, 1, Numeric),
        ("Atmospheric Pressure", Hardware, hz20, 1, Numeric),
        ("Humidity", Hardware, hz20, 1, Numeric),
        ("Screen Status", Software, Sampling::OnChange, 1, Boolean),
        ("Flight Mode", Software, Sampling::OnChange, 1, Boolean),
        ("Audio Mode", Software, Sampling::OnChange, 1, Text),
        ("Battery Charge", Software, Sampling::OnChange, 1, Boolean),
        ("Battery Level", Software, Sampling::OnChange, 1, Numeric),
        ("Doze Modality", Software, Sampling::OnChange, 1, Boolean),
        ("Headset", Software, Sampling::OnChange, 1, Boolean),
        ("Music Playback", Software, Sampling::OnChange, 1, Boolean),
        ("WIFI Network Connected", Software, Sampling::OnChange, 1, Text),
        ("Proximity", Hardware, Sampling::OnChange, 1, Numeric),
        ("Incoming Calls", Software, Sampling::OnChange, 1, Numeric),
        ("Outgoing Calls", Software, Sampling::OnChange, 1, Numeric),
        ("Incoming Sms", Software, Sampling::OnChange, 1, Numeric),
        ("Outgoing Sms", Software, Sampling::OnChange, 1, Numeric),
        ("Notifications", Software, Sampling::OnChange, 1, Text),
        ("Touch Event", Software, Sampling::OnChange, 1, Numeric),
        ("WIFI Networks Available", Software, minute, 1, Numeric),
        ("Bluetooth Device Available", Software, minute, 1, Numeric),
        ("Bluetooth LE Available", Software, minute, 1, Numeric),
        ("Location", Hardware, minute, 3, Numeric),
        ("Running Application", Software, Sampling::Polled { period_s: 5 }, 1, Text),
        ("Cellular Network Info", Software, Sampling::OnChange, 1, Text),
    ];
    let entries = rows
        .into_iter()
        .enumerate()
        .map(|(i, (name, kind, sampling, value_arity, value_kind))| SensorSpec {
            id: SensorId(i as u16 + 1),
            name: name.to_string(),
            kind,
            sampling,
            value_arity,
            value_kind,
        })
        .collect();
    SensorCatalog::from_entries(entries).expect("standard catalog is valid")
}

/// Default on-change event rates (events per simulated day).
pub fn default_events_per_day(id: SensorId) -> f64 {
    use ids::*;
    match id {
        SCREEN_STATUS => 60.0,
        FLIGHT_MODE => 0.5,
        AUDIO_MODE => 4.0,
        BATTERY_CHARGE => 2.0,
        BATTERY_LEVEL => 85.0,
        DOZE_MODALITY => 12.0,
        HEADSET => 2.0,
        MUSIC_PLAYBACK => 4.0,
        WIFI_CONNECTED => 8.0,
        PROXIMITY => 40.0,
        INCOMING_CALLS | OUTGOING_CALLS => 6.0,
        INCOMING_SMS | OUTGOING_SMS => 4.0,
        NOTIFICATIONS => 120.0,
        TOUCH_EVENT => 300.0,
        CELLULAR_NETWORK => 10.0,
        _ => 0.0,
    }
}
