//! Device profiles and the fleet file.
//!
//! A fleet file is TOML. An optional `[defaults]` table is merged under every
//! `[[profile]]` entry, so profiles only spell out what differs:
//!
//! ```toml
//! [fleet]
//! name = "pilot"
//!
//! [defaults.behavior]
//! answer_prob = 0.6
//! reaction_delay = { median_s = 480.0, sigma = 0.9 }
//! completion_time = { median_s = 45.0, sigma = 0.5 }
//!
//! [[profile]]
//! id = "p001"
//! behavior = { dropout_day = 9, absent_days = [3] }
//! connectivity = { windows = [{ start = "2019-01-30T22:00:00Z", end = "2019-01-31T06:00:00Z", kind = "offline" }] }
//! ```

use chrono::DateTime;
use ilog_core::study::{SensorCatalog, SensorId, StudyConfig};
use ilog_core::TsMs;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::SimError;

/// Log-normal duration given by its median and log-space spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalSpec {
    pub median_s: f64,
    pub sigma: f64,
}

impl LogNormalSpec {
    pub fn sample_ms(&self, rng: &mut impl Rng) -> i64 {
        let d = rand_distr::LogNormal::new(self.median_s.ln(), self.sigma).expect("validated parameters");
        (rng.sample(d) * 1000.0).round().max(1.0) as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorModel {
    /// Chance that a delivered task gets answered.
    pub answer_prob: f64,
    pub reaction_delay: LogNormalSpec,
    pub completion_time: LogNormalSpec,
    /// Study day index from which the participant stops answering and the
    /// sensors stop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_day: Option<u32>,
    #[serde(default)]
    pub same_as_previous_prob: f64,
    /// Study day indexes on which the phone collects nothing and the
    /// participant ignores the diary.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent_days: Vec<u32>,
}

impl BehaviorModel {
    /// Whether the participant is around on study day `day`.
    pub fn present_on(&self, day: u32) -> bool {
        self.dropout_day.is_none_or(|d| day < d) && !self.absent_days.contains(&day)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("answer_prob", self.answer_prob), ("same_as_previous_prob", self.same_as_previous_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be within [0, 1]"));
            }
        }
        for (name, d) in [("reaction_delay", self.reaction_delay), ("completion_time", self.completion_time)] {
            if !(d.median_s > 0.0 && d.sigma > 0.0 && d.median_s.is_finite() && d.sigma.is_finite()) {
                return Err(format!("{name} needs a positive median and sigma"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    /// No network at all.
    Offline,
    /// Mobile data only: the device polls for tasks and submits answers but
    /// holds chunk uploads until Wi-Fi returns or the supervisor forces a
    /// sync.
    NoWifi,
}

fn ts_ser<S: Serializer>(ts: &TsMs, s: S) -> Result<S::Ok, S::Error> {
    let dt = DateTime::from_timestamp_millis(*ts).ok_or_else(|| serde::ser::Error::custom("timestamp out of range"))?;
    s.serialize_str(&dt.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true))
}

fn ts_de<'de, D: Deserializer<'de>>(d: D) -> Result<TsMs, D::Error> {
    let s = String::deserialize(d)?;
    DateTime::parse_from_rfc3339(&s)
        .map(|t| t.timestamp_millis())
        .map_err(|e| serde::de::Error::custom(format!("{s}: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkWindow {
    #[serde(serialize_with = "ts_ser", deserialize_with = "ts_de")]
    pub start: TsMs,
    #[serde(serialize_with = "ts_ser", deserialize_with = "ts_de")]
    pub end: TsMs,
    pub kind: LinkKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Online,
    NoWifi,
    Offline,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectivityModel {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub windows: Vec<LinkWindow>,
    /// Poll period; the study's `sync_period_s` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync_period_s: Option<u32>,
}

impl ConnectivityModel {
    pub fn link_at(&self, t: TsMs) -> Link {
        match self.windows.iter().find(|w| w.start <= t && t < w.end) {
            Some(w) if w.kind == LinkKind::Offline => Link::Offline,
            Some(_) => Link::NoWifi,
            None => Link::Online,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for w in &self.windows {
            if w.start >= w.end {
                return Err("link window ends before it starts".into());
            }
        }
        if self.windows.windows(2).any(|p| p[0].end > p[1].start) {
            return Err("link windows must be ordered and disjoint".into());
        }
        if self.sync_period_s == Some(0) {
            return Err("sync_period_s must be positive".into());
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}

fn default_tz() -> i32 {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub id: String,
    /// Fixed seed; derived from the fleet seed and `id` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// False for participants who register but never start collecting.
    #[serde(default = "default_true")]
    pub active: bool,
    #[serde(default = "default_tz")]
    pub tz_offset_min: i32,
    /// Registration time; one hour before the study starts when absent.
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "opt_ts_ser", deserialize_with = "opt_ts_de")]
    pub registers_at: Option<TsMs>,
    /// Sensor names this device can collect; every study sensor when absent.
    /// Missing hardware and denied permissions show up here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enabled_sensors: Option<Vec<String>>,
    pub behavior: BehaviorModel,
    #[serde(default)]
    pub connectivity: ConnectivityModel,
}

fn opt_ts_ser<S: Serializer>(ts: &Option<TsMs>, s: S) -> Result<S::Ok, S::Error> {
    match ts {
        Some(t) => ts_ser(t, s),
        None => s.serialize_none(),
    }
}

fn opt_ts_de<'de, D: Deserializer<'de>>(d: D) -> Result<Option<TsMs>, D::Error> {
    ts_de(d).map(Some)
}

impl DeviceProfile {
    /// Sensors this device collects in `config`, in catalog order.
    pub fn sensors(&self, config: &StudyConfig) -> Result<Vec<SensorId>, SimError> {
        let catalog = SensorCatalog::standard();
        let allowed = match &self.enabled_sensors {
            None => None,
            Some(names) => Some(
                names
                    .iter()
                    .map(|n| {
                        catalog
                            .by_name(n)
                            .map(|s| s.id)
                            .ok_or_else(|| SimError::Fleet(format!("{}: unknown sensor {n:?}", self.id)))
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        Ok(config
            .enabled_specs()
            .iter()
            .map(|s| s.id)
            .filter(|id| allowed.as_ref().is_none_or(|a| a.contains(id)))
            .collect())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| SimError::Fleet(format!("{}: {m}", self.id));
        self.behavior.validate().map_err(err)?;
        self.connectivity.validate().map_err(err)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FleetMeta {
    #[serde(default)]
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    #[serde(default)]
    pub fleet: FleetMeta,
    #[serde(rename = "profile")]
    pub profiles: Vec<DeviceProfile>,
}

fn merge_under(base: &toml::Value, over: &mut toml::Value) {
    if let (toml::Value::Table(b), toml::Value::Table(o)) = (base, over) {
        for (k, v) in b {
            match o.get_mut(k) {
                Some(existing) => merge_under(v, existing),
                None => {
                    o.insert(k.clone(), v.clone());
                }
            }
        }
    }
}

impl Fleet {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut doc: toml::Value = toml::from_str(text).map_err(|e| SimError::Fleet(e.to_string()))?;
        let table = doc.as_table_mut().ok_or_else(|| SimError::Fleet("not a table".into()))?;
        if let Some(defaults) = table.remove("defaults") {
            if let Some(toml::Value::Array(profiles)) = table.get_mut("profile") {
                for p in profiles {
                    merge_under(&defaults, p);
                }
            }
        }
        let fleet: Fleet = doc.try_into().map_err(|e: toml::de::Error| SimError::Fleet(e.to_string()))?;
        fleet.validate()?;
        Ok(fleet)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Fleet(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fleet serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.profiles.is_empty() {
            return Err(SimError::Fleet("fleet has no profiles".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for p in &self.profiles {
            if !ids.insert(&p.id) {
                return Err(SimError::Fleet(format!("duplicate profile id {}", p.id)));
            }
            p.validate()?;
        }
        Ok(())
    }
}
