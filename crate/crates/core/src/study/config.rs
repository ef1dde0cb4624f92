//! Study configuration files.
//!
//! A study file is TOML with a `[study]` section, a `[sensors]` table and
//! optional `[codebook.<name>]` sections. See `presets/` for the two shipped
//! studies and the crate README for the full key list.

use std::collections::BTreeMap;

use chrono::{NaiveDate, NaiveTime};
use serde::Deserialize;
use subtle::ConstantTimeEq;

use super::catalog::{default_events_per_day, Rate, Sampling, SensorCatalog, SensorId, SensorSpec};
use super::codebook::{default_codebook, Codebook, CodebookId, DEFAULT_TRAVEL_CODE};
use super::StudyError;

pub const MINUTES_PER_DAY: u32 = 1440;
pub const DEFAULT_CHUNK_TARGET_BYTES: u64 = 1 << 20;
/// Uncompressed bytes per reading used for volume estimates: an 8-byte
/// timestamp plus up to three 8-byte values.
pub const DEFAULT_BYTES_PER_READING: u64 = 32;

const HETUS_PRESET: &str = include_str!("../../presets/hetus.study");
const HACKATHON_PRESET: &str = include_str!("../../presets/hackathon2019.study");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyWindow {
    Unlimited,
    Limited { minutes: u32 },
}

impl ReplyWindow {
    pub fn as_millis(&self) -> Option<i64> {
        match self {
            ReplyWindow::Unlimited => None,
            ReplyWindow::Limited { minutes } => Some(*minutes as i64 * 60_000),
        }
    }
}

/// Per-sensor knobs from the `[sensors]` table.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SensorOverride {
    pub sampling: Option<Sampling>,
    pub events_per_day: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub study_code: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub diary_resolution_min: u32,
    pub backlog_cap: u32,
    pub reply_window: ReplyWindow,
    pub mood_prompts: Vec<NaiveTime>,
    /// Ask the mood question inside every episode task as well as at the prompts.
    pub per_episode_mood: bool,
    pub sensors_enabled: BTreeMap<SensorId, SensorOverride>,
    pub sync_period_s: u32,
    pub chunk_target_bytes: u64,
    pub codebooks: BTreeMap<CodebookId, Codebook>,
    /// Activity code that makes the transport question applicable.
    pub travel_code: u8,
}

impl StudyConfig {
    pub fn hetus() -> Self {
        load_study_config(HETUS_PRESET).expect("hetus preset is valid")
    }

    pub fn hackathon_2019() -> Self {
        load_study_config(HACKATHON_PRESET).expect("hackathon preset is valid")
    }

    pub fn preset_text(name: &str) -> Option<&'static str> {
        match name {
            "hetus" | "hetus.study" => Some(HETUS_PRESET),
            "hackathon2019" | "hackathon2019.study" => Some(HACKATHON_PRESET),
            _ => None,
        }
    }

    pub fn catalog(&self) -> &'static SensorCatalog {
        SensorCatalog::standard()
    }

    /// Number of calendar days covered, inclusive of both ends.
    pub fn span_days(&self) -> u32 {
        (self.end - self.start).num_days() as u32 + 1
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.start.iter_days().take(self.span_days() as usize)
    }

    pub fn is_enabled(&self, id: SensorId) -> bool {
        self.sensors_enabled.contains_key(&id)
    }

    /// Catalog spec with this study's sampling override applied.
    pub fn effective_spec(&self, id: SensorId) -> Option<SensorSpec> {
        let over = self.sensors_enabled.get(&id)?;
        let mut spec = self.catalog().get(id)?.clone();
        if let Some(sampling) = over.sampling {
            spec.sampling = sampling;
        }
        Some(spec)
    }

    pub fn enabled_specs(&self) -> Vec<SensorSpec> {
        self.sensors_enabled
            .keys()
            .filter_map(|&id| self.effective_spec(id))
            .collect()
    }

    /// Simulated event rate for an on-change sensor.
    pub fn events_per_day(&self, id: SensorId) -> f64 {
        self.sensors_enabled
            .get(&id)
            .and_then(|o| o.events_per_day)
            .unwrap_or_else(|| default_events_per_day(id))
    }

    pub fn codebook(&self, id: CodebookId) -> &Codebook {
        &self.codebooks[&id]
    }

    pub fn with_sensors(mut self, sensors: impl IntoIterator<Item = SensorId>) -> Self {
        self.sensors_enabled = sensors
            .into_iter()
            .map(|id| (id, SensorOverride::default()))
            .collect();
        self
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        if self.study_code.is_empty() {
            return Err(StudyError::validation("study.code", "must not be empty"));
        }
        if self.start > self.end {
            return Err(StudyError::validation("study.end", "end precedes start"));
        }
        if self.diary_resolution_min == 0 || MINUTES_PER_DAY % self.diary_resolution_min != 0 {
            return Err(StudyError::validation(
                "study.diary_resolution_min",
                "must be positive and divide 1440",
            ));
        }
        if self.backlog_cap < 1 {
            return Err(StudyError::validation("study.backlog_cap", "must be at least 1"));
        }
        if let ReplyWindow::Limited { minutes: 0 } = self.reply_window {
            return Err(StudyError::validation("study.reply_window_min", "must be positive"));
        }
        if self.sync_period_s == 0 {
            return Err(StudyError::validation("study.sync_period_s", "must be positive"));
        }
        if self.chunk_target_bytes == 0 {
            return Err(StudyError::validation("study.chunk_target_bytes", "must be positive"));
        }
        for id in CodebookId::ALL {
            let book = self
                .codebooks
                .get(&id)
                .ok_or_else(|| StudyError::validation(format!("codebook.{id}"), "missing"))?;
            book.validate()?;
        }
        if !self.codebook(CodebookId::Activity).contains(self.travel_code) {
            return Err(StudyError::validation(
                "codebook.activity.travel_code",
                "not a code of the activity codebook",
            ));
        }
        for (&id, over) in &self.sensors_enabled {
            let field = || format!("sensors.{id}");
            let spec = self
                .catalog()
                .get(id)
                .ok_or_else(|| StudyError::validation(field(), "not in the sensor catalog"))?;
            match over.sampling {
                Some(Sampling::Polled { period_s: 0 }) => {
                    return Err(StudyError::validation(field(), "period_s must be ≥ 1"))
                }
                Some(_) if spec.is_on_change() => {
                    return Err(StudyError::validation(
                        field(),
                        "on-change sensors take events_per_day, not a rate",
                    ))
                }
                _ => {}
            }
            if let Some(rate) = over.events_per_day {
                if !(rate.is_finite() && rate >= 0.0) {
                    return Err(StudyError::validation(field(), "events_per_day must be ≥ 0"));
                }
            }
        }
        Ok(())
    }
}

/// Constant-time comparison of an entered study code against the configured one.
pub fn verify_study_code(code: &str, config: &StudyConfig) -> bool {
    code.as_bytes().ct_eq(config.study_code.as_bytes()).into()
}

/// Readings per 24 hours for a deterministic sampling schedule.
pub fn expected_daily_readings(spec: &SensorSpec) -> Result<u64, StudyError> {
    match spec.sampling {
        Sampling::FixedRate(rate) => Ok(rate.numer() * 86_400 / rate.denom()),
        Sampling::Polled { period_s } => Ok(86_400 / period_s as u64),
        Sampling::OnChange => Err(StudyError::NotDeterministic(spec.name.clone())),
    }
}

/// Uncompressed bytes one device produces per day. On-change sensors have no
/// closed form and contribute nothing to this estimate.
pub fn expected_daily_volume(config: &StudyConfig, bytes_per_reading: u64) -> u64 {
    config
        .enabled_specs()
        .iter()
        .filter_map(|spec| expected_daily_readings(spec).ok())
        .sum::<u64>()
        * bytes_per_reading
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyDoc {
    study: StudySection,
    #[serde(default)]
    sensors: BTreeMap<String, SensorEntry>,
    #[serde(default)]
    codebook: BTreeMap<String, CodebookSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudySection {
    code: String,
    start: String,
    end: String,
    diary_resolution_min: u32,
    backlog_cap: u32,
    reply_window_min: Option<u32>,
    #[serde(default)]
    mood_prompts: Vec<String>,
    #[serde(default)]
    per_episode_mood: bool,
    #[serde(default = "default_sync_period")]
    sync_period_s: u32,
    #[serde(default = "default_chunk_target")]
    chunk_target_bytes: u64,
}

fn default_sync_period() -> u32 {
    900
}

fn default_chunk_target() -> u64 {
    DEFAULT_CHUNK_TARGET_BYTES
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SensorEntry {
    Flag(String),
    Table(SensorTable),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SensorTable {
    hz: Option<HzValue>,
    period_s: Option<u32>,
    events_per_day: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum HzValue {
    Int(u64),
    Float(f64),
    Text(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookSection {
    labels: Vec<String>,
    #[serde(default)]
    open_text: bool,
    travel_code: Option<u8>,
}

/// Parses and validates a study document.
pub fn load_study_config(document: &str) -> Result<StudyConfig, StudyError> {
    let doc: StudyDoc = toml::from_str(document).map_err(|e| StudyError::Parse(e.to_string()))?;
    let s = doc.study;

    let date = |field: &str, text: &str| {
        NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d")
            .map_err(|_| StudyError::validation(field, format!("expected YYYY-MM-DD, got {text:?}")))
    };
    let start = date("study.start", &s.start)?;
    let end = date("study.end", &s.end)?;

    let mood_prompts = s
        .mood_prompts
        .iter()
        .map(|t| {
            NaiveTime::parse_from_str(t.trim(), "%H:%M").map_err(|_| {
                StudyError::validation("study.mood_prompts", format!("expected HH:MM, got {t:?}"))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let catalog = SensorCatalog::standard();
    let mut sensors_enabled = BTreeMap::new();
    // "*" enables the whole catalog at default rates; named entries then override
    if let Some(entry) = doc.sensors.get("*") {
        if !matches!(entry, SensorEntry::Flag(f) if f == "default") {
            return Err(StudyError::validation("sensors.*", "only \"default\" is allowed"));
        }
        for spec in catalog.entries() {
            sensors_enabled.insert(spec.id, SensorOverride::default());
        }
    }
    for (name, entry) in &doc.sensors {
        if name == "*" {
            continue;
        }
        let field = format!("sensors.{name}");
        let spec = catalog
            .by_name(name)
            .ok_or_else(|| StudyError::validation(&field, "unknown sensor name"))?;
        let over = match entry {
            SensorEntry::Flag(flag) if flag == "default" => SensorOverride::default(),
            SensorEntry::Flag(flag) if flag == "off" => {
                sensors_enabled.remove(&spec.id);
                continue;
            }
            SensorEntry::Flag(flag) => {
                return Err(StudyError::validation(
                    &field,
                    format!("expected \"default\", \"off\" or a table, got {flag:?}"),
                ))
            }
            SensorEntry::Table(t) => {
                let sampling = match (&t.hz, t.period_s) {
                    (Some(_), Some(_)) => {
                        return Err(StudyError::validation(&field, "give hz or period_s, not both"))
                    }
                    (Some(HzValue::Int(n)), None) => Some(Sampling::FixedRate(
                        Rate::new(*n, 1).map_err(|e| e.in_field(&field))?,
                    )),
                    (Some(HzValue::Float(f)), None) => Some(Sampling::FixedRate(
                        Rate::parse(&f.to_string()).map_err(|e| e.in_field(&field))?,
                    )),
                    (Some(HzValue::Text(t)), None) => Some(Sampling::FixedRate(
                        Rate::parse(t).map_err(|e| e.in_field(&field))?,
                    )),
                    (None, Some(p)) => Some(Sampling::Polled { period_s: p }),
                    (None, None) => None,
                };
                SensorOverride {
                    sampling,
                    events_per_day: t.events_per_day,
                }
            }
        };
        sensors_enabled.insert(spec.id, over);
    }

    let mut codebooks: BTreeMap<CodebookId, Codebook> = CodebookId::ALL
        .into_iter()
        .map(|id| (id, default_codebook(id)))
        .collect();
    let mut travel_code = DEFAULT_TRAVEL_CODE;
    for (name, section) in doc.codebook {
        let id: CodebookId = name.parse()?;
        if let Some(code) = section.travel_code {
            if id != CodebookId::Activity {
                return Err(StudyError::validation(
                    format!("codebook.{id}.travel_code"),
                    "only the activity codebook has a travel code",
                ));
            }
            travel_code = code;
        }
        codebooks.insert(id, Codebook::from_labels(id, section.labels, section.open_text)?);
    }

    let config = StudyConfig {
        study_code: s.code,
        start,
        end,
        diary_resolution_min: s.diary_resolution_min,
        backlog_cap: s.backlog_cap,
        reply_window: match s.reply_window_min {
            None => ReplyWindow::Unlimited,
            Some(minutes) => ReplyWindow::Limited { minutes },
        },
        mood_prompts,
        per_episode_mood: s.per_episode_mood,
        sensors_enabled,
        sync_period_s: s.sync_period_s,
        chunk_target_bytes: s.chunk_target_bytes,
        codebooks,
        travel_code,
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::super::catalog::ids;
    use super::*;

    const MINIMAL: &str = r#"
        [study]
        code = "1234"
        start = "2019-01-28"
        end = "2019-01-28"
        diary_resolution_min = 60
        backlog_cap = 8
    "#;

    fn minimal_with(extra_study: &str, rest: &str) -> String {
        MINIMAL.replace("backlog_cap = 8", &format!("backlog_cap = 8\n{extra_study}")) + rest
    }

    #[test]
    fn hackathon_preset_spans_fourteen_days() {
        let cfg = StudyConfig::hackathon_2019();
        assert_eq!(cfg.start, NaiveDate::from_ymd_opt(2019, 1, 28).unwrap());
        assert_eq!(cfg.end, NaiveDate::from_ymd_opt(2019, 2, 10).unwrap());
        assert_eq!(cfg.span_days(), 14);
        assert_eq!(cfg.diary_resolution_min, 60);
        assert_eq!(cfg.backlog_cap, 8);
        assert_eq!(cfg.reply_window, ReplyWindow::Unlimited);
        assert_eq!(cfg.mood_prompts.len(), 2);
        assert_eq!(cfg.study_code.len(), 4);
    }

    #[test]
    fn hetus_preset_uses_ten_minute_resolution() {
        let cfg = StudyConfig::hetus();
        assert_eq!(cfg.diary_resolution_min, 10);
        assert_eq!(cfg.reply_window, ReplyWindow::Limited { minutes: 1440 });
    }

    #[test]
    fn zero_backlog_cap_is_a_validation_error() {
        let doc = MINIMAL.replace("backlog_cap = 8", "backlog_cap = 0");
        match load_study_config(&doc) {
            Err(StudyError::Validation { field, .. }) => assert_eq!(field, "study.backlog_cap"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_document_is_a_parse_error() {
        assert!(matches!(load_study_config("[study\ncode ="), Err(StudyError::Parse(_))));
        assert!(matches!(
            load_study_config("[study]\ncode = \"1\""),
            Err(StudyError::Parse(_))
        ));
    }

    #[test]
    fn resolution_must_divide_the_day() {
        let doc = MINIMAL.replace("diary_resolution_min = 60", "diary_resolution_min = 7");
        assert!(matches!(load_study_config(&doc), Err(StudyError::Validation { .. })));
    }

    #[test]
    fn reversed_dates_rejected() {
        let doc = MINIMAL.replace("end = \"2019-01-28\"", "end = \"2019-01-01\"");
        assert!(matches!(
            load_study_config(&doc),
            Err(StudyError::Validation { field, .. }) if field == "study.end"
        ));
    }

    #[test]
    fn unknown_sensor_name_rejected() {
        let doc = minimal_with("", "[sensors]\n\"Heart Rate\" = \"default\"\n");
        assert!(matches!(
            load_study_config(&doc),
            Err(StudyError::Validation { field, .. }) if field == "sensors.Heart Rate"
        ));
    }

    #[test]
    fn sensor_overrides() {
        let doc = minimal_with(
            "",
            r#"
            [sensors]
            "*" = "default"
            "Gyroscope" = "off"
            "Acceleration" = { hz = "1/60" }
            "Location" = { period_s = 300 }
            "Screen Status" = { events_per_day = 10.0 }
            "Temperature" = { hz = 0.5 }
            "#,
        );
        let cfg = load_study_config(&doc).unwrap();
        assert!(!cfg.is_enabled(ids::GYROSCOPE));
        assert_eq!(cfg.sensors_enabled.len(), 31);
        assert_eq!(
            cfg.effective_spec(ids::ACCELERATION).unwrap().sampling,
            Sampling::FixedRate(Rate::new(1, 60).unwrap())
        );
        assert_eq!(
            cfg.effective_spec(ids::TEMPERATURE).unwrap().sampling,
            Sampling::FixedRate(Rate::new(1, 2).unwrap())
        );
        assert_eq!(
            cfg.effective_spec(ids::LOCATION).unwrap().sampling,
            Sampling::Polled { period_s: 300 }
        );
        assert_eq!(cfg.events_per_day(ids::SCREEN_STATUS), 10.0);
        assert_eq!(cfg.events_per_day(ids::NOTIFICATIONS), 120.0);
    }

    #[test]
    fn rate_on_an_on_change_sensor_rejected() {
        let doc = minimal_with("", "[sensors]\n\"Screen Status\" = { hz = 1 }\n");
        assert!(matches!(load_study_config(&doc), Err(StudyError::Validation { .. })));
    }

    #[test]
    fn custom_codebook_replaces_default() {
        let doc = minimal_with(
            "",
            "[codebook.with_whom]\nlabels = [\"Alone\", \"Not alone\"]\nopen_text = false\n",
        );
        let cfg = load_study_config(&doc).unwrap();
        assert_eq!(cfg.codebook(CodebookId::WithWhom).len(), 2);
        assert!(!cfg.codebook(CodebookId::WithWhom).allows_open_text);
        assert_eq!(cfg.codebook(CodebookId::Activity).len(), 19);
    }

    #[test]
    fn study_code_comparison() {
        let cfg = load_study_config(MINIMAL).unwrap();
        assert!(verify_study_code("1234", &cfg));
        assert!(!verify_study_code("1235", &cfg));
        assert!(!verify_study_code("", &cfg));
        assert!(!verify_study_code("12345", &cfg));
    }

    #[test]
    fn daily_readings() {
        let cat = SensorCatalog::standard();
        // 20 × 86400
        assert_eq!(expected_daily_readings(cat.get(ids::ACCELERATION).unwrap()).unwrap(), 1_728_000);
        // 86400 / 60
        assert_eq!(expected_daily_readings(cat.get(ids::LOCATION).unwrap()).unwrap(), 1440);
        assert!(matches!(
            expected_daily_readings(cat.get(ids::SCREEN_STATUS).unwrap()),
            Err(StudyError::NotDeterministic(_))
        ));
    }

    #[test]
    fn daily_volume() {
        let full = StudyConfig::hackathon_2019().with_sensors(
            SensorCatalog::standard().entries().iter().map(|s| s.id),
        );
        // Hand sum: 10 sensors × 1,728,000 + 4 × 1440 + 17,280 = 17,303,040 readings
        assert_eq!(expected_daily_volume(&full, 32), 17_303_040 * 32);
        assert_eq!(expected_daily_volume(&full, 32), 553_697_280);

        let empty = full.clone().with_sensors([]);
        assert_eq!(expected_daily_volume(&empty, 32), 0);

        let location = full.clone().with_sensors([ids::LOCATION]);
        assert_eq!(expected_daily_volume(&location, 32), 46_080);
    }
}
