//! Pieces of `ilogctl` that are worth testing without spawning the binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::{DateTime, NaiveDate};
use ilog_core::ingest::{derive_mac_key, BackendOptions};
use ilog_core::logpack::{open_chunk, LogChunk};
use ilog_core::study::{load_study_config, DeviceKey, SensorCatalog, StudyConfig};
use ilog_core::{TsMs, MS_PER_HOUR};

pub const ENV_MAC_KEY: &str = "ILOG_MAC_KEY";
pub const ENV_DATA_DIR: &str = "ILOG_DATA_DIR";
pub const ENV_SILENCE_H: &str = "ILOG_SILENCE_THRESHOLD_H";
pub const ENV_SUPERVISOR_TOKEN: &str = "ILOG_SUPERVISOR_TOKEN";

/// Reads a study document from a file, or one of the bundled presets by name
/// (`hackathon2019`, `hetus`).
pub fn load_study(path: &Path) -> anyhow::Result<StudyConfig> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => match StudyConfig::preset_text(&path.to_string_lossy()) {
            Some(t) => t.to_string(),
            None => return Err(e).with_context(|| format!("reading {}", path.display())),
        },
    };
    load_study_config(&text).with_context(|| format!("loading {}", path.display()))
}

/// 64 hex digits are taken as the key itself; anything else is a passphrase.
pub fn mac_key(raw: &str) -> [u8; 32] {
    let mut key = [0u8; 32];
    match hex::decode_to_slice(raw.trim(), &mut key) {
        Ok(()) => key,
        Err(_) => derive_mac_key(raw),
    }
}

#[derive(Debug, Clone)]
pub struct ServerEnv {
    pub data_dir: PathBuf,
    pub mac_key: [u8; 32],
    pub supervisor_token: String,
    pub silence_threshold_h: f64,
}

impl ServerEnv {
    /// Reads the server settings from an environment lookup.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> anyhow::Result<Self> {
        let Some(secret) = get(ENV_MAC_KEY).filter(|s| !s.is_empty()) else {
            bail!("{ENV_MAC_KEY} must be set");
        };
        let Some(supervisor_token) = get(ENV_SUPERVISOR_TOKEN).filter(|s| !s.is_empty()) else {
            bail!("{ENV_SUPERVISOR_TOKEN} must be set");
        };
        let data_dir = get(ENV_DATA_DIR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("ilog-data"));
        let silence_threshold_h = match get(ENV_SILENCE_H) {
            Some(v) => v.trim().parse::<f64>().with_context(|| format!("{ENV_SILENCE_H}={v:?}"))?,
            None => 24.0,
        };
        if !(silence_threshold_h > 0.0 && silence_threshold_h.is_finite()) {
            bail!("{ENV_SILENCE_H} must be a positive number of hours");
        }
        Ok(Self {
            data_dir,
            mac_key: mac_key(&secret),
            supervisor_token,
            silence_threshold_h,
        })
    }

    pub fn backend_options(&self) -> BackendOptions {
        let mut opts = BackendOptions::new(&self.data_dir, self.mac_key, self.supervisor_token.clone());
        opts.silence_threshold_ms = (self.silence_threshold_h * MS_PER_HOUR as f64).round() as i64;
        opts
    }
}

/// Epoch milliseconds, an RFC 3339 timestamp, or a UTC date.
pub fn parse_time(s: &str) -> anyhow::Result<TsMs> {
    let s = s.trim();
    if let Ok(ms) = s.parse::<TsMs>() {
        return Ok(ms);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.timestamp_millis());
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(ilog_core::store::day_start(d));
    }
    bail!("cannot read {s:?} as epoch milliseconds, RFC 3339 or YYYY-MM-DD")
}

/// The series store lives under `<data>/store`; accept either path.
pub fn store_root(path: &Path) -> PathBuf {
    let nested = path.join("store");
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Header fields and per-sensor counts of one chunk file.
pub fn inspect_chunk(path: &Path, key: &str) -> anyhow::Result<String> {
    let key: DeviceKey = key.parse().context("--key")?;
    let chunk = LogChunk::read_from(path).with_context(|| format!("reading {}", path.display()))?;
    let h = &chunk.header;
    let readings = open_chunk(&chunk, &key).with_context(|| format!("opening {}", path.display()))?;
    let catalog = SensorCatalog::standard();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for r in &readings {
        let name = catalog.get(r.sensor_id).map_or_else(|| format!("sensor#{}", r.sensor_id.0), |s| s.name.clone());
        *counts.entry(name).or_default() += 1;
    }
    let mut out = String::new();
    let ts = |t: TsMs| DateTime::from_timestamp_millis(t).map_or_else(|| t.to_string(), |d| d.to_rfc3339());
    out += &format!("chunk_id       {}\n", h.chunk_id);
    out += &format!("pseudonym      {}\n", h.pseudonym);
    out += &format!("reading_count  {}\n", h.reading_count);
    out += &format!("ts_min         {} ({})\n", h.ts_min, ts(h.ts_min));
    out += &format!("ts_max         {} ({})\n", h.ts_max, ts(h.ts_max));
    out += &format!("plaintext_len  {}\n", h.plaintext_len);
    out += &format!("encoded_len    {}\n", chunk.encoded_len());
    out += "\nsensor                         readings\n";
    for (name, n) in counts {
        out += &format!("{name:<30} {n:>8}\n");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn times_in_three_spellings() {
        assert_eq!(parse_time("1548633600000").unwrap(), 1_548_633_600_000);
        assert_eq!(parse_time("2019-01-28").unwrap(), 1_548_633_600_000);
        assert_eq!(parse_time("2019-01-28T01:00:00+01:00").unwrap(), 1_548_633_600_000);
        assert!(parse_time("yesterday").is_err());
    }

    #[test]
    fn env_needs_key_and_supervisor() {
        let env = |pairs: &'static [(&'static str, &'static str)]| {
            move |k: &str| pairs.iter().find(|(n, _)| *n == k).map(|(_, v)| v.to_string())
        };
        assert!(ServerEnv::from_lookup(env(&[])).is_err());
        assert!(ServerEnv::from_lookup(env(&[(ENV_MAC_KEY, "x")])).is_err());
        let e = ServerEnv::from_lookup(env(&[(ENV_MAC_KEY, "pass"), (ENV_SUPERVISOR_TOKEN, "s"), (ENV_SILENCE_H, "6")]))
            .unwrap();
        assert_eq!(e.mac_key, derive_mac_key("pass"));
        assert_eq!(e.backend_options().silence_threshold_ms, 6 * MS_PER_HOUR);
        assert!(ServerEnv::from_lookup(env(&[(ENV_MAC_KEY, "k"), (ENV_SUPERVISOR_TOKEN, "s"), (ENV_SILENCE_H, "-1")])).is_err());
        let hex_key = "ab".repeat(32);
        assert_eq!(mac_key(&hex_key), [0xab; 32]);
    }

    #[test]
    fn presets_load_by_name() {
        assert_eq!(load_study(Path::new("hackathon2019")).unwrap(), StudyConfig::hackathon_2019());
        assert!(load_study(Path::new("/nonexistent/study")).is_err());
    }
}
