//! Participant identity model.
//!
//! A participant exists in three places that never overlap:
//!
//! * the identity ledger holds contact data keyed by an opaque `contact_ref`;
//! * the collection side holds the pseudonym, device key, consent and
//!   background answers;
//! * a single linkage table pairs `contact_ref` with `pseudonym_id`.
//!
//! Nothing outside the linkage table can join the first two.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::StudyError;

hex_id!(
    /// Opaque 128-bit participant identifier used by every collection-side store.
    Pseudonym,
    16
);

hex_id!(
    /// Opaque token pointing into the identity ledger.
    ContactRef,
    16
);

/// 256-bit symmetric key issued to a device at registration.
#[derive(Clone, PartialEq, Eq)]
pub struct DeviceKey(pub [u8; 32]);

impl DeviceKey {
    pub fn generate() -> Self {
        let mut bytes = [0u8; 32];
        rand::rng().fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for DeviceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DeviceKey(..)")
    }
}

impl FromStr for DeviceKey {
    type Err = StudyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bytes = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut bytes)
            .map_err(|_| StudyError::validation("key", "expected 64 hex digits"))?;
        Ok(Self(bytes))
    }
}

impl Serialize for DeviceKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for DeviceKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consent {
    Pending,
    Granted,
    Revoked,
}

/// Registration questionnaire: gender, occupation, activity status, employer,
/// place of employment. Free key/value strings.
pub type Background = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantRecord {
    pub pseudonym_id: Pseudonym,
    pub contact_ref: ContactRef,
    pub device_key: DeviceKey,
    pub consent: Consent,
    pub registered_at: i64,
    pub background: Background,
    /// Offset of local time east of UTC, used to place mood prompts.
    pub tz_offset_min: i32,
}

/// Row of the identity ledger. Contains contact data and nothing else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub contact_ref: ContactRef,
    pub contact: String,
}

/// Row of the linkage table; the only place both identifiers meet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkageRow {
    pub contact_ref: ContactRef,
    pub pseudonym_id: Pseudonym,
}

/// Collection-side participant row. Contains no contact data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionRow {
    pub pseudonym_id: Pseudonym,
    pub device_key: DeviceKey,
    pub consent: Consent,
    pub registered_at: i64,
    pub background: Background,
    #[serde(default)]
    pub tz_offset_min: i32,
}

impl ParticipantRecord {
    /// Splits the record across the three stores.
    pub fn split(&self, contact: impl Into<String>) -> (IdentityRow, LinkageRow, CollectionRow) {
        (
            IdentityRow {
                contact_ref: self.contact_ref,
                contact: contact.into(),
            },
            LinkageRow {
                contact_ref: self.contact_ref,
                pseudonym_id: self.pseudonym_id,
            },
            CollectionRow {
                pseudonym_id: self.pseudonym_id,
                device_key: self.device_key.clone(),
                consent: self.consent,
                registered_at: self.registered_at,
                background: self.background.clone(),
                tz_offset_min: self.tz_offset_min,
            },
        )
    }
}
