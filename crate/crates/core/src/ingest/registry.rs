//! The three participant tables, each in its own file:
//! `identity/ledger.json`, `identity/linkage.json` and
//! `identity/collection.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::study::{
    Background, CollectionRow, Consent, ContactRef, DeviceKey, IdentityRow, LinkageRow, ParticipantRecord,
    Pseudonym,
};
use crate::TsMs;

const LEDGER: &str = "ledger.json";
const LINKAGE: &str = "linkage.json";
const COLLECTION: &str = "collection.json";

pub(crate) fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T, sync: bool) -> io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&serde_json::to_vec_pretty(value).expect("table serializes"))?;
    if sync {
        f.sync_all()?;
    }
    drop(f);
    fs::rename(&tmp, path)
}

fn read_json<T: DeserializeOwned + Default>(path: &Path) -> io::Result<T> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(T::default()),
        Err(e) => Err(e),
    }
}

#[derive(Debug)]
pub struct Registry {
    dir: PathBuf,
    sync: bool,
    identity: Vec<IdentityRow>,
    linkage: Vec<LinkageRow>,
    collection: BTreeMap<Pseudonym, CollectionRow>,
}

pub struct Enrolled {
    pub record: ParticipantRecord,
    /// Earlier pseudonym of the same contact, now revoked.
    pub revoked: Option<Pseudonym>,
}

impl Registry {
    pub fn open(dir: &Path, sync: bool) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let collection: Vec<CollectionRow> = read_json(&dir.join(COLLECTION))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            sync,
            identity: read_json(&dir.join(LEDGER))?,
            linkage: read_json(&dir.join(LINKAGE))?,
            collection: collection.into_iter().map(|r| (r.pseudonym_id, r)).collect(),
        })
    }

    fn save(&self) -> io::Result<()> {
        write_json_atomic(&self.dir.join(LEDGER), &self.identity, self.sync)?;
        write_json_atomic(&self.dir.join(LINKAGE), &self.linkage, self.sync)?;
        let rows: Vec<_> = self.collection.values().collect();
        write_json_atomic(&self.dir.join(COLLECTION), &rows, self.sync)
    }

    /// Enrolls a contact. A contact that is already enrolled gets a fresh
    /// pseudonym and key; the old pseudonym is revoked.
    pub fn enroll(&mut self, contact: &str, background: Background, tz_offset_min: i32, now: TsMs) -> io::Result<Enrolled> {
        let existing = self.identity.iter().find(|r| r.contact == contact).map(|r| r.contact_ref);
        let contact_ref = existing.unwrap_or_else(ContactRef::random);
        let mut revoked = None;
        if existing.is_some() {
            for link in self.linkage.iter().filter(|l| l.contact_ref == contact_ref) {
                if let Some(row) = self.collection.get_mut(&link.pseudonym_id) {
                    if row.consent == Consent::Granted {
                        row.consent = Consent::Revoked;
                        revoked = Some(row.pseudonym_id);
                    }
                }
            }
        }
        let record = ParticipantRecord {
            pseudonym_id: Pseudonym::random(),
            contact_ref,
            device_key: DeviceKey::generate(),
            consent: Consent::Granted,
            registered_at: now,
            background,
            tz_offset_min,
        };
        let (identity, linkage, collection) = record.split(contact);
        if existing.is_none() {
            self.identity.push(identity);
        }
        self.linkage.push(linkage);
        self.collection.insert(record.pseudonym_id, collection);
        self.save()?;
        Ok(Enrolled { record, revoked })
    }

    pub fn get(&self, p: Pseudonym) -> Option<&CollectionRow> {
        self.collection.get(&p)
    }

    pub fn is_active(&self, p: Pseudonym) -> bool {
        self.get(p).is_some_and(|r| r.consent == Consent::Granted)
    }

    pub fn rows(&self) -> impl Iterator<Item = &CollectionRow> {
        self.collection.values()
    }

    /// Admin-only view of the identity ledger.
    pub fn identity_rows(&self) -> &[IdentityRow] {
        &self.identity
    }

    pub fn linkage_rows(&self) -> &[LinkageRow] {
        &self.linkage
    }

    /// Removes the collection row and linkage row of `p`, and the identity
    /// row once no other pseudonym links to it. Returns false for an unknown
    /// pseudonym.
    pub fn erase(&mut self, p: Pseudonym) -> io::Result<bool> {
        if self.collection.remove(&p).is_none() {
            return Ok(false);
        }
        let refs: Vec<ContactRef> = self.linkage.iter().filter(|l| l.pseudonym_id == p).map(|l| l.contact_ref).collect();
        self.linkage.retain(|l| l.pseudonym_id != p);
        for r in refs {
            if !self.linkage.iter().any(|l| l.contact_ref == r) {
                self.identity.retain(|i| i.contact_ref != r);
            }
        }
        self.save()?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn re_enrollment_revokes_and_erase_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = Registry::open(dir.path(), false).unwrap();
        let a = reg.enroll("a@example.org", Background::new(), 0, 1).unwrap();
        assert!(a.revoked.is_none());
        let b = reg.enroll("a@example.org", Background::new(), 0, 2).unwrap();
        assert_eq!(b.revoked, Some(a.record.pseudonym_id));
        assert_ne!(a.record.pseudonym_id, b.record.pseudonym_id);
        assert_eq!(a.record.contact_ref, b.record.contact_ref);
        assert!(!reg.is_active(a.record.pseudonym_id));
        assert!(reg.is_active(b.record.pseudonym_id));
        assert_eq!(reg.identity_rows().len(), 1);

        let reg2 = Registry::open(dir.path(), false).unwrap();
        assert_eq!(reg2.rows().count(), 2);

        let mut reg = reg2;
        assert!(reg.erase(a.record.pseudonym_id).unwrap());
        assert_eq!(reg.identity_rows().len(), 1);
        assert!(reg.erase(b.record.pseudonym_id).unwrap());
        assert!(reg.identity_rows().is_empty());
        assert!(reg.linkage_rows().is_empty());
        assert!(!reg.erase(b.record.pseudonym_id).unwrap());
    }
}
