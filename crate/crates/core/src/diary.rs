//! Durable store of accepted diary answers and their telemetry, one JSON
//! Lines file per pseudonym.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::scheduler::{AcceptedAnswer, AnswerTelemetry, TaskId};
use crate::study::Pseudonym;

const ANSWERS_FILE: &str = "answers.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredAnswer {
    pub answer: AcceptedAnswer,
    pub telemetry: AnswerTelemetry,
}

#[derive(Debug, Default)]
struct Entries {
    answers: Vec<StoredAnswer>,
    ids: HashSet<TaskId>,
}

#[derive(Debug)]
pub struct DiaryStore {
    root: PathBuf,
    sync: bool,
    inner: RwLock<BTreeMap<Pseudonym, Entries>>,
}

impl DiaryStore {
    pub fn open(root: impl AsRef<Path>, sync: bool) -> io::Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut map = BTreeMap::new();
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            let Some(p) = entry.file_name().to_str().and_then(|s| s.parse::<Pseudonym>().ok()) else { continue };
            let path = entry.path().join(ANSWERS_FILE);
            let Ok(file) = fs::File::open(&path) else { continue };
            let mut e = Entries::default();
            for line in io::BufReader::new(file).lines() {
                let line = line?;
                // a torn last line from a crash is skipped
                let Ok(rec) = serde_json::from_str::<StoredAnswer>(&line) else {
                    tracing::warn!(path = %path.display(), "skipping unreadable answer line");
                    continue;
                };
                e.ids.insert(rec.answer.task_id);
                e.answers.push(rec);
            }
            map.insert(p, e);
        }
        Ok(Self {
            root,
            sync,
            inner: RwLock::new(map),
        })
    }

    /// Appends an answer unless its task was already answered. Returns
    /// whether it was written.
    pub fn append(&self, p: Pseudonym, rec: StoredAnswer) -> io::Result<bool> {
        let mut inner = self.inner.write();
        let e = inner.entry(p).or_default();
        if e.ids.contains(&rec.answer.task_id) {
            return Ok(false);
        }
        let dir = self.root.join(p.to_hex());
        fs::create_dir_all(&dir)?;
        let mut line = serde_json::to_vec(&rec).expect("answer serializes");
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join(ANSWERS_FILE))?;
        f.write_all(&line)?;
        if self.sync {
            f.sync_data()?;
        }
        e.ids.insert(rec.answer.task_id);
        e.answers.push(rec);
        Ok(true)
    }

    pub fn contains(&self, p: Pseudonym, task: TaskId) -> bool {
        self.inner.read().get(&p).is_some_and(|e| e.ids.contains(&task))
    }

    pub fn answers(&self, p: Pseudonym) -> Vec<StoredAnswer> {
        self.inner.read().get(&p).map(|e| e.answers.clone()).unwrap_or_default()
    }

    pub fn count(&self, p: Pseudonym) -> u64 {
        self.inner.read().get(&p).map_or(0, |e| e.answers.len() as u64)
    }

    pub fn last_answer_at(&self, p: Pseudonym) -> Option<i64> {
        self.inner
            .read()
            .get(&p)
            .and_then(|e| e.answers.iter().map(|a| a.answer.answered_at_end).max())
    }

    pub fn pseudonyms(&self) -> Vec<Pseudonym> {
        self.inner.read().keys().copied().collect()
    }

    /// Every stored answer of every pseudonym, ordered by pseudonym then
    /// arrival.
    pub fn all(&self) -> Vec<(Pseudonym, StoredAnswer)> {
        self.inner
            .read()
            .iter()
            .flat_map(|(p, e)| e.answers.iter().map(move |a| (*p, a.clone())))
            .collect()
    }

    /// Deletes all answers and telemetry of a pseudonym; returns how many
    /// answers were removed.
    pub fn erase(&self, p: Pseudonym) -> io::Result<u64> {
        let mut inner = self.inner.write();
        let n = inner.remove(&p).map_or(0, |e| e.answers.len() as u64);
        let dir = self.root.join(p.to_hex());
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        Ok(n)
    }
}
