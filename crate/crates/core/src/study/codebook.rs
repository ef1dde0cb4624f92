use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::StudyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookId {
    Activity,
    Location,
    Transport,
    WithWhom,
    Mood,
}

impl CodebookId {
    pub const ALL: [CodebookId; 5] = [
        CodebookId::Activity,
        CodebookId::Location,
        CodebookId::Transport,
        CodebookId::WithWhom,
        CodebookId::Mood,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CodebookId::Activity => "activity",
            CodebookId::Location => "location",
            CodebookId::Transport => "transport",
            CodebookId::WithWhom => "with_whom",
            CodebookId::Mood => "mood",
        }
    }

    pub fn prompt(&self) -> &'static str {
        match self {
            CodebookId::Activity => "What are you doing?",
            CodebookId::Location => "Where are you?",
            CodebookId::Transport => "How are you travelling?",
            CodebookId::WithWhom => "Who is with you?",
            CodebookId::Mood => "What is your mood?",
        }
    }
}

impl fmt::Display for CodebookId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodebookId {
    type Err = StudyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CodebookId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| StudyError::validation("codebook", format!("unknown codebook {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub code: u8,
    pub label: String,
}

/// A closed list of answer categories, optionally with one open-ended category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub id: CodebookId,
    pub entries: Vec<CodebookEntry>,
    pub allows_open_text: bool,
}

impl Codebook {
    /// Builds a codebook with codes assigned contiguously from 1.
    pub fn from_labels<S: Into<String>>(
        id: CodebookId,
        labels: impl IntoIterator<Item = S>,
        allows_open_text: bool,
    ) -> Result<Self, StudyError> {
        let entries: Vec<_> = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| CodebookEntry {
                code: (i + 1) as u8,
                label: label.into(),
            })
            .collect();
        let book = Self {
            id,
            entries,
            allows_open_text,
        };
        book.validate()?;
        Ok(book)
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        let field = format!("codebook.{}", self.id);
        if self.entries.is_empty() {
            return Err(StudyError::validation(field, "codebook has no entries"));
        }
        if self.entries.len() > u8::MAX as usize {
            return Err(StudyError::validation(field, "too many entries"));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.code as usize != i + 1 {
                return Err(StudyError::validation(
                    field,
                    format!("codes must be contiguous from 1, found {} at position {}", e.code, i + 1),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, code: u8) -> bool {
        code >= 1 && (code as usize) <= self.entries.len()
    }

    pub fn label(&self, code: u8) -> Option<&str> {
        self.contains(code)
            .then(|| self.entries[code as usize - 1].label.as_str())
    }

    pub fn code_of(&self, label: &str) -> Option<u8> {
        self.entries
            .iter()
            .find(|e| e.label.eq_ignore_ascii_case(label))
            .map(|e| e.code)
    }
}

pub const DEFAULT_ACTIVITY: [&str; 19] = [
    "Sleeping",
    "Personal care",
    "Eating",
    "Working",
    "Studying",
    "Household and family care",
    "Cooking",
    "Shopping and services",
    "Volunteering and meetings",
    "Social life",
    "Entertainment and culture",
    "Sports and outdoor activities",
    "Hobbies and games",
    "Reading",
    "TV, video or radio",
    "Using computer or smartphone",
    "Resting",
    "Travelling",
    "Other (specify)",
];

pub const DEFAULT_LOCATION: [&str; 13] = [
    "Home",
    "Second home",
    "Workplace",
    "School or university",
    "Other people's home",
    "Restaurant or bar",
    "Shop or market",
    "Sports facility",
    "Outdoors",
    "Cultural venue",
    "Vehicle",
    "Other public place",
    "Other (specify)",
];

pub const DEFAULT_TRANSPORT: [&str; 8] = [
    "On foot",
    "Bicycle",
    "Motorbike or scooter",
    "Car",
    "Bus or tram",
    "Train or metro",
    "Taxi or ride sharing",
    "Other (specify)",
];

pub const DEFAULT_WITH_WHOM: [&str; 7] = [
    "Nobody",
    "Partner",
    "Children",
    "Parents",
    "Other household members",
    "Friends or colleagues",
    "Other (specify)",
];

pub const DEFAULT_MOOD: [&str; 7] = [
    "1 - very bad",
    "2",
    "3",
    "4 - neutral",
    "5",
    "6",
    "7 - very good",
];

/// Code of "Travelling" in the default activity codebook.
pub const DEFAULT_TRAVEL_CODE: u8 = 18;

pub fn default_codebook(id: CodebookId) -> Codebook {
    let (labels, open): (&[&str], bool) = match id {
        CodebookId::Activity => (&DEFAULT_ACTIVITY, true),
        CodebookId::Location => (&DEFAULT_LOCATION, true),
        CodebookId::Transport => (&DEFAULT_TRANSPORT, true),
        CodebookId::WithWhom => (&DEFAULT_WITH_WHOM, true),
        CodebookId::Mood => (&DEFAULT_MOOD, false),
    };
    Codebook::from_labels(id, labels.iter().copied(), open).expect("default codebooks are valid")
}
