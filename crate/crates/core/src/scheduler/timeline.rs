use chrono::{NaiveDate, Timelike};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::study::{CodebookId, StudyConfig};
use crate::TsMs;

hex_id!(
    /// Deterministic 128-bit task identifier derived from kind and times.
    TaskId,
    16
);

impl TaskId {
    fn derive(kind: TaskKind, episode_start: TsMs, emit_at: TsMs) -> Self {
        let mut h = Sha256::new();
        h.update(b"ilog-task-v1");
        h.update([kind as u8]);
        h.update(episode_start.to_be_bytes());
        h.update(emit_at.to_be_bytes());
        let digest = h.finalize();
        Self(digest[..16].try_into().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Episode = 0,
    MoodPrompt = 1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub codebook: CodebookId,
    pub prompt: String,
}

impl Question {
    fn of(codebook: CodebookId) -> Self {
        Self {
            codebook,
            prompt: codebook.prompt().to_string(),
        }
    }
}

/// A pushed question set about one time episode (or one mood prompt).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiaryTask {
    pub task_id: TaskId,
    pub kind: TaskKind,
    /// Start of the episode the questions refer to.
    pub episode_start: TsMs,
    /// When the notification fires.
    pub emit_at: TsMs,
    pub questions: Vec<Question>,
    /// Reply deadline, set once the task is delivered under a limited window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expiry: Option<TsMs>,
}

impl DiaryTask {
    pub fn asks(&self, codebook: CodebookId) -> bool {
        self.questions.iter().any(|q| q.codebook == codebook)
    }
}

/// UTC milliseconds of local midnight starting `day` for a fixed offset east of UTC.
pub fn local_midnight_ms(day: NaiveDate, tz_offset_min: i32) -> TsMs {
    let utc = day.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp_millis();
    utc - tz_offset_min as i64 * 60_000
}

/// Builds the full task timeline of a study for one participant.
///
/// Every local day of the study is tiled by episodes of
/// `diary_resolution_min`; each episode's task fires when the episode ends.
/// Mood prompts fire at each configured local time of day. Tasks are ordered
/// by `emit_at`, episodes first on ties.
pub fn generate_timeline(config: &StudyConfig, tz_offset_min: i32) -> Vec<DiaryTask> {
    let res_ms = config.diary_resolution_min as i64 * 60_000;
    let slots = (crate::MS_PER_DAY / res_ms) as usize;

    let mut episode_questions = vec![
        Question::of(CodebookId::Activity),
        Question::of(CodebookId::Location),
        Question::of(CodebookId::Transport),
        Question::of(CodebookId::WithWhom),
    ];
    if config.per_episode_mood {
        episode_questions.push(Question::of(CodebookId::Mood));
    }
    let mood_questions = vec![Question::of(CodebookId::Mood)];

    let days = config.span_days() as usize;
    let mut tasks = Vec::with_capacity(days * (slots + config.mood_prompts.len()));
    for day in config.days() {
        let midnight = local_midnight_ms(day, tz_offset_min);
        for k in 0..slots as i64 {
            let episode_start = midnight + k * res_ms;
            let emit_at = episode_start + res_ms;
            tasks.push(DiaryTask {
                task_id: TaskId::derive(TaskKind::Episode, episode_start, emit_at),
                kind: TaskKind::Episode,
                episode_start,
                emit_at,
                questions: episode_questions.clone(),
                expiry: None,
            });
        }
        for t in &config.mood_prompts {
            let at = midnight + t.num_seconds_from_midnight() as i64 * 1000;
            tasks.push(DiaryTask {
                task_id: TaskId::derive(TaskKind::MoodPrompt, at, at),
                kind: TaskKind::MoodPrompt,
                episode_start: at,
                emit_at: at,
                questions: mood_questions.clone(),
                expiry: None,
            });
        }
    }
    tasks.sort_by_key(|t| (t.emit_at, t.kind, t.episode_start));
    tasks
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn hackathon_counts() {
        let config = StudyConfig::hackathon_2019();
        let tl = generate_timeline(&config, 60);
        let episodes = tl.iter().filter(|t| t.kind == TaskKind::Episode).count();
        let moods = tl.iter().filter(|t| t.kind == TaskKind::MoodPrompt).count();
        // 14 calendar days (28 Jan – 10 Feb) × 24 hourly slots; two prompts per day
        assert_eq!(episodes, 336);
        assert_eq!(moods, 28);
    }

    #[test]
    fn hetus_single_day() {
        let mut config = StudyConfig::hetus();
        config.end = config.start;
        let tl = generate_timeline(&config, 0);
        assert_eq!(tl.iter().filter(|t| t.kind == TaskKind::Episode).count(), 144);
    }

    #[test]
    fn degenerate_single_slot() {
        let mut config = StudyConfig::hackathon_2019();
        config.end = config.start;
        config.diary_resolution_min = 1440;
        config.mood_prompts.clear();
        let tl = generate_timeline(&config, 0);
        assert_eq!(tl.len(), 1);
        assert_eq!(tl[0].episode_start, local_midnight_ms(config.start, 0));
        assert_eq!(tl[0].emit_at, tl[0].episode_start + crate::MS_PER_DAY);
    }

    #[test]
    fn episodes_tile_the_study_exactly() {
        for tz in [-300, 0, 60, 330] {
            let config = StudyConfig::hackathon_2019();
            let tl = generate_timeline(&config, tz);
            let mut eps: Vec<_> = tl.iter().filter(|t| t.kind == TaskKind::Episode).collect();
            eps.sort_by_key(|t| t.episode_start);
            let res = config.diary_resolution_min as i64 * 60_000;
            assert_eq!(eps[0].episode_start, local_midnight_ms(config.start, tz));
            for w in eps.windows(2) {
                assert_eq!(w[0].episode_start + res, w[1].episode_start);
            }
            let last = eps.last().unwrap();
            assert_eq!(last.episode_start + res, local_midnight_ms(date(2019, 2, 11), tz));
        }
    }

    #[test]
    fn ordered_and_emitted_after_episode_start() {
        let tl = generate_timeline(&StudyConfig::hackathon_2019(), 0);
        assert!(tl.windows(2).all(|w| w[0].emit_at <= w[1].emit_at));
        assert!(tl.iter().all(|t| t.emit_at >= t.episode_start));
        let ids: std::collections::HashSet<_> = tl.iter().map(|t| t.task_id).collect();
        assert_eq!(ids.len(), tl.len());
    }

    #[test]
    fn deterministic() {
        let config = StudyConfig::hetus();
        assert_eq!(generate_timeline(&config, 120), generate_timeline(&config, 120));
    }

    #[test]
    fn question_sets() {
        let mut config = StudyConfig::hackathon_2019();
        let tl = generate_timeline(&config, 0);
        let ep = tl.iter().find(|t| t.kind == TaskKind::Episode).unwrap();
        let books: Vec<_> = ep.questions.iter().map(|q| q.codebook).collect();
        assert_eq!(
            books,
            [
                CodebookId::Activity,
                CodebookId::Location,
                CodebookId::Transport,
                CodebookId::WithWhom,
                CodebookId::Mood
            ]
        );
        let mood = tl.iter().find(|t| t.kind == TaskKind::MoodPrompt).unwrap();
        assert_eq!(mood.questions.len(), 1);

        config.per_episode_mood = false;
        let tl = generate_timeline(&config, 0);
        assert!(!tl[0].asks(CodebookId::Mood));
    }

    #[test]
    fn mood_prompt_at_local_time() {
        let config = StudyConfig::hackathon_2019();
        let tl = generate_timeline(&config, 60);
        let first = tl.iter().find(|t| t.kind == TaskKind::MoodPrompt).unwrap();
        // 08:30 local at UTC+1 is 07:30 UTC on 28 Jan 2019
        assert_eq!(first.emit_at, 1_548_660_600_000);
    }
}
