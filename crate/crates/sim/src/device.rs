//! One virtual device.
//!
//! The device advances in fixed ticks. In each tick it collects sensor data
//! for `[t, t + tick)`, submits answers whose participant has finished them,
//! and on its sync schedule polls for tasks and uploads sealed chunks. Every
//! action in a tick happens at the tick start `t`.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use ilog_core::ingest::{
    AnswerStatus, CommandKind, IngestApi, IngestError, RegisterRequest, RegisterResponse, SubmittedAnswer,
    UploadReceipt, UploadStatus,
};
use ilog_core::logpack::{AppendOutcome, ReadingBuffer};
use ilog_core::scheduler::{local_midnight_ms, AnswerItem, DiaryAnswer, DiaryTask, TaskId, TaskKind};
use ilog_core::study::{CodebookId, Pseudonym, SensorId, StudyConfig};
use ilog_core::{TsMs, MS_PER_DAY, MS_PER_HOUR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::profile::{DeviceProfile, Link};
use crate::sensors::SensorSynth;
use crate::{SimError, SimOptions};

/// Transport faults injected between the device and the backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    /// Chance that an upload never reaches the backend.
    pub fail_before: f64,
    /// Chance that an upload is stored but its acknowledgement is lost, so
    /// the device sends it again.
    pub lose_ack: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub registered: bool,
    pub readings: u64,
    pub chunks_sealed: u64,
    pub uploads_stored: u64,
    pub uploads_duplicate: u64,
    pub upload_attempts: u64,
    /// Readings the backend acknowledged as newly stored.
    pub readings_acked: u64,
    pub fetches: u64,
    pub missed_polls: u64,
    pub commands: u64,
    pub tasks_seen: u64,
    pub answers_planned: u64,
    pub answers_accepted: u64,
    pub answers_duplicate: u64,
    pub answers_rejected: u64,
    /// Readings per study day index.
    pub readings_per_day: BTreeMap<u32, u64>,
    /// Accepted answers per study day of the episode start.
    pub entries_per_day: BTreeMap<u32, u64>,
    /// Distinct (sensor, hour) pairs with data, per study day.
    pub sensor_hours_per_day: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub readings: u64,
    pub per_sensor: BTreeMap<SensorId, u64>,
    pub uploads: Vec<UploadReceipt>,
    pub answers: Vec<AnswerStatus>,
    /// Tasks in the feed when the device polled in this tick.
    pub fetched: Option<usize>,
}

#[derive(Debug, Clone)]
struct Planned {
    task_id: TaskId,
    kind: TaskKind,
    episode_start: TsMs,
    notified_at: TsMs,
    start: TsMs,
    end: TsMs,
    same_as_previous: bool,
    items: Vec<AnswerItem>,
}

pub struct DeviceSim {
    profile: DeviceProfile,
    config: Arc<StudyConfig>,
    opts: SimOptions,
    study_start: TsMs,
    span_days: u32,
    sync_period_ms: i64,
    creds: Option<RegisterResponse>,
    synth: SensorSynth,
    behavior_rng: ChaCha8Rng,
    sensor_rng: ChaCha8Rng,
    fault_rng: ChaCha8Rng,
    buffer: Option<ReadingBuffer>,
    outbox: VecDeque<(Vec<u8>, u64)>,
    known: HashSet<TaskId>,
    planned: Vec<Planned>,
    episode_accepted: bool,
    next_sync: TsMs,
    offline_since: Option<TsMs>,
    force_sync: bool,
    hours_seen: HashSet<(SensorId, i64)>,
    reactions: BTreeMap<TaskId, i64>,
    stats: DeviceStats,
}

impl DeviceSim {
    pub fn new(profile: DeviceProfile, config: Arc<StudyConfig>, seed: u64, opts: &SimOptions) -> Result<Self, SimError> {
        opts.validate()?;
        profile.validate()?;
        let sensors = profile.sensors(&config)?;
        let synth = SensorSynth::new(&config, &sensors, opts.rate_divisor, opts.poll_divisor, profile.tz_offset_min);
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let sync_period_ms = profile.connectivity.sync_period_s.unwrap_or(config.sync_period_s) as i64 * 1000;
        Ok(Self {
            study_start: local_midnight_ms(config.start, 0),
            span_days: config.span_days(),
            sync_period_ms,
            creds: None,
            synth,
            behavior_rng: stream(1),
            sensor_rng: stream(2),
            fault_rng: stream(3),
            buffer: None,
            outbox: VecDeque::new(),
            known: HashSet::new(),
            planned: Vec::new(),
            episode_accepted: false,
            next_sync: TsMs::MIN,
            offline_since: None,
            force_sync: false,
            hours_seen: HashSet::new(),
            reactions: BTreeMap::new(),
            stats: DeviceStats::default(),
            opts: opts.clone(),
            profile,
            config,
        })
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn stats(&self) -> &DeviceStats {
        &self.stats
    }

    /// Reaction delay drawn for every answer the device planned, by task.
    pub fn injected_reactions(&self) -> &BTreeMap<TaskId, i64> {
        &self.reactions
    }

    pub fn pseudonym(&self) -> Option<Pseudonym> {
        self.creds.as_ref().map(|c| c.pseudonym)
    }

    pub fn token(&self) -> Option<&str> {
        self.creds.as_ref().map(|c| c.token.as_str())
    }

    /// When the device registers; an hour before the participant's first
    /// local study day unless the profile says otherwise.
    pub fn registers_at(&self) -> TsMs {
        self.profile
            .registers_at
            .unwrap_or_else(|| local_midnight_ms(self.config.start, self.profile.tz_offset_min) - MS_PER_HOUR)
    }

    /// Readings waiting on the device, sealed or not.
    pub fn backlog_readings(&self) -> u64 {
        self.outbox.iter().map(|(_, n)| n).sum::<u64>() + self.buffer.as_ref().map_or(0, |b| b.len() as u64)
    }

    fn day_index(&self, t: TsMs) -> Option<u32> {
        let d = (t - self.study_start).div_euclid(MS_PER_DAY);
        (0..self.span_days as i64).contains(&d).then_some(d as u32)
    }

    fn collecting(&self, t: TsMs) -> bool {
        self.profile.active && self.day_index(t).is_some_and(|d| self.profile.behavior.present_on(d))
    }

    /// Study day an episode counts towards, clamped into the span.
    fn episode_day(&self, episode_start: TsMs) -> u32 {
        (episode_start - self.study_start)
            .div_euclid(MS_PER_DAY)
            .clamp(0, self.span_days as i64 - 1) as u32
    }

    /// Runs the tick `[t, t + tick_ms)`.
    pub fn step(&mut self, t: TsMs, api: &dyn IngestApi) -> Result<StepOutput, SimError> {
        let mut out = StepOutput::default();
        if self.creds.is_none() {
            if t < self.registers_at() {
                return Ok(out);
            }
            self.register(t, api)?;
        }
        if !self.profile.active {
            return Ok(out);
        }
        let link = self.profile.connectivity.link_at(t);

        if self.collecting(t) {
            self.collect(t, &mut out)?;
        }
        if link != Link::Offline {
            self.submit_due(t, api, &mut out)?;
        }
        if t >= self.next_sync {
            self.next_sync = if self.next_sync == TsMs::MIN { t } else { self.next_sync } + self.sync_period_ms;
            if link == Link::Offline {
                self.stats.missed_polls += 1;
                self.offline_since.get_or_insert(t);
            } else {
                self.poll(t, api, &mut out)?;
                if link == Link::Online || self.force_sync {
                    self.seal()?;
                    self.upload_outbox(t, api, &mut out)?;
                    self.force_sync = false;
                }
            }
        }
        Ok(out)
    }

    /// Uploads everything left and submits every finished answer, as a
    /// device does once it is back on Wi-Fi after the study.
    pub fn finish(&mut self, now: TsMs, api: &dyn IngestApi) -> Result<StepOutput, SimError> {
        let mut out = StepOutput::default();
        if self.creds.is_none() || !self.profile.active {
            return Ok(out);
        }
        self.submit_due(now, api, &mut out)?;
        self.seal()?;
        self.upload_outbox(now, api, &mut out)?;
        Ok(out)
    }

    fn register(&mut self, t: TsMs, api: &dyn IngestApi) -> Result<(), SimError> {
        let req = RegisterRequest {
            study_code: self.config.study_code.clone(),
            background: Default::default(),
            contact: format!("{}@devices.invalid", self.profile.id),
            tz_offset_min: self.profile.tz_offset_min,
        };
        let resp = self.call(|| api.register(&req, t))?;
        self.buffer = Some(ReadingBuffer::new(resp.pseudonym));
        self.creds = Some(resp);
        self.stats.registered = true;
        Ok(())
    }

    fn collect(&mut self, t: TsMs, out: &mut StepOutput) -> Result<(), SimError> {
        let to = t + self.opts.tick_ms;
        let readings = self.synth.synthesize(t, to, &mut self.sensor_rng);
        if readings.is_empty() {
            return Ok(());
        }
        let day = self.day_index(t).expect("collecting inside the span");
        let hour = t.div_euclid(MS_PER_HOUR);
        let n = readings.len() as u64;
        self.stats.readings += n;
        *self.stats.readings_per_day.entry(day).or_default() += n;
        out.readings += n;
        for r in readings {
            *out.per_sensor.entry(r.sensor_id).or_default() += 1;
            if self.hours_seen.insert((r.sensor_id, hour)) {
                *self.stats.sensor_hours_per_day.entry(day).or_default() += 1;
            }
            let buffer = self.buffer.as_mut().expect("registered");
            if buffer.append(r, &self.config)? == AppendOutcome::SealRequested {
                self.seal()?;
            }
        }
        Ok(())
    }

    fn seal(&mut self) -> Result<(), SimError> {
        let creds = self.creds.as_ref().expect("registered");
        let buffer = self.buffer.as_mut().expect("registered");
        if buffer.is_empty() {
            return Ok(());
        }
        let n = buffer.len() as u64;
        let chunk = buffer.seal(&creds.device_key)?;
        self.outbox.push_back((chunk.to_bytes(), n));
        self.stats.chunks_sealed += 1;
        Ok(())
    }

    /// Runs `f` until it succeeds or fails for good, backing off between
    /// retryable failures when the run is paced.
    fn call<T>(&self, mut f: impl FnMut() -> Result<T, IngestError>) -> Result<T, SimError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match f() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() => {
                    if attempt >= self.opts.retry_budget {
                        return Err(SimError::BackendUnavailable { attempts: attempt, last: e });
                    }
                    if self.opts.pace.is_some() {
                        std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                    }
                }
                Err(e) => return Err(SimError::Rejected(e)),
            }
        }
    }

    fn poll(&mut self, t: TsMs, api: &dyn IngestApi, out: &mut StepOutput) -> Result<(), SimError> {
        let token = self.creds.as_ref().expect("registered").token.clone();
        let since = self.offline_since;
        let feed = self.call(|| api.fetch_tasks(&token, since, t))?;
        self.offline_since = None;
        self.stats.fetches += 1;
        out.fetched = Some(feed.tasks.len());
        for c in &feed.commands {
            self.stats.commands += 1;
            match c.kind {
                CommandKind::ForceSyncWifi => self.force_sync = true,
            }
        }
        for task in feed.tasks {
            if self.known.insert(task.task_id) {
                self.stats.tasks_seen += 1;
                self.maybe_plan(&task, t);
            }
        }
        Ok(())
    }

    fn maybe_plan(&mut self, task: &DiaryTask, notified_at: TsMs) {
        let day = self.episode_day(task.episode_start);
        let b = &self.profile.behavior;
        if !b.present_on(day) || !self.behavior_rng.random_bool(b.answer_prob) {
            return;
        }
        let reaction = b.reaction_delay.sample_ms(&mut self.behavior_rng);
        let completion = b.completion_time.sample_ms(&mut self.behavior_rng);
        let same_as_previous = task.kind == TaskKind::Episode && self.behavior_rng.random_bool(b.same_as_previous_prob);
        let items = self.answer_items(task);
        let start = notified_at + reaction;
        self.reactions.insert(task.task_id, reaction);
        self.planned.push(Planned {
            task_id: task.task_id,
            kind: task.kind,
            episode_start: task.episode_start,
            notified_at,
            start,
            end: start + completion,
            same_as_previous,
            items,
        });
        self.stats.answers_planned += 1;
    }

    fn answer_items(&mut self, task: &DiaryTask) -> Vec<AnswerItem> {
        let rng = &mut self.behavior_rng;
        let config = &self.config;
        let mut items = Vec::new();
        let pick = |book: CodebookId, rng: &mut ChaCha8Rng| {
            let n = config.codebook(book).len() as u8;
            rng.random_range(1..=n)
        };
        if task.asks(CodebookId::Activity) {
            let code = pick(CodebookId::Activity, rng);
            items.push(AnswerItem::code(CodebookId::Activity, code));
            if code == config.travel_code && task.asks(CodebookId::Transport) {
                let t = pick(CodebookId::Transport, rng);
                items.push(AnswerItem::code(CodebookId::Transport, t));
            }
        }
        if task.asks(CodebookId::Location) {
            if config.codebook(CodebookId::Location).allows_open_text && rng.random_bool(0.02) {
                items.push(AnswerItem::open_text(CodebookId::Location, "garden"));
            } else {
                let c = pick(CodebookId::Location, rng);
                items.push(AnswerItem::code(CodebookId::Location, c));
            }
        }
        for book in [CodebookId::WithWhom, CodebookId::Mood] {
            if task.asks(book) {
                let c = pick(book, rng);
                items.push(AnswerItem::code(book, c));
            }
        }
        items
    }

    fn submit_due(&mut self, now: TsMs, api: &dyn IngestApi, out: &mut StepOutput) -> Result<(), SimError> {
        if !self.planned.iter().any(|p| p.end <= now) {
            return Ok(());
        }
        let mut due: Vec<Planned> = Vec::new();
        self.planned.retain(|p| {
            if p.end <= now {
                due.push(p.clone());
                false
            } else {
                true
            }
        });
        due.sort_by_key(|p| (p.end, p.task_id));
        let token = self.creds.as_ref().expect("registered").token.clone();
        // answers go one at a time so a same-as-previous answer only relies
        // on an episode the backend has already accepted
        for p in due {
            let copy = p.same_as_previous && self.episode_accepted;
            let answer = SubmittedAnswer {
                answer: DiaryAnswer {
                    task_id: p.task_id,
                    answers: if copy { Vec::new() } else { p.items.clone() },
                    answered_at_start: p.start,
                    answered_at_end: p.end,
                    same_as_previous: copy,
                },
                notified_at: Some(p.notified_at),
            };
            let status = self
                .call(|| api.submit_answers(&token, std::slice::from_ref(&answer), now))?
                .pop()
                .ok_or_else(|| SimError::Rejected(IngestError::Internal("empty answer status".into())))?;
            match status {
                AnswerStatus::Accepted { .. } => {
                    self.stats.answers_accepted += 1;
                    *self.stats.entries_per_day.entry(self.episode_day(p.episode_start)).or_default() += 1;
                    if p.kind == TaskKind::Episode {
                        self.episode_accepted = true;
                    }
                }
                AnswerStatus::Duplicate { .. } => self.stats.answers_duplicate += 1,
                _ => self.stats.answers_rejected += 1,
            }
            out.answers.push(status);
        }
        Ok(())
    }

    fn upload_outbox(&mut self, t: TsMs, api: &dyn IngestApi, out: &mut StepOutput) -> Result<(), SimError> {
        let token = self.creds.as_ref().expect("registered").token.clone();
        while let Some((bytes, _)) = self.outbox.front().cloned() {
            let copies = if self.opts.duplicate_uploads { 2 } else { 1 };
            for _ in 0..copies {
                let receipt = self.upload_once(&token, &bytes, t, api)?;
                match receipt.status {
                    UploadStatus::Stored => {
                        self.stats.uploads_stored += 1;
                        self.stats.readings_acked += receipt.readings_stored;
                    }
                    UploadStatus::Duplicate => self.stats.uploads_duplicate += 1,
                }
                out.uploads.push(receipt);
            }
            self.outbox.pop_front();
        }
        Ok(())
    }

    fn upload_once(&mut self, token: &str, bytes: &[u8], t: TsMs, api: &dyn IngestApi) -> Result<UploadReceipt, SimError> {
        let faults = self.opts.faults;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.stats.upload_attempts += 1;
            let dropped = faults.fail_before > 0.0 && self.fault_rng.random_bool(faults.fail_before);
            let result = if dropped {
                Err(IngestError::Unavailable("connection reset before upload".into()))
            } else {
                let r = api.upload_chunk(token, bytes, t);
                if r.is_ok() && faults.lose_ack > 0.0 && self.fault_rng.random_bool(faults.lose_ack) {
                    Err(IngestError::Unavailable("acknowledgement lost".into()))
                } else {
                    r
                }
            };
            match result {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retryable() => {
                    if attempt >= self.opts.retry_budget {
                        return Err(SimError::BackendUnavailable { attempts: attempt, last: e });
                    }
                    if self.opts.pace.is_some() {
                        std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                    }
                }
                Err(e) => return Err(SimError::Rejected(e)),
            }
        }
    }

    /// Study days on which the device collected anything.
    pub fn reporting_days(&self) -> BTreeSet<u32> {
        self.stats.readings_per_day.keys().copied().collect()
    }
}
