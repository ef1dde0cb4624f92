use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::study::{CodebookId, StudyConfig};
use crate::TsMs;

use super::{
    AnswerItem, AnswerTelemetry, AnswerValue, DiaryAnswer, DiaryTask, SchedulerError, TaskId, TaskKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpiryReason {
    BacklogEvicted,
    WindowExpired,
    StudyEnded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutcome {
    Answered,
    BacklogEvicted,
    WindowExpired,
    StudyEnded,
}

impl From<ExpiryReason> for TaskOutcome {
    fn from(r: ExpiryReason) -> Self {
        match r {
            ExpiryReason::BacklogEvicted => TaskOutcome::BacklogEvicted,
            ExpiryReason::WindowExpired => TaskOutcome::WindowExpired,
            ExpiryReason::StudyEnded => TaskOutcome::StudyEnded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub emitted: u64,
    pub pending: u64,
    pub answered: u64,
    pub backlog_evicted: u64,
    pub window_expired: u64,
    pub study_ended: u64,
}

impl OutcomeCounts {
    pub fn terminated(&self) -> u64 {
        self.answered + self.backlog_evicted + self.window_expired + self.study_ended
    }
}

/// When a task reached the device and whether it had been waiting on an
/// offline device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub at: TsMs,
    pub offline: bool,
}

#[derive(Debug, Clone)]
struct Slot {
    task: DiaryTask,
    delivery: Option<Delivery>,
}

/// An accepted answer with `same_as_previous` resolved into concrete items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptedAnswer {
    pub task_id: TaskId,
    pub kind: TaskKind,
    pub episode_start: TsMs,
    pub answers: Vec<AnswerItem>,
    pub answered_at_start: TsMs,
    pub answered_at_end: TsMs,
    pub same_as_previous: bool,
}

/// Bounded backlog of unanswered tasks on one device.
#[derive(Debug, Clone)]
pub struct TaskQueue {
    cap: usize,
    reply_window_ms: Option<i64>,
    pending: VecDeque<Slot>,
    answered: HashSet<TaskId>,
    expired: Vec<(TaskId, ExpiryReason)>,
    expired_ids: HashSet<TaskId>,
    last_episode_answer: Option<Vec<AnswerItem>>,
    counts: OutcomeCounts,
}

impl TaskQueue {
    pub fn new(config: &StudyConfig) -> Self {
        Self::with_limits(config.backlog_cap as usize, config.reply_window.as_millis())
    }

    pub fn with_limits(cap: usize, reply_window_ms: Option<i64>) -> Self {
        assert!(cap >= 1, "backlog cap must be at least 1");
        Self {
            cap,
            reply_window_ms,
            pending: VecDeque::with_capacity(cap + 1),
            answered: HashSet::new(),
            expired: Vec::new(),
            expired_ids: HashSet::new(),
            last_episode_answer: None,
            counts: OutcomeCounts::default(),
        }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Pending tasks, oldest first.
    pub fn pending(&self) -> impl Iterator<Item = &DiaryTask> {
        self.pending.iter().map(|s| &s.task)
    }

    pub fn expired(&self) -> &[(TaskId, ExpiryReason)] {
        &self.expired
    }

    pub fn counts(&self) -> OutcomeCounts {
        OutcomeCounts {
            pending: self.pending.len() as u64,
            ..self.counts
        }
    }

    pub fn delivery(&self, task_id: TaskId) -> Option<Delivery> {
        self.slot(task_id).and_then(|s| s.delivery)
    }

    pub fn outcome(&self, task_id: TaskId) -> Option<TaskOutcome> {
        if self.answered.contains(&task_id) {
            return Some(TaskOutcome::Answered);
        }
        self.expired
            .iter()
            .find(|(id, _)| *id == task_id)
            .map(|(_, r)| (*r).into())
    }

    fn slot(&self, task_id: TaskId) -> Option<&Slot> {
        self.pending.iter().find(|s| s.task.task_id == task_id)
    }

    fn position(&self, task_id: TaskId) -> Option<usize> {
        self.pending.iter().position(|s| s.task.task_id == task_id)
    }

    fn expire(&mut self, task_id: TaskId, reason: ExpiryReason) {
        match reason {
            ExpiryReason::BacklogEvicted => self.counts.backlog_evicted += 1,
            ExpiryReason::WindowExpired => self.counts.window_expired += 1,
            ExpiryReason::StudyEnded => self.counts.study_ended += 1,
        }
        self.expired.push((task_id, reason));
        self.expired_ids.insert(task_id);
    }

    /// Appends a due task, evicting the oldest pending task when over the cap.
    /// Returns the evicted task id, if any.
    pub fn enqueue(&mut self, task: DiaryTask) -> Result<Option<TaskId>, SchedulerError> {
        let id = task.task_id;
        if self.answered.contains(&id) || self.expired_ids.contains(&id) || self.slot(id).is_some() {
            return Err(SchedulerError::DuplicateTask(id));
        }
        self.counts.emitted += 1;
        self.pending.push_back(Slot { task, delivery: None });
        if self.pending.len() > self.cap {
            let oldest = self.pending.pop_front().unwrap();
            self.expire(oldest.task.task_id, ExpiryReason::BacklogEvicted);
            return Ok(Some(oldest.task.task_id));
        }
        Ok(None)
    }

    /// Hands every due, not yet delivered task to the device. Tasks emitted at
    /// or after `was_offline_since` are flagged as delivered offline. Under a
    /// limited reply window each delivered task gets its expiry here.
    pub fn deliver_pending(&mut self, now: TsMs, was_offline_since: Option<TsMs>) -> Vec<DiaryTask> {
        let window = self.reply_window_ms;
        let mut out = Vec::new();
        for slot in self.pending.iter_mut() {
            if slot.delivery.is_some() || slot.task.emit_at > now {
                continue;
            }
            let offline = was_offline_since.is_some_and(|since| slot.task.emit_at >= since);
            slot.delivery = Some(Delivery { at: now, offline });
            slot.task.expiry = window.map(|w| now + w);
            out.push(slot.task.clone());
        }
        out
    }

    /// Moves delivered tasks whose reply window has passed to expired.
    pub fn expire_overdue(&mut self, now: TsMs) -> Vec<TaskId> {
        let mut gone = Vec::new();
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].task.expiry.is_some_and(|e| e < now) {
                let slot = self.pending.remove(i).unwrap();
                gone.push(slot.task.task_id);
            } else {
                i += 1;
            }
        }
        for id in &gone {
            self.expire(*id, ExpiryReason::WindowExpired);
        }
        gone
    }

    /// Ends the study: everything still pending terminates as study_ended.
    pub fn close(&mut self) -> usize {
        let rest: Vec<_> = self.pending.drain(..).map(|s| s.task.task_id).collect();
        for id in &rest {
            self.expire(*id, ExpiryReason::StudyEnded);
        }
        rest.len()
    }

    /// Marks tasks answered in an earlier life of this queue, so a rebuilt
    /// queue neither re-emits them nor accepts them twice.
    pub fn restore_answered(&mut self, ids: impl IntoIterator<Item = TaskId>, last_episode_answer: Option<Vec<AnswerItem>>) {
        for id in ids {
            if let Some(pos) = self.position(id) {
                self.pending.remove(pos);
            }
            if self.answered.insert(id) {
                self.counts.emitted += 1;
                self.counts.answered += 1;
            }
        }
        if last_episode_answer.is_some() {
            self.last_episode_answer = last_episode_answer;
        }
    }

    pub fn accept_answer(
        &mut self,
        config: &StudyConfig,
        answer: DiaryAnswer,
        notified_at: TsMs,
    ) -> Result<(AcceptedAnswer, AnswerTelemetry), SchedulerError> {
        let id = answer.task_id;
        if self.answered.contains(&id) {
            return Err(SchedulerError::AlreadyAnswered(id));
        }
        let pos = self.position(id).ok_or(SchedulerError::UnknownTask(id))?;
        let invalid = |msg: String| SchedulerError::InvalidAnswer(msg);

        if answer.answered_at_start > answer.answered_at_end {
            return Err(invalid("answered_at_start is after answered_at_end".into()));
        }
        if answer.answered_at_start < notified_at {
            return Err(invalid("answered_at_start precedes the notification".into()));
        }
        if let Some(w) = self.reply_window_ms {
            if answer.answered_at_end > notified_at + w {
                let slot = self.pending.remove(pos).unwrap();
                self.expire(slot.task.task_id, ExpiryReason::WindowExpired);
                return Err(SchedulerError::WindowExpired(id));
            }
        }

        let task = &self.pending[pos].task;
        let items = if answer.same_as_previous {
            if !answer.answers.is_empty() {
                return Err(invalid("same_as_previous answers must not carry items".into()));
            }
            if task.kind != TaskKind::Episode {
                return Err(invalid("same_as_previous only applies to episode tasks".into()));
            }
            let prior = self
                .last_episode_answer
                .as_ref()
                .ok_or_else(|| invalid("no previous episode answer to copy".into()))?;
            prior.iter().filter(|a| task.asks(a.codebook)).cloned().collect()
        } else {
            validate_items(config, task, &answer.answers)?;
            answer.answers
        };

        let slot = self.pending.remove(pos).unwrap();
        let delivered_offline = slot.delivery.is_some_and(|d| d.offline);
        self.answered.insert(id);
        self.counts.answered += 1;
        if slot.task.kind == TaskKind::Episode {
            self.last_episode_answer = Some(items.clone());
        }
        let telemetry = AnswerTelemetry {
            task_id: id,
            notified_at,
            reaction_ms: answer.answered_at_start - notified_at,
            completion_ms: answer.answered_at_end - answer.answered_at_start,
            delivered_offline,
        };
        let accepted = AcceptedAnswer {
            task_id: id,
            kind: slot.task.kind,
            episode_start: slot.task.episode_start,
            answers: items,
            answered_at_start: answer.answered_at_start,
            answered_at_end: answer.answered_at_end,
            same_as_previous: answer.same_as_previous,
        };
        Ok((accepted, telemetry))
    }
}

fn validate_items(config: &StudyConfig, task: &DiaryTask, items: &[AnswerItem]) -> Result<(), SchedulerError> {
    let invalid = |msg: String| Err(SchedulerError::InvalidAnswer(msg));
    if items.is_empty() {
        return invalid("no answers".into());
    }
    let mut seen = HashSet::new();
    for item in items {
        if !task.asks(item.codebook) {
            return invalid(format!("{} was not asked", item.codebook));
        }
        if !seen.insert(item.codebook) {
            return invalid(format!("{} answered twice", item.codebook));
        }
        let book = config.codebook(item.codebook);
        match &item.value {
            AnswerValue::Code(c) if !book.contains(*c) => {
                return invalid(format!("code {c} not in {}", item.codebook));
            }
            AnswerValue::OpenText(_) if !book.allows_open_text => {
                return invalid(format!("{} takes no open text", item.codebook));
            }
            AnswerValue::OpenText(t) if t.trim().is_empty() => {
                return invalid("empty open text".into());
            }
            _ => {}
        }
    }
    if seen.contains(&CodebookId::Transport) {
        let travelling = items
            .iter()
            .any(|a| a.codebook == CodebookId::Activity && a.value == AnswerValue::Code(config.travel_code));
        if !travelling {
            return invalid("transport answered but activity is not travelling".into());
        }
    }
    Ok(())
}

/// Walks a generated timeline, releasing tasks as their emit time passes.
#[derive(Debug, Clone)]
pub struct TimelineCursor {
    tasks: Vec<DiaryTask>,
    next: usize,
}

impl TimelineCursor {
    pub fn new(tasks: Vec<DiaryTask>) -> Self {
        Self { tasks, next: 0 }
    }

    /// Tasks with `emit_at <= now` not released before.
    pub fn take_due(&mut self, now: TsMs) -> &[DiaryTask] {
        let start = self.next;
        while self.next < self.tasks.len() && self.tasks[self.next].emit_at <= now {
            self.next += 1;
        }
        &self.tasks[start..self.next]
    }

    /// Releases due tasks into `queue`; returns how many were evicted.
    pub fn emit_into(&mut self, queue: &mut TaskQueue, now: TsMs) -> usize {
        let mut evicted = 0;
        for task in self.take_due(now).to_vec() {
            // timeline ids are unique, so a duplicate means the queue was fed elsewhere
            if let Ok(Some(_)) = queue.enqueue(task) {
                evicted += 1;
            }
        }
        evicted
    }

    pub fn released(&self) -> usize {
        self.next
    }

    pub fn remaining(&self) -> usize {
        self.tasks.len() - self.next
    }

    pub fn is_finished(&self) -> bool {
        self.next == self.tasks.len()
    }

    pub fn next_emit_at(&self) -> Option<TsMs> {
        self.tasks.get(self.next).map(|t| t.emit_at)
    }
}
