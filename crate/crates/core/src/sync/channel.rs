//! The rural-to-center channel: a link abstraction plus a deterministic
//! simulated implementation driven by a schedule of Up/Down segments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::{PatientId, RecordId};
use crate::store::{decode_record, encode_record, StoreError, TierStore};
use crate::time::Timestamp;

use super::{apply_remote, ApplyOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelState {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: i64,
    pub end: i64,
    pub state: ChannelState,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid channel schedule: {0}")]
pub struct ScheduleError(pub String);

/// Up/Down segments partitioning `[segments[0].start, last.end)` on the
/// virtual clock. Before the first segment the channel is Down; after the
/// last it keeps the last segment's state.
///
/// Each message is a request leg followed by a response leg, each taking
/// `latency` seconds. A leg succeeds only if no Down segment intersects it,
/// so a drop between the legs leaves the request applied at the center but
/// unacknowledged at the sender.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSchedule {
    pub seed: u64,
    pub segments: Vec<Segment>,
    pub latency: i64,
}

impl ChannelSchedule {
    pub fn new(seed: u64, segments: Vec<Segment>, latency: i64) -> Result<Self, ScheduleError> {
        let s = Self {
            seed,
            segments,
            latency,
        };
        s.validate()?;
        Ok(s)
    }

    /// Always up from time zero.
    pub fn always_up(latency: i64) -> Self {
        Self {
            seed: 0,
            segments: vec![Segment {
                start: 0,
                end: 1,
                state: ChannelState::Up,
            }],
            latency,
        }
    }

    /// Random alternating segments with lengths drawn uniformly from
    /// `[1, 2 * mean_segment]`, each Down with probability `down_fraction`,
    /// followed by an Up tail of `tail_up` seconds ending at `end`.
    pub fn random(seed: u64, end: i64, mean_segment: i64, down_fraction: f64, tail_up: i64, latency: i64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut segments: Vec<Segment> = Vec::new();
        let body_end = (end - tail_up).max(0);
        let mut t = 0;
        while t < body_end {
            let len = rng.random_range(1..=(2 * mean_segment).max(1));
            let state = if rng.random_bool(down_fraction.clamp(0.0, 1.0)) {
                ChannelState::Down
            } else {
                ChannelState::Up
            };
            let seg_end = (t + len).min(body_end);
            push_segment(&mut segments, t, seg_end, state);
            t = seg_end;
        }
        push_segment(&mut segments, t, end.max(t + 1), ChannelState::Up);
        Self {
            seed,
            segments,
            latency,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.segments.is_empty() {
            return Err(ScheduleError("no segments".into()));
        }
        if self.latency < 0 {
            return Err(ScheduleError("negative latency".into()));
        }
        for s in &self.segments {
            if s.start >= s.end {
                return Err(ScheduleError(format!("empty segment [{}, {})", s.start, s.end)));
            }
        }
        for w in self.segments.windows(2) {
            if w[0].end != w[1].start {
                return Err(ScheduleError(format!(
                    "segments must be contiguous: {} then {}",
                    w[0].end, w[1].start
                )));
            }
        }
        Ok(())
    }

    pub fn state_at(&self, t: Timestamp) -> ChannelState {
        let t = t.as_secs();
        if t < self.segments[0].start {
            return ChannelState::Down;
        }
        self.segments
            .iter()
            .find(|s| s.start <= t && t < s.end)
            .or(self.segments.last())
            .map(|s| s.state)
            .expect("validated schedule is non-empty")
    }

    /// True when the channel is Up at every instant of `[from, to)`.
    pub fn up_during(&self, from: Timestamp, to: Timestamp) -> bool {
        let (a, b) = (from.as_secs(), to.as_secs().max(from.as_secs() + 1));
        if a < self.segments[0].start {
            return false;
        }
        let last = self.segments.last().expect("non-empty");
        self.segments
            .iter()
            .filter(|s| s.start < b && a < s.end)
            .all(|s| s.state == ChannelState::Up)
            && (b <= last.end || last.state == ChannelState::Up)
    }

    /// State changes in time order, starting with the initial state.
    pub fn transitions(&self) -> Vec<(Timestamp, ChannelState)> {
        let mut out: Vec<(Timestamp, ChannelState)> = Vec::new();
        for s in &self.segments {
            if out.last().map(|(_, st)| *st) != Some(s.state) {
                out.push((Timestamp::from_secs(s.start), s.state));
            }
        }
        out
    }

    /// Total Down seconds inside the scheduled timeline.
    pub fn downtime(&self) -> i64 {
        self.segments
            .iter()
            .filter(|s| s.state == ChannelState::Down)
            .map(|s| s.end - s.start)
            .sum()
    }
}

fn push_segment(segments: &mut Vec<Segment>, start: i64, end: i64, state: ChannelState) {
    if start >= end {
        return;
    }
    match segments.last_mut() {
        Some(last) if last.state == state && last.end == start => last.end = end,
        _ => segments.push(Segment { start, end, state }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("channel down")]
    Down,
    #[error("center rejected the message: {0}")]
    Rejected(String),
    #[error("transport failure: {0}")]
    Transport(String),
}

/// The center as seen from the rural site. Every call is one WAN message.
pub trait CenterLink {
    /// Whether a message may be started at `at`.
    fn is_up(&self, at: Timestamp) -> bool;

    /// Virtual seconds one request/response exchange occupies.
    fn round_trip(&self) -> i64;

    /// REFRESH: ship one encoded record for idempotent apply at the center.
    fn push_record(&mut self, record: &[u8], at: Timestamp) -> Result<ApplyOutcome, LinkError>;

    /// PREFETCH: ids of every record the center holds for a patient.
    fn folder_manifest(&mut self, patient: PatientId, at: Timestamp) -> Result<Vec<RecordId>, LinkError>;

    /// PREFETCH: one encoded record from the patient's folder.
    fn fetch_record(&mut self, patient: PatientId, record: RecordId, at: Timestamp) -> Result<Vec<u8>, LinkError>;
}

/// Bit-flip applied to the next pushed message, for fault-injection tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptNextPush {
    pub byte: usize,
    pub mask: u8,
}

/// A center store reachable through a simulated channel.
#[derive(Debug)]
pub struct SimCenter {
    pub store: TierStore,
    pub schedule: ChannelSchedule,
    pub corrupt_next_push: Option<CorruptNextPush>,
    /// Every message the center received, in arrival order.
    pub received: u64,
}

impl SimCenter {
    pub fn new(store: TierStore, schedule: ChannelSchedule) -> Self {
        Self {
            store,
            schedule,
            corrupt_next_push: None,
            received: 0,
        }
    }

    fn legs(&self, at: Timestamp) -> (bool, bool) {
        let l = self.schedule.latency;
        let request = self.schedule.up_during(at, at + l);
        let response = request && self.schedule.up_during(at + l, at + 2 * l);
        (request, response)
    }
}

fn store_rejection(e: StoreError) -> LinkError {
    LinkError::Rejected(e.to_string())
}

impl CenterLink for SimCenter {
    fn is_up(&self, at: Timestamp) -> bool {
        self.schedule.state_at(at) == ChannelState::Up
    }

    fn round_trip(&self) -> i64 {
        2 * self.schedule.latency
    }

    fn push_record(&mut self, record: &[u8], at: Timestamp) -> Result<ApplyOutcome, LinkError> {
        let (request, response) = self.legs(at);
        if !request {
            return Err(LinkError::Down);
        }
        self.received += 1;
        let mut bytes = record.to_vec();
        if let Some(c) = self.corrupt_next_push.take() {
            if let Some(b) = bytes.get_mut(c.byte) {
                *b ^= c.mask;
            }
        }
        let arrival = at + self.schedule.latency;
        let outcome = decode_record(&bytes)
            .and_then(|r| apply_remote(&mut self.store, r, arrival))
            .map_err(store_rejection)?;
        if !response {
            return Err(LinkError::Down);
        }
        Ok(outcome)
    }

    fn folder_manifest(&mut self, patient: PatientId, at: Timestamp) -> Result<Vec<RecordId>, LinkError> {
        let (_, response) = self.legs(at);
        if !response {
            return Err(LinkError::Down);
        }
        self.received += 1;
        Ok(self
            .store
            .query_patient(patient)
            .map_err(store_rejection)?
            .iter()
            .map(|p| p.record_id())
            .collect())
    }

    fn fetch_record(&mut self, patient: PatientId, record: RecordId, at: Timestamp) -> Result<Vec<u8>, LinkError> {
        let (_, response) = self.legs(at);
        if !response {
            return Err(LinkError::Down);
        }
        self.received += 1;
        let (_, rec) = self.store.lookup(record).map_err(store_rejection)?;
        if rec.pip.patient_id() != patient {
            return Err(LinkError::Rejected(format!("{record} is not in this folder")));
        }
        Ok(encode_record(&rec))
    }
}
