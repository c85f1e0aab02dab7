//! PREFETCH and REFRESH between the rural site and the medical center.
//!
//! The engine runs at the rural site and owns that site's [`TierStore`].
//! REFRESH stores every new visit record locally first, queues it in an
//! outbox and forwards it oldest-first whenever the channel is up. Delivery
//! is at-least-once; the center's apply is idempotent on record id, so the
//! effect is exactly-once. PREFETCH pulls the full folder of every patient
//! with an upcoming consultation into the Local tier ahead of time, so the
//! consult-time read needs no WAN traffic.
//!
//! All mutations go through `record_locally`, `execute_prefetch`,
//! `flush_outbox`, `consult_read` and `tick`, which take `&mut self`;
//! callers on other threads serialize through whatever owns the engine.

pub mod channel;
pub mod scenario;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::{AttachmentId, BookingId, PatientId, RecordId};
use crate::model::{patient_folder, Pip};
use crate::store::{decode_record, encode_record, StoreError, StoredRecord, Tier, TierStore};
use crate::time::{Timestamp, HOUR};

pub use channel::{CenterLink, ChannelSchedule, ChannelState, LinkError, Segment, SimCenter};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncStats {
    pub wan_messages: u64,
    pub records_forwarded: u64,
    pub duplicates_suppressed: u64,
    pub prefetch_hits: u64,
    pub prefetch_misses: u64,
}

impl SyncStats {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

impl AddAssign for SyncStats {
    fn add_assign(&mut self, o: Self) {
        self.wan_messages += o.wan_messages;
        self.records_forwarded += o.records_forwarded;
        self.duplicates_suppressed += o.duplicates_suppressed;
        self.prefetch_hits += o.prefetch_hits;
        self.prefetch_misses += o.prefetch_misses;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutboxState {
    Queued,
    InFlight,
    Acked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboxEntry {
    pub record_id: RecordId,
    pub enqueued_at: Timestamp,
    pub attempts: u32,
    pub state: OutboxState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConsultMode {
    Teleconsultation,
    Telediagnosis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsultationEntry {
    pub booking_id: BookingId,
    pub patient_id: PatientId,
    pub start_time: Timestamp,
    pub mode: ConsultMode,
    /// Only meaningful for telediagnosis.
    pub report_complete: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsultationSchedule {
    pub entries: Vec<ConsultationEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PrefetchRequest {
    pub patient_id: PatientId,
    pub booking_id: BookingId,
}

/// Consultations whose records should be local by now: every
/// teleconsultation starting within `[now, now + horizon]`, and every
/// telediagnosis in that window whose report is not yet complete.
pub fn prefetch_set(schedule: &ConsultationSchedule, now: Timestamp, horizon: i64) -> BTreeSet<PrefetchRequest> {
    assert!(horizon > 0, "prefetch horizon must be positive");
    schedule
        .entries
        .iter()
        .filter(|e| now <= e.start_time && e.start_time <= now + horizon)
        .filter(|e| match e.mode {
            ConsultMode::Teleconsultation => true,
            ConsultMode::Telediagnosis => !e.report_complete,
        })
        .map(|e| PrefetchRequest {
            patient_id: e.patient_id,
            booking_id: e.booking_id,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApplyOutcome {
    Applied,
    Duplicate,
}

/// Receive side of REFRESH: idempotent ingest into the center's Main tier.
pub fn apply_remote(center: &mut TierStore, record: StoredRecord, now: Timestamp) -> Result<ApplyOutcome, StoreError> {
    let out = center.ingest(record.pip, record.blobs, Tier::Main, now)?;
    Ok(if out.inserted {
        ApplyOutcome::Applied
    } else {
        ApplyOutcome::Duplicate
    })
}

/// [`apply_remote`] on the wire form; a corrupted envelope is a
/// `ChecksumMismatch`.
pub fn apply_remote_bytes(center: &mut TierStore, bytes: &[u8], now: Timestamp) -> Result<ApplyOutcome, StoreError> {
    apply_remote(center, decode_record(bytes)?, now)
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("channel down; requests deferred to the next tick")]
    ChannelDown,
    #[error("tick at {now} is before the previous tick at {last}")]
    ClockWentBackwards { last: Timestamp, now: Timestamp },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Link(LinkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncConfig {
    /// How far ahead of a consultation its records are prefetched.
    pub horizon: i64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self { horizon: 24 * HOUR }
    }
}

/// The engine's own bookkeeping, persisted separately from the store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineState {
    pub outbox: VecDeque<OutboxEntry>,
    pub forwarded: BTreeSet<RecordId>,
    pub pending: BTreeSet<PrefetchRequest>,
    /// Stored as `[request, records]` pairs: JSON keys must be strings.
    #[serde(with = "pairs")]
    pub prefetched: BTreeMap<PrefetchRequest, Vec<RecordId>>,
    pub schedule: ConsultationSchedule,
    pub stats: SyncStats,
    pub last_tick: Option<Timestamp>,
    pub cursor: Timestamp,
}

mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(map: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// Result of a consult-time folder read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsultRead {
    pub folder: Vec<Pip>,
    pub stats: SyncStats,
    pub was_prefetched: bool,
}

#[derive(Debug)]
pub struct SyncEngine {
    store: TierStore,
    config: SyncConfig,
    state: EngineState,
}

impl SyncEngine {
    pub fn new(store: TierStore, config: SyncConfig) -> Self {
        Self::with_state(store, config, EngineState::default())
    }

    /// Resumes from persisted state; re-pins every outbox record.
    pub fn with_state(mut store: TierStore, config: SyncConfig, state: EngineState) -> Self {
        for e in &state.outbox {
            store.pin_local(e.record_id);
        }
        Self { store, config, state }
    }

    pub fn store(&self) -> &TierStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut TierStore {
        &mut self.store
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn config(&self) -> SyncConfig {
        self.config
    }

    pub fn stats(&self) -> SyncStats {
        self.state.stats
    }

    pub fn outbox(&self) -> impl Iterator<Item = &OutboxEntry> {
        self.state.outbox.iter()
    }

    pub fn outbox_len(&self) -> usize {
        self.state.outbox.len()
    }

    pub fn schedule(&self) -> &ConsultationSchedule {
        &self.state.schedule
    }

    pub fn set_schedule(&mut self, schedule: ConsultationSchedule) {
        self.state.schedule = schedule;
    }

    /// REFRESH, first half: keep the record locally and queue it for the
    /// center. Works the same whether or not the channel is up.
    pub fn record_locally(
        &mut self,
        pip: Pip,
        blobs: BTreeMap<AttachmentId, Vec<u8>>,
        now: Timestamp,
    ) -> Result<OutboxEntry, StoreError> {
        let out = self.store.ingest(pip, blobs, Tier::Local, now)?;
        let id = out.record_id;
        if let Some(e) = self.state.outbox.iter().find(|e| e.record_id == id) {
            return Ok(e.clone());
        }
        if self.state.forwarded.contains(&id) {
            return Ok(OutboxEntry {
                record_id: id,
                enqueued_at: now,
                attempts: 0,
                state: OutboxState::Acked,
            });
        }
        self.store.pin_local(id);
        let entry = OutboxEntry {
            record_id: id,
            enqueued_at: now,
            attempts: 0,
            state: OutboxState::Queued,
        };
        self.state.outbox.push_back(entry.clone());
        Ok(entry)
    }

    fn start_at(&mut self, now: Timestamp) -> Timestamp {
        self.state.cursor = self.state.cursor.max(now);
        self.state.cursor
    }

    /// REFRESH, second half: forward queued records oldest-first while the
    /// channel stays up. A failed exchange leaves its entry queued.
    pub fn flush_outbox(&mut self, link: &mut dyn CenterLink, now: Timestamp) -> Result<SyncStats, StoreError> {
        let mut delta = SyncStats::default();
        let mut t = self.start_at(now);
        while let Some(front) = self.state.outbox.front_mut() {
            if !link.is_up(t) {
                break;
            }
            front.state = OutboxState::InFlight;
            front.attempts += 1;
            let id = front.record_id;
            let (_, record) = self.store.lookup(id)?;
            delta.wan_messages += 1;
            let result = link.push_record(&encode_record(&record), t);
            t = t + link.round_trip();
            match result {
                Ok(outcome) => {
                    self.state.outbox.pop_front();
                    self.state.forwarded.insert(id);
                    delta.records_forwarded += 1;
                    if outcome == ApplyOutcome::Duplicate {
                        delta.duplicates_suppressed += 1;
                    }
                    self.store.unpin_local(id)?;
                }
                Err(_) => {
                    if let Some(front) = self.state.outbox.front_mut() {
                        front.state = OutboxState::Queued;
                    }
                    break;
                }
            }
        }
        self.state.cursor = t;
        self.state.stats += delta;
        Ok(delta)
    }

    fn is_satisfied(&self, req: &PrefetchRequest) -> bool {
        self.state
            .prefetched
            .get(req)
            .is_some_and(|ids| ids.iter().all(|id| self.store.local_cache().contains(*id)))
    }

    /// Manifest plus one fetch per record not already local.
    fn fetch_folder(
        &mut self,
        link: &mut dyn CenterLink,
        patient: PatientId,
        t: &mut Timestamp,
        delta: &mut SyncStats,
    ) -> Result<Vec<RecordId>, SyncError> {
        if !link.is_up(*t) {
            return Err(SyncError::ChannelDown);
        }
        delta.wan_messages += 1;
        let manifest = link.folder_manifest(patient, *t);
        *t = *t + link.round_trip();
        let manifest = manifest.map_err(link_error)?;
        for id in &manifest {
            if self.store.local_cache().contains(*id) {
                self.store.cache_touch(*id);
                continue;
            }
            if !link.is_up(*t) {
                return Err(SyncError::ChannelDown);
            }
            delta.wan_messages += 1;
            let bytes = link.fetch_record(patient, *id, *t);
            *t = *t + link.round_trip();
            let record = decode_record(&bytes.map_err(link_error)?)?;
            self.store.ingest_record(record, Tier::Local)?;
        }
        Ok(manifest)
    }

    /// Pulls each requested patient's full folder into Local. Requests
    /// already satisfied count as hits and cost nothing. If the channel is
    /// down the remaining requests stay pending for the next tick.
    pub fn execute_prefetch(
        &mut self,
        requests: &BTreeSet<PrefetchRequest>,
        link: &mut dyn CenterLink,
        now: Timestamp,
    ) -> Result<SyncStats, SyncError> {
        let mut delta = SyncStats::default();
        let mut t = self.start_at(now);
        let mut down = false;
        for req in requests {
            if self.is_satisfied(req) {
                delta.prefetch_hits += 1;
                self.state.pending.remove(req);
                continue;
            }
            if down {
                self.state.pending.insert(*req);
                continue;
            }
            match self.fetch_folder(link, req.patient_id, &mut t, &mut delta) {
                Ok(ids) => {
                    delta.prefetch_misses += 1;
                    self.state.prefetched.insert(*req, ids);
                    self.state.pending.remove(req);
                }
                Err(SyncError::ChannelDown) => {
                    down = true;
                    self.state.pending.insert(*req);
                }
                Err(e) => {
                    self.state.pending.insert(*req);
                    self.state.cursor = t;
                    self.state.stats += delta;
                    return Err(e);
                }
            }
        }
        self.state.cursor = t;
        self.state.stats += delta;
        if down && delta.is_zero() {
            return Err(SyncError::ChannelDown);
        }
        Ok(delta)
    }

    /// The consult-time read of a patient's folder from Local. Free when the
    /// consultation was prefetched; otherwise fetched on demand.
    pub fn consult_read(
        &mut self,
        request: PrefetchRequest,
        link: &mut dyn CenterLink,
        now: Timestamp,
    ) -> Result<ConsultRead, SyncError> {
        let mut delta = SyncStats::default();
        let was_prefetched = self.is_satisfied(&request);
        if was_prefetched {
            delta.prefetch_hits += 1;
        } else {
            delta.prefetch_misses += 1;
            let mut t = self.start_at(now);
            let fetched = self.fetch_folder(link, request.patient_id, &mut t, &mut delta);
            self.state.cursor = t;
            if let Ok(ids) = &fetched {
                self.state.prefetched.insert(request, ids.clone());
            }
            self.state.stats += delta;
            fetched?;
            return Ok(ConsultRead {
                folder: self.local_folder(request.patient_id),
                stats: delta,
                was_prefetched,
            });
        }
        self.state.stats += delta;
        Ok(ConsultRead {
            folder: self.local_folder(request.patient_id),
            stats: delta,
            was_prefetched,
        })
    }

    fn local_folder(&mut self, patient: PatientId) -> Vec<Pip> {
        let folder = patient_folder(self.store.local_cache().records().map(|r| &r.pip), patient);
        for p in &folder {
            self.store.cache_touch(p.record_id());
        }
        folder
    }

    /// One engine step: prefetch what the schedule needs, then flush the
    /// outbox. A second tick at the same instant does nothing.
    pub fn tick(&mut self, link: &mut dyn CenterLink, now: Timestamp) -> Result<SyncStats, SyncError> {
        if let Some(last) = self.state.last_tick {
            if now < last {
                return Err(SyncError::ClockWentBackwards { last, now });
            }
            if now == last {
                return Ok(SyncStats::default());
            }
        }
        self.state.last_tick = Some(now);

        let mut wanted = prefetch_set(&self.state.schedule, now, self.config.horizon);
        wanted.extend(self.state.pending.iter().copied());
        let schedule = &self.state.schedule;
        wanted.retain(|r| {
            schedule
                .entries
                .iter()
                .any(|e| e.booking_id == r.booking_id && e.start_time >= now)
        });
        wanted.retain(|r| !self.is_satisfied(r));
        self.state.pending.retain(|r| wanted.contains(r));

        let mut delta = match self.execute_prefetch(&wanted, link, now) {
            Ok(d) => d,
            Err(SyncError::ChannelDown) => SyncStats::default(),
            Err(e) => return Err(e),
        };
        delta += self.flush_outbox(link, now)?;
        Ok(delta)
    }
}

fn link_error(e: LinkError) -> SyncError {
    match e {
        LinkError::Down => SyncError::ChannelDown,
        other => SyncError::Link(other),
    }
}
