//! Three-tier record store.
//!
//! * **Local**: a bounded LRU cache close to the user (rural site, or the
//!   center's consult-room cache). May hold copies of records that also live
//!   in Main or LongTerm.
//! * **Main**: visits from the recent retention window.
//! * **LongTerm**: older visits. Migrated records first sit in an unsealed
//!   buffer; [`TierStore::pack_volume`] seals them into an immutable
//!   [`ArchiveVolume`] per time window.
//!
//! Main and LongTerm are disjoint: migration moves, it never copies.
//!
//! A store is either purely in memory or backed by a directory:
//!
//! ```text
//! <dir>/local/<record_id>.rec
//! <dir>/main/<record_id>.rec
//! <dir>/longterm/buffer/<record_id>.rec
//! <dir>/longterm/volumes/<start>-<end>.mrv
//! ```

mod local;
pub mod volume;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, TimeZone, Utc};
use thiserror::Error;

use crate::digest::Digest;
use crate::id::{AttachmentId, PatientId, ProblemId, RecordId};
use crate::model::{pip_digest, sort_folder, ModelError, Pip};
use crate::time::{Timestamp, DAY};

pub use local::LocalCache;
pub use volume::{read_from_volume, ArchiveVolume, VolumeError, VolumeIndexEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tier {
    Local,
    Main,
    LongTerm,
}

/// A PIP together with the bytes of its FILE-class attachments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRecord {
    pub pip: Pip,
    pub blobs: BTreeMap<AttachmentId, Vec<u8>>,
    pub ingested_at: Timestamp,
}

impl StoredRecord {
    /// Validates the PIP and checks that `blobs` covers exactly its FILE
    /// attachments with matching checksums.
    pub fn verify(&self) -> Result<(), StoreError> {
        self.pip.validate()?;
        for a in self.pip.file_attachments() {
            let blob = self
                .blobs
                .get(&a.attachment_id)
                .ok_or(StoreError::MissingBlob(a.attachment_id))?;
            if !a.verify_blob(blob) {
                return Err(StoreError::ChecksumMismatch(format!(
                    "blob of attachment {}",
                    a.attachment_id
                )));
            }
        }
        if let Some(extra) = self
            .blobs
            .keys()
            .find(|id| !self.pip.file_attachments().any(|a| a.attachment_id == **id))
        {
            return Err(StoreError::UnexpectedBlob(*extra));
        }
        Ok(())
    }

    pub fn record_id(&self) -> RecordId {
        self.pip.record_id()
    }

    /// Digest over the PIP and its blobs; identifies record content.
    pub fn content_digest(&self) -> Digest {
        Digest::of(&volume::encode_payload(self))
    }
}

/// Self-verifying byte form of a single record, used for record files and
/// for shipping records between sites:
/// `sha256(rest)[32] | rest`, where `rest = u64 ingested_at | payload`.
pub fn encode_record(record: &StoredRecord) -> Vec<u8> {
    let payload = volume::encode_payload(record);
    let mut rest = Vec::with_capacity(8 + payload.len());
    rest.extend_from_slice(&(record.ingested_at.as_secs() as u64).to_le_bytes());
    rest.extend_from_slice(&payload);
    let mut out = Vec::with_capacity(32 + rest.len());
    out.extend_from_slice(Digest::of(&rest).as_bytes());
    out.extend_from_slice(&rest);
    out
}

pub fn decode_record(bytes: &[u8]) -> Result<StoredRecord, StoreError> {
    if bytes.len() < 40 {
        return Err(StoreError::ChecksumMismatch("record envelope truncated".into()));
    }
    let payload = &bytes[40..];
    if Digest::of(&bytes[32..]).as_bytes()[..] != bytes[..32] {
        return Err(StoreError::ChecksumMismatch("record envelope".into()));
    }
    let ingested = u64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes"));
    let record = volume::decode_payload(payload, Timestamp::from_secs(ingested as i64))?;
    record.verify()?;
    Ok(record)
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("FILE attachment {0} has no blob")]
    MissingBlob(AttachmentId),
    #[error("blob {0} does not belong to any FILE attachment")]
    UnexpectedBlob(AttachmentId),
    #[error("long-term tier accepts records only through volume packing")]
    TierSealed,
    #[error("record {0} not found")]
    NotFound(RecordId),
    #[error("record {0} already stored with different content")]
    ConflictingRecord(RecordId),
    #[error("window [{0}, {1}) overlaps a sealed volume")]
    OverlappingVolume(Timestamp, Timestamp),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StoreError {
    pub fn is_corrupt_payload(&self) -> bool {
        matches!(self, StoreError::Volume(VolumeError::CorruptPayload(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetentionPolicy {
    /// Seconds a visit stays in Main before it migrates.
    pub main_retention: i64,
    /// Maximum number of records the Local tier holds (pinned ones excepted).
    pub local_capacity: usize,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self {
            main_retention: 90 * DAY,
            local_capacity: 1024,
        }
    }
}

impl RetentionPolicy {
    pub fn new(main_retention: i64, local_capacity: usize) -> Self {
        assert!(main_retention > 0, "main retention must be positive");
        assert!(local_capacity > 0, "local capacity must be positive");
        Self {
            main_retention,
            local_capacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestOutcome {
    pub record_id: RecordId,
    /// False when the record was already present (idempotent re-ingest).
    pub inserted: bool,
    /// Local records evicted to make room.
    pub evicted: Vec<RecordId>,
}

/// The calendar month (UTC) containing `t`, as a half-open window.
pub fn month_window(t: Timestamp) -> (Timestamp, Timestamp) {
    let dt = t.to_datetime();
    let first = NaiveDate::from_ymd_opt(dt.year(), dt.month(), 1).expect("valid month start");
    let next = if dt.month() == 12 {
        NaiveDate::from_ymd_opt(dt.year() + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(dt.year(), dt.month() + 1, 1)
    }
    .expect("valid month start");
    let at = |d: NaiveDate| Timestamp::from_datetime(Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).expect("midnight")));
    (at(first), at(next))
}

#[derive(Debug)]
pub struct TierStore {
    policy: RetentionPolicy,
    dir: Option<PathBuf>,
    local: LocalCache,
    main: BTreeMap<RecordId, StoredRecord>,
    buffer: BTreeMap<RecordId, StoredRecord>,
    volumes: BTreeMap<Timestamp, ArchiveVolume>,
    archived: HashMap<RecordId, Timestamp>,
}

const LOCAL_DIR: &str = "local";
const MAIN_DIR: &str = "main";
const BUFFER_DIR: &str = "longterm/buffer";
const VOLUME_DIR: &str = "longterm/volumes";

impl TierStore {
    pub fn in_memory(policy: RetentionPolicy) -> Self {
        Self {
            policy,
            dir: None,
            local: LocalCache::new(policy.local_capacity),
            main: BTreeMap::new(),
            buffer: BTreeMap::new(),
            volumes: BTreeMap::new(),
            archived: HashMap::new(),
        }
    }

    /// Opens (or creates) a directory-backed store and loads every tier.
    pub fn open(dir: impl AsRef<Path>, policy: RetentionPolicy) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        for sub in [LOCAL_DIR, MAIN_DIR, BUFFER_DIR, VOLUME_DIR] {
            fs::create_dir_all(dir.join(sub))?;
        }
        let mut store = Self::in_memory(policy);
        for r in read_record_dir(&dir.join(MAIN_DIR))? {
            store.main.insert(r.record_id(), r);
        }
        for r in read_record_dir(&dir.join(BUFFER_DIR))? {
            store.buffer.insert(r.record_id(), r);
        }
        let mut cached = read_record_dir(&dir.join(LOCAL_DIR))?;
        cached.sort_by_key(|r| (r.ingested_at, r.record_id()));
        for r in cached {
            store.local.put(r);
        }
        for entry in fs::read_dir(dir.join(VOLUME_DIR))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "mrv") {
                let vol = ArchiveVolume::open(&path)?;
                store.register_volume(vol);
            }
        }
        store.dir = Some(dir);
        // Records over capacity at load time were evicted in memory only.
        let on_disk: Vec<RecordId> = list_ids(&store.tier_dir(LOCAL_DIR).expect("dir set"))?;
        for id in on_disk {
            if !store.local.contains(id) {
                store.remove_file(LOCAL_DIR, id)?;
            }
        }
        Ok(store)
    }

    pub fn policy(&self) -> RetentionPolicy {
        self.policy
    }

    pub fn local_len(&self) -> usize {
        self.local.len()
    }

    pub fn main_len(&self) -> usize {
        self.main.len()
    }

    /// Buffered plus sealed long-term records.
    pub fn long_term_len(&self) -> usize {
        self.buffer.len() + self.archived.len()
    }

    pub fn buffered_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn main_ids(&self) -> Vec<RecordId> {
        self.main.keys().copied().collect()
    }

    pub fn local_ids(&self) -> Vec<RecordId> {
        let mut ids: Vec<_> = self.local.records().map(|r| r.record_id()).collect();
        ids.sort();
        ids
    }

    pub fn long_term_ids(&self) -> Vec<RecordId> {
        let mut ids: Vec<_> = self.buffer.keys().chain(self.archived.keys()).copied().collect();
        ids.sort();
        ids
    }

    pub fn volumes(&self) -> impl Iterator<Item = &ArchiveVolume> {
        self.volumes.values()
    }

    /// File backing a sealed volume, for a directory-backed store.
    pub fn volume_path(&self, volume: &ArchiveVolume) -> Option<PathBuf> {
        let name = format!("{}.mrv", volume.volume_id());
        self.dir.as_ref().map(|d| d.join(VOLUME_DIR).join(name))
    }

    pub fn local_cache(&self) -> &LocalCache {
        &self.local
    }

    /// Every tier currently holding the record, in search order.
    pub fn tiers_of(&self, id: RecordId) -> Vec<Tier> {
        let mut out = Vec::new();
        if self.local.contains(id) {
            out.push(Tier::Local);
        }
        if self.main.contains_key(&id) {
            out.push(Tier::Main);
        }
        if self.buffer.contains_key(&id) || self.archived.contains_key(&id) {
            out.push(Tier::LongTerm);
        }
        out
    }

    pub fn contains(&self, id: RecordId) -> bool {
        !self.tiers_of(id).is_empty()
    }

    /// Stores a record in `tier`. Re-ingesting a record that is already
    /// there is a no-op; a different record under the same id is an error.
    pub fn ingest(
        &mut self,
        pip: Pip,
        blobs: BTreeMap<AttachmentId, Vec<u8>>,
        tier: Tier,
        now: Timestamp,
    ) -> Result<IngestOutcome, StoreError> {
        self.ingest_record(
            StoredRecord {
                pip,
                blobs,
                ingested_at: now,
            },
            tier,
        )
    }

    pub fn ingest_record(&mut self, record: StoredRecord, tier: Tier) -> Result<IngestOutcome, StoreError> {
        if tier == Tier::LongTerm {
            return Err(StoreError::TierSealed);
        }
        record.verify()?;
        let id = record.record_id();
        let existing = match tier {
            Tier::Local => self.local.get(id).map(|r| pip_digest(&r.pip)),
            _ => self.main_or_long_term_digest(id)?,
        };
        if let Some(d) = existing {
            if d != pip_digest(&record.pip) {
                return Err(StoreError::ConflictingRecord(id));
            }
            return Ok(IngestOutcome {
                record_id: id,
                inserted: false,
                evicted: vec![],
            });
        }
        let evicted = match tier {
            Tier::Local => self.cache_put(record)?,
            _ => {
                self.write_file(MAIN_DIR, &record)?;
                self.main.insert(id, record);
                vec![]
            }
        };
        Ok(IngestOutcome {
            record_id: id,
            inserted: true,
            evicted,
        })
    }

    fn main_or_long_term_digest(&self, id: RecordId) -> Result<Option<Digest>, StoreError> {
        if let Some(r) = self.main.get(&id).or_else(|| self.buffer.get(&id)) {
            return Ok(Some(pip_digest(&r.pip)));
        }
        if let Some(start) = self.archived.get(&id) {
            return Ok(Some(pip_digest(&self.volumes[start].read_pip(id)?)));
        }
        Ok(None)
    }

    /// Searches Local, then Main, then LongTerm and returns the first hit.
    pub fn lookup(&self, id: RecordId) -> Result<(Tier, StoredRecord), StoreError> {
        if let Some(r) = self.local.get(id) {
            return Ok((Tier::Local, r.clone()));
        }
        if let Some(r) = self.main.get(&id) {
            return Ok((Tier::Main, r.clone()));
        }
        if let Some(r) = self.buffer.get(&id) {
            return Ok((Tier::LongTerm, r.clone()));
        }
        if let Some(start) = self.archived.get(&id) {
            return Ok((Tier::LongTerm, self.volumes[start].read(id)?));
        }
        Err(StoreError::NotFound(id))
    }

    fn collect_pips(
        &self,
        keep: impl Fn(&Pip) -> bool,
        keep_entry: impl Fn(&VolumeIndexEntry) -> bool,
    ) -> Result<Vec<Pip>, StoreError> {
        let mut found: BTreeMap<RecordId, Pip> = BTreeMap::new();
        let hot = self
            .local
            .records()
            .chain(self.main.values())
            .chain(self.buffer.values());
        for r in hot {
            if keep(&r.pip) {
                found.entry(r.record_id()).or_insert_with(|| r.pip.clone());
            }
        }
        for vol in self.volumes.values() {
            for e in vol.index().iter().filter(|e| keep_entry(e)) {
                if let std::collections::btree_map::Entry::Vacant(slot) = found.entry(e.record_id) {
                    slot.insert(vol.read_pip(e.record_id)?);
                }
            }
        }
        let mut out: Vec<Pip> = found.into_values().collect();
        sort_folder(&mut out);
        Ok(out)
    }

    /// Patient-oriented folder across all tiers.
    pub fn query_patient(&self, patient_id: PatientId) -> Result<Vec<Pip>, StoreError> {
        self.collect_pips(|p| p.patient_id() == patient_id, |e| e.patient_id == patient_id)
    }

    /// Problem-oriented folder across all tiers.
    pub fn query_problem(&self, problem_id: ProblemId) -> Result<Vec<Pip>, StoreError> {
        self.collect_pips(
            |p| p.assessment().problem_id == Some(problem_id),
            |e| e.problem_id == problem_id,
        )
    }

    /// Moves every Main record whose visit is strictly older than
    /// `now - main_retention` into the long-term buffer.
    pub fn migrate(&mut self, now: Timestamp, policy: &RetentionPolicy) -> Result<Vec<RecordId>, StoreError> {
        let cutoff = now - policy.main_retention;
        let due: Vec<RecordId> = self
            .main
            .values()
            .filter(|r| r.pip.visit_time() < cutoff)
            .map(|r| r.record_id())
            .collect();
        for id in &due {
            self.move_file(MAIN_DIR, BUFFER_DIR, *id)?;
            let r = self.main.remove(id).expect("due id is in main");
            self.buffer.insert(*id, r);
        }
        Ok(due)
    }

    /// Seals the buffered records created in `[start, end)` into a volume.
    /// An empty window still yields a (sealed, empty) volume.
    pub fn pack_volume(&mut self, window_start: Timestamp, window_end: Timestamp) -> Result<ArchiveVolume, StoreError> {
        if window_start >= window_end {
            return Err(VolumeError::InvalidWindow(window_start, window_end).into());
        }
        if self.volumes.values().any(|v| v.overlaps(window_start, window_end)) {
            return Err(StoreError::OverlappingVolume(window_start, window_end));
        }
        let members: Vec<&StoredRecord> = self
            .buffer
            .values()
            .filter(|r| (window_start..window_end).contains(&r.pip.visit_time()))
            .collect();
        let ids: Vec<RecordId> = members.iter().map(|r| r.record_id()).collect();
        let bytes = volume::encode_volume(window_start, window_end, &members)?;

        let vol = match self.dir.as_ref() {
            Some(dir) => {
                let name = format!("{}.mrv", volume::volume_id(window_start, window_end));
                let path = dir.join(VOLUME_DIR).join(name);
                write_atomic(&path, &bytes)?;
                ArchiveVolume::open(&path)?
            }
            None => ArchiveVolume::from_bytes(bytes)?,
        };
        for id in &ids {
            self.buffer.remove(id);
            self.remove_file(BUFFER_DIR, *id)?;
        }
        self.register_volume(vol.clone());
        Ok(vol)
    }

    /// Packs every calendar month that has ended by `now` and still has
    /// buffered records. Months already sealed are skipped; their late
    /// arrivals stay readable from the buffer.
    pub fn pack_due(&mut self, now: Timestamp) -> Result<Vec<ArchiveVolume>, StoreError> {
        let mut windows: Vec<(Timestamp, Timestamp)> = self
            .buffer
            .values()
            .map(|r| month_window(r.pip.visit_time()))
            .filter(|(_, end)| *end <= now)
            .collect();
        windows.sort();
        windows.dedup();
        let mut packed = Vec::new();
        for (start, end) in windows {
            if self.volumes.values().any(|v| v.overlaps(start, end)) {
                continue;
            }
            packed.push(self.pack_volume(start, end)?);
        }
        Ok(packed)
    }

    fn register_volume(&mut self, vol: ArchiveVolume) {
        for e in vol.index() {
            self.archived.insert(e.record_id, vol.window().0);
        }
        self.volumes.insert(vol.window().0, vol);
    }

    /// Caches a record in Local and returns the ids evicted to stay within
    /// capacity. Pinned records are never evicted.
    pub fn cache_put(&mut self, record: StoredRecord) -> Result<Vec<RecordId>, StoreError> {
        self.write_file(LOCAL_DIR, &record)?;
        let evicted = self.local.put(record);
        for id in &evicted {
            self.remove_file(LOCAL_DIR, *id)?;
        }
        Ok(evicted)
    }

    pub fn cache_touch(&mut self, id: RecordId) -> bool {
        self.local.touch(id)
    }

    pub fn pin_local(&mut self, id: RecordId) -> bool {
        self.local.pin(id)
    }

    pub fn unpin_local(&mut self, id: RecordId) -> Result<Vec<RecordId>, StoreError> {
        let evicted = self.local.unpin(id);
        for id in &evicted {
            self.remove_file(LOCAL_DIR, *id)?;
        }
        Ok(evicted)
    }

    fn tier_dir(&self, sub: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(sub))
    }

    fn write_file(&self, sub: &str, record: &StoredRecord) -> Result<(), StoreError> {
        if let Some(dir) = self.tier_dir(sub) {
            write_atomic(&dir.join(format!("{}.rec", record.record_id())), &encode_record(record))?;
        }
        Ok(())
    }

    fn remove_file(&self, sub: &str, id: RecordId) -> Result<(), StoreError> {
        if let Some(dir) = self.tier_dir(sub) {
            match fs::remove_file(dir.join(format!("{id}.rec"))) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Ok(())
    }

    fn move_file(&self, from: &str, to: &str, id: RecordId) -> Result<(), StoreError> {
        if let (Some(a), Some(b)) = (self.tier_dir(from), self.tier_dir(to)) {
            let name = format!("{id}.rec");
            fs::rename(a.join(&name), b.join(&name))?;
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn list_ids(dir: &Path) -> Result<Vec<RecordId>, StoreError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "rec") {
            if let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                ids.push(id);
            }
        }
    }
    Ok(ids)
}

fn read_record_dir(dir: &Path) -> Result<Vec<StoredRecord>, StoreError> {
    list_ids(dir)?
        .into_iter()
        .map(|id| decode_record(&fs::read(dir.join(format!("{id}.rec")))?))
        .collect()
}
