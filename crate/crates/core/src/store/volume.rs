//! Sealed long-term archive volumes.
//!
//! A volume packs every record created inside a time window into one file:
//!
//! ```text
//! header   "MRV1" | u32 version | u64 window_start | u64 window_end | u32 count
//! index    count x 142-byte entries, ascending by (created_at, record_id)
//!            record_id[26] patient_id[26] problem_id[26]
//!            u64 created_at | u64 ingested_at | u64 offset | u64 len
//!            checksum[32]
//! payload  per record: canonical PIP bytes, then its FILE blobs in
//!          attachment order
//! ```
//!
//! Integers are little-endian; times are epoch seconds; offsets are relative
//! to the start of the payload block. The index sits in front so a reader can
//! seek straight to one record without loading the rest of the file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::digest::Digest;
use crate::id::{PatientId, ProblemId, RecordId, ID_LEN};
use crate::model::Pip;
use crate::store::StoredRecord;
use crate::time::Timestamp;

pub const MAGIC: [u8; 4] = *b"MRV1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 4;
pub const ENTRY_LEN: usize = 3 * ID_LEN + 4 * 8 + 32;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("not an archive volume (bad magic)")]
    BadMagic,
    #[error("unsupported volume version {0}")]
    UnsupportedVersion(u32),
    #[error("volume truncated: {0}")]
    Truncated(&'static str),
    #[error("malformed volume: {0}")]
    Malformed(String),
    #[error("record {0} is not in this volume")]
    NotFound(RecordId),
    #[error("payload of record {0} fails its checksum")]
    CorruptPayload(RecordId),
    #[error("window [{0}, {1}) is empty or inverted")]
    InvalidWindow(Timestamp, Timestamp),
    #[error("record {0} created outside the volume window")]
    OutsideWindow(RecordId),
    #[error("volumes cannot hold times before the epoch")]
    NegativeTime,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeIndexEntry {
    pub record_id: RecordId,
    pub patient_id: PatientId,
    pub problem_id: ProblemId,
    pub created_at: Timestamp,
    pub ingested_at: Timestamp,
    pub payload_offset: u64,
    pub payload_len: u64,
    pub checksum: Digest,
}

impl VolumeIndexEntry {
    fn sort_key(&self) -> (Timestamp, RecordId) {
        (self.created_at, self.record_id)
    }

    fn write(&self, out: &mut Vec<u8>) -> Result<(), VolumeError> {
        out.extend_from_slice(&self.record_id.to_bytes());
        out.extend_from_slice(&self.patient_id.to_bytes());
        out.extend_from_slice(&self.problem_id.to_bytes());
        out.extend_from_slice(&epoch_u64(self.created_at)?.to_le_bytes());
        out.extend_from_slice(&epoch_u64(self.ingested_at)?.to_le_bytes());
        out.extend_from_slice(&self.payload_offset.to_le_bytes());
        out.extend_from_slice(&self.payload_len.to_le_bytes());
        out.extend_from_slice(self.checksum.as_bytes());
        Ok(())
    }

    fn parse(b: &[u8]) -> Result<Self, VolumeError> {
        debug_assert_eq!(b.len(), ENTRY_LEN);
        let bad_id = |e: crate::id::InvalidId| VolumeError::Malformed(e.to_string());
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &b[at..at + n];
            at += n;
            s
        };
        let record_id = RecordId::from_bytes(take(ID_LEN)).map_err(bad_id)?;
        let patient_id = PatientId::from_bytes(take(ID_LEN)).map_err(bad_id)?;
        let problem_id = ProblemId::from_bytes(take(ID_LEN)).map_err(bad_id)?;
        let created_at = Timestamp::from_secs(u64_le(take(8)) as i64);
        let ingested_at = Timestamp::from_secs(u64_le(take(8)) as i64);
        let payload_offset = u64_le(take(8));
        let payload_len = u64_le(take(8));
        let mut checksum = [0u8; 32];
        checksum.copy_from_slice(take(32));
        Ok(Self {
            record_id,
            patient_id,
            problem_id,
            created_at,
            ingested_at,
            payload_offset,
            payload_len,
            checksum: Digest(checksum),
        })
    }
}

fn u64_le(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8-byte slice"))
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4-byte slice"))
}

fn epoch_u64(t: Timestamp) -> Result<u64, VolumeError> {
    u64::try_from(t.as_secs()).map_err(|_| VolumeError::NegativeTime)
}

/// Serializes a record the way it sits in a volume payload.
pub fn encode_payload(record: &StoredRecord) -> Vec<u8> {
    let mut out = record.pip.canonical_bytes();
    for a in record.pip.file_attachments() {
        out.extend_from_slice(&record.blobs[&a.attachment_id]);
    }
    out
}

/// Inverse of [`encode_payload`]. Checks structure and blob checksums but
/// not the payload-level checksum, which lives in the volume index.
pub fn decode_payload(bytes: &[u8], ingested_at: Timestamp) -> Result<StoredRecord, VolumeError> {
    let (pip, mut at) = decode_pip_prefix(bytes)?;
    let mut blobs = BTreeMap::new();
    for a in pip.file_attachments() {
        let len = a.byte_len as usize;
        let blob = bytes.get(at..at + len).ok_or(VolumeError::Truncated("blob"))?;
        if !a.verify_blob(blob) {
            return Err(VolumeError::Malformed(format!(
                "blob {} does not match its attachment checksum",
                a.attachment_id
            )));
        }
        blobs.insert(a.attachment_id, blob.to_vec());
        at += len;
    }
    if at != bytes.len() {
        return Err(VolumeError::Malformed("trailing bytes after record".into()));
    }
    Ok(StoredRecord {
        pip,
        blobs,
        ingested_at,
    })
}

fn decode_pip_prefix(bytes: &[u8]) -> Result<(Pip, usize), VolumeError> {
    let mut stream = serde_json::Deserializer::from_slice(bytes).into_iter::<Pip>();
    let pip = match stream.next() {
        Some(Ok(pip)) => pip,
        Some(Err(e)) => return Err(VolumeError::Malformed(format!("pip: {e}"))),
        None => return Err(VolumeError::Truncated("pip")),
    };
    pip.validate()
        .map_err(|e| VolumeError::Malformed(format!("pip: {e}")))?;
    Ok((pip, stream.byte_offset()))
}

/// Builds the bytes of a sealed volume. Records are sorted by
/// (created_at, record_id); every record must fall inside the window.
pub fn encode_volume(
    window_start: Timestamp,
    window_end: Timestamp,
    records: &[&StoredRecord],
) -> Result<Vec<u8>, VolumeError> {
    if window_start >= window_end {
        return Err(VolumeError::InvalidWindow(window_start, window_end));
    }
    let mut sorted: Vec<&StoredRecord> = records.to_vec();
    sorted.sort_by_key(|r| (r.pip.visit_time(), r.pip.record_id()));
    if sorted.windows(2).any(|w| w[0].pip.record_id() == w[1].pip.record_id()) {
        return Err(VolumeError::Malformed("duplicate record in volume".into()));
    }

    let mut index = Vec::with_capacity(sorted.len() * ENTRY_LEN);
    let mut payload = Vec::new();
    for r in &sorted {
        let created = r.pip.visit_time();
        if created < window_start || created >= window_end {
            return Err(VolumeError::OutsideWindow(r.pip.record_id()));
        }
        let bytes = encode_payload(r);
        VolumeIndexEntry {
            record_id: r.pip.record_id(),
            patient_id: r.pip.patient_id(),
            problem_id: r.pip.problem_id(),
            created_at: created,
            ingested_at: r.ingested_at,
            payload_offset: payload.len() as u64,
            payload_len: bytes.len() as u64,
            checksum: Digest::of(&bytes),
        }
        .write(&mut index)?;
        payload.extend_from_slice(&bytes);
    }

    let count = u32::try_from(sorted.len()).map_err(|_| VolumeError::Malformed("too many records".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + index.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&epoch_u64(window_start)?.to_le_bytes());
    out.extend_from_slice(&epoch_u64(window_end)?.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&index);
    out.extend_from_slice(&payload);
    Ok(out)
}

#[derive(Debug, Clone)]
enum Source {
    Memory(Arc<[u8]>),
    File(PathBuf),
}

/// A sealed, immutable archive volume: parsed header and index, with the
/// payload either held in memory or read on demand from the file.
#[derive(Debug, Clone)]
pub struct ArchiveVolume {
    window_start: Timestamp,
    window_end: Timestamp,
    index: Vec<VolumeIndexEntry>,
    payload_base: u64,
    source: Source,
}

/// Summary produced by [`ArchiveVolume::verify`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    pub records: usize,
    pub payload_bytes: u64,
}

impl ArchiveVolume {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, VolumeError> {
        let total = bytes.len() as u64;
        let (ws, we, index) = parse_head(&mut &bytes[..], total)?;
        Ok(Self::assemble(ws, we, index, Source::Memory(bytes.into())))
    }

    /// Reads the header and index only; payloads are fetched per record.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, VolumeError> {
        let path = path.as_ref();
        let mut f = File::open(path)?;
        let total = f.metadata()?.len();
        let (ws, we, index) = parse_head(&mut f, total)?;
        Ok(Self::assemble(ws, we, index, Source::File(path.to_path_buf())))
    }

    fn assemble(window_start: Timestamp, window_end: Timestamp, index: Vec<VolumeIndexEntry>, source: Source) -> Self {
        let payload_base = (HEADER_LEN + index.len() * ENTRY_LEN) as u64;
        Self {
            window_start,
            window_end,
            index,
            payload_base,
            source,
        }
    }

    /// Stable name derived from the window, also used as the file stem.
    pub fn volume_id(&self) -> String {
        volume_id(self.window_start, self.window_end)
    }

    pub fn window(&self) -> (Timestamp, Timestamp) {
        (self.window_start, self.window_end)
    }

    pub fn index(&self) -> &[VolumeIndexEntry] {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn overlaps(&self, start: Timestamp, end: Timestamp) -> bool {
        start < self.window_end && self.window_start < end
    }

    pub fn entry(&self, record_id: RecordId) -> Option<&VolumeIndexEntry> {
        self.index.iter().find(|e| e.record_id == record_id)
    }

    fn raw_payload(&self, e: &VolumeIndexEntry) -> Result<Vec<u8>, VolumeError> {
        let start = self.payload_base + e.payload_offset;
        match &self.source {
            Source::Memory(bytes) => Ok(bytes[start as usize..(start + e.payload_len) as usize].to_vec()),
            Source::File(path) => {
                let mut f = File::open(path)?;
                f.seek(SeekFrom::Start(start))?;
                let mut buf = vec![0u8; e.payload_len as usize];
                f.read_exact(&mut buf)?;
                Ok(buf)
            }
        }
    }

    fn checked_payload(&self, e: &VolumeIndexEntry) -> Result<Vec<u8>, VolumeError> {
        let raw = self.raw_payload(e)?;
        if Digest::of(&raw) != e.checksum {
            return Err(VolumeError::CorruptPayload(e.record_id));
        }
        Ok(raw)
    }

    /// Reads one record, verifying its payload checksum first.
    pub fn read(&self, record_id: RecordId) -> Result<StoredRecord, VolumeError> {
        let e = self.entry(record_id).ok_or(VolumeError::NotFound(record_id))?;
        let raw = self.checked_payload(e)?;
        let rec = decode_payload(&raw, e.ingested_at)?;
        if rec.pip.record_id() != record_id {
            return Err(VolumeError::Malformed(format!(
                "index entry {record_id} points at record {}",
                rec.pip.record_id()
            )));
        }
        Ok(rec)
    }

    /// Reads only the PIP part of a record (checksum still verified).
    pub fn read_pip(&self, record_id: RecordId) -> Result<Pip, VolumeError> {
        let e = self.entry(record_id).ok_or(VolumeError::NotFound(record_id))?;
        let raw = self.checked_payload(e)?;
        Ok(decode_pip_prefix(&raw)?.0)
    }

    /// Full integrity pass: every payload checksum, every record decodes,
    /// matches its index entry and lies inside the window.
    pub fn verify(&self) -> Result<VerifyReport, VolumeError> {
        let mut payload_bytes = 0;
        for e in &self.index {
            let rec = self.read(e.record_id)?;
            let pip = &rec.pip;
            if pip.patient_id() != e.patient_id || pip.problem_id() != e.problem_id || pip.visit_time() != e.created_at
            {
                return Err(VolumeError::Malformed(format!(
                    "index entry {} disagrees with its payload",
                    e.record_id
                )));
            }
            if e.created_at < self.window_start || e.created_at >= self.window_end {
                return Err(VolumeError::OutsideWindow(e.record_id));
            }
            payload_bytes += e.payload_len;
        }
        Ok(VerifyReport {
            records: self.index.len(),
            payload_bytes,
        })
    }
}

pub fn volume_id(start: Timestamp, end: Timestamp) -> String {
    format!("{}-{}", start.as_secs(), end.as_secs())
}

/// `read_from_volume(volume, record_id)`.
pub fn read_from_volume(volume: &ArchiveVolume, record_id: RecordId) -> Result<StoredRecord, VolumeError> {
    volume.read(record_id)
}

type Head = (Timestamp, Timestamp, Vec<VolumeIndexEntry>);

fn parse_head<R: Read>(r: &mut R, total_len: u64) -> Result<Head, VolumeError> {
    let mut header = [0u8; HEADER_LEN];
    read_full(r, &mut header, "header")?;
    if header[0..4] != MAGIC {
        return Err(VolumeError::BadMagic);
    }
    let version = u32_le(&header[4..8]);
    if version != VERSION {
        return Err(VolumeError::UnsupportedVersion(version));
    }
    let ws = Timestamp::from_secs(u64_le(&header[8..16]) as i64);
    let we = Timestamp::from_secs(u64_le(&header[16..24]) as i64);
    if ws >= we {
        return Err(VolumeError::InvalidWindow(ws, we));
    }
    let count = u32_le(&header[24..28]) as u64;
    let index_len = count * ENTRY_LEN as u64;
    if HEADER_LEN as u64 + index_len > total_len {
        return Err(VolumeError::Truncated("index"));
    }
    let mut raw = vec![0u8; index_len as usize];
    read_full(r, &mut raw, "index")?;
    let index = raw
        .chunks_exact(ENTRY_LEN)
        .map(VolumeIndexEntry::parse)
        .collect::<Result<Vec<_>, _>>()?;

    if index.windows(2).any(|w| w[0].sort_key() >= w[1].sort_key()) {
        return Err(VolumeError::Malformed("index not strictly ascending".into()));
    }
    let payload_len = total_len - HEADER_LEN as u64 - index_len;
    let mut expected_offset = 0u64;
    for e in &index {
        if e.payload_offset != expected_offset {
            return Err(VolumeError::Malformed(format!(
                "entry {} payload offset {} (expected {expected_offset})",
                e.record_id, e.payload_offset
            )));
        }
        expected_offset = e
            .payload_offset
            .checked_add(e.payload_len)
            .ok_or_else(|| VolumeError::Malformed("payload length overflow".into()))?;
    }
    if expected_offset != payload_len {
        return Err(VolumeError::Truncated("payload"));
    }
    Ok((ws, we, index))
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), VolumeError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => VolumeError::Truncated(what),
        _ => VolumeError::Io(e),
    })
}
