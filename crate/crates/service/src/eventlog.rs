//! Append-only command log with periodic snapshots.
//!
//! Each line of `events.jsonl` is one [`LogEntry`] in canonical JSON. An
//! entry is written and fsynced before the command's effects become
//! visible, so the log is the only source of truth: the snapshot just
//! shortens restart, and replaying the log from an empty portal must
//! reproduce every recorded digest.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use medirelay_core::digest::{from_canonical, to_canonical};
use medirelay_core::workflow::{Command, Portal, PortalSettings, WorkflowError};
use medirelay_core::{Digest, Timestamp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const SETTINGS_FILE: &str = "settings.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub at: Timestamp,
    pub kind: String,
    pub payload: Command,
    /// Portal digest after applying this entry.
    pub state_digest: Digest,
}

impl LogEntry {
    pub fn to_line(&self) -> Vec<u8> {
        let mut line = to_canonical(self);
        line.push(b'\n');
        line
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    state_digest: Digest,
    portal: Portal,
}

/// Where a simulated crash stops the write path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// Nothing reaches the log.
    BeforeAppend,
    /// Half the entry reaches the log, without its newline.
    TornAppend,
    /// The entry is durable but the command is never applied in memory.
    AfterAppend,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log I/O: {0}")]
    Io(#[from] io::Error),
    #[error("log line {line}: {reason}")]
    Corrupt { line: u64, reason: String },
    #[error("entry {seq}: replayed digest {actual} differs from recorded {recorded}")]
    DigestMismatch { seq: u64, recorded: Digest, actual: Digest },
    #[error("entry {seq} no longer applies: {error}")]
    ReplayFailed { seq: u64, error: WorkflowError },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("simulated crash ({0:?})")]
    Crashed(CrashPoint),
}

/// The parsed contents of a log file.
#[derive(Debug, Clone, Default)]
pub struct LogContents {
    pub entries: Vec<LogEntry>,
    /// Bytes up to the end of the last complete line.
    pub valid_len: u64,
    /// Bytes after it: an append cut short by a crash.
    pub torn_len: u64,
}

/// Parses a log, tolerating only an unterminated final line.
pub fn read_log(path: &Path) -> Result<LogContents, LogError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(LogContents::default()),
        Err(e) => return Err(e.into()),
    };
    let valid_len = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    let mut entries: Vec<LogEntry> = Vec::new();
    for (i, line) in bytes[..valid_len].split_inclusive(|b| *b == b'\n').enumerate() {
        let line = &line[..line.len() - 1];
        let line_no = i as u64 + 1;
        let corrupt = |reason: String| LogError::Corrupt { line: line_no, reason };
        let entry: LogEntry = from_canonical(line).map_err(|e| corrupt(e.to_string()))?;
        let expected = entries.last().map_or(1, |e| e.seq + 1);
        if entry.seq != expected {
            return Err(corrupt(format!("sequence {} where {expected} was expected", entry.seq)));
        }
        if entry.kind != entry.payload.kind() {
            return Err(corrupt(format!("kind {} does not match payload", entry.kind)));
        }
        entries.push(entry);
    }
    Ok(LogContents {
        entries,
        valid_len: valid_len as u64,
        torn_len: (bytes.len() - valid_len) as u64,
    })
}

/// Applies `entries` to `portal`, checking each recorded digest.
pub fn replay_onto(portal: &mut Portal, entries: &[LogEntry]) -> Result<(), LogError> {
    for e in entries {
        portal
            .apply(&e.payload, e.at)
            .map_err(|error| LogError::ReplayFailed { seq: e.seq, error })?;
        let actual = portal.digest();
        if actual != e.state_digest {
            return Err(LogError::DigestMismatch {
                seq: e.seq,
                recorded: e.state_digest,
                actual,
            });
        }
    }
    Ok(())
}

/// Replays from an empty portal, verifying every entry.
pub fn replay(settings: PortalSettings, entries: &[LogEntry]) -> Result<Portal, LogError> {
    let mut portal = Portal::new(settings);
    replay_onto(&mut portal, entries)?;
    Ok(portal)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

/// What [`EventLog::open`] found and rebuilt.
#[derive(Debug)]
pub struct Recovery {
    pub log: EventLog,
    pub portal: Portal,
    /// Entries applied on top of the snapshot.
    pub replayed: u64,
    /// Sequence number the snapshot covered, 0 without one.
    pub snapshot_seq: u64,
    /// Bytes of a torn final append that were cut off.
    pub truncated_bytes: u64,
}

#[derive(Debug)]
pub struct EventLog {
    dir: PathBuf,
    file: File,
    last_seq: u64,
    last_digest: Option<Digest>,
    snapshot_seq: u64,
    snapshot_every: u64,
    crash: Option<CrashPoint>,
}

impl EventLog {
    /// Opens or creates the log in `dir` and rebuilds the portal.
    ///
    /// `settings` only applies to a new log; an existing log keeps the
    /// settings it was created with so its digests stay reproducible.
    pub fn open(dir: &Path, settings: PortalSettings, snapshot_every: u64) -> Result<Recovery, LogError> {
        fs::create_dir_all(dir)?;
        let settings_path = dir.join(SETTINGS_FILE);
        let settings = match fs::read(&settings_path) {
            Ok(b) => from_canonical(&b).map_err(|e| LogError::Snapshot(format!("settings: {e}")))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                write_atomic(&settings_path, &to_canonical(&settings))?;
                settings
            }
            Err(e) => return Err(e.into()),
        };

        let log_path = dir.join(LOG_FILE);
        let contents = read_log(&log_path)?;
        if contents.torn_len > 0 {
            let f = OpenOptions::new().write(true).open(&log_path)?;
            f.set_len(contents.valid_len)?;
            f.sync_all()?;
        }

        let (mut portal, snapshot_seq) = match fs::read(dir.join(SNAPSHOT_FILE)) {
            Ok(b) => {
                let snap: Snapshot = from_canonical(&b).map_err(|e| LogError::Snapshot(e.to_string()))?;
                if snap.portal.digest() != snap.state_digest {
                    return Err(LogError::Snapshot("state does not match its digest".into()));
                }
                let Some(at) = contents.entries.get((snap.seq as usize).wrapping_sub(1)) else {
                    return Err(LogError::Snapshot(format!("covers entry {} beyond the log", snap.seq)));
                };
                if at.state_digest != snap.state_digest {
                    return Err(LogError::Snapshot(format!("disagrees with entry {}", snap.seq)));
                }
                (snap.portal, snap.seq)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => (Portal::new(settings), 0),
            Err(e) => return Err(e.into()),
        };
        let rest = &contents.entries[snapshot_seq as usize..];
        replay_onto(&mut portal, rest)?;

        let file = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let last = contents.entries.last();
        Ok(Recovery {
            log: EventLog {
                dir: dir.to_path_buf(),
                file,
                last_seq: last.map_or(0, |e| e.seq),
                last_digest: last.map(|e| e.state_digest),
                snapshot_seq,
                snapshot_every: snapshot_every.max(1),
                crash: None,
            },
            portal,
            replayed: rest.len() as u64,
            snapshot_seq,
            truncated_bytes: contents.torn_len,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn last_digest(&self) -> Option<Digest> {
        self.last_digest
    }

    /// Arms a one-shot crash for the next append.
    pub fn inject_crash(&mut self, point: CrashPoint) {
        self.crash = Some(point);
    }

    /// Durably appends `entry`, which must carry the next sequence number.
    pub fn append(&mut self, entry: &LogEntry) -> Result<(), LogError> {
        assert_eq!(entry.seq, self.last_seq + 1, "log sequence must be contiguous");
        let line = entry.to_line();
        match self.crash.take() {
            Some(CrashPoint::BeforeAppend) => return Err(LogError::Crashed(CrashPoint::BeforeAppend)),
            Some(CrashPoint::TornAppend) => {
                self.file.write_all(&line[..line.len() / 2])?;
                self.file.sync_data()?;
                return Err(LogError::Crashed(CrashPoint::TornAppend));
            }
            Some(CrashPoint::AfterAppend) => {
                self.file.write_all(&line)?;
                self.file.sync_data()?;
                return Err(LogError::Crashed(CrashPoint::AfterAppend));
            }
            None => {}
        }
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.last_seq = entry.seq;
        self.last_digest = Some(entry.state_digest);
        Ok(())
    }

    pub fn snapshot_due(&self) -> bool {
        self.last_seq - self.snapshot_seq >= self.snapshot_every
    }

    /// Writes a snapshot of `portal`, which must be the state after the
    /// last appended entry.
    pub fn write_snapshot(&mut self, portal: &Portal) -> Result<(), LogError> {
        let state_digest = portal.digest();
        if Some(state_digest) != self.last_digest {
            return Err(LogError::Snapshot("state is not the log head".into()));
        }
        let snap = Snapshot {
            seq: self.last_seq,
            state_digest,
            portal: portal.clone(),
        };
        write_atomic(&self.dir.join(SNAPSHOT_FILE), &to_canonical(&snap))?;
        self.snapshot_seq = self.last_seq;
        Ok(())
    }
}
