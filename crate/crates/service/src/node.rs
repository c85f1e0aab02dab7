//! One running site: the portal behind its command log, the record store,
//! sessions, and (on a rural site) the sync engine.
//!
//! Every mutation goes through [`Node::execute_at`], which applies the
//! command to a copy of the state, appends it to the log, and only then
//! publishes the copy to readers. Readers take a cheap `Arc` clone of the
//! published portal and never wait on the writer.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use medirelay_core::digest::{from_canonical, to_canonical};
use medirelay_core::model::{make_pip, ModelError, Pip, PipDraft};
use medirelay_core::store::{encode_record, StoreError, Tier, TierStore};
use medirelay_core::sync::{
    apply_remote_bytes, ApplyOutcome, CenterLink, ConsultMode, ConsultationEntry, ConsultationSchedule, EngineState,
    OutboxEntry, SyncEngine, SyncStats,
};
use medirelay_core::workflow::{
    Account, AccountState, BookingStatus, Command, Decision, Effect, FileNotifier, Notifier, Outcome, Portal, Profile,
    PublicAccount, Role,
};
use medirelay_core::{AccountId, AttachmentId, BookingId, Digest, IdGen, PatientId, ProblemId, RecordId, Timestamp};
use serde::{Deserialize, Serialize};

use crate::config::{ServiceConfig, SiteRole};
use crate::credential::{hash_password, verify_password};
use crate::error::ServiceError;
use crate::eventlog::{CrashPoint, EventLog, LogEntry, LogError};

pub const LOCK_FILE: &str = "LOCK";
pub const LOG_DIR: &str = "log";
pub const STORE_DIR: &str = "store";
pub const SYNC_STATE_FILE: &str = "sync-state.json";
pub const NOTIFICATIONS_FILE: &str = "notifications.jsonl";

impl From<ModelError> for ServiceError {
    fn from(e: ModelError) -> Self {
        ServiceError::BadRequest(e.to_string())
    }
}

/// Wall clock, or a hand-driven one for tests and fixtures.
#[derive(Debug)]
pub struct Clock(Option<AtomicI64>);

impl Clock {
    pub fn system() -> Self {
        Self(None)
    }

    pub fn manual(start: Timestamp) -> Self {
        Self(Some(AtomicI64::new(start.as_secs())))
    }

    pub fn now(&self) -> Timestamp {
        match &self.0 {
            Some(t) => Timestamp::from_secs(t.load(Ordering::SeqCst)),
            None => Timestamp::now(),
        }
    }

    /// Moves a manual clock; a no-op on the system clock.
    pub fn advance(&self, secs: i64) {
        if let Some(t) = &self.0 {
            t.fetch_add(secs, Ordering::SeqCst);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub account_id: AccountId,
    pub role: Role,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub role: SiteRole,
    pub accounts: usize,
    pub log_seq: u64,
    pub state_digest: Digest,
    pub local_records: usize,
    pub main_records: usize,
    pub long_term_records: usize,
    pub outbox: usize,
}

struct Writer {
    log: EventLog,
    current: Arc<Portal>,
    /// Set once an append failed part-way; only a restart recovers.
    crashed: bool,
    notifier: Box<dyn Notifier>,
}

#[derive(Debug)]
enum Records {
    Center(RwLock<TierStore>),
    Rural(Mutex<SyncEngine>),
}

impl std::fmt::Debug for Writer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Writer")
            .field("log", &self.log)
            .field("crashed", &self.crashed)
            .finish_non_exhaustive()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    File::open(&tmp)?.sync_all()?;
    fs::rename(&tmp, path)
}

/// Holds the data directory's advisory lock for the process lifetime.
#[derive(Debug)]
pub struct DirLock(#[allow(dead_code)] File);

impl DirLock {
    pub fn acquire(data_dir: &Path) -> Result<Self, ServiceError> {
        fs::create_dir_all(data_dir)
            .map_err(|e| ServiceError::ConfigInvalid(format!("cannot create {}: {e}", data_dir.display())))?;
        let f = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(data_dir.join(LOCK_FILE))
            .map_err(|e| ServiceError::ConfigInvalid(format!("cannot open lock file: {e}")))?;
        match f.try_lock() {
            Ok(()) => Ok(Self(f)),
            Err(fs::TryLockError::WouldBlock) => Err(ServiceError::DataDirLocked(data_dir.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => Err(ServiceError::ServiceUnavailable(format!("lock: {e}"))),
        }
    }
}

#[derive(Debug)]
pub struct Node {
    config: ServiceConfig,
    _lock: DirLock,
    clock: Clock,
    ids: Mutex<IdGen>,
    writer: Mutex<Writer>,
    published: RwLock<Arc<Portal>>,
    sessions: Mutex<HashMap<String, Session>>,
    records: Records,
}

impl Node {
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        Self::open_with(config, Clock::system(), IdGen::system())
    }

    /// Locks the data directory, replays the log and opens the store.
    pub fn open_with(config: ServiceConfig, clock: Clock, ids: IdGen) -> Result<Self, ServiceError> {
        config.validate()?;
        let lock = DirLock::acquire(&config.data_dir)?;
        let dir = &config.data_dir;
        let recovery = EventLog::open(&dir.join(LOG_DIR), config.portal(), config.snapshot_every)?;
        let store = TierStore::open(dir.join(STORE_DIR), config.retention())?;
        let records = match config.role {
            SiteRole::Center => Records::Center(RwLock::new(store)),
            SiteRole::Rural => Records::Rural(Mutex::new(open_engine(dir, store, &config)?)),
        };
        let current = Arc::new(recovery.portal);
        Ok(Self {
            _lock: lock,
            clock,
            ids: Mutex::new(ids),
            writer: Mutex::new(Writer {
                log: recovery.log,
                current: current.clone(),
                crashed: false,
                notifier: Box::new(FileNotifier::new(dir.join(NOTIFICATIONS_FILE))),
            }),
            published: RwLock::new(current),
            sessions: Mutex::new(HashMap::new()),
            records,
            config,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn log_path(&self) -> PathBuf {
        lock(&self.writer).log.path()
    }

    pub fn notifications_path(&self) -> PathBuf {
        self.config.data_dir.join(NOTIFICATIONS_FILE)
    }

    /// Replaces where notifications are delivered.
    pub fn set_notifier(&self, notifier: Box<dyn Notifier>) {
        lock(&self.writer).notifier = notifier;
    }

    /// The last applied state. Never blocks on a writer for long.
    pub fn portal(&self) -> Arc<Portal> {
        self.published.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn log_seq(&self) -> u64 {
        lock(&self.writer).log.last_seq()
    }

    /// Arms a crash on the next command's log append.
    pub fn inject_crash(&self, point: CrashPoint) {
        lock(&self.writer).log.inject_crash(point);
    }

    pub fn execute(&self, cmd: &Command) -> Result<Outcome, ServiceError> {
        self.execute_at(cmd, self.now())
    }

    /// Write-ahead apply: validate on a copy, append, then publish.
    pub fn execute_at(&self, cmd: &Command, now: Timestamp) -> Result<Outcome, ServiceError> {
        let mut w = lock(&self.writer);
        if w.crashed {
            return Err(ServiceError::ServiceUnavailable(
                "log write failed; restart required".into(),
            ));
        }
        let mut next = (*w.current).clone();
        let outcome = next.apply(cmd, now)?;
        let entry = LogEntry {
            seq: w.log.last_seq() + 1,
            at: now,
            kind: cmd.kind().to_string(),
            payload: cmd.clone(),
            state_digest: next.digest(),
        };
        if let Err(e) = w.log.append(&entry) {
            w.crashed = true;
            return Err(ServiceError::ServiceUnavailable(e.to_string()));
        }
        let next = Arc::new(next);
        w.current = next.clone();
        *self.published.write().unwrap_or_else(|p| p.into_inner()) = next.clone();
        if w.log.snapshot_due() {
            if let Err(e) = w.log.write_snapshot(&next) {
                eprintln!("warning: snapshot not written: {e}");
            }
        }
        for n in &outcome.notifications {
            w.notifier.deliver(n);
        }
        Ok(outcome)
    }

    fn next_account_id(&self) -> AccountId {
        lock(&self.ids).account(self.now())
    }

    pub fn next_booking_id(&self) -> BookingId {
        lock(&self.ids).booking(self.now())
    }

    fn next_token(&self) -> String {
        lock(&self.ids).token()
    }

    fn credential(&self, password: &str) -> Result<medirelay_core::workflow::Credential, ServiceError> {
        let mut ids = lock(&self.ids);
        hash_password(password, self.config.kdf_iterations, &mut ids)
    }

    // Accounts and sessions.

    pub fn register(&self, role: Role, email: &str, profile: Profile) -> Result<PublicAccount, ServiceError> {
        let account_id = self.next_account_id();
        let token = self.next_token();
        let (email, profile) = (email.to_string(), profile);
        let cmd = match role {
            Role::Doctor => Command::RegisterDoctor {
                account_id,
                email,
                profile,
                token,
            },
            Role::Patient => Command::RegisterPatient {
                account_id,
                email,
                profile,
                token,
            },
            Role::Admin => return Err(ServiceError::Forbidden("administrators are bootstrapped".into())),
        };
        account_effect(self.execute(&cmd)?)
    }

    pub fn reissue_token(&self, email: &str) -> Result<PublicAccount, ServiceError> {
        let cmd = Command::ReissueToken {
            email: email.to_string(),
            token: self.next_token(),
        };
        account_effect(self.execute(&cmd)?)
    }

    pub fn activate(&self, token: &str, password: &str) -> Result<PublicAccount, ServiceError> {
        let cmd = Command::Activate {
            token: token.to_string(),
            credential: self.credential(password)?,
        };
        account_effect(self.execute(&cmd)?)
    }

    pub fn bootstrap_admin(
        &self,
        email: &str,
        password: &str,
        profile: Profile,
    ) -> Result<PublicAccount, ServiceError> {
        let cmd = Command::BootstrapAdmin {
            account_id: self.next_account_id(),
            email: email.to_string(),
            profile,
            credential: self.credential(password)?,
        };
        account_effect(self.execute(&cmd)?)
    }

    /// Checks the password, then the account state.
    pub fn login(&self, email: &str, password: &str) -> Result<Session, ServiceError> {
        let portal = self.portal();
        let wanted = email.trim().to_ascii_lowercase();
        let account = portal
            .account_by_email(&wanted)
            .or_else(|| portal.accounts().find(|a| a.email == wanted))
            .ok_or(ServiceError::BadCredentials)?;
        if account.state == AccountState::PendingActivation {
            return Err(ServiceError::NotActive);
        }
        let ok = account
            .credential
            .as_ref()
            .is_some_and(|c| verify_password(password, c));
        if !ok {
            return Err(ServiceError::BadCredentials);
        }
        if account.state != AccountState::Active {
            return Err(ServiceError::NotActive);
        }
        let now = self.now();
        let session = Session {
            token: self.next_token(),
            account_id: account.account_id,
            role: account.role,
            expires_at: now + self.config.session_ttl_secs as i64,
        };
        let mut sessions = lock(&self.sessions);
        sessions.retain(|_, s| s.expires_at > now);
        sessions.insert(session.token.clone(), session.clone());
        Ok(session)
    }

    pub fn logout(&self, token: &str) -> bool {
        lock(&self.sessions).remove(token).is_some()
    }

    /// The live account behind a session token.
    pub fn authenticate(&self, token: &str) -> Result<Account, ServiceError> {
        let now = self.now();
        let account_id = {
            let mut sessions = lock(&self.sessions);
            match sessions.get(token) {
                Some(s) if s.expires_at > now => s.account_id,
                Some(_) => {
                    sessions.remove(token);
                    return Err(ServiceError::Unauthenticated);
                }
                None => return Err(ServiceError::Unauthenticated),
            }
        };
        match self.portal().account(account_id) {
            Some(a) if a.state != AccountState::Deleted => Ok(a.clone()),
            _ => Err(ServiceError::Unauthenticated),
        }
    }

    /// The first active administrator, for operator commands.
    pub fn operator(&self) -> Result<AccountId, ServiceError> {
        self.portal()
            .accounts()
            .find(|a| a.role == Role::Admin && a.state == AccountState::Active)
            .map(|a| a.account_id)
            .ok_or_else(|| ServiceError::NotFound("no administrator; run `admin bootstrap` first".into()))
    }

    /// Resolves an account by id or email.
    pub fn find_account(&self, who: &str) -> Result<Account, ServiceError> {
        let portal = self.portal();
        let hit = match who.parse::<AccountId>() {
            Ok(id) => portal.account(id),
            Err(_) => portal.account_by_email(&who.trim().to_ascii_lowercase()),
        };
        hit.cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("account {who}")))
    }

    pub fn approve_doctor(&self, who: &str) -> Result<PublicAccount, ServiceError> {
        let doctor = self.find_account(who)?.account_id;
        let cmd = Command::AdminDecide {
            admin: self.operator()?,
            doctor,
            decision: Decision::Approve,
        };
        account_effect(self.execute(&cmd)?)
    }

    // Records.

    fn active_account(&self, actor: AccountId) -> Result<Account, ServiceError> {
        match self.portal().account(actor) {
            Some(a) if a.state == AccountState::Active => Ok(a.clone()),
            _ => Err(ServiceError::NotActive),
        }
    }

    /// Stores a new visit record written by `actor`, who must be its doctor.
    pub fn submit_record(
        &self,
        actor: AccountId,
        draft: &PipDraft,
        blobs: BTreeMap<AttachmentId, Vec<u8>>,
    ) -> Result<Pip, ServiceError> {
        let a = self.active_account(actor)?;
        if a.role != Role::Doctor || draft.doctor_id != actor {
            return Err(ServiceError::Forbidden(
                "only the treating doctor may file a record".into(),
            ));
        }
        let pip = make_pip(draft, &mut lock(&self.ids))?;
        let now = self.now();
        match &self.records {
            Records::Center(store) => {
                write_store(store).ingest(pip.clone(), blobs, Tier::Main, now)?;
            }
            Records::Rural(engine) => {
                let mut engine = lock(engine);
                engine.record_locally(pip.clone(), blobs, now)?;
                save_engine(&self.config.data_dir, &engine)?;
            }
        }
        Ok(pip)
    }

    fn with_store<T>(&self, f: impl FnOnce(&TierStore) -> Result<T, StoreError>) -> Result<T, ServiceError> {
        Ok(match &self.records {
            Records::Center(s) => f(&s.read().unwrap_or_else(|p| p.into_inner()))?,
            Records::Rural(e) => f(lock(e).store())?,
        })
    }

    /// Doctors read any folder; patients only their own.
    pub fn patient_records(&self, actor: AccountId, patient: PatientId) -> Result<Vec<Pip>, ServiceError> {
        let a = self.active_account(actor)?;
        match a.role {
            Role::Doctor => {}
            Role::Patient if actor == patient => {}
            _ => return Err(ServiceError::Forbidden("not your folder".into())),
        }
        self.with_store(|s| s.query_patient(patient))
    }

    pub fn problem_records(&self, actor: AccountId, problem: ProblemId) -> Result<Vec<Pip>, ServiceError> {
        let a = self.active_account(actor)?;
        let folder = self.with_store(|s| s.query_problem(problem))?;
        match a.role {
            Role::Doctor => Ok(folder),
            Role::Patient if folder.iter().all(|p| p.patient_id() == actor) => Ok(folder),
            _ => Err(ServiceError::Forbidden("not your folder".into())),
        }
    }

    pub fn record(&self, id: RecordId) -> Result<(Tier, medirelay_core::store::StoredRecord), ServiceError> {
        self.with_store(|s| s.lookup(id))
    }

    // Peer-only sync surface.

    /// Constant-time check of the shared peer token.
    pub fn check_peer(&self, presented: Option<&str>) -> Result<(), ServiceError> {
        let deny = || ServiceError::Forbidden("peer token required".into());
        let (Some(want), Some(got)) = (self.config.peer_token.as_deref(), presented) else {
            return Err(deny());
        };
        let same = want.len() == got.len() && want.bytes().zip(got.bytes()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0;
        same.then_some(()).ok_or_else(deny)
    }

    fn center_store(&self) -> Result<&RwLock<TierStore>, ServiceError> {
        match &self.records {
            Records::Center(s) => Ok(s),
            Records::Rural(_) => Err(ServiceError::NotFound("sync endpoints live on the center".into())),
        }
    }

    /// REFRESH receive side: idempotent apply of one envelope.
    pub fn sync_apply(&self, envelope: &[u8]) -> Result<ApplyOutcome, ServiceError> {
        let store = self.center_store()?;
        Ok(apply_remote_bytes(&mut write_store(store), envelope, self.now())?)
    }

    pub fn sync_manifest(&self, patient: PatientId) -> Result<Vec<RecordId>, ServiceError> {
        let store = self.center_store()?.read().unwrap_or_else(|p| p.into_inner());
        Ok(store.query_patient(patient)?.iter().map(|p| p.record_id()).collect())
    }

    pub fn sync_fetch(&self, patient: PatientId, record: RecordId) -> Result<Vec<u8>, ServiceError> {
        let store = self.center_store()?.read().unwrap_or_else(|p| p.into_inner());
        let (_, r) = store.lookup(record)?;
        if r.pip.patient_id() != patient {
            return Err(ServiceError::NotFound(format!("record {record} in folder {patient}")));
        }
        Ok(encode_record(&r))
    }

    /// Accepted bookings as the rural site's consultation schedule.
    pub fn consultation_schedule(&self) -> ConsultationSchedule {
        let portal = self.portal();
        let tz = portal.settings().tz_offset_minutes;
        let entries = portal
            .bookings()
            .filter(|b| b.status == BookingStatus::Accepted)
            .map(|b| ConsultationEntry {
                booking_id: b.booking_id,
                patient_id: b.patient_id,
                start_time: b.slot.interval(tz).0,
                mode: ConsultMode::Teleconsultation,
                report_complete: false,
            })
            .collect();
        ConsultationSchedule { entries }
    }

    /// One rural sync step against `link`. A fresh schedule replaces the
    /// old one; `None` keeps the last known schedule.
    pub fn sync_tick(
        &self,
        link: &mut dyn CenterLink,
        schedule: Option<ConsultationSchedule>,
    ) -> Result<SyncStats, ServiceError> {
        let Records::Rural(engine) = &self.records else {
            return Err(ServiceError::BadRequest("only a rural site ticks".into()));
        };
        let mut engine = lock(engine);
        if let Some(s) = schedule {
            engine.set_schedule(s);
        }
        let result = engine.tick(link, self.now());
        save_engine(&self.config.data_dir, &engine)?;
        Ok(result?)
    }

    pub fn outbox(&self) -> Vec<OutboxEntry> {
        match &self.records {
            Records::Rural(e) => lock(e).outbox().cloned().collect(),
            Records::Center(_) => Vec::new(),
        }
    }

    pub fn sync_stats(&self) -> SyncStats {
        match &self.records {
            Records::Rural(e) => lock(e).stats(),
            Records::Center(_) => SyncStats::default(),
        }
    }

    /// Center housekeeping: age Main into the long-term buffer and seal
    /// every finished month. Returns (migrated, volumes sealed).
    pub fn maintain(&self) -> Result<(usize, usize), ServiceError> {
        let Records::Center(store) = &self.records else {
            return Ok((0, 0));
        };
        let mut store = write_store(store);
        let now = self.now();
        let policy = store.policy();
        let moved = store.migrate(now, &policy)?;
        let packed = store.pack_due(now)?;
        Ok((moved.len(), packed.len()))
    }

    pub fn health(&self) -> Health {
        let portal = self.portal();
        let (local, main, long_term) = self
            .with_store(|s| Ok((s.local_len(), s.main_len(), s.long_term_len())))
            .unwrap_or_default();
        Health {
            status: "ok".into(),
            role: self.config.role,
            accounts: portal.accounts().count(),
            log_seq: self.log_seq(),
            state_digest: portal.digest(),
            local_records: local,
            main_records: main,
            long_term_records: long_term,
            outbox: self.outbox().len(),
        }
    }
}

fn write_store(store: &RwLock<TierStore>) -> std::sync::RwLockWriteGuard<'_, TierStore> {
    store.write().unwrap_or_else(|p| p.into_inner())
}

fn account_effect(outcome: Outcome) -> Result<PublicAccount, ServiceError> {
    match outcome.effect {
        Effect::Account(a) => Ok(a),
        other => Err(ServiceError::ServiceUnavailable(format!("unexpected effect {other:?}"))),
    }
}

fn save_engine(dir: &Path, engine: &SyncEngine) -> Result<(), ServiceError> {
    write_atomic(&dir.join(SYNC_STATE_FILE), &to_canonical(engine.state()))
        .map_err(|e| ServiceError::ServiceUnavailable(format!("sync state: {e}")))
}

/// Restores the engine and re-queues any local record that reached the
/// store but not the outbox before a crash.
fn open_engine(dir: &Path, store: TierStore, config: &ServiceConfig) -> Result<SyncEngine, ServiceError> {
    let state: EngineState = match fs::read(dir.join(SYNC_STATE_FILE)) {
        Ok(b) => from_canonical(&b).map_err(|e| LogError::Snapshot(format!("sync state: {e}")))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => EngineState::default(),
        Err(e) => return Err(ServiceError::ServiceUnavailable(format!("sync state: {e}"))),
    };
    let mut engine = SyncEngine::with_state(store, config.sync(), state);
    let known: std::collections::BTreeSet<RecordId> = {
        let s = engine.state();
        s.outbox
            .iter()
            .map(|e| e.record_id)
            .chain(s.forwarded.iter().copied())
            .chain(s.prefetched.values().flatten().copied())
            .collect()
    };
    let orphans: Vec<_> = engine
        .store()
        .local_cache()
        .records()
        .filter(|r| !known.contains(&r.record_id()))
        .cloned()
        .collect();
    if !orphans.is_empty() {
        for r in orphans {
            engine.record_locally(r.pip, r.blobs, r.ingested_at)?;
        }
        save_engine(dir, &engine)?;
    }
    Ok(engine)
}
