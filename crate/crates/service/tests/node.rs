//! Node behaviour against a real data directory: write-ahead logging,
//! recovery, locking, sessions and the record paths of both site roles.

mod common;

use std::collections::BTreeSet;
use std::fs;

use chrono::{NaiveDate, Weekday};
use common::*;
use medirelay_core::fixtures::RecordFactory;
use medirelay_core::store::{encode_record, StoreError, Tier, TierStore};
use medirelay_core::sync::{ApplyOutcome, ChannelSchedule, OutboxState, SimCenter};
use medirelay_core::time::{DAY, HOUR};
use medirelay_core::workflow::{AccountState, BookingStatus, ClockTime, Command, Offering, Portal, Role, Slot};
use medirelay_core::{AccountId, IdGen, Timestamp};
use medirelay_service::demo::seed_demo;
use medirelay_service::eventlog::{self, CrashPoint, EventLog, LogError, LOG_FILE};
use medirelay_service::node::{Clock, Node, LOG_DIR, SYNC_STATE_FILE};
use medirelay_service::ServiceError;
use tempfile::TempDir;

fn log_dir(dir: &TempDir) -> std::path::PathBuf {
    dir.path().join(LOG_DIR)
}

fn entries(dir: &TempDir) -> Vec<eventlog::LogEntry> {
    eventlog::read_log(&log_dir(dir).join(LOG_FILE)).unwrap().entries
}

#[test]
fn empty_data_dir_starts_healthy_with_zero_accounts() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 1);
    let h = node.health();
    assert_eq!(h.status, "ok");
    assert_eq!(h.accounts, 0);
    assert_eq!(h.log_seq, 0);
    assert_eq!(h.state_digest, Portal::new(center_config(dir.path()).portal()).digest());
}

#[test]
fn second_instance_on_same_dir_is_locked() {
    let dir = TempDir::new().unwrap();
    let first = open(center_config(dir.path()), 1);
    let second = Node::open(center_config(dir.path()));
    assert!(matches!(second, Err(ServiceError::DataDirLocked(_))), "{second:?}");
    drop(first);
    Node::open(center_config(dir.path())).unwrap();
}

#[test]
fn rural_config_without_peer_is_invalid() {
    let dir = TempDir::new().unwrap();
    let mut cfg = rural_config(dir.path(), "http://127.0.0.1:1");
    cfg.peer = None;
    assert!(matches!(Node::open(cfg), Err(ServiceError::ConfigInvalid(_))));
}

#[test]
fn register_grows_log_by_one_and_account_is_queryable() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 1);
    let a = node.register(Role::Patient, "pat@home.test", profile("P")).unwrap();
    assert_eq!(node.log_seq(), 1);
    assert_eq!(entries(&dir).len(), 1);
    assert_eq!(entries(&dir)[0].kind, "register_patient");
    let p = node.portal();
    assert_eq!(p.account(a.account_id).unwrap().state, AccountState::PendingActivation);
}

#[test]
fn failing_command_leaves_log_unchanged() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 1);
    node.register(Role::Patient, "pat@home.test", profile("P")).unwrap();
    let before = fs::read(node.log_path()).unwrap();
    let digest = node.portal().digest();
    let err = node.register(Role::Patient, "not-an-email", profile("P")).unwrap_err();
    assert_eq!(err.code(), "InvalidEmail");
    let err = node.register(Role::Patient, "PAT@home.test", profile("P")).unwrap_err();
    assert_eq!(err.code(), "EmailTaken");
    assert_eq!(fs::read(node.log_path()).unwrap(), before);
    assert_eq!(node.log_seq(), 1);
    assert_eq!(node.portal().digest(), digest);
}

/// Builds some history: admin, doctor with offerings, patient with credit
/// and an accepted booking.
fn busy_node(node: &Node) -> (AccountId, AccountId) {
    let doc = active_doctor(node, "doc@clinic.test");
    let pat = active_patient(node, "pat@home.test");
    node.execute(&Command::UpdateServiceSettings {
        doctor: doc,
        enabled: true,
        offerings: vec![Offering {
            weekday: Weekday::Mon,
            start: ClockTime::new(9, 0).unwrap(),
            length_minutes: 30,
            cost: 25,
        }],
    })
    .unwrap();
    node.execute(&Command::CreditTopup {
        actor: pat,
        patient: pat,
        amount: 100,
    })
    .unwrap();
    let booking_id = node.next_booking_id();
    node.execute(&Command::RequestBooking {
        patient: pat,
        doctor: doc,
        booking_id,
        slot: Slot {
            date: NaiveDate::from_ymd_opt(2026, 10, 12).unwrap(),
            start: ClockTime::new(9, 0).unwrap(),
            length_minutes: 30,
        },
    })
    .unwrap();
    node.execute(&Command::SetBookingStatus {
        doctor: doc,
        booking_id,
        status: BookingStatus::Accepted,
    })
    .unwrap();
    (doc, pat)
}

#[test]
fn restart_state_equals_in_memory_replay() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 7);
    busy_node(&node);
    let digest = node.portal().digest();
    let n = node.log_seq();
    drop(node);

    // Oracle: a fresh portal fed the logged commands directly.
    let log = entries(&dir);
    assert_eq!(log.len() as u64, n);
    let mut oracle = Portal::new(center_config(dir.path()).portal());
    for e in &log {
        oracle.apply(&e.payload, e.at).unwrap();
    }
    assert_eq!(oracle.digest(), digest);

    let node = open(center_config(dir.path()), 8);
    assert_eq!(node.portal().digest(), digest);
    assert_eq!(node.log_seq(), n);
}

#[test]
fn every_logged_digest_matches_replay_of_its_prefix() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 7);
    busy_node(&node);
    drop(node);
    let log = entries(&dir);
    let settings = center_config(dir.path()).portal();
    for k in 0..=log.len() {
        let p = eventlog::replay(settings, &log[..k]).unwrap();
        let want = if k == 0 {
            Portal::new(settings).digest()
        } else {
            log[k - 1].state_digest
        };
        assert_eq!(p.digest(), want, "prefix {k}");
    }
}

#[test]
fn crash_after_append_applies_exactly_once_after_restart() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 3);
    node.register(Role::Patient, "first@home.test", profile("A")).unwrap();
    node.inject_crash(CrashPoint::AfterAppend);
    let err = node
        .register(Role::Patient, "second@home.test", profile("B"))
        .unwrap_err();
    assert!(matches!(err, ServiceError::ServiceUnavailable(_)));
    // Not visible before the restart, and the node refuses more writes.
    assert!(node.portal().account_by_email("second@home.test").is_none());
    assert!(node.register(Role::Patient, "third@home.test", profile("C")).is_err());
    drop(node);

    let node = open(center_config(dir.path()), 4);
    let p = node.portal();
    let matches = p.accounts().filter(|a| a.email == "second@home.test").count();
    assert_eq!(matches, 1);
    assert!(p.account_by_email("third@home.test").is_none());
    let seqs: Vec<u64> = entries(&dir).iter().map(|e| e.seq).collect();
    assert_eq!(seqs, vec![1, 2]);
}

#[test]
fn torn_append_is_cut_off_and_never_applied() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 3);
    node.register(Role::Patient, "first@home.test", profile("A")).unwrap();
    let good_len = fs::metadata(node.log_path()).unwrap().len();
    node.inject_crash(CrashPoint::TornAppend);
    assert!(node.register(Role::Patient, "second@home.test", profile("B")).is_err());
    assert!(fs::metadata(node.log_path()).unwrap().len() > good_len);
    drop(node);

    let rec = EventLog::open(&log_dir(&dir), center_config(dir.path()).portal(), 1000).unwrap();
    assert!(rec.truncated_bytes > 0);
    assert_eq!(rec.log.last_seq(), 1);
    drop(rec);
    assert_eq!(fs::metadata(log_dir(&dir).join(LOG_FILE)).unwrap().len(), good_len);

    let node = open(center_config(dir.path()), 4);
    assert!(node.portal().account_by_email("second@home.test").is_none());
    node.register(Role::Patient, "second@home.test", profile("B")).unwrap();
    assert_eq!(entries(&dir).iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2]);
}

#[test]
fn crash_before_append_changes_nothing() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 3);
    node.register(Role::Patient, "first@home.test", profile("A")).unwrap();
    let digest = node.portal().digest();
    node.inject_crash(CrashPoint::BeforeAppend);
    assert!(node.register(Role::Patient, "second@home.test", profile("B")).is_err());
    drop(node);
    let node = open(center_config(dir.path()), 4);
    assert_eq!(node.portal().digest(), digest);
    assert_eq!(node.log_seq(), 1);
}

#[test]
fn snapshot_shortens_replay_and_agrees_with_log() {
    let dir = TempDir::new().unwrap();
    let cfg = || {
        let mut c = center_config(dir.path());
        c.snapshot_every = 3;
        c
    };
    let node = open(cfg(), 5);
    for i in 0..7 {
        node.register(Role::Patient, &format!("p{i}@home.test"), profile("P"))
            .unwrap();
    }
    let digest = node.portal().digest();
    drop(node);
    let rec = EventLog::open(&log_dir(&dir), cfg().portal(), 3).unwrap();
    assert_eq!(rec.snapshot_seq, 6);
    assert_eq!(rec.replayed, 1);
    assert_eq!(rec.portal.digest(), digest);
    // The full log still replays from empty to the same state.
    assert_eq!(
        eventlog::replay(cfg().portal(), &entries(&dir)).unwrap().digest(),
        digest
    );
}

#[test]
fn tampered_digest_is_detected_on_open() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 5);
    node.register(Role::Patient, "a@home.test", profile("A")).unwrap();
    node.register(Role::Patient, "b@home.test", profile("B")).unwrap();
    drop(node);
    let mut log = entries(&dir);
    log[1].state_digest = medirelay_core::Digest::of(b"not the state");
    let text: Vec<u8> = log.iter().flat_map(|e| e.to_line()).collect();
    fs::write(log_dir(&dir).join(LOG_FILE), text).unwrap();
    let err = Node::open(center_config(dir.path())).unwrap_err();
    assert!(
        matches!(err, ServiceError::Log(LogError::DigestMismatch { seq: 2, .. })),
        "{err}"
    );
}

#[test]
fn corrupt_middle_line_is_an_error_not_a_truncation() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 5);
    for e in ["a@home.test", "b@home.test", "c@home.test"] {
        node.register(Role::Patient, e, profile("P")).unwrap();
    }
    drop(node);
    let path = log_dir(&dir).join(LOG_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1] = "{\"garbage\":true}";
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = Node::open(center_config(dir.path())).unwrap_err();
    assert!(
        matches!(err, ServiceError::Log(LogError::Corrupt { line: 2, .. })),
        "{err}"
    );
}

#[test]
fn snapshot_that_disagrees_with_log_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut cfg = center_config(dir.path());
    cfg.snapshot_every = 1;
    let node = open(cfg.clone(), 5);
    node.register(Role::Patient, "a@home.test", profile("A")).unwrap();
    node.register(Role::Patient, "b@home.test", profile("B")).unwrap();
    drop(node);
    // Swap the log for a shorter one; the snapshot now points past it.
    let path = log_dir(&dir).join(LOG_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, format!("{}\n", text.lines().next().unwrap())).unwrap();
    let err = Node::open(cfg).unwrap_err();
    assert!(matches!(err, ServiceError::Log(LogError::Snapshot(_))), "{err}");
}

#[test]
fn log_settings_survive_config_changes() {
    let dir = TempDir::new().unwrap();
    let mut cfg = center_config(dir.path());
    cfg.tz_offset_minutes = 180;
    let node = open(cfg.clone(), 1);
    node.register(Role::Patient, "a@home.test", profile("A")).unwrap();
    drop(node);
    cfg.tz_offset_minutes = 0;
    let node = open(cfg, 2);
    assert_eq!(node.portal().settings().tz_offset_minutes, 180);
}

#[test]
fn login_checks_password_then_state() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 9);
    ensure_admin(&node);
    let pat = active_patient(&node, "pat@home.test");

    let s = node.login(" PAT@home.test ", PASSWORD).unwrap();
    assert_eq!(s.account_id, pat);
    assert_eq!(s.role, Role::Patient);
    assert_eq!(s.token.len(), 32, "128-bit hex token");
    assert_eq!(node.authenticate(&s.token).unwrap().account_id, pat);

    assert!(matches!(
        node.login("pat@home.test", "wrong-password"),
        Err(ServiceError::BadCredentials)
    ));
    assert!(matches!(
        node.login("nobody@home.test", PASSWORD),
        Err(ServiceError::BadCredentials)
    ));

    // Pending activation and awaiting approval are both NotActive.
    let pending = node.register(Role::Patient, "pending@home.test", profile("P")).unwrap();
    assert!(matches!(
        node.login("pending@home.test", PASSWORD),
        Err(ServiceError::NotActive)
    ));
    let doc = node.register(Role::Doctor, "doc@clinic.test", profile("D")).unwrap();
    node.activate(&last_token(&node, doc.account_id), PASSWORD).unwrap();
    assert!(matches!(
        node.login("doc@clinic.test", PASSWORD),
        Err(ServiceError::NotActive)
    ));
    node.approve_doctor(&doc.account_id.to_string()).unwrap();
    node.login("doc@clinic.test", PASSWORD).unwrap();
    let _ = pending;

    // Tokens differ and are not derived from the account.
    let t2 = node.login("pat@home.test", PASSWORD).unwrap();
    assert_ne!(t2.token, s.token);
    assert!(!t2.token.contains(&pat.to_string().to_lowercase()));

    assert!(node.logout(&s.token));
    assert!(matches!(
        node.authenticate(&s.token),
        Err(ServiceError::Unauthenticated)
    ));
}

#[test]
fn expired_session_is_rejected() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 9);
    active_patient(&node, "pat@home.test");
    let s = node.login("pat@home.test", PASSWORD).unwrap();
    node.clock().advance(node.config().session_ttl_secs as i64 - 1);
    node.authenticate(&s.token).unwrap();
    node.clock().advance(1);
    assert!(matches!(
        node.authenticate(&s.token),
        Err(ServiceError::Unauthenticated)
    ));
}

#[test]
fn short_password_is_refused_without_logging() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 9);
    let a = node.register(Role::Patient, "pat@home.test", profile("P")).unwrap();
    let seq = node.log_seq();
    let err = node.activate(&last_token(&node, a.account_id), "short").unwrap_err();
    assert!(matches!(err, ServiceError::BadRequest(_)));
    assert_eq!(node.log_seq(), seq);
}

#[test]
fn approve_doctor_moves_awaiting_account_to_active() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 9);
    let doc = node.register(Role::Doctor, "doc@clinic.test", profile("D")).unwrap();
    node.activate(&last_token(&node, doc.account_id), PASSWORD).unwrap();
    // No administrator yet.
    assert!(matches!(
        node.approve_doctor("doc@clinic.test"),
        Err(ServiceError::NotFound(_))
    ));
    ensure_admin(&node);
    assert_eq!(node.portal().pending_doctors().len(), 1);
    let a = node.approve_doctor("doc@clinic.test").unwrap();
    assert_eq!(a.state, AccountState::Active);
    assert!(node.portal().pending_doctors().is_empty());
}

#[test]
fn seed_demo_is_a_fixed_fixture() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let na = Node::open(center_config(a.path())).unwrap();
    let nb = Node::open(center_config(b.path())).unwrap();
    let sa = seed_demo(&na).unwrap();
    let sb = seed_demo(&nb).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(na.portal().digest(), nb.portal().digest());
    assert_eq!(fs::read(na.log_path()).unwrap(), fs::read(nb.log_path()).unwrap());

    let p = na.portal();
    let count = |r: Role| {
        p.accounts()
            .filter(|a| a.role == r && a.state == AccountState::Active)
            .count()
    };
    assert_eq!(
        (count(Role::Doctor), count(Role::Patient), count(Role::Admin)),
        (2, 3, 1)
    );
    assert_eq!(p.bookings().count(), 1);
    assert!(seed_demo(&na).is_err(), "refuses a non-empty portal");
    // Demo accounts can log in with the published password.
    na.login(&sa.patients[0].email, &sa.password).unwrap();
}

#[test]
fn notifications_reach_the_outbox_file() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 9);
    let a = node.register(Role::Patient, "pat@home.test", profile("P")).unwrap();
    let tokens = activation_tokens(&node, a.account_id);
    assert_eq!(tokens.len(), 1);
    assert_eq!(node.portal().token(&tokens[0]).unwrap().account_id, a.account_id);
    node.reissue_token("pat@home.test").unwrap();
    assert_eq!(activation_tokens(&node, a.account_id).len(), 2);
}

// Records.

#[test]
fn center_record_submission_and_folder_authorization() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 11);
    let doc = active_doctor(&node, "doc@clinic.test");
    let pat = active_patient(&node, "pat@home.test");
    let other = active_patient(&node, "other@home.test");
    let mut f = RecordFactory::new(4);
    let problem = f.ids().problem(Timestamp::from_secs(START));
    let (draft, blobs) = f.draft(pat, doc, problem, Timestamp::from_secs(START - DAY), 64);

    // Only the treating doctor may file.
    assert!(matches!(
        node.submit_record(pat, &draft, blobs.clone()),
        Err(ServiceError::Forbidden(_))
    ));
    let pip = node.submit_record(doc, &draft, blobs).unwrap();
    assert_eq!(node.record(pip.record_id()).unwrap().0, Tier::Main);

    assert_eq!(node.patient_records(doc, pat).unwrap(), vec![pip.clone()]);
    assert_eq!(node.patient_records(pat, pat).unwrap(), vec![pip.clone()]);
    assert!(matches!(
        node.patient_records(other, pat),
        Err(ServiceError::Forbidden(_))
    ));
    assert_eq!(node.problem_records(pat, problem).unwrap(), vec![pip.clone()]);
    assert!(matches!(
        node.problem_records(other, problem),
        Err(ServiceError::Forbidden(_))
    ));

    // A missing blob is a bad request, not a stored record.
    let (draft2, _) = f.draft(pat, doc, problem, Timestamp::from_secs(START), 16);
    let err = node.submit_record(doc, &draft2, Default::default()).unwrap_err();
    assert!(matches!(err, ServiceError::Store(StoreError::MissingBlob(_))), "{err}");
}

#[test]
fn center_sync_surface_is_idempotent_and_checked() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 11);
    let mut f = RecordFactory::new(5);
    let t = Timestamp::from_secs(START);
    let (pat, doc, prob) = (f.ids().account(t), f.ids().account(t), f.ids().problem(t));
    let rec = f.record(pat, doc, prob, t, 32);
    let bytes = encode_record(&rec);

    assert!(node.check_peer(None).is_err());
    assert!(node.check_peer(Some("wrong-token-0000000000")).is_err());
    node.check_peer(Some(PEER_TOKEN)).unwrap();

    assert_eq!(node.sync_apply(&bytes).unwrap(), ApplyOutcome::Applied);
    assert_eq!(node.sync_apply(&bytes).unwrap(), ApplyOutcome::Duplicate);
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 1;
    assert!(matches!(
        node.sync_apply(&bad),
        Err(ServiceError::Store(StoreError::ChecksumMismatch(_)))
    ));

    assert_eq!(node.sync_manifest(pat).unwrap(), vec![rec.record_id()]);
    assert_eq!(node.sync_fetch(pat, rec.record_id()).unwrap(), bytes);
    assert!(matches!(
        node.sync_fetch(doc, rec.record_id()),
        Err(ServiceError::NotFound(_))
    ));
}

#[test]
fn accepted_bookings_become_the_consultation_schedule() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 12);
    let (_, pat) = busy_node(&node);
    let s = node.consultation_schedule();
    assert_eq!(s.entries.len(), 1);
    assert_eq!(s.entries[0].patient_id, pat);
    // 2026-10-12 09:00 in a UTC portal.
    assert_eq!(
        s.entries[0].start_time,
        Timestamp::from_secs(START + 7 * DAY + 9 * HOUR)
    );
}

#[test]
fn center_maintenance_ages_and_seals_old_records() {
    let dir = TempDir::new().unwrap();
    let node = open(center_config(dir.path()), 13);
    let doc = active_doctor(&node, "doc@clinic.test");
    let pat = active_patient(&node, "pat@home.test");
    let mut f = RecordFactory::new(6);
    let prob = f.ids().problem(Timestamp::from_secs(START));
    let old = Timestamp::from_secs(START - 200 * DAY);
    let (draft, blobs) = f.draft(pat, doc, prob, old, 0);
    let pip = node.submit_record(doc, &draft, blobs).unwrap();
    let (draft, blobs) = f.draft(pat, doc, prob, Timestamp::from_secs(START), 0);
    node.submit_record(doc, &draft, blobs).unwrap();

    assert_eq!(node.maintain().unwrap(), (1, 1));
    assert_eq!(node.record(pip.record_id()).unwrap().0, Tier::LongTerm);
    assert_eq!(node.patient_records(doc, pat).unwrap().len(), 2);
    assert_eq!(node.maintain().unwrap(), (0, 0));
}

fn rural_node(dir: &TempDir, seed: u64) -> Node {
    open(rural_config(dir.path(), "http://127.0.0.1:9"), seed)
}

#[test]
fn rural_records_are_queued_and_forwarded_exactly_once() {
    let dir = TempDir::new().unwrap();
    let node = rural_node(&dir, 21);
    let doc = active_doctor(&node, "doc@rural.test");
    let mut f = RecordFactory::new(7);
    let t = Timestamp::from_secs(START);
    let (pat, prob) = (f.ids().account(t), f.ids().problem(t));
    let mut created = BTreeSet::new();
    for i in 0..3 {
        let (draft, blobs) = f.draft(pat, doc, prob, t + i * HOUR, 16);
        created.insert(node.submit_record(doc, &draft, blobs).unwrap().record_id());
    }
    assert_eq!(node.outbox().len(), 3);
    assert!(node.outbox().iter().all(|e| e.state == OutboxState::Queued));

    // Channel down: nothing moves, state survives a restart.
    let center_store = TierStore::in_memory(center_config(dir.path()).retention());
    let mut center = SimCenter::new(center_store, down_schedule());
    node.clock().advance(60);
    node.sync_tick(&mut center, None).unwrap();
    assert_eq!(node.outbox().len(), 3);
    drop(node);

    let node = rural_node(&dir, 22);
    assert_eq!(node.outbox().len(), 3);
    center.schedule = ChannelSchedule::always_up(1);
    node.clock().advance(120);
    let stats = node.sync_tick(&mut center, None).unwrap();
    assert_eq!(stats.records_forwarded, 3);
    assert!(node.outbox().is_empty());
    let at_center: BTreeSet<_> = center.store.main_ids().into_iter().collect();
    assert_eq!(at_center, created);
}

fn down_schedule() -> ChannelSchedule {
    use medirelay_core::sync::{ChannelState, Segment};
    ChannelSchedule::new(
        0,
        vec![Segment {
            start: 0,
            end: i64::MAX / 2,
            state: ChannelState::Down,
        }],
        1,
    )
    .unwrap()
}

#[test]
fn record_stored_but_not_queued_before_a_crash_is_requeued() {
    let dir = TempDir::new().unwrap();
    let node = rural_node(&dir, 23);
    let doc = active_doctor(&node, "doc@rural.test");
    let mut f = RecordFactory::new(8);
    let t = Timestamp::from_secs(START);
    let (pat, prob) = (f.ids().account(t), f.ids().problem(t));
    let (draft, blobs) = f.draft(pat, doc, prob, t, 0);
    let pip = node.submit_record(doc, &draft, blobs).unwrap();
    drop(node);
    // Lose the engine state as if the process died between the two writes.
    fs::remove_file(dir.path().join(SYNC_STATE_FILE)).unwrap();
    let node = rural_node(&dir, 24);
    let ids: Vec<_> = node.outbox().iter().map(|e| e.record_id).collect();
    assert_eq!(ids, vec![pip.record_id()]);
    assert_eq!(node.record(pip.record_id()).unwrap().0, Tier::Local);
}

#[test]
fn rural_site_does_not_serve_center_endpoints() {
    let dir = TempDir::new().unwrap();
    let node = rural_node(&dir, 25);
    assert!(matches!(
        node.sync_manifest(IdGen::seeded(99).account(Timestamp::from_secs(START))),
        Err(ServiceError::NotFound(_))
    ));
    let center = TempDir::new().unwrap();
    let c = open(center_config(center.path()), 26);
    let mut link = SimCenter::new(
        TierStore::in_memory(c.config().retention()),
        ChannelSchedule::always_up(1),
    );
    assert!(matches!(c.sync_tick(&mut link, None), Err(ServiceError::BadRequest(_))));
}

#[test]
fn restarted_node_keeps_issuing_fresh_ids() {
    let dir = TempDir::new().unwrap();
    let node = Node::open_with(
        center_config(dir.path()),
        Clock::manual(Timestamp::from_secs(START)),
        IdGen::seeded(1),
    )
    .unwrap();
    node.register(Role::Patient, "a@home.test", profile("A")).unwrap();
    drop(node);
    // The production constructor draws from OS entropy.
    let node = Node::open(center_config(dir.path())).unwrap();
    node.register(Role::Patient, "b@home.test", profile("B")).unwrap();
    assert_eq!(node.portal().accounts().count(), 2);
}
