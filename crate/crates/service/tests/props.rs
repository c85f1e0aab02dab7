//! Property tests for credentials and log recovery.

mod common;

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use common::*;
use medirelay_core::IdGen;
use medirelay_service::credential::{hash_password, verify_password, MIN_PASSWORD_LEN};
use medirelay_service::demo::seed_demo;
use medirelay_service::eventlog::{self, EventLog, LogEntry, LOG_FILE, SETTINGS_FILE};
use medirelay_service::node::LOG_DIR;
use proptest::prelude::*;
use tempfile::TempDir;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn a_credential_accepts_only_its_password(
        password in "[ -~]{8,40}",
        other in "[ -~]{8,40}",
        seed in any::<u64>(),
    ) {
        let c = hash_password(&password, 10, &mut IdGen::seeded(seed)).unwrap();
        prop_assert!(verify_password(&password, &c));
        prop_assert_eq!(verify_password(&other, &c), other == password);
    }

    #[test]
    fn short_passwords_are_refused(password in "[ -~]{0,7}") {
        prop_assert!(password.chars().count() < MIN_PASSWORD_LEN);
        prop_assert!(hash_password(&password, 10, &mut IdGen::seeded(1)).is_err());
    }
}

/// The demo fixture's log directory, written once.
struct Fixture {
    _dir: TempDir,
    log: Vec<u8>,
    settings: Vec<u8>,
    entries: Vec<LogEntry>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        {
            let node = open(center_config(dir.path()), 3);
            seed_demo(&node).unwrap();
        }
        let logs = dir.path().join(LOG_DIR);
        let log = fs::read(logs.join(LOG_FILE)).unwrap();
        let settings = fs::read(logs.join(SETTINGS_FILE)).unwrap();
        let entries = eventlog::read_log(&logs.join(LOG_FILE)).unwrap().entries;
        Fixture {
            _dir: dir,
            log,
            settings,
            entries,
        }
    })
}

fn write_log_dir(dir: &Path, f: &Fixture, log: &[u8]) {
    fs::write(dir.join(SETTINGS_FILE), &f.settings).unwrap();
    fs::write(dir.join(LOG_FILE), log).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Cutting the log anywhere recovers exactly the complete entries
    /// before the cut and drops the rest.
    #[test]
    fn a_cut_log_recovers_its_complete_prefix(frac in 0.0f64..=1.0) {
        let f = fixture();
        prop_assume!(f.entries.len() > 5);
        let cut = (f.log.len() as f64 * frac) as usize;
        let kept = f.log[..cut].iter().filter(|b| **b == b'\n').count();

        let tmp = TempDir::new().unwrap();
        write_log_dir(tmp.path(), f, &f.log[..cut]);
        let settings = center_config(tmp.path()).portal();
        let rec = EventLog::open(tmp.path(), settings, 0).unwrap();
        prop_assert_eq!(rec.replayed, kept as u64);
        prop_assert_eq!(rec.log.last_seq(), kept as u64);
        let want = match kept {
            0 => medirelay_core::workflow::Portal::new(settings).digest(),
            k => f.entries[k - 1].state_digest,
        };
        prop_assert_eq!(rec.portal.digest(), want);
        let on_disk = fs::read(tmp.path().join(LOG_FILE)).unwrap();
        prop_assert_eq!(on_disk.len() as u64 + rec.truncated_bytes, cut as u64);
    }

    /// A flipped byte is refused on open unless it cannot change any state,
    /// such as the case of a letter in an email the portal lowercases.
    #[test]
    fn a_damaged_entry_is_refused(frac in 0.0f64..1.0, bit in 0u8..8) {
        let f = fixture();
        let at = (f.log.len() as f64 * frac) as usize;
        prop_assume!(f.log[at] != b'\n');
        let mut bad = f.log.clone();
        bad[at] ^= 1 << bit;
        prop_assume!(bad[at] != b'\n');

        let tmp = TempDir::new().unwrap();
        write_log_dir(tmp.path(), f, &bad);
        let settings = center_config(tmp.path()).portal();
        if let Ok(rec) = EventLog::open(tmp.path(), settings, 0) {
            prop_assert_eq!(rec.replayed as usize, f.entries.len());
            prop_assert_eq!(rec.portal.digest(), f.entries.last().unwrap().state_digest);
        }
    }
}
