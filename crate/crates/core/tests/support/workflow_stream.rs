//! Random command streams against the portal, checked step by step with
//! oracles that only use the public read API plus their own arithmetic.
//!
//! Shared by the workflow property tests and the service acceptance suite;
//! the including crate must also mount `common` at its root.

#![allow(dead_code)]

use std::collections::BTreeMap;

use crate::common::*;
use chrono::{Datelike, Duration, NaiveDate, Weekday};
use medirelay_core::workflow::{
    AccountState, BookingStatus, Command, Decision, MedicalHistory, Offering, Portal, PortalSettings, PostingReason,
    Role, Slot, WorkflowError,
};
use medirelay_core::{AccountId, BookingId, IdGen, Timestamp};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TZ_MINUTES: i32 = 180;
const CATEGORIES: [&str; 8] = [
    "Diseases",
    "Symptoms",
    "Pharmaceuticals",
    "Surgeries",
    "Sensitivities",
    "Radiograph",
    "Tests",
    "Allergies",
];

struct Driver {
    rng: ChaCha8Rng,
    portal: Portal,
    ids: IdGen,
    now: Timestamp,
    accounts: Vec<AccountId>,
    tokens: Vec<String>,
    bookings: Vec<BookingId>,
    emails: Vec<String>,
    log: Vec<(Command, Timestamp)>,
}

impl Driver {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            portal: Portal::new(PortalSettings {
                tz_offset_minutes: TZ_MINUTES,
                ..PortalSettings::default()
            }),
            ids: IdGen::seeded(seed),
            now: Timestamp::from_secs(START),
            accounts: Vec::new(),
            tokens: Vec::new(),
            bookings: Vec::new(),
            emails: Vec::new(),
            log: Vec::new(),
        }
    }

    /// Mostly known accounts, sometimes an unknown one.
    fn actor(&mut self) -> AccountId {
        if self.accounts.is_empty() || self.rng.random_bool(0.03) {
            return self.ids.account(self.now);
        }
        *self.accounts.choose(&mut self.rng).unwrap()
    }

    /// Usually an account in the given role and state, otherwise anyone.
    fn pick(&mut self, role: Role, state: AccountState) -> AccountId {
        let fitting: Vec<AccountId> = self
            .portal
            .accounts()
            .filter(|a| a.role == role && a.state == state)
            .map(|a| a.account_id)
            .collect();
        match fitting.choose(&mut self.rng) {
            Some(id) if self.rng.random_bool(0.85) => *id,
            _ => self.actor(),
        }
    }

    fn email(&mut self) -> String {
        if !self.emails.is_empty() && self.rng.random_bool(0.15) {
            return self.emails.choose(&mut self.rng).unwrap().clone();
        }
        if self.rng.random_bool(0.03) {
            return "broken address".into();
        }
        let e = format!("user{}@portal.test", self.emails.len());
        self.emails.push(e.clone());
        e
    }

    fn today(&self) -> NaiveDate {
        let local = self.now + TZ_MINUTES as i64 * 60;
        local.to_datetime().date_naive()
    }

    fn offerings(&mut self) -> Vec<Offering> {
        let n = self.rng.random_range(0..4);
        (0..n)
            .map(|_| {
                let weekday = Weekday::try_from(self.rng.random_range(0u8..7)).unwrap();
                offering(
                    weekday,
                    self.rng.random_range(8..18),
                    15 * self.rng.random_range(0..4),
                    [15, 30, 45, 60][self.rng.random_range(0..4)],
                    self.rng.random_range(0..60),
                )
            })
            .collect()
    }

    fn slot_for(&mut self, doctor: AccountId) -> Slot {
        let today = self.today();
        let offered: Vec<Offering> = self
            .portal
            .service_settings(doctor)
            .map(|s| s.offerings.clone())
            .unwrap_or_default();
        match offered.choose(&mut self.rng) {
            Some(o) if self.rng.random_bool(0.9) => {
                let ahead = (o.weekday.num_days_from_monday() + 7 - today.weekday().num_days_from_monday()) % 7;
                // Mostly the next two occurrences, sometimes last week's.
                let weeks = [-1, 0, 0, 1, 1][self.rng.random_range(0..5)];
                Slot {
                    date: today + Duration::days(ahead as i64 + 7 * weeks),
                    start: o.start,
                    length_minutes: o.length_minutes,
                }
            }
            _ => slot(
                today + Duration::days(self.rng.random_range(-2..15)),
                self.rng.random_range(8..18),
                0,
                30,
            ),
        }
    }

    fn next_command(&mut self) -> Command {
        let roll = self.rng.random_range(0..100);
        match roll {
            0..=1 => Command::BootstrapAdmin {
                account_id: self.ids.account(self.now),
                email: self.email(),
                profile: profile("admin"),
                credential: cred("a"),
            },
            2..=9 => Command::RegisterDoctor {
                account_id: self.ids.account(self.now),
                email: self.email(),
                profile: profile("doc"),
                token: self.ids.token(),
            },
            10..=19 => Command::RegisterPatient {
                account_id: self.ids.account(self.now),
                email: self.email(),
                profile: profile("pat"),
                token: self.ids.token(),
            },
            20..=21 => Command::ReissueToken {
                email: self.email(),
                token: self.ids.token(),
            },
            22..=31 => {
                let token = if self.tokens.is_empty() || self.rng.random_bool(0.05) {
                    self.ids.token()
                } else {
                    self.tokens.choose(&mut self.rng).unwrap().clone()
                };
                Command::Activate {
                    token,
                    credential: cred("pw"),
                }
            }
            32..=38 => Command::AdminDecide {
                admin: self.pick(Role::Admin, AccountState::Active),
                doctor: self.pick(Role::Doctor, AccountState::AwaitingApproval),
                decision: if self.rng.random_bool(0.8) {
                    Decision::Approve
                } else {
                    Decision::Delete
                },
            },
            39..=45 => Command::UpdateServiceSettings {
                doctor: self.pick(Role::Doctor, AccountState::Active),
                enabled: self.rng.random_bool(0.85),
                offerings: self.offerings(),
            },
            46..=62 => {
                let doctor = self.pick(Role::Doctor, AccountState::Active);
                Command::RequestBooking {
                    patient: self.pick(Role::Patient, AccountState::Active),
                    doctor,
                    booking_id: self.ids.booking(self.now),
                    slot: self.slot_for(doctor),
                }
            }
            63..=74 => {
                let (doctor, booking_id) = self.booking_target();
                Command::SetBookingStatus {
                    doctor,
                    booking_id,
                    status: *BookingStatus::ALL.choose(&mut self.rng).unwrap(),
                }
            }
            75..=79 => {
                let (doctor, booking_id) = self.booking_target();
                Command::AttachPrescription {
                    doctor,
                    booking_id,
                    prescription: "rest and fluids".into(),
                    required_radiographs: vec![],
                    required_tests: vec!["CBC".into()],
                }
            }
            80..=86 => {
                let actor = self.pick(Role::Patient, AccountState::Active);
                let patient = if self.rng.random_bool(0.8) { actor } else { self.actor() };
                Command::AddHistory {
                    actor,
                    patient,
                    category: CATEGORIES.choose(&mut self.rng).unwrap().to_string(),
                    text: "note".into(),
                }
            }
            87..=88 => {
                let actor = self.pick(Role::Patient, AccountState::Active);
                Command::UpdateBasicInfo {
                    actor,
                    patient: actor,
                    fields: profile("updated"),
                }
            }
            _ => {
                let actor = self.pick(Role::Patient, AccountState::Active);
                let patient = if self.rng.random_bool(0.8) { actor } else { self.actor() };
                Command::CreditTopup {
                    actor,
                    patient,
                    amount: self.rng.random_range(-5..120),
                }
            }
        }
    }

    /// Usually the booking's own doctor, sometimes anyone.
    fn booking_target(&mut self) -> (AccountId, BookingId) {
        let Some(b) = self.bookings.choose(&mut self.rng).copied() else {
            return (self.actor(), self.ids.booking(self.now));
        };
        let owner = self.portal.booking(b).unwrap().doctor_id;
        let doctor = if self.rng.random_bool(0.8) { owner } else { self.actor() };
        (doctor, b)
    }

    fn remember(&mut self, cmd: &Command) {
        match cmd {
            Command::BootstrapAdmin { account_id, .. } => self.accounts.push(*account_id),
            Command::RegisterDoctor { account_id, token, .. } | Command::RegisterPatient { account_id, token, .. } => {
                self.accounts.push(*account_id);
                self.tokens.push(token.clone());
            }
            Command::ReissueToken { token, .. } => self.tokens.push(token.clone()),
            _ => {}
        }
    }
}

// Oracles.

fn is_active(p: &Portal, id: AccountId, role: Role) -> bool {
    p.account(id)
        .is_some_and(|a| a.role == role && a.state == AccountState::Active)
}

/// Whether the caller of `cmd` passes the role and ownership precondition.
/// Anonymous commands always pass.
pub fn caller_authorized(p: &Portal, cmd: &Command) -> bool {
    match cmd {
        Command::BootstrapAdmin { .. }
        | Command::RegisterDoctor { .. }
        | Command::RegisterPatient { .. }
        | Command::ReissueToken { .. }
        | Command::Activate { .. } => true,
        Command::AdminDecide { admin, .. } => is_active(p, *admin, Role::Admin),
        Command::UpdateServiceSettings { doctor, .. } => is_active(p, *doctor, Role::Doctor),
        Command::RequestBooking { patient, .. } => is_active(p, *patient, Role::Patient),
        Command::SetBookingStatus { doctor, booking_id, .. }
        | Command::AttachPrescription { doctor, booking_id, .. } => {
            is_active(p, *doctor, Role::Doctor) && p.booking(*booking_id).is_some_and(|b| b.doctor_id == *doctor)
        }
        Command::AddHistory { actor, patient, .. } | Command::UpdateBasicInfo { actor, patient, .. } => {
            is_active(p, *actor, Role::Patient) && actor == patient
        }
        Command::CreditTopup { actor, patient, .. } => {
            (is_active(p, *actor, Role::Patient) && actor == patient)
                || (is_active(p, *actor, Role::Admin) && is_active(p, *patient, Role::Patient))
        }
    }
}

fn legal_account_step(role: Role, from: AccountState, to: AccountState) -> bool {
    use AccountState::*;
    from == to
        || matches!(
            (role, from, to),
            (Role::Patient, PendingActivation, Active)
                | (Role::Doctor, PendingActivation, AwaitingApproval)
                | (Role::Doctor, AwaitingApproval, Active)
                | (Role::Doctor, AwaitingApproval, Deleted)
        )
}

fn slot_seconds(s: &Slot) -> (i64, i64) {
    let days = s.date.signed_duration_since(date(1970, 1, 1)).num_days();
    let start = days * 86_400 + s.start.minutes() as i64 * 60 - TZ_MINUTES as i64 * 60;
    (start, start + s.length_minutes as i64 * 60)
}

#[derive(Debug, Default)]
pub struct Counters {
    pub commands: usize,
    pub ok: usize,
    pub rejected_unauthorized: usize,
    pub bookings: usize,
    pub refunds: usize,
}

/// Runs `steps` random commands, asserting every invariant after each,
/// and returns the full command log (failed commands included).
pub fn run_stream(seed: u64, steps: usize, counters: &mut Counters) -> Vec<(Command, Timestamp)> {
    let mut d = Driver::new(seed);
    // Expected balances, kept by the oracle from command effects alone.
    let mut expected: BTreeMap<AccountId, i64> = BTreeMap::new();

    for _ in 0..steps {
        d.now = d.now + d.rng.random_range(0..3 * 3600);
        let cmd = d.next_command();
        d.remember(&cmd);
        let before = d.portal.clone();
        let authorized = caller_authorized(&before, &cmd);
        // The cost the oracle expects a booking to debit.
        let expected_cost = match &cmd {
            Command::RequestBooking { doctor, slot, .. } => before
                .service_settings(*doctor)
                .and_then(|s| {
                    s.offerings.iter().find(|o| {
                        o.weekday == slot.date.weekday()
                            && o.start == slot.start
                            && o.length_minutes == slot.length_minutes
                    })
                })
                .map(|o| o.cost as i64),
            _ => None,
        };

        let result = d.portal.apply(&cmd, d.now);
        d.log.push((cmd.clone(), d.now));
        counters.commands += 1;

        match &result {
            Err(e) => {
                assert!(d.portal == before, "failed {} changed state: {e}", cmd.kind());
                if !authorized {
                    counters.rejected_unauthorized += 1;
                }
                if let Command::AdminDecide { .. } = cmd {
                    if !authorized {
                        assert_eq!(*e, WorkflowError::NotAdmin);
                    }
                }
            }
            Ok(_) => {
                assert!(authorized, "unauthorized {cmd:?} succeeded");
                if let Command::RequestBooking { booking_id, .. } = cmd {
                    d.bookings.push(booking_id);
                }
                counters.ok += 1;
                match &cmd {
                    Command::CreditTopup { patient, amount, .. } => *expected.entry(*patient).or_default() += amount,
                    Command::RequestBooking { patient, .. } => {
                        counters.bookings += 1;
                        *expected.entry(*patient).or_default() -= expected_cost.expect("booked an offered slot");
                    }
                    Command::SetBookingStatus { booking_id, status, .. } => {
                        let b = before.booking(*booking_id).unwrap();
                        if matches!(status, BookingStatus::Rejected | BookingStatus::Cancelled) {
                            counters.refunds += 1;
                            *expected.entry(b.patient_id).or_default() += b.cost as i64;
                        }
                    }
                    _ => {}
                }
            }
        }

        let after = &d.portal;

        // Account state machine.
        for a in before.accounts() {
            let now = after.account(a.account_id).unwrap();
            assert!(
                legal_account_step(a.role, a.state, now.state),
                "{:?} {:?} -> {:?}",
                a.role,
                a.state,
                now.state
            );
            assert_ne!((a.role, now.state), (Role::Patient, AccountState::AwaitingApproval));
        }

        // Credit conservation.
        for l in after.ledgers() {
            let sum: i64 = l.postings.iter().map(|p| p.amount).sum();
            assert!(sum >= 0);
            assert_eq!(l.balance as i64, sum);
            assert_eq!(l.balance as i64, expected.get(&l.patient_id).copied().unwrap_or(0));
            let topups: i64 = l
                .postings
                .iter()
                .filter(|p| p.reason == PostingReason::Topup)
                .map(|p| p.amount)
                .sum();
            let debits: i64 = l
                .postings
                .iter()
                .filter(|p| p.reason == PostingReason::Debit)
                .map(|p| -p.amount)
                .sum();
            let refunds: i64 = l
                .postings
                .iter()
                .filter(|p| p.reason == PostingReason::Refund)
                .map(|p| p.amount)
                .sum();
            assert_eq!(l.balance as i64, topups - debits + refunds);
            assert!(l
                .postings
                .iter()
                .filter(|p| p.reason == PostingReason::Debit)
                .all(|p| p.booking_id.is_some()));
        }

        // Slot exclusivity and refund completeness.
        let mut held: BTreeMap<AccountId, Vec<(i64, i64)>> = BTreeMap::new();
        for b in after.bookings() {
            if matches!(b.status, BookingStatus::Requested | BookingStatus::Accepted) {
                held.entry(b.doctor_id).or_default().push(slot_seconds(&b.slot));
            }
            let refunds: Vec<i64> = after
                .ledger(b.patient_id)
                .unwrap()
                .postings
                .iter()
                .filter(|p| p.reason == PostingReason::Refund && p.booking_id == Some(b.booking_id))
                .map(|p| p.amount)
                .collect();
            if matches!(b.status, BookingStatus::Rejected | BookingStatus::Cancelled) {
                assert_eq!(refunds, vec![b.cost as i64]);
            } else {
                assert!(refunds.is_empty());
            }
        }
        for intervals in held.values_mut() {
            intervals.sort();
            for w in intervals.windows(2) {
                assert!(w[0].1 <= w[1].0, "overlapping held bookings {w:?}");
            }
        }

        // History is append-only.
        for a in before.accounts().filter(|a| a.role == Role::Patient) {
            let (Some(h0), Some(h1)) = (before.history(a.account_id), after.history(a.account_id)) else {
                continue;
            };
            assert_history_prefix(h0, h1);
        }
    }

    // Replaying the whole log from scratch lands on the same state.
    let mut replay = Portal::new(d.portal.settings());
    for (cmd, at) in &d.log {
        let _ = replay.apply(cmd, *at);
    }
    assert_eq!(replay.digest(), d.portal.digest());
    d.log
}

fn assert_history_prefix(old: &MedicalHistory, new: &MedicalHistory) {
    for (cat, entries) in &old.entries {
        let now = &new.entries[cat];
        assert!(now.len() >= entries.len());
        assert_eq!(&now[..entries.len()], &entries[..]);
    }
}
