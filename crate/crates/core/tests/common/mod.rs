#![allow(dead_code)]

use chrono::{NaiveDate, Weekday};
use medirelay_core::workflow::{
    ClockTime, Command, Credential, Decision, Offering, Outcome, Portal, PortalSettings, Profile, Slot, WorkflowError,
};
use medirelay_core::{AccountId, BookingId, IdGen, Timestamp};

pub fn cred(tag: &str) -> Credential {
    Credential {
        scheme: "test".into(),
        salt: "00".into(),
        hash: tag.into(),
    }
}

pub fn profile(name: &str) -> Profile {
    [("name".to_string(), name.to_string())].into()
}

pub fn hm(h: u32, m: u32) -> ClockTime {
    ClockTime::new(h, m).unwrap()
}

pub fn offering(weekday: Weekday, h: u32, m: u32, len: u32, cost: u64) -> Offering {
    Offering {
        weekday,
        start: hm(h, m),
        length_minutes: len,
        cost,
    }
}

pub fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

pub fn slot(d: NaiveDate, h: u32, m: u32, len: u32) -> Slot {
    Slot {
        date: d,
        start: hm(h, m),
        length_minutes: len,
    }
}

/// 2026-10-05 00:00 UTC, a Monday.
pub const START: i64 = 1_791_158_400;

/// A portal plus the bookkeeping needed to drive it by hand.
pub struct World {
    pub portal: Portal,
    pub ids: IdGen,
    pub now: Timestamp,
    pub log: Vec<(Command, Timestamp)>,
    pub admin: Option<AccountId>,
}

impl World {
    pub fn new(seed: u64) -> Self {
        Self {
            portal: Portal::new(PortalSettings::default()),
            ids: IdGen::seeded(seed),
            now: Timestamp::from_secs(START),
            log: Vec::new(),
            admin: None,
        }
    }

    pub fn run(&mut self, cmd: Command) -> Result<Outcome, WorkflowError> {
        self.log.push((cmd.clone(), self.now));
        self.portal.apply(&cmd, self.now)
    }

    pub fn advance(&mut self, secs: i64) {
        self.now = self.now + secs;
    }

    pub fn id(&mut self) -> AccountId {
        self.ids.account(self.now)
    }

    pub fn booking_id(&mut self) -> BookingId {
        self.ids.booking(self.now)
    }

    pub fn admin(&mut self) -> AccountId {
        if let Some(a) = self.admin {
            return a;
        }
        let id = self.id();
        self.run(Command::BootstrapAdmin {
            account_id: id,
            email: "admin@portal.test".into(),
            profile: profile("Admin"),
            credential: cred("admin"),
        })
        .unwrap();
        self.admin = Some(id);
        id
    }

    /// Registers and returns (account, token) without activating.
    pub fn register_patient(&mut self, email: &str) -> Result<(AccountId, String), WorkflowError> {
        let id = self.id();
        let token = self.ids.token();
        self.run(Command::RegisterPatient {
            account_id: id,
            email: email.into(),
            profile: profile(email),
            token: token.clone(),
        })?;
        Ok((id, token))
    }

    pub fn register_doctor(&mut self, email: &str, name: &str) -> Result<(AccountId, String), WorkflowError> {
        let id = self.id();
        let token = self.ids.token();
        let mut p = profile(name);
        p.insert("specialty".into(), "general".into());
        self.run(Command::RegisterDoctor {
            account_id: id,
            email: email.into(),
            profile: p,
            token: token.clone(),
        })?;
        Ok((id, token))
    }

    pub fn activate(&mut self, token: &str) -> Result<Outcome, WorkflowError> {
        self.run(Command::Activate {
            token: token.into(),
            credential: cred("pw"),
        })
    }

    pub fn patient(&mut self, email: &str) -> AccountId {
        let (id, token) = self.register_patient(email).unwrap();
        self.activate(&token).unwrap();
        id
    }

    pub fn doctor(&mut self, email: &str) -> AccountId {
        let admin = self.admin();
        let (id, token) = self.register_doctor(email, email).unwrap();
        self.activate(&token).unwrap();
        self.run(Command::AdminDecide {
            admin,
            doctor: id,
            decision: Decision::Approve,
        })
        .unwrap();
        id
    }

    pub fn topup(&mut self, patient: AccountId, amount: i64) -> Result<Outcome, WorkflowError> {
        self.run(Command::CreditTopup {
            actor: patient,
            patient,
            amount,
        })
    }

    pub fn offer(&mut self, doctor: AccountId, offerings: Vec<Offering>) -> Result<Outcome, WorkflowError> {
        self.run(Command::UpdateServiceSettings {
            doctor,
            enabled: true,
            offerings,
        })
    }

    pub fn book(&mut self, patient: AccountId, doctor: AccountId, slot: Slot) -> Result<BookingId, WorkflowError> {
        let booking_id = self.booking_id();
        self.run(Command::RequestBooking {
            patient,
            doctor,
            booking_id,
            slot,
        })?;
        Ok(booking_id)
    }

    pub fn balance(&self, patient: AccountId) -> u64 {
        self.portal.ledger(patient).unwrap().balance
    }
}
