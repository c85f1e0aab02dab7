//! The fixed demo fixture: an administrator, two approved doctors with
//! weekly offerings, three funded patients and one booking.
//!
//! Ids, salts and times all come from a fixed seed and a fixed clock, so
//! seeding two empty data directories yields identical logs.

use chrono::Weekday;
use medirelay_core::workflow::{ClockTime, Command, Decision, Offering, Profile, Slot};
use medirelay_core::{AccountId, BookingId, IdGen, Timestamp};
use serde::Serialize;

use crate::credential::hash_password;
use crate::error::ServiceError;
use crate::node::Node;

pub const DEMO_SEED: u64 = 0x5EED;
pub const DEMO_PASSWORD: &str = "demo-password";
/// 2026-01-05 08:00 UTC, a Monday.
pub const DEMO_EPOCH: i64 = 1_767_600_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DemoAccount {
    pub account_id: AccountId,
    pub email: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DemoSummary {
    pub admin: DemoAccount,
    pub doctors: Vec<DemoAccount>,
    pub patients: Vec<DemoAccount>,
    pub booking: BookingId,
    pub password: String,
}

fn profile(pairs: &[(&str, &str)]) -> Profile {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn offering(weekday: Weekday, h: u32, m: u32, len: u32, cost: u64) -> Offering {
    Offering {
        weekday,
        start: ClockTime::new(h, m).expect("fixture times are valid"),
        length_minutes: len,
        cost,
    }
}

struct Seeder<'a> {
    node: &'a Node,
    ids: IdGen,
    now: Timestamp,
}

impl Seeder<'_> {
    fn run(&mut self, cmd: Command) -> Result<(), ServiceError> {
        self.now = self.now + 60;
        self.node.execute_at(&cmd, self.now)?;
        Ok(())
    }

    fn credential(&mut self) -> Result<medirelay_core::workflow::Credential, ServiceError> {
        hash_password(DEMO_PASSWORD, self.node.config().kdf_iterations, &mut self.ids)
    }

    /// Registers and activates a doctor or patient.
    fn account(&mut self, doctor: bool, email: &str, p: Profile) -> Result<DemoAccount, ServiceError> {
        let account_id = self.ids.account(self.now);
        let token = self.ids.token();
        let name = p.get("name").cloned().unwrap_or_default();
        let (email_s, tok) = (email.to_string(), token.clone());
        self.run(if doctor {
            Command::RegisterDoctor {
                account_id,
                email: email_s,
                profile: p,
                token: tok,
            }
        } else {
            Command::RegisterPatient {
                account_id,
                email: email_s,
                profile: p,
                token: tok,
            }
        })?;
        let credential = self.credential()?;
        self.run(Command::Activate { token, credential })?;
        Ok(DemoAccount {
            account_id,
            email: email.to_string(),
            name,
        })
    }
}

/// Seeds an empty portal. Refuses to touch one that already has state.
pub fn seed_demo(node: &Node) -> Result<DemoSummary, ServiceError> {
    if node.log_seq() != 0 {
        return Err(ServiceError::BadRequest(
            "seed-demo needs an empty data directory".into(),
        ));
    }
    let mut s = Seeder {
        node,
        ids: IdGen::seeded(DEMO_SEED),
        now: Timestamp::from_secs(DEMO_EPOCH),
    };

    let admin_id = s.ids.account(s.now);
    let credential = s.credential()?;
    s.run(Command::BootstrapAdmin {
        account_id: admin_id,
        email: "admin@demo.medirelay.test".into(),
        profile: profile(&[("name", "Portal Administrator")]),
        credential,
    })?;
    let admin = DemoAccount {
        account_id: admin_id,
        email: "admin@demo.medirelay.test".into(),
        name: "Portal Administrator".into(),
    };

    let doctor_specs = [
        ("amal.haddad@demo.medirelay.test", "Dr. Amal Haddad", "cardiology"),
        ("omar.saleh@demo.medirelay.test", "Dr. Omar Saleh", "radiology"),
    ];
    let mut doctors = Vec::new();
    for (email, name, specialty) in doctor_specs {
        let d = s.account(true, email, profile(&[("name", name), ("specialty", specialty)]))?;
        s.run(Command::AdminDecide {
            admin: admin_id,
            doctor: d.account_id,
            decision: Decision::Approve,
        })?;
        doctors.push(d);
    }
    s.run(Command::UpdateServiceSettings {
        doctor: doctors[0].account_id,
        enabled: true,
        offerings: vec![
            offering(Weekday::Mon, 9, 0, 30, 40),
            offering(Weekday::Mon, 9, 30, 30, 40),
            offering(Weekday::Wed, 14, 0, 45, 60),
        ],
    })?;
    s.run(Command::UpdateServiceSettings {
        doctor: doctors[1].account_id,
        enabled: true,
        offerings: vec![offering(Weekday::Tue, 10, 0, 60, 80)],
    })?;

    let patient_specs = [
        ("layla.nasser@demo.medirelay.test", "Layla Nasser"),
        ("karim.aziz@demo.medirelay.test", "Karim Aziz"),
        ("sara.mansour@demo.medirelay.test", "Sara Mansour"),
    ];
    let mut patients = Vec::new();
    for (email, name) in patient_specs {
        let p = s.account(false, email, profile(&[("name", name)]))?;
        s.run(Command::CreditTopup {
            actor: p.account_id,
            patient: p.account_id,
            amount: 200,
        })?;
        patients.push(p);
    }

    let booking = s.ids.booking(s.now);
    s.run(Command::RequestBooking {
        patient: patients[0].account_id,
        doctor: doctors[0].account_id,
        booking_id: booking,
        slot: Slot {
            date: chrono::NaiveDate::from_ymd_opt(2026, 1, 12).expect("fixture date"),
            start: ClockTime::new(9, 0).expect("fixture time"),
            length_minutes: 30,
        },
    })?;

    Ok(DemoSummary {
        admin,
        doctors,
        patients,
        booking,
        password: DEMO_PASSWORD.into(),
    })
}
