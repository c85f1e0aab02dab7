//! Portal workflow: accounts, telemedicine service settings, bookings paid
//! from patient credit, prescriptions, and medical history.
//!
//! [`Portal`] is a deterministic state machine. Every mutation is a
//! [`Command`] applied at an explicit instant; ids and tokens are chosen
//! before the command is built, so replaying a command log reproduces the
//! exact same state. A command either succeeds completely or leaves the
//! state untouched.

mod notify;
mod types;

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use email_address::EmailAddress;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::digest::Digest;
use crate::id::{AccountId, BookingId};
use crate::time::{Timestamp, HOUR};

pub use notify::{FileNotifier, Notifier};
pub use types::*;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum WorkflowError {
    #[error("invalid email address {0:?}")]
    InvalidEmail(String),
    #[error("email {0} is already registered")]
    EmailTaken(String),
    #[error("activation token is not valid")]
    TokenInvalid,
    #[error("activation token has expired")]
    TokenExpired,
    #[error("activation token was already used")]
    TokenUsed,
    #[error("an administrator account already exists")]
    AdminExists,
    #[error("only an administrator may do this")]
    NotAdmin,
    #[error("account is in the wrong state for this operation")]
    WrongState,
    #[error("account is not active")]
    NotActive,
    #[error("not permitted: {0}")]
    Forbidden(String),
    #[error("unknown account {0}")]
    UnknownAccount(AccountId),
    #[error("unknown booking {0}")]
    UnknownBooking(BookingId),
    #[error("offerings overlap on {0}")]
    OverlappingOfferings(String),
    #[error("doctor's telemedicine service is disabled")]
    ServiceDisabled,
    #[error("slot is not offered by this doctor")]
    SlotNotOffered,
    #[error("slot is already taken")]
    SlotTaken,
    #[error("insufficient credit: balance {balance}, cost {cost}")]
    InsufficientCredit { balance: u64, cost: u64 },
    #[error("booking cannot go from {from:?} to {to:?}")]
    IllegalTransition { from: BookingStatus, to: BookingStatus },
    #[error("booking belongs to another doctor")]
    NotYourBooking,
    #[error("booking status {0:?} does not allow this")]
    WrongStatus(BookingStatus),
    #[error("unknown history category {0:?}")]
    UnknownCategory(String),
    #[error("amount must be positive")]
    NonPositiveAmount,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl WorkflowError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        use WorkflowError::*;
        match self {
            InvalidEmail(_) => "InvalidEmail",
            EmailTaken(_) => "EmailTaken",
            TokenInvalid => "TokenInvalid",
            TokenExpired => "TokenExpired",
            TokenUsed => "TokenUsed",
            AdminExists => "AdminExists",
            NotAdmin => "NotAdmin",
            WrongState => "WrongState",
            NotActive => "NotActive",
            Forbidden(_) => "Forbidden",
            UnknownAccount(_) => "UnknownAccount",
            UnknownBooking(_) => "UnknownBooking",
            OverlappingOfferings(_) => "OverlappingOfferings",
            ServiceDisabled => "ServiceDisabled",
            SlotNotOffered => "SlotNotOffered",
            SlotTaken => "SlotTaken",
            InsufficientCredit { .. } => "InsufficientCredit",
            IllegalTransition { .. } => "IllegalTransition",
            NotYourBooking => "NotYourBooking",
            WrongStatus(_) => "WrongStatus",
            UnknownCategory(_) => "UnknownCategory",
            NonPositiveAmount => "NonPositiveAmount",
            InvalidInput(_) => "InvalidInput",
        }
    }

    /// True for errors that mean "this caller may not do this".
    pub fn is_authorization(&self) -> bool {
        use WorkflowError::*;
        matches!(
            self,
            NotAdmin | NotActive | Forbidden(_) | NotYourBooking | UnknownAccount(_)
        )
    }
}

/// Every state change the portal accepts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    /// Creates the first administrator. Refused once one exists.
    BootstrapAdmin {
        account_id: AccountId,
        email: String,
        profile: Profile,
        credential: Credential,
    },
    RegisterDoctor {
        account_id: AccountId,
        email: String,
        profile: Profile,
        token: String,
    },
    RegisterPatient {
        account_id: AccountId,
        email: String,
        profile: Profile,
        token: String,
    },
    /// Replaces the activation token of a still-pending account.
    ReissueToken {
        email: String,
        token: String,
    },
    Activate {
        token: String,
        credential: Credential,
    },
    AdminDecide {
        admin: AccountId,
        doctor: AccountId,
        decision: Decision,
    },
    UpdateServiceSettings {
        doctor: AccountId,
        enabled: bool,
        offerings: Vec<Offering>,
    },
    RequestBooking {
        patient: AccountId,
        doctor: AccountId,
        booking_id: BookingId,
        slot: Slot,
    },
    SetBookingStatus {
        doctor: AccountId,
        booking_id: BookingId,
        status: BookingStatus,
    },
    AttachPrescription {
        doctor: AccountId,
        booking_id: BookingId,
        prescription: String,
        required_radiographs: Vec<String>,
        required_tests: Vec<String>,
    },
    AddHistory {
        actor: AccountId,
        patient: AccountId,
        category: String,
        text: String,
    },
    UpdateBasicInfo {
        actor: AccountId,
        patient: AccountId,
        fields: Profile,
    },
    CreditTopup {
        actor: AccountId,
        patient: AccountId,
        amount: i64,
    },
}

impl Command {
    pub fn kind(&self) -> &'static str {
        match self {
            Command::BootstrapAdmin { .. } => "bootstrap_admin",
            Command::RegisterDoctor { .. } => "register_doctor",
            Command::RegisterPatient { .. } => "register_patient",
            Command::ReissueToken { .. } => "reissue_token",
            Command::Activate { .. } => "activate",
            Command::AdminDecide { .. } => "admin_decide",
            Command::UpdateServiceSettings { .. } => "update_service_settings",
            Command::RequestBooking { .. } => "request_booking",
            Command::SetBookingStatus { .. } => "set_booking_status",
            Command::AttachPrescription { .. } => "attach_prescription",
            Command::AddHistory { .. } => "add_history",
            Command::UpdateBasicInfo { .. } => "update_basic_info",
            Command::CreditTopup { .. } => "credit_topup",
        }
    }
}

/// The visible result of a successful command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Effect {
    Account(PublicAccount),
    Settings(ServiceSettings),
    Booking(Booking),
    History(MedicalHistory),
    Ledger(CreditLedger),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub effect: Effect,
    pub notifications: Vec<Notification>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortalSettings {
    /// The single portal timezone, as minutes east of UTC.
    pub tz_offset_minutes: i32,
    pub token_ttl_secs: i64,
}

impl Default for PortalSettings {
    fn default() -> Self {
        Self {
            tz_offset_minutes: 0,
            token_ttl_secs: 72 * HOUR,
        }
    }
}

/// What a doctor sees when reviewing a booking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookingReview {
    pub booking: Booking,
    pub patient: PublicAccount,
    pub starts_at: Timestamp,
    pub ends_at: Timestamp,
    pub history: MedicalHistory,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Portal {
    settings: PortalSettings,
    accounts: BTreeMap<AccountId, Account>,
    tokens: BTreeMap<String, ActivationToken>,
    services: BTreeMap<AccountId, ServiceSettings>,
    bookings: BTreeMap<BookingId, Booking>,
    histories: BTreeMap<AccountId, MedicalHistory>,
    ledgers: BTreeMap<AccountId, CreditLedger>,
}

fn normalize_email(raw: &str) -> Result<String, WorkflowError> {
    let email = raw.trim().to_ascii_lowercase();
    let ok = EmailAddress::is_valid(&email)
        && email
            .rsplit_once('@')
            .is_some_and(|(_, domain)| domain.contains('.') && !domain.ends_with('.'));
    if ok {
        Ok(email)
    } else {
        Err(WorkflowError::InvalidEmail(raw.to_string()))
    }
}

fn forbidden(why: &str) -> WorkflowError {
    WorkflowError::Forbidden(why.to_string())
}

impl Portal {
    pub fn new(settings: PortalSettings) -> Self {
        Self {
            settings,
            ..Self::default()
        }
    }

    pub fn settings(&self) -> PortalSettings {
        self.settings
    }

    /// SHA-256 over the full serialized state. Maps are ordered, so equal
    /// states always hash equally.
    pub fn digest(&self) -> Digest {
        let bytes = serde_json::to_vec(self).expect("portal state serializes");
        Digest(Sha256::digest(&bytes).into())
    }

    // Reads.

    pub fn account(&self, id: AccountId) -> Option<&Account> {
        self.accounts.get(&id)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &Account> {
        self.accounts.values()
    }

    /// The live (non-deleted) account holding an email address.
    pub fn account_by_email(&self, email: &str) -> Option<&Account> {
        let email = email.trim().to_ascii_lowercase();
        self.accounts
            .values()
            .find(|a| a.email == email && a.state != AccountState::Deleted)
    }

    pub fn token(&self, token: &str) -> Option<&ActivationToken> {
        self.tokens.get(token)
    }

    pub fn pending_doctors(&self) -> Vec<&Account> {
        self.accounts
            .values()
            .filter(|a| a.role == Role::Doctor && a.state == AccountState::AwaitingApproval)
            .collect()
    }

    /// Active doctors whose email or any profile field contains `query`,
    /// case-insensitively, ordered by name then id.
    pub fn search_doctors(&self, query: &str) -> Vec<&Account> {
        let q = query.trim().to_lowercase();
        let mut out: Vec<&Account> = self
            .accounts
            .values()
            .filter(|a| a.role == Role::Doctor && a.state == AccountState::Active)
            .filter(|a| {
                q.is_empty() || a.email.contains(&q) || a.profile.values().any(|v| v.to_lowercase().contains(&q))
            })
            .collect();
        out.sort_by(|a, b| {
            let name = |x: &Account| x.profile.get("name").cloned().unwrap_or_default();
            (name(a), a.account_id).cmp(&(name(b), b.account_id))
        });
        out
    }

    pub fn service_settings(&self, doctor: AccountId) -> Option<&ServiceSettings> {
        self.services.get(&doctor)
    }

    pub fn bookings(&self) -> impl Iterator<Item = &Booking> {
        self.bookings.values()
    }

    pub fn booking(&self, id: BookingId) -> Option<&Booking> {
        self.bookings.get(&id)
    }

    pub fn history(&self, patient: AccountId) -> Option<&MedicalHistory> {
        self.histories.get(&patient)
    }

    pub fn ledger(&self, patient: AccountId) -> Option<&CreditLedger> {
        self.ledgers.get(&patient)
    }

    pub fn ledgers(&self) -> impl Iterator<Item = &CreditLedger> {
        self.ledgers.values()
    }

    fn held_overlap(&self, doctor: AccountId, slot: &Slot) -> bool {
        let tz = self.settings.tz_offset_minutes;
        let (s, e) = slot.interval(tz);
        self.bookings.values().any(|b| {
            b.doctor_id == doctor && b.status.holds_slot() && {
                let (bs, be) = b.slot.interval(tz);
                bs < e && s < be
            }
        })
    }

    /// Concrete open slots of a doctor between two portal-local dates,
    /// inclusive, in time order. A disabled service has none.
    pub fn list_available_slots(&self, doctor: AccountId, from: NaiveDate, to: NaiveDate) -> Vec<Slot> {
        let Some(svc) = self.services.get(&doctor).filter(|s| s.enabled) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for date in from.iter_days().take_while(|d| *d <= to) {
            for o in svc.offerings.iter().filter(|o| o.weekday == date.weekday()) {
                let slot = Slot {
                    date,
                    start: o.start,
                    length_minutes: o.length_minutes,
                };
                if !self.held_overlap(doctor, &slot) {
                    out.push(slot);
                }
            }
        }
        out.sort();
        out
    }

    fn live(&self, id: AccountId) -> Result<&Account, WorkflowError> {
        let a = self.accounts.get(&id).ok_or(WorkflowError::UnknownAccount(id))?;
        if a.state != AccountState::Active {
            return Err(WorkflowError::NotActive);
        }
        Ok(a)
    }

    fn live_as(&self, id: AccountId, role: Role) -> Result<&Account, WorkflowError> {
        let a = self.live(id)?;
        if a.role != role {
            return Err(forbidden(&format!("requires a {role:?} account")));
        }
        Ok(a)
    }

    /// The patient themself, or an administrator.
    fn patient_or_admin(&self, actor: AccountId, patient: AccountId) -> Result<(), WorkflowError> {
        let a = self.live(actor)?;
        if a.role == Role::Admin {
            self.live_as(patient, Role::Patient)?;
            return Ok(());
        }
        if a.role != Role::Patient || actor != patient {
            return Err(forbidden("only the patient or an administrator"));
        }
        Ok(())
    }

    /// Bookings visible to an account, newest first. Patients see their own
    /// (with prescriptions shown only once readable), doctors theirs,
    /// administrators all.
    pub fn list_bookings(&self, actor: AccountId) -> Result<Vec<Booking>, WorkflowError> {
        let a = self.live(actor)?;
        let mut out: Vec<Booking> = match a.role {
            Role::Patient => self
                .bookings
                .values()
                .filter(|b| b.patient_id == actor)
                .map(Booking::patient_view)
                .collect(),
            Role::Doctor => self
                .bookings
                .values()
                .filter(|b| b.doctor_id == actor)
                .cloned()
                .collect(),
            Role::Admin => self.bookings.values().cloned().collect(),
        };
        out.sort_by_key(|b| std::cmp::Reverse((b.created_at, b.booking_id)));
        Ok(out)
    }

    /// A patient's history, readable by the patient and by any doctor with
    /// a live or completed booking for them.
    pub fn view_history(&self, actor: AccountId, patient: AccountId) -> Result<&MedicalHistory, WorkflowError> {
        let a = self.live(actor)?;
        let allowed = match a.role {
            Role::Patient => actor == patient,
            Role::Doctor => self.bookings.values().any(|b| {
                b.doctor_id == actor
                    && b.patient_id == patient
                    && !matches!(b.status, BookingStatus::Rejected | BookingStatus::Cancelled)
            }),
            Role::Admin => false,
        };
        if !allowed {
            return Err(forbidden("no relationship with this patient"));
        }
        self.histories
            .get(&patient)
            .ok_or(WorkflowError::UnknownAccount(patient))
    }

    pub fn view_ledger(&self, actor: AccountId, patient: AccountId) -> Result<&CreditLedger, WorkflowError> {
        self.patient_or_admin(actor, patient)?;
        self.ledgers.get(&patient).ok_or(WorkflowError::UnknownAccount(patient))
    }

    pub fn review_booking(&self, actor: AccountId, booking_id: BookingId) -> Result<BookingReview, WorkflowError> {
        self.live_as(actor, Role::Doctor)?;
        let b = self
            .bookings
            .get(&booking_id)
            .ok_or(WorkflowError::UnknownBooking(booking_id))?;
        if b.doctor_id != actor {
            return Err(WorkflowError::NotYourBooking);
        }
        if matches!(b.status, BookingStatus::Rejected | BookingStatus::Cancelled) {
            return Err(WorkflowError::WrongStatus(b.status));
        }
        let patient = self
            .accounts
            .get(&b.patient_id)
            .ok_or(WorkflowError::UnknownAccount(b.patient_id))?;
        let (starts_at, ends_at) = b.slot.interval(self.settings.tz_offset_minutes);
        Ok(BookingReview {
            booking: b.clone(),
            patient: patient.public(),
            starts_at,
            ends_at,
            history: self
                .histories
                .get(&b.patient_id)
                .cloned()
                .unwrap_or_else(|| MedicalHistory::new(b.patient_id)),
        })
    }

    /// Checks an account may log in; the caller verifies the credential.
    pub fn login_account(&self, email: &str) -> Result<&Account, WorkflowError> {
        let a = self
            .account_by_email(email)
            .ok_or_else(|| forbidden("bad credentials"))?;
        if a.state != AccountState::Active {
            return Err(WorkflowError::NotActive);
        }
        Ok(a)
    }

    // Writes.

    /// Applies one command. On error the state is unchanged.
    pub fn apply(&mut self, cmd: &Command, now: Timestamp) -> Result<Outcome, WorkflowError> {
        match cmd {
            Command::BootstrapAdmin {
                account_id,
                email,
                profile,
                credential,
            } => self.bootstrap_admin(*account_id, email, profile, credential, now),
            Command::RegisterDoctor {
                account_id,
                email,
                profile,
                token,
            } => self.register(Role::Doctor, *account_id, email, profile, token, now),
            Command::RegisterPatient {
                account_id,
                email,
                profile,
                token,
            } => self.register(Role::Patient, *account_id, email, profile, token, now),
            Command::ReissueToken { email, token } => self.reissue_token(email, token, now),
            Command::Activate { token, credential } => self.activate(token, credential, now),
            Command::AdminDecide {
                admin,
                doctor,
                decision,
            } => self.admin_decide(*admin, *doctor, *decision),
            Command::UpdateServiceSettings {
                doctor,
                enabled,
                offerings,
            } => self.update_service_settings(*doctor, *enabled, offerings),
            Command::RequestBooking {
                patient,
                doctor,
                booking_id,
                slot,
            } => self.request_booking(*patient, *doctor, *booking_id, slot, now),
            Command::SetBookingStatus {
                doctor,
                booking_id,
                status,
            } => self.set_booking_status(*doctor, *booking_id, *status, now),
            Command::AttachPrescription {
                doctor,
                booking_id,
                prescription,
                required_radiographs,
                required_tests,
            } => self.attach_prescription(*doctor, *booking_id, prescription, required_radiographs, required_tests),
            Command::AddHistory {
                actor,
                patient,
                category,
                text,
            } => self.add_history(*actor, *patient, category, text, now),
            Command::UpdateBasicInfo { actor, patient, fields } => self.update_basic_info(*actor, *patient, fields),
            Command::CreditTopup { actor, patient, amount } => self.credit_topup(*actor, *patient, *amount, now),
        }
    }

    fn check_new_account(&self, id: AccountId, raw_email: &str) -> Result<String, WorkflowError> {
        let email = normalize_email(raw_email)?;
        if self.account_by_email(&email).is_some() {
            return Err(WorkflowError::EmailTaken(email));
        }
        if self.accounts.contains_key(&id) {
            return Err(WorkflowError::InvalidInput(format!("account id {id} already in use")));
        }
        Ok(email)
    }

    fn check_new_token(&self, token: &str) -> Result<(), WorkflowError> {
        if token.len() < 16 || self.tokens.contains_key(token) {
            return Err(WorkflowError::InvalidInput(
                "token must be fresh and at least 16 characters".into(),
            ));
        }
        Ok(())
    }

    fn bootstrap_admin(
        &mut self,
        id: AccountId,
        email: &str,
        profile: &Profile,
        credential: &Credential,
        now: Timestamp,
    ) -> Result<Outcome, WorkflowError> {
        if self
            .accounts
            .values()
            .any(|a| a.role == Role::Admin && a.state != AccountState::Deleted)
        {
            return Err(WorkflowError::AdminExists);
        }
        let email = self.check_new_account(id, email)?;
        let account = Account {
            account_id: id,
            role: Role::Admin,
            email,
            profile: profile.clone(),
            state: AccountState::Active,
            created_at: now,
            credential: Some(credential.clone()),
        };
        let effect = Effect::Account(account.public());
        self.accounts.insert(id, account);
        Ok(Outcome {
            effect,
            notifications: vec![],
        })
    }

    fn issue_token(&mut self, id: AccountId, token: &str, now: Timestamp) {
        self.tokens.insert(
            token.to_string(),
            ActivationToken {
                token: token.to_string(),
                account_id: id,
                issued_at: now,
                expires_at: now + self.settings.token_ttl_secs,
                used: false,
            },
        );
    }

    fn register(
        &mut self,
        role: Role,
        id: AccountId,
        email: &str,
        profile: &Profile,
        token: &str,
        now: Timestamp,
    ) -> Result<Outcome, WorkflowError> {
        let email = self.check_new_account(id, email)?;
        self.check_new_token(token)?;
        let account = Account {
            account_id: id,
            role,
            email: email.clone(),
            profile: profile.clone(),
            state: AccountState::PendingActivation,
            created_at: now,
            credential: None,
        };
        let effect = Effect::Account(account.public());
        self.accounts.insert(id, account);
        self.issue_token(id, token, now);
        if role == Role::Patient {
            self.histories.insert(id, MedicalHistory::new(id));
            self.ledgers.insert(id, CreditLedger::new(id));
        }
        let admin_kind = match role {
            Role::Doctor => NotificationKind::DoctorRegistered,
            _ => NotificationKind::PatientRegistered,
        };
        Ok(Outcome {
            effect,
            notifications: vec![
                Notification {
                    recipient: Recipient::Account(id),
                    kind: NotificationKind::ActivateAccount,
                    payload: format!("activate your account with token {token}"),
                },
                Notification {
                    recipient: Recipient::Admin,
                    kind: admin_kind,
                    payload: format!("{role:?} {email} registered"),
                },
            ],
        })
    }

    fn reissue_token(&mut self, email: &str, token: &str, now: Timestamp) -> Result<Outcome, WorkflowError> {
        let account = self
            .account_by_email(email)
            .filter(|a| a.state == AccountState::PendingActivation)
            .ok_or(WorkflowError::WrongState)?
            .clone();
        self.check_new_token(token)?;
        let id = account.account_id;
        self.tokens.retain(|_, t| t.account_id != id);
        self.issue_token(id, token, now);
        Ok(Outcome {
            effect: Effect::Account(account.public()),
            notifications: vec![Notification {
                recipient: Recipient::Account(id),
                kind: NotificationKind::ActivateAccount,
                payload: format!("activate your account with token {token}"),
            }],
        })
    }

    fn activate(&mut self, token: &str, credential: &Credential, now: Timestamp) -> Result<Outcome, WorkflowError> {
        let t = self.tokens.get(token).ok_or(WorkflowError::TokenInvalid)?;
        if t.used {
            return Err(WorkflowError::TokenUsed);
        }
        if now >= t.expires_at {
            return Err(WorkflowError::TokenExpired);
        }
        let id = t.account_id;
        let account = self.accounts.get(&id).ok_or(WorkflowError::TokenInvalid)?;
        if account.state != AccountState::PendingActivation {
            return Err(WorkflowError::WrongState);
        }
        let next = match account.role {
            Role::Doctor => AccountState::AwaitingApproval,
            _ => AccountState::Active,
        };
        let account = self.accounts.get_mut(&id).expect("checked above");
        account.state = next;
        account.credential = Some(credential.clone());
        let effect = Effect::Account(account.public());
        self.tokens.get_mut(token).expect("checked above").used = true;
        Ok(Outcome {
            effect,
            notifications: vec![],
        })
    }

    fn admin_decide(
        &mut self,
        admin: AccountId,
        doctor: AccountId,
        decision: Decision,
    ) -> Result<Outcome, WorkflowError> {
        match self.accounts.get(&admin) {
            Some(a) if a.role == Role::Admin && a.state == AccountState::Active => {}
            _ => return Err(WorkflowError::NotAdmin),
        }
        let d = self
            .accounts
            .get(&doctor)
            .ok_or(WorkflowError::UnknownAccount(doctor))?;
        if d.role != Role::Doctor || d.state != AccountState::AwaitingApproval {
            return Err(WorkflowError::WrongState);
        }
        let d = self.accounts.get_mut(&doctor).expect("checked above");
        let notifications = match decision {
            Decision::Approve => {
                d.state = AccountState::Active;
                vec![Notification {
                    recipient: Recipient::Account(doctor),
                    kind: NotificationKind::AccountApproved,
                    payload: "welcome: your doctor account is approved".into(),
                }]
            }
            Decision::Delete => {
                d.state = AccountState::Deleted;
                vec![]
            }
        };
        Ok(Outcome {
            effect: Effect::Account(d.public()),
            notifications,
        })
    }

    fn update_service_settings(
        &mut self,
        doctor: AccountId,
        enabled: bool,
        offerings: &[Offering],
    ) -> Result<Outcome, WorkflowError> {
        self.live_as(doctor, Role::Doctor)?;
        for o in offerings {
            if o.length_minutes == 0 {
                return Err(WorkflowError::InvalidInput("slot length must be positive".into()));
            }
            if o.start.minutes() + o.length_minutes > 24 * 60 {
                return Err(WorkflowError::InvalidInput(format!(
                    "{} {} slot runs past midnight",
                    o.weekday, o.start
                )));
            }
        }
        for (i, a) in offerings.iter().enumerate() {
            if let Some(b) = offerings[i + 1..].iter().find(|b| a.overlaps(b)) {
                return Err(WorkflowError::OverlappingOfferings(format!(
                    "{} {} and {}",
                    a.weekday, a.start, b.start
                )));
            }
        }
        let mut sorted = offerings.to_vec();
        sorted.sort_by_key(|o| (o.weekday.num_days_from_monday(), o.start));
        let settings = ServiceSettings {
            doctor_id: doctor,
            enabled,
            offerings: sorted,
        };
        self.services.insert(doctor, settings.clone());
        Ok(Outcome {
            effect: Effect::Settings(settings),
            notifications: vec![],
        })
    }

    fn request_booking(
        &mut self,
        patient: AccountId,
        doctor: AccountId,
        booking_id: BookingId,
        slot: &Slot,
        now: Timestamp,
    ) -> Result<Outcome, WorkflowError> {
        self.live_as(patient, Role::Patient)?;
        match self.accounts.get(&doctor) {
            Some(d) if d.role == Role::Doctor && d.state == AccountState::Active => {}
            Some(d) if d.role == Role::Doctor => return Err(WorkflowError::NotActive),
            _ => return Err(WorkflowError::UnknownAccount(doctor)),
        }
        if self.bookings.contains_key(&booking_id) {
            return Err(WorkflowError::InvalidInput(format!(
                "booking id {booking_id} already in use"
            )));
        }
        let svc = self
            .services
            .get(&doctor)
            .filter(|s| s.enabled)
            .ok_or(WorkflowError::ServiceDisabled)?;
        let offering = svc
            .offerings
            .iter()
            .find(|o| o.matches(slot))
            .ok_or(WorkflowError::SlotNotOffered)?;
        if slot.interval(self.settings.tz_offset_minutes).0 < now {
            return Err(WorkflowError::SlotNotOffered);
        }
        if self.held_overlap(doctor, slot) {
            return Err(WorkflowError::SlotTaken);
        }
        let cost = offering.cost;
        let ledger = self
            .ledgers
            .get(&patient)
            .ok_or(WorkflowError::UnknownAccount(patient))?;
        if ledger.balance < cost {
            return Err(WorkflowError::InsufficientCredit {
                balance: ledger.balance,
                cost,
            });
        }

        let booking = Booking {
            booking_id,
            patient_id: patient,
            doctor_id: doctor,
            slot: slot.clone(),
            cost,
            status: BookingStatus::Requested,
            prescription: None,
            required_radiographs: vec![],
            required_tests: vec![],
            created_at: now,
        };
        self.bookings.insert(booking_id, booking.clone());
        let ledger = self.ledgers.get_mut(&patient).expect("checked above");
        ledger.balance -= cost;
        ledger.postings.push(Posting {
            at: now,
            amount: -(cost as i64),
            reason: PostingReason::Debit,
            booking_id: Some(booking_id),
        });
        Ok(Outcome {
            notifications: vec![Notification {
                recipient: Recipient::Account(doctor),
                kind: NotificationKind::BookingRequested,
                payload: format!("booking {booking_id} requested for {} {}", slot.date, slot.start),
            }],
            effect: Effect::Booking(booking),
        })
    }

    fn own_booking(&self, doctor: AccountId, booking_id: BookingId) -> Result<&Booking, WorkflowError> {
        self.live_as(doctor, Role::Doctor)?;
        let b = self
            .bookings
            .get(&booking_id)
            .ok_or(WorkflowError::UnknownBooking(booking_id))?;
        if b.doctor_id != doctor {
            return Err(WorkflowError::NotYourBooking);
        }
        Ok(b)
    }

    fn set_booking_status(
        &mut self,
        doctor: AccountId,
        booking_id: BookingId,
        status: BookingStatus,
        now: Timestamp,
    ) -> Result<Outcome, WorkflowError> {
        let b = self.own_booking(doctor, booking_id)?;
        if !b.status.can_become(status) {
            return Err(WorkflowError::IllegalTransition {
                from: b.status,
                to: status,
            });
        }
        let b = self.bookings.get_mut(&booking_id).expect("checked above");
        b.status = status;
        let booking = b.clone();
        if status.refunds() {
            let ledger = self
                .ledgers
                .get_mut(&booking.patient_id)
                .expect("every patient has a ledger");
            ledger.balance += booking.cost;
            ledger.postings.push(Posting {
                at: now,
                amount: booking.cost as i64,
                reason: PostingReason::Refund,
                booking_id: Some(booking_id),
            });
        }
        Ok(Outcome {
            notifications: vec![Notification {
                recipient: Recipient::Account(booking.patient_id),
                kind: NotificationKind::BookingStatusChanged,
                payload: format!("booking {booking_id} is now {status:?}"),
            }],
            effect: Effect::Booking(booking),
        })
    }

    fn attach_prescription(
        &mut self,
        doctor: AccountId,
        booking_id: BookingId,
        prescription: &str,
        radiographs: &[String],
        tests: &[String],
    ) -> Result<Outcome, WorkflowError> {
        let b = self.own_booking(doctor, booking_id)?;
        if !b.status.allows_prescription() {
            return Err(WorkflowError::WrongStatus(b.status));
        }
        let b = self.bookings.get_mut(&booking_id).expect("checked above");
        b.prescription = Some(prescription.to_string());
        b.required_radiographs = radiographs.to_vec();
        b.required_tests = tests.to_vec();
        Ok(Outcome {
            effect: Effect::Booking(b.clone()),
            notifications: vec![],
        })
    }

    fn add_history(
        &mut self,
        actor: AccountId,
        patient: AccountId,
        category: &str,
        text: &str,
        now: Timestamp,
    ) -> Result<Outcome, WorkflowError> {
        self.live_as(actor, Role::Patient)?;
        if actor != patient {
            return Err(forbidden("patients edit only their own history"));
        }
        let category: HistoryCategory = category.parse()?;
        if text.trim().is_empty() {
            return Err(WorkflowError::InvalidInput("history entry is empty".into()));
        }
        let h = self
            .histories
            .entry(patient)
            .or_insert_with(|| MedicalHistory::new(patient));
        h.entries.entry(category).or_default().push(HistoryEntry {
            text: text.to_string(),
            added_at: now,
        });
        Ok(Outcome {
            effect: Effect::History(h.clone()),
            notifications: vec![],
        })
    }

    fn update_basic_info(
        &mut self,
        actor: AccountId,
        patient: AccountId,
        fields: &Profile,
    ) -> Result<Outcome, WorkflowError> {
        self.live_as(actor, Role::Patient)?;
        if actor != patient {
            return Err(forbidden("patients edit only their own history"));
        }
        let h = self
            .histories
            .entry(patient)
            .or_insert_with(|| MedicalHistory::new(patient));
        h.basic_info.extend(fields.iter().map(|(k, v)| (k.clone(), v.clone())));
        Ok(Outcome {
            effect: Effect::History(h.clone()),
            notifications: vec![],
        })
    }

    fn credit_topup(
        &mut self,
        actor: AccountId,
        patient: AccountId,
        amount: i64,
        now: Timestamp,
    ) -> Result<Outcome, WorkflowError> {
        self.patient_or_admin(actor, patient)?;
        if amount <= 0 {
            return Err(WorkflowError::NonPositiveAmount);
        }
        let ledger = self
            .ledgers
            .entry(patient)
            .or_insert_with(|| CreditLedger::new(patient));
        ledger.balance = ledger
            .balance
            .checked_add(amount as u64)
            .ok_or_else(|| WorkflowError::InvalidInput("balance overflow".into()))?;
        ledger.postings.push(Posting {
            at: now,
            amount,
            reason: PostingReason::Topup,
            booking_id: None,
        });
        Ok(Outcome {
            effect: Effect::Ledger(ledger.clone()),
            notifications: vec![],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn email_validation() {
        assert_eq!(normalize_email(" Dr.Who@Example.org ").unwrap(), "dr.who@example.org");
        for bad in ["", "no-at-sign", "a@b", "two@@x.org", "sp ace@x.org", "x@y."] {
            assert!(
                matches!(normalize_email(bad), Err(WorkflowError::InvalidEmail(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn clock_time_parsing() {
        assert_eq!("09:05".parse::<ClockTime>().unwrap(), ClockTime::new(9, 5).unwrap());
        assert_eq!(ClockTime::new(23, 59).unwrap().to_string(), "23:59");
        for bad in ["24:00", "9:05", "09:60", "0905", "ab:cd"] {
            assert!(bad.parse::<ClockTime>().is_err(), "{bad}");
        }
    }

    #[test]
    fn category_names_are_case_insensitive() {
        assert_eq!(
            "sensitivities".parse::<HistoryCategory>().unwrap(),
            HistoryCategory::Sensitivities
        );
        assert!(matches!(
            "Allergies".parse::<HistoryCategory>(),
            Err(WorkflowError::UnknownCategory(_))
        ));
    }

    #[test]
    fn slot_interval_respects_portal_offset() {
        let slot = Slot {
            date: NaiveDate::from_ymd_opt(2026, 10, 19).unwrap(),
            start: ClockTime::new(10, 0).unwrap(),
            length_minutes: 30,
        };
        let (s, e) = slot.interval(120);
        assert_eq!(s.to_string(), "2026-10-19T08:00:00Z");
        assert_eq!(e - s, 1800);
    }
}
