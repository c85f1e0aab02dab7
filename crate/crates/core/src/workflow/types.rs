use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{NaiveDate, Weekday};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::id::{AccountId, BookingId};
use crate::time::{Timestamp, MINUTE};

use super::WorkflowError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Doctor,
    Patient,
    Admin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccountState {
    PendingActivation,
    /// Doctors only, between activation and the admin's decision.
    AwaitingApproval,
    Active,
    Deleted,
}

impl AccountState {
    /// The account state machine. Nothing else is ever allowed.
    pub fn can_become(self, next: AccountState, role: Role) -> bool {
        use AccountState::*;
        matches!(
            (self, next, role),
            (PendingActivation, Active, Role::Patient)
                | (PendingActivation, AwaitingApproval, Role::Doctor)
                | (AwaitingApproval, Active, Role::Doctor)
                | (AwaitingApproval, Deleted, Role::Doctor)
        )
    }
}

/// Free-form profile fields such as `name`, `specialty`, `phone`.
pub type Profile = BTreeMap<String, String>;

/// A login secret as stored: opaque to the workflow, produced and checked
/// by whoever handles passwords.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub scheme: String,
    pub salt: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub account_id: AccountId,
    pub role: Role,
    pub email: String,
    pub profile: Profile,
    pub state: AccountState,
    pub created_at: Timestamp,
    pub credential: Option<Credential>,
}

/// An account as shown to other users: no credential.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicAccount {
    pub account_id: AccountId,
    pub role: Role,
    pub email: String,
    pub profile: Profile,
    pub state: AccountState,
    pub created_at: Timestamp,
}

impl Account {
    pub fn public(&self) -> PublicAccount {
        PublicAccount {
            account_id: self.account_id,
            role: self.role,
            email: self.email.clone(),
            profile: self.profile.clone(),
            state: self.state,
            created_at: self.created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationToken {
    pub token: String,
    pub account_id: AccountId,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub used: bool,
}

/// Wall-clock time of day in the portal's timezone, minute resolution.
/// Serialized as `HH:MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClockTime(u16);

impl ClockTime {
    pub fn new(hour: u32, minute: u32) -> Option<Self> {
        (hour < 24 && minute < 60).then(|| Self((hour * 60 + minute) as u16))
    }

    pub fn minutes(self) -> u32 {
        self.0 as u32
    }
}

impl fmt::Display for ClockTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.0 / 60, self.0 % 60)
    }
}

impl FromStr for ClockTime {
    type Err = WorkflowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WorkflowError::InvalidInput(format!("time of day {s:?} is not HH:MM"));
        let (h, m) = s.split_once(':').ok_or_else(bad)?;
        if h.len() != 2 || m.len() != 2 {
            return Err(bad());
        }
        let h: u32 = h.parse().map_err(|_| bad())?;
        let m: u32 = m.parse().map_err(|_| bad())?;
        ClockTime::new(h, m).ok_or_else(bad)
    }
}

impl Serialize for ClockTime {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ClockTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A weekly recurring time slot a doctor offers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offering {
    pub weekday: Weekday,
    pub start: ClockTime,
    pub length_minutes: u32,
    pub cost: u64,
}

impl Offering {
    fn minutes(&self) -> (u32, u32) {
        let s = self.start.minutes();
        (s, s + self.length_minutes)
    }

    pub fn overlaps(&self, other: &Offering) -> bool {
        let (a0, a1) = self.minutes();
        let (b0, b1) = other.minutes();
        self.weekday == other.weekday && a0 < b1 && b0 < a1
    }

    pub fn matches(&self, slot: &Slot) -> bool {
        use chrono::Datelike;
        slot.date.weekday() == self.weekday && slot.start == self.start && slot.length_minutes == self.length_minutes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSettings {
    pub doctor_id: AccountId,
    pub enabled: bool,
    pub offerings: Vec<Offering>,
}

/// One concrete occurrence of an offering, in portal-local date and time.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub date: NaiveDate,
    pub start: ClockTime,
    pub length_minutes: u32,
}

impl Slot {
    /// `[start, end)` in UTC for a portal at `tz_offset_minutes` east of UTC.
    pub fn interval(&self, tz_offset_minutes: i32) -> (Timestamp, Timestamp) {
        let local = self
            .date
            .and_hms_opt(self.start.minutes() / 60, self.start.minutes() % 60, 0)
            .expect("ClockTime is always a valid time of day");
        let start = local.and_utc().timestamp() - tz_offset_minutes as i64 * MINUTE;
        (
            Timestamp::from_secs(start),
            Timestamp::from_secs(start + self.length_minutes as i64 * MINUTE),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BookingStatus {
    Requested,
    Accepted,
    Rejected,
    Completed,
    Cancelled,
}

impl BookingStatus {
    pub const ALL: [BookingStatus; 5] = [
        BookingStatus::Requested,
        BookingStatus::Accepted,
        BookingStatus::Rejected,
        BookingStatus::Completed,
        BookingStatus::Cancelled,
    ];

    pub fn can_become(self, next: BookingStatus) -> bool {
        use BookingStatus::*;
        matches!(
            (self, next),
            (Requested, Accepted) | (Requested, Rejected) | (Accepted, Completed) | (Accepted, Cancelled)
        )
    }

    /// Whether a booking in this status keeps its slot off the market.
    pub fn holds_slot(self) -> bool {
        matches!(self, BookingStatus::Requested | BookingStatus::Accepted)
    }

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            BookingStatus::Rejected | BookingStatus::Completed | BookingStatus::Cancelled
        )
    }

    pub fn refunds(self) -> bool {
        matches!(self, BookingStatus::Rejected | BookingStatus::Cancelled)
    }

    /// Statuses in which the doctor may write a prescription and the
    /// patient may read it.
    pub fn allows_prescription(self) -> bool {
        matches!(self, BookingStatus::Accepted | BookingStatus::Completed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Booking {
    pub booking_id: BookingId,
    pub patient_id: AccountId,
    pub doctor_id: AccountId,
    pub slot: Slot,
    pub cost: u64,
    pub status: BookingStatus,
    pub prescription: Option<String>,
    pub required_radiographs: Vec<String>,
    pub required_tests: Vec<String>,
    pub created_at: Timestamp,
}

impl Booking {
    /// What the patient sees: the prescription only once it may be read.
    pub fn patient_view(&self) -> Booking {
        let mut b = self.clone();
        if !b.status.allows_prescription() {
            b.prescription = None;
            b.required_radiographs.clear();
            b.required_tests.clear();
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HistoryCategory {
    Diseases,
    Symptoms,
    Pharmaceuticals,
    Surgeries,
    Sensitivities,
    Radiograph,
    Tests,
}

impl HistoryCategory {
    pub const ALL: [HistoryCategory; 7] = [
        HistoryCategory::Diseases,
        HistoryCategory::Symptoms,
        HistoryCategory::Pharmaceuticals,
        HistoryCategory::Surgeries,
        HistoryCategory::Sensitivities,
        HistoryCategory::Radiograph,
        HistoryCategory::Tests,
    ];
}

impl fmt::Display for HistoryCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for HistoryCategory {
    type Err = WorkflowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| WorkflowError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub text: String,
    pub added_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalHistory {
    pub patient_id: AccountId,
    pub basic_info: Profile,
    pub entries: BTreeMap<HistoryCategory, Vec<HistoryEntry>>,
}

impl MedicalHistory {
    pub fn new(patient_id: AccountId) -> Self {
        Self {
            patient_id,
            basic_info: Profile::new(),
            entries: HistoryCategory::ALL.into_iter().map(|c| (c, Vec::new())).collect(),
        }
    }

    pub fn category(&self, c: HistoryCategory) -> &[HistoryEntry] {
        self.entries.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PostingReason {
    Topup,
    Debit,
    Refund,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub at: Timestamp,
    /// Signed credit units: positive for topups and refunds.
    pub amount: i64,
    pub reason: PostingReason,
    pub booking_id: Option<BookingId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditLedger {
    pub patient_id: AccountId,
    pub balance: u64,
    pub postings: Vec<Posting>,
}

impl CreditLedger {
    pub fn new(patient_id: AccountId) -> Self {
        Self {
            patient_id,
            balance: 0,
            postings: Vec::new(),
        }
    }

    pub fn sum_of_postings(&self) -> i64 {
        self.postings.iter().map(|p| p.amount).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Approve,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "to", content = "account_id")]
pub enum Recipient {
    Account(AccountId),
    Admin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NotificationKind {
    ActivateAccount,
    DoctorRegistered,
    PatientRegistered,
    AccountApproved,
    BookingRequested,
    BookingStatusChanged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub recipient: Recipient,
    pub kind: NotificationKind,
    pub payload: String,
}
