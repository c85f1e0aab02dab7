//! Identifiers.
//!
//! Every identifier in the system is a 26-character ULID string: a 48-bit
//! millisecond timestamp followed by 80 random bits, Crockford base32
//! encoded. The encoding sorts lexicographically in creation order, which
//! gives folder tie-breaks and archive indexes a total order for free.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use ulid::Ulid;

use crate::time::Timestamp;

/// Encoded length of every identifier.
pub const ID_LEN: usize = 26;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid identifier {0:?}: expected a 26-character ULID")]
pub struct InvalidId(pub String);

macro_rules! ulid_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Ulid);

        impl $name {
            pub fn from_ulid(u: Ulid) -> Self {
                Self(u)
            }

            pub fn ulid(&self) -> Ulid {
                self.0
            }

            /// Fixed-width ASCII form used in binary indexes.
            pub fn to_bytes(&self) -> [u8; ID_LEN] {
                let mut buf = [0u8; ID_LEN];
                self.0.array_to_str(&mut buf);
                buf
            }

            pub fn from_bytes(bytes: &[u8]) -> Result<Self, InvalidId> {
                let s = std::str::from_utf8(bytes)
                    .map_err(|_| InvalidId(String::from_utf8_lossy(bytes).into_owned()))?;
                s.parse()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let mut buf = [0u8; ID_LEN];
                f.write_str(self.0.array_to_str(&mut buf))
            }
        }

        impl FromStr for $name {
            type Err = InvalidId;

            fn from_str(s: &str) -> Result<Self, InvalidId> {
                if s.len() != ID_LEN {
                    return Err(InvalidId(s.to_string()));
                }
                Ulid::from_string(s).map(Self).map_err(|_| InvalidId(s.to_string()))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

ulid_id!(
    /// Any portal account: doctor, patient or admin.
    AccountId
);
ulid_id!(
    /// A clinical problem (case); problem-oriented folders key on it.
    ProblemId
);
ulid_id!(
    /// One stored visit record. A PIP's visit id is its record id.
    RecordId
);
ulid_id!(AttachmentId);
ulid_id!(BookingId);

/// Patients and doctors are accounts.
pub type PatientId = AccountId;
pub type DoctorId = AccountId;

/// Source of fresh identifiers.
///
/// The system generator uses wall-clock time and OS entropy. Simulations and
/// tests use [`IdGen::seeded`], which draws the random part from a ChaCha
/// stream and the time part from the caller's virtual clock, so runs are
/// reproducible.
#[derive(Debug, Clone)]
pub struct IdGen {
    rng: ChaCha20Rng,
    deterministic: bool,
    last: Option<Ulid>,
}

impl IdGen {
    pub fn system() -> Self {
        Self {
            rng: ChaCha20Rng::from_os_rng(),
            deterministic: false,
            last: None,
        }
    }

    pub fn seeded(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            deterministic: true,
            last: None,
        }
    }

    /// Raw ULID at the given time. Strictly increasing for a single generator
    /// when called with non-decreasing times.
    pub fn next_ulid(&mut self, at: Timestamp) -> Ulid {
        let ms = if self.deterministic {
            at.as_secs().max(0) as u64 * 1000
        } else {
            chrono::Utc::now().timestamp_millis().max(0) as u64
        };
        let random: u128 = self.rng.random::<u128>() & ((1u128 << 80) - 1);
        let mut candidate = Ulid::from_parts(ms, random);
        if let Some(prev) = self.last {
            if candidate <= prev {
                candidate = prev.increment().unwrap_or(candidate);
            }
        }
        self.last = Some(candidate);
        candidate
    }

    pub fn account(&mut self, at: Timestamp) -> AccountId {
        AccountId(self.next_ulid(at))
    }

    pub fn problem(&mut self, at: Timestamp) -> ProblemId {
        ProblemId(self.next_ulid(at))
    }

    pub fn record(&mut self, at: Timestamp) -> RecordId {
        RecordId(self.next_ulid(at))
    }

    pub fn attachment(&mut self, at: Timestamp) -> AttachmentId {
        AttachmentId(self.next_ulid(at))
    }

    pub fn booking(&mut self, at: Timestamp) -> BookingId {
        BookingId(self.next_ulid(at))
    }

    /// 128 random bits as 32 lowercase hex characters.
    pub fn token(&mut self) -> String {
        let mut bytes = [0u8; 16];
        self.rng.fill_bytes(&mut bytes);
        hex::encode(bytes)
    }

    /// Draw raw random bytes, e.g. for password salts.
    pub fn fill(&mut self, buf: &mut [u8]) {
        self.rng.fill_bytes(buf);
    }
}
