//! Record management for a rural-site / medical-center telemedicine service.
//!
//! * [`model`]: per-visit Patient Information Packages (SOAP parts plus
//!   attachments) and the patient- and problem-oriented folder views.
//! * [`store`]: the three-tier store (local cache, main database, long-term
//!   archive volumes).
//! * [`sync`]: PREFETCH and REFRESH between the rural site and the center,
//!   with a deterministic channel simulator.
//! * [`workflow`]: portal accounts, service settings, bookings, credit and
//!   medical history.

pub mod digest;
pub mod fixtures;
pub mod id;
pub mod model;
pub mod store;
pub mod sync;
pub mod time;
pub mod workflow;

pub use digest::Digest;
pub use id::{AccountId, AttachmentId, BookingId, DoctorId, IdGen, PatientId, ProblemId, RecordId};
pub use time::Timestamp;
