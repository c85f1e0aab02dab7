//! Patient Information Packages: one visit's SOAP-structured record plus
//! its multimedia attachments, and the two folder views over them.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{canonical_digest, to_canonical, Digest};
use crate::id::{AttachmentId, DoctorId, IdGen, PatientId, ProblemId, RecordId};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VisitMode {
    InPerson,
    Teleconsultation,
    Telediagnosis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttachmentKind {
    Text,
    Image,
    Video,
}

/// How an attribute is stored: inline text, or a separate file blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StorageClass {
    #[serde(rename = "TEXT")]
    Text,
    #[serde(rename = "FILE")]
    File,
}

/// Images and video live in files; reports, complaints and every other
/// textual attribute are stored inline.
pub fn classify_attribute(kind: AttachmentKind) -> StorageClass {
    match kind {
        AttachmentKind::Video | AttachmentKind::Image => StorageClass::File,
        AttachmentKind::Text => StorageClass::Text,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Error)]
pub enum ModelError {
    #[error("chief complaint must not be empty")]
    EmptyChiefComplaint,
    #[error("assessment has no problem id")]
    MissingProblemId,
    #[error("objective finding #{0} has an empty item")]
    EmptyFindingItem(usize),
    #[error("attachment {0}: storage class does not match its kind")]
    AttachmentClassMismatch(AttachmentId),
    #[error("attachment {0}: checksum does not verify")]
    ChecksumMismatch(AttachmentId),
    #[error("attachment {0}: byte length does not match content")]
    ByteLenMismatch(AttachmentId),
    #[error("attachment id {0} appears twice")]
    DuplicateAttachment(AttachmentId),
}

/// Part S: the complaint as the patient describes it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubjectivePart {
    pub symptom_code: String,
    pub duration: String,
    pub location: String,
    pub severity: String,
    pub description: String,
    pub chief_complaint: String,
}

/// One line of part O: an examination result, lab value or plan outcome.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectiveFinding {
    pub item: String,
    pub location: String,
    pub finding: String,
    pub sign_code: String,
    pub description: String,
}

/// Part A.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AssessmentPart {
    pub problem_id: Option<ProblemId>,
    pub assessment_description: String,
}

/// Part P.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlanPart {
    pub diagnostic_plans: Vec<String>,
    pub therapeutic_plans: Vec<String>,
    pub prescription: Option<String>,
    pub required_radiographs: Vec<String>,
    pub required_tests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attachment {
    pub attachment_id: AttachmentId,
    pub kind: AttachmentKind,
    pub attribute_name: String,
    pub storage_class: StorageClass,
    pub inline_text: Option<String>,
    pub blob_ref: Option<Digest>,
    pub byte_len: u64,
    pub checksum: Digest,
    pub created_at: Timestamp,
}

impl Attachment {
    /// A TEXT-class attribute held inline.
    pub fn text(
        attachment_id: AttachmentId,
        attribute_name: impl Into<String>,
        text: impl Into<String>,
        created_at: Timestamp,
    ) -> Self {
        let text = text.into();
        Self {
            attachment_id,
            kind: AttachmentKind::Text,
            attribute_name: attribute_name.into(),
            storage_class: StorageClass::Text,
            byte_len: text.len() as u64,
            checksum: Digest::of(text.as_bytes()),
            inline_text: Some(text),
            blob_ref: None,
            created_at,
        }
    }

    /// A FILE-class attribute. The blob itself travels separately and is
    /// addressed by its SHA-256.
    pub fn file(
        attachment_id: AttachmentId,
        kind: AttachmentKind,
        attribute_name: impl Into<String>,
        blob: &[u8],
        created_at: Timestamp,
    ) -> Self {
        let checksum = Digest::of(blob);
        Self {
            attachment_id,
            kind,
            attribute_name: attribute_name.into(),
            storage_class: classify_attribute(kind),
            inline_text: None,
            blob_ref: Some(checksum),
            byte_len: blob.len() as u64,
            checksum,
            created_at,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let id = self.attachment_id;
        let expected = classify_attribute(self.kind);
        if self.storage_class != expected {
            return Err(ModelError::AttachmentClassMismatch(id));
        }
        match (expected, &self.inline_text, &self.blob_ref) {
            (StorageClass::Text, Some(text), None) => {
                if text.len() as u64 != self.byte_len {
                    return Err(ModelError::ByteLenMismatch(id));
                }
                if Digest::of(text.as_bytes()) != self.checksum {
                    return Err(ModelError::ChecksumMismatch(id));
                }
            }
            (StorageClass::File, None, Some(blob_ref)) => {
                if *blob_ref != self.checksum {
                    return Err(ModelError::ChecksumMismatch(id));
                }
            }
            _ => return Err(ModelError::AttachmentClassMismatch(id)),
        }
        Ok(())
    }

    /// Checks a FILE blob against this attachment's length and checksum.
    pub fn verify_blob(&self, blob: &[u8]) -> bool {
        blob.len() as u64 == self.byte_len && Digest::of(blob) == self.checksum
    }
}

/// Everything needed to create a [`Pip`] except its record id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipDraft {
    pub patient_id: PatientId,
    pub doctor_id: DoctorId,
    pub visit_time: Timestamp,
    pub mode: VisitMode,
    pub subjective: SubjectivePart,
    pub objective: Vec<ObjectiveFinding>,
    pub assessment: AssessmentPart,
    pub plan: PlanPart,
    pub attachments: Vec<Attachment>,
}

/// Patient Information Package: the complete record of one visit.
///
/// A PIP never changes after creation. Corrections and follow-ups are new
/// PIPs under the same problem id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pip {
    record_id: RecordId,
    patient_id: PatientId,
    doctor_id: DoctorId,
    visit_time: Timestamp,
    mode: VisitMode,
    subjective: SubjectivePart,
    objective: Vec<ObjectiveFinding>,
    assessment: AssessmentPart,
    plan: PlanPart,
    attachments: Vec<Attachment>,
}

/// Validates the draft and assigns a fresh record id. Nothing is returned on
/// failure; the draft is left untouched either way.
pub fn make_pip(draft: &PipDraft, ids: &mut IdGen) -> Result<Pip, ModelError> {
    validate_parts(
        &draft.subjective,
        &draft.objective,
        &draft.assessment,
        &draft.attachments,
    )?;
    Ok(Pip {
        record_id: ids.record(draft.visit_time),
        patient_id: draft.patient_id,
        doctor_id: draft.doctor_id,
        visit_time: draft.visit_time,
        mode: draft.mode,
        subjective: draft.subjective.clone(),
        objective: draft.objective.clone(),
        assessment: draft.assessment.clone(),
        plan: draft.plan.clone(),
        attachments: draft.attachments.clone(),
    })
}

fn validate_parts(
    subjective: &SubjectivePart,
    objective: &[ObjectiveFinding],
    assessment: &AssessmentPart,
    attachments: &[Attachment],
) -> Result<(), ModelError> {
    if subjective.chief_complaint.trim().is_empty() {
        return Err(ModelError::EmptyChiefComplaint);
    }
    if let Some(i) = objective.iter().position(|f| f.item.trim().is_empty()) {
        return Err(ModelError::EmptyFindingItem(i));
    }
    if assessment.problem_id.is_none() {
        return Err(ModelError::MissingProblemId);
    }
    let mut seen = BTreeSet::new();
    for a in attachments {
        if !seen.insert(a.attachment_id) {
            return Err(ModelError::DuplicateAttachment(a.attachment_id));
        }
        a.validate()?;
    }
    Ok(())
}

impl Pip {
    pub fn record_id(&self) -> RecordId {
        self.record_id
    }

    /// One record per visit, so the visit id is the record id.
    pub fn visit_id(&self) -> RecordId {
        self.record_id
    }

    pub fn patient_id(&self) -> PatientId {
        self.patient_id
    }

    pub fn doctor_id(&self) -> DoctorId {
        self.doctor_id
    }

    pub fn visit_time(&self) -> Timestamp {
        self.visit_time
    }

    pub fn mode(&self) -> VisitMode {
        self.mode
    }

    pub fn subjective(&self) -> &SubjectivePart {
        &self.subjective
    }

    pub fn objective(&self) -> &[ObjectiveFinding] {
        &self.objective
    }

    pub fn assessment(&self) -> &AssessmentPart {
        &self.assessment
    }

    pub fn plan(&self) -> &PlanPart {
        &self.plan
    }

    pub fn attachments(&self) -> &[Attachment] {
        &self.attachments
    }

    /// Validated PIPs always carry a problem id.
    pub fn problem_id(&self) -> ProblemId {
        self.assessment.problem_id.expect("validated PIP has a problem id")
    }

    /// Re-checks every invariant. Used on PIPs that arrive deserialized
    /// rather than through [`make_pip`].
    pub fn validate(&self) -> Result<(), ModelError> {
        validate_parts(&self.subjective, &self.objective, &self.assessment, &self.attachments)
    }

    pub fn file_attachments(&self) -> impl Iterator<Item = &Attachment> {
        self.attachments
            .iter()
            .filter(|a| a.storage_class == StorageClass::File)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical(self)
    }

    fn folder_key(&self) -> (Timestamp, RecordId) {
        (self.visit_time, self.record_id)
    }
}

pub fn pip_digest(pip: &Pip) -> Digest {
    canonical_digest(pip)
}

/// Sorts by visit time, then record id.
pub fn sort_folder(pips: &mut [Pip]) {
    pips.sort_by_key(Pip::folder_key);
}

/// All visits of one patient, oldest first.
pub fn patient_folder<'a>(pips: impl IntoIterator<Item = &'a Pip>, patient_id: PatientId) -> Vec<Pip> {
    let mut out: Vec<Pip> = pips
        .into_iter()
        .filter(|p| p.patient_id == patient_id)
        .cloned()
        .collect();
    sort_folder(&mut out);
    out
}

/// All visits concerning one clinical problem, across patients, oldest first.
pub fn problem_folder<'a>(pips: impl IntoIterator<Item = &'a Pip>, problem_id: ProblemId) -> Vec<Pip> {
    let mut out: Vec<Pip> = pips
        .into_iter()
        .filter(|p| p.assessment.problem_id == Some(problem_id))
        .cloned()
        .collect();
    sort_folder(&mut out);
    out
}
