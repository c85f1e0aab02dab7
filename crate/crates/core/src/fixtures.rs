//! Deterministic synthetic visit records for simulations, demos and tests.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::id::{DoctorId, IdGen, PatientId, ProblemId};
use crate::model::{
    make_pip, AssessmentPart, Attachment, AttachmentKind, ObjectiveFinding, PipDraft, PlanPart, SubjectivePart,
    VisitMode,
};
use crate::store::StoredRecord;
use crate::time::Timestamp;

const COMPLAINTS: &[&str] = &[
    "persistent cough",
    "chest pain on exertion",
    "lower back pain",
    "recurrent headache",
    "skin rash on forearm",
    "shortness of breath",
    "abdominal pain",
    "swollen ankle after fall",
];

const FINDINGS: &[(&str, &str)] = &[
    ("blood pressure", "142/91 mmHg"),
    ("temperature", "38.2 C"),
    ("chest x-ray", "right lower lobe opacity"),
    ("auscultation", "bilateral crackles"),
    ("CBC", "WBC 12.1"),
    ("palpation", "tenderness over L4"),
];

/// Produces valid records from a seed. Two factories with the same seed
/// produce identical sequences given identical calls.
#[derive(Debug, Clone)]
pub struct RecordFactory {
    ids: IdGen,
    rng: ChaCha20Rng,
}

impl RecordFactory {
    pub fn new(seed: u64) -> Self {
        Self {
            ids: IdGen::seeded(seed),
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_f00d),
        }
    }

    pub fn ids(&mut self) -> &mut IdGen {
        &mut self.ids
    }

    /// A SOAP draft plus blobs for its FILE attachments. `image_bytes > 0`
    /// adds one image attachment of that size; every draft carries a text
    /// report.
    pub fn draft(
        &mut self,
        patient: PatientId,
        doctor: DoctorId,
        problem: ProblemId,
        visit_time: Timestamp,
        image_bytes: usize,
    ) -> (PipDraft, BTreeMap<crate::id::AttachmentId, Vec<u8>>) {
        let complaint = COMPLAINTS.choose(&mut self.rng).expect("non-empty");
        let (item, finding) = FINDINGS.choose(&mut self.rng).expect("non-empty");
        let severity = ["mild", "moderate", "severe"][self.rng.random_range(0..3)];
        let mut attachments = vec![Attachment::text(
            self.ids.attachment(visit_time),
            "Report",
            format!("{complaint}; {item}: {finding}"),
            visit_time,
        )];
        let mut blobs = BTreeMap::new();
        if image_bytes > 0 {
            let mut img = vec![0u8; image_bytes];
            self.rng.fill_bytes(&mut img);
            let a = Attachment::file(
                self.ids.attachment(visit_time),
                AttachmentKind::Image,
                "Images",
                &img,
                visit_time,
            );
            blobs.insert(a.attachment_id, img);
            attachments.push(a);
        }
        let draft = PipDraft {
            patient_id: patient,
            doctor_id: doctor,
            visit_time,
            mode: [
                VisitMode::InPerson,
                VisitMode::Teleconsultation,
                VisitMode::Telediagnosis,
            ][self.rng.random_range(0..3)],
            subjective: SubjectivePart {
                symptom_code: format!("S{:03}", self.rng.random_range(0..1000)),
                duration: format!("{} days", self.rng.random_range(1..30)),
                location: String::new(),
                severity: severity.into(),
                description: format!("reported {severity} {complaint}"),
                chief_complaint: (*complaint).into(),
            },
            objective: vec![ObjectiveFinding {
                item: (*item).into(),
                location: String::new(),
                finding: (*finding).into(),
                sign_code: format!("O{:03}", self.rng.random_range(0..1000)),
                description: String::new(),
            }],
            assessment: AssessmentPart {
                problem_id: Some(problem),
                assessment_description: format!("working assessment for {complaint}"),
            },
            plan: PlanPart {
                diagnostic_plans: vec!["follow-up in two weeks".into()],
                ..Default::default()
            },
            attachments,
        };
        (draft, blobs)
    }

    /// A complete record whose `ingested_at` equals its visit time.
    pub fn record(
        &mut self,
        patient: PatientId,
        doctor: DoctorId,
        problem: ProblemId,
        visit_time: Timestamp,
        image_bytes: usize,
    ) -> StoredRecord {
        let (draft, blobs) = self.draft(patient, doctor, problem, visit_time, image_bytes);
        let pip = make_pip(&draft, &mut self.ids).expect("factory drafts are valid");
        StoredRecord {
            pip,
            blobs,
            ingested_at: visit_time,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }
}
