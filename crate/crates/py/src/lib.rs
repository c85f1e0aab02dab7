//! Python bindings. Records, drafts, schedules and commands cross the
//! boundary as JSON strings in the same shape the HTTP API uses; instants
//! are integer seconds since the Unix epoch.

use std::collections::BTreeMap;
use std::str::FromStr;

use medirelay_core::digest::to_canonical;
use medirelay_core::fixtures::RecordFactory as CoreFactory;
use medirelay_core::model::{self, AttachmentKind, Pip, PipDraft};
use medirelay_core::store::{self, RetentionPolicy, StoredRecord, Tier};
use medirelay_core::sync::scenario::{self, Scenario};
use medirelay_core::sync::{self as core_sync, ConsultationSchedule};
use medirelay_core::time::DAY;
use medirelay_core::workflow::{self, Command, PortalSettings};
use medirelay_core::{AttachmentId, IdGen, PatientId, ProblemId, RecordId, Timestamp};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(medirelay, MedirelayError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    MedirelayError::new_err(e.to_string())
}

fn parse<T: FromStr>(what: &str, s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| PyValueError::new_err(format!("bad {what} {s:?}: {e}")))
}

fn from_json<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad {what} JSON: {e}")))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    String::from_utf8(to_canonical(v)).expect("canonical JSON is UTF-8")
}

fn ts(secs: i64) -> Timestamp {
    Timestamp::from_secs(secs)
}

fn tier_name(t: Tier) -> &'static str {
    match t {
        Tier::Local => "local",
        Tier::Main => "main",
        Tier::LongTerm => "long_term",
    }
}

fn parse_tier(s: &str) -> PyResult<Tier> {
    match s {
        "local" => Ok(Tier::Local),
        "main" => Ok(Tier::Main),
        "long_term" => Ok(Tier::LongTerm),
        _ => Err(PyValueError::new_err(format!("unknown tier {s:?}"))),
    }
}

fn pips_json(pips: &[Pip]) -> Vec<String> {
    pips.iter().map(to_json).collect()
}

/// `"TEXT"` or `"FILE"` for an attachment kind (`"Text"`, `"Image"`, `"Video"`).
#[pyfunction]
fn classify_attribute(kind: &str) -> PyResult<String> {
    let kind: AttachmentKind = from_json("attachment kind", &format!("{kind:?}"))?;
    Ok(to_json(&model::classify_attribute(kind)).trim_matches('"').to_string())
}

/// Validates a draft and returns the PIP as JSON; raises on any violation.
#[pyfunction]
#[pyo3(signature = (draft_json, seed=0))]
fn make_pip(draft_json: &str, seed: u64) -> PyResult<String> {
    let draft: PipDraft = from_json("draft", draft_json)?;
    let pip = model::make_pip(&draft, &mut IdGen::seeded(seed)).map_err(err)?;
    Ok(to_json(&pip))
}

/// A PIP with the bytes of its FILE attachments.
#[pyclass(module = "medirelay", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Record {
    inner: StoredRecord,
}

#[pymethods]
impl Record {
    /// Builds a record from PIP JSON and `{attachment_id: bytes}`.
    #[new]
    #[pyo3(signature = (pip_json, blobs, ingested_at))]
    fn new(pip_json: &str, blobs: BTreeMap<String, Vec<u8>>, ingested_at: i64) -> PyResult<Self> {
        let pip: Pip = from_json("PIP", pip_json)?;
        let blobs = blobs
            .into_iter()
            .map(|(k, v)| Ok((parse::<AttachmentId>("attachment id", &k)?, v)))
            .collect::<PyResult<_>>()?;
        let inner = StoredRecord {
            pip,
            blobs,
            ingested_at: ts(ingested_at),
        };
        inner.verify().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn record_id(&self) -> String {
        self.inner.record_id().to_string()
    }

    #[getter]
    fn patient_id(&self) -> String {
        self.inner.pip.patient_id().to_string()
    }

    #[getter]
    fn problem_id(&self) -> String {
        self.inner.pip.problem_id().to_string()
    }

    #[getter]
    fn visit_time(&self) -> i64 {
        self.inner.pip.visit_time().as_secs()
    }

    #[getter]
    fn ingested_at(&self) -> i64 {
        self.inner.ingested_at.as_secs()
    }

    #[getter]
    fn pip(&self) -> String {
        to_json(&self.inner.pip)
    }

    #[getter]
    fn blobs<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in &self.inner.blobs {
            d.set_item(k.to_string(), PyBytes::new(py, v))?;
        }
        Ok(d)
    }

    /// Hex digest over the PIP and its blobs.
    fn content_digest(&self) -> String {
        self.inner.content_digest().to_hex()
    }

    /// The self-verifying byte form used between sites.
    fn encode<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &store::encode_record(&self.inner))
    }

    #[staticmethod]
    fn decode(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: store::decode_record(data).map_err(err)?,
        })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Record({})", self.inner.record_id())
    }
}

/// Deterministic ids and synthetic SOAP records.
#[pyclass(module = "medirelay")]
struct RecordFactory {
    inner: CoreFactory,
}

#[pymethods]
impl RecordFactory {
    #[new]
    fn new(seed: u64) -> Self {
        Self {
            inner: CoreFactory::new(seed),
        }
    }

    #[pyo3(signature = (at=0))]
    fn account(&mut self, at: i64) -> String {
        self.inner.ids().account(ts(at)).to_string()
    }

    #[pyo3(signature = (at=0))]
    fn problem(&mut self, at: i64) -> String {
        self.inner.ids().problem(ts(at)).to_string()
    }

    /// A valid draft as JSON plus its blobs.
    #[pyo3(signature = (patient, doctor, problem, visit_time, image_bytes=0))]
    fn draft<'py>(
        &mut self,
        py: Python<'py>,
        patient: &str,
        doctor: &str,
        problem: &str,
        visit_time: i64,
        image_bytes: usize,
    ) -> PyResult<(String, Bound<'py, PyDict>)> {
        let (draft, blobs) = self.inner.draft(
            parse("patient id", patient)?,
            parse("doctor id", doctor)?,
            parse("problem id", problem)?,
            ts(visit_time),
            image_bytes,
        );
        let d = PyDict::new(py);
        for (k, v) in &blobs {
            d.set_item(k.to_string(), PyBytes::new(py, v))?;
        }
        Ok((to_json(&draft), d))
    }

    #[pyo3(signature = (patient, doctor, problem, visit_time, image_bytes=0))]
    fn record(
        &mut self,
        patient: &str,
        doctor: &str,
        problem: &str,
        visit_time: i64,
        image_bytes: usize,
    ) -> PyResult<Record> {
        Ok(Record {
            inner: self.inner.record(
                parse("patient id", patient)?,
                parse("doctor id", doctor)?,
                parse("problem id", problem)?,
                ts(visit_time),
                image_bytes,
            ),
        })
    }
}

/// The Local, Main and long-term tiers behind one query interface.
#[pyclass(module = "medirelay")]
struct TierStore {
    inner: store::TierStore,
    policy: RetentionPolicy,
}

#[pymethods]
impl TierStore {
    /// In memory when `path` is None, otherwise persisted under `path`.
    #[new]
    #[pyo3(signature = (path=None, retention_days=90, local_capacity=1024))]
    fn new(path: Option<std::path::PathBuf>, retention_days: i64, local_capacity: usize) -> PyResult<Self> {
        if retention_days <= 0 || local_capacity == 0 {
            return Err(PyValueError::new_err("retention and capacity must be positive"));
        }
        let policy = RetentionPolicy::new(retention_days * DAY, local_capacity);
        let inner = match path {
            Some(p) => store::TierStore::open(p, policy).map_err(err)?,
            None => store::TierStore::in_memory(policy),
        };
        Ok(Self { inner, policy })
    }

    /// Stores a record; returns False if it was already there.
    #[pyo3(signature = (record, tier="main"))]
    fn ingest(&mut self, record: &Record, tier: &str) -> PyResult<bool> {
        let out = self
            .inner
            .ingest_record(record.inner.clone(), parse_tier(tier)?)
            .map_err(err)?;
        Ok(out.inserted)
    }

    /// `(tier, record)` for a stored record.
    fn lookup(&self, record_id: &str) -> PyResult<(String, Record)> {
        let (tier, inner) = self
            .inner
            .lookup(parse::<RecordId>("record id", record_id)?)
            .map_err(err)?;
        Ok((tier_name(tier).into(), Record { inner }))
    }

    /// A patient's folder as PIP JSON strings, oldest visit first.
    fn query_patient(&self, patient_id: &str) -> PyResult<Vec<String>> {
        let pips = self
            .inner
            .query_patient(parse::<PatientId>("patient id", patient_id)?)
            .map_err(err)?;
        Ok(pips_json(&pips))
    }

    /// A problem's folder across patients, oldest visit first.
    fn query_problem(&self, problem_id: &str) -> PyResult<Vec<String>> {
        let pips = self
            .inner
            .query_problem(parse::<ProblemId>("problem id", problem_id)?)
            .map_err(err)?;
        Ok(pips_json(&pips))
    }

    /// Moves Main records past retention toward long-term storage.
    fn migrate(&mut self, now: i64) -> PyResult<Vec<String>> {
        let moved = self.inner.migrate(ts(now), &self.policy).map_err(err)?;
        Ok(moved.iter().map(ToString::to_string).collect())
    }

    /// Seals buffered records with visits in `[start, end)`; returns the volume id.
    fn pack_volume(&mut self, start: i64, end: i64) -> PyResult<String> {
        Ok(self.inner.pack_volume(ts(start), ts(end)).map_err(err)?.volume_id())
    }

    /// Seals every finished month; returns the new volume ids.
    fn pack_due(&mut self, now: i64) -> PyResult<Vec<String>> {
        let vols = self.inner.pack_due(ts(now)).map_err(err)?;
        Ok(vols.iter().map(|v| v.volume_id()).collect())
    }

    fn volume_paths(&self) -> Vec<String> {
        self.inner
            .volumes()
            .filter_map(|v| self.inner.volume_path(v))
            .map(|p| p.display().to_string())
            .collect()
    }

    fn main_ids(&self) -> Vec<String> {
        self.inner.main_ids().iter().map(ToString::to_string).collect()
    }

    fn long_term_ids(&self) -> Vec<String> {
        self.inner.long_term_ids().iter().map(ToString::to_string).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.main_len() + self.inner.long_term_len()
    }
}

/// A sealed long-term volume read from disk.
#[pyclass(module = "medirelay")]
struct ArchiveVolume {
    inner: store::ArchiveVolume,
}

#[pymethods]
impl ArchiveVolume {
    #[staticmethod]
    fn open(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: store::ArchiveVolume::open(path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: store::ArchiveVolume::from_bytes(data).map_err(err)?,
        })
    }

    #[getter]
    fn volume_id(&self) -> String {
        self.inner.volume_id()
    }

    #[getter]
    fn window(&self) -> (i64, i64) {
        let (s, e) = self.inner.window();
        (s.as_secs(), e.as_secs())
    }

    /// Index rows as dicts, sorted by creation time then record id.
    fn index<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .index()
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("record_id", e.record_id.to_string())?;
                d.set_item("patient_id", e.patient_id.to_string())?;
                d.set_item("problem_id", e.problem_id.to_string())?;
                d.set_item("created_at", e.created_at.as_secs())?;
                d.set_item("ingested_at", e.ingested_at.as_secs())?;
                d.set_item("payload_offset", e.payload_offset)?;
                d.set_item("payload_len", e.payload_len)?;
                d.set_item("checksum", e.checksum.to_hex())?;
                Ok(d)
            })
            .collect()
    }

    fn read(&self, record_id: &str) -> PyResult<Record> {
        let inner = self
            .inner
            .read(parse::<RecordId>("record id", record_id)?)
            .map_err(err)?;
        Ok(Record { inner })
    }

    /// Checks every payload; returns the record count or raises.
    fn verify(&self) -> PyResult<usize> {
        Ok(self.inner.verify().map_err(err)?.records)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Consultations due within `horizon` seconds of `now` that need records,
/// as `(patient_id, booking_id)` pairs. `schedule_json` is a list of entries.
#[pyfunction]
fn prefetch_set(schedule_json: &str, now: i64, horizon: i64) -> PyResult<Vec<(String, String)>> {
    if horizon <= 0 {
        return Err(PyValueError::new_err("horizon must be positive"));
    }
    let schedule = ConsultationSchedule {
        entries: from_json("schedule", schedule_json)?,
    };
    Ok(core_sync::prefetch_set(&schedule, ts(now), horizon)
        .into_iter()
        .map(|r| (r.patient_id.to_string(), r.booking_id.to_string()))
        .collect())
}

fn load_scenario(toml: &str, seed: Option<u64>) -> PyResult<Scenario> {
    let mut s = Scenario::parse(toml).map_err(err)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

/// Runs a scenario (TOML text) and returns its transcript.
#[pyfunction]
#[pyo3(signature = (scenario_toml, seed=None))]
fn simulate(scenario_toml: &str, seed: Option<u64>) -> PyResult<String> {
    let s = load_scenario(scenario_toml, seed)?;
    Ok(scenario::simulate(&s).map_err(err)?.transcript.to_text())
}

/// True when re-running the scenario reproduces `transcript` exactly.
#[pyfunction]
#[pyo3(signature = (scenario_toml, transcript, seed=None))]
fn verify_transcript(scenario_toml: &str, transcript: &str, seed: Option<u64>) -> PyResult<bool> {
    let s = load_scenario(scenario_toml, seed)?;
    scenario::verify_transcript(&s, transcript).map_err(err)
}

/// The portal state machine, driven by JSON commands.
#[pyclass(module = "medirelay")]
struct Portal {
    inner: workflow::Portal,
}

#[pymethods]
impl Portal {
    #[new]
    #[pyo3(signature = (tz_offset_minutes=0, token_ttl_secs=None))]
    fn new(tz_offset_minutes: i32, token_ttl_secs: Option<i64>) -> Self {
        let mut settings = PortalSettings {
            tz_offset_minutes,
            ..Default::default()
        };
        if let Some(ttl) = token_ttl_secs {
            settings.token_ttl_secs = ttl;
        }
        Self {
            inner: workflow::Portal::new(settings),
        }
    }

    /// Applies one command; returns the outcome as JSON. A rejected command
    /// raises and leaves the state unchanged.
    fn apply(&mut self, command_json: &str, now: i64) -> PyResult<String> {
        let cmd: Command = from_json("command", command_json)?;
        let out = self.inner.apply(&cmd, ts(now)).map_err(err)?;
        Ok(to_json(&out))
    }

    /// Hex digest of the whole state.
    fn digest(&self) -> String {
        self.inner.digest().to_hex()
    }

    fn pending_doctors(&self) -> Vec<String> {
        self.inner
            .pending_doctors()
            .iter()
            .map(|a| a.account_id.to_string())
            .collect()
    }

    /// The full state as canonical JSON.
    fn to_json(&self) -> String {
        to_json(&self.inner)
    }
}

#[pymodule]
fn medirelay(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MedirelayError", m.py().get_type::<MedirelayError>())?;
    m.add_class::<Record>()?;
    m.add_class::<RecordFactory>()?;
    m.add_class::<TierStore>()?;
    m.add_class::<ArchiveVolume>()?;
    m.add_class::<Portal>()?;
    m.add_function(wrap_pyfunction!(classify_attribute, m)?)?;
    m.add_function(wrap_pyfunction!(make_pip, m)?)?;
    m.add_function(wrap_pyfunction!(prefetch_set, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(verify_transcript, m)?)?;
    Ok(())
}
