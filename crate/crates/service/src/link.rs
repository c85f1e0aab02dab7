//! The sync engine's center link bound to the center's HTTP endpoints.
//!
//! Uses a blocking client, so it must run off the async runtime (the tick
//! loop has its own thread).

use std::time::Duration;

use medirelay_core::sync::{ApplyOutcome, CenterLink, ConsultationSchedule, LinkError};
use medirelay_core::{PatientId, RecordId, Timestamp};
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

pub const PEER_TOKEN_HEADER: &str = "x-peer-token";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApplyResponse {
    pub outcome: ApplyOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub patient_id: PatientId,
    pub records: Vec<RecordId>,
}

#[derive(Debug, Clone)]
pub struct HttpCenterLink {
    base: String,
    token: String,
    client: Client,
}

impl HttpCenterLink {
    pub fn new(base: &str, token: &str, timeout: Duration) -> Result<Self, LinkError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LinkError::Transport(e.to_string()))?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            token: token.to_string(),
            client,
        })
    }

    fn get(&self, path: &str) -> Result<Response, LinkError> {
        let resp = self
            .client
            .get(format!("{}{path}", self.base))
            .header(PEER_TOKEN_HEADER, &self.token)
            .send()
            .map_err(transport)?;
        check(resp)
    }

    /// The center's current consultation schedule.
    pub fn schedule(&self) -> Result<ConsultationSchedule, LinkError> {
        self.get("/sync/schedule")?.json().map_err(transport)
    }
}

/// Unreachable peers count as a Down channel so work is deferred.
fn transport(e: reqwest::Error) -> LinkError {
    if e.is_connect() || e.is_timeout() {
        LinkError::Down
    } else {
        LinkError::Transport(e.to_string())
    }
}

fn check(resp: Response) -> Result<Response, LinkError> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    if status == StatusCode::SERVICE_UNAVAILABLE || status == StatusCode::BAD_GATEWAY {
        return Err(LinkError::Down);
    }
    let body = resp.text().unwrap_or_default();
    Err(LinkError::Rejected(format!("{status}: {body}")))
}

impl CenterLink for HttpCenterLink {
    fn is_up(&self, _at: Timestamp) -> bool {
        true
    }

    fn round_trip(&self) -> i64 {
        0
    }

    fn push_record(&mut self, record: &[u8], _at: Timestamp) -> Result<ApplyOutcome, LinkError> {
        let resp = self
            .client
            .post(format!("{}/sync/records", self.base))
            .header(PEER_TOKEN_HEADER, &self.token)
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(record.to_vec())
            .send()
            .map_err(transport)?;
        let body: ApplyResponse = check(resp)?.json().map_err(transport)?;
        Ok(body.outcome)
    }

    fn folder_manifest(&mut self, patient: PatientId, _at: Timestamp) -> Result<Vec<RecordId>, LinkError> {
        let m: Manifest = self
            .get(&format!("/sync/folder/{patient}"))?
            .json()
            .map_err(transport)?;
        Ok(m.records)
    }

    fn fetch_record(&mut self, patient: PatientId, record: RecordId, _at: Timestamp) -> Result<Vec<u8>, LinkError> {
        let resp = self.get(&format!("/sync/folder/{patient}?record={record}"))?;
        Ok(resp.bytes().map_err(transport)?.to_vec())
    }
}
