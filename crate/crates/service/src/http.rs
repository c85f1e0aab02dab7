//! HTTP API. Bodies in both directions are canonical JSON, the same
//! encoding the command log uses.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use chrono::NaiveDate;
use medirelay_core::digest::to_canonical;
use medirelay_core::model::{Pip, PipDraft};
use medirelay_core::store::StoreError;
use medirelay_core::workflow::{
    Account, BookingStatus, Command, Decision, Effect, HistoryCategory, HistoryEntry, Offering, Profile, Role,
    ServiceSettings, Slot, WorkflowError,
};
use medirelay_core::{AccountId, AttachmentId, BookingId, PatientId, ProblemId, RecordId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::link::{ApplyResponse, Manifest, PEER_TOKEN_HEADER};
use crate::node::Node;

type AppState = Arc<Node>;

/// Longest date range a slot listing may span.
pub const MAX_SLOT_RANGE_DAYS: i64 = 62;

pub fn router(node: Arc<Node>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/register/doctor", post(register_doctor))
        .route("/register/patient", post(register_patient))
        .route("/activate", post(activate))
        .route("/activate/reissue", post(reissue))
        .route("/login", post(login))
        .route("/logout", post(logout))
        .route("/admin/doctors/pending", get(pending_doctors))
        .route("/admin/doctors/{id}/decision", post(decide))
        .route("/doctors", get(search_doctors))
        .route("/doctors/{id}/service", get(get_service).put(put_service))
        .route("/doctors/{id}/slots", get(slots))
        .route("/bookings", post(request_booking).get(list_bookings))
        .route("/bookings/{id}/review", get(review_booking))
        .route("/bookings/{id}/status", post(set_status))
        .route("/bookings/{id}/prescription", post(prescribe))
        .route("/patients/{id}/history", get(full_history))
        .route("/patients/{id}/history/{category}", get(get_history).post(add_history))
        .route("/patients/{id}/basic-info", axum::routing::put(basic_info))
        .route("/patients/{id}/credit", get(get_ledger).post(topup))
        .route("/records", post(submit_record))
        .route("/records/patient/{id}", get(patient_records))
        .route("/records/problem/{id}", get(problem_records))
        .route("/sync/records", post(sync_apply))
        .route("/sync/folder/{patient_id}", get(sync_folder))
        .route("/sync/schedule", get(sync_schedule))
        .with_state(node)
}

// Responses and errors.

/// A canonical-JSON response body.
pub struct Canon<T>(pub StatusCode, pub T);

impl<T: Serialize> IntoResponse for Canon<T> {
    fn into_response(self) -> Response {
        (self.0, [(CONTENT_TYPE, "application/json")], to_canonical(&self.1)).into_response()
    }
}

fn ok<T: Serialize>(v: T) -> Canon<T> {
    Canon(StatusCode::OK, v)
}

fn created<T: Serialize>(v: T) -> Canon<T> {
    Canon(StatusCode::CREATED, v)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError(pub ServiceError);

impl<E: Into<ServiceError>> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError(e.into())
    }
}

pub fn status_of(e: &ServiceError) -> StatusCode {
    use ServiceError as S;
    use WorkflowError as W;
    match e {
        S::Workflow(w) => match w {
            W::UnknownAccount(_) | W::UnknownBooking(_) => StatusCode::NOT_FOUND,
            w if w.is_authorization() => StatusCode::FORBIDDEN,
            W::EmailTaken(_)
            | W::AdminExists
            | W::SlotTaken
            | W::IllegalTransition { .. }
            | W::WrongStatus(_)
            | W::WrongState
            | W::TokenUsed => StatusCode::CONFLICT,
            W::InsufficientCredit { .. } => StatusCode::PAYMENT_REQUIRED,
            _ => StatusCode::BAD_REQUEST,
        },
        S::Store(StoreError::NotFound(_)) | S::NotFound(_) => StatusCode::NOT_FOUND,
        S::Store(StoreError::ConflictingRecord(_)) => StatusCode::CONFLICT,
        S::Store(StoreError::ChecksumMismatch(_)) => StatusCode::UNPROCESSABLE_ENTITY,
        S::Store(StoreError::Model(_) | StoreError::MissingBlob(_) | StoreError::UnexpectedBlob(_)) => {
            StatusCode::BAD_REQUEST
        }
        S::BadRequest(_) => StatusCode::BAD_REQUEST,
        S::BadCredentials | S::Unauthenticated => StatusCode::UNAUTHORIZED,
        S::NotActive | S::Forbidden(_) => StatusCode::FORBIDDEN,
        S::ServiceUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        S::Sync(_) => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.0.code().to_string(),
            message: self.0.to_string(),
        };
        Canon(status_of(&self.0), body).into_response()
    }
}

type ApiResult<T> = Result<Canon<T>, ApiError>;

/// Runs storage-touching work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::ServiceUnavailable(e.to_string()))?
        .map_err(ApiError)
}

// Extractors.

/// A JSON body whose parse errors come back in the API error format.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ServiceError::BadRequest(e.body_text()).into()),
        }
    }
}

/// The live account behind the bearer token.
pub struct Auth(pub Account);

impl FromRequestParts<AppState> for Auth {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, node: &AppState) -> Result<Self, ApiError> {
        let token = bearer(&parts.headers).ok_or(ServiceError::Unauthenticated)?;
        Ok(Auth(node.authenticate(&token)?))
    }
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let v = headers.get(AUTHORIZATION)?.to_str().ok()?;
    v.strip_prefix("Bearer ").map(|t| t.trim().to_string())
}

/// A request from the configured peer site.
pub struct Peer;

impl FromRequestParts<AppState> for Peer {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, node: &AppState) -> Result<Self, ApiError> {
        let presented = parts.headers.get(PEER_TOKEN_HEADER).and_then(|v| v.to_str().ok());
        node.check_peer(presented)?;
        Ok(Peer)
    }
}

fn parse_id<T: std::str::FromStr>(raw: &str, what: &str) -> Result<T, ServiceError> {
    raw.parse()
        .map_err(|_| ServiceError::BadRequest(format!("{what} {raw:?} is not a valid id")))
}

// Accounts.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub email: String,
    #[serde(default)]
    pub profile: Profile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivateRequest {
    pub token: String,
    pub password: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReissueRequest {
    pub email: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginRequest {
    pub email: String,
    pub password: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: Decision,
}

async fn healthz(State(node): State<AppState>) -> ApiResult<crate::node::Health> {
    Ok(ok(blocking(move || Ok(node.health())).await?))
}

async fn register(node: AppState, role: Role, req: RegisterRequest) -> ApiResult<impl Serialize> {
    Ok(created(
        blocking(move || node.register(role, &req.email, req.profile)).await?,
    ))
}

async fn register_doctor(State(node): State<AppState>, Body(req): Body<RegisterRequest>) -> ApiResult<impl Serialize> {
    register(node, Role::Doctor, req).await
}

async fn register_patient(State(node): State<AppState>, Body(req): Body<RegisterRequest>) -> ApiResult<impl Serialize> {
    register(node, Role::Patient, req).await
}

async fn activate(State(node): State<AppState>, Body(req): Body<ActivateRequest>) -> ApiResult<impl Serialize> {
    Ok(ok(blocking(move || node.activate(&req.token, &req.password)).await?))
}

async fn reissue(State(node): State<AppState>, Body(req): Body<ReissueRequest>) -> ApiResult<impl Serialize> {
    Ok(ok(blocking(move || node.reissue_token(&req.email)).await?))
}

async fn login(State(node): State<AppState>, Body(req): Body<LoginRequest>) -> ApiResult<impl Serialize> {
    Ok(ok(blocking(move || node.login(&req.email, &req.password)).await?))
}

async fn logout(State(node): State<AppState>, headers: HeaderMap) -> ApiResult<impl Serialize> {
    let token = bearer(&headers).ok_or(ServiceError::Unauthenticated)?;
    node.authenticate(&token)?;
    node.logout(&token);
    Ok(ok(serde_json::json!({ "logged_out": true })))
}

async fn pending_doctors(State(node): State<AppState>, Auth(a): Auth) -> ApiResult<impl Serialize> {
    if a.role != Role::Admin {
        return Err(ServiceError::Workflow(WorkflowError::NotAdmin).into());
    }
    let portal = node.portal();
    let list: Vec<_> = portal.pending_doctors().into_iter().map(|d| d.public()).collect();
    Ok(ok(list))
}

async fn decide(
    State(node): State<AppState>,
    Auth(a): Auth,
    Path(id): Path<String>,
    Body(req): Body<DecisionRequest>,
) -> ApiResult<impl Serialize> {
    let cmd = Command::AdminDecide {
        admin: a.account_id,
        doctor: parse_id(&id, "account")?,
        decision: req.decision,
    };
    Ok(ok(effect(node, cmd).await?))
}

async fn effect(node: AppState, cmd: Command) -> Result<Effect, ApiError> {
    blocking(move || Ok(node.execute(&cmd)?.effect)).await
}

// Doctors and slots.

#[derive(Debug, Clone, Deserialize)]
pub struct SearchQuery {
    #[serde(default)]
    pub query: String,
}

async fn search_doctors(State(node): State<AppState>, Query(q): Query<SearchQuery>) -> ApiResult<impl Serialize> {
    let portal = node.portal();
    let hits: Vec<_> = portal
        .search_doctors(&q.query)
        .into_iter()
        .map(|d| d.public())
        .collect();
    Ok(ok(hits))
}

async fn get_service(State(node): State<AppState>, _auth: Auth, Path(id): Path<String>) -> ApiResult<ServiceSettings> {
    let doctor: AccountId = parse_id(&id, "account")?;
    let portal = node.portal();
    match portal.account(doctor) {
        Some(a) if a.role == Role::Doctor => {}
        _ => return Err(ServiceError::Workflow(WorkflowError::UnknownAccount(doctor)).into()),
    }
    let settings = portal.service_settings(doctor).cloned().unwrap_or(ServiceSettings {
        doctor_id: doctor,
        enabled: false,
        offerings: Vec::new(),
    });
    Ok(ok(settings))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub enabled: bool,
    pub offerings: Vec<Offering>,
}

async fn put_service(
    State(node): State<AppState>,
    Auth(a): Auth,
    Path(id): Path<String>,
    Body(req): Body<ServiceRequest>,
) -> ApiResult<impl Serialize> {
    let doctor: AccountId = parse_id(&id, "account")?;
    if doctor != a.account_id {
        return Err(ServiceError::Forbidden("doctors edit only their own service".into()).into());
    }
    let cmd = Command::UpdateServiceSettings {
        doctor,
        enabled: req.enabled,
        offerings: req.offerings,
    };
    Ok(ok(effect(node, cmd).await?))
}

#[derive(Debug, Clone, Deserialize)]
pub struct SlotQuery {
    pub from: NaiveDate,
    pub to: NaiveDate,
}

async fn slots(
    State(node): State<AppState>,
    _auth: Auth,
    Path(id): Path<String>,
    Query(q): Query<SlotQuery>,
) -> ApiResult<Vec<Slot>> {
    let doctor: AccountId = parse_id(&id, "account")?;
    let span = (q.to - q.from).num_days();
    if !(0..=MAX_SLOT_RANGE_DAYS).contains(&span) {
        return Err(ServiceError::BadRequest(format!("from..to must span 0 to {MAX_SLOT_RANGE_DAYS} days")).into());
    }
    Ok(ok(node.portal().list_available_slots(doctor, q.from, q.to)))
}

// Bookings.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BookingRequest {
    pub doctor: AccountId,
    pub slot: Slot,
}

async fn request_booking(
    State(node): State<AppState>,
    Auth(a): Auth,
    Body(req): Body<BookingRequest>,
) -> ApiResult<impl Serialize> {
    let booking_id = node.next_booking_id();
    let cmd = Command::RequestBooking {
        patient: a.account_id,
        doctor: req.doctor,
        booking_id,
        slot: req.slot,
    };
    Ok(created(effect(node, cmd).await?))
}

async fn list_bookings(State(node): State<AppState>, Auth(a): Auth) -> ApiResult<impl Serialize> {
    Ok(ok(node.portal().list_bookings(a.account_id)?))
}

async fn review_booking(
    State(node): State<AppState>,
    Auth(a): Auth,
    Path(id): Path<String>,
) -> ApiResult<impl Serialize> {
    let booking: BookingId = parse_id(&id, "booking")?;
    Ok(ok(node.portal().review_booking(a.account_id, booking)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusRequest {
    pub status: BookingStatus,
}

async fn set_status(
    State(node): State<AppState>,
    Auth(a): Auth,
    Path(id): Path<String>,
    Body(req): Body<StatusRequest>,
) -> ApiResult<impl Serialize> {
    let cmd = Command::SetBookingStatus {
        doctor: a.account_id,
        booking_id: parse_id(&id, "booking")?,
        status: req.status,
    };
    Ok(ok(effect(node, cmd).await?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrescriptionRequest {
    pub prescription: String,
    #[serde(default)]
    pub required_radiographs: Vec<String>,
    #[serde(default)]
    pub required_tests: Vec<String>,
}

async fn prescribe(
    State(node): State<AppState>,
    Auth(a): Auth,
    Path(id): Path<String>,
    Body(req): Body<PrescriptionRequest>,
) -> ApiResult<impl Serialize> {
    let cmd = Command::AttachPrescription {
        doctor: a.account_id,
        booking_id: parse_id(&id, "booking")?,
        prescription: req.prescription,
        required_radiographs: req.required_radiographs,
        required_tests: req.required_tests,
    };
    Ok(ok(effect(node, cmd).await?))
}

// Patients.

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryView {
    pub patient_id: AccountId,
    pub category: HistoryCategory,
    pub entries: Vec<HistoryEntry>,
}

async fn full_history(
    State(node): State<AppState>,
    Auth(a): Auth,
    Path(id): Path<String>,
) -> ApiResult<impl Serialize> {
    let patient: AccountId = parse_id(&id, "account")?;
    let portal = node.portal();
    Ok(ok(portal.view_history(a.account_id, patient)?.clone()))
}

async fn get_history(
    State(node): State<AppState>,
    Auth(a): Auth,
    Path((id, category)): Path<(String, String)>,
) -> ApiResult<CategoryView> {
    let patient: AccountId = parse_id(&id, "account")?;
    let category: HistoryCategory = category.parse()?;
    let portal = node.portal();
    let history = portal.view_history(a.account_id, patient)?;
    Ok(ok(CategoryView {
        patient_id: patient,
        category,
        entries: history.category(category).to_vec(),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRequest {
    pub text: String,
}

async fn add_history(
    State(node): State<AppState>,
    Auth(a): Auth,
    Path((id, category)): Path<(String, String)>,
    Body(req): Body<HistoryRequest>,
) -> ApiResult<impl Serialize> {
    let cmd = Command::AddHistory {
        actor: a.account_id,
        patient: parse_id(&id, "account")?,
        category,
        text: req.text,
    };
    Ok(created(effect(node, cmd).await?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasicInfoRequest {
    pub fields: Profile,
}

async fn basic_info(
    State(node): State<AppState>,
    Auth(a): Auth,
    Path(id): Path<String>,
    Body(req): Body<BasicInfoRequest>,
) -> ApiResult<impl Serialize> {
    let cmd = Command::UpdateBasicInfo {
        actor: a.account_id,
        patient: parse_id(&id, "account")?,
        fields: req.fields,
    };
    Ok(ok(effect(node, cmd).await?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopupRequest {
    pub amount: i64,
}

async fn topup(
    State(node): State<AppState>,
    Auth(a): Auth,
    Path(id): Path<String>,
    Body(req): Body<TopupRequest>,
) -> ApiResult<impl Serialize> {
    let cmd = Command::CreditTopup {
        actor: a.account_id,
        patient: parse_id(&id, "account")?,
        amount: req.amount,
    };
    Ok(ok(effect(node, cmd).await?))
}

async fn get_ledger(State(node): State<AppState>, Auth(a): Auth, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    let patient: AccountId = parse_id(&id, "account")?;
    Ok(ok(node.portal().view_ledger(a.account_id, patient)?.clone()))
}

// Records.

/// A draft plus base64 bodies for its FILE attachments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordRequest {
    pub draft: PipDraft,
    #[serde(default)]
    pub blobs: BTreeMap<AttachmentId, String>,
}

async fn submit_record(State(node): State<AppState>, Auth(a): Auth, Body(req): Body<RecordRequest>) -> ApiResult<Pip> {
    let mut blobs = BTreeMap::new();
    for (id, b64) in req.blobs {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64.as_bytes())
            .map_err(|e| ServiceError::BadRequest(format!("blob {id}: {e}")))?;
        blobs.insert(id, bytes);
    }
    let pip = blocking(move || node.submit_record(a.account_id, &req.draft, blobs)).await?;
    Ok(created(pip))
}

async fn patient_records(State(node): State<AppState>, Auth(a): Auth, Path(id): Path<String>) -> ApiResult<Vec<Pip>> {
    let patient: PatientId = parse_id(&id, "account")?;
    Ok(ok(blocking(move || node.patient_records(a.account_id, patient)).await?))
}

async fn problem_records(State(node): State<AppState>, Auth(a): Auth, Path(id): Path<String>) -> ApiResult<Vec<Pip>> {
    let problem: ProblemId = parse_id(&id, "problem")?;
    Ok(ok(blocking(move || node.problem_records(a.account_id, problem)).await?))
}

// Peer-only sync.

async fn sync_apply(State(node): State<AppState>, _peer: Peer, body: Bytes) -> ApiResult<ApplyResponse> {
    let outcome = blocking(move || node.sync_apply(&body)).await?;
    Ok(ok(ApplyResponse { outcome }))
}

#[derive(Debug, Clone, Deserialize)]
pub struct FolderQuery {
    pub record: Option<String>,
}

async fn sync_folder(
    State(node): State<AppState>,
    _peer: Peer,
    Path(patient_id): Path<String>,
    Query(q): Query<FolderQuery>,
) -> Result<Response, ApiError> {
    let patient: PatientId = parse_id(&patient_id, "account")?;
    match q.record {
        Some(raw) => {
            let record: RecordId = parse_id(&raw, "record")?;
            let bytes = blocking(move || node.sync_fetch(patient, record)).await?;
            Ok((StatusCode::OK, [(CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
        }
        None => {
            let records = blocking(move || node.sync_manifest(patient)).await?;
            Ok(ok(Manifest {
                patient_id: patient,
                records,
            })
            .into_response())
        }
    }
}

async fn sync_schedule(State(node): State<AppState>, _peer: Peer) -> ApiResult<impl Serialize> {
    if node.config().role != crate::config::SiteRole::Center {
        return Err(ServiceError::NotFound("sync endpoints live on the center".into()).into());
    }
    Ok(ok(node.consultation_schedule()))
}
