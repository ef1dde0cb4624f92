use std::time::Duration;

use ilog_core::export::ComplianceReport;
use ilog_core::ingest::{
    AnswerStatus, ErasureReport, ErrorBody, IngestApi, IngestError, RegisterRequest, RegisterResponse,
    SubmittedAnswer, SupervisorStatus, SyncCommand, TaskFeed, UploadReceipt,
};
use ilog_core::study::Pseudonym;
use ilog_core::TsMs;
use reqwest::blocking::{Client, RequestBuilder};
use reqwest::Method;
use serde::de::DeserializeOwned;

use crate::NOW_HEADER;

/// Blocking client for the HTTP surface. Transport failures surface as
/// `IngestError::Unavailable` so callers can retry them.
#[derive(Debug, Clone)]
pub struct HttpClient {
    base: String,
    http: Client,
    send_clock: bool,
}

impl HttpClient {
    pub fn new(base_url: &str) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            http: Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("http client builds"),
            send_clock: false,
        }
    }

    /// Sends the caller's `now` with every request, for simulated clocks.
    pub fn with_sim_clock(mut self) -> Self {
        self.send_clock = true;
        self
    }

    fn request(&self, method: Method, path: &str, credential: Option<&str>, now: TsMs) -> RequestBuilder {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(c) = credential {
            req = req.header(reqwest::header::AUTHORIZATION, format!("Bearer {c}"));
        }
        if self.send_clock {
            req = req.header(NOW_HEADER, now.to_string());
        }
        req
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, IngestError> {
        let resp = req.send().map_err(|e| IngestError::Unavailable(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| IngestError::Unavailable(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| IngestError::Internal(format!("bad response: {e}")));
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => Err(IngestError::from_body(&body)),
            Err(_) if status.is_server_error() => Err(IngestError::Unavailable(format!("HTTP {status}"))),
            Err(_) => Err(IngestError::BadRequest(format!("HTTP {status}"))),
        }
    }

    fn json_body<B: serde::Serialize>(req: RequestBuilder, body: &B) -> RequestBuilder {
        req.header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(serde_json::to_vec(body).expect("request serializes"))
    }

    pub fn health(&self) -> Result<(), IngestError> {
        let resp = self
            .http
            .get(format!("{}/v1/health", self.base))
            .send()
            .map_err(|e| IngestError::Unavailable(e.to_string()))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(IngestError::Unavailable(format!("HTTP {}", resp.status())))
        }
    }

    pub fn supervisor_status(&self, credential: &str, now: TsMs) -> Result<SupervisorStatus, IngestError> {
        self.send(self.request(Method::GET, "/v1/supervisor/status", Some(credential), now))
    }

    pub fn compliance(&self, credential: &str, now: TsMs) -> Result<ComplianceReport, IngestError> {
        self.send(self.request(Method::GET, "/v1/supervisor/report", Some(credential), now))
    }

    pub fn trigger_sync(&self, credential: &str, p: Pseudonym, now: TsMs) -> Result<SyncCommand, IngestError> {
        self.send(self.request(Method::POST, &format!("/v1/supervisor/sync/{p}"), Some(credential), now))
    }

    pub fn erase(&self, credential: &str, p: Pseudonym, now: TsMs) -> Result<ErasureReport, IngestError> {
        self.send(self.request(Method::DELETE, &format!("/v1/participants/{p}"), Some(credential), now))
    }
}

impl IngestApi for HttpClient {
    fn register(&self, req: &RegisterRequest, now: TsMs) -> Result<RegisterResponse, IngestError> {
        self.send(Self::json_body(self.request(Method::POST, "/v1/register", None, now), req))
    }

    fn upload_chunk(&self, token: &str, bytes: &[u8], now: TsMs) -> Result<UploadReceipt, IngestError> {
        let req = self
            .request(Method::POST, "/v1/chunks", Some(token), now)
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(bytes.to_vec());
        self.send(req)
    }

    fn fetch_tasks(&self, token: &str, offline_since: Option<TsMs>, now: TsMs) -> Result<TaskFeed, IngestError> {
        let path = match offline_since {
            Some(t) => format!("/v1/tasks?since={t}"),
            None => "/v1/tasks".to_string(),
        };
        self.send(self.request(Method::GET, &path, Some(token), now))
    }

    fn submit_answers(&self, token: &str, answers: &[SubmittedAnswer], now: TsMs) -> Result<Vec<AnswerStatus>, IngestError> {
        self.send(Self::json_body(self.request(Method::POST, "/v1/answers", Some(token), now), &answers))
    }
}
