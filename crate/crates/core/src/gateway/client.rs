use std::time::{Duration, Instant};

use reqwest::blocking::{Client, RequestBuilder};
use reqwest::{Method, Url};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::convert::DatasetFormat;
use crate::eval::{MatrixLevel, MatrixSummary};
use crate::scheduler::{InstanceConfig, InstanceRecord, JobRecord};
use crate::store::VersionId;

use super::platform::{
    AddUtteranceRequest, CellPage, DatasetSummary, DatasetView, EditRequest, Health, ImportRequest, ImportResponse, ModelSummary,
    ReportView, SubmitJobRequest, ValidationResult,
};
use super::{ApiError, ErrorCode};

/// Blocking client for the `/api/v1` routes. Must not be used from inside
/// an async runtime.
#[derive(Debug, Clone)]
pub struct ApiClient {
    base: Url,
    http: Client,
}

impl ApiClient {
    pub fn new(base_url: &str) -> Result<Self, ApiError> {
        let base = Url::parse(base_url).map_err(|e| ApiError::invalid(format!("bad API url {base_url:?}: {e}")))?;
        if base.cannot_be_a_base() {
            return Err(ApiError::invalid(format!("bad API url {base_url:?}")));
        }
        let http = Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
        Ok(ApiClient { base, http })
    }

    /// `base/api/v1/<segments>` with each segment percent-encoded.
    fn url(&self, segments: &[&str], query: &[(&str, Option<String>)]) -> Url {
        let mut url = self.base.clone();
        {
            let mut path = url.path_segments_mut().expect("base url checked in new");
            path.pop_if_empty().extend(["api", "v1"]).extend(segments);
        }
        let pairs: Vec<(&str, &String)> = query.iter().filter_map(|(k, v)| v.as_ref().map(|v| (*k, v))).collect();
        if !pairs.is_empty() {
            url.query_pairs_mut().extend_pairs(pairs);
        }
        url
    }

    fn send(&self, req: RequestBuilder) -> Result<reqwest::blocking::Response, ApiError> {
        let resp = req
            .send()
            .map_err(|e| ApiError::new(ErrorCode::Unavailable, format!("cannot reach API at {}: {e}", self.base)))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().unwrap_or_default();
        Err(serde_json::from_str::<ApiError>(&text).unwrap_or_else(|_| ApiError {
            http_status: status,
            code: if status == 404 { ErrorCode::NotFound } else { ErrorCode::Internal },
            message: format!("HTTP {status}: {text}"),
            details: None,
        }))
    }

    fn json<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ApiError> {
        self.send(req)?
            .json()
            .map_err(|e| ApiError::new(ErrorCode::Internal, format!("unexpected response body: {e}")))
    }

    fn get<T: DeserializeOwned>(&self, segments: &[&str], query: &[(&str, Option<String>)]) -> Result<T, ApiError> {
        self.json(self.http.get(self.url(segments, query)))
    }

    fn call<B: Serialize, T: DeserializeOwned>(&self, method: Method, segments: &[&str], body: &B) -> Result<T, ApiError> {
        self.json(self.http.request(method, self.url(segments, &[])).json(body))
    }

    fn bytes(&self, segments: &[&str], query: &[(&str, Option<String>)]) -> Result<Vec<u8>, ApiError> {
        let resp = self.send(self.http.get(self.url(segments, query)))?;
        resp.bytes()
            .map(|b| b.to_vec())
            .map_err(|e| ApiError::new(ErrorCode::Unavailable, e.to_string()))
    }

    pub fn health(&self) -> Result<Health, ApiError> {
        self.get(&["healthz"], &[])
    }

    pub fn import_dataset(&self, req: &ImportRequest) -> Result<ImportResponse, ApiError> {
        self.call(Method::POST, &["datasets"], req)
    }

    pub fn list_datasets(&self) -> Result<Vec<DatasetSummary>, ApiError> {
        self.get(&["datasets"], &[])
    }

    pub fn get_dataset(&self, id: &str, version: Option<u64>) -> Result<DatasetView, ApiError> {
        self.get(&["datasets", id], &[("version", version.map(|v| v.to_string()))])
    }

    pub fn export_dataset(&self, id: &str, format: DatasetFormat, version: Option<u64>) -> Result<Vec<u8>, ApiError> {
        self.bytes(
            &["datasets", id, "export"],
            &[("format", Some(format.as_str().to_string())), ("version", version.map(|v| v.to_string()))],
        )
    }

    pub fn validate_dataset(&self, id: &str, version: Option<u64>) -> Result<ValidationResult, ApiError> {
        let url = self.url(&["datasets", id, "validate"], &[("version", version.map(|v| v.to_string()))]);
        self.json(self.http.post(url))
    }

    pub fn edit_utterance(&self, id: &str, uid: &str, req: &EditRequest) -> Result<DatasetSummary, ApiError> {
        self.call(Method::PATCH, &["datasets", id, "utterances", uid], req)
    }

    pub fn add_utterance(&self, id: &str, req: &AddUtteranceRequest) -> Result<DatasetSummary, ApiError> {
        self.call(Method::POST, &["datasets", id, "utterances"], req)
    }

    pub fn submit_job(&self, req: &SubmitJobRequest) -> Result<JobRecord, ApiError> {
        self.call(Method::POST, &["jobs"], req)
    }

    pub fn list_jobs(&self) -> Result<Vec<JobRecord>, ApiError> {
        self.get(&["jobs"], &[])
    }

    pub fn get_job(&self, id: &str) -> Result<JobRecord, ApiError> {
        self.get(&["jobs", id], &[])
    }

    pub fn cancel_job(&self, id: &str) -> Result<JobRecord, ApiError> {
        self.json(self.http.post(self.url(&["jobs", id, "cancel"], &[])))
    }

    /// Polls until the job reaches a terminal state or `timeout` passes.
    pub fn wait_job(&self, id: &str, timeout: Duration) -> Result<JobRecord, ApiError> {
        let deadline = Instant::now() + timeout;
        loop {
            let job = self.get_job(id)?;
            if job.state.is_terminal() {
                return Ok(job);
            }
            if Instant::now() >= deadline {
                return Err(ApiError::new(
                    ErrorCode::Unavailable,
                    format!("job {id} still {} after {:.0}s", job.state, timeout.as_secs_f64()),
                ));
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    pub fn get_report(&self, key: &str) -> Result<ReportView, ApiError> {
        self.get(&["reports", key], &[])
    }

    pub fn confusion(&self, key: &str, level: MatrixLevel) -> Result<MatrixSummary, ApiError> {
        self.get(&["reports", key, "confusion"], &[("level", Some(level.as_str().to_string()))])
    }

    pub fn confusion_cell(
        &self,
        key: &str,
        level: MatrixLevel,
        gold: &str,
        pred: &str,
        cursor: Option<&str>,
        limit: Option<usize>,
    ) -> Result<CellPage, ApiError> {
        self.get(
            &["reports", key, "confusion", "cell"],
            &[
                ("level", Some(level.as_str().to_string())),
                ("gold", Some(gold.to_string())),
                ("pred", Some(pred.to_string())),
                ("cursor", cursor.map(str::to_string)),
                ("limit", limit.map(|l| l.to_string())),
            ],
        )
    }

    pub fn list_instances(&self) -> Result<Vec<InstanceRecord>, ApiError> {
        self.get(&["instances"], &[])
    }

    pub fn create_instance(&self, config: &InstanceConfig) -> Result<InstanceRecord, ApiError> {
        self.call(Method::POST, &["instances"], config)
    }

    pub fn stop_instance(&self, id: &str) -> Result<InstanceRecord, ApiError> {
        self.json(self.http.delete(self.url(&["instances", id], &[])))
    }

    pub fn list_models(&self) -> Result<Vec<ModelSummary>, ApiError> {
        self.get(&["models"], &[])
    }

    pub fn download_model(&self, name: &str, version: Option<&VersionId>) -> Result<Vec<u8>, ApiError> {
        self.bytes(&["models", name, "download"], &[("version", version.map(|v| v.as_str().to_string()))])
    }
}
