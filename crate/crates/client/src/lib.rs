//! Typed client for the inspection service's JSON API.

use protosim_core::analytics::{ComparisonReport, PrototypeStats};
use protosim_core::api::{
    ErrorBody, Examples, ExamplesQuery, Manifest, PrototypePage, PrototypeQuery,
};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with a non-2xx status and a JSON error body.
    #[error("{status}: {message}")]
    Api { status: StatusCode, message: String },
    #[error("unexpected response body: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// Raw response as returned by `get_raw`.
#[derive(Debug, Clone)]
pub struct RawResponse {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn send(&self, path: &str, query: Option<&(impl Serialize + ?Sized)>) -> Result<reqwest::Response> {
        let mut req = self.http.get(format!("{}{path}", self.base));
        if let Some(q) = query {
            req = req.query(q);
        }
        let resp = req.send().await?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let bytes = resp.bytes().await?;
        let message = serde_json::from_slice::<ErrorBody>(&bytes)
            .map(|b| b.error)
            .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
        Err(ClientError::Api { status, message })
    }

    async fn json<T: DeserializeOwned>(&self, path: &str, query: Option<&(impl Serialize + ?Sized)>) -> Result<T> {
        let bytes = self.send(path, query).await?.bytes().await?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    async fn bytes(&self, path: &str, query: Option<&(impl Serialize + ?Sized)>) -> Result<Vec<u8>> {
        Ok(self.send(path, query).await?.bytes().await?.to_vec())
    }

    pub async fn manifest(&self) -> Result<Manifest> {
        self.json("/api/manifest", None::<&()>).await
    }

    pub async fn prototypes(&self, query: &PrototypeQuery) -> Result<PrototypePage> {
        self.json("/api/prototypes", Some(query)).await
    }

    pub async fn prototype(&self, id: usize) -> Result<PrototypeStats> {
        self.json(&format!("/api/prototypes/{id}"), None::<&()>).await
    }

    pub async fn examples(&self, id: usize, query: &ExamplesQuery) -> Result<Examples> {
        self.json(&format!("/api/prototypes/{id}/examples"), Some(query))
            .await
    }

    /// Attention overlay PNG of `prototype` on an image.
    pub async fn attention_png(&self, id: usize, dataset: Option<&str>, image_id: &str) -> Result<Vec<u8>> {
        let path = format!("/api/prototypes/{id}/attention/{image_id}");
        match dataset {
            Some(d) => self.bytes(&path, Some(&[("dataset", d)])).await,
            None => self.bytes(&path, None::<&()>).await,
        }
    }

    pub async fn image(&self, dataset: &str, image_id: &str) -> Result<Vec<u8>> {
        self.bytes(&format!("/api/images/{dataset}/{image_id}"), None::<&()>)
            .await
    }

    pub async fn report(&self) -> Result<ComparisonReport> {
        self.json("/api/report", None::<&()>).await
    }

    /// Any path (query string included), whatever the status.
    pub async fn get_raw(&self, path_and_query: &str) -> Result<RawResponse> {
        let resp = self
            .http
            .get(format!("{}{path_and_query}", self.base))
            .send()
            .await?;
        let status = resp.status();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let body = resp.bytes().await?.to_vec();
        Ok(RawResponse {
            status,
            content_type,
            body,
        })
    }
}
