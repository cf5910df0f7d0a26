//! Blocking HTTP client for a remote base station.

use crate::region::Snapshot;
use crate::service::{CreatedId, ErrorBody, IngestSummary, PollRequest};
use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use std::time::Duration;
use thiserror::Error;
use v2x_core::geo::GeoPoint;
use v2x_core::nodes::BaseReport;
use v2x_core::uplink::{AdvisoryCommand, BaseLink, LinkError, RsuDirectives};
use v2x_core::wire::NodeId;

const TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach base station: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("base station answered {status}: {message}")]
    Status { status: StatusCode, message: String },
}

impl From<ClientError> for LinkError {
    fn from(e: ClientError) -> LinkError {
        match e {
            ClientError::Transport(e) => LinkError::Transport(e.to_string()),
            ClientError::Status { .. } => LinkError::Rejected(e.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpBaseLink {
    base: String,
    token: Option<String>,
    client: Client,
}

impl HttpBaseLink {
    pub fn new(base_url: &str, token: Option<String>) -> Result<HttpBaseLink, ClientError> {
        let client = Client::builder().timeout(TIMEOUT).build()?;
        Ok(HttpBaseLink { base: base_url.trim_end_matches('/').to_string(), token, client })
    }

    fn authed(&self, req: RequestBuilder) -> RequestBuilder {
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    fn check(resp: Response) -> Result<Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Status { status, message })
    }

    /// Posts raw NDJSON. Rejected lines are reported in the summary, not
    /// as an error.
    pub fn ingest_ndjson(&self, body: String) -> Result<IngestSummary, ClientError> {
        let resp = self
            .authed(self.client.post(format!("{}/ingest", self.base)))
            .header("content-type", "application/x-ndjson")
            .body(body)
            .send()?;
        if resp.status() == StatusCode::UNPROCESSABLE_ENTITY {
            return Ok(resp.json()?);
        }
        Ok(Self::check(resp)?.json()?)
    }

    pub fn snapshot(&self) -> Result<Snapshot, ClientError> {
        let resp = self.authed(self.client.get(format!("{}/snapshot", self.base))).send()?;
        Ok(Self::check(resp)?.json()?)
    }

    pub fn health(&self) -> Result<(), ClientError> {
        Self::check(self.client.get(format!("{}/healthz", self.base)).send()?)?;
        Ok(())
    }
}

impl BaseLink for HttpBaseLink {
    fn push_reports(&mut self, reports: &[BaseReport]) -> Result<(), LinkError> {
        if reports.is_empty() {
            return Ok(());
        }
        let mut body = String::new();
        for r in reports {
            body.push_str(&serde_json::to_string(r).map_err(|e| LinkError::Rejected(e.to_string()))?);
            body.push('\n');
        }
        let summary = self.ingest_ndjson(body)?;
        match summary.rejected.first() {
            Some(r) => Err(LinkError::Rejected(format!("report {}: {}", r.line, r.reason))),
            None => Ok(()),
        }
    }

    fn poll(&mut self, rsu: NodeId, position: GeoPoint, now_ms: u64) -> Result<RsuDirectives, LinkError> {
        let req = PollRequest { rsu, position: Some(position), now_ms: Some(now_ms) };
        let resp = self
            .authed(self.client.post(format!("{}/rsu/poll", self.base)))
            .json(&req)
            .send()
            .map_err(ClientError::from)?;
        Ok(Self::check(resp)?.json().map_err(ClientError::from)?)
    }

    fn issue_advisory(&mut self, cmd: &AdvisoryCommand, _now_ms: u64) -> Result<u32, LinkError> {
        let resp = self
            .authed(self.client.post(format!("{}/advisories", self.base)))
            .json(cmd)
            .send()
            .map_err(ClientError::from)?;
        let created: CreatedId = Self::check(resp)?.json().map_err(ClientError::from)?;
        Ok(created.id)
    }
}
