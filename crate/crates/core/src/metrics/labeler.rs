use serde::{Deserialize, Serialize};

use super::{keyword_label, ObservationLabels};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct LabelRequest<'a> {
    reports: &'a [String],
}

#[derive(Deserialize)]
struct LabelReply {
    labels: Vec<ObservationLabels>,
}

/// Labels reports through an external labeler service. Transport or schema
/// problems are errors; nothing falls back silently.
pub fn label_via_service(reports: &[String], endpoint: &str) -> Result<Vec<ObservationLabels>> {
    if reports.is_empty() {
        return Ok(Vec::new());
    }
    let response = reqwest::blocking::Client::new()
        .post(endpoint)
        .json(&LabelRequest { reports })
        .send()
        .map_err(|e| {
            Error::Transport(crate::TransportError {
                status: None,
                attempts: 1,
                message: e.to_string(),
            })
        })?;
    let status = response.status().as_u16();
    if !response.status().is_success() {
        return Err(Error::Transport(crate::TransportError {
            status: Some(status),
            attempts: 1,
            message: format!("labeler returned HTTP {status}"),
        }));
    }
    let text = response.text().map_err(|e| {
        Error::Transport(crate::TransportError {
            status: Some(status),
            attempts: 1,
            message: e.to_string(),
        })
    })?;
    let reply: LabelReply = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("labeler reply: {e}")))?;
    if reply.labels.len() != reports.len() {
        return Err(Error::Schema(format!(
            "labeler returned {} label vectors for {} reports",
            reply.labels.len(),
            reports.len()
        )));
    }
    Ok(reply.labels)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labeler {
    Keyword,
    Service(String),
}

impl Labeler {
    /// `keyword`, or an `http(s)://` labeler endpoint.
    pub fn parse(mode: &str) -> Result<Self> {
        if mode == "keyword" {
            Ok(Labeler::Keyword)
        } else if mode.starts_with("http://") || mode.starts_with("https://") {
            Ok(Labeler::Service(mode.to_string()))
        } else {
            Err(Error::Config(format!("unknown labeler mode {mode:?}")))
        }
    }

    pub fn label_all(&self, reports: &[String]) -> Result<Vec<ObservationLabels>> {
        match self {
            Labeler::Keyword => Ok(reports.iter().map(|r| keyword_label(r)).collect()),
            Labeler::Service(url) => label_via_service(reports, url),
        }
    }
}
