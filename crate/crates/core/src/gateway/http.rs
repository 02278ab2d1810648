use std::time::Duration;

use serde_json::Value;

use super::{Operation, ProviderProfile, Transport, TransportError};

/// POSTs the wire format to `{endpoint}/{op}`.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        // Long generations of a reasoning model can take several minutes.
        Self::new(Duration::from_secs(600))
    }
}

impl Transport for HttpTransport {
    fn call(
        &self,
        profile: &ProviderProfile,
        op: Operation,
        payload: &Value,
    ) -> Result<Value, TransportError> {
        let url = format!("{}/{}", profile.endpoint.trim_end_matches('/'), op.as_str());
        let mut body = payload.clone();
        if let (Some(obj), false) = (body.as_object_mut(), profile.model.is_empty()) {
            obj.insert("model".into(), Value::String(profile.model.clone()));
        }
        let mut response = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| match e {
                ureq::Error::Io(_) | ureq::Error::Timeout(_) | ureq::Error::ConnectionFailed => {
                    TransportError::Transient(e.to_string())
                }
                other => TransportError::Fatal(other.to_string()),
            })?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(TransportError::Transient(format!("{url} returned {status}")));
        }
        if status >= 400 {
            return Err(TransportError::Fatal(format!("{url} returned {status}")));
        }
        response
            .body_mut()
            .read_json::<Value>()
            .map_err(|e| TransportError::Fatal(format!("invalid JSON from {url}: {e}")))
    }
}
