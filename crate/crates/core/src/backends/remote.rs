use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::wire::{ErrorBody, HealthResponse, HEALTH_PATH};
use super::{Transport, WireRequest};
use crate::error::BackendError;

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
const BODY_LIMIT: u64 = 512 * 1024 * 1024;

/// Counting semaphore bounding simultaneous requests.
struct Gate {
    free: Mutex<usize>,
    cond: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cond.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cond.notify_one();
    }
}

/// JSON-over-HTTP client for the model server.
pub struct RemoteTransport {
    base_url: String,
    agent: ureq::Agent,
    gate: Gate,
}

impl RemoteTransport {
    pub fn new(base_url: &str) -> Self {
        Self::with_limits(base_url, DEFAULT_MAX_IN_FLIGHT, Duration::from_secs(600))
    }

    pub fn with_limits(base_url: &str, max_in_flight: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent,
            gate: Gate::new(max_in_flight),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url)
    }

    fn finish(
        &self,
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<Vec<u8>, BackendError> {
        let resp =
            result.map_err(|e| BackendError::Unavailable(format!("{}: {e}", self.base_url)))?;
        let status = resp.status().as_u16();
        let body = resp
            .into_body()
            .into_with_config()
            .limit(BODY_LIMIT)
            .read_to_vec()
            .map_err(|e| {
                BackendError::Unavailable(format!("{}: reading body: {e}", self.base_url))
            })?;
        if (200..300).contains(&status) {
            return Ok(body);
        }
        let message = serde_json::from_slice::<ErrorBody>(&body)
            .map(|b| b.error)
            .unwrap_or_else(|_| String::from_utf8_lossy(&body).into_owned());
        if (400..500).contains(&status) {
            Err(BackendError::Rejected { status, message })
        } else {
            Err(BackendError::Model { status, message })
        }
    }

    pub fn health(&self) -> Result<HealthResponse, BackendError> {
        let _permit = self.gate.acquire();
        let body = self.finish(self.agent.get(&self.url(HEALTH_PATH)).call())?;
        serde_json::from_slice(&body).map_err(|e| BackendError::Schema(format!("health: {e}")))
    }
}

impl Transport for RemoteTransport {
    fn identity(&self) -> String {
        self.base_url.clone()
    }

    fn call(&self, request: &WireRequest) -> Result<Vec<u8>, BackendError> {
        let body = request.to_json()?;
        let _permit = self.gate.acquire();
        self.finish(
            self.agent
                .post(&self.url(request.method().path()))
                .header("content-type", "application/json")
                .send(&body[..]),
        )
    }
}
