use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub method: Method,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Option<Vec<u8>>,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("transport error: {message}")]
pub struct TransportError {
    pub message: String,
    pub timeout: bool,
}

impl TransportError {
    pub fn new(message: impl Into<String>) -> Self {
        TransportError { message: message.into(), timeout: false }
    }
}

/// Blocking HTTP. Swappable so tests never touch the network.
pub trait Transport: Send + Sync {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

#[derive(Debug, Clone, Default)]
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        HttpTransport::default()
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let mut builder = match request.method {
            Method::Get => self.client.get(&request.url),
            Method::Post => self.client.post(&request.url),
        };
        builder = builder.timeout(Duration::from_millis(request.timeout_ms));
        for (k, v) in &request.headers {
            builder = builder.header(k, v);
        }
        if let Some(body) = &request.body {
            builder = builder.body(body.clone());
        }
        let response = builder
            .send()
            .map_err(|e| TransportError { message: e.to_string(), timeout: e.is_timeout() })?;
        let status = response.status().as_u16();
        let body = response.bytes().map_err(|e| TransportError::new(e.to_string()))?.to_vec();
        Ok(HttpResponse { status, body })
    }
}

/// Refuses every request.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineTransport;

impl Transport for OfflineTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        Err(TransportError::new(format!("offline: refused request to {}", request.url)))
    }
}

pub(crate) fn is_transient_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// Sends with up to `max_retries` retries on transport errors, 429 and 5xx,
/// sleeping `backoff_ms * 2^attempt` between tries.
pub(crate) fn send_with_retry(
    transport: &dyn Transport,
    request: &HttpRequest,
    max_retries: u32,
    backoff_ms: u64,
) -> Result<HttpResponse, super::ExecError> {
    let mut attempt = 0;
    loop {
        let result = transport.send(request);
        let retryable = match &result {
            Ok(resp) => is_transient_status(resp.status),
            Err(_) => true,
        };
        if !retryable || attempt >= max_retries {
            let resp = result?;
            if !(200..300).contains(&resp.status) {
                return Err(super::ExecError::Http {
                    status: resp.status,
                    body: String::from_utf8_lossy(&resp.body).chars().take(500).collect(),
                });
            }
            return Ok(resp);
        }
        std::thread::sleep(Duration::from_millis(backoff_ms.saturating_mul(1 << attempt.min(16))));
        attempt += 1;
    }
}
