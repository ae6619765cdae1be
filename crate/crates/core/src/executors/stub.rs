//! Offline stand-in for the arXiv and chat-completions endpoints.
//!
//! Responses are pure functions of the request, so recording fixtures
//! through it and replaying them is fully reproducible without network
//! access. Anything else gets a 404.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::state::sha256_hex;

use super::transport::{HttpRequest, HttpResponse, Method, Transport, TransportError};

#[derive(Debug, Default)]
pub struct StubTransport {
    calls: AtomicUsize,
}

impl StubTransport {
    pub fn new() -> Self {
        StubTransport::default()
    }

    /// Requests served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn query_param(url: &str) -> String {
    reqwest::Url::parse(url)
        .ok()
        .and_then(|u| u.query_pairs().find(|(k, _)| k == "search_query").map(|(_, v)| v.into_owned()))
        .map(|q| q.trim_start_matches("all:").to_owned())
        .unwrap_or_default()
}

fn feed(query: &str) -> String {
    let q = xml_escape(query);
    let entry = |id: &str, title: &str, summary: &str| {
        format!(
            "<entry><id>http://arxiv.org/abs/{id}</id><published>2024-01-01T00:00:00Z</published>\
             <title>{title}</title><summary>{summary}</summary>\
             <author><name>A. Author</name></author>\
             <link href=\"http://arxiv.org/abs/{id}\" rel=\"alternate\" type=\"text/html\"/></entry>"
        )
    };
    let entries = [
        entry("2401.00001v1", &format!("A survey of {q}"), &format!("We review recent work on {q}.")),
        entry("2401.00002v1", &format!("Benchmarks for {q}"), "We propose an evaluation suite."),
        entry("2401.00001v1", "Duplicate listing", "Same paper listed twice."),
        entry("2401.00003v1", "Protein structure prediction", "Unrelated to the query."),
    ];
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\
         <feed xmlns=\"http://www.w3.org/2005/Atom\"><title>stub feed</title>{}</feed>",
        entries.concat()
    )
}

fn completion(body: &[u8]) -> String {
    let digest = sha256_hex(body);
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": format!("[stub reply {}]", &digest[..16])}}],
        "usage": {"prompt_tokens": body.len() / 4, "completion_tokens": 16},
    })
    .to_string()
}

impl Transport for StubTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (status, body) = match request.method {
            Method::Get if request.url.contains("search_query=") => (200, feed(&query_param(&request.url))),
            Method::Post if request.url.ends_with("/chat/completions") => {
                (200, completion(request.body.as_deref().unwrap_or_default()))
            }
            _ => (404, "not found".to_owned()),
        };
        Ok(HttpResponse { status, body: body.into_bytes() })
    }
}
