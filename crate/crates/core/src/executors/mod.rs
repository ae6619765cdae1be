//! Step executors and the registry that maps executor ids to them.

mod arxiv;
mod fixtures;
mod llm;
mod mock;
mod prompt;
mod stub;
mod transport;

pub use arxiv::{
    arxiv_search, extract_abstracts, parse_atom_feed, ArxivConfig, ArxivSearchExecutor, ExtractExecutor,
    PaperRecord, SEARCH_AND_EXTRACT,
};
pub use fixtures::{Fixture, FixtureMode, FixtureStore, Usage};
pub use llm::{llm_chat, ChatCompletion, LlmChatExecutor, LlmEndpointConfig};
pub use mock::{mock_execute, MockExecutor, MockParams};
pub use prompt::{render_prompt, Message, PromptError, PromptKind, PromptTemplate, COT_CLAUSE};
pub use stub::StubTransport;
pub use transport::{HttpRequest, HttpResponse, HttpTransport, Method, OfflineTransport, Transport, TransportError};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::state::{Delta, StateDoc, Value};

pub type Params = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExecutorId {
    Mock,
    LlmChat,
    ArxivSearch,
    Extract,
}

impl ExecutorId {
    pub const ALL: [ExecutorId; 4] =
        [ExecutorId::Mock, ExecutorId::LlmChat, ExecutorId::ArxivSearch, ExecutorId::Extract];

    pub fn as_str(self) -> &'static str {
        match self {
            ExecutorId::Mock => "mock",
            ExecutorId::LlmChat => "llm-chat",
            ExecutorId::ArxivSearch => "arxiv-search",
            ExecutorId::Extract => "extract",
        }
    }
}

impl fmt::Display for ExecutorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecutorId {
    type Err = ExecError;

    fn from_str(s: &str) -> Result<Self, ExecError> {
        match s {
            "mock" => Ok(ExecutorId::Mock),
            "llm-chat" => Ok(ExecutorId::LlmChat),
            "arxiv-search" => Ok(ExecutorId::ArxivSearch),
            "extract" => Ok(ExecutorId::Extract),
            "evaluator" => Err(ExecError::Reserved(s.to_owned())),
            other => Err(ExecError::UnknownExecutor(other.to_owned())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("unknown executor `{0}`")]
    UnknownExecutor(String),
    #[error("executor `{0}` is reserved and not implemented")]
    Reserved(String),
    #[error("invalid params: {0}")]
    InvalidParams(String),
    #[error("fixture miss: {0}")]
    FixtureMiss(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("missing API key: environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("malformed response: {0}")]
    Response(String),
    #[error("feed parse error: {0}")]
    Feed(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("fixture store: {0}")]
    Fixture(String),
}

/// Where in a workflow an executor is being invoked.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub step_index: usize,
    pub step: &'a str,
    pub option: &'a str,
    pub state_hash: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    delta: Delta,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_ms: u64,
    pub status: StepStatus,
}

impl StepOutcome {
    pub fn ok(delta: Delta, tokens_in: u64, tokens_out: u64) -> Self {
        StepOutcome { delta, tokens_in, tokens_out, wall_ms: 0, status: StepStatus::Ok }
    }

    /// A failed outcome never carries writes.
    pub fn failed(reason: impl Into<String>) -> Self {
        StepOutcome {
            delta: Delta::default(),
            tokens_in: 0,
            tokens_out: 0,
            wall_ms: 0,
            status: StepStatus::Failed(reason.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == StepStatus::Ok
    }

    pub fn delta(&self) -> &Delta {
        &self.delta
    }
}

pub trait Executor: Send + Sync {
    fn execute(&self, ctx: &StepContext<'_>, state: &StateDoc, params: &Params) -> Result<StepOutcome, ExecError>;

    /// Whether re-running on the same inputs is guaranteed to reproduce the
    /// outcome (pure computation or fixture replay).
    fn is_replayable(&self) -> bool {
        true
    }
}

#[derive(Clone, Default)]
pub struct Registry {
    executors: BTreeMap<ExecutorId, Arc<dyn Executor>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.executors.keys()).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    /// Only the deterministic mock.
    pub fn mock() -> Self {
        Registry::new().with(ExecutorId::Mock, MockExecutor::new())
    }

    /// All four executors; network executors go through `fixtures` and `transport`.
    pub fn standard(
        fixtures: Arc<FixtureStore>,
        transport: Arc<dyn Transport>,
        llm: LlmEndpointConfig,
        arxiv: ArxivConfig,
    ) -> Self {
        Registry::mock()
            .with(ExecutorId::LlmChat, LlmChatExecutor::new(llm, fixtures.clone(), transport.clone()))
            .with(ExecutorId::ArxivSearch, ArxivSearchExecutor::new(arxiv, fixtures, transport))
            .with(ExecutorId::Extract, ExtractExecutor)
    }

    pub fn with(mut self, id: ExecutorId, executor: impl Executor + 'static) -> Self {
        self.register(id, Arc::new(executor));
        self
    }

    pub fn register(&mut self, id: ExecutorId, executor: Arc<dyn Executor>) {
        self.executors.insert(id, executor);
    }

    pub fn get(&self, id: ExecutorId) -> Option<&Arc<dyn Executor>> {
        self.executors.get(&id)
    }

    pub fn contains(&self, id: ExecutorId) -> bool {
        self.executors.contains_key(&id)
    }
}

// Param accessors shared by the executors.

fn param_str<'a>(params: &'a Params, key: &str) -> Result<Option<&'a str>, ExecError> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(ExecError::InvalidParams(format!("`{key}` must be a string"))),
    }
}

fn param_u64(params: &Params, key: &str) -> Result<Option<u64>, ExecError> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| ExecError::InvalidParams(format!("`{key}` must be a non-negative integer"))),
    }
}

fn param_bool(params: &Params, key: &str) -> Result<Option<bool>, ExecError> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Bool(b)) => Ok(Some(*b)),
        Some(_) => Err(ExecError::InvalidParams(format!("`{key}` must be a boolean"))),
    }
}

/// The workflow topic: `env.topic`, falling back to `env.task`.
fn state_topic(state: &StateDoc) -> Option<&str> {
    state
        .get(&"env.topic".into())
        .or_else(|| state.get(&"env.task".into()))
        .and_then(Value::as_str)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn executor_ids_parse() {
        for id in ExecutorId::ALL {
            assert_eq!(id.as_str().parse::<ExecutorId>().unwrap(), id);
        }
        assert!(matches!("evaluator".parse::<ExecutorId>(), Err(ExecError::Reserved(_))));
        let err = "shell".parse::<ExecutorId>().unwrap_err();
        assert_eq!(err.to_string(), "unknown executor `shell`");
    }

    #[test]
    fn failed_outcome_has_no_delta() {
        let out = StepOutcome::failed("boom");
        assert!(out.delta().is_empty());
        assert!(!out.is_ok());
    }
}
