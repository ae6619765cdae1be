//! Chat-completion client and the `llm-chat` executor.
//!
//! Wire format (OpenAI-compatible): `POST {base_url}/chat/completions` with
//! `{"model", "messages": [{"role","content"}], "temperature"}`; the reply's
//! `choices[0].message.content` is the completion and
//! `usage.prompt_tokens` / `usage.completion_tokens` the token counts.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::state::{Delta, KeyPath, StateDoc, Value, ARTIFACTS, MESSAGES};

use super::arxiv::SEARCH_AND_EXTRACT;
use super::fixtures::{FixtureMode, FixtureStore, Usage};
use super::prompt::{render_prompt, Message, PromptKind, PromptTemplate};
use super::transport::{send_with_retry, HttpRequest, Method, Transport};
use super::{param_str, state_topic, ExecError, Executor, Params, StepContext, StepOutcome};

const EXECUTOR: &str = "llm-chat";

#[derive(Debug, Clone, PartialEq)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    /// Name of the environment variable holding the key. The key itself is
    /// never written to fixtures.
    pub api_key_env: String,
    /// Explicit key; takes precedence over `api_key_env`.
    pub api_key: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        LlmEndpointConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            api_key_env: "OPENAI_API_KEY".into(),
            api_key: None,
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatCompletion {
    pub content: String,
    pub usage: Usage,
}

fn map_of(pairs: Vec<(&str, Value)>) -> Value {
    Value::Map(pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect())
}

fn request_value(config: &LlmEndpointConfig, messages: &[Message]) -> Value {
    let msgs = messages
        .iter()
        .map(|m| map_of(vec![("role", m.role.as_str().into()), ("content", m.content.as_str().into())]))
        .collect::<Vec<_>>();
    map_of(vec![
        ("model", config.model.as_str().into()),
        ("temperature", config.temperature.into()),
        ("messages", Value::List(msgs)),
    ])
}

fn call_endpoint(
    config: &LlmEndpointConfig,
    request: &Value,
    transport: &dyn Transport,
) -> Result<(Value, Usage), ExecError> {
    let key = match &config.api_key {
        Some(key) => key.clone(),
        None => std::env::var(&config.api_key_env).map_err(|_| ExecError::MissingApiKey(config.api_key_env.clone()))?,
    };
    let body = serde_json::to_vec(request).map_err(|e| ExecError::InvalidParams(e.to_string()))?;
    let http = HttpRequest {
        method: Method::Post,
        url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
        headers: vec![
            ("Authorization".into(), format!("Bearer {key}")),
            ("Content-Type".into(), "application/json".into()),
        ],
        body: Some(body),
        timeout_ms: config.timeout_ms,
    };
    let resp = send_with_retry(transport, &http, config.max_retries, config.backoff_ms)?;
    let json: serde_json::Value =
        serde_json::from_slice(&resp.body).map_err(|e| ExecError::Response(e.to_string()))?;
    let content = json
        .pointer("/choices/0/message/content")
        .and_then(serde_json::Value::as_str)
        .ok_or_else(|| ExecError::Response("missing choices[0].message.content".into()))?;
    let count = |ptr: &str| json.pointer(ptr).and_then(serde_json::Value::as_u64).unwrap_or(0);
    let usage = Usage { tokens_in: count("/usage/prompt_tokens"), tokens_out: count("/usage/completion_tokens") };
    Ok((map_of(vec![("content", content.into())]), usage))
}

/// One chat completion, served from fixtures in replay mode.
pub fn llm_chat(
    config: &LlmEndpointConfig,
    messages: &[Message],
    fixtures: &FixtureStore,
    transport: &dyn Transport,
) -> Result<ChatCompletion, ExecError> {
    let request = request_value(config, messages);
    let (response, usage) = fixtures.resolve(EXECUTOR, &request, || call_endpoint(config, &request, transport))?;
    let content = response
        .as_map()
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .ok_or_else(|| ExecError::Response("fixture response lacks `content`".into()))?;
    Ok(ChatCompletion { content: content.to_owned(), usage })
}

/// Writes one report section with a chain-of-thought or few-shot prompt.
///
/// Params: `template` (`cot` | `few-shot`, required), `instruction`, and for
/// few-shot an optional `examples` list of `[input, output]` pairs.
pub struct LlmChatExecutor {
    config: LlmEndpointConfig,
    fixtures: Arc<FixtureStore>,
    transport: Arc<dyn Transport>,
}

impl LlmChatExecutor {
    pub fn new(config: LlmEndpointConfig, fixtures: Arc<FixtureStore>, transport: Arc<dyn Transport>) -> Self {
        LlmChatExecutor { config, fixtures, transport }
    }

    fn template(&self, params: &Params) -> Result<PromptTemplate, ExecError> {
        let kind: PromptKind = param_str(params, "template")?
            .ok_or_else(|| ExecError::InvalidParams("`template` is required".into()))?
            .parse()?;
        let mut template = PromptTemplate::section(kind);
        if let (PromptKind::FewShot, Some(Value::List(pairs))) = (kind, params.get("examples")) {
            let parsed = pairs
                .iter()
                .map(|pair| match pair.as_list().map(Vec::as_slice) {
                    Some([Value::String(i), Value::String(o)]) => Ok((i.clone(), o.clone())),
                    _ => Err(ExecError::InvalidParams("`examples` entries must be [input, output]".into())),
                })
                .collect::<Result<Vec<_>, _>>()?;
            template = PromptTemplate::few_shot(template.id, template.body, parsed)?;
        }
        Ok(template)
    }
}

/// Placeholder values drawn from the current state.
fn prompt_vars(ctx: &StepContext<'_>, state: &StateDoc, params: &Params) -> Result<BTreeMap<String, String>, ExecError> {
    let instruction = match param_str(params, "instruction")? {
        Some(s) => s.to_owned(),
        None => format!("Write the {} section of the report.", ctx.step),
    };
    let topic = state_topic(state).unwrap_or("").to_owned();
    let abstracts = match state.get(&KeyPath::new([ARTIFACTS, SEARCH_AND_EXTRACT])).and_then(Value::as_list) {
        Some(records) if !records.is_empty() => records
            .iter()
            .filter_map(Value::as_map)
            .map(|r| {
                let field = |k: &str| r.get(k).and_then(Value::as_str).unwrap_or("");
                format!("- [{}] {}: {}", field("arxiv_id"), field("title"), field("abstract"))
            })
            .collect::<Vec<_>>()
            .join("\n"),
        _ => "(none)".to_owned(),
    };
    let sections: Vec<String> = state
        .get(&KeyPath::new([ARTIFACTS]))
        .and_then(Value::as_map)
        .map(|m| {
            m.iter()
                .filter(|(k, _)| k.as_str() != SEARCH_AND_EXTRACT && k.as_str() != ctx.step)
                .filter_map(|(k, v)| v.as_str().map(|text| format!("## {k}\n{text}")))
                .collect()
        })
        .unwrap_or_default();
    let context = if sections.is_empty() { "(none)".to_owned() } else { sections.join("\n\n") };
    Ok([("instruction", instruction), ("topic", topic), ("abstracts", abstracts), ("context", context)]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect())
}

impl Executor for LlmChatExecutor {
    fn execute(&self, ctx: &StepContext<'_>, state: &StateDoc, params: &Params) -> Result<StepOutcome, ExecError> {
        let messages = render_prompt(&self.template(params)?, &prompt_vars(ctx, state, params)?)?;
        let completion = llm_chat(&self.config, &messages, &self.fixtures, self.transport.as_ref())?;
        let reply = map_of(vec![
            ("role", "assistant".into()),
            ("name", ctx.step.into()),
            ("content", completion.content.as_str().into()),
        ]);
        let delta = Delta::default()
            .set(KeyPath::new([ARTIFACTS, ctx.step]), completion.content)
            .append(KeyPath::new([MESSAGES]), reply);
        Ok(StepOutcome::ok(delta, completion.usage.tokens_in, completion.usage.tokens_out))
    }

    fn is_replayable(&self) -> bool {
        self.fixtures.mode() == FixtureMode::Replay
    }
}

#[cfg(test)]
mod tests {
    use super::super::transport::testing::{ok, ScriptedTransport};
    use super::*;

    const REPLY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"An introduction."}}],
        "usage":{"prompt_tokens":42,"completion_tokens":7}}"#;

    fn config() -> LlmEndpointConfig {
        LlmEndpointConfig { api_key: Some("k".into()), backoff_ms: 0, ..Default::default() }
    }

    fn msgs() -> Vec<Message> {
        vec![Message::new("user", "hello")]
    }

    #[test]
    fn record_then_replay_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let live = ScriptedTransport::new(vec![ok(REPLY)]);
        let rec = FixtureStore::new(FixtureMode::Record, dir.path());
        let first = llm_chat(&config(), &msgs(), &rec, &live).unwrap();
        assert_eq!(first.content, "An introduction.");
        assert_eq!(first.usage, Usage { tokens_in: 42, tokens_out: 7 });

        let offline = ScriptedTransport::new(vec![]);
        let replay = FixtureStore::new(FixtureMode::Replay, dir.path());
        for _ in 0..2 {
            assert_eq!(llm_chat(&config(), &msgs(), &replay, &offline).unwrap(), first);
        }
        assert_eq!(offline.calls(), 0);

        // Usage equals the numbers stored in the fixture file.
        let entry = std::fs::read_dir(dir.path().join("llm-chat")).unwrap().next().unwrap().unwrap();
        let text = std::fs::read_to_string(entry.path()).unwrap();
        assert!(text.contains(r#""usage":{"tokens_in":42,"tokens_out":7}"#), "{text}");
        assert!(!text.contains("Bearer"));
    }

    #[test]
    fn replay_miss() {
        let dir = tempfile::tempdir().unwrap();
        let replay = FixtureStore::new(FixtureMode::Replay, dir.path());
        let err = llm_chat(&config(), &msgs(), &replay, &ScriptedTransport::new(vec![])).unwrap_err();
        assert!(err.to_string().starts_with("fixture miss: "));
    }

    #[test]
    fn malformed_reply() {
        let live = ScriptedTransport::new(vec![ok(r#"{"choices":[]}"#)]);
        let err = llm_chat(&config(), &msgs(), &FixtureStore::off(), &live).unwrap_err();
        assert!(matches!(err, ExecError::Response(_)));
    }

    #[test]
    fn missing_key_is_reported() {
        let cfg = LlmEndpointConfig { api_key_env: "AGENTGIT_DEFINITELY_UNSET".into(), api_key: None, ..config() };
        let err = llm_chat(&cfg, &msgs(), &FixtureStore::off(), &ScriptedTransport::new(vec![])).unwrap_err();
        assert!(matches!(err, ExecError::MissingApiKey(_)));
    }

    #[test]
    fn executor_writes_section_and_usage() {
        let exec = LlmChatExecutor::new(
            config(),
            Arc::new(FixtureStore::off()),
            Arc::new(ScriptedTransport::new(vec![ok(REPLY)])),
        );
        let mut params = Params::new();
        params.insert("template".into(), "cot".into());
        let ctx = StepContext { step_index: 1, step: "introduction", option: "cot", state_hash: "h" };
        let out = exec.execute(&ctx, &StateDoc::with_reserved_sections(), &params).unwrap();
        assert_eq!((out.tokens_in, out.tokens_out), (42, 7));
        let mut state = StateDoc::with_reserved_sections();
        out.delta().apply_to(&mut state);
        assert_eq!(state.get(&"artifacts.introduction".into()), Some(&Value::from("An introduction.")));
        assert!(!exec.is_replayable());
    }
}
