//! arXiv search over the public Atom API, plus abstract extraction.
//!
//! Query: `GET {endpoint}?search_query=all:<query>&start=0&max_results=<n>`.
//! Entries are read from the Atom namespace `http://www.w3.org/2005/Atom`;
//! elements in other namespaces (opensearch, arxiv) are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::state::{Delta, KeyPath, StateDoc, Value, ARTIFACTS, MESSAGES};

use super::fixtures::{FixtureMode, FixtureStore, Usage};
use super::transport::{send_with_retry, HttpRequest, Method, Transport};
use super::{param_bool, param_str, param_u64, state_topic, ExecError, Executor, Params, StepContext, StepOutcome};

pub const ATOM_NS: &str = "http://www.w3.org/2005/Atom";
/// Artifact key the extractor writes its survivors to.
pub const SEARCH_AND_EXTRACT: &str = "search_and_extract";
const EXECUTOR: &str = "arxiv-search";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub arxiv_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub authors: Vec<String>,
    pub published: String,
    pub url: String,
}

impl PaperRecord {
    pub fn to_value(&self) -> Value {
        Value::from(serde_json::to_value(self).expect("paper record serializes"))
    }

    pub fn from_value(v: &Value) -> Option<PaperRecord> {
        serde_json::to_value(v).ok().and_then(|j| serde_json::from_value(j).ok())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArxivConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for ArxivConfig {
    fn default() -> Self {
        ArxivConfig {
            endpoint: "http://export.arxiv.org/api/query".into(),
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_ms: 1_000,
        }
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses an arXiv Atom feed into records, preserving feed order.
pub fn parse_atom_feed(xml: &str) -> Result<Vec<PaperRecord>, ExecError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| ExecError::Feed(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "feed" || root.tag_name().namespace() != Some(ATOM_NS) {
        return Err(ExecError::Feed("root element is not an Atom <feed>".into()));
    }
    let atom = |node: roxmltree::Node, name: &str| node.tag_name().namespace() == Some(ATOM_NS) && node.tag_name().name() == name;
    let mut records = Vec::new();
    for (index, entry) in root.children().filter(|n| atom(*n, "entry")).enumerate() {
        let text_of = |name: &str| -> Option<String> {
            entry
                .children()
                .find(|n| atom(*n, name))
                .map(|n| collapse_ws(&n.descendants().filter(|d| d.is_text()).filter_map(|d| d.text()).collect::<String>()))
        };
        let require = |name: &str| -> Result<String, ExecError> {
            text_of(name)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| ExecError::Feed(format!("entry {index} is missing <{name}>")))
        };
        let id = require("id")?;
        let title = require("title")?;
        let abstract_text = require("summary")?;
        let authors = entry
            .children()
            .filter(|n| atom(*n, "author"))
            .filter_map(|a| a.children().find(|n| atom(*n, "name")).and_then(|n| n.text()))
            .map(collapse_ws)
            .collect();
        let url = entry
            .children()
            .filter(|n| atom(*n, "link"))
            .find(|n| n.attribute("rel").is_none_or(|r| r == "alternate"))
            .and_then(|n| n.attribute("href"))
            .map_or_else(|| id.clone(), str::to_owned);
        let arxiv_id = id
            .rsplit_once("/abs/")
            .map_or(id.as_str(), |(_, tail)| tail)
            .to_owned();
        records.push(PaperRecord {
            arxiv_id,
            title,
            abstract_text,
            authors,
            published: text_of("published").unwrap_or_default(),
            url,
        });
    }
    Ok(records)
}

fn search_url(config: &ArxivConfig, query: &str, max_results: u64) -> Result<String, ExecError> {
    let url = reqwest::Url::parse_with_params(
        &config.endpoint,
        &[
            ("search_query", format!("all:{query}")),
            ("start", "0".to_owned()),
            ("max_results", max_results.to_string()),
        ],
    )
    .map_err(|e| ExecError::InvalidParams(format!("bad arXiv endpoint: {e}")))?;
    Ok(url.into())
}

/// Topic search; `max_results` must be in 1..=100.
pub fn arxiv_search(
    config: &ArxivConfig,
    query: &str,
    max_results: u64,
    fixtures: &FixtureStore,
    transport: &dyn Transport,
) -> Result<Vec<PaperRecord>, ExecError> {
    if !(1..=100).contains(&max_results) {
        return Err(ExecError::InvalidParams(format!("max_results {max_results} outside 1..=100")));
    }
    let url = search_url(config, query, max_results)?;
    let request = Value::Map(BTreeMap::from([
        ("query".to_owned(), Value::from(query)),
        ("max_results".to_owned(), Value::from(max_results)),
        ("url".to_owned(), Value::from(url.as_str())),
    ]));
    let (response, _) = fixtures.resolve(EXECUTOR, &request, || {
        let http = HttpRequest {
            method: Method::Get,
            url: url.clone(),
            headers: vec![],
            body: None,
            timeout_ms: config.timeout_ms,
        };
        let resp = send_with_retry(transport, &http, config.max_retries, config.backoff_ms)?;
        let body = String::from_utf8(resp.body).map_err(|e| ExecError::Response(e.to_string()))?;
        Ok((Value::Map(BTreeMap::from([("body".to_owned(), Value::from(body))])), Usage::default()))
    })?;
    let body = response
        .as_map()
        .and_then(|m| m.get("body"))
        .and_then(Value::as_str)
        .ok_or_else(|| ExecError::Response("fixture response lacks `body`".into()))?;
    parse_atom_feed(body)
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// De-duplicates by arXiv id (first wins) and keeps records whose title or
/// abstract contains at least one topic token as a whole word, ignoring case.
/// Survivors go to `artifacts.search_and_extract`.
pub fn extract_abstracts(records: &[PaperRecord], topic: &str) -> Delta {
    let wanted: BTreeSet<String> = tokens(topic).collect();
    let mut seen = BTreeSet::new();
    let survivors: Vec<Value> = records
        .iter()
        .filter(|r| seen.insert(r.arxiv_id.clone()))
        .filter(|r| {
            let text = format!("{} {}", r.title, r.abstract_text);
            let hit = tokens(&text).any(|t| wanted.contains(&t));
            hit
        })
        .map(PaperRecord::to_value)
        .collect();
    Delta::default().set(KeyPath::new([ARTIFACTS, SEARCH_AND_EXTRACT]), Value::List(survivors))
}

fn tool_message(step: &str, content: String) -> Value {
    Value::Map(BTreeMap::from([
        ("role".to_owned(), Value::from("tool")),
        ("name".to_owned(), Value::from(step)),
        ("content".to_owned(), Value::from(content)),
    ]))
}

/// Params: `query` (defaults to the state topic), `max_results` (10),
/// `extract` (true), `topic` (defaults to the query).
pub struct ArxivSearchExecutor {
    config: ArxivConfig,
    fixtures: Arc<FixtureStore>,
    transport: Arc<dyn Transport>,
}

impl ArxivSearchExecutor {
    pub fn new(config: ArxivConfig, fixtures: Arc<FixtureStore>, transport: Arc<dyn Transport>) -> Self {
        ArxivSearchExecutor { config, fixtures, transport }
    }
}

impl Executor for ArxivSearchExecutor {
    fn execute(&self, ctx: &StepContext<'_>, state: &StateDoc, params: &Params) -> Result<StepOutcome, ExecError> {
        let query = match param_str(params, "query")? {
            Some(q) => q.to_owned(),
            None => state_topic(state)
                .ok_or_else(|| ExecError::InvalidParams("no `query` param and no env.topic/env.task".into()))?
                .to_owned(),
        };
        let max_results = param_u64(params, "max_results")?.unwrap_or(10);
        let records = arxiv_search(&self.config, &query, max_results, &self.fixtures, self.transport.as_ref())?;
        let delta = if param_bool(params, "extract")?.unwrap_or(true) {
            let topic = param_str(params, "topic")?.unwrap_or(&query);
            extract_abstracts(&records, topic)
        } else {
            let list = Value::List(records.iter().map(PaperRecord::to_value).collect());
            Delta::default().set(KeyPath::new([ARTIFACTS, ctx.step]), list)
        };
        let kept = delta.set[0].1.as_list().map_or(0, Vec::len);
        let note = format!("arXiv query `{query}`: {} retrieved, {kept} kept", records.len());
        let delta = delta.append(KeyPath::new([MESSAGES]), tool_message(ctx.step, note));
        Ok(StepOutcome::ok(delta, 0, 0))
    }

    fn is_replayable(&self) -> bool {
        self.fixtures.mode() == FixtureMode::Replay
    }
}

/// Runs [`extract_abstracts`] over raw records stored at
/// `artifacts.<source>`. Params: `source` (required), `topic`.
pub struct ExtractExecutor;

impl Executor for ExtractExecutor {
    fn execute(&self, ctx: &StepContext<'_>, state: &StateDoc, params: &Params) -> Result<StepOutcome, ExecError> {
        let source = param_str(params, "source")?
            .ok_or_else(|| ExecError::InvalidParams("`source` is required".into()))?;
        let raw = state
            .get(&KeyPath::new([ARTIFACTS, source]))
            .and_then(Value::as_list)
            .ok_or_else(|| ExecError::InvalidParams(format!("artifacts.{source} is not a list of records")))?;
        let records = raw
            .iter()
            .map(|v| PaperRecord::from_value(v).ok_or_else(|| ExecError::InvalidParams(format!("malformed record in artifacts.{source}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let topic = match param_str(params, "topic")? {
            Some(t) => t,
            None => state_topic(state).unwrap_or(""),
        };
        let delta = extract_abstracts(&records, topic);
        let kept = delta.set[0].1.as_list().map_or(0, Vec::len);
        let delta = delta.append(
            KeyPath::new([MESSAGES]),
            tool_message(ctx.step, format!("extracted {kept} of {} records", records.len())),
        );
        Ok(StepOutcome::ok(delta, 0, 0))
    }
}
