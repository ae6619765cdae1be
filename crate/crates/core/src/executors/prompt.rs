use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Appended to every chain-of-thought prompt.
pub const COT_CLAUSE: &str =
    "Let's think step by step. Lay out your reasoning before giving the final answer.";

const DEFAULT_SYSTEM: &str = "You are a careful research assistant writing sections of a literature report.";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("unbound placeholder: {0}")]
    Unbound(String),
    #[error("few-shot template `{0}` needs at least one example pair")]
    NoExamples(String),
    #[error("unknown prompt kind `{0}`")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    Cot,
    FewShot,
}

impl FromStr for PromptKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, PromptError> {
        match s {
            "cot" => Ok(PromptKind::Cot),
            "few-shot" => Ok(PromptKind::FewShot),
            other => Err(PromptError::UnknownKind(other.to_owned())),
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptKind::Cot => "cot",
            PromptKind::FewShot => "few-shot",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Message { role: role.to_owned(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub kind: PromptKind,
    pub system: String,
    pub body: String,
    pub examples: Vec<(String, String)>,
}

impl PromptTemplate {
    pub fn cot(id: impl Into<String>, body: impl Into<String>) -> Self {
        PromptTemplate {
            id: id.into(),
            kind: PromptKind::Cot,
            system: DEFAULT_SYSTEM.to_owned(),
            body: body.into(),
            examples: Vec::new(),
        }
    }

    pub fn few_shot(
        id: impl Into<String>,
        body: impl Into<String>,
        examples: Vec<(String, String)>,
    ) -> Result<Self, PromptError> {
        let id = id.into();
        if examples.is_empty() {
            return Err(PromptError::NoExamples(id));
        }
        Ok(PromptTemplate { id, kind: PromptKind::FewShot, system: DEFAULT_SYSTEM.to_owned(), body: body.into(), examples })
    }

    /// Section-writing template used by the `llm-chat` executor.
    pub fn section(kind: PromptKind) -> Self {
        let body = "{instruction}\n\nTopic: {topic}\n\nPaper abstracts:\n{abstracts}\n\nSections written so far:\n{context}";
        match kind {
            PromptKind::Cot => PromptTemplate::cot("section-cot", body),
            PromptKind::FewShot => PromptTemplate::few_shot("section-few-shot", body, default_examples())
                .expect("default examples are non-empty"),
        }
    }
}

fn default_examples() -> Vec<(String, String)> {
    vec![
        (
            "Write an introduction for a report on retrieval-augmented generation.".to_owned(),
            "Retrieval-augmented generation couples a language model with a document index so that \
             answers are grounded in retrieved evidence. This report surveys recent work on how \
             retrieval quality, context length and citation behaviour interact."
                .to_owned(),
        ),
        (
            "Write a discussion for a report on code-generation benchmarks.".to_owned(),
            "Across the surveyed benchmarks, pass rates rise with model scale but fall sharply on \
             repository-level tasks. Contamination and weak test oracles remain the main threats to \
             validity, suggesting that execution-based, freshly collected suites are needed."
                .to_owned(),
        ),
    ]
}

/// Substitutes `{name}` placeholders (name = `[A-Za-z0-9_]+`). Other braces
/// pass through untouched.
fn substitute(text: &str, vars: &BTreeMap<String, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            let name = &after[..name_len];
            let value = vars.get(name).ok_or_else(|| PromptError::Unbound(name.to_owned()))?;
            out.push_str(value);
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders a template into a system + user message pair.
///
/// Few-shot templates list their example pairs, in order, ahead of the task;
/// chain-of-thought templates end with [`COT_CLAUSE`].
pub fn render_prompt(template: &PromptTemplate, vars: &BTreeMap<String, String>) -> Result<Vec<Message>, PromptError> {
    let task = substitute(&template.body, vars)?;
    let user = match template.kind {
        PromptKind::Cot => format!("{task}\n\n{COT_CLAUSE}"),
        PromptKind::FewShot => {
            if template.examples.is_empty() {
                return Err(PromptError::NoExamples(template.id.clone()));
            }
            let mut text = String::from("Here are examples of the expected output.\n\n");
            for (i, (input, output)) in template.examples.iter().enumerate() {
                text.push_str(&format!("Example {}\nInput: {input}\nOutput: {output}\n\n", i + 1));
            }
            text.push_str("Now complete the following task in the same style.\n\n");
            text.push_str(&task);
            text
        }
    };
    Ok(vec![Message::new("system", template.system.clone()), Message::new("user", user)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn cot_has_clause_and_topic() {
        let t = PromptTemplate::cot("t", "Write about {topic}.");
        let msgs = render_prompt(&t, &vars(&[("topic", "multi-agent systems")])).unwrap();
        assert_eq!(msgs[0].role, "system");
        assert!(msgs[1].content.contains("multi-agent systems"));
        assert!(msgs[1].content.ends_with(COT_CLAUSE));
    }

    #[test]
    fn few_shot_examples_in_order() {
        let t = PromptTemplate::few_shot(
            "t",
            "Task: {topic}",
            vec![("in1".into(), "out1".into()), ("in2".into(), "out2".into())],
        )
        .unwrap();
        let text = &render_prompt(&t, &vars(&[("topic", "x")])).unwrap()[1].content;
        let (i1, o1, i2, o2, task) = (
            text.find("in1").unwrap(),
            text.find("out1").unwrap(),
            text.find("in2").unwrap(),
            text.find("out2").unwrap(),
            text.find("Task: x").unwrap(),
        );
        assert!(i1 < o1 && o1 < i2 && i2 < o2 && o2 < task);
    }

    #[test]
    fn few_shot_requires_examples() {
        assert!(matches!(PromptTemplate::few_shot("t", "b", vec![]), Err(PromptError::NoExamples(_))));
    }

    #[test]
    fn unbound_placeholder_named() {
        let t = PromptTemplate::cot("t", "Summarise {abstracts}");
        let err = render_prompt(&t, &BTreeMap::new()).unwrap_err();
        assert_eq!(err.to_string(), "unbound placeholder: abstracts");
    }

    #[test]
    fn literal_braces_pass_through() {
        let t = PromptTemplate::cot("t", "json {\"a\": 1} and {} and {x");
        let text = &render_prompt(&t, &BTreeMap::new()).unwrap()[1].content;
        assert!(text.starts_with("json {\"a\": 1} and {} and {x"));
    }

    #[test]
    fn kinds_render_differently() {
        let v = vars(&[
            ("instruction", "Write an introduction."),
            ("topic", "agents"),
            ("abstracts", "a"),
            ("context", ""),
        ]);
        let cot = render_prompt(&PromptTemplate::section(PromptKind::Cot), &v).unwrap();
        let few = render_prompt(&PromptTemplate::section(PromptKind::FewShot), &v).unwrap();
        assert_ne!(cot, few);
    }
}
