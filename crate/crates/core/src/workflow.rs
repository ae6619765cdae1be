//! Declarative workflow files.
//!
//! ```json
//! {"name": "...", "initial": {...}, "steps": [{"name": "...", "options": [{"name": "...", "executor": "mock", "params": {}}]}]}
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::executors::{ExecError, ExecutorId, Params, Registry};
use crate::state::StateDoc;

#[derive(Debug, thiserror::Error)]
pub enum WorkflowError {
    #[error("workflow parse error: {0}")]
    Parse(String),
    #[error("workflow `{0}` has no steps")]
    EmptySteps(String),
    #[error("step `{0}` has no options")]
    EmptyOptions(String),
    #[error("duplicate step name `{0}`")]
    DuplicateStep(String),
    #[error("duplicate option `{option}` in step `{step}`")]
    DuplicateOption { step: String, option: String },
    #[error("step `{step}` option `{option}`: {source}")]
    Executor {
        step: String,
        option: String,
        #[source]
        source: ExecError,
    },
    #[error("step `{step}` option `{option}`: executor `{executor}` is not registered")]
    Unregistered { step: String, option: String, executor: ExecutorId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptionSpec {
    pub name: String,
    pub executor: ExecutorId,
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSpec {
    pub name: String,
    pub options: Vec<OptionSpec>,
}

impl StepSpec {
    pub fn x(&self) -> usize {
        self.options.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowSpec {
    pub name: String,
    /// Root state; reserved sections are always present.
    pub initial: StateDoc,
    pub steps: Vec<StepSpec>,
}

impl WorkflowSpec {
    /// Number of steps.
    pub fn n(&self) -> usize {
        self.steps.len()
    }

    /// Options per step, in order.
    pub fn option_counts(&self) -> Vec<usize> {
        self.steps.iter().map(StepSpec::x).collect()
    }

    /// A mock-only workflow with the given option counts, mainly for sweeps
    /// over arbitrary tree shapes.
    pub fn mock_shape(x: &[usize], params: Params) -> WorkflowSpec {
        let mut initial = StateDoc::with_reserved_sections();
        initial.set(&"env.task".into(), "mock workflow".into());
        WorkflowSpec {
            name: format!("mock-{}", x.iter().map(usize::to_string).collect::<Vec<_>>().join("x")),
            initial,
            steps: x
                .iter()
                .enumerate()
                .map(|(i, &xi)| StepSpec {
                    name: format!("step{}", i + 1),
                    options: (0..xi)
                        .map(|k| OptionSpec { name: format!("opt{k}"), executor: ExecutorId::Mock, params: params.clone() })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Structural checks, plus executor registration when a registry is given.
    pub fn validate(&self, registry: Option<&Registry>) -> Result<(), WorkflowError> {
        if self.steps.is_empty() {
            return Err(WorkflowError::EmptySteps(self.name.clone()));
        }
        let mut step_names = BTreeSet::new();
        for step in &self.steps {
            if !step_names.insert(step.name.as_str()) {
                return Err(WorkflowError::DuplicateStep(step.name.clone()));
            }
            if step.options.is_empty() {
                return Err(WorkflowError::EmptyOptions(step.name.clone()));
            }
            let mut option_names = BTreeSet::new();
            for option in &step.options {
                if !option_names.insert(option.name.as_str()) {
                    return Err(WorkflowError::DuplicateOption { step: step.name.clone(), option: option.name.clone() });
                }
                if registry.is_some_and(|r| !r.contains(option.executor)) {
                    return Err(WorkflowError::Unregistered {
                        step: step.name.clone(),
                        option: option.name.clone(),
                        executor: option.executor,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawWorkflow {
    name: String,
    #[serde(default)]
    initial: Option<StateDoc>,
    steps: Vec<RawStep>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    name: String,
    options: Vec<RawOption>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawOption {
    name: String,
    executor: String,
    #[serde(default)]
    params: Params,
}

/// Parses and validates a workflow file.
pub fn load_workflow(bytes: &[u8], registry: Option<&Registry>) -> Result<WorkflowSpec, WorkflowError> {
    let raw: RawWorkflow = serde_json::from_slice(bytes).map_err(|e| WorkflowError::Parse(e.to_string()))?;
    let mut initial = raw.initial.unwrap_or_default();
    initial.ensure_reserved_sections();
    let mut steps = Vec::with_capacity(raw.steps.len());
    for step in raw.steps {
        let mut options = Vec::with_capacity(step.options.len());
        for option in step.options {
            let executor = option.executor.parse().map_err(|source| WorkflowError::Executor {
                step: step.name.clone(),
                option: option.name.clone(),
                source,
            })?;
            options.push(OptionSpec { name: option.name, executor, params: option.params });
        }
        steps.push(StepSpec { name: step.name, options });
    }
    let spec = WorkflowSpec { name: raw.name, initial, steps };
    spec.validate(registry)?;
    Ok(spec)
}

/// Canonical JSON for a workflow; `load_workflow` reads it back unchanged.
pub fn workflow_to_json(spec: &WorkflowSpec) -> Vec<u8> {
    let raw = RawWorkflow {
        name: spec.name.clone(),
        initial: Some(spec.initial.clone()),
        steps: spec
            .steps
            .iter()
            .map(|s| RawStep {
                name: s.name.clone(),
                options: s
                    .options
                    .iter()
                    .map(|o| RawOption { name: o.name.clone(), executor: o.executor.to_string(), params: o.params.clone() })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_value(&raw).expect("workflow serializes");
    crate::state::Value::from(json).to_canonical().expect("workflow values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXPERIMENT: &str = r#"{
  "name": "report",
  "initial": {"env": {"task": "multi-agent systems"}},
  "steps": [
    {"name": "search_and_extract", "options": [{"name": "arxiv", "executor": "mock"}]},
    {"name": "introduction", "options": [{"name": "cot", "executor": "mock"}, {"name": "few-shot", "executor": "mock"}]},
    {"name": "analysis", "options": [{"name": "cot", "executor": "mock"}, {"name": "few-shot", "executor": "mock"}]},
    {"name": "discussion", "options": [{"name": "cot", "executor": "mock"}, {"name": "few-shot", "executor": "mock"}]}
  ]
}"#;

    #[test]
    fn experiment_shape() {
        let spec = load_workflow(EXPERIMENT.as_bytes(), Some(&Registry::mock())).unwrap();
        assert_eq!(spec.n(), 4);
        assert_eq!(spec.option_counts(), [1, 2, 2, 2]);
        assert_eq!(spec.initial.get(&"env.task".into()).and_then(|v| v.as_str()), Some("multi-agent systems"));
        assert!(spec.initial.get(&"messages".into()).is_some());
    }

    #[test]
    fn minimal() {
        let spec = load_workflow(
            br#"{"name":"m","steps":[{"name":"s","options":[{"name":"o","executor":"mock"}]}]}"#,
            None,
        )
        .unwrap();
        assert_eq!((spec.n(), spec.option_counts()), (1, vec![1]));
    }

    #[test]
    fn empty_options_rejected() {
        let err = load_workflow(br#"{"name":"m","steps":[{"name":"s","options":[]}]}"#, None).unwrap_err();
        assert!(matches!(err, WorkflowError::EmptyOptions(ref s) if s == "s"));
    }

    #[test]
    fn empty_steps_rejected() {
        let err = load_workflow(br#"{"name":"m","steps":[]}"#, None).unwrap_err();
        assert!(matches!(err, WorkflowError::EmptySteps(_)));
    }

    #[test]
    fn parse_error_has_line() {
        let err = load_workflow(b"{\n\"name\": \"m\",\n\"steps\": [,]\n}", None).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn duplicate_option_names_rejected() {
        let err = load_workflow(
            br#"{"name":"m","steps":[{"name":"s","options":[{"name":"o","executor":"mock"},{"name":"o","executor":"mock"}]}]}"#,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, WorkflowError::DuplicateOption { .. }));
    }

    #[test]
    fn executor_ids_checked() {
        let file = |exec: &str| {
            format!(r#"{{"name":"m","steps":[{{"name":"s","options":[{{"name":"o","executor":"{exec}"}}]}}]}}"#)
        };
        let err = load_workflow(file("gpt").as_bytes(), None).unwrap_err();
        assert!(err.to_string().contains("unknown executor"), "{err}");
        let err = load_workflow(file("llm-chat").as_bytes(), Some(&Registry::mock())).unwrap_err();
        assert!(matches!(err, WorkflowError::Unregistered { .. }));
        assert!(load_workflow(file("llm-chat").as_bytes(), None).is_ok());
    }

    #[test]
    fn json_round_trip() {
        let spec = load_workflow(EXPERIMENT.as_bytes(), None).unwrap();
        assert_eq!(load_workflow(&workflow_to_json(&spec), None).unwrap(), spec);
    }
}
