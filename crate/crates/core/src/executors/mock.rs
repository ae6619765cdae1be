use std::collections::HashMap;
use std::sync::Mutex;

use crate::state::{self, sha256_hex, Delta, KeyPath, StateDoc, Value, ARTIFACTS, MESSAGES};

use super::{param_bool, param_str, param_u64, ExecError, Executor, Params, StepContext, StepOutcome};

pub const DEFAULT_BASE_TOKENS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockParams {
    pub option_label: String,
    pub base_tokens: u64,
    /// Drop the state-size term from `tokens_in` so every call costs the same.
    pub constant_cost: bool,
    pub fail: bool,
    /// With `fail` set: fail this many times, then succeed. `None` fails always.
    pub fail_times: Option<u64>,
}

impl MockParams {
    pub fn from_params(params: &Params, default_label: &str) -> Result<Self, ExecError> {
        Ok(MockParams {
            option_label: param_str(params, "option_label")?.unwrap_or(default_label).to_owned(),
            base_tokens: param_u64(params, "base_tokens")?.unwrap_or(DEFAULT_BASE_TOKENS),
            constant_cost: param_bool(params, "constant_cost")?.unwrap_or(false),
            fail: param_bool(params, "fail")?.unwrap_or(false),
            fail_times: param_u64(params, "fail_times")?,
        })
    }
}

/// Digest of the state hash followed by the option label.
pub fn mock_output(state_hash: &str, label: &str) -> String {
    let mut bytes = state_hash.as_bytes().to_vec();
    bytes.extend_from_slice(label.as_bytes());
    sha256_hex(&bytes)
}

/// The mock's successful outcome for `state`, ignoring failure settings.
///
/// Writes the output digest to `artifacts.<step>` and appends an assistant
/// message carrying it. `tokens_in = base + canonical_len / 100` unless
/// `constant_cost`; `tokens_out = base`.
pub fn mock_execute(step: &str, state: &StateDoc, params: &MockParams) -> Result<StepOutcome, ExecError> {
    let canonical = state::canonical_serialize(state).map_err(|e| ExecError::InvalidParams(e.to_string()))?;
    let output = mock_output(&sha256_hex(&canonical), &params.option_label);
    let tokens_in = if params.constant_cost {
        params.base_tokens
    } else {
        params.base_tokens + canonical.len() as u64 / 100
    };
    let message: Value = [
        ("role".to_owned(), Value::from("assistant")),
        ("name".to_owned(), Value::from(step)),
        ("content".to_owned(), Value::from(output.clone())),
    ]
    .into_iter()
    .collect::<std::collections::BTreeMap<_, _>>()
    .into();
    let delta = Delta::default()
        .set(KeyPath::new([ARTIFACTS, step]), output)
        .append(KeyPath::new([MESSAGES]), message);
    Ok(StepOutcome::ok(delta, tokens_in, params.base_tokens))
}

/// Deterministic stand-in for model and tool calls.
///
/// Failure counting is per (step, label, input state), so in a sweep each
/// tree node sees its own `fail_times` budget.
#[derive(Debug, Default)]
pub struct MockExecutor {
    attempts: Mutex<HashMap<(String, String, String), u64>>,
}

impl MockExecutor {
    pub fn new() -> Self {
        MockExecutor::default()
    }
}

impl Executor for MockExecutor {
    fn execute(&self, ctx: &StepContext<'_>, state: &StateDoc, params: &Params) -> Result<StepOutcome, ExecError> {
        let params = MockParams::from_params(params, ctx.option)?;
        if params.fail {
            let key = (ctx.step.to_owned(), params.option_label.clone(), ctx.state_hash.to_owned());
            let mut attempts = self.attempts.lock().expect("mock attempt counter poisoned");
            let seen = attempts.entry(key).or_insert(0);
            *seen += 1;
            if params.fail_times.is_none_or(|limit| *seen <= limit) {
                return Ok(StepOutcome::failed(format!(
                    "mock `{}` failed (attempt {seen})",
                    params.option_label
                )));
            }
        }
        mock_execute(ctx.step, state, &params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(option: &'a str, hash: &'a str) -> StepContext<'a> {
        StepContext { step_index: 0, step: "intro", option, state_hash: hash }
    }

    fn params(json: &str) -> Params {
        match state::parse(json.as_bytes()).unwrap().into() {
            Value::Map(m) => m,
            _ => unreachable!(),
        }
    }

    #[test]
    fn deterministic() {
        let state = StateDoc::with_reserved_sections();
        let hash = state.hash().unwrap();
        let exec = MockExecutor::new();
        let a = exec.execute(&ctx("A", &hash), &state, &Params::new()).unwrap();
        let b = exec.execute(&ctx("A", &hash), &state, &Params::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_is_digest_of_hash_and_label() {
        let state = StateDoc::new();
        let p = MockParams::from_params(&Params::new(), "A").unwrap();
        let out = mock_execute("s", &state, &p).unwrap();
        // sha256 over "44136fa3...ff8a" ++ "A", computed independently.
        let expected = sha256_hex(b"44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8aA");
        assert_eq!(out.delta().set[0].1, Value::from(expected));
    }

    #[test]
    fn labels_give_different_outputs() {
        let state = StateDoc::with_reserved_sections();
        let a = mock_execute("s", &state, &MockParams::from_params(&Params::new(), "A").unwrap()).unwrap();
        let b = mock_execute("s", &state, &MockParams::from_params(&Params::new(), "B").unwrap()).unwrap();
        assert_ne!(a.delta().set[0].1, b.delta().set[0].1);
    }

    #[test]
    fn token_formula() {
        let mut state = StateDoc::new();
        state.insert("k", "x".repeat(300));
        let len = state.canonical_bytes().unwrap().len() as u64;
        assert_eq!(len, 308);
        let out = mock_execute("s", &state, &MockParams::from_params(&params(r#"{"base_tokens":7}"#), "A").unwrap()).unwrap();
        assert_eq!((out.tokens_in, out.tokens_out), (7 + 3, 7));
        let flat = MockParams::from_params(&params(r#"{"base_tokens":7,"constant_cost":true}"#), "A").unwrap();
        let out = mock_execute("s", &state, &flat).unwrap();
        assert_eq!((out.tokens_in, out.tokens_out), (7, 7));
    }

    #[test]
    fn fail_times_then_ok() {
        let state = StateDoc::new();
        let exec = MockExecutor::new();
        let p = params(r#"{"fail":true,"fail_times":1}"#);
        let first = exec.execute(&ctx("A", "h"), &state, &p).unwrap();
        let second = exec.execute(&ctx("A", "h"), &state, &p).unwrap();
        assert!(!first.is_ok());
        assert!(first.delta().is_empty());
        assert!(second.is_ok());
    }

    #[test]
    fn fail_without_limit_always_fails() {
        let exec = MockExecutor::new();
        let p = params(r#"{"fail":true}"#);
        for _ in 0..3 {
            assert!(!exec.execute(&ctx("A", "h"), &StateDoc::new(), &p).unwrap().is_ok());
        }
    }

    #[test]
    fn bad_params_rejected() {
        let err = MockParams::from_params(&params(r#"{"base_tokens":"x"}"#), "A").unwrap_err();
        assert!(matches!(err, ExecError::InvalidParams(_)));
    }
}
