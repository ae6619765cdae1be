//! Executes workflow paths with a checkpoint after every step, resumes from
//! any checkpoint, recovers from failed steps and replays recorded paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::executors::{ExecError, Registry, StepContext, StepOutcome, StepStatus};
use crate::journal::{AttemptStatus, Journal, JournalRecord};
use crate::state::{sha256_hex, KeyPath, StateDoc, StateError, Value, TOOL_CALLS};
use crate::store::{BranchName, CheckpointId, CommitOptions, StepAccounting, Store, StoreError};
use crate::workflow::{StepSpec, WorkflowError, WorkflowSpec};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("expected {expected} choices for the remaining steps, got {got}")]
    ChoiceCount { expected: usize, got: usize },
    /// `step` is 1-based.
    #[error("option {option} out of range at step {step}")]
    OptionOutOfRange { option: usize, step: usize },
    #[error("checkpoint {checkpoint} is at step {step_index}, beyond the workflow's {n} steps")]
    StartBeyondEnd { checkpoint: CheckpointId, step_index: u32, n: usize },
    #[error("step `{step}` option `{option}`: {source}")]
    Exec {
        step: String,
        option: String,
        #[source]
        source: ExecError,
    },
    #[error("journal: {0}")]
    Journal(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    State(#[from] StateError),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecoveryMode {
    #[default]
    None,
    NextOption,
    RetryThenNext,
}

impl fmt::Display for RecoveryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecoveryMode::None => "none",
            RecoveryMode::NextOption => "next-option",
            RecoveryMode::RetryThenNext => "retry-then-next",
        })
    }
}

impl FromStr for RecoveryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(RecoveryMode::None),
            "next-option" => Ok(RecoveryMode::NextOption),
            "retry-then-next" => Ok(RecoveryMode::RetryThenNext),
            other => Err(format!("unknown recovery mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecoveryPolicy {
    mode: RecoveryMode,
    max_retries: u32,
}

impl RecoveryPolicy {
    pub fn new(mode: RecoveryMode, max_retries: u32) -> Result<Self, String> {
        if mode == RecoveryMode::None && max_retries != 0 {
            return Err("max_retries must be 0 when recovery mode is none".into());
        }
        Ok(RecoveryPolicy { mode, max_retries })
    }

    pub fn none() -> Self {
        RecoveryPolicy::default()
    }

    pub fn next_option() -> Self {
        RecoveryPolicy { mode: RecoveryMode::NextOption, max_retries: 0 }
    }

    pub fn retry_then_next(max_retries: u32) -> Self {
        RecoveryPolicy { mode: RecoveryMode::RetryThenNext, max_retries }
    }

    pub fn mode(&self) -> RecoveryMode {
        self.mode
    }

    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryAction {
    Retry,
    TryOption(usize),
    Abort,
}

/// Failures so far at one step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttemptLog {
    pub current: usize,
    pub failures_on_current: u32,
    pub tried: BTreeSet<usize>,
}

/// What to do after the attempt recorded in `log` failed on a step with
/// `option_count` options. Untried options are visited in ascending order,
/// starting after the current one and wrapping around.
pub fn recover(policy: &RecoveryPolicy, option_count: usize, log: &AttemptLog) -> RecoveryAction {
    match policy.mode {
        RecoveryMode::None => return RecoveryAction::Abort,
        RecoveryMode::RetryThenNext if log.failures_on_current <= policy.max_retries => {
            return RecoveryAction::Retry
        }
        _ => {}
    }
    (1..option_count)
        .map(|offset| (log.current + offset) % option_count)
        .find(|k| !log.tried.contains(k))
        .map_or(RecoveryAction::Abort, RecoveryAction::TryOption)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub branch: BranchName,
    pub run_id: String,
}

/// One committed step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based; equals the checkpoint's step_index.
    pub step_index: usize,
    pub step: String,
    pub option: usize,
    pub checkpoint: CheckpointId,
    pub accounting: StepAccounting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepFailure {
    /// 1-based.
    pub step_index: usize,
    pub step: String,
    pub reason: String,
    pub last_good: CheckpointId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub start: CheckpointId,
    /// Last checkpoint written, or `start` if nothing was committed.
    pub final_checkpoint: CheckpointId,
    pub final_state: StateDoc,
    /// Options taken on the executed steps, after any recovery.
    pub choices_taken: Vec<usize>,
    pub steps: Vec<StepRecord>,
    /// Executor invocations, failed ones included.
    pub steps_executed: u64,
    /// Invocations per workflow step (0-based), failed ones included.
    pub per_step_attempts: Vec<u64>,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_ms: u64,
    pub failure: Option<StepFailure>,
}

impl RunResult {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayStatus {
    Match,
    Mismatch,
    CorruptBlob,
    Unverifiable,
    Failed,
}

impl fmt::Display for ReplayStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplayStatus::Match => "match",
            ReplayStatus::Mismatch => "mismatch",
            ReplayStatus::CorruptBlob => "corrupt-blob",
            ReplayStatus::Unverifiable => "unverifiable",
            ReplayStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReplay {
    pub step_index: u32,
    pub checkpoint: CheckpointId,
    pub stored_hash: String,
    pub replayed_hash: Option<String>,
    pub status: ReplayStatus,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub leaf: CheckpointId,
    pub layers: Vec<LayerReplay>,
}

impl ReplayReport {
    pub fn all_match(&self) -> bool {
        self.layers.iter().all(|l| l.status == ReplayStatus::Match)
    }

    /// First layer that did not match.
    pub fn first_problem(&self) -> Option<&LayerReplay> {
        self.layers.iter().find(|l| l.status != ReplayStatus::Match)
    }
}

/// Runs one executor, wrapping errors with step and option context.
pub fn execute_step(
    registry: &Registry,
    state: &StateDoc,
    step_index: usize,
    step: &StepSpec,
    option_index: usize,
) -> Result<StepOutcome> {
    let option = step
        .options
        .get(option_index)
        .ok_or(EngineError::OptionOutOfRange { option: option_index, step: step_index + 1 })?;
    let wrap = |source| EngineError::Exec { step: step.name.clone(), option: option.name.clone(), source };
    let executor = registry
        .get(option.executor)
        .ok_or_else(|| wrap(ExecError::UnknownExecutor(option.executor.to_string())))?;
    let state_hash = state.hash()?;
    let ctx = StepContext { step_index, step: &step.name, option: &option.name, state_hash: &state_hash };
    executor.execute(&ctx, state, &option.params).map_err(wrap)
}

/// State after a successful step: the executor's delta plus a `tool_calls`
/// record linking input and output digests.
fn apply_outcome(state: &StateDoc, step: &StepSpec, option_index: usize, outcome: &StepOutcome) -> Result<StateDoc> {
    let option = &step.options[option_index];
    let delta = outcome.delta();
    let delta_value = Value::Map(BTreeMap::from([
        ("append".to_owned(), pairs_value(&delta.append)),
        ("set".to_owned(), pairs_value(&delta.set)),
    ]));
    let record = Value::Map(BTreeMap::from([
        ("tool".to_owned(), Value::from(option.executor.as_str())),
        ("step".to_owned(), Value::from(step.name.as_str())),
        ("option".to_owned(), Value::from(option.name.as_str())),
        ("input_digest".to_owned(), Value::from(state.hash()?)),
        ("output_digest".to_owned(), Value::from(sha256_hex(&delta_value.to_canonical()?))),
        ("status".to_owned(), Value::from("ok")),
    ]));
    let mut next = state.clone();
    delta.apply_to(&mut next);
    next.append(&KeyPath::new([TOOL_CALLS]), record);
    Ok(next)
}

fn pairs_value(pairs: &[(KeyPath, Value)]) -> Value {
    Value::List(
        pairs
            .iter()
            .map(|(p, v)| Value::List(vec![Value::from(p.to_string()), v.clone()]))
            .collect(),
    )
}

/// Workflow runner bound to a store and executor registry.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    store: &'a Store,
    registry: &'a Registry,
    journal: Option<&'a Journal>,
}

impl<'a> Engine<'a> {
    pub fn new(store: &'a Store, registry: &'a Registry) -> Self {
        Engine { store, registry, journal: None }
    }

    pub fn with_journal(mut self, journal: &'a Journal) -> Self {
        self.journal = Some(journal);
        self
    }

    pub fn store(&self) -> &'a Store {
        self.store
    }

    pub fn registry(&self) -> &'a Registry {
        self.registry
    }

    /// Commits the workflow's initial state as a root on `branch`.
    pub fn commit_root(&self, spec: &WorkflowSpec, branch: &BranchName) -> Result<CheckpointId> {
        let mut initial = spec.initial.clone();
        initial.ensure_reserved_sections();
        let mut opts = CommitOptions::message(format!("root: {}", spec.name));
        opts.metadata.insert("workflow".into(), spec.name.clone());
        Ok(self.store.commit(None, &initial, branch, opts)?)
    }

    /// Executes the steps after `start` (or after a fresh root) with one
    /// choice per remaining step, committing a checkpoint per successful step.
    ///
    /// A step failure that the policy cannot recover from ends the run with
    /// `failure` set; nothing is committed for the failed step.
    pub fn run_path(
        &self,
        spec: &WorkflowSpec,
        choices: &[usize],
        start: Option<&CheckpointId>,
        policy: &RecoveryPolicy,
        opts: &RunOptions,
    ) -> Result<RunResult> {
        spec.validate(Some(self.registry))?;
        let first = match start {
            Some(id) => {
                let cp = self.store.checkpoint(id)?;
                if cp.step_index as usize > spec.n() {
                    return Err(EngineError::StartBeyondEnd { checkpoint: id.clone(), step_index: cp.step_index, n: spec.n() });
                }
                cp.step_index as usize
            }
            None => 0,
        };
        let remaining = spec.n() - first;
        if choices.len() != remaining {
            return Err(EngineError::ChoiceCount { expected: remaining, got: choices.len() });
        }
        for (offset, &choice) in choices.iter().enumerate() {
            let step = first + offset;
            if choice >= spec.steps[step].x() {
                return Err(EngineError::OptionOutOfRange { option: choice, step: step + 1 });
            }
        }

        let start_id = match start {
            Some(id) => id.clone(),
            None => self.commit_root(spec, &opts.branch)?,
        };
        self.run_tail(spec, &start_id, first, choices, policy, opts)
    }

    /// Executes exactly one step after `parent` with the given option and no
    /// recovery: one edge of the option tree.
    pub fn run_edge(
        &self,
        spec: &WorkflowSpec,
        parent: &CheckpointId,
        choice: usize,
        opts: &RunOptions,
    ) -> Result<RunResult> {
        let index = self.store.checkpoint(parent)?.step_index as usize;
        if index >= spec.n() {
            return Err(EngineError::StartBeyondEnd { checkpoint: parent.clone(), step_index: index as u32, n: spec.n() });
        }
        if choice >= spec.steps[index].x() {
            return Err(EngineError::OptionOutOfRange { option: choice, step: index + 1 });
        }
        self.run_tail(spec, parent, index, &[choice], &RecoveryPolicy::none(), opts)
    }

    fn run_tail(
        &self,
        spec: &WorkflowSpec,
        start_id: &CheckpointId,
        first: usize,
        choices: &[usize],
        policy: &RecoveryPolicy,
        opts: &RunOptions,
    ) -> Result<RunResult> {
        let mut state = self.store.checkout(start_id)?;
        if self.store.branch_head(&opts.branch)?.is_none() {
            self.store.create_branch(&opts.branch, start_id)?;
        }
        let mut result = RunResult {
            start: start_id.clone(),
            final_checkpoint: start_id.clone(),
            final_state: StateDoc::new(),
            choices_taken: Vec::with_capacity(choices.len()),
            steps: Vec::with_capacity(choices.len()),
            steps_executed: 0,
            per_step_attempts: vec![0; spec.n()],
            tokens_in: 0,
            tokens_out: 0,
            wall_ms: 0,
            failure: None,
        };
        let mut head = start_id.clone();
        for (offset, &choice) in choices.iter().enumerate() {
            let index = first + offset;
            let step = &spec.steps[index];
            match self.run_step(spec, index, choice, &head, &state, policy, opts, &mut result)? {
                Ok((id, next)) => {
                    head = id;
                    state = next;
                }
                Err(reason) => {
                    result.failure = Some(StepFailure {
                        step_index: index + 1,
                        step: step.name.clone(),
                        reason,
                        last_good: head.clone(),
                    });
                    break;
                }
            }
        }
        result.final_checkpoint = head;
        result.final_state = state;
        Ok(result)
    }

    /// Attempts one step under `policy`. The inner error is the final
    /// failure reason once recovery is exhausted.
    #[allow(clippy::too_many_arguments)]
    fn run_step(
        &self,
        spec: &WorkflowSpec,
        index: usize,
        choice: usize,
        parent: &CheckpointId,
        parent_state: &StateDoc,
        policy: &RecoveryPolicy,
        opts: &RunOptions,
        result: &mut RunResult,
    ) -> Result<std::result::Result<(CheckpointId, StateDoc), String>> {
        let step = &spec.steps[index];
        let clock = self.store.clock();
        let mut log = AttemptLog { current: choice, ..Default::default() };
        let mut accounting = StepAccounting::default();
        let mut state = parent_state.clone();
        loop {
            let option = &step.options[log.current];
            let watch = clock.stopwatch();
            let outcome = match execute_step(self.registry, &state, index, step, log.current) {
                Ok(outcome) => outcome,
                Err(EngineError::Exec { source, .. }) => StepOutcome::failed(source.to_string()),
                Err(e) => return Err(e),
            };
            let wall_ms = outcome.wall_ms.max(watch.elapsed_ms());
            result.steps_executed += 1;
            result.per_step_attempts[index] += 1;
            result.tokens_in += outcome.tokens_in;
            result.tokens_out += outcome.tokens_out;
            result.wall_ms += wall_ms;
            accounting.attempts += 1;
            accounting.tokens_in += outcome.tokens_in;
            accounting.tokens_out += outcome.tokens_out;
            accounting.wall_ms += wall_ms;
            if let Some(journal) = self.journal {
                journal.append(JournalRecord {
                    ts: clock.now_ms(),
                    run_id: opts.run_id.clone(),
                    step: step.name.clone(),
                    option: option.name.clone(),
                    status: if outcome.is_ok() { AttemptStatus::Ok } else { AttemptStatus::Failed },
                    tokens_in: outcome.tokens_in,
                    tokens_out: outcome.tokens_out,
                    wall_ms,
                })?;
            }
            let reason = match &outcome.status {
                StepStatus::Ok => {
                    let next = apply_outcome(&state, step, log.current, &outcome)?;
                    let mut commit = CommitOptions::message(format!("{}: {}", step.name, option.name));
                    commit.option_taken = Some(log.current);
                    commit.accounting = Some(accounting);
                    commit.metadata.insert("step".into(), step.name.clone());
                    commit.metadata.insert("option".into(), option.name.clone());
                    let id = self.store.commit(Some(parent), &next, &opts.branch, commit)?;
                    result.choices_taken.push(log.current);
                    result.steps.push(StepRecord {
                        step_index: index + 1,
                        step: step.name.clone(),
                        option: log.current,
                        checkpoint: id.clone(),
                        accounting,
                    });
                    return Ok(Ok((id, next)));
                }
                StepStatus::Failed(reason) => reason.clone(),
            };
            log.failures_on_current += 1;
            log.tried.insert(log.current);
            match recover(policy, step.x(), &log) {
                RecoveryAction::Retry => {}
                RecoveryAction::TryOption(k) => {
                    log.current = k;
                    log.failures_on_current = 0;
                }
                RecoveryAction::Abort => return Ok(Err(reason)),
            }
            // Roll back to the last stable checkpoint before the next attempt.
            state = self.store.checkout(parent)?;
        }
    }

    /// Re-executes the option sequence recorded on the path to `leaf`,
    /// starting from the workflow's initial state, and compares each
    /// re-produced state hash with the stored one.
    pub fn replay(&self, leaf: &CheckpointId, spec: &WorkflowSpec) -> Result<ReplayReport> {
        let path = self.store.ancestry(leaf)?;
        let mut layers = Vec::with_capacity(path.len());
        let mut state = spec.initial.clone();
        state.ensure_reserved_sections();
        let mut broken = false;
        for id in &path {
            let cp = self.store.checkpoint(id)?;
            let mut layer = LayerReplay {
                step_index: cp.step_index,
                checkpoint: id.clone(),
                stored_hash: cp.state_hash.clone(),
                replayed_hash: None,
                status: ReplayStatus::Match,
                detail: None,
            };
            if broken {
                layer.status = ReplayStatus::Unverifiable;
                layer.detail = Some("an earlier layer could not be replayed".into());
                layers.push(layer);
                continue;
            }
            if cp.step_index > 0 {
                let index = cp.step_index as usize - 1;
                let replayed = match (spec.steps.get(index), cp.option_taken) {
                    (Some(step), Some(choice)) if choice < step.x() => {
                        let option = &step.options[choice];
                        match self.registry.get(option.executor) {
                            Some(executor) if executor.is_replayable() => {
                                match execute_step(self.registry, &state, index, step, choice) {
                                    Ok(outcome) if outcome.is_ok() => Ok(apply_outcome(&state, step, choice, &outcome)?),
                                    Ok(outcome) => Err((ReplayStatus::Failed, format!("{:?}", outcome.status))),
                                    Err(e) => Err((ReplayStatus::Failed, e.to_string())),
                                }
                            }
                            Some(_) => Err((
                                ReplayStatus::Unverifiable,
                                format!("executor `{}` is not deterministic and has no fixtures", option.executor),
                            )),
                            None => Err((ReplayStatus::Unverifiable, format!("executor `{}` not registered", option.executor))),
                        }
                    }
                    _ => Err((ReplayStatus::Unverifiable, "recorded option does not fit the workflow".into())),
                };
                match replayed {
                    Ok(next) => state = next,
                    Err((status, detail)) => {
                        layer.status = status;
                        layer.detail = Some(detail);
                        broken = true;
                        layers.push(layer);
                        continue;
                    }
                }
            }
            let hash = state.hash()?;
            if hash != cp.state_hash {
                layer.status = ReplayStatus::Mismatch;
                layer.detail = Some("re-produced state differs from the recorded one".into());
            } else if let Err(e) = self.store.checkout(id) {
                layer.status = ReplayStatus::CorruptBlob;
                layer.detail = Some(e.to_string());
            }
            layer.replayed_hash = Some(hash);
            layers.push(layer);
        }
        Ok(ReplayReport { leaf: leaf.clone(), layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Clock;
    use crate::executors::Params;

    fn policy_log(current: usize, failures: u32, tried: &[usize]) -> AttemptLog {
        AttemptLog { current, failures_on_current: failures, tried: tried.iter().copied().collect() }
    }

    #[test]
    fn none_always_aborts() {
        assert_eq!(recover(&RecoveryPolicy::none(), 3, &policy_log(0, 1, &[0])), RecoveryAction::Abort);
    }

    #[test]
    fn next_option_ascending_with_wrap() {
        let p = RecoveryPolicy::next_option();
        assert_eq!(recover(&p, 3, &policy_log(0, 1, &[0])), RecoveryAction::TryOption(1));
        assert_eq!(recover(&p, 3, &policy_log(1, 1, &[1])), RecoveryAction::TryOption(2));
        assert_eq!(recover(&p, 3, &policy_log(2, 1, &[1, 2])), RecoveryAction::TryOption(0));
        assert_eq!(recover(&p, 3, &policy_log(0, 1, &[0, 1, 2])), RecoveryAction::Abort);
        assert_eq!(recover(&p, 1, &policy_log(0, 1, &[0])), RecoveryAction::Abort);
    }

    #[test]
    fn retry_then_next_counts_retries() {
        let p = RecoveryPolicy::retry_then_next(1);
        assert_eq!(recover(&p, 2, &policy_log(0, 1, &[0])), RecoveryAction::Retry);
        assert_eq!(recover(&p, 2, &policy_log(0, 2, &[0])), RecoveryAction::TryOption(1));
    }

    #[test]
    fn none_forbids_retries() {
        assert!(RecoveryPolicy::new(RecoveryMode::None, 1).is_err());
        assert!(RecoveryPolicy::new(RecoveryMode::RetryThenNext, 1).is_ok());
    }

    fn params(pairs: &[(&str, Value)]) -> Params {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn setup() -> (tempfile::TempDir, Store, Registry) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::init(dir.path().join("s")).unwrap().with_clock(Clock::Frozen);
        (dir, store, Registry::mock())
    }

    fn opts(branch: &str) -> RunOptions {
        RunOptions { branch: BranchName::new(branch).unwrap(), run_id: "t".into() }
    }

    #[test]
    fn full_run_commits_each_step() {
        let (_d, store, reg) = setup();
        let spec = WorkflowSpec::mock_shape(&[1, 2, 2, 2], Params::new());
        let run = Engine::new(&store, &reg).run_path(&spec, &[0, 0, 0, 0], None, &RecoveryPolicy::none(), &opts("main")).unwrap();
        assert!(run.is_ok());
        assert_eq!(run.steps_executed, 4);
        assert_eq!(store.checkpoint(&run.final_checkpoint).unwrap().step_index, 4);
        assert_eq!(store.ancestry(&run.final_checkpoint).unwrap().len(), 5);
        assert_eq!(store.checkpoint_ids().unwrap().len(), 5);
        let calls = run.final_state.get(&"tool_calls".into()).and_then(Value::as_list).unwrap();
        assert_eq!(calls.len(), 4);
    }

    #[test]
    fn out_of_range_choice() {
        let (_d, store, reg) = setup();
        let spec = WorkflowSpec::mock_shape(&[1, 2, 2, 2], Params::new());
        let err = Engine::new(&store, &reg)
            .run_path(&spec, &[0, 5, 0, 0], None, &RecoveryPolicy::none(), &opts("main"))
            .unwrap_err();
        assert_eq!(err.to_string(), "option 5 out of range at step 2");
        assert!(store.checkpoint_ids().unwrap().is_empty());
    }

    #[test]
    fn resume_runs_only_the_tail() {
        let (_d, store, reg) = setup();
        let engine = Engine::new(&store, &reg);
        let spec = WorkflowSpec::mock_shape(&[1, 2, 2, 2], Params::new());
        let full = engine.run_path(&spec, &[0, 0, 0, 0], None, &RecoveryPolicy::none(), &opts("main")).unwrap();
        let step3 = full.steps[2].checkpoint.clone();
        let resumed = engine.run_path(&spec, &[1], Some(&step3), &RecoveryPolicy::none(), &opts("alt")).unwrap();
        assert_eq!(resumed.steps_executed, 1);
        assert_eq!(resumed.per_step_attempts, [0, 0, 0, 1]);
        assert_eq!(store.checkpoint(&resumed.final_checkpoint).unwrap().parent, Some(step3));
        assert!(store.contains(&full.final_checkpoint));
    }

    #[test]
    fn deterministic_leaf_hash() {
        let (_d, store, reg) = setup();
        let engine = Engine::new(&store, &reg);
        let spec = WorkflowSpec::mock_shape(&[2, 2], Params::new());
        let a = engine.run_path(&spec, &[1, 0], None, &RecoveryPolicy::none(), &opts("a")).unwrap();
        let b = engine.run_path(&spec, &[1, 0], None, &RecoveryPolicy::none(), &opts("b")).unwrap();
        assert_eq!(a.final_state.hash().unwrap(), b.final_state.hash().unwrap());
        assert_ne!(a.final_checkpoint, b.final_checkpoint);
    }

    fn failing_first_option(extra: &[(&str, Value)]) -> WorkflowSpec {
        let mut spec = WorkflowSpec::mock_shape(&[2], Params::new());
        let mut fail = vec![("fail", Value::Bool(true))];
        fail.extend_from_slice(extra);
        spec.steps[0].options[0].params = params(&fail);
        spec
    }

    #[test]
    fn next_option_recovers() {
        let (_d, store, reg) = setup();
        let journal = Journal::in_memory();
        let spec = failing_first_option(&[]);
        let run = Engine::new(&store, &reg)
            .with_journal(&journal)
            .run_path(&spec, &[0], None, &RecoveryPolicy::next_option(), &opts("main"))
            .unwrap();
        assert!(run.is_ok());
        assert_eq!(run.choices_taken, [1]);
        assert_eq!(run.steps_executed, 2);
        assert_eq!(store.checkpoint_ids().unwrap().len(), 2);
        let statuses: Vec<_> = journal.records().iter().map(|r| r.status).collect();
        assert_eq!(statuses, [AttemptStatus::Failed, AttemptStatus::Ok]);
        assert_eq!(store.checkpoint(&run.final_checkpoint).unwrap().accounting.unwrap().attempts, 2);
    }

    #[test]
    fn no_policy_aborts_at_parent() {
        let (_d, store, reg) = setup();
        let spec = failing_first_option(&[]);
        let run = Engine::new(&store, &reg)
            .run_path(&spec, &[0], None, &RecoveryPolicy::none(), &opts("main"))
            .unwrap();
        let failure = run.failure.unwrap();
        assert_eq!(failure.last_good, run.start);
        assert_eq!(failure.step_index, 1);
        assert_eq!(store.branch_head(&BranchName::new("main").unwrap()).unwrap(), Some(run.start.clone()));
        assert_eq!(store.checkpoint_ids().unwrap().len(), 1);
    }

    #[test]
    fn retry_then_next() {
        let (_d, store, reg) = setup();
        let spec = failing_first_option(&[]);
        let run = Engine::new(&store, &reg)
            .run_path(&spec, &[0], None, &RecoveryPolicy::retry_then_next(1), &opts("main"))
            .unwrap();
        assert_eq!(run.choices_taken, [1]);
        assert_eq!(run.steps_executed, 3);
    }

    #[test]
    fn retry_succeeds_on_flaky_option() {
        let (_d, store, reg) = setup();
        let spec = failing_first_option(&[("fail_times", Value::from(1u64))]);
        let run = Engine::new(&store, &reg)
            .run_path(&spec, &[0], None, &RecoveryPolicy::retry_then_next(2), &opts("main"))
            .unwrap();
        assert_eq!(run.choices_taken, [0]);
        assert_eq!(run.steps_executed, 2);
    }

    #[test]
    fn unregistered_executor() {
        let (_d, store, _) = setup();
        let spec = WorkflowSpec::mock_shape(&[1], Params::new());
        let err = execute_step(&Registry::new(), &spec.initial, 0, &spec.steps[0], 0).unwrap_err();
        assert!(err.to_string().contains("unknown executor"), "{err}");
        let err = Engine::new(&store, &Registry::new())
            .run_path(&spec, &[0], None, &RecoveryPolicy::none(), &opts("main"))
            .unwrap_err();
        assert!(matches!(err, EngineError::Workflow(WorkflowError::Unregistered { .. })));
    }

    #[test]
    fn failed_outcome_writes_nothing() {
        let spec = failing_first_option(&[]);
        let outcome = execute_step(&Registry::mock(), &spec.initial, 0, &spec.steps[0], 0).unwrap();
        assert!(!outcome.is_ok());
        assert!(outcome.delta().is_empty());
    }

    #[test]
    fn replay_matches_and_detects_tampering() {
        let (_d, store, reg) = setup();
        let engine = Engine::new(&store, &reg);
        let spec = WorkflowSpec::mock_shape(&[1, 2, 2, 2], Params::new());
        let run = engine.run_path(&spec, &[0, 1, 0, 1], None, &RecoveryPolicy::none(), &opts("main")).unwrap();
        let report = engine.replay(&run.final_checkpoint, &spec).unwrap();
        assert_eq!(report.layers.len(), 5);
        assert!(report.all_match(), "{report:?}");

        let target = store.checkpoint(&run.steps[1].checkpoint).unwrap();
        let blob = store.root().join("objects/st").join(&target.state_hash[..2]).join(&target.state_hash);
        std::fs::write(&blob, b"{\"tampered\":true}").unwrap();
        let report = engine.replay(&run.final_checkpoint, &spec).unwrap();
        let bad = report.first_problem().unwrap();
        assert_eq!((bad.step_index, bad.status), (2, ReplayStatus::CorruptBlob));
    }
}
