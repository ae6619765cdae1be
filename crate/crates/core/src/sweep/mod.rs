//! Full-factorial sweeps over a workflow's option tree.
//!
//! The rollback strategy executes every tree edge once, each child resuming
//! from its parent's checkpoint. The standard strategy produces every leaf by
//! an independent full run from a fresh root. Both record the same leaves.
//!
//! Branch names, under `sweep/<run_id>`:
//!
//! * rollback root `0/root`, node at layer `i` on path `p` → `i/<p joined by '.'>`
//! * standard leaf `p` → `leaf/<p joined by '.'>`

mod formulas;
mod report;

pub use formulas::*;
pub use report::*;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineError, RecoveryPolicy, RunOptions, RunResult};
use crate::executors::Registry;
use crate::journal::Journal;
use crate::parallel::Workers;
use crate::store::{BranchName, CheckpointId, Store, StoreError};
use crate::workflow::WorkflowSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Standard,
    Rollback,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Standard => "standard",
            Strategy::Rollback => "rollback",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "standard" => Ok(Strategy::Standard),
            "rollback" => Ok(Strategy::Rollback),
            other => Err(format!("unknown strategy `{other}` (expected standard or rollback)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("invalid sweep plan: {0}")]
    Plan(String),
    #[error("incomparable reports: {0}")]
    Incomparable(String),
    #[error("malformed sweep report: {0}")]
    Report(String),
    #[error("tree too large for a sweep report: {0}")]
    TooLarge(String),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub spec: WorkflowSpec,
    pub strategy: Strategy,
    pub parallelism: usize,
    pub run_id: String,
}

impl SweepPlan {
    pub fn new(spec: WorkflowSpec, strategy: Strategy) -> Self {
        SweepPlan { spec, strategy, parallelism: 1, run_id: strategy.to_string() }
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism;
        self
    }

    pub fn with_run_id(mut self, run_id: impl Into<String>) -> Self {
        self.run_id = run_id.into();
        self
    }

    pub fn branch_prefix(&self) -> String {
        format!("sweep/{}", self.run_id)
    }
}

/// Executor-invocation totals; `per_layer[i]` counts invocations of step `i + 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub steps_executed: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_ms: u64,
    pub per_layer: Vec<u64>,
}

impl Accounting {
    pub fn for_layers(n: usize) -> Self {
        Accounting { per_layer: vec![0; n], ..Default::default() }
    }

    pub fn add_run(&mut self, run: &RunResult) {
        self.steps_executed += run.steps_executed;
        self.tokens_in += run.tokens_in;
        self.tokens_out += run.tokens_out;
        self.wall_ms += run.wall_ms;
        for (slot, n) in self.per_layer.iter_mut().zip(&run.per_step_attempts) {
            *slot += n;
        }
    }

    pub fn absorb(&mut self, other: &Accounting) {
        self.steps_executed += other.steps_executed;
        self.tokens_in += other.tokens_in;
        self.tokens_out += other.tokens_out;
        self.wall_ms += other.wall_ms;
        if self.per_layer.len() < other.per_layer.len() {
            self.per_layer.resize(other.per_layer.len(), 0);
        }
        for (slot, n) in self.per_layer.iter_mut().zip(&other.per_layer) {
            *slot += n;
        }
    }

    /// `steps_executed` equals the sum of the per-layer counts.
    pub fn is_consistent(&self) -> bool {
        self.steps_executed == self.per_layer.iter().sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafResult {
    pub choices: Vec<usize>,
    pub state_hash: Option<String>,
    pub checkpoint: Option<CheckpointId>,
    pub failure: Option<String>,
}

impl LeafResult {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none() && self.state_hash.is_some()
    }
}

/// A failed edge and the leaves below it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubtreeFailure {
    pub prefix: Vec<usize>,
    pub step: String,
    pub reason: String,
}

impl fmt::Display for SubtreeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "subtree {:?} failed at step `{}`: {}", self.prefix, self.step, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub x: Vec<usize>,
    pub strategy: Strategy,
    pub run_id: String,
    pub parallelism: usize,
    /// Rollback root; `None` for standard sweeps, which use one root per leaf.
    pub root: Option<CheckpointId>,
    /// Lexicographic by choices.
    pub leaves: Vec<LeafResult>,
    pub accounting: Accounting,
    pub failures: Vec<SubtreeFailure>,
}

impl SweepResult {
    pub fn ok_leaves(&self) -> impl Iterator<Item = &LeafResult> {
        self.leaves.iter().filter(|l| l.is_ok())
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && self.leaves.iter().all(LeafResult::is_ok)
    }

    pub fn sorted_leaf_hashes(&self) -> Vec<String> {
        sorted_hashes(&self.leaves)
    }
}

pub(crate) fn sorted_hashes(leaves: &[LeafResult]) -> Vec<String> {
    let mut hashes: Vec<String> = leaves.iter().filter_map(|l| l.state_hash.clone()).collect();
    hashes.sort();
    hashes
}

fn path_label(path: &[usize]) -> String {
    if path.is_empty() {
        "root".into()
    } else {
        path.iter().map(usize::to_string).collect::<Vec<_>>().join(".")
    }
}

fn failed_leaves(x: &[usize], prefix: &[usize], reason: &str) -> Vec<LeafResult> {
    let tail = &x[prefix.len()..];
    let suffixes = if tail.is_empty() { vec![Vec::new()] } else { enumerate_leaves(tail) };
    suffixes
        .into_iter()
        .map(|suffix| LeafResult {
            choices: prefix.iter().copied().chain(suffix).collect(),
            state_hash: None,
            checkpoint: None,
            failure: Some(reason.to_owned()),
        })
        .collect()
}

struct Subtree {
    leaves: Vec<LeafResult>,
    accounting: Accounting,
    failures: Vec<SubtreeFailure>,
}

struct Ctx<'a> {
    engine: Engine<'a>,
    spec: &'a WorkflowSpec,
    x: Vec<usize>,
    workers: Workers,
    prefix: String,
    run_id: &'a str,
}

impl Ctx<'_> {
    fn opts(&self, kind: &str, path: &[usize]) -> Result<RunOptions, SweepError> {
        Ok(RunOptions {
            branch: BranchName::new(format!("{}/{kind}/{}", self.prefix, path_label(path)))?,
            run_id: self.run_id.to_owned(),
        })
    }

    fn rollback(&self, node: CheckpointId, path: Vec<usize>) -> Result<Subtree, SweepError> {
        let layer = path.len();
        if layer == self.x.len() {
            let cp = self.engine.store().checkpoint(&node)?;
            return Ok(Subtree {
                leaves: vec![LeafResult { choices: path, state_hash: Some(cp.state_hash), checkpoint: Some(node), failure: None }],
                accounting: Accounting::for_layers(self.x.len()),
                failures: Vec::new(),
            });
        }
        let children: Vec<usize> = (0..self.x[layer]).collect();
        let parts = self.workers.map(children, |k| -> Result<Subtree, SweepError> {
            let mut child = path.clone();
            child.push(k);
            let opts = self.opts(&(layer + 1).to_string(), &child)?;
            let run = self.engine.run_edge(self.spec, &node, k, &opts)?;
            let mut edge = Accounting::for_layers(self.x.len());
            edge.add_run(&run);
            match run.failure {
                None => {
                    let mut sub = self.rollback(run.final_checkpoint, child)?;
                    sub.accounting.absorb(&edge);
                    Ok(sub)
                }
                Some(f) => Ok(Subtree {
                    leaves: failed_leaves(&self.x, &child, &f.reason),
                    accounting: edge,
                    failures: vec![SubtreeFailure { prefix: child, step: f.step, reason: f.reason }],
                }),
            }
        });
        let mut out = Subtree { leaves: Vec::new(), accounting: Accounting::for_layers(self.x.len()), failures: Vec::new() };
        for part in parts {
            let part = part?;
            out.leaves.extend(part.leaves);
            out.accounting.absorb(&part.accounting);
            out.failures.extend(part.failures);
        }
        Ok(out)
    }

    fn standard(&self) -> Result<Subtree, SweepError> {
        let none = RecoveryPolicy::none();
        let runs = self.workers.map(enumerate_leaves(&self.x), |choices| -> Result<(Vec<usize>, RunResult), SweepError> {
            let opts = self.opts("leaf", &choices)?;
            let run = self.engine.run_path(self.spec, &choices, None, &none, &opts)?;
            Ok((choices, run))
        });
        let mut out = Subtree { leaves: Vec::new(), accounting: Accounting::for_layers(self.x.len()), failures: Vec::new() };
        let mut failures = BTreeMap::new();
        for run in runs {
            let (choices, run) = run?;
            out.accounting.add_run(&run);
            match run.failure {
                None => out.leaves.push(LeafResult {
                    choices,
                    state_hash: Some(run.final_state.hash().map_err(EngineError::from)?),
                    checkpoint: Some(run.final_checkpoint),
                    failure: None,
                }),
                Some(f) => {
                    let prefix = choices[..f.step_index].to_vec();
                    out.leaves.push(LeafResult { choices, state_hash: None, checkpoint: None, failure: Some(f.reason.clone()) });
                    failures.entry(prefix.clone()).or_insert(SubtreeFailure { prefix, step: f.step, reason: f.reason });
                }
            }
        }
        out.failures = failures.into_values().collect();
        Ok(out)
    }
}

/// Executes every leaf of the plan's option tree. Failed edges prune their
/// subtree; the affected leaves are reported with their failure reason.
pub fn run_sweep(store: &Store, plan: &SweepPlan, registry: &Registry) -> Result<SweepResult, SweepError> {
    run_sweep_journaled(store, plan, registry, None)
}

pub fn run_sweep_journaled(
    store: &Store,
    plan: &SweepPlan,
    registry: &Registry,
    journal: Option<&Journal>,
) -> Result<SweepResult, SweepError> {
    plan.spec.validate(Some(registry)).map_err(EngineError::from)?;
    let workers = Workers::new(plan.parallelism).map_err(SweepError::Plan)?;
    let mut engine = Engine::new(store, registry);
    if let Some(journal) = journal {
        engine = engine.with_journal(journal);
    }
    let ctx = Ctx {
        engine,
        spec: &plan.spec,
        x: plan.spec.option_counts(),
        workers,
        prefix: plan.branch_prefix(),
        run_id: &plan.run_id,
    };
    let (root, sub) = match plan.strategy {
        Strategy::Rollback => {
            let root = ctx.engine.commit_root(&plan.spec, &ctx.opts("0", &[])?.branch)?;
            (Some(root.clone()), ctx.rollback(root, Vec::new())?)
        }
        Strategy::Standard => (None, ctx.standard()?),
    };
    Ok(SweepResult {
        x: ctx.x,
        strategy: plan.strategy,
        run_id: plan.run_id.clone(),
        parallelism: plan.parallelism,
        root,
        leaves: sub.leaves,
        accounting: sub.accounting,
        failures: sub.failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Clock;
    use crate::executors::Params;
    use crate::state::Value;

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::init(dir.path().join("s")).unwrap().with_clock(Clock::Frozen);
        (dir, store)
    }

    fn sweep(x: &[usize], strategy: Strategy, k: usize) -> (tempfile::TempDir, Store, SweepResult) {
        let (dir, store) = store();
        let plan = SweepPlan::new(WorkflowSpec::mock_shape(x, Params::new()), strategy).with_parallelism(k);
        let result = run_sweep(&store, &plan, &Registry::mock()).unwrap();
        (dir, store, result)
    }

    #[test]
    fn experiment_shape_counts() {
        let (_d, store, rb) = sweep(&[1, 2, 2, 2], Strategy::Rollback, 1);
        assert_eq!((rb.leaves.len(), rb.accounting.steps_executed), (8, 15));
        assert_eq!(rb.accounting.per_layer, [1, 2, 4, 8]);
        assert_eq!(store.checkpoint_ids().unwrap().len(), 16);
        let (_d, _s, std) = sweep(&[1, 2, 2, 2], Strategy::Standard, 1);
        assert_eq!((std.leaves.len(), std.accounting.steps_executed), (8, 32));
        assert_eq!(std.accounting.per_layer, [8, 8, 8, 8]);
        assert_eq!(rb.sorted_leaf_hashes(), std.sorted_leaf_hashes());
    }

    #[test]
    fn leaves_are_lexicographic() {
        let (_d, _s, rb) = sweep(&[2, 3], Strategy::Rollback, 4);
        let choices: Vec<_> = rb.leaves.iter().map(|l| l.choices.clone()).collect();
        assert_eq!(choices, enumerate_leaves(&[2, 3]));
    }

    #[test]
    fn parallel_matches_sequential() {
        let (_d, _s, a) = sweep(&[1, 2, 2, 2], Strategy::Rollback, 1);
        let (_d, _s, b) = sweep(&[1, 2, 2, 2], Strategy::Rollback, 4);
        assert_eq!(a.leaves, b.leaves);
        assert_eq!(a.accounting, b.accounting);
    }

    #[test]
    fn failed_edge_prunes_subtree() {
        let (_d, store) = store();
        let mut spec = WorkflowSpec::mock_shape(&[2, 2], Params::new());
        spec.steps[0].options[1].params = [("fail".to_owned(), Value::Bool(true))].into();
        let result = run_sweep(&store, &SweepPlan::new(spec.clone(), Strategy::Rollback), &Registry::mock()).unwrap();
        assert_eq!(result.accounting.steps_executed, 2 + 2);
        assert_eq!(result.failures.len(), 1);
        assert_eq!(result.failures[0].prefix, [1]);
        let failed: Vec<_> = result.leaves.iter().filter(|l| !l.is_ok()).map(|l| l.choices.clone()).collect();
        assert_eq!(failed, [[1, 0], [1, 1]]);

        let std = run_sweep(&store, &SweepPlan::new(spec, Strategy::Standard), &Registry::mock()).unwrap();
        assert_eq!(std.failures.len(), 1);
        assert_eq!(std.ok_leaves().count(), 2);
        assert_eq!(std.accounting.steps_executed, 2 * 2 + 2);
        assert!(std.accounting.is_consistent());
    }

    #[test]
    fn second_run_needs_new_id() {
        let (_d, store) = store();
        let plan = SweepPlan::new(WorkflowSpec::mock_shape(&[2], Params::new()), Strategy::Rollback);
        run_sweep(&store, &plan, &Registry::mock()).unwrap();
        assert!(matches!(
            run_sweep(&store, &plan, &Registry::mock()),
            Err(SweepError::Engine(EngineError::Store(StoreError::DuplicateBranch(_))))
        ));
        run_sweep(&store, &plan.with_run_id("again"), &Registry::mock()).unwrap();
    }

    #[test]
    fn zero_parallelism_rejected() {
        let (_d, store) = store();
        let plan = SweepPlan::new(WorkflowSpec::mock_shape(&[2], Params::new()), Strategy::Rollback).with_parallelism(0);
        assert!(matches!(run_sweep(&store, &plan, &Registry::mock()), Err(SweepError::Plan(_))));
    }
}
