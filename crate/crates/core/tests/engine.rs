use std::path::Path;
use std::sync::Arc;

use agentgit::clock::Clock;
use agentgit::engine::{Engine, RecoveryPolicy, ReplayStatus, RunOptions};
use agentgit::executors::{
    ArxivConfig, FixtureMode, FixtureStore, LlmEndpointConfig, OfflineTransport, Params, Registry, StubTransport,
    Transport,
};
use agentgit::journal::{parse_journal, AttemptStatus, Journal};
use agentgit::state::Value;
use agentgit::store::{BranchName, Store};
use agentgit::sweep::{run_sweep, Strategy, SweepPlan};
use agentgit::workflow::{load_workflow, WorkflowSpec};

fn store(dir: &Path) -> Store {
    Store::init(dir.join("store")).unwrap().with_clock(Clock::Frozen)
}

fn opts(branch: &str) -> RunOptions {
    RunOptions { branch: BranchName::new(branch).unwrap(), run_id: "it".into() }
}

fn live_workflow() -> Vec<u8> {
    std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../workflows/experiment-live.json")).unwrap()
}

fn network_registry(mode: FixtureMode, fixtures: &Path, transport: Arc<dyn Transport>) -> Registry {
    let llm = LlmEndpointConfig {
        base_url: "http://stub.invalid/v1".into(),
        api_key: Some("test-key".into()),
        max_retries: 0,
        backoff_ms: 0,
        ..LlmEndpointConfig::default()
    };
    let arxiv = ArxivConfig { endpoint: "http://stub.invalid/api/query".into(), max_retries: 0, backoff_ms: 0, ..ArxivConfig::default() };
    Registry::standard(Arc::new(FixtureStore::new(mode, fixtures)), transport, llm, arxiv)
}

#[test]
fn every_step_is_one_checkpoint_with_its_cost() {
    let dir = tempfile::tempdir().unwrap();
    let store = store(dir.path());
    let reg = Registry::mock();
    let spec = WorkflowSpec::mock_shape(&[1, 3, 2, 2], Params::new());
    let run = Engine::new(&store, &reg)
        .run_path(&spec, &[0, 2, 1, 0], None, &RecoveryPolicy::none(), &opts("main"))
        .unwrap();

    let path = store.ancestry(&run.final_checkpoint).unwrap();
    assert_eq!(path.len(), 5);
    assert_eq!(path[0], run.start);
    let mut tokens = 0;
    for (i, id) in path.iter().enumerate() {
        let cp = store.checkpoint(id).unwrap();
        assert_eq!(cp.step_index as usize, i);
        if i == 0 {
            assert!(cp.accounting.is_none() && cp.option_taken.is_none());
            continue;
        }
        assert_eq!(cp.option_taken, Some([0, 2, 1, 0][i - 1]));
        let acct = cp.accounting.unwrap();
        assert_eq!(acct.attempts, 1);
        tokens += acct.tokens_in + acct.tokens_out;
        assert_eq!(&run.steps[i - 1].checkpoint, id);
    }
    assert_eq!(tokens, run.tokens_in + run.tokens_out);
    assert_eq!(store.branch_head(&BranchName::new("main").unwrap()).unwrap(), Some(run.final_checkpoint));
}

#[test]
fn resume_skips_the_shared_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let store = store(dir.path());
    let reg = Registry::mock();
    let engine = Engine::new(&store, &reg);
    let spec = WorkflowSpec::mock_shape(&[1, 2, 2, 2], Params::new());
    let policy = RecoveryPolicy::none();
    let first = engine.run_path(&spec, &[0, 0, 0, 0], None, &policy, &opts("main")).unwrap();
    let before = store.checkpoint_ids().unwrap().len();

    let from_step2 = first.steps[1].checkpoint.clone();
    let resumed = engine.run_path(&spec, &[1, 1], Some(&from_step2), &policy, &opts("alt")).unwrap();
    assert_eq!(resumed.steps_executed, 2);
    assert_eq!(resumed.per_step_attempts, [0, 0, 1, 1]);
    assert_eq!(store.checkpoint_ids().unwrap().len(), before + 2);

    // Same leaf as a from-scratch run along the same choices.
    let scratch = engine.run_path(&spec, &[0, 0, 1, 1], None, &policy, &opts("scratch")).unwrap();
    assert_eq!(resumed.final_state.hash().unwrap(), scratch.final_state.hash().unwrap());
    assert_eq!(scratch.steps_executed, 4);
}

#[test]
fn failed_step_leaves_store_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let store = store(dir.path());
    let reg = Registry::mock();
    let journal = Journal::in_memory();
    let mut spec = WorkflowSpec::mock_shape(&[1, 2, 1], Params::new());
    spec.steps[2].options[0].params = [("fail".to_owned(), Value::Bool(true))].into_iter().collect();

    let run = Engine::new(&store, &reg)
        .with_journal(&journal)
        .run_path(&spec, &[0, 1, 0], None, &RecoveryPolicy::retry_then_next(2), &opts("main"))
        .unwrap();
    let failure = run.failure.clone().unwrap();
    assert_eq!(failure.step_index, 3);
    assert_eq!(failure.last_good, run.steps[1].checkpoint);
    assert_eq!(run.per_step_attempts, [1, 1, 3]);

    assert_eq!(store.checkpoint_ids().unwrap().len(), 3);
    assert_eq!(store.state_blob_count().unwrap(), 3);
    assert_eq!(store.branch_head(&BranchName::new("main").unwrap()).unwrap(), Some(failure.last_good.clone()));
    let stray: Vec<_> = std::fs::read_dir(store.root().join("tmp")).map(|d| d.collect()).unwrap_or_default();
    assert!(stray.is_empty());

    let records = journal.records();
    let failed = records.iter().filter(|r| r.status == AttemptStatus::Failed).count();
    assert_eq!((records.len(), failed), (5, 3));
}

#[test]
fn journal_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let store = store(dir.path());
    let reg = Registry::mock();
    let path = dir.path().join("journal.jsonl");
    let journal = Journal::to_file(&path).unwrap();
    let spec = WorkflowSpec::mock_shape(&[1, 2], Params::new());
    let run = Engine::new(&store, &reg)
        .with_journal(&journal)
        .run_path(&spec, &[0, 1], None, &RecoveryPolicy::none(), &opts("main"))
        .unwrap();
    let parsed = parse_journal(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(parsed, journal.records());
    assert_eq!(parsed.iter().map(|r| r.tokens_in).sum::<u64>(), run.tokens_in);
    assert_eq!(parsed[1].option, "opt1");
}

#[test]
fn recorded_fixtures_replay_every_leaf() {
    let dir = tempfile::tempdir().unwrap();
    let store = store(dir.path());
    let fixtures = dir.path().join("fixtures");
    let stub = Arc::new(StubTransport::new());
    let recording = network_registry(FixtureMode::Record, &fixtures, stub.clone());
    let spec = load_workflow(&live_workflow(), Some(&recording)).unwrap();
    assert_eq!(spec.option_counts(), [1, 2, 2, 2]);

    let sweep = run_sweep(&store, &SweepPlan::new(spec.clone(), Strategy::Rollback), &recording).unwrap();
    assert!(sweep.is_complete(), "{:?}", sweep.failures);
    assert_eq!(sweep.accounting.steps_executed, 15);
    assert_eq!(stub.calls(), 15);

    let replaying = network_registry(FixtureMode::Replay, &fixtures, Arc::new(OfflineTransport));
    let engine = Engine::new(&store, &replaying);
    for leaf in &sweep.leaves {
        let report = engine.replay(leaf.checkpoint.as_ref().unwrap(), &spec).unwrap();
        assert_eq!(report.layers.len(), 5);
        assert!(report.all_match(), "{:?}", report.first_problem());
    }

    // Without fixtures the network layers cannot be verified.
    let unrecorded = network_registry(FixtureMode::Off, &fixtures, Arc::new(OfflineTransport));
    let leaf = sweep.leaves[0].checkpoint.clone().unwrap();
    let report = Engine::new(&store, &unrecorded).replay(&leaf, &spec).unwrap();
    assert_eq!(report.first_problem().unwrap().status, ReplayStatus::Unverifiable);

    // A corrupted state blob is reported at its layer.
    let target = store.checkpoint(&store.ancestry(&leaf).unwrap()[3]).unwrap();
    let blob = store.root().join("objects/st").join(&target.state_hash[..2]).join(&target.state_hash);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes.push(b' ');
    std::fs::write(&blob, bytes).unwrap();
    let report = engine.replay(&leaf, &spec).unwrap();
    let bad = report.first_problem().unwrap();
    assert_eq!((bad.step_index, bad.status), (3, ReplayStatus::CorruptBlob));
}

#[test]
fn replay_mode_misses_are_step_failures() {
    let dir = tempfile::tempdir().unwrap();
    let store = store(dir.path());
    let reg = network_registry(FixtureMode::Replay, &dir.path().join("empty"), Arc::new(OfflineTransport));
    let spec = load_workflow(&live_workflow(), Some(&reg)).unwrap();
    let run = Engine::new(&store, &reg)
        .run_path(&spec, &[0, 0, 0, 0], None, &RecoveryPolicy::none(), &opts("main"))
        .unwrap();
    let failure = run.failure.unwrap();
    assert_eq!(failure.step_index, 1);
    assert!(failure.reason.contains("fixture"), "{}", failure.reason);
    assert_eq!(store.checkpoint_ids().unwrap().len(), 1);
}
