//! Git-style command line over the checkpoint store, workflow engine,
//! sweeps and reports.
//!
//! [`run`] parses arguments and dispatches; it never exits the process, so
//! the binary and the tests share one entry point. Exit codes: 0 success,
//! 1 domain error, 2 usage error.

mod render;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use agentgit::clock::Clock;
use agentgit::engine::{Engine, RecoveryMode, RecoveryPolicy, RunOptions};
use agentgit::executors::{
    ArxivConfig, FixtureMode, FixtureStore, HttpTransport, LlmEndpointConfig, OfflineTransport, Registry,
    StubTransport, Transport,
};
use agentgit::journal::{parse_journal, Journal};
use agentgit::metrics::{build_run_report, emit_curves, ALPHA_RANGE, N_MAX_RANGE};
use agentgit::state::{self, StateDoc};
use agentgit::store::{BranchName, CommitOptions, MergeResult, MergeStrategy, Store};
use agentgit::sweep::{run_sweep_journaled, verify_formulas, Strategy, SweepError, SweepPlan, SweepReport};
use agentgit::workflow::{load_workflow, WorkflowSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const STORE_ENV: &str = "AGENTGIT_STORE";
pub const DEFAULT_STORE: &str = ".agentgit";

#[derive(Debug, Parser)]
#[command(name = "agentgit", version, about = "Commit, branch, roll back and sweep multi-step agent workflows")]
pub struct Cli {
    /// Record zero timestamps and durations so outputs are byte-stable.
    #[arg(long, global = true)]
    no_timestamps: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create an empty store.
    Init,
    /// Commit a state file onto a branch.
    Commit {
        /// JSON state document.
        #[arg(long)]
        state: PathBuf,
        /// Defaults to the current branch.
        #[arg(long)]
        branch: Option<String>,
        #[arg(short, long, default_value = "")]
        message: String,
    },
    /// Print the state at a checkpoint; a branch name also becomes current.
    Checkout {
        reference: String,
        /// Write the state here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List branches, or create one.
    Branch {
        name: Option<String>,
        /// Defaults to the current branch head.
        #[arg(long)]
        from: Option<String>,
    },
    /// Show the checkpoint tree.
    Log {
        /// Draw parent-child edges.
        #[arg(long)]
        graph: bool,
    },
    /// Key-path differences between two checkpoints.
    Diff { base: String, target: String },
    /// Three-way merge of a checkpoint into a branch.
    Merge {
        theirs: String,
        /// Defaults to the current branch.
        #[arg(long)]
        into: Option<String>,
        #[arg(long, default_value = "fail-on-conflict", value_parser = str::parse::<MergeStrategy>)]
        strategy: MergeStrategy,
        #[arg(short, long, default_value = "merge")]
        message: String,
    },
    /// Execute one path through a workflow.
    Run(RunArgs),
    /// Execute every path through a workflow.
    Sweep(SweepArgs),
    /// Re-execute the path to a leaf and compare state hashes.
    Replay {
        leaf: String,
        #[arg(long)]
        workflow: PathBuf,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Check two sweep reports against the closed-form cost model.
    Verify {
        /// Exactly two sweep reports.
        #[arg(long = "report", num_args = 1, required = true)]
        reports: Vec<PathBuf>,
    },
    /// Closed-form cost curves for uniform trees, as CSV.
    Curves {
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5", value_parser = parse_alpha)]
        alphas: Vec<u64>,
        #[arg(long, default_value_t = 10, value_parser = parse_n_max)]
        n_max: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Totals from journals and sweep reports.
    Stats {
        #[arg(long = "journal")]
        journals: Vec<PathBuf>,
        #[arg(long = "report")]
        reports: Vec<PathBuf>,
        /// Emit canonical JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    workflow: PathBuf,
    /// Option index per step, comma separated; with --from, the remaining steps only.
    #[arg(long, value_delimiter = ',', required = true)]
    choices: Vec<usize>,
    /// Resume from this checkpoint instead of a fresh root.
    #[arg(long)]
    from: Option<String>,
    /// Defaults to the current branch; required with --from.
    #[arg(long)]
    branch: Option<String>,
    #[arg(long, default_value = "none", value_parser = str::parse::<RecoveryMode>)]
    recovery: RecoveryMode,
    #[arg(long, default_value_t = 0)]
    max_retries: u32,
    #[arg(long, default_value = "run")]
    run_id: String,
    /// Append attempt records to this file.
    #[arg(long)]
    journal: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    workflow: PathBuf,
    #[arg(long, value_parser = str::parse::<Strategy>)]
    strategy: Strategy,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    parallelism: u64,
    /// Defaults to the strategy name; branches go under `sweep/<run-id>/`.
    #[arg(long)]
    run_id: Option<String>,
    /// Sweep report destination.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    journal: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TransportKind {
    Http,
    /// Deterministic local responses.
    Stub,
    /// Refuse every request.
    Offline,
}

#[derive(Debug, Args)]
struct ExecArgs {
    #[arg(long, default_value = "fixtures")]
    fixtures: PathBuf,
    #[arg(long, default_value = "off", value_parser = str::parse::<FixtureMode>)]
    fixture_mode: FixtureMode,
    #[arg(long, value_enum, default_value = "http")]
    transport: TransportKind,
    #[arg(long)]
    llm_base_url: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
    #[arg(long)]
    arxiv_endpoint: Option<String>,
}

impl ExecArgs {
    fn registry(&self) -> Registry {
        let transport: Arc<dyn Transport> = match self.transport {
            TransportKind::Http => Arc::new(HttpTransport::new()),
            TransportKind::Stub => Arc::new(StubTransport::new()),
            TransportKind::Offline => Arc::new(OfflineTransport),
        };
        let mut llm = LlmEndpointConfig::default();
        if let Some(url) = &self.llm_base_url {
            llm.base_url = url.clone();
        }
        if let Some(model) = &self.llm_model {
            llm.model = model.clone();
        }
        if matches!(self.transport, TransportKind::Stub) && std::env::var_os(&llm.api_key_env).is_none() {
            llm.api_key = Some("stub".into());
        }
        let mut arxiv = ArxivConfig::default();
        if let Some(endpoint) = &self.arxiv_endpoint {
            arxiv.endpoint = endpoint.clone();
        }
        let fixtures = Arc::new(FixtureStore::new(self.fixture_mode, &self.fixtures));
        Registry::standard(fixtures, transport, llm, arxiv)
    }
}

fn parse_alpha(s: &str) -> Result<u64, String> {
    let a: u64 = s.trim().parse().map_err(|_| format!("`{s}` is not an integer"))?;
    if ALPHA_RANGE.contains(&a) {
        Ok(a)
    } else {
        Err(format!("alpha {a} outside {}..={}", ALPHA_RANGE.start(), ALPHA_RANGE.end()))
    }
}

fn parse_n_max(s: &str) -> Result<u32, String> {
    let n: u32 = s.trim().parse().map_err(|_| format!("`{s}` is not an integer"))?;
    if N_MAX_RANGE.contains(&n) {
        Ok(n)
    } else {
        Err(format!("n-max {n} outside {}..={}", N_MAX_RANGE.start(), N_MAX_RANGE.end()))
    }
}

/// A command's failure: message and exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn domain(e: impl std::fmt::Display) -> Failure {
    Failure { code: 1, message: e.to_string() }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

type Outcome = Result<(), Failure>;

/// Store root from the environment, falling back to `.agentgit`.
pub fn store_root_from_env() -> PathBuf {
    std::env::var_os(STORE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(args: I, store_root: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = err.write_all(rendered.as_bytes());
                2
            } else {
                let _ = out.write_all(rendered.as_bytes());
                0
            };
        }
    };
    let ctx = Ctx { root: store_root, clock: if cli.no_timestamps { Clock::Frozen } else { Clock::System } };
    match ctx.dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

struct Ctx<'a> {
    root: &'a Path,
    clock: Clock,
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| domain(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| domain(format!("{}: {e}", path.display())))
}

fn open_journal(path: &Option<PathBuf>) -> Result<Option<Journal>, Failure> {
    path.as_ref()
        .map(|p| Journal::to_file(p).map_err(|e| domain(format!("{}: {e}", p.display()))))
        .transpose()
}

fn workflow(path: &Path, registry: &Registry) -> Result<WorkflowSpec, Failure> {
    load_workflow(&read(path)?, Some(registry)).map_err(|e| domain(format!("{}: {e}", path.display())))
}

impl Ctx<'_> {
    fn store(&self) -> Result<Store, Failure> {
        Store::open(self.root).map(|s| s.with_clock(self.clock)).map_err(domain)
    }

    fn branch_or_head(&self, store: &Store, name: &Option<String>) -> Result<BranchName, Failure> {
        match name {
            Some(n) => BranchName::new(n.as_str()).map_err(domain),
            None => store.head_branch().map_err(domain),
        }
    }

    fn dispatch(&self, command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
        match command {
            Command::Init => {
                let store = Store::init(self.root).map_err(domain)?;
                emit(out, format!("initialized store at {}\n", store.root().display()))
            }
            Command::Commit { state, branch, message } => self.commit(&state, &branch, message, out),
            Command::Checkout { reference, out: dest } => self.checkout(&reference, dest.as_deref(), out),
            Command::Branch { name, from } => self.branch(name, from, out),
            Command::Log { graph } => {
                let store = self.store()?;
                let (text, _) = render::log(&store, graph).map_err(domain)?;
                emit(out, text)
            }
            Command::Diff { base, target } => {
                let store = self.store()?;
                let base = store.resolve(&base).map_err(domain)?;
                let target = store.resolve(&target).map_err(domain)?;
                emit(out, render::diff(&store.diff(&base, &target).map_err(domain)?))
            }
            Command::Merge { theirs, into, strategy, message } => self.merge(&theirs, &into, strategy, &message, out),
            Command::Run(args) => self.run_path(args, out),
            Command::Sweep(args) => self.sweep(args, out, err),
            Command::Replay { leaf, workflow: wf, exec } => self.replay(&leaf, &wf, &exec, out),
            Command::Verify { reports } => verify(&reports, out),
            Command::Curves { alphas, n_max, out: dest } => {
                let csv = emit_curves(&alphas, n_max).map_err(|e| usage(e.to_string()))?;
                match dest {
                    Some(path) => write_file(&path, &csv),
                    None => out.write_all(&csv).map_err(domain),
                }
            }
            Command::Stats { journals, reports, json } => stats(&journals, &reports, json, out),
        }
    }

    fn commit(&self, state_file: &Path, branch: &Option<String>, message: String, out: &mut dyn Write) -> Outcome {
        let store = self.store()?;
        let mut doc: StateDoc = state::parse(&read(state_file)?).map_err(domain)?;
        doc.ensure_reserved_sections();
        let branch = self.branch_or_head(&store, branch)?;
        let parent = store.branch_head(&branch).map_err(domain)?;
        let id = store.commit(parent.as_ref(), &doc, &branch, CommitOptions::message(message)).map_err(domain)?;
        emit(out, format!("{id}\n"))
    }

    fn checkout(&self, reference: &str, dest: Option<&Path>, out: &mut dyn Write) -> Outcome {
        let store = self.store()?;
        let id = store.resolve(reference).map_err(domain)?;
        let doc = store.checkout(&id).map_err(domain)?;
        if let Ok(branch) = BranchName::new(reference) {
            if store.branch_head(&branch).map_err(domain)?.is_some() {
                store.set_head_branch(&branch).map_err(domain)?;
            }
        }
        let bytes = state::canonical_serialize(&doc).map_err(domain)?;
        match dest {
            Some(path) => {
                write_file(path, &bytes)?;
                emit(out, format!("{id}\n"))
            }
            None => {
                out.write_all(&bytes).map_err(domain)?;
                emit(out, "\n".into())
            }
        }
    }

    fn branch(&self, name: Option<String>, from: Option<String>, out: &mut dyn Write) -> Outcome {
        let store = self.store()?;
        let Some(name) = name else {
            let head = store.head_branch().ok();
            let mut text = String::new();
            for (branch, id) in store.branches().map_err(domain)? {
                let mark = if Some(&branch) == head.as_ref() { '*' } else { ' ' };
                text.push_str(&format!("{mark} {branch} {}\n", id.short()));
            }
            return emit(out, text);
        };
        let name = BranchName::new(name).map_err(domain)?;
        let from = match from {
            Some(r) => store.resolve(&r).map_err(domain)?,
            None => {
                let head = store.head_branch().map_err(domain)?;
                store
                    .branch_head(&head)
                    .map_err(domain)?
                    .ok_or_else(|| domain(format!("branch `{head}` has no commits; pass --from")))?
            }
        };
        store.create_branch(&name, &from).map_err(domain)?;
        emit(out, format!("{name} {}\n", from.short()))
    }

    fn merge(
        &self,
        theirs: &str,
        into: &Option<String>,
        strategy: MergeStrategy,
        message: &str,
        out: &mut dyn Write,
    ) -> Outcome {
        let store = self.store()?;
        let branch = self.branch_or_head(&store, into)?;
        let ours = store
            .branch_head(&branch)
            .map_err(domain)?
            .ok_or_else(|| domain(format!("unknown branch `{branch}`")))?;
        let theirs = store.resolve(theirs).map_err(domain)?;
        match store.merge(&ours, &theirs, strategy, &branch, message).map_err(domain)? {
            MergeResult::Merged { checkpoint, resolved, .. } => {
                let mut text = format!("merged {checkpoint}\n");
                for c in &resolved {
                    text.push_str(&format!("resolved {}\n", render::conflict(c)));
                }
                emit(out, text)
            }
            MergeResult::Conflicts(conflicts) => {
                let mut text = String::new();
                for c in &conflicts {
                    text.push_str(&format!("conflict {}\n", render::conflict(c)));
                }
                emit(out, text)?;
                Err(domain(format!("merge stopped with {} conflict(s)", conflicts.len())))
            }
        }
    }

    fn run_path(&self, args: RunArgs, out: &mut dyn Write) -> Outcome {
        if args.from.is_some() && args.branch.is_none() {
            return Err(usage("--branch is required with --from"));
        }
        let policy = RecoveryPolicy::new(args.recovery, args.max_retries).map_err(usage)?;
        let store = self.store()?;
        let registry = args.exec.registry();
        let spec = workflow(&args.workflow, &registry)?;
        let start = args.from.as_deref().map(|r| store.resolve(r)).transpose().map_err(domain)?;
        let branch = self.branch_or_head(&store, &args.branch)?;
        let journal = open_journal(&args.journal)?;
        let mut engine = Engine::new(&store, &registry);
        if let Some(j) = &journal {
            engine = engine.with_journal(j);
        }
        let opts = RunOptions { branch, run_id: args.run_id };
        let run = engine.run_path(&spec, &args.choices, start.as_ref(), &policy, &opts).map_err(domain)?;
        let mut text = String::new();
        for s in &run.steps {
            let option = &spec.steps[s.step_index - 1].options[s.option].name;
            text.push_str(&format!("step {} {} -> {option} {}\n", s.step_index, s.step, s.checkpoint.short()));
        }
        text.push_str(&format!(
            "final={} steps={} tokens={}\n",
            run.final_checkpoint,
            run.steps_executed,
            run.tokens_in + run.tokens_out
        ));
        emit(out, text)?;
        match run.failure {
            None => Ok(()),
            Some(f) => Err(domain(format!(
                "step {} `{}` failed: {}; last good checkpoint {}",
                f.step_index, f.step, f.reason, f.last_good
            ))),
        }
    }

    fn sweep(&self, args: SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
        let store = self.store()?;
        let registry = args.exec.registry();
        let spec = workflow(&args.workflow, &registry)?;
        let mut plan = SweepPlan::new(spec, args.strategy).with_parallelism(args.parallelism as usize);
        if let Some(id) = args.run_id {
            plan = plan.with_run_id(id);
        }
        let journal = open_journal(&args.journal)?;
        let result = run_sweep_journaled(&store, &plan, &registry, journal.as_ref()).map_err(domain)?;
        if let Some(path) = &args.out {
            write_file(path, &SweepReport::from_result(&result).map_err(domain)?.to_json())?;
        }
        let a = &result.accounting;
        emit(
            out,
            format!(
                "leaves={} steps={} tokens={}\n",
                result.ok_leaves().count(),
                a.steps_executed,
                a.tokens_in + a.tokens_out
            ),
        )?;
        if result.failures.is_empty() {
            return Ok(());
        }
        for f in &result.failures {
            let _ = writeln!(err, "{f}");
        }
        Err(domain(result.failures[0].to_string()))
    }

    fn replay(&self, leaf: &str, wf: &Path, exec: &ExecArgs, out: &mut dyn Write) -> Outcome {
        let store = self.store()?;
        let registry = exec.registry();
        let spec = workflow(wf, &registry)?;
        let leaf = store.resolve(leaf).map_err(domain)?;
        let report = Engine::new(&store, &registry).replay(&leaf, &spec).map_err(domain)?;
        let mut text = String::new();
        for l in &report.layers {
            text.push_str(&format!("step {} {} {}", l.step_index, l.checkpoint.short(), l.status));
            if let Some(d) = &l.detail {
                text.push_str(&format!(" ({d})"));
            }
            text.push('\n');
        }
        emit(out, text)?;
        match report.first_problem() {
            None => Ok(()),
            Some(l) => Err(domain(format!("replay {} at step {}", l.status, l.step_index))),
        }
    }
}

fn emit(out: &mut dyn Write, text: String) -> Outcome {
    out.write_all(text.as_bytes()).map_err(domain)
}

fn load_report(path: &Path) -> Result<SweepReport, Failure> {
    SweepReport::from_json(&read(path)?).map_err(|e| domain(format!("{}: {e}", path.display())))
}

fn verify(paths: &[PathBuf], out: &mut dyn Write) -> Outcome {
    let [a, b] = paths else {
        return Err(usage(format!("verify takes exactly two --report flags, got {}", paths.len())));
    };
    let (a, b) = (load_report(a)?, load_report(b)?);
    let report = verify_formulas(&a, &b).map_err(|e: SweepError| domain(e))?;
    emit(out, report.table())?;
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<String> = report.violations().iter().map(|c| c.name.clone()).collect();
        Err(domain(format!("violated: {}", names.join(", "))))
    }
}

fn stats(journals: &[PathBuf], reports: &[PathBuf], json: bool, out: &mut dyn Write) -> Outcome {
    let mut records = Vec::with_capacity(journals.len());
    for path in journals {
        let text = String::from_utf8(read(path)?).map_err(|e| domain(format!("{}: {e}", path.display())))?;
        records.push(parse_journal(&text).map_err(|e| domain(format!("{}: {e}", path.display())))?);
    }
    let sweeps = reports.iter().map(|p| load_report(p)).collect::<Result<Vec<_>, _>>()?;
    let report = build_run_report(&records, &sweeps).map_err(domain)?;
    if json {
        out.write_all(&report.to_json()).map_err(domain)?;
        emit(out, "\n".into())?;
    } else {
        emit(out, report.table())?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(domain("run report checks failed"))
    }
}
