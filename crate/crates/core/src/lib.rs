//! Versioned execution of multi-step agent workflows.
//!
//! Every step's output is committed as an immutable, content-addressed
//! checkpoint, so a run can be rolled back to any earlier step, branched and
//! resumed without re-executing the shared prefix. On top of that, [`sweep`]
//! explores every combination of per-step options and checks the observed
//! costs against closed-form predictions.
//!
//! ```no_run
//! use agentgit::executors::{Params, Registry};
//! use agentgit::store::Store;
//! use agentgit::sweep::{run_sweep, Strategy, SweepPlan};
//! use agentgit::workflow::WorkflowSpec;
//!
//! let store = Store::init(".agentgit")?;
//! let plan = SweepPlan::new(WorkflowSpec::mock_shape(&[1, 2, 2, 2], Params::new()), Strategy::Rollback);
//! let result = run_sweep(&store, &plan, &Registry::mock())?;
//! assert_eq!(result.accounting.steps_executed, 15);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod clock;
pub mod engine;
pub mod executors;
pub mod journal;
pub mod metrics;
pub mod parallel;
pub mod state;
pub mod store;
pub mod sweep;
pub mod workflow;
