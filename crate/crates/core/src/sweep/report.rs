use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_bigint::BigUint;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::state::Value;

use super::formulas::{
    efficiency, layer_widths, predicted_leaf_count, predicted_steps_rollback, predicted_steps_standard, ratio_string,
    to_decimal, to_u64s,
};
use super::{sorted_hashes, Accounting, LeafResult, Strategy, SweepError, SweepResult};

pub const LEAF_COUNT: &str = "leaf-count";
pub const STANDARD_STEPS: &str = "standard-steps";
pub const ROLLBACK_STEPS: &str = "rollback-steps";
pub const ACCOUNTING: &str = "accounting";
pub const EQUIVALENCE: &str = "strategy-equivalence";

/// Human description of each check's identity.
pub fn check_formula(name: &str) -> &'static str {
    match name {
        LEAF_COUNT => "L = prod(x_i)",
        STANDARD_STEPS => "S_std = n * prod(x_i)",
        ROLLBACK_STEPS => "S_rb = sum_i prod_{j<=i}(x_j)",
        ACCOUNTING => "steps_executed = sum(per_layer)",
        EQUIVALENCE => "sorted leaf state hashes agree",
        _ => "",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observed {
    pub leaves: u64,
    pub distinct_leaves: u64,
    pub failed_leaves: u64,
    pub steps_executed: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub subject: String,
    pub predicted: String,
    pub observed: String,
    pub ok: bool,
}

/// Predicted costs beside observed ones, with one check per identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaReport {
    pub x: Vec<u64>,
    #[serde(rename = "L")]
    pub leaf_count: u64,
    pub s_std: u64,
    pub s_rollback: u64,
    /// Exact, `p/q`.
    pub eta: String,
    pub eta_decimal: String,
    pub observed: BTreeMap<String, Observed>,
    /// Rollback over standard, when both were observed.
    pub observed_step_ratio: Option<String>,
    pub observed_token_ratio: Option<String>,
    pub checks: Vec<Check>,
}

impl FormulaReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn violations(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.ok).collect()
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "x = {:?}", self.x);
        let width = |title: &str, f: fn(&Check) -> &str| self.checks.iter().map(|c| f(c).len()).fold(title.len(), usize::max);
        let ws = width("subject", |c| &c.subject);
        let wp = width("predicted", |c| &c.predicted);
        let wo = width("observed", |c| &c.observed);
        let _ = writeln!(out, "{:<22} {:<ws$} {:>wp$} {:>wo$}  result", "check", "subject", "predicted", "observed");
        for c in &self.checks {
            let result = if c.ok { "ok" } else { "VIOLATED" };
            let _ = writeln!(out, "{:<22} {:<ws$} {:>wp$} {:>wo$}  {result}", c.name, c.subject, c.predicted, c.observed);
        }
        let _ = writeln!(out, "eta = {} ({})", self.eta, self.eta_decimal);
        if let Some(r) = &self.observed_step_ratio {
            let _ = writeln!(out, "observed steps rollback/standard = {r}");
        }
        if let Some(r) = &self.observed_token_ratio {
            let _ = writeln!(out, "observed tokens rollback/standard = {r}");
        }
        for v in self.violations() {
            let _ = writeln!(out, "violated: {} ({}) for {}", v.name, check_formula(&v.name), v.subject);
        }
        out
    }
}

/// On-disk sweep report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub x: Vec<u64>,
    pub strategy: Strategy,
    pub run_id: String,
    pub leaves: Vec<LeafResult>,
    pub accounting: Accounting,
    pub formula_report: FormulaReport,
}

impl SweepReport {
    pub fn from_result(result: &SweepResult) -> Result<Self, SweepError> {
        let x = to_u64s(&result.x);
        let formula_report = build(&x, &[(result.strategy, &result.accounting, &result.leaves)])?;
        Ok(SweepReport {
            x,
            strategy: result.strategy,
            run_id: result.run_id.clone(),
            leaves: result.leaves.clone(),
            accounting: result.accounting.clone(),
            formula_report,
        })
    }

    /// Canonical JSON bytes.
    pub fn to_json(&self) -> Vec<u8> {
        let json = serde_json::to_value(self).expect("sweep report serializes");
        Value::from(json).to_canonical().expect("sweep report is finite")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, SweepError> {
        serde_json::from_slice(bytes).map_err(|e| SweepError::Report(e.to_string()))
    }

    pub fn sorted_leaf_hashes(&self) -> Vec<String> {
        sorted_hashes(&self.leaves)
    }
}

fn small(v: BigUint, what: &str) -> Result<u64, SweepError> {
    u64::try_from(&v).map_err(|_| SweepError::TooLarge(format!("{what} = {v}")))
}

fn observe(accounting: &Accounting, leaves: &[LeafResult]) -> Observed {
    let ok: Vec<&LeafResult> = leaves.iter().filter(|l| l.is_ok()).collect();
    let distinct: BTreeSet<&Vec<usize>> = ok.iter().map(|l| &l.choices).collect();
    Observed {
        leaves: ok.len() as u64,
        distinct_leaves: distinct.len() as u64,
        failed_leaves: (leaves.len() - ok.len()) as u64,
        steps_executed: accounting.steps_executed,
        tokens_in: accounting.tokens_in,
        tokens_out: accounting.tokens_out,
        wall_ms: accounting.wall_ms,
    }
}

fn check(name: &str, subject: impl Into<String>, predicted: impl ToString, observed: impl ToString) -> Check {
    let (predicted, observed) = (predicted.to_string(), observed.to_string());
    Check { name: name.into(), subject: subject.into(), ok: predicted == observed, predicted, observed }
}

fn list(v: &[u64]) -> String {
    format!("[{}]", v.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
}

fn ratio(num: u64, den: u64) -> Option<String> {
    (den > 0).then(|| ratio_string(&BigRational::new(num.into(), den.into())))
}

fn build(x: &[u64], parts: &[(Strategy, &Accounting, &[LeafResult])]) -> Result<FormulaReport, SweepError> {
    let leaf_count = small(predicted_leaf_count(x)?, "L")?;
    let s_std = small(predicted_steps_standard(x)?, "S_std")?;
    let s_rollback = small(predicted_steps_rollback(x)?, "S_rb")?;
    let widths = layer_widths(x)?.into_iter().map(|w| small(w, "layer width")).collect::<Result<Vec<_>, _>>()?;
    let eta = efficiency(x)?;

    let mut observed = BTreeMap::new();
    let mut checks = Vec::new();
    for &(strategy, accounting, leaves) in parts {
        let seen = observe(accounting, leaves);
        let subject = strategy.to_string();
        checks.push(check(LEAF_COUNT, subject.clone(), leaf_count, seen.distinct_leaves));
        let (name, total, per_layer) = match strategy {
            Strategy::Standard => (STANDARD_STEPS, s_std, vec![leaf_count; x.len()]),
            Strategy::Rollback => (ROLLBACK_STEPS, s_rollback, widths.clone()),
        };
        checks.push(check(name, subject.clone(), total, seen.steps_executed));
        checks.push(check(name, format!("{subject}/layers"), list(&per_layer), list(&accounting.per_layer)));
        checks.push(check(
            ACCOUNTING,
            subject.clone(),
            accounting.per_layer.iter().sum::<u64>(),
            accounting.steps_executed,
        ));
        observed.insert(subject, seen);
    }

    let std = parts.iter().find(|p| p.0 == Strategy::Standard);
    let rb = parts.iter().find(|p| p.0 == Strategy::Rollback);
    let (mut observed_step_ratio, mut observed_token_ratio) = (None, None);
    if let (Some(std), Some(rb)) = (std, rb) {
        observed_step_ratio = ratio(rb.1.steps_executed, std.1.steps_executed);
        observed_token_ratio = ratio(rb.1.tokens_in + rb.1.tokens_out, std.1.tokens_in + std.1.tokens_out);
        let same = sorted_hashes(std.2) == sorted_hashes(rb.2);
        checks.push(Check {
            name: EQUIVALENCE.into(),
            subject: "leaves".into(),
            predicted: "identical".into(),
            observed: if same { "identical" } else { "different" }.into(),
            ok: same,
        });
    }

    Ok(FormulaReport {
        x: x.to_vec(),
        leaf_count,
        s_std,
        s_rollback,
        eta: ratio_string(&eta),
        eta_decimal: to_decimal(&eta, 12),
        observed,
        observed_step_ratio,
        observed_token_ratio,
        checks,
    })
}

/// Cross-checks a standard and a rollback report of the same tree against
/// the closed forms. Violations are flagged in the returned report.
pub fn verify_formulas(a: &SweepReport, b: &SweepReport) -> Result<FormulaReport, SweepError> {
    if a.x != b.x {
        return Err(SweepError::Incomparable(format!("x differs: {} vs {}", list(&a.x), list(&b.x))));
    }
    if a.strategy == b.strategy {
        return Err(SweepError::Incomparable(format!("both reports use the {} strategy", a.strategy)));
    }
    let (std, rb) = if a.strategy == Strategy::Standard { (a, b) } else { (b, a) };
    build(
        &a.x,
        &[
            (Strategy::Standard, &std.accounting, &std.leaves),
            (Strategy::Rollback, &rb.accounting, &rb.leaves),
        ],
    )
}
