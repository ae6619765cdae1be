//! Cost curves over uniform trees and aggregate run reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::BigUint;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::journal::{AttemptStatus, JournalRecord};
use crate::state::Value;
use crate::sweep::{
    efficiency, predicted_steps_rollback, predicted_steps_standard, ratio_string, to_decimal, uniform, verify_formulas,
    Check, Strategy, SweepError, SweepReport,
};

pub const CURVE_HEADER: &str = "alpha,n,s_std,s_rollback,eta,eta_over_n";
pub const ALPHA_RANGE: std::ops::RangeInclusive<u64> = 2..=9;
pub const N_MAX_RANGE: std::ops::RangeInclusive<u32> = 1..=40;
/// Significant digits for the `eta` columns.
pub const ETA_DIGITS: u32 = 12;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("alpha {0} outside 2..=9")]
    Alpha(u64),
    #[error("no alphas given")]
    NoAlphas,
    #[error("n_max {0} outside 1..=40")]
    NMax(u32),
    #[error(transparent)]
    Sweep(#[from] SweepError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurvePoint {
    pub alpha: u64,
    pub n: u32,
    pub s_std: BigUint,
    pub s_rollback: BigUint,
    pub eta: BigRational,
    pub eta_over_n: BigRational,
}

impl CurvePoint {
    pub fn new(alpha: u64, n: u32) -> Self {
        let x = uniform(alpha, n as usize);
        let eta = efficiency(&x).expect("uniform tree is non-empty");
        CurvePoint {
            alpha,
            n,
            s_std: predicted_steps_standard(&x).expect("uniform tree is non-empty"),
            s_rollback: predicted_steps_rollback(&x).expect("uniform tree is non-empty"),
            eta_over_n: &eta / BigRational::from_integer(n.into()),
            eta,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.alpha,
            self.n,
            self.s_std,
            self.s_rollback,
            to_decimal(&self.eta, ETA_DIGITS),
            to_decimal(&self.eta_over_n, ETA_DIGITS)
        )
    }
}

/// One point per `(alpha, n)`, alphas in the given order, `n = 1..=n_max`.
pub fn curve_points(alphas: &[u64], n_max: u32) -> Result<Vec<CurvePoint>, MetricsError> {
    if alphas.is_empty() {
        return Err(MetricsError::NoAlphas);
    }
    if let Some(&bad) = alphas.iter().find(|a| !ALPHA_RANGE.contains(a)) {
        return Err(MetricsError::Alpha(bad));
    }
    if !N_MAX_RANGE.contains(&n_max) {
        return Err(MetricsError::NMax(n_max));
    }
    Ok(alphas
        .iter()
        .flat_map(|&alpha| (1..=n_max).map(move |n| CurvePoint::new(alpha, n)))
        .collect())
}

/// CSV with header [`CURVE_HEADER`]; step counts are exact integers.
pub fn emit_curves(alphas: &[u64], n_max: u32) -> Result<Vec<u8>, MetricsError> {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for point in curve_points(alphas, n_max)? {
        out.push_str(&point.csv_row());
        out.push('\n');
    }
    Ok(out.into_bytes())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub steps: u64,
    pub failed_attempts: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_ms: u64,
    /// Completed leaves, when a sweep report covers this group.
    pub leaves: Option<u64>,
    /// `journal` or `report`.
    pub source: String,
}

impl Totals {
    fn add(&mut self, r: &JournalRecord) {
        self.steps += 1;
        if r.status == AttemptStatus::Failed {
            self.failed_attempts += 1;
        }
        self.tokens_in += r.tokens_in;
        self.tokens_out += r.tokens_out;
        self.wall_ms += r.wall_ms;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    /// Keyed by strategy for sweeps, otherwise by run id.
    pub totals: BTreeMap<String, Totals>,
    pub observed_step_ratio: Option<String>,
    pub observed_token_ratio: Option<String>,
    pub checks: Vec<Check>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let json = serde_json::to_value(self).expect("run report serializes");
        Value::from(json).to_canonical().expect("run report is finite")
    }

    pub fn table(&self) -> String {
        if self.totals.is_empty() {
            return "no runs\n".into();
        }
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>10} {:>10} {:>9} {:>7}", "group", "steps", "failed", "tokens_in", "tokens_out", "wall_ms", "leaves");
        for (group, t) in &self.totals {
            let leaves = t.leaves.map_or("-".to_owned(), |l| l.to_string());
            let _ = writeln!(
                out,
                "{:<16} {:>8} {:>8} {:>10} {:>10} {:>9} {:>7}",
                group, t.steps, t.failed_attempts, t.tokens_in, t.tokens_out, t.wall_ms, leaves
            );
        }
        if let Some(r) = &self.observed_step_ratio {
            let _ = writeln!(out, "steps rollback/standard = {r}");
        }
        if let Some(r) = &self.observed_token_ratio {
            let _ = writeln!(out, "tokens rollback/standard = {r}");
        }
        for c in self.checks.iter().filter(|c| !c.ok) {
            let _ = writeln!(out, "violated: {} for {} (predicted {}, observed {})", c.name, c.subject, c.predicted, c.observed);
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> Option<String> {
    (den > 0).then(|| ratio_string(&BigRational::new(num.into(), den.into())))
}

/// Totals per group from journal records, joined with any sweep reports.
///
/// Journal records whose run id matches a sweep report are grouped under its
/// strategy. A sweep without journal records contributes its own accounting.
/// With one standard and one rollback sweep of the same tree the formula
/// checks are included.
pub fn build_run_report(journals: &[Vec<JournalRecord>], sweeps: &[SweepReport]) -> Result<RunReport, MetricsError> {
    let group_of: BTreeMap<&str, String> = sweeps.iter().map(|s| (s.run_id.as_str(), s.strategy.to_string())).collect();
    let mut report = RunReport::default();
    for record in journals.iter().flatten() {
        let group = group_of.get(record.run_id.as_str()).cloned().unwrap_or_else(|| record.run_id.clone());
        report
            .totals
            .entry(group)
            .or_insert_with(|| Totals { source: "journal".into(), ..Default::default() })
            .add(record);
    }
    for sweep in sweeps {
        let group = sweep.strategy.to_string();
        let leaves = sweep.leaves.iter().filter(|l| l.is_ok()).count() as u64;
        let a = &sweep.accounting;
        match report.totals.get_mut(&group) {
            Some(t) => {
                t.leaves = Some(t.leaves.unwrap_or(0) + leaves);
                report.checks.push(Check {
                    name: "journal".into(),
                    subject: group.clone(),
                    predicted: a.steps_executed.to_string(),
                    observed: t.steps.to_string(),
                    ok: a.steps_executed == t.steps,
                });
            }
            None => {
                report.totals.insert(
                    group,
                    Totals {
                        steps: a.steps_executed,
                        failed_attempts: 0,
                        tokens_in: a.tokens_in,
                        tokens_out: a.tokens_out,
                        wall_ms: a.wall_ms,
                        leaves: Some(leaves),
                        source: "report".into(),
                    },
                );
            }
        }
    }
    let std = report.totals.get(&Strategy::Standard.to_string());
    let rb = report.totals.get(&Strategy::Rollback.to_string());
    if let (Some(std), Some(rb)) = (std, rb) {
        report.observed_step_ratio = ratio(rb.steps, std.steps);
        report.observed_token_ratio = ratio(rb.tokens_in + rb.tokens_out, std.tokens_in + std.tokens_out);
    }
    let std = sweeps.iter().find(|s| s.strategy == Strategy::Standard);
    let rb = sweeps.iter().find(|s| s.strategy == Strategy::Rollback);
    if let (Some(std), Some(rb)) = (std, rb) {
        report.checks.extend(verify_formulas(std, rb)?.checks);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(alphas: &[u64], n_max: u32) -> Vec<String> {
        String::from_utf8(emit_curves(alphas, n_max).unwrap()).unwrap().lines().map(str::to_owned).collect()
    }

    #[test]
    fn header_and_row_count() {
        let r = rows(&[2, 3, 4, 5], 10);
        assert_eq!(r[0], CURVE_HEADER);
        assert_eq!(r.len(), 41);
    }

    #[test]
    fn known_rows() {
        let r = rows(&[2], 3);
        assert_eq!(r[3], "2,3,24,14,1.71428571429,0.571428571429");
        assert_eq!(rows(&[5], 1)[1], "5,1,5,5,1,1");
    }

    #[test]
    fn big_values_are_exact() {
        let r = rows(&[5], 40);
        let last: Vec<&str> = r[40].split(',').collect();
        assert_eq!(last[2], (BigUint::from(5u32).pow(40) * 40u32).to_string());
    }

    #[test]
    fn limit_gap_at_thirty() {
        let p = CurvePoint::new(2, 30);
        let gap = &p.eta_over_n - BigRational::new(1.into(), 2.into());
        assert!(gap < BigRational::new(1.into(), 1_000_000.into()));
    }

    #[test]
    fn domain() {
        assert!(matches!(emit_curves(&[1], 3), Err(MetricsError::Alpha(1))));
        assert!(matches!(emit_curves(&[10], 3), Err(MetricsError::Alpha(10))));
        assert!(matches!(emit_curves(&[2], 0), Err(MetricsError::NMax(0))));
        assert!(matches!(emit_curves(&[2], 41), Err(MetricsError::NMax(41))));
        assert!(matches!(emit_curves(&[], 3), Err(MetricsError::NoAlphas)));
    }

    #[test]
    fn empty_report() {
        let r = build_run_report(&[], &[]).unwrap();
        assert!(r.totals.is_empty() && r.checks.is_empty());
        assert_eq!(r.table(), "no runs\n");
    }

    #[test]
    fn journal_totals() {
        let rec = |status, tin| JournalRecord {
            ts: 0,
            run_id: "r".into(),
            step: "s".into(),
            option: "o".into(),
            status,
            tokens_in: tin,
            tokens_out: 1,
            wall_ms: 2,
        };
        let r = build_run_report(&[vec![rec(AttemptStatus::Failed, 0), rec(AttemptStatus::Ok, 7)]], &[]).unwrap();
        let t = &r.totals["r"];
        assert_eq!((t.steps, t.failed_attempts, t.tokens_in, t.tokens_out, t.wall_ms), (2, 1, 7, 2, 4));
    }
}
