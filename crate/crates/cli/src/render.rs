//! Text renderings of store contents.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use agentgit::state::{Diff, Value};
use agentgit::store::{Checkpoint, CheckpointId, Conflict, Store, StoreError};

pub struct LogCounts {
    pub checkpoints: usize,
    pub edges: usize,
    pub leaves: usize,
}

fn show(v: &Value) -> String {
    v.to_canonical()
        .map(|b| String::from_utf8_lossy(&b).into_owned())
        .unwrap_or_else(|_| "<non-finite>".into())
}

fn show_opt(v: &Option<Value>) -> String {
    v.as_ref().map_or_else(|| "(absent)".into(), show)
}

/// Pre-order listing of the checkpoint forest, parents before children.
///
/// Siblings are ordered by option taken, then branch, then id. Leaves carry a
/// `[leaf]` marker; branch heads are listed in parentheses.
pub fn log(store: &Store, graph: bool) -> Result<(String, LogCounts), StoreError> {
    let all = store.checkpoints()?;
    let mut counts = LogCounts { checkpoints: all.len(), edges: 0, leaves: 0 };
    if all.is_empty() {
        return Ok(("no checkpoints\n".into(), counts));
    }
    let head = store.head_branch().ok().map(|b| b.to_string());
    let mut refs: HashMap<CheckpointId, Vec<String>> = HashMap::new();
    for (branch, id) in store.branches()? {
        let name = branch.to_string();
        let label = if Some(&name) == head.as_ref() { format!("HEAD -> {name}") } else { name };
        refs.entry(id).or_default().push(label);
    }

    let by_id: BTreeMap<CheckpointId, &Checkpoint> = all.iter().map(|c| (c.id.clone(), c)).collect();
    let mut children: HashMap<CheckpointId, Vec<&Checkpoint>> = HashMap::new();
    let mut roots = Vec::new();
    for cp in &all {
        match &cp.parent {
            Some(p) => children.entry(p.clone()).or_default().push(cp),
            None => roots.push(cp),
        }
    }
    let order = |a: &&Checkpoint, b: &&Checkpoint| {
        (a.option_taken, &a.branch, &a.id).cmp(&(b.option_taken, &b.branch, &b.id))
    };
    roots.sort_by(order);
    for kids in children.values_mut() {
        kids.sort_by(order);
    }
    counts.edges = all.iter().filter(|c| c.parent.as_ref().is_some_and(|p| by_id.contains_key(p))).count();

    let mut out = String::new();
    // Depth-first with an explicit stack of (checkpoint, graph prefix, connector).
    let mut stack: Vec<(&Checkpoint, String, &str)> = roots.iter().rev().map(|c| (*c, String::new(), "")).collect();
    while let Some((cp, prefix, connector)) = stack.pop() {
        let kids = children.get(&cp.id).map(Vec::as_slice).unwrap_or_default();
        let option = cp.option_taken.map_or("-".to_owned(), |o| o.to_string());
        let lead = if graph { format!("{prefix}{connector}") } else { String::new() };
        let _ = write!(out, "{lead}{} step={} option={option} {}", cp.id.short(), cp.step_index, cp.message);
        if let Some(names) = refs.get(&cp.id) {
            let _ = write!(out, " ({})", names.join(", "));
        }
        if kids.is_empty() {
            counts.leaves += 1;
            out.push_str(" [leaf]");
        }
        out.push('\n');
        let child_prefix = match connector {
            "" => prefix.clone(),
            "└── " => format!("{prefix}    "),
            _ => format!("{prefix}│   "),
        };
        for (i, kid) in kids.iter().enumerate().rev() {
            let conn = if i + 1 == kids.len() { "└── " } else { "├── " };
            stack.push((kid, child_prefix.clone(), conn));
        }
    }
    let _ = writeln!(out, "checkpoints={} edges={} leaves={}", counts.checkpoints, counts.edges, counts.leaves);
    Ok((out, counts))
}

pub fn diff(d: &Diff) -> String {
    if d.is_empty() {
        return "no differences\n".into();
    }
    let mut lines: Vec<(String, String)> = Vec::new();
    for (path, v) in &d.added {
        lines.push((path.to_string(), format!("+ {path} = {}", show(v))));
    }
    for (path, v) in &d.removed {
        lines.push((path.to_string(), format!("- {path} = {}", show(v))));
    }
    for (path, (a, b)) in &d.changed {
        lines.push((path.to_string(), format!("~ {path}: {} -> {}", show(a), show(b))));
    }
    lines.sort();
    lines.into_iter().map(|(_, l)| l + "\n").collect()
}

pub fn conflict(c: &Conflict) -> String {
    format!("{}: base={} ours={} theirs={}", c.path, show_opt(&c.base), show_opt(&c.ours), show_opt(&c.theirs))
}
