use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::state::{KeyPath, StateDoc, Value};

use super::CheckpointId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeStrategy {
    #[default]
    FailOnConflict,
    PreferOurs,
    PreferTheirs,
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeStrategy::FailOnConflict => "fail-on-conflict",
            MergeStrategy::PreferOurs => "prefer-ours",
            MergeStrategy::PreferTheirs => "prefer-theirs",
        })
    }
}

impl FromStr for MergeStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fail-on-conflict" | "fail" => Ok(MergeStrategy::FailOnConflict),
            "prefer-ours" | "ours" => Ok(MergeStrategy::PreferOurs),
            "prefer-theirs" | "theirs" => Ok(MergeStrategy::PreferTheirs),
            other => Err(format!("unknown merge strategy `{other}`")),
        }
    }
}

/// A key-path both sides changed differently. `None` means absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Conflict {
    pub path: KeyPath,
    pub base: Option<Value>,
    pub ours: Option<Value>,
    pub theirs: Option<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MergeResult {
    /// Committed merge. `resolved` lists conflicts settled by the strategy.
    Merged { checkpoint: CheckpointId, state: StateDoc, resolved: Vec<Conflict> },
    Conflicts(Vec<Conflict>),
}

impl MergeResult {
    /// Non-empty exactly for the conflict variant.
    pub fn conflicts(&self) -> &[Conflict] {
        match self {
            MergeResult::Merged { .. } => &[],
            MergeResult::Conflicts(c) => c,
        }
    }
}

/// Three-way merge at flattened key-path granularity; lists are atomic.
///
/// A path changed on one side takes that side; a path changed identically
/// on both takes the shared value; anything else conflicts. A merged leaf
/// that would sit above another merged leaf (one side replaced a map with a
/// scalar while the other wrote inside it) conflicts at the shorter path.
/// Returns the merged document plus any conflicts the strategy resolved, or
/// the conflict list under [`MergeStrategy::FailOnConflict`].
pub fn three_way_merge(
    base: &StateDoc,
    ours: &StateDoc,
    theirs: &StateDoc,
    strategy: MergeStrategy,
) -> Result<(StateDoc, Vec<Conflict>), Vec<Conflict>> {
    let (b, o, t) = (base.flatten(), ours.flatten(), theirs.flatten());
    let paths: BTreeSet<&KeyPath> = b.keys().chain(o.keys()).chain(t.keys()).collect();

    let mut merged: BTreeMap<KeyPath, Value> = BTreeMap::new();
    let mut conflicts = Vec::new();
    for path in paths {
        let (bv, ov, tv) = (b.get(path), o.get(path), t.get(path));
        let pick = if ov == tv || tv == bv {
            ov
        } else if ov == bv {
            tv
        } else {
            conflicts.push(Conflict {
                path: path.clone(),
                base: bv.cloned(),
                ours: ov.cloned(),
                theirs: tv.cloned(),
            });
            match strategy {
                MergeStrategy::PreferTheirs => tv,
                _ => ov,
            }
        };
        if let Some(v) = pick {
            merged.insert(path.clone(), v.clone());
        }
    }

    // Sorted order puts a prefix directly before its descendants.
    let keys: Vec<&KeyPath> = merged.keys().collect();
    let mut collisions: Vec<KeyPath> = Vec::new();
    for pair in keys.windows(2) {
        let (p, q) = (pair[0], pair[1]);
        let covered = collisions.last().is_some_and(|c| p.starts_with(c));
        if p.is_strict_prefix_of(q) && !covered {
            collisions.push(p.clone());
        }
    }
    for prefix in &collisions {
        conflicts.retain(|c| !c.path.starts_with(prefix));
        conflicts.push(Conflict {
            path: prefix.clone(),
            base: base.get(prefix).cloned(),
            ours: ours.get(prefix).cloned(),
            theirs: theirs.get(prefix).cloned(),
        });
        let winner = match strategy {
            MergeStrategy::PreferTheirs => theirs.get(prefix),
            _ => ours.get(prefix),
        };
        merged.retain(|k, _| !k.starts_with(prefix));
        match winner {
            Some(Value::Map(m)) if !m.is_empty() => {
                let mut sub = StateDoc::new();
                sub.set(prefix, Value::Map(m.clone()));
                merged.extend(sub.flatten());
            }
            Some(v) => {
                merged.insert(prefix.clone(), v.clone());
            }
            None => {}
        }
    }
    conflicts.sort_by(|a, b| a.path.cmp(&b.path));

    if strategy == MergeStrategy::FailOnConflict && !conflicts.is_empty() {
        return Err(conflicts);
    }
    Ok((StateDoc::from_flat(&merged), conflicts))
}
