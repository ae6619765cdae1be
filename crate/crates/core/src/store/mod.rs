//! Content-addressed checkpoint tree.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! objects/st/<2-char prefix>/<digest>   canonical StateDoc bytes
//! objects/cp/<2-char prefix>/<digest>   canonical checkpoint record bytes
//! refs/branches/<name>                  64-hex head id + newline
//! HEAD                                  current branch name
//! store.meta                            {"format_version":1}
//! ```
//!
//! Objects are write-once (temp file + rename). Branch heads move only by
//! compare-and-swap through an exclusive `<name>.lock` file, so concurrent
//! committers on one branch serialize and the loser gets
//! [`StoreError::SerializationConflict`]. Nothing is ever deleted.

mod merge;

pub use merge::{three_way_merge, Conflict, MergeResult, MergeStrategy};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::state::{self, sha256_hex, Diff, StateDoc, StateError, Value};

pub const FORMAT_VERSION: u64 = 1;
const META_FILE: &str = "store.meta";
const HEAD_FILE: &str = "HEAD";
const DEFAULT_BRANCH: &str = "main";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not a store root: {0}")]
    NotAStoreRoot(PathBuf),
    #[error("not a store: {0}")]
    NotAStore(PathBuf),
    #[error("unsupported store format version {0}")]
    UnsupportedVersion(String),
    #[error("unknown checkpoint {0}")]
    UnknownCheckpoint(String),
    #[error("ambiguous checkpoint prefix {0}")]
    AmbiguousRef(String),
    #[error("unknown branch `{0}`")]
    UnknownBranch(String),
    #[error("branch `{0}` already exists")]
    DuplicateBranch(String),
    #[error("invalid branch name `{0}`")]
    InvalidBranchName(String),
    #[error("serialization conflict on branch `{branch}`: {detail}; retry")]
    SerializationConflict { branch: String, detail: String },
    #[error("no common ancestor between {0} and {1}")]
    NoCommonAncestor(CheckpointId, CheckpointId),
    #[error("corrupt object {0}: {1}")]
    Corrupt(String, String),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Lowercase hex SHA-256 digest addressing a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CheckpointId(String);

impl CheckpointId {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn short(&self) -> &str {
        &self.0[..8]
    }
}

fn is_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

impl FromStr for CheckpointId {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        if is_digest(s) {
            Ok(CheckpointId(s.to_owned()))
        } else {
            Err(StoreError::UnknownCheckpoint(s.to_owned()))
        }
    }
}

impl TryFrom<String> for CheckpointId {
    type Error = StoreError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CheckpointId> for String {
    fn from(id: CheckpointId) -> String {
        id.0
    }
}

impl fmt::Display for CheckpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Validated branch name: `[A-Za-z0-9._/-]+`, no leading `-`, and no path
/// segment that is empty, `.`, `..`, or ends in `.lock`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BranchName(String);

impl BranchName {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let charset_ok = !name.is_empty()
            && name
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'/' | b'-'));
        let segments_ok = name
            .split('/')
            .all(|seg| !seg.is_empty() && seg != "." && seg != ".." && !seg.ends_with(".lock"));
        if charset_ok && segments_ok && !name.starts_with('-') {
            Ok(BranchName(name))
        } else {
            Err(StoreError::InvalidBranchName(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for BranchName {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        BranchName::new(s)
    }
}

impl fmt::Display for BranchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Cost of producing one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepAccounting {
    pub attempts: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_ms: u64,
}

/// Immutable node of the version tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub id: CheckpointId,
    pub parent: Option<CheckpointId>,
    pub state_hash: String,
    pub step_index: u32,
    pub option_taken: Option<usize>,
    pub branch: String,
    pub created_at: u64,
    pub message: String,
    pub accounting: Option<StepAccounting>,
    pub metadata: BTreeMap<String, String>,
}

/// Checkpoint record as written to disk; the id is its address, not a field.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    parent: Option<CheckpointId>,
    state_hash: String,
    step_index: u32,
    option_taken: Option<usize>,
    branch: String,
    created_at: u64,
    message: String,
    accounting: Option<StepAccounting>,
    metadata: BTreeMap<String, String>,
}

impl Record {
    fn canonical(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_value(self).map_err(io::Error::other)?;
        Ok(Value::from(json).to_canonical()?)
    }

    fn into_checkpoint(self, id: CheckpointId) -> Checkpoint {
        Checkpoint {
            id,
            parent: self.parent,
            state_hash: self.state_hash,
            step_index: self.step_index,
            option_taken: self.option_taken,
            branch: self.branch,
            created_at: self.created_at,
            message: self.message,
            accounting: self.accounting,
            metadata: self.metadata,
        }
    }
}

/// Extra fields for [`Store::commit`].
#[derive(Debug, Clone, Default)]
pub struct CommitOptions {
    pub message: String,
    pub option_taken: Option<usize>,
    pub accounting: Option<StepAccounting>,
    pub metadata: BTreeMap<String, String>,
}

impl CommitOptions {
    pub fn message(message: impl Into<String>) -> Self {
        CommitOptions { message: message.into(), ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ObjectKind {
    State,
    Checkpoint,
}

impl ObjectKind {
    fn dir(self) -> &'static str {
        match self {
            ObjectKind::State => "st",
            ObjectKind::Checkpoint => "cp",
        }
    }
}

/// Handle to an on-disk store. Cheap to clone; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    clock: Clock,
}

/// Removes a ref lock file unless it was consumed by the final rename.
struct LockGuard {
    path: PathBuf,
    armed: bool,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        if self.armed {
            let _ = fs::remove_file(&self.path);
        }
    }
}

impl Store {
    /// Creates the store layout at `root`, or opens it if it already is one.
    pub fn init(root: impl AsRef<Path>) -> Result<Store> {
        let root = root.as_ref().to_path_buf();
        if root.join(META_FILE).is_file() {
            return Store::open(&root);
        }
        if root.exists() {
            let reusable = root.is_dir() && fs::read_dir(&root)?.next().is_none();
            if !reusable {
                return Err(StoreError::NotAStoreRoot(root));
            }
        }
        for dir in ["objects/st", "objects/cp", "refs/branches", "tmp"] {
            fs::create_dir_all(root.join(dir))?;
        }
        fs::write(root.join(HEAD_FILE), format!("{DEFAULT_BRANCH}\n"))?;
        let meta = format!("{{\"format_version\":{FORMAT_VERSION}}}");
        let store = Store { root, clock: Clock::System };
        // The meta file goes last: its presence marks a complete layout.
        store.write_atomic(&store.root.join(META_FILE), meta.as_bytes())?;
        Ok(store)
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Store> {
        let root = root.as_ref().to_path_buf();
        let meta = fs::read(root.join(META_FILE)).map_err(|_| StoreError::NotAStore(root.clone()))?;
        let version = state::parse(&meta)
            .ok()
            .and_then(|doc| doc.get(&"format_version".into()).and_then(Value::as_u64));
        if version != Some(FORMAT_VERSION) {
            return Err(StoreError::UnsupportedVersion(String::from_utf8_lossy(&meta).into_owned()));
        }
        Ok(Store { root, clock: Clock::System })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_path(&self, kind: ObjectKind, digest: &str) -> PathBuf {
        self.root.join("objects").join(kind.dir()).join(&digest[..2]).join(digest)
    }

    fn ref_path(&self, branch: &BranchName) -> PathBuf {
        self.root.join("refs/branches").join(branch.as_str())
    }

    fn write_atomic(&self, target: &Path, bytes: &[u8]) -> Result<()> {
        let tmp_dir = self.root.join("tmp");
        fs::create_dir_all(&tmp_dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&tmp_dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(target).map_err(|e| e.error)?;
        Ok(())
    }

    /// Write-once object put. Returns false when the object already existed.
    fn put_object(&self, kind: ObjectKind, digest: &str, bytes: &[u8]) -> Result<bool> {
        let path = self.object_path(kind, digest);
        if path.exists() {
            return Ok(false);
        }
        fs::create_dir_all(path.parent().expect("object path has a parent"))?;
        self.write_atomic(&path, bytes)?;
        Ok(true)
    }

    fn read_object(&self, kind: ObjectKind, digest: &str) -> Result<Option<Vec<u8>>> {
        if !is_digest(digest) {
            return Ok(None);
        }
        match fs::read(self.object_path(kind, digest)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn list_objects(&self, kind: ObjectKind) -> Result<Vec<String>> {
        let base = self.root.join("objects").join(kind.dir());
        let mut out = Vec::new();
        for prefix in fs::read_dir(&base)? {
            let prefix = prefix?;
            if !prefix.file_type()?.is_dir() {
                continue;
            }
            for entry in fs::read_dir(prefix.path())? {
                let name = entry?.file_name().to_string_lossy().into_owned();
                if is_digest(&name) {
                    out.push(name);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Number of distinct state blobs stored.
    pub fn state_blob_count(&self) -> Result<usize> {
        Ok(self.list_objects(ObjectKind::State)?.len())
    }

    pub fn checkpoint_ids(&self) -> Result<Vec<CheckpointId>> {
        Ok(self.list_objects(ObjectKind::Checkpoint)?.into_iter().map(CheckpointId).collect())
    }

    /// Loads a checkpoint record, verifying it hashes to its address.
    pub fn checkpoint(&self, id: &CheckpointId) -> Result<Checkpoint> {
        let bytes = self
            .read_object(ObjectKind::Checkpoint, id.as_str())?
            .ok_or_else(|| StoreError::UnknownCheckpoint(id.to_string()))?;
        if sha256_hex(&bytes) != id.as_str() {
            return Err(StoreError::Corrupt(id.to_string(), "record does not match its address".into()));
        }
        let record: Record = serde_json::from_slice(&bytes)
            .map_err(|e| StoreError::Corrupt(id.to_string(), e.to_string()))?;
        Ok(record.into_checkpoint(id.clone()))
    }

    pub fn contains(&self, id: &CheckpointId) -> bool {
        self.object_path(ObjectKind::Checkpoint, id.as_str()).is_file()
    }

    /// All checkpoints, sorted by (step_index, id).
    pub fn checkpoints(&self) -> Result<Vec<Checkpoint>> {
        let mut all = self
            .checkpoint_ids()?
            .iter()
            .map(|id| self.checkpoint(id))
            .collect::<Result<Vec<_>>>()?;
        all.sort_by(|a, b| (a.step_index, &a.id).cmp(&(b.step_index, &b.id)));
        Ok(all)
    }

    /// Raw stored bytes of a state blob, unverified.
    pub fn state_blob(&self, state_hash: &str) -> Result<Option<Vec<u8>>> {
        self.read_object(ObjectKind::State, state_hash)
    }

    /// Writes `state` under its hash; returns the hash.
    pub fn put_state(&self, state: &StateDoc) -> Result<String> {
        let bytes = state::canonical_serialize(state)?;
        let digest = sha256_hex(&bytes);
        self.put_object(ObjectKind::State, &digest, &bytes)?;
        Ok(digest)
    }

    /// Returns the exact state committed at `id`. Never modifies the store.
    pub fn checkout(&self, id: &CheckpointId) -> Result<StateDoc> {
        let cp = self.checkpoint(id)?;
        let bytes = self
            .state_blob(&cp.state_hash)?
            .ok_or_else(|| StoreError::Corrupt(cp.state_hash.clone(), "missing state blob".into()))?;
        if sha256_hex(&bytes) != cp.state_hash {
            return Err(StoreError::Corrupt(cp.state_hash, "state blob does not match its address".into()));
        }
        Ok(state::parse(&bytes)?)
    }

    /// Records a new checkpoint and advances `branch` to it.
    ///
    /// With a parent, `branch` must exist and currently point at the parent.
    /// Without one this is a root commit and `branch` is created with it.
    pub fn commit(
        &self,
        parent: Option<&CheckpointId>,
        state: &StateDoc,
        branch: &BranchName,
        opts: CommitOptions,
    ) -> Result<CheckpointId> {
        let step_index = match parent {
            Some(p) => self.checkpoint(p)?.step_index + 1,
            None => 0,
        };
        let ref_path = self.ref_path(branch);
        if parent.is_some() && !ref_path.is_file() {
            return Err(StoreError::UnknownBranch(branch.to_string()));
        }
        let record = Record {
            parent: parent.cloned(),
            state_hash: String::new(),
            step_index,
            option_taken: opts.option_taken,
            branch: branch.to_string(),
            created_at: self.clock.now_ms(),
            message: opts.message,
            accounting: opts.accounting,
            metadata: opts.metadata,
        };
        self.with_ref_lock(branch, parent, |store| {
            let record = Record { state_hash: store.put_state(state)?, ..record };
            let bytes = record.canonical()?;
            let id = CheckpointId(sha256_hex(&bytes));
            store.put_object(ObjectKind::Checkpoint, id.as_str(), &bytes)?;
            Ok(id)
        })
    }

    /// Runs `write` while holding `branch`'s lock with its head equal to
    /// `expected`, then points the branch at the returned id.
    fn with_ref_lock(
        &self,
        branch: &BranchName,
        expected: Option<&CheckpointId>,
        write: impl FnOnce(&Store) -> Result<CheckpointId>,
    ) -> Result<CheckpointId> {
        let ref_path = self.ref_path(branch);
        fs::create_dir_all(ref_path.parent().expect("ref path has a parent"))?;
        let lock_path = lock_path_for(&ref_path);
        let mut lock = match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(StoreError::SerializationConflict {
                    branch: branch.to_string(),
                    detail: "ref is locked by another writer".into(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let mut guard = LockGuard { path: lock_path.clone(), armed: true };

        let current = read_ref(&ref_path)?;
        if current.as_ref() != expected {
            return Err(match (expected, current) {
                (None, Some(_)) => StoreError::DuplicateBranch(branch.to_string()),
                (_, found) => StoreError::SerializationConflict {
                    branch: branch.to_string(),
                    detail: format!(
                        "expected head {}, found {}",
                        expected.map_or("none".into(), |id| id.to_string()),
                        found.map_or("none".into(), |id| id.to_string())
                    ),
                },
            });
        }
        let id = write(self)?;
        writeln!(lock, "{id}")?;
        lock.sync_all()?;
        drop(lock);
        fs::rename(&lock_path, &ref_path)?;
        guard.armed = false;
        Ok(id)
    }

    pub fn branch_head(&self, branch: &BranchName) -> Result<Option<CheckpointId>> {
        read_ref(&self.ref_path(branch))
    }

    /// New branch at `from`, inheriting its full state.
    pub fn create_branch(&self, name: &BranchName, from: &CheckpointId) -> Result<()> {
        if !self.contains(from) {
            return Err(StoreError::UnknownCheckpoint(from.to_string()));
        }
        self.with_ref_lock(name, None, |_| Ok(from.clone()))?;
        Ok(())
    }

    /// All branches and their heads, sorted by name.
    pub fn branches(&self) -> Result<Vec<(BranchName, CheckpointId)>> {
        let base = self.root.join("refs/branches");
        let mut out = Vec::new();
        let mut stack = vec![base.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                let path = entry.path();
                if entry.file_type()?.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path.strip_prefix(&base).expect("walked under base");
                let name = rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "/");
                let (Ok(branch), Some(head)) = (BranchName::new(name), read_ref(&path)?) else {
                    continue;
                };
                out.push((branch, head));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn head_branch(&self) -> Result<BranchName> {
        let text = fs::read_to_string(self.root.join(HEAD_FILE))?;
        BranchName::new(text.trim())
    }

    pub fn set_head_branch(&self, branch: &BranchName) -> Result<()> {
        self.write_atomic(&self.root.join(HEAD_FILE), format!("{branch}\n").as_bytes())
    }

    /// Resolves a full id, a branch name, or a unique id prefix (≥ 4 hex).
    pub fn resolve(&self, reference: &str) -> Result<CheckpointId> {
        if is_digest(reference) {
            let id = CheckpointId(reference.to_owned());
            if self.contains(&id) {
                return Ok(id);
            }
        }
        if let Ok(branch) = BranchName::new(reference) {
            if let Some(head) = self.branch_head(&branch)? {
                return Ok(head);
            }
        }
        let is_prefix = reference.len() >= 4
            && reference.len() < 64
            && reference.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if is_prefix {
            let dir = self.root.join("objects/cp").join(&reference[..2]);
            let mut hits = Vec::new();
            if dir.is_dir() {
                for entry in fs::read_dir(dir)? {
                    let name = entry?.file_name().to_string_lossy().into_owned();
                    if name.starts_with(reference) && is_digest(&name) {
                        hits.push(name);
                    }
                }
            }
            match hits.len() {
                1 => return Ok(CheckpointId(hits.remove(0))),
                0 => {}
                _ => return Err(StoreError::AmbiguousRef(reference.to_owned())),
            }
        }
        Err(StoreError::UnknownCheckpoint(reference.to_owned()))
    }

    /// Ids from the root down to `id` inclusive.
    pub fn ancestry(&self, id: &CheckpointId) -> Result<Vec<CheckpointId>> {
        let mut chain = vec![id.clone()];
        let mut cur = self.checkpoint(id)?;
        while let Some(parent) = cur.parent.clone() {
            cur = self.checkpoint(&parent)?;
            chain.push(parent);
        }
        chain.reverse();
        Ok(chain)
    }

    /// Deepest checkpoint on both ancestries.
    pub fn lowest_common_ancestor(&self, a: &CheckpointId, b: &CheckpointId) -> Result<CheckpointId> {
        let ours: BTreeSet<CheckpointId> = self.ancestry(a)?.into_iter().collect();
        let theirs = self.ancestry(b)?;
        theirs
            .into_iter()
            .rev()
            .find(|id| ours.contains(id))
            .ok_or_else(|| StoreError::NoCommonAncestor(a.clone(), b.clone()))
    }

    /// Direct children of every checkpoint that has any.
    pub fn children_index(&self) -> Result<HashMap<CheckpointId, Vec<CheckpointId>>> {
        let mut index: HashMap<CheckpointId, Vec<CheckpointId>> = HashMap::new();
        for cp in self.checkpoints()? {
            if let Some(parent) = cp.parent {
                index.entry(parent).or_default().push(cp.id);
            }
        }
        Ok(index)
    }

    pub fn children(&self, id: &CheckpointId) -> Result<Vec<CheckpointId>> {
        if !self.contains(id) {
            return Err(StoreError::UnknownCheckpoint(id.to_string()));
        }
        Ok(self.children_index()?.remove(id).unwrap_or_default())
    }

    pub fn diff(&self, base: &CheckpointId, target: &CheckpointId) -> Result<Diff> {
        Ok(Diff::between(&self.checkout(base)?, &self.checkout(target)?))
    }

    /// Three-way merge of `theirs` into `ours` against their common ancestor.
    ///
    /// On success a checkpoint is committed on `branch` with parent `ours`;
    /// `theirs` is recorded under the `merged_from` metadata key only, so the
    /// history stays a tree. `branch` is created at `ours` if missing.
    pub fn merge(
        &self,
        ours: &CheckpointId,
        theirs: &CheckpointId,
        strategy: MergeStrategy,
        branch: &BranchName,
        message: &str,
    ) -> Result<MergeResult> {
        let base_id = self.lowest_common_ancestor(ours, theirs)?;
        let base = self.checkout(&base_id)?;
        let ours_state = self.checkout(ours)?;
        let theirs_state = self.checkout(theirs)?;
        let (merged, resolved) = match three_way_merge(&base, &ours_state, &theirs_state, strategy) {
            Ok(ok) => ok,
            Err(conflicts) => return Ok(MergeResult::Conflicts(conflicts)),
        };
        if self.branch_head(branch)?.is_none() {
            self.create_branch(branch, ours)?;
        }
        let mut opts = CommitOptions::message(message);
        opts.metadata.insert("merged_from".into(), theirs.to_string());
        opts.metadata.insert("merge_base".into(), base_id.to_string());
        opts.metadata.insert("merge_strategy".into(), strategy.to_string());
        let checkpoint = self.commit(Some(ours), &merged, branch, opts)?;
        Ok(MergeResult::Merged { checkpoint, state: merged, resolved })
    }
}

fn lock_path_for(ref_path: &Path) -> PathBuf {
    let mut name = ref_path.file_name().expect("ref has a file name").to_os_string();
    name.push(".lock");
    ref_path.with_file_name(name)
}

fn read_ref(path: &Path) -> Result<Option<CheckpointId>> {
    match fs::read_to_string(path) {
        Ok(text) => {
            let text = text.trim();
            if is_digest(text) {
                Ok(Some(CheckpointId(text.to_owned())))
            } else {
                Err(StoreError::Corrupt(path.display().to_string(), "malformed ref".into()))
            }
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) if e.kind() == io::ErrorKind::IsADirectory => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::parse;

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::init(dir.path().join("s")).unwrap().with_clock(Clock::Frozen);
        (dir, store)
    }

    fn main() -> BranchName {
        BranchName::new("main").unwrap()
    }

    fn doc(json: &str) -> StateDoc {
        parse(json.as_bytes()).unwrap()
    }

    #[test]
    fn fresh_store_is_empty() {
        let (_d, s) = store();
        assert!(s.checkpoint_ids().unwrap().is_empty());
        assert!(s.branches().unwrap().is_empty());
        assert_eq!(s.head_branch().unwrap(), main());
        assert_eq!(
            fs::read_to_string(s.root().join("store.meta")).unwrap(),
            r#"{"format_version":1}"#
        );
    }

    #[test]
    fn reinit_is_idempotent() {
        let (_d, s) = store();
        let id = s.commit(None, &StateDoc::new(), &main(), CommitOptions::message("root")).unwrap();
        let again = Store::init(s.root()).unwrap();
        assert_eq!(again.checkpoint_ids().unwrap(), vec![id]);
    }

    #[test]
    fn init_on_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, "x").unwrap();
        let err = Store::init(&file).unwrap_err();
        assert!(err.to_string().contains("not a store root"), "{err}");
    }

    #[test]
    fn open_missing_store_fails() {
        let dir = tempfile::tempdir().unwrap();
        let err = Store::open(dir.path()).unwrap_err();
        assert!(err.to_string().contains("not a store"));
    }

    #[test]
    fn root_round_trip() {
        let (_d, s) = store();
        let id = s.commit(None, &StateDoc::new(), &main(), CommitOptions::message("root")).unwrap();
        assert_eq!(s.checkout(&id).unwrap(), StateDoc::new());
        let cp = s.checkpoint(&id).unwrap();
        assert_eq!(cp.parent, None);
        assert_eq!(cp.step_index, 0);
        assert_eq!(s.branch_head(&main()).unwrap(), Some(id));
    }

    #[test]
    fn identical_states_share_one_blob() {
        let (_d, s) = store();
        let root = s.commit(None, &doc(r#"{"a":1}"#), &main(), CommitOptions::message("root")).unwrap();
        let same = doc(r#"{"x":true}"#);
        let c1 = s.commit(Some(&root), &same, &main(), CommitOptions::message("one")).unwrap();
        let c2 = s.commit(Some(&c1), &same, &main(), CommitOptions::message("two")).unwrap();
        assert_ne!(c1, c2);
        assert_eq!(s.checkpoint_ids().unwrap().len(), 3);
        assert_eq!(s.state_blob_count().unwrap(), 2);
    }

    #[test]
    fn unknown_parent_rejected() {
        let (_d, s) = store();
        let bogus: CheckpointId = "deadbeef".repeat(8).parse().unwrap();
        let err = s.commit(Some(&bogus), &StateDoc::new(), &main(), CommitOptions::default()).unwrap_err();
        assert!(err.to_string().contains("unknown checkpoint"));
    }

    #[test]
    fn checkout_unknown() {
        let (_d, s) = store();
        let zero: CheckpointId = "0".repeat(64).parse().unwrap();
        assert!(s.checkout(&zero).unwrap_err().to_string().contains("unknown checkpoint"));
    }

    #[test]
    fn stale_parent_is_serialization_conflict() {
        let (_d, s) = store();
        let root = s.commit(None, &StateDoc::new(), &main(), CommitOptions::default()).unwrap();
        s.commit(Some(&root), &doc(r#"{"a":1}"#), &main(), CommitOptions::default()).unwrap();
        let err = s.commit(Some(&root), &doc(r#"{"a":2}"#), &main(), CommitOptions::default()).unwrap_err();
        assert!(matches!(err, StoreError::SerializationConflict { .. }), "{err}");
    }

    #[test]
    fn held_lock_is_serialization_conflict() {
        let (_d, s) = store();
        let root = s.commit(None, &StateDoc::new(), &main(), CommitOptions::default()).unwrap();
        fs::write(s.root().join("refs/branches/main.lock"), "").unwrap();
        let err = s.commit(Some(&root), &doc(r#"{"a":1}"#), &main(), CommitOptions::default()).unwrap_err();
        assert!(matches!(err, StoreError::SerializationConflict { .. }));
        assert_eq!(s.checkpoint_ids().unwrap().len(), 1);
    }

    #[test]
    fn concurrent_commits_same_branch_serialize() {
        let (_d, s) = store();
        let root = s.commit(None, &StateDoc::new(), &main(), CommitOptions::default()).unwrap();
        let winners: Vec<bool> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..8)
                .map(|i| {
                    let s = s.clone();
                    let root = root.clone();
                    scope.spawn(move || {
                        let state = doc(&format!(r#"{{"i":{i}}}"#));
                        match s.commit(Some(&root), &state, &main(), CommitOptions::default()) {
                            Ok(_) => true,
                            Err(StoreError::SerializationConflict { .. }) => false,
                            Err(e) => panic!("{e}"),
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(winners.iter().filter(|w| **w).count(), 1);
        let head = s.branch_head(&main()).unwrap().unwrap();
        assert_eq!(s.checkpoint(&head).unwrap().parent, Some(root));
    }

    #[test]
    fn branch_name_validation() {
        for ok in ["main", "exp/cot", "sweep/2/0.1", "a_b-c.d"] {
            assert!(BranchName::new(ok).is_ok(), "{ok}");
        }
        for bad in ["", "-x", "a b", "a//b", "../x", "a/./b", "x.lock", "é", "/a", "a/"] {
            assert!(BranchName::new(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn branch_inherits_state_and_is_isolated() {
        let (_d, s) = store();
        let root = s.commit(None, &doc(r#"{"a":1}"#), &main(), CommitOptions::default()).unwrap();
        let mid = s.commit(Some(&root), &doc(r#"{"a":2}"#), &main(), CommitOptions::default()).unwrap();
        let cot = BranchName::new("exp/cot").unwrap();
        s.create_branch(&cot, &mid).unwrap();
        assert_eq!(s.checkout(&s.branch_head(&cot).unwrap().unwrap()).unwrap(), s.checkout(&mid).unwrap());
        s.commit(Some(&mid), &doc(r#"{"a":3}"#), &cot, CommitOptions::default()).unwrap();
        assert_eq!(s.branch_head(&main()).unwrap(), Some(mid.clone()));
        let err = s.create_branch(&main(), &root).unwrap_err();
        assert!(matches!(err, StoreError::DuplicateBranch(_)));
        let names: Vec<_> = s.branches().unwrap().into_iter().map(|(b, _)| b.to_string()).collect();
        assert_eq!(names, ["exp/cot", "main"]);
    }

    #[test]
    fn resolve_refs() {
        let (_d, s) = store();
        let root = s.commit(None, &StateDoc::new(), &main(), CommitOptions::default()).unwrap();
        assert_eq!(s.resolve("main").unwrap(), root);
        assert_eq!(s.resolve(root.as_str()).unwrap(), root);
        assert_eq!(s.resolve(&root.as_str()[..10]).unwrap(), root);
        assert!(s.resolve("nope").is_err());
    }

    #[test]
    fn ancestry_and_lca() {
        let (_d, s) = store();
        let root = s.commit(None, &StateDoc::new(), &main(), CommitOptions::default()).unwrap();
        let a = s.commit(Some(&root), &doc(r#"{"a":1}"#), &main(), CommitOptions::default()).unwrap();
        let b = s.commit(Some(&a), &doc(r#"{"b":1}"#), &main(), CommitOptions::default()).unwrap();
        assert_eq!(s.ancestry(&root).unwrap(), vec![root.clone()]);
        assert_eq!(s.ancestry(&b).unwrap(), vec![root.clone(), a.clone(), b.clone()]);
        assert_eq!(s.lowest_common_ancestor(&b, &b).unwrap(), b);
        assert_eq!(s.lowest_common_ancestor(&a, &b).unwrap(), a);
        let other = BranchName::new("other").unwrap();
        let lone = s.commit(None, &doc(r#"{"z":0}"#), &other, CommitOptions::default()).unwrap();
        assert!(matches!(
            s.lowest_common_ancestor(&lone, &b),
            Err(StoreError::NoCommonAncestor(..))
        ));
    }

    #[test]
    fn tampered_blob_detected_on_checkout() {
        let (_d, s) = store();
        let id = s.commit(None, &doc(r#"{"a":1}"#), &main(), CommitOptions::default()).unwrap();
        let cp = s.checkpoint(&id).unwrap();
        let path = s.object_path(ObjectKind::State, &cp.state_hash);
        fs::write(path, br#"{"a":2}"#).unwrap();
        assert!(matches!(s.checkout(&id), Err(StoreError::Corrupt(..))));
    }
}
