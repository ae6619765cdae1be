//! Recorded request/response pairs for external services, keyed by request
//! digest: `fixtures/<executor>/<digest>.json`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::state::{sha256_hex, Value};

use super::ExecError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FixtureMode {
    Record,
    Replay,
    #[default]
    Off,
}

impl FromStr for FixtureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "record" => Ok(FixtureMode::Record),
            "replay" => Ok(FixtureMode::Replay),
            "off" => Ok(FixtureMode::Off),
            other => Err(format!("unknown fixture mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub tokens_in: u64,
    pub tokens_out: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub request: Value,
    pub response: Value,
    pub usage: Usage,
}

#[derive(Debug)]
pub struct FixtureStore {
    mode: FixtureMode,
    root: PathBuf,
    writes: Mutex<()>,
}

impl FixtureStore {
    pub fn new(mode: FixtureMode, root: impl Into<PathBuf>) -> Self {
        FixtureStore { mode, root: root.into(), writes: Mutex::new(()) }
    }

    pub fn off() -> Self {
        FixtureStore::new(FixtureMode::Off, PathBuf::new())
    }

    pub fn mode(&self) -> FixtureMode {
        self.mode
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Digest of the executor id followed by the canonical request bytes.
    pub fn key(executor: &str, request: &Value) -> Result<String, ExecError> {
        let mut bytes = executor.as_bytes().to_vec();
        bytes.extend(request.to_canonical().map_err(|e| ExecError::Fixture(e.to_string()))?);
        Ok(sha256_hex(&bytes))
    }

    fn path(&self, executor: &str, digest: &str) -> PathBuf {
        self.root.join(executor).join(format!("{digest}.json"))
    }

    pub fn load(&self, executor: &str, digest: &str) -> Result<Option<Fixture>, ExecError> {
        match fs::read(self.path(executor, digest)) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| ExecError::Fixture(format!("{digest}: {e}"))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ExecError::Fixture(e.to_string())),
        }
    }

    /// Writes are serialized and atomic; readers never see partial files.
    pub fn save(&self, executor: &str, digest: &str, fixture: &Fixture) -> Result<(), ExecError> {
        let io_err = |e: io::Error| ExecError::Fixture(e.to_string());
        let json = serde_json::to_value(fixture).map_err(|e| ExecError::Fixture(e.to_string()))?;
        let bytes = Value::from(json).to_canonical().map_err(|e| ExecError::Fixture(e.to_string()))?;
        let path = self.path(executor, digest);
        let dir = path.parent().expect("fixture path has a parent");
        let _guard = self.writes.lock().expect("fixture write lock poisoned");
        fs::create_dir_all(dir).map_err(io_err)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
        tmp.write_all(&bytes).map_err(io_err)?;
        tmp.persist(&path).map_err(|e| io_err(e.error))?;
        Ok(())
    }

    /// Replay lookup, or the live call (persisted in record mode).
    pub fn resolve(
        &self,
        executor: &str,
        request: &Value,
        live: impl FnOnce() -> Result<(Value, Usage), ExecError>,
    ) -> Result<(Value, Usage), ExecError> {
        let digest = FixtureStore::key(executor, request)?;
        match self.mode {
            FixtureMode::Replay => {
                let fixture = self.load(executor, &digest)?.ok_or(ExecError::FixtureMiss(digest))?;
                Ok((fixture.response, fixture.usage))
            }
            FixtureMode::Record => {
                let (response, usage) = live()?;
                let fixture = Fixture { request: request.clone(), response, usage };
                self.save(executor, &digest, &fixture)?;
                Ok((fixture.response, usage))
            }
            FixtureMode::Off => live(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state;

    fn object(json: &str) -> Value {
        state::parse(json.as_bytes()).map(Value::from).unwrap()
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let req = object(r#"{"q":"agents"}"#);
        let rec = FixtureStore::new(FixtureMode::Record, dir.path());
        let usage = Usage { tokens_in: 3, tokens_out: 4 };
        let (resp, _) = rec.resolve("mock-svc", &req, || Ok((Value::from("hello"), usage))).unwrap();
        assert_eq!(resp, Value::from("hello"));

        let replay = FixtureStore::new(FixtureMode::Replay, dir.path());
        let (resp, u) = replay
            .resolve("mock-svc", &req, || panic!("replay must not go live"))
            .unwrap();
        assert_eq!((resp, u), (Value::from("hello"), usage));

        let digest = FixtureStore::key("mock-svc", &req).unwrap();
        assert!(dir.path().join("mock-svc").join(format!("{digest}.json")).is_file());
    }

    #[test]
    fn replay_miss_names_digest() {
        let dir = tempfile::tempdir().unwrap();
        let replay = FixtureStore::new(FixtureMode::Replay, dir.path());
        let req = object(r#"{"q":"unseen"}"#);
        let err = replay.resolve("svc", &req, || panic!("no network")).unwrap_err();
        let digest = FixtureStore::key("svc", &req).unwrap();
        assert_eq!(err.to_string(), format!("fixture miss: {digest}"));
    }

    #[test]
    fn key_depends_on_executor_and_request() {
        let a = object(r#"{"q":"a"}"#);
        let b = object(r#"{"q":"b"}"#);
        assert_ne!(FixtureStore::key("x", &a).unwrap(), FixtureStore::key("y", &a).unwrap());
        assert_ne!(FixtureStore::key("x", &a).unwrap(), FixtureStore::key("x", &b).unwrap());
    }
}
