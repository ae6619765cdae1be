//! Workflow state documents and their canonical byte form.
//!
//! A [`StateDoc`] is an ordered string-keyed map of JSON-like values. Its
//! canonical serialization sorts keys by code point at every level, emits no
//! insignificant whitespace and prints numbers in shortest round-trip form,
//! so two documents are equal exactly when their canonical bytes are equal.
//! That byte string is what the checkpoint store hashes and addresses.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Deserialize, Deserializer, MapAccess, SeqAccess, Visitor};
use serde::ser::{Serialize, SerializeMap, SerializeSeq, Serializer};
use sha2::{Digest, Sha256};

/// Reserved top-level sections every workflow state carries.
pub const MESSAGES: &str = "messages";
pub const TOOL_CALLS: &str = "tool_calls";
pub const ENV: &str = "env";
pub const REASONING: &str = "reasoning";
pub const ARTIFACTS: &str = "artifacts";

/// Largest magnitude at which every integer is exactly representable in f64.
const MAX_SAFE_INTEGER: f64 = 9_007_199_254_740_992.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StateError {
    #[error("non-finite number at `{0}`")]
    NonFinite(KeyPath),
    #[error("state document must be a JSON object")]
    NotAnObject,
    #[error("parse error: {0}")]
    Parse(String),
}

/// A JSON-like value. Numbers are IEEE doubles; maps are key-sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Value {
    #[default]
    Null,
    Bool(bool),
    Number(f64),
    String(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    /// Non-negative integral numbers only.
    pub fn as_u64(&self) -> Option<u64> {
        match self {
            Value::Number(n) if *n >= 0.0 && n.fract() == 0.0 && *n <= MAX_SAFE_INTEGER => {
                Some(*n as u64)
            }
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&Vec<Value>> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, Value>> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn empty_map() -> Value {
        Value::Map(BTreeMap::new())
    }

    /// Canonical bytes of this value on its own.
    pub fn to_canonical(&self) -> Result<Vec<u8>, StateError> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        write_value(self, &mut path, &mut out)?;
        Ok(out)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::String(s.to_owned())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::String(s)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<f64> for Value {
    fn from(n: f64) -> Self {
        Value::Number(n)
    }
}

impl From<u64> for Value {
    fn from(n: u64) -> Self {
        Value::Number(n as f64)
    }
}

impl From<i64> for Value {
    fn from(n: i64) -> Self {
        Value::Number(n as f64)
    }
}

impl From<usize> for Value {
    fn from(n: usize) -> Self {
        Value::Number(n as f64)
    }
}

impl<T: Into<Value>> From<Vec<T>> for Value {
    fn from(v: Vec<T>) -> Self {
        Value::List(v.into_iter().map(Into::into).collect())
    }
}

impl From<BTreeMap<String, Value>> for Value {
    fn from(m: BTreeMap<String, Value>) -> Self {
        Value::Map(m)
    }
}

impl From<serde_json::Value> for Value {
    fn from(v: serde_json::Value) -> Self {
        match v {
            serde_json::Value::Null => Value::Null,
            serde_json::Value::Bool(b) => Value::Bool(b),
            serde_json::Value::Number(n) => Value::Number(n.as_f64().unwrap_or(f64::NAN)),
            serde_json::Value::String(s) => Value::String(s),
            serde_json::Value::Array(a) => Value::List(a.into_iter().map(Into::into).collect()),
            serde_json::Value::Object(o) => {
                Value::Map(o.into_iter().map(|(k, v)| (k, v.into())).collect())
            }
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Null => serializer.serialize_unit(),
            Value::Bool(b) => serializer.serialize_bool(*b),
            Value::Number(n) => {
                if n.fract() == 0.0 && n.abs() < MAX_SAFE_INTEGER {
                    serializer.serialize_i64(*n as i64)
                } else {
                    serializer.serialize_f64(*n)
                }
            }
            Value::String(s) => serializer.serialize_str(s),
            Value::List(items) => {
                let mut seq = serializer.serialize_seq(Some(items.len()))?;
                for item in items {
                    seq.serialize_element(item)?;
                }
                seq.end()
            }
            Value::Map(entries) => {
                let mut map = serializer.serialize_map(Some(entries.len()))?;
                for (k, v) in entries {
                    map.serialize_entry(k, v)?;
                }
                map.end()
            }
        }
    }
}

struct ValueVisitor;

impl<'de> Visitor<'de> for ValueVisitor {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a JSON value")
    }

    fn visit_unit<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_none<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_bool<E>(self, v: bool) -> Result<Value, E> {
        Ok(Value::Bool(v))
    }

    fn visit_i64<E>(self, v: i64) -> Result<Value, E> {
        Ok(Value::Number(v as f64))
    }

    fn visit_u64<E>(self, v: u64) -> Result<Value, E> {
        Ok(Value::Number(v as f64))
    }

    fn visit_f64<E>(self, v: f64) -> Result<Value, E> {
        Ok(Value::Number(v))
    }

    fn visit_str<E>(self, v: &str) -> Result<Value, E> {
        Ok(Value::String(v.to_owned()))
    }

    fn visit_string<E>(self, v: String) -> Result<Value, E> {
        Ok(Value::String(v))
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
        let mut items = Vec::new();
        while let Some(item) = seq.next_element()? {
            items.push(item);
        }
        Ok(Value::List(items))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Value, A::Error> {
        let mut map = BTreeMap::new();
        while let Some(key) = access.next_key::<String>()? {
            if map.contains_key(&key) {
                return Err(de::Error::custom(format_args!("duplicate key `{key}`")));
            }
            let value = access.next_value()?;
            map.insert(key, value);
        }
        Ok(Value::Map(map))
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(ValueVisitor)
    }
}

/// A path of map keys from the document root to a value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct KeyPath(Vec<String>);

impl KeyPath {
    pub fn new<I, S>(segments: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        KeyPath(segments.into_iter().map(Into::into).collect())
    }

    /// Splits on `.`; keys that themselves contain dots need [`KeyPath::new`].
    pub fn parse(dotted: &str) -> Self {
        KeyPath(dotted.split('.').map(str::to_owned).collect())
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn child(&self, key: &str) -> KeyPath {
        let mut segs = self.0.clone();
        segs.push(key.to_owned());
        KeyPath(segs)
    }

    pub fn is_strict_prefix_of(&self, other: &KeyPath) -> bool {
        self.0.len() < other.0.len() && other.0[..self.0.len()] == self.0[..]
    }

    pub fn starts_with(&self, prefix: &KeyPath) -> bool {
        self.0.len() >= prefix.0.len() && self.0[..prefix.0.len()] == prefix.0[..]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for KeyPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("."))
    }
}

impl From<&str> for KeyPath {
    fn from(s: &str) -> Self {
        KeyPath::parse(s)
    }
}

/// The complete state of a workflow at one point in time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateDoc(BTreeMap<String, Value>);

impl StateDoc {
    pub fn new() -> Self {
        StateDoc(BTreeMap::new())
    }

    /// A document with the five reserved sections present and empty.
    pub fn with_reserved_sections() -> Self {
        let mut doc = StateDoc::new();
        doc.ensure_reserved_sections();
        doc
    }

    pub fn ensure_reserved_sections(&mut self) {
        for key in [MESSAGES, TOOL_CALLS, REASONING] {
            self.0.entry(key.to_owned()).or_insert_with(|| Value::List(Vec::new()));
        }
        for key in [ENV, ARTIFACTS] {
            self.0.entry(key.to_owned()).or_insert_with(Value::empty_map);
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, Value> {
        &self.0
    }

    pub fn into_entries(self) -> BTreeMap<String, Value> {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.0.insert(key.into(), value.into());
    }

    pub fn get(&self, path: &KeyPath) -> Option<&Value> {
        let (first, rest) = path.segments().split_first()?;
        let mut cur = self.0.get(first)?;
        for seg in rest {
            cur = cur.as_map()?.get(seg)?;
        }
        Some(cur)
    }

    /// Writes `value` at `path`, creating (or replacing non-map values with)
    /// intermediate maps as needed.
    pub fn set(&mut self, path: &KeyPath, value: Value) {
        let Some((last, parents)) = path.segments().split_last() else {
            return;
        };
        let mut cur = &mut self.0;
        for seg in parents {
            let slot = cur.entry(seg.clone()).or_insert_with(Value::empty_map);
            if !matches!(slot, Value::Map(_)) {
                *slot = Value::empty_map();
            }
            let Value::Map(m) = slot else { unreachable!() };
            cur = m;
        }
        cur.insert(last.clone(), value);
    }

    /// Removes the value at `path` and prunes parent maps left empty.
    pub fn remove(&mut self, path: &KeyPath) -> Option<Value> {
        fn go(map: &mut BTreeMap<String, Value>, segs: &[String]) -> Option<Value> {
            let (first, rest) = segs.split_first()?;
            if rest.is_empty() {
                return map.remove(first);
            }
            let Value::Map(child) = map.get_mut(first)? else {
                return None;
            };
            let removed = go(child, rest);
            if removed.is_some() && child.is_empty() {
                map.remove(first);
            }
            removed
        }
        go(&mut self.0, path.segments())
    }

    /// Appends to the list at `path`, creating it if absent.
    pub fn append(&mut self, path: &KeyPath, value: Value) {
        match self.get(path) {
            Some(Value::List(_)) => {}
            _ => self.set(path, Value::List(Vec::new())),
        }
        let mut cur = self.0.get_mut(&path.segments()[0]);
        for seg in &path.segments()[1..] {
            cur = match cur {
                Some(Value::Map(m)) => m.get_mut(seg),
                _ => None,
            };
        }
        if let Some(Value::List(items)) = cur {
            items.push(value);
        }
    }

    /// Leaf values keyed by path. Non-empty maps are descended into; lists,
    /// scalars and empty maps are leaves.
    pub fn flatten(&self) -> BTreeMap<KeyPath, Value> {
        let mut out = BTreeMap::new();
        flatten_into(&self.0, &KeyPath::default(), &mut out);
        out
    }

    pub fn from_flat(flat: &BTreeMap<KeyPath, Value>) -> StateDoc {
        let mut doc = StateDoc::new();
        for (path, value) in flat {
            doc.set(path, value.clone());
        }
        doc
    }

    pub fn canonical_bytes(&self) -> Result<Vec<u8>, StateError> {
        canonical_serialize(self)
    }

    pub fn hash(&self) -> Result<String, StateError> {
        state_hash(self)
    }
}

fn flatten_into(map: &BTreeMap<String, Value>, prefix: &KeyPath, out: &mut BTreeMap<KeyPath, Value>) {
    for (k, v) in map {
        let path = prefix.child(k);
        match v {
            Value::Map(m) if !m.is_empty() => flatten_into(m, &path, out),
            other => {
                out.insert(path, other.clone());
            }
        }
    }
}

impl TryFrom<Value> for StateDoc {
    type Error = StateError;

    fn try_from(v: Value) -> Result<Self, StateError> {
        match v {
            Value::Map(m) => Ok(StateDoc(m)),
            _ => Err(StateError::NotAnObject),
        }
    }
}

impl From<StateDoc> for Value {
    fn from(doc: StateDoc) -> Self {
        Value::Map(doc.0)
    }
}

impl Serialize for StateDoc {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for StateDoc {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        StateDoc::try_from(v).map_err(de::Error::custom)
    }
}

/// Deterministic canonical bytes for `state`.
pub fn canonical_serialize(state: &StateDoc) -> Result<Vec<u8>, StateError> {
    let mut out = Vec::with_capacity(64);
    let mut path = Vec::new();
    write_map(&state.0, &mut path, &mut out)?;
    Ok(out)
}

/// Parses a JSON document into a [`StateDoc`], rejecting duplicate keys.
pub fn parse(bytes: &[u8]) -> Result<StateDoc, StateError> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| StateError::Parse(e.to_string()))?;
    StateDoc::try_from(v)
}

/// Lowercase hex SHA-256 of the canonical bytes.
pub fn state_hash(state: &StateDoc) -> Result<String, StateError> {
    Ok(sha256_hex(&canonical_serialize(state)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_value(v: &Value, path: &mut Vec<String>, out: &mut Vec<u8>) -> Result<(), StateError> {
    match v {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Number(n) => write_number(*n, path, out)?,
        Value::String(s) => write_string(s, out),
        Value::List(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, path, out)?;
            }
            out.push(b']');
        }
        Value::Map(m) => write_map(m, path, out)?,
    }
    Ok(())
}

fn write_map(
    map: &BTreeMap<String, Value>,
    path: &mut Vec<String>,
    out: &mut Vec<u8>,
) -> Result<(), StateError> {
    // BTreeMap<String> orders by UTF-8 bytes, which matches code point order.
    out.push(b'{');
    for (i, (k, v)) in map.iter().enumerate() {
        if i > 0 {
            out.push(b',');
        }
        write_string(k, out);
        out.push(b':');
        path.push(k.clone());
        write_value(v, path, out)?;
        path.pop();
    }
    out.push(b'}');
    Ok(())
}

fn write_number(n: f64, path: &[String], out: &mut Vec<u8>) -> Result<(), StateError> {
    if !n.is_finite() {
        return Err(StateError::NonFinite(KeyPath(path.to_vec())));
    }
    if n.fract() == 0.0 && n.abs() < MAX_SAFE_INTEGER {
        // Also folds -0 into 0.
        out.extend_from_slice((n as i64).to_string().as_bytes());
    } else {
        let mut buf = ryu::Buffer::new();
        out.extend_from_slice(buf.format_finite(n).as_bytes());
    }
    Ok(())
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    // serde_json's escaping is fixed: `"`, `\`, and control characters only.
    serde_json::to_writer(&mut *out, s).expect("writing to a Vec cannot fail");
}

/// Key-path granular difference between two documents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diff {
    pub added: BTreeMap<KeyPath, Value>,
    pub removed: BTreeMap<KeyPath, Value>,
    pub changed: BTreeMap<KeyPath, (Value, Value)>,
}

impl Diff {
    pub fn between(base: &StateDoc, target: &StateDoc) -> Diff {
        let from = base.flatten();
        let to = target.flatten();
        let mut diff = Diff::default();
        for (path, old) in &from {
            match to.get(path) {
                None => {
                    diff.removed.insert(path.clone(), old.clone());
                }
                Some(new) if new != old => {
                    diff.changed.insert(path.clone(), (old.clone(), new.clone()));
                }
                Some(_) => {}
            }
        }
        for (path, new) in to {
            if !from.contains_key(&path) {
                diff.added.insert(path, new);
            }
        }
        diff
    }

    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }

    /// Removals run first so that a path turning from leaf into map (or back)
    /// lands cleanly.
    pub fn apply(&self, base: &StateDoc) -> StateDoc {
        let mut doc = base.clone();
        for path in self.removed.keys() {
            doc.remove(path);
        }
        for (path, (_, new)) in &self.changed {
            doc.set(path, new.clone());
        }
        for (path, value) in &self.added {
            doc.set(path, value.clone());
        }
        doc
    }

    pub fn to_value(&self) -> Value {
        let flat = |m: &BTreeMap<KeyPath, Value>| {
            Value::Map(m.iter().map(|(k, v)| (k.to_string(), v.clone())).collect())
        };
        let changed = Value::Map(
            self.changed
                .iter()
                .map(|(k, (old, new))| (k.to_string(), Value::List(vec![old.clone(), new.clone()])))
                .collect(),
        );
        let mut out = BTreeMap::new();
        out.insert("added".to_owned(), flat(&self.added));
        out.insert("removed".to_owned(), flat(&self.removed));
        out.insert("changed".to_owned(), changed);
        Value::Map(out)
    }
}

/// A set of writes a step makes to the state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Delta {
    pub set: Vec<(KeyPath, Value)>,
    pub append: Vec<(KeyPath, Value)>,
}

impl Delta {
    pub fn is_empty(&self) -> bool {
        self.set.is_empty() && self.append.is_empty()
    }

    pub fn set(mut self, path: impl Into<KeyPath>, value: impl Into<Value>) -> Self {
        self.set.push((path.into(), value.into()));
        self
    }

    pub fn append(mut self, path: impl Into<KeyPath>, value: impl Into<Value>) -> Self {
        self.append.push((path.into(), value.into()));
        self
    }

    pub fn apply_to(&self, state: &mut StateDoc) {
        for (path, value) in &self.set {
            state.set(path, value.clone());
        }
        for (path, value) in &self.append {
            state.append(path, value.clone());
        }
    }

    /// Paths this delta writes to.
    pub fn paths(&self) -> Vec<&KeyPath> {
        self.set.iter().chain(&self.append).map(|(p, _)| p).collect()
    }
}
