use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendQuery, BackendResponse, QueryKind};

/// One line of a fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayEntry {
    pub key_hash: String,
    pub kind: QueryKind,
    pub text: String,
    pub token_logprobs: BTreeMap<String, f64>,
}

impl ReplayEntry {
    pub fn new(query: &BackendQuery, response: &BackendResponse) -> Self {
        Self {
            key_hash: query.key(),
            kind: query.kind,
            text: response.text.clone(),
            token_logprobs: response.token_logprobs.clone(),
        }
    }

    fn response(&self) -> BackendResponse {
        BackendResponse {
            text: self.text.clone(),
            token_logprobs: self.token_logprobs.clone(),
        }
    }
}

fn fixture_err(path: &Path, message: impl Into<String>) -> BackendError {
    BackendError::Fixture {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn read_entries(path: &Path) -> Result<Vec<ReplayEntry>, BackendError> {
    let file = fs::File::open(path).map_err(|e| fixture_err(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| fixture_err(path, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ReplayEntry =
            serde_json::from_str(&line).map_err(|e| fixture_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Writes entries sorted by key so re-recording yields stable diffs.
pub fn write_entries<'a>(path: &Path, entries: impl IntoIterator<Item = &'a ReplayEntry>) -> Result<(), BackendError> {
    let mut sorted: Vec<&ReplayEntry> = entries.into_iter().collect();
    sorted.sort_by(|a, b| a.key_hash.cmp(&b.key_hash));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| fixture_err(path, e.to_string()))?;
    }
    let file = fs::File::create(path).map_err(|e| fixture_err(path, e.to_string()))?;
    let mut w = BufWriter::new(file);
    for e in sorted {
        let line = serde_json::to_string(e).expect("entry serializes");
        writeln!(w, "{line}").map_err(|e| fixture_err(path, e.to_string()))?;
    }
    w.flush().map_err(|e| fixture_err(path, e.to_string()))
}

/// Read-only fixture table; a pure function of the query.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    table: HashMap<String, ReplayEntry>,
}

impl ReplayBackend {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        Ok(Self::from_entries(read_entries(path.as_ref())?))
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        Self {
            table: entries.into_iter().map(|e| (e.key_hash.clone(), e)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn query(&self, q: &BackendQuery) -> Result<BackendResponse, BackendError> {
        let key = q.key();
        self.table
            .get(&key)
            .map(ReplayEntry::response)
            .ok_or(BackendError::ReplayMiss { key })
    }
}

/// Serves recorded entries and forwards misses to `inner`, remembering them.
/// Call [`RecordingBackend::save`] to persist.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    entries: Mutex<BTreeMap<String, ReplayEntry>>,
}

impl<B: Backend> RecordingBackend<B> {
    /// Starts from the entries already in `path` if the file exists.
    pub fn open(inner: B, path: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let path = path.into();
        let entries = if path.exists() {
            read_entries(&path)?
                .into_iter()
                .map(|e| (e.key_hash.clone(), e))
                .collect()
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            inner,
            path,
            entries: Mutex::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("recording lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self) -> Result<(), BackendError> {
        let entries = self.entries.lock().expect("recording lock");
        write_entries(&self.path, entries.values())
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn query(&self, q: &BackendQuery) -> Result<BackendResponse, BackendError> {
        let key = q.key();
        if let Some(e) = self.entries.lock().expect("recording lock").get(&key) {
            return Ok(e.response());
        }
        let response = self.inner.query(q)?;
        self.entries
            .lock()
            .expect("recording lock")
            .insert(key, ReplayEntry::new(q, &response));
        Ok(response)
    }
}
