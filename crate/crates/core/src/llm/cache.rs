use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{ChatClient, ChatRequest, ChatResponse, LlmError};

#[derive(Serialize, Deserialize)]
struct Record {
    key: String,
    response: ChatResponse,
}

struct State {
    entries: HashMap<String, ChatResponse>,
    log: Option<File>,
}

/// Content-addressed response cache in front of another client, persisted
/// as an append-only JSON-lines log. In cache-only mode there is no inner
/// client and a miss is an error.
pub struct CachedClient<C> {
    inner: Option<C>,
    path: Option<PathBuf>,
    state: Mutex<State>,
    misses: Mutex<u64>,
}

impl<C: ChatClient> CachedClient<C> {
    /// Cache backed by `path` (created if absent). Unreadable lines are
    /// skipped with a warning; the last record for a key wins.
    pub fn open(inner: C, path: impl AsRef<Path>) -> Result<Self, LlmError> {
        Self::build(Some(inner), Some(path.as_ref()))
    }

    pub fn in_memory(inner: C) -> Self {
        Self::build(Some(inner), None).expect("no file involved")
    }

    /// Replays `path` and refuses anything not already recorded.
    pub fn cache_only(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        Self::build(None, Some(path.as_ref()))
    }

    fn build(inner: Option<C>, path: Option<&Path>) -> Result<Self, LlmError> {
        let mut entries = HashMap::new();
        let mut log = None;
        if let Some(p) = path {
            if p.exists() {
                for (i, line) in BufReader::new(File::open(p)?).lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    match serde_json::from_str::<Record>(&line) {
                        Ok(r) => {
                            entries.insert(r.key, r.response);
                        }
                        Err(e) => warn!("{}:{}: unreadable cache record: {e}", p.display(), i + 1),
                    }
                }
            } else if inner.is_none() {
                return Err(LlmError::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("cache file {} not found", p.display()),
                )));
            }
            if inner.is_some() {
                log = Some(OpenOptions::new().create(true).append(true).open(p)?);
            }
        }
        Ok(Self {
            inner,
            path: path.map(Path::to_path_buf),
            state: Mutex::new(State { entries, log }),
            misses: Mutex::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Requests that had to go to the inner client.
    pub fn misses(&self) -> u64 {
        *self.misses.lock().unwrap()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

impl<C: ChatClient> ChatClient for CachedClient<C> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let key = request.cache_key();
        if let Some(hit) = self.state.lock().unwrap().entries.get(&key) {
            return Ok(hit.clone());
        }
        let Some(inner) = &self.inner else {
            return Err(LlmError::CacheMiss(key));
        };
        *self.misses.lock().unwrap() += 1;
        // the lock is not held across the network call
        let response = inner.complete(request)?;
        let mut state = self.state.lock().unwrap();
        if let Some(f) = &mut state.log {
            let line = serde_json::to_string(&Record {
                key: key.clone(),
                response: response.clone(),
            })
            .expect("responses serialize");
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        state.entries.insert(key, response.clone());
        Ok(response)
    }
}
