//! Caching and call-counting backend wrappers.
//!
//! The persistent cache is an append-only UTF-8 file with one record per
//! line:
//!
//! ```text
//! <hex key>\t<JSON array of candidate tokens>\t<JSON array of log-probs>
//! ```
//!
//! The key is the SHA-256 of the backend identity, the prompt, and the
//! ordered candidate list. Unparseable lines are skipped on load and the
//! corresponding queries are simply issued again.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};

use sha2::{Digest, Sha256};

use super::{Backend, BackendError};

#[derive(Debug, Clone)]
struct Record {
    candidates: Vec<String>,
    log_probs: Vec<f64>,
}

/// In-memory map of cached responses, optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct CacheStore {
    entries: RwLock<HashMap<String, Record>>,
    file: Option<Mutex<File>>,
    skipped: usize,
}

impl CacheStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists and appends new records to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        let mut skipped = 0;
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match parse_record(&line, i + 1) {
                    Ok((key, record)) => {
                        entries.insert(key, record);
                    }
                    Err(err) => {
                        log::warn!("{err}; the query will be re-issued");
                        skipped += 1;
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of corrupt records ignored when the file was loaded.
    pub fn skipped_records(&self) -> usize {
        self.skipped
    }

    fn get(&self, key: &str, candidates: &[String]) -> Option<Vec<f64>> {
        let entries = self.entries.read().expect("cache lock poisoned");
        entries
            .get(key)
            .filter(|r| r.candidates == candidates)
            .map(|r| r.log_probs.clone())
    }

    fn insert(&self, key: String, record: Record) -> Result<(), BackendError> {
        if let Some(file) = &self.file {
            let line = format!(
                "{key}\t{}\t{}\n",
                serde_json::to_string(&record.candidates).expect("strings serialize"),
                serde_json::to_string(&record.log_probs).expect("finite floats serialize"),
            );
            let mut file = file.lock().expect("cache file lock poisoned");
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert(key, record);
        Ok(())
    }
}

fn parse_record(line: &str, line_no: usize) -> Result<(String, Record), BackendError> {
    let corrupt = |message: String| BackendError::CacheCorrupt {
        line: line_no,
        message,
    };
    let mut fields = line.splitn(3, '\t');
    let (Some(key), Some(cands), Some(probs)) = (fields.next(), fields.next(), fields.next())
    else {
        return Err(corrupt("expected 3 tab-separated fields".into()));
    };
    if key.len() != 64 || !key.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(corrupt(format!("bad key {key:?}")));
    }
    let candidates: Vec<String> =
        serde_json::from_str(cands).map_err(|e| corrupt(format!("candidates: {e}")))?;
    let log_probs: Vec<f64> =
        serde_json::from_str(probs).map_err(|e| corrupt(format!("log-probs: {e}")))?;
    if candidates.len() != log_probs.len() {
        return Err(corrupt("candidate and log-prob counts differ".into()));
    }
    Ok((
        key.to_string(),
        Record {
            candidates,
            log_probs,
        },
    ))
}

/// Stable cache key for one query.
pub fn cache_key(identity: &str, prompt: &str, candidates: &[String]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((identity.len() as u64).to_le_bytes());
    hasher.update(identity.as_bytes());
    hasher.update((prompt.len() as u64).to_le_bytes());
    hasher.update(prompt.as_bytes());
    for c in candidates {
        hasher.update((c.len() as u64).to_le_bytes());
        hasher.update(c.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Serves repeated queries from a [`CacheStore`].
///
/// Concurrent misses on the same key are coalesced into one inner call.
pub struct CachedBackend<B> {
    inner: B,
    store: Arc<CacheStore>,
    pending: Mutex<HashSet<String>>,
    settled: Condvar,
}

impl<B: Backend> CachedBackend<B> {
    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn store(&self) -> &Arc<CacheStore> {
        &self.store
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn next_token_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        let key = cache_key(&self.inner.identity(), prompt, candidates);
        {
            let mut pending = self.pending.lock().expect("pending lock poisoned");
            loop {
                if let Some(hit) = self.store.get(&key, candidates) {
                    return Ok(hit);
                }
                if pending.insert(key.clone()) {
                    break;
                }
                pending = self.settled.wait(pending).expect("pending lock poisoned");
            }
        }
        let result = self.inner.next_token_logprobs(prompt, candidates).and_then(|log_probs| {
            self.store.insert(
                key.clone(),
                Record {
                    candidates: candidates.to_vec(),
                    log_probs: log_probs.clone(),
                },
            )?;
            Ok(log_probs)
        });
        self.pending.lock().expect("pending lock poisoned").remove(&key);
        self.settled.notify_all();
        result
    }
}

pub fn with_cache<B: Backend>(backend: B, store: Arc<CacheStore>) -> CachedBackend<B> {
    CachedBackend {
        inner: backend,
        store,
        pending: Mutex::new(HashSet::new()),
        settled: Condvar::new(),
    }
}

/// Shared handle onto a [`CountingBackend`]'s call count.
#[derive(Debug, Clone, Default)]
pub struct CallCounter(Arc<AtomicU64>);

impl CallCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::SeqCst);
    }
}

/// Counts queries that reach the wrapped backend.
pub struct CountingBackend<B> {
    inner: B,
    counter: CallCounter,
}

impl<B: Backend> CountingBackend<B> {
    pub fn counter(&self) -> CallCounter {
        self.counter.clone()
    }

    pub fn calls(&self) -> u64 {
        self.counter.get()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn next_token_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.counter.0.fetch_add(1, Ordering::SeqCst);
        self.inner.next_token_logprobs(prompt, candidates)
    }
}

pub fn with_counter<B: Backend>(backend: B) -> CountingBackend<B> {
    CountingBackend {
        inner: backend,
        counter: CallCounter::default(),
    }
}
