//! Chat-completion providers, the persistent response cache, and verified retries.
//!
//! Cache file format: JSON lines of `{"key": <hex sha256>, "response": <string>}`,
//! appended one entry per provider call. When a key repeats, the last line wins.
//! The key is the SHA-256 of the provider id followed by each message as
//! `role\ncontent` (CRLF folded to LF), NUL-separated. Retry attempts after the
//! first add `\0attempt=<n>` so re-asked prompts get their own entries.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::http::Endpoint;
use crate::prompts::{PromptBundle, PromptMessage};

pub const DEFAULT_MAX_ATTEMPTS: usize = 3;

/// A chat-style completion backend. Implementations must tolerate concurrent calls.
pub trait LlmProvider: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn provider_id(&self) -> String;

    fn complete(&self, bundle: &PromptBundle) -> Result<String>;
}

fn canonical_messages(messages: &[PromptMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push('\0');
        out.push_str(m.role.as_str());
        out.push('\n');
        out.push_str(&m.content.replace("\r\n", "\n"));
    }
    out
}

pub fn prompt_hash(messages: &[PromptMessage]) -> String {
    hex::encode(Sha256::digest(canonical_messages(messages).as_bytes()))
}

pub fn cache_key(provider_id: &str, messages: &[PromptMessage], attempt: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(provider_id.as_bytes());
    hasher.update(canonical_messages(messages).as_bytes());
    if attempt > 1 {
        hasher.update(format!("\0attempt={attempt}").as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// OpenAI-compatible chat completions client.
#[derive(Debug, Clone)]
pub struct RemoteChatProvider {
    endpoint: Endpoint,
    model: String,
    params: Map<String, Value>,
}

impl RemoteChatProvider {
    /// `params` are merged into the request body as-is (temperature, seed, ...).
    pub fn new(endpoint: Endpoint, model: impl Into<String>, params: Map<String, Value>) -> Self {
        RemoteChatProvider {
            endpoint,
            model: model.into(),
            params,
        }
    }
}

impl LlmProvider for RemoteChatProvider {
    fn provider_id(&self) -> String {
        let mut id = format!("remote:{}@{}", self.model, self.endpoint.url);
        if !self.params.is_empty() {
            id.push('?');
            id.push_str(&Value::Object(self.params.clone()).to_string());
        }
        id
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String> {
        let mut body = self.params.clone();
        body.insert("model".into(), json!(self.model));
        body.insert("messages".into(), json!(bundle.messages()));
        let response = self.endpoint.post_json(&self.provider_id(), &Value::Object(body))?;
        response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Provider {
                provider: self.provider_id(),
                message: "response has no choices[0].message.content".into(),
            })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    /// Returned on every matching call.
    Fixed(String),
    /// Returned one per call, in order; a call past the end is a mock miss.
    Sequence(Vec<String>),
}

/// Offline provider answering from a script keyed by `"<segment_id>/<stage>"`
/// or `"sha256:<prompt hash>"`. Unscripted requests fail with [`Error::MockMiss`].
#[derive(Debug)]
pub struct ScriptedMock {
    name: String,
    entries: HashMap<String, ScriptEntry>,
    cursors: Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
}

impl ScriptedMock {
    pub fn new(name: impl Into<String>, entries: HashMap<String, ScriptEntry>) -> Self {
        ScriptedMock {
            name: name.into(),
            entries,
            cursors: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_file(name: impl Into<String>, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e))?;
        Ok(Self::new(name, entries))
    }

    /// Number of `complete` calls answered so far (hits and misses).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmProvider for ScriptedMock {
    fn provider_id(&self) -> String {
        format!("mock:{}", self.name)
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let by_segment = format!("{}/{}", bundle.segment_id, bundle.stage);
        let by_hash = format!("sha256:{}", prompt_hash(bundle.messages()));
        let (key, entry) = [by_segment.clone(), by_hash]
            .into_iter()
            .find_map(|k| self.entries.get(&k).map(|e| (k, e)))
            .ok_or_else(|| Error::MockMiss(by_segment.clone()))?;
        match entry {
            ScriptEntry::Fixed(s) => Ok(s.clone()),
            ScriptEntry::Sequence(seq) => {
                let mut cursors = self.cursors.lock().expect("mock cursor lock");
                let pos = cursors.entry(key.clone()).or_insert(0);
                let reply = seq
                    .get(*pos)
                    .cloned()
                    .ok_or_else(|| Error::MockMiss(format!("{key} (script exhausted after {} replies)", seq.len())))?;
                *pos += 1;
                Ok(reply)
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    response: String,
}

/// Key → response store, optionally backed by an append-only file.
#[derive(Debug)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, String>>,
    file: Option<Mutex<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            path: None,
            entries: RwLock::new(HashMap::new()),
            file: None,
        }
    }

    /// Opens (or creates) a cache file. A torn final line from an interrupted
    /// write is ignored; corruption anywhere else is an error.
    pub fn open(path: &Path) -> Result<Self> {
        let cache_err = |message: String| Error::Cache {
            path: path.to_path_buf(),
            message,
        };
        let mut entries = HashMap::new();
        let mut keep_len = None;
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| cache_err(e.to_string()))?;
            let lines: Vec<&str> = text.lines().collect();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(line) {
                    Ok(entry) => {
                        entries.insert(entry.key, entry.response);
                    }
                    Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {
                        log::warn!("{}: dropping torn final cache line", path.display());
                        keep_len = Some(text.rfind('\n').map_or(0, |p| p + 1) as u64);
                    }
                    Err(e) => return Err(cache_err(format!("line {}: {e}", i + 1))),
                }
            }
        } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| cache_err(e.to_string()))?;
        }
        if let Some(len) = keep_len {
            OpenOptions::new()
                .write(true)
                .open(path)
                .and_then(|f| f.set_len(len))
                .map_err(|e| cache_err(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| cache_err(e.to_string()))?;
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn put(&self, key: &str, response: &str) -> Result<()> {
        if let (Some(file), Some(path)) = (&self.file, &self.path) {
            let mut line = serde_json::to_string(&CacheLine {
                key: key.to_string(),
                response: response.to_string(),
            })
            .expect("serializable");
            line.push('\n');
            let mut file = file.lock().expect("cache file lock");
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| Error::Cache {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(key.to_string(), response.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Caps concurrent requests and spaces request starts by a minimum interval.
#[derive(Debug)]
pub struct RateLimiter {
    max_in_flight: usize,
    min_interval: Duration,
    in_flight: Mutex<usize>,
    freed: Condvar,
    next_start: Mutex<Option<Instant>>,
}

impl RateLimiter {
    /// `max_in_flight == 0` means unlimited.
    pub fn new(max_in_flight: usize, min_interval: Duration) -> Self {
        RateLimiter {
            max_in_flight,
            min_interval,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            next_start: Mutex::new(None),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(0, Duration::ZERO)
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        if self.max_in_flight > 0 {
            let mut n = self.in_flight.lock().expect("limiter lock");
            while *n >= self.max_in_flight {
                n = self.freed.wait(n).expect("limiter lock");
            }
            *n += 1;
        }
        if !self.min_interval.is_zero() {
            let wait = {
                let mut next = self.next_start.lock().expect("limiter lock");
                let now = Instant::now();
                let start = next.map_or(now, |t| t.max(now));
                *next = Some(start + self.min_interval);
                start - now
            };
            thread::sleep(wait);
        }
        let out = f();
        if self.max_in_flight > 0 {
            *self.in_flight.lock().expect("limiter lock") -= 1;
            self.freed.notify_one();
        }
        out
    }
}

/// A provider plus its cache and rate limits. Counts calls that reach the provider.
pub struct LlmClient {
    provider: Arc<dyn LlmProvider>,
    cache: Option<Arc<ResponseCache>>,
    limiter: RateLimiter,
    calls: AtomicUsize,
}

impl LlmClient {
    pub fn new(provider: Arc<dyn LlmProvider>) -> Self {
        LlmClient {
            provider,
            cache: None,
            limiter: RateLimiter::unlimited(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_limiter(mut self, limiter: RateLimiter) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn provider_id(&self) -> String {
        self.provider.provider_id()
    }

    /// Calls that were not answered from the cache.
    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Completes `bundle` as the `attempt`-th try (1-based), consulting the cache first.
    pub fn complete(&self, bundle: &PromptBundle, attempt: usize) -> Result<String> {
        let key = self
            .cache
            .as_ref()
            .map(|_| cache_key(&self.provider.provider_id(), bundle.messages(), attempt));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get(key) {
                return Ok(hit);
            }
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let response = self.limiter.run(|| self.provider.complete(bundle))?;
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            cache.put(key, &response)?;
        }
        Ok(response)
    }
}

/// Single cached completion: a hit skips the provider; a miss is stored before returning.
pub fn cached_complete(provider: &dyn LlmProvider, cache: &ResponseCache, bundle: &PromptBundle) -> Result<String> {
    let key = cache_key(&provider.provider_id(), bundle.messages(), 1);
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let response = provider.complete(bundle)?;
    cache.put(&key, &response)?;
    Ok(response)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    /// Append a user message naming the rejection before re-asking.
    pub corrective: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            corrective: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion<T> {
    pub value: T,
    pub raw: String,
    pub attempts: usize,
}

/// Asks until `verify` accepts a response or attempts run out. Provider
/// errors abort immediately; only verifier rejections are retried.
pub fn complete_with_retry<T>(
    client: &LlmClient,
    bundle: &PromptBundle,
    verify: impl Fn(&str) -> std::result::Result<T, String>,
    policy: RetryPolicy,
) -> Result<Completion<T>> {
    if policy.max_attempts == 0 {
        return Err(Error::Contract("max_attempts must be at least 1".into()));
    }
    let mut current = bundle.clone();
    let mut last_raw = String::new();
    for attempt in 1..=policy.max_attempts {
        let raw = client.complete(&current, attempt)?;
        match verify(&raw) {
            Ok(value) => {
                return Ok(Completion {
                    value,
                    raw,
                    attempts: attempt,
                })
            }
            Err(reason) => {
                log::debug!(
                    "{}/{}: attempt {attempt} rejected: {reason}",
                    bundle.segment_id,
                    bundle.stage
                );
                if policy.corrective {
                    current = current.with_appended(format!(
                        "Your previous reply could not be used ({reason}). Reply again in the required format."
                    ));
                }
                last_raw = raw;
            }
        }
    }
    Err(Error::FormatFailure {
        attempts: policy.max_attempts,
        last_raw,
    })
}
