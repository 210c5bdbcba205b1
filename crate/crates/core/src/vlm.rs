//! Multimodal chat backends.
//!
//! Every model call in the pipeline (fact generation, judging, policies, the
//! code agent) goes through [`ChatBackend::complete`]. Backends compose:
//! a live HTTP client can be wrapped in a [`Limited`] in-flight cap and a
//! [`RecordingBackend`], and a recorded cassette can later be served by
//! [`ReplayBackend`] for fully deterministic runs.
//!
//! # Wire protocol
//!
//! [`HttpBackend`] speaks the common chat-completions shape: a JSON body with
//! `model`, `messages` (one `system` message, one `user` message whose content
//! is a list of `{"type":"text"}` and `{"type":"image_url"}` parts carrying
//! `data:image/png;base64,...` URLs), `temperature`, `max_tokens` and an
//! optional `seed`. The reply text is read from `choices[0].message.content`.
//! Endpoint, key and default model come from `WIDESCALE_API_BASE`,
//! `WIDESCALE_API_KEY` and `WIDESCALE_MODEL`.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raster::Raster;

pub const ENV_API_BASE: &str = "WIDESCALE_API_BASE";
pub const ENV_API_KEY: &str = "WIDESCALE_API_KEY";
pub const ENV_MODEL: &str = "WIDESCALE_MODEL";

#[derive(Clone, Debug, PartialEq)]
pub enum UserPart {
    Text(String),
    Image(Arc<Raster>),
}

impl UserPart {
    pub fn text(s: impl Into<String>) -> Self {
        UserPart::Text(s.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            UserPart::Text(s) => Some(s),
            UserPart::Image(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f32,
    pub max_tokens: u32,
    /// Varied per retry so a fresh sample is drawn.
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.0,
            max_tokens: 4096,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub system: String,
    pub parts: Vec<UserPart>,
    pub sampling: SamplingParams,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, system: impl Into<String>) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            system: system.into(),
            parts: Vec::new(),
            sampling: SamplingParams::default(),
        }
    }

    pub fn text(mut self, s: impl Into<String>) -> Self {
        self.parts.push(UserPart::Text(s.into()));
        self
    }

    pub fn image(mut self, image: Arc<Raster>) -> Self {
        self.parts.push(UserPart::Image(image));
        self
    }

    pub fn images(&self) -> impl Iterator<Item = &Arc<Raster>> {
        self.parts.iter().filter_map(|p| match p {
            UserPart::Image(r) => Some(r),
            UserPart::Text(_) => None,
        })
    }

    /// All text parts joined by newlines.
    pub fn user_text(&self) -> String {
        self.parts
            .iter()
            .filter_map(UserPart::as_text)
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Stable content hash over model id, prompts, image digests and
    /// sampling parameters. Every field is length-prefixed.
    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(b"widescale-request-v1");
        field(self.model_id.as_bytes());
        field(self.system.as_bytes());
        field(&(self.parts.len() as u64).to_le_bytes());
        for part in &self.parts {
            match part {
                UserPart::Text(s) => {
                    field(b"text");
                    field(s.as_bytes());
                }
                UserPart::Image(r) => {
                    field(b"image");
                    field(&r.digest().0);
                }
            }
        }
        field(&self.sampling.temperature.to_bits().to_le_bytes());
        field(&self.sampling.max_tokens.to_le_bytes());
        match self.sampling.seed {
            Some(s) => field(&s.to_le_bytes()),
            None => field(b"none"),
        }
        Fingerprint(h.finalize().into())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        hex::decode(s).ok()?.try_into().ok().map(Fingerprint)
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..16])
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("no cassette entry for request fingerprint {0}")]
    ReplayMiss(Fingerprint),
    #[error("cassette i/o error at {path}: {message}")]
    Cassette { path: PathBuf, message: String },
    #[error("backend rejected request: {0}")]
    Rejected(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

/// Always answers with the same text.
#[derive(Clone, Debug)]
pub struct StaticBackend(pub String);

impl StaticBackend {
    pub fn new(text: impl Into<String>) -> Self {
        StaticBackend(text.into())
    }
}

impl ChatBackend for StaticBackend {
    fn complete(&self, _request: &ChatRequest) -> Result<String, BackendError> {
        Ok(self.0.clone())
    }
}

/// Serves canned responses in order; errors once exhausted.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<String>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            queue: Mutex::new(responses.into_iter().map(Into::into).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Requests received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.seen.lock().unwrap().push(request.clone());
        self.queue
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| BackendError::Unavailable("scripted responses exhausted".into()))
    }
}

/// Wraps a closure.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (self.0)(request)
    }
}

/// A backend that is never reachable.
#[derive(Clone, Debug, Default)]
pub struct OfflineBackend;

impl ChatBackend for OfflineBackend {
    fn complete(&self, _request: &ChatRequest) -> Result<String, BackendError> {
        Err(BackendError::Unavailable("backend is offline".into()))
    }
}

/// Counting semaphore for the in-flight cap.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// Caps the number of concurrent requests reaching `inner`.
pub struct Limited<B> {
    inner: B,
    gate: Semaphore,
}

impl<B: ChatBackend> Limited<B> {
    pub fn new(inner: B, max_in_flight: usize) -> Self {
        Limited {
            inner,
            gate: Semaphore {
                permits: Mutex::new(max_in_flight.max(1)),
                freed: Condvar::new(),
            },
        }
    }
}

impl<B: ChatBackend> ChatBackend for Limited<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let _permit = self.gate.acquire();
        self.inner.complete(request)
    }
}

/// Live chat-completions client. Transport failures, 429 and 5xx responses
/// are retried with exponential backoff.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    default_model: String,
    max_retries: u32,
    base_delay: Duration,
}

impl HttpBackend {
    pub const MAX_RETRIES: u32 = 3;

    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, default_model: impl Into<String>) -> Self {
        HttpBackend {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(300))
                .build()
                .expect("http client builds"),
            endpoint: endpoint.into(),
            api_key,
            default_model: default_model.into(),
            max_retries: Self::MAX_RETRIES,
            base_delay: Duration::from_millis(500),
        }
    }

    pub fn from_env() -> Result<Self, BackendError> {
        let base = std::env::var(ENV_API_BASE)
            .map_err(|_| BackendError::Unavailable(format!("{ENV_API_BASE} is not set")))?;
        let key = std::env::var(ENV_API_KEY).ok();
        let model = std::env::var(ENV_MODEL).unwrap_or_default();
        let endpoint = format!("{}/chat/completions", base.trim_end_matches('/'));
        Ok(Self::new(endpoint, key, model))
    }

    pub fn with_backoff(mut self, base_delay: Duration, max_retries: u32) -> Self {
        self.base_delay = base_delay;
        self.max_retries = max_retries;
        self
    }

    pub fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        let content: Vec<serde_json::Value> = request
            .parts
            .iter()
            .map(|p| match p {
                UserPart::Text(s) => serde_json::json!({"type": "text", "text": s}),
                UserPart::Image(r) => serde_json::json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{}", png_base64(r.image()))}
                }),
            })
            .collect();
        let model = if request.model_id.is_empty() {
            &self.default_model
        } else {
            &request.model_id
        };
        let mut body = serde_json::json!({
            "model": model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": content},
            ],
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_tokens,
        });
        if let Some(seed) = request.sampling.seed {
            body["seed"] = seed.into();
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, (bool, BackendError)> {
        let mut call = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call
            .send()
            .map_err(|e| (true, BackendError::Unavailable(e.to_string())))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err((true, BackendError::Unavailable(format!("http status {status}"))));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err((false, BackendError::Rejected(format!("http status {status}: {text}"))));
        }
        let value: serde_json::Value = resp
            .json()
            .map_err(|e| (true, BackendError::Unavailable(format!("invalid response body: {e}"))))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| (false, BackendError::Rejected("response has no message content".into())))
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let body = self.request_body(request);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((true, e)) if attempt < self.max_retries => {
                    tracing::warn!(attempt, error = %e, "retrying chat request");
                    std::thread::sleep(self.base_delay * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err((_, e)) => return Err(e),
            }
        }
    }
}

fn png_base64(image: &RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("png encoding into memory");
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

const CASSETTE_MAGIC: &[u8; 8] = b"WSCASS01";

/// Recorded `fingerprint -> response` pairs.
///
/// File layout: the 8-byte magic `WSCASS01`, then records of
/// `u32 LE length, fingerprint hex` followed by `u32 LE length, UTF-8 response`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cassette {
    entries: IndexMap<Fingerprint, String>,
}

impl Cassette {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, fp: &Fingerprint) -> Option<&str> {
        self.entries.get(fp).map(String::as_str)
    }

    /// Overwrites any previous response for the same fingerprint.
    pub fn insert(&mut self, fp: Fingerprint, response: String) {
        self.entries.insert(fp, response);
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Fingerprint, &str)> {
        self.entries.iter().map(|(k, v)| (k, v.as_str()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CASSETTE_MAGIC.to_vec();
        for (fp, response) in &self.entries {
            for field in [fp.to_hex().as_bytes(), response.as_bytes()] {
                out.extend_from_slice(&(field.len() as u32).to_le_bytes());
                out.extend_from_slice(field);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let rest = bytes
            .strip_prefix(CASSETTE_MAGIC.as_slice())
            .ok_or("missing cassette header")?;
        fn take<'a>(cursor: &mut &'a [u8], what: &str) -> Result<&'a [u8], String> {
            if cursor.len() < 4 {
                return Err(format!("truncated {what} length"));
            }
            let (len, tail) = cursor.split_at(4);
            let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
            if tail.len() < len {
                return Err(format!("truncated {what}"));
            }
            let (field, tail) = tail.split_at(len);
            *cursor = tail;
            Ok(field)
        }
        let mut cursor = rest;
        let mut cassette = Cassette::default();
        while !cursor.is_empty() {
            let fp = std::str::from_utf8(take(&mut cursor, "fingerprint")?)
                .ok()
                .and_then(Fingerprint::from_hex)
                .ok_or("invalid fingerprint")?;
            let response = std::str::from_utf8(take(&mut cursor, "response")?)
                .map_err(|e| e.to_string())?;
            cassette.insert(fp, response.to_string());
        }
        Ok(cassette)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let bytes = fs::read(path).map_err(|e| BackendError::Cassette {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_bytes(&bytes).map_err(|message| BackendError::Cassette {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let err = |e: std::io::Error| BackendError::Cassette {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(err)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(err)?;
        fs::rename(&tmp, path).map_err(err)
    }
}

/// Serves responses from a cassette; unknown requests fail with
/// [`BackendError::ReplayMiss`].
#[derive(Clone, Debug)]
pub struct ReplayBackend {
    cassette: Cassette,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> Self {
        ReplayBackend { cassette }
    }

    pub fn open(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(Cassette::load(path)?))
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let fp = request.fingerprint();
        self.cassette
            .get(&fp)
            .map(str::to_string)
            .ok_or(BackendError::ReplayMiss(fp))
    }
}

/// Passthrough that records every successful response and rewrites the
/// cassette file after each call.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    cassette: Mutex<Cassette>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn cassette(&self) -> Cassette {
        self.cassette.lock().unwrap().clone()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Wraps `live` so its traffic is appended to the cassette at `path`. An
/// existing cassette is extended; re-recorded fingerprints are overwritten.
pub fn record_session<B: ChatBackend>(live: B, path: &Path) -> Result<RecordingBackend<B>, BackendError> {
    let cassette = if path.exists() {
        Cassette::load(path)?
    } else {
        Cassette::default()
    };
    cassette.save(path)?;
    Ok(RecordingBackend {
        inner: live,
        path: path.to_path_buf(),
        cassette: Mutex::new(cassette),
    })
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let response = self.inner.complete(request)?;
        let mut cassette = self.cassette.lock().unwrap();
        cassette.insert(request.fingerprint(), response.clone());
        cassette.save(&self.path)?;
        Ok(response)
    }
}

/// Contents of the last `<tag>...</tag>` pair in `text`, trimmed.
pub fn extract_tag<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.rfind(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(text[start..end].trim())
}

/// The `<answer>` block if present, otherwise the whole reply.
pub fn answer_text(text: &str) -> &str {
    extract_tag(text, "answer").unwrap_or(text.trim())
}
