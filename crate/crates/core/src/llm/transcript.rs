use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{ChatModel, ChatRequest, ChatResponse, GatewayError};

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request_hash: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

/// Append-only log of exchanges, optionally mirrored to a line-delimited
/// file. Identical requests issued repeatedly are replayed in recording
/// order.
#[derive(Debug, Default)]
pub struct Transcript {
    inner: Mutex<TranscriptState>,
}

#[derive(Debug, Default)]
struct TranscriptState {
    entries: Vec<TranscriptEntry>,
    by_hash: HashMap<String, Vec<usize>>,
    cursors: HashMap<String, usize>,
    sink: Option<(PathBuf, File)>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads entries from `path`; a missing file is an empty transcript.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let t = Transcript::new();
        if !path.exists() {
            return Ok(t);
        }
        let file = File::open(path).map_err(|e| GatewayError::Transcript(e.to_string()))?;
        {
            let mut st = t.inner.lock();
            for (lineno, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| GatewayError::Transcript(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: TranscriptEntry = serde_json::from_str(&line)
                    .map_err(|e| GatewayError::Transcript(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
                st.push(entry);
            }
        }
        Ok(t)
    }

    /// Appends every future entry to `path` as well.
    pub fn with_sink(self, path: &Path) -> Result<Self, GatewayError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::Transcript(e.to_string()))?;
        self.inner.lock().sink = Some((path.to_path_buf(), file));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.inner.lock().entries.clone()
    }

    pub fn record(&self, request: &ChatRequest, response: &ChatResponse) -> Result<(), GatewayError> {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
        let entry = TranscriptEntry {
            request_hash: request.content_hash(),
            request: request.clone(),
            response: response.clone(),
            timestamp,
        };
        let mut st = self.inner.lock();
        if let Some((path, file)) = &mut st.sink {
            let line = serde_json::to_string(&entry).expect("entry serializes");
            writeln!(file, "{line}").map_err(|e| GatewayError::Transcript(format!("{}: {e}", path.display())))?;
        }
        let hash = entry.request_hash.clone();
        st.push(entry);
        // Recording and replaying against one transcript share the cursor.
        *st.cursors.entry(hash).or_default() += 1;
        Ok(())
    }

    /// Next recorded response for `request`, advancing that request's
    /// cursor.
    pub fn next_response(&self, request: &ChatRequest) -> Option<ChatResponse> {
        let hash = request.content_hash();
        let mut st = self.inner.lock();
        let idx = *st.cursors.get(&hash).unwrap_or(&0);
        let entry_idx = *st.by_hash.get(&hash)?.get(idx)?;
        st.cursors.insert(hash, idx + 1);
        Some(st.entries[entry_idx].response.clone())
    }

    /// Rewinds every replay cursor.
    pub fn rewind(&self) {
        self.inner.lock().cursors.clear();
    }
}

impl TranscriptState {
    fn push(&mut self, entry: TranscriptEntry) {
        self.by_hash.entry(entry.request_hash.clone()).or_default().push(self.entries.len());
        self.entries.push(entry);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Forward to the backend, no recording.
    Live,
    /// Forward to the backend and record every exchange.
    Record,
    /// Serve from the transcript, falling back to (and recording) the
    /// backend on a miss.
    Replay,
    /// Serve only from the transcript; a miss is an error.
    ReplayStrict,
}

/// A [`ChatModel`] that records to, or replays from, a [`Transcript`].
pub struct Gateway {
    backend: Option<Arc<dyn ChatModel>>,
    transcript: Arc<Transcript>,
    mode: ReplayMode,
}

impl Gateway {
    pub fn new(backend: Option<Arc<dyn ChatModel>>, transcript: Arc<Transcript>, mode: ReplayMode) -> Self {
        Gateway { backend, transcript, mode }
    }

    pub fn transcript(&self) -> &Arc<Transcript> {
        &self.transcript
    }

    fn forward(&self, req: &ChatRequest, record: bool) -> Result<ChatResponse, GatewayError> {
        let backend = self.backend.as_ref().ok_or_else(|| GatewayError::FixtureMiss(req.content_hash()))?;
        let resp = match backend.complete(req) {
            Err(GatewayError::Refusal) if record => {
                // Stored as empty samples, which replay as a refusal.
                let empty = ChatResponse {
                    samples: vec![String::new(); req.n_samples as usize],
                    usage: Default::default(),
                    provider_meta: Default::default(),
                };
                self.transcript.record(req, &empty)?;
                return Err(GatewayError::Refusal);
            }
            other => other?,
        };
        if record {
            self.transcript.record(req, &resp)?;
        }
        Ok(resp)
    }
}

impl ChatModel for Gateway {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        match self.mode {
            ReplayMode::Live => self.forward(req, false),
            ReplayMode::Record => self.forward(req, true),
            ReplayMode::Replay => match self.transcript.next_response(req) {
                Some(r) => replayed(r),
                None => self.forward(req, true),
            },
            ReplayMode::ReplayStrict => match self.transcript.next_response(req) {
                Some(r) => replayed(r),
                None => Err(GatewayError::FixtureMiss(req.content_hash())),
            },
        }
    }
}

/// A recorded refusal replays as a refusal.
fn replayed(resp: ChatResponse) -> Result<ChatResponse, GatewayError> {
    if resp.samples.iter().all(|s| s.trim().is_empty()) {
        return Err(GatewayError::Refusal);
    }
    Ok(resp)
}
