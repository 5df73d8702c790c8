//! Scripted providers for deterministic, network-free pipeline runs.
//!
//! A script is an ordered queue of canned responses. Consuming past the end
//! is an error, never silent fabrication, and an entry with a match key
//! fails loudly when the incoming request does not contain it.

use super::{ChatBackend, ChatRequest, EmbedBackend, GatewayError};
use serde::Deserialize;
use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, Deserialize)]
pub struct ScriptEntry {
    /// Substring the request (system + user) must contain, when present.
    #[serde(default, rename = "match")]
    pub match_key: Option<String>,
    pub response: String,
}

pub struct ScriptedChat {
    queue: Mutex<VecDeque<ScriptEntry>>,
    calls: AtomicUsize,
}

impl ScriptedChat {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self { queue: Mutex::new(entries.into()), calls: AtomicUsize::new(0) }
    }

    pub fn from_responses(responses: &[&str]) -> Self {
        Self::new(
            responses
                .iter()
                .map(|r| ScriptEntry { match_key: None, response: r.to_string() })
                .collect(),
        )
    }

    /// Loads a JSON Lines script: one `{"match": ..., "response": ...}` per line.
    pub fn from_jsonl(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{} line {}: {e}", path.display(), idx + 1),
                )
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    /// Number of calls served so far (the call-count oracle for tests).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }
}

impl ChatBackend for ScriptedChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let entry = self
            .queue
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| GatewayError::ScriptExhausted(preview(&req.user)))?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(key) = &entry.match_key {
            if !req.system.contains(key.as_str()) && !req.user.contains(key.as_str()) {
                return Err(GatewayError::ScriptMismatch { expected: key.clone() });
            }
        }
        Ok(entry.response)
    }
}

fn preview(text: &str) -> String {
    text.chars().take(80).collect()
}

/// Scripted embeddings: an exact text-to-vector map, with an optional
/// deterministic hash fallback for texts the map does not cover.
pub struct ScriptedEmbedder {
    map: HashMap<String, Vec<f64>>,
    fallback_hash: bool,
    dim: usize,
}

impl ScriptedEmbedder {
    pub fn new(map: HashMap<String, Vec<f64>>, fallback_hash: bool) -> Self {
        let dim = map.values().next().map(Vec::len).unwrap_or(8);
        Self { map, fallback_hash, dim }
    }

    pub fn hash_only() -> Self {
        Self::new(HashMap::new(), true)
    }

    /// Deterministic pseudo-embedding: identical texts map to identical
    /// vectors, different texts to quasi-random directions.
    fn hash_vector(&self, text: &str) -> Vec<f64> {
        let mut state = 0xcbf29ce484222325u64;
        for b in text.as_bytes() {
            state ^= u64::from(*b);
            state = state.wrapping_mul(0x100000001b3);
        }
        (0..self.dim)
            .map(|i| {
                let mut x = state.wrapping_add((i as u64).wrapping_mul(0x9e3779b97f4a7c15));
                x ^= x >> 33;
                x = x.wrapping_mul(0xff51afd7ed558ccd);
                x ^= x >> 33;
                (x as f64 / u64::MAX as f64) * 2.0 - 1.0
            })
            .collect()
    }
}

impl EmbedBackend for ScriptedEmbedder {
    fn embed(&self, _model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        texts
            .iter()
            .map(|text| {
                if let Some(vector) = self.map.get(text) {
                    Ok(vector.clone())
                } else if self.fallback_hash {
                    Ok(self.hash_vector(text))
                } else {
                    Err(GatewayError::ScriptExhausted(preview(text)))
                }
            })
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct EmbedScriptFile {
    #[serde(default)]
    fallback_hash: bool,
    #[serde(default)]
    map: HashMap<String, Vec<f64>>,
}

/// Loads scripted providers from a directory: `expert.jsonl`, `judge.jsonl`,
/// optional `reference.jsonl`, optional `embeddings.json`.
pub struct ScriptDir {
    pub expert: Option<ScriptedChat>,
    pub judge: Option<ScriptedChat>,
    pub reference: Option<ScriptedChat>,
    pub embedder: Option<ScriptedEmbedder>,
}

pub fn load_script_dir(dir: &Path) -> std::io::Result<ScriptDir> {
    let chat = |name: &str| -> std::io::Result<Option<ScriptedChat>> {
        let path = dir.join(name);
        if path.exists() {
            Ok(Some(ScriptedChat::from_jsonl(&path)?))
        } else {
            Ok(None)
        }
    };
    let embedder = {
        let path = dir.join("embeddings.json");
        if path.exists() {
            let file: EmbedScriptFile = serde_json::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            Some(ScriptedEmbedder::new(file.map, file.fallback_hash))
        } else {
            None
        }
    };
    Ok(ScriptDir {
        expert: chat("expert.jsonl")?,
        judge: chat("judge.jsonl")?,
        reference: chat("reference.jsonl")?,
        embedder,
    })
}
