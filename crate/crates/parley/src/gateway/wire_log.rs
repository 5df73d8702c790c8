//! Append-only run log of every prompt sent and raw reply received,
//! one JSON object per line with a run-scoped sequence number.

use super::{ChatRequest, GatewayError};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

pub struct WireLog {
    file: Mutex<File>,
    seq: AtomicU64,
}

impl WireLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file), seq: AtomicU64::new(0) })
    }

    pub fn record(
        &self,
        provider: &str,
        req: &ChatRequest,
        outcome: &Result<String, GatewayError>,
        attempts: u32,
    ) {
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        let entry = serde_json::json!({
            "seq": seq,
            "provider": provider,
            "model": req.model_id,
            "system": req.system,
            "user": req.user,
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
            "attempts": attempts,
            "response": outcome.as_ref().ok(),
            "error": outcome.as_ref().err().map(|e| e.to_string()),
        });
        let mut file = self.file.lock().unwrap();
        let _ = writeln!(file, "{entry}");
    }

    /// Free-form annotation entry (workflow intermediates, filter decisions).
    pub fn note(&self, kind: &str, payload: serde_json::Value) {
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        let entry = serde_json::json!({"seq": seq, "kind": kind, "payload": payload});
        let mut file = self.file.lock().unwrap();
        let _ = writeln!(file, "{entry}");
    }
}
