//! The five-action space of the dialogue environment and the tolerant
//! parser that decodes model output into an [`Action`].
//!
//! Model replies are free text that should contain one serialized object
//! with `action_type` and `argument` keys. The parser locates the first
//! balanced `{...}` object (skipping prose and code fences) and accepts
//! both strict JSON and the single-quoted dict style many models emit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The five legal action types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionType {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "action")]
    Action,
    #[serde(rename = "speak")]
    Speak,
    #[serde(rename = "non-verbal communication")]
    NonVerbal,
    #[serde(rename = "leave")]
    Leave,
}

impl ActionType {
    pub fn from_str_tag(tag: &str) -> Option<Self> {
        match tag {
            "none" => Some(Self::None),
            "action" => Some(Self::Action),
            "speak" => Some(Self::Speak),
            "non-verbal communication" => Some(Self::NonVerbal),
            "leave" => Some(Self::Leave),
            _ => None,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Action => "action",
            Self::Speak => "speak",
            Self::NonVerbal => "non-verbal communication",
            Self::Leave => "leave",
        }
    }
}

/// One decoded agent action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub action_type: ActionType,
    pub argument: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no balanced object found in model output")]
    NoObjectFound,
    #[error("unknown action_type {0:?}")]
    UnknownActionType(String),
    #[error("missing or empty field {0:?}")]
    MissingField(String),
}

impl Action {
    /// An empty argument is legal only for `none` and `leave`.
    pub fn new(action_type: ActionType, argument: impl Into<String>) -> Result<Self, ParseError> {
        let argument = argument.into();
        if argument.is_empty() && !matches!(action_type, ActionType::None | ActionType::Leave) {
            return Err(ParseError::MissingField("argument".into()));
        }
        Ok(Self { action_type, argument })
    }

    pub fn speak(argument: impl Into<String>) -> Self {
        Self { action_type: ActionType::Speak, argument: argument.into() }
    }

    pub fn leave() -> Self {
        Self { action_type: ActionType::Leave, argument: String::new() }
    }

    pub fn is_leave(&self) -> bool {
        self.action_type == ActionType::Leave
    }

    /// Canonical wire form, `{"action_type": "...", "argument": "..."}`.
    pub fn serialize(&self) -> String {
        serde_json::json!({
            "action_type": self.action_type.tag(),
            "argument": self.argument,
        })
        .to_string()
    }
}

/// Extracts the first balanced `{...}` object and decodes it into an [`Action`].
///
/// Only the first balanced object is considered; models often emit reasoning
/// before the object and sometimes echo the format instruction after it.
pub fn parse_action(raw: &str) -> Result<Action, ParseError> {
    let object = first_balanced_object(raw).ok_or(ParseError::NoObjectFound)?;
    let (tag, argument) = decode_object(object)?;
    let action_type =
        ActionType::from_str_tag(&tag).ok_or_else(|| ParseError::UnknownActionType(tag))?;
    Action::new(action_type, argument)
}

/// Scans for the first `{` and returns the slice through its matching `}`.
///
/// Double-quoted strings are skipped outright. Single quotes are ambiguous
/// (dict delimiter vs apostrophe), so one opens a string only after a
/// structural byte and closes it only when followed by one; everything else
/// is treated as content.
pub fn first_balanced_object(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    let start = raw.find('{')?;
    let mut depth = 0usize;
    let mut in_double = false;
    let mut in_single = false;
    let mut escaped = false;
    let mut prev_sig = 0u8;
    let mut i = start;
    while i < bytes.len() {
        let b = bytes[i];
        if in_double {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_double = false;
                prev_sig = b'"';
            }
        } else if in_single {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'\'' && closes_single_quote(bytes, i + 1) {
                in_single = false;
                prev_sig = b'\'';
            }
        } else {
            match b {
                b'"' => in_double = true,
                b'\'' => {
                    if matches!(prev_sig, b'{' | b',' | b':' | b'[') {
                        in_single = true;
                    }
                }
                b'{' => {
                    depth += 1;
                    prev_sig = b;
                }
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&raw[start..=i]);
                    }
                    prev_sig = b;
                }
                _ => {
                    if !b.is_ascii_whitespace() {
                        prev_sig = b;
                    }
                }
            }
        }
        i += 1;
    }
    None
}

fn closes_single_quote(bytes: &[u8], from: usize) -> bool {
    match bytes[from..].iter().find(|b| !b.is_ascii_whitespace()) {
        None => true,
        Some(b) => matches!(b, b',' | b'}' | b':' | b']'),
    }
}

/// Pulls `action_type` and `argument` out of one balanced object.
///
/// Strict JSON is tried first; the fallback reads the single-quoted dict
/// style with the same apostrophe tolerance as the balance scan.
fn decode_object(object: &str) -> Result<(String, String), ParseError> {
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(object) {
        if let Some(map) = value.as_object() {
            let tag = map
                .get("action_type")
                .and_then(|v| v.as_str())
                .ok_or_else(|| ParseError::MissingField("action_type".into()))?
                .to_string();
            let argument = map
                .get("argument")
                .ok_or_else(|| ParseError::MissingField("argument".into()))?
                .as_str()
                .ok_or_else(|| ParseError::MissingField("argument".into()))?
                .to_string();
            return Ok((tag, argument));
        }
    }

    let tag = quoted_value_after_key(object, "action_type")
        .ok_or_else(|| ParseError::MissingField("action_type".into()))?;
    let argument = quoted_value_after_key(object, "argument")
        .ok_or_else(|| ParseError::MissingField("argument".into()))?;
    Ok((tag, argument))
}

/// Finds `key` (quoted either way), skips `: `, and reads one quoted value.
fn quoted_value_after_key(object: &str, key: &str) -> Option<String> {
    let key_pos = object
        .find(&format!("\"{key}\""))
        .or_else(|| object.find(&format!("'{key}'")))?;
    let rest = &object[key_pos + key.len() + 2..];
    let rest = rest.trim_start().strip_prefix(':')?.trim_start();
    let quote = rest.as_bytes().first()?;
    match quote {
        b'"' => {
            let body = &rest[1..];
            let mut escaped = false;
            for (idx, b) in body.bytes().enumerate() {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    return Some(body[..idx].to_string());
                }
            }
            None
        }
        b'\'' => {
            let body = &rest[1..];
            let bytes = body.as_bytes();
            for (idx, &b) in bytes.iter().enumerate() {
                if b == b'\'' && closes_single_quote(bytes, idx + 1) {
                    return Some(body[..idx].to_string());
                }
            }
            None
        }
        _ => None,
    }
}
