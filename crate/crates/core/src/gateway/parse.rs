use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// End-of-analysis token closing synthetic-dialect responses.
pub const TERMINATOR: &str = "<|endofanalysis|>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    Vanilla,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseStatus {
    Clean,
    Repaired,
    Failed,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("unparseable verdict: {0}")]
pub struct ParseFailure(pub String);

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedVerdict {
    pub anomaly: u8,
    pub confidence: Option<f64>,
    pub explanation: String,
    pub status: ParseStatus,
}

fn fail(reason: impl Into<String>) -> ParseFailure {
    ParseFailure(reason.into())
}

/// Parses a model response into a verdict.
///
/// Without `repair` the response must be exactly one JSON object (after the
/// terminator strip for the synthetic dialect) with `anomaly` as the integer
/// 0 or 1. With `repair` the first balanced object carrying an `anomaly` key
/// is extracted from surrounding prose, and boolean or string spellings of
/// the bit are normalized; either step marks the verdict `Repaired`.
pub fn parse_verdict(raw: &str, dialect: Dialect, repair: bool) -> Result<ParsedVerdict, ParseFailure> {
    let mut text = raw.trim();
    if dialect == Dialect::Synthetic {
        if let Some(rest) = text.strip_suffix(TERMINATOR) {
            text = rest.trim_end();
        }
    }
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(text) {
        if obj.contains_key("anomaly") || !repair {
            return interpret(&obj, repair, ParseStatus::Clean);
        }
    }
    if !repair {
        return Err(fail("response is not a single JSON object"));
    }
    let obj = first_object_with_anomaly(text).ok_or_else(|| fail("no balanced JSON object with an `anomaly` key"))?;
    interpret(&obj, repair, ParseStatus::Repaired)
}

fn interpret(obj: &Map<String, Value>, repair: bool, mut status: ParseStatus) -> Result<ParsedVerdict, ParseFailure> {
    let raw_bit = obj.get("anomaly").ok_or_else(|| fail("missing `anomaly` key"))?;
    let anomaly = match raw_bit.as_u64() {
        Some(b @ (0 | 1)) => b as u8,
        _ => {
            let bit = if repair { normalize_bit(raw_bit) } else { None };
            status = ParseStatus::Repaired;
            bit.ok_or_else(|| fail(format!("`anomaly` must be 0 or 1, got {raw_bit}")))?
        }
    };
    let confidence = match obj.get("confidence") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_f64() {
            Some(c) if (0.0..=1.0).contains(&c) => Some(c),
            _ => return Err(fail(format!("`confidence` must lie in [0, 1], got {v}"))),
        },
    };
    let explanation = match obj.get("explanation") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) if repair => {
            status = ParseStatus::Repaired;
            other.to_string()
        }
        Some(other) => return Err(fail(format!("`explanation` must be a string, got {other}"))),
    };
    Ok(ParsedVerdict {
        anomaly,
        confidence,
        explanation,
        status,
    })
}

fn normalize_bit(v: &Value) -> Option<u8> {
    match v {
        Value::Bool(b) => Some(u8::from(*b)),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "0" | "false" => Some(0),
            "1" | "true" => Some(1),
            _ => None,
        },
        Value::Number(n) => match n.as_f64() {
            Some(0.0) => Some(0),
            Some(1.0) => Some(1),
            _ => None,
        },
        _ => None,
    }
}

/// End offset (exclusive) of the balanced object opening at `start`,
/// skipping braces inside string literals.
pub(super) fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn first_object_with_anomaly(text: &str) -> Option<Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = text[start..].find('{') {
        let open = start + offset;
        if let Some(end) = balanced_end(bytes, open) {
            if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&text[open..end]) {
                if obj.contains_key("anomaly") {
                    return Some(obj);
                }
            }
        }
        start = open + 1;
    }
    None
}
