use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::parse::{balanced_end, TERMINATOR};
use super::{BackendConfig, BackendKind, GatewayError};
use crate::prompt::{PromptBundle, VariantKind};

/// A chat-completion source. Implementations are shared across worker threads.
pub trait Backend: Send + Sync + fmt::Debug {
    /// Returns the raw response text for one bundle.
    fn complete(&self, bundle: &PromptBundle) -> Result<String, GatewayError>;
}

/// Cache key of a bundle: SHA-256 hex of system text, instance text and model name.
pub fn replay_key(bundle: &PromptBundle, model_name: &str) -> String {
    let mut h = Sha256::new();
    h.update(bundle.system_text.as_bytes());
    h.update(bundle.instance_text.as_bytes());
    h.update(model_name.as_bytes());
    hex::encode(h.finalize())
}

pub fn build_backend(config: &BackendConfig) -> Result<Box<dyn Backend>, GatewayError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::MockRuleOracle => Box::new(MockRuleOracle),
        BackendKind::Replay => {
            let path = config.replay_path.as_deref().expect("validated");
            Box::new(ReplayBackend::load(path, &config.model_name)?)
        }
        BackendKind::Http => Box::new(HttpBackend::new(config)?),
    })
}

/// Deterministic stand-in for a model.
///
/// Synthetic-flag prompts get the two-or-more-flags rule applied to the
/// `features` object in the instance text. Other prompts follow the
/// isolation-forest hint when one is present, then the amount percentile
/// (anomalous at 99 or above), and otherwise answer normal.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockRuleOracle;

const FLAG_NAMES: [&str; 5] = ["promptly", "weekend", "nwh", "top_n", "high_cash"];

fn features_of(text: &str) -> Option<BTreeMap<String, u64>> {
    let at = text.rfind("\"features\":")?;
    let open = at + text[at..].find('{')?;
    let end = balanced_end(text.as_bytes(), open)?;
    let obj: BTreeMap<String, u64> = serde_json::from_str(&text[open..end]).ok()?;
    FLAG_NAMES.iter().all(|k| obj.contains_key(*k)).then_some(obj)
}

/// Prompt lines are matched whole so memo text inside the record cannot spoof them.
fn line_with_prefix<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(prefix))
}

fn if_hint(text: &str) -> Option<bool> {
    let rest = line_with_prefix(text, "Isolation Forest Hint: ")?;
    if rest.starts_with("Anomaly") {
        Some(true)
    } else if rest.starts_with("Normal") {
        Some(false)
    } else {
        None
    }
}

fn percentile_in(text: &str) -> Option<u32> {
    let rest = line_with_prefix(text, "- This amount (")?;
    let at = rest.find("is at the ")? + "is at the ".len();
    let digits: String = rest[at..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

impl MockRuleOracle {
    fn synthetic(text: &str) -> String {
        let Some(features) = features_of(text) else {
            return format!("I could not find the engineered features in this entry.{TERMINATOR}");
        };
        let triggered: Vec<&str> = FLAG_NAMES
            .iter()
            .copied()
            .filter(|&k| {
                if k == "promptly" {
                    features[k] > 1
                } else {
                    features[k] > 0
                }
            })
            .collect();
        let anomaly = u8::from(triggered.len() >= 2);
        let explanation = if triggered.is_empty() {
            "no flags triggered".to_string()
        } else {
            format!("{} flag(s) triggered: {}", triggered.len(), triggered.join(", "))
        };
        let body = json!({"anomaly": anomaly, "confidence": 1.0, "explanation": explanation});
        format!("{body}{TERMINATOR}")
    }

    fn vanilla(text: &str) -> String {
        let (anomaly, explanation) = if let Some(hint) = if_hint(text) {
            if hint {
                (1, "isolation forest hint marks this posting anomalous".to_string())
            } else {
                (0, "isolation forest hint marks this posting normal".to_string())
            }
        } else if let Some(p) = percentile_in(text) {
            if p >= 99 {
                (1, format!("amount at the {p}th percentile"))
            } else {
                (0, format!("amount at the {p}th percentile is within normal range"))
            }
        } else {
            (0, "no contextual evidence of an anomaly".to_string())
        };
        json!({"anomaly": anomaly, "explanation": explanation}).to_string()
    }
}

impl Backend for MockRuleOracle {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, GatewayError> {
        Ok(match bundle.variant.kind {
            VariantKind::SyntheticFlags => Self::synthetic(&bundle.instance_text),
            _ => Self::vanilla(&bundle.instance_text),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub key: String,
    pub raw_response: String,
}

/// Serves recorded responses by [`replay_key`].
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    model_name: String,
    responses: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn new(model_name: &str, records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        ReplayBackend {
            model_name: model_name.to_string(),
            responses: records.into_iter().map(|r| (r.key, r.raw_response)).collect(),
        }
    }

    pub fn load(path: &Path, model_name: &str) -> Result<Self, GatewayError> {
        let fixture_err = |msg: String| GatewayError::Fixture(format!("{}: {msg}", path.display()));
        let file = File::open(path).map_err(|e| fixture_err(e.to_string()))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| fixture_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReplayRecord =
                serde_json::from_str(&line).map_err(|e| fixture_err(format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok(Self::new(model_name, records))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, GatewayError> {
        let key = replay_key(bundle, &self.model_name);
        self.responses.get(&key).cloned().ok_or(GatewayError::ReplayMiss {
            key,
            posting_id: bundle.posting_id.clone(),
        })
    }
}

pub fn write_replay_fixtures(path: &Path, records: &[ReplayRecord]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Chat-completion client speaking the common `messages` JSON protocol.
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model_name: String,
    temperature: f64,
    max_output_tokens: u32,
    max_retries: u32,
    backoff: Duration,
    token: Option<String>,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("model_name", &self.model_name)
            .field("max_retries", &self.max_retries)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(String),
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, GatewayError> {
        let endpoint = config
            .endpoint_url
            .clone()
            .ok_or_else(|| GatewayError::InvalidConfig("http backend needs endpoint_url".into()))?;
        let token = match &config.auth_token_env_var {
            Some(var) => match std::env::var(var) {
                Ok(t) if !t.is_empty() => Some(t),
                _ => return Err(GatewayError::AuthMissing(var.clone())),
            },
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            agent,
            endpoint,
            model_name: config.model_name.clone(),
            temperature: config.temperature,
            max_output_tokens: config.max_output_tokens,
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.backoff_ms),
            token,
        })
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        match req.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string();
                match (status, text) {
                    (200..=299, Ok(text)) => match chat_content(&text) {
                        Some(content) => Attempt::Done(content),
                        None => Attempt::Fatal("response carries no choices[0].message.content".into()),
                    },
                    (200..=299, Err(e)) => Attempt::Retry(format!("reading body: {e}")),
                    (429 | 500..=599, _) => Attempt::Retry(format!("HTTP {status}")),
                    (_, _) => Attempt::Fatal(format!("HTTP {status}")),
                }
            }
            Err(e @ (ureq::Error::BadUri(_) | ureq::Error::Http(_) | ureq::Error::InvalidProxyUrl)) => {
                Attempt::Fatal(e.to_string())
            }
            Err(e) => Attempt::Retry(e.to_string()),
        }
    }
}

fn chat_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.pointer("/choices/0/message/content")?.as_str().map(str::to_string)
}

impl Backend for HttpBackend {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.model_name,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": bundle.instance_text},
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        })
        .to_string();
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
            }
            match self.attempt(&body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(message) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Attempt::Retry(message) => {
                    log::warn!("{}: attempt {} failed: {message}", bundle.posting_id, attempt + 1);
                    last = message;
                }
            }
        }
        Err(GatewayError::Transport {
            attempts: self.max_retries + 1,
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_are_read_from_the_last_features_object() {
        let text =
            r#"{"memo":"\"features\": {}","features":{"promptly":3,"weekend":0,"nwh":1,"top_n":0,"high_cash":0}}"#;
        let f = features_of(text).unwrap();
        assert_eq!((f["promptly"], f["nwh"]), (3, 1));
    }

    #[test]
    fn percentile_phrase() {
        assert_eq!(
            percentile_in("x\n- This amount (5.00) is at the 42th percentile"),
            Some(42)
        );
        assert_eq!(
            percentile_in(r#"{"memo":"- This amount (1) is at the 99th percentile"}"#),
            None
        );
        assert_eq!(if_hint("a\nIsolation Forest Hint: Normal (score: 0.4)\n"), Some(false));
        assert_eq!(if_hint(r#"{"memo":"Isolation Forest Hint: Anomaly"}"#), None);
    }
}
