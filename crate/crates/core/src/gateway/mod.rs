//! Model gateway: chat-completion backends and strict verdict parsing.

mod backend;
mod parse;

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::prompt::{PromptBundle, VariantKind};

pub use backend::{
    build_backend, replay_key, write_replay_fixtures, Backend, HttpBackend, MockRuleOracle, ReplayBackend, ReplayRecord,
};
pub use parse::{parse_verdict, Dialect, ParseFailure, ParseStatus, ParsedVerdict, TERMINATOR};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("no recorded response for posting `{posting_id}` (key {key})")]
    ReplayMiss { key: String, posting_id: String },
    #[error("auth token variable `{0}` is unset or empty")]
    AuthMissing(String),
    #[error("replay fixture: {0}")]
    Fixture(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("posting `{posting_id}`: {source}")]
    Backend {
        posting_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("posting `{posting_id}`: {reason} (fail-fast)")]
    FailFast { posting_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    MockRuleOracle,
    Replay,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(BackendKind::Http),
            "mock" | "mock_rule_oracle" => Ok(BackendKind::MockRuleOracle),
            "replay" => Ok(BackendKind::Replay),
            other => Err(format!("unknown backend `{other}` (expected http, mock or replay)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    /// Name of the environment variable holding the bearer token, never the token.
    pub auth_token_env_var: Option<String>,
    /// JSONL fixture file for the replay backend.
    pub replay_path: Option<PathBuf>,
    /// Disables the repair pass: anything but a bare verdict object fails.
    pub strict_json: bool,
    /// Abort the batch on the first unparseable response.
    pub fail_fast: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::MockRuleOracle,
            endpoint_url: None,
            model_name: "mock-rule-oracle".to_string(),
            temperature: 0.0,
            max_output_tokens: 512,
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 250,
            max_in_flight: 4,
            auth_token_env_var: None,
            replay_path: None,
            strict_json: false,
            fail_fast: false,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(m.to_string()));
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be a finite value >= 0");
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return bad("timeout_secs must be positive");
        }
        match self.kind {
            BackendKind::Http if self.endpoint_url.is_none() => bad("http backend needs endpoint_url"),
            BackendKind::Replay if self.replay_path.is_none() => bad("replay backend needs replay_path"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVerdict {
    pub posting_id: String,
    pub anomaly: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confidence: Option<f64>,
    pub explanation: String,
    pub raw_response: String,
    pub parse_status: ParseStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parse_error: Option<String>,
    /// Wall-clock time of the backend call; kept out of the verdict file.
    #[serde(skip)]
    pub latency_ms: u64,
}

impl ModelVerdict {
    pub fn is_failed(&self) -> bool {
        self.parse_status == ParseStatus::Failed
    }
}

pub fn dialect_for(kind: VariantKind) -> Dialect {
    match kind {
        VariantKind::SyntheticFlags => Dialect::Synthetic,
        _ => Dialect::Vanilla,
    }
}

/// Turns a raw response into a verdict; parse failures become `Failed` verdicts.
pub fn verdict_from_response(bundle: &PromptBundle, raw: String, repair: bool, latency_ms: u64) -> ModelVerdict {
    let dialect = dialect_for(bundle.variant.kind);
    let (anomaly, confidence, explanation, parse_status, parse_error) = match parse_verdict(&raw, dialect, repair) {
        Ok(p) => (p.anomaly, p.confidence, p.explanation, p.status, None),
        Err(e) => (0, None, String::new(), ParseStatus::Failed, Some(e.0)),
    };
    ModelVerdict {
        posting_id: bundle.posting_id.clone(),
        anomaly,
        confidence,
        explanation,
        raw_response: raw,
        parse_status,
        parse_error,
        latency_ms,
    }
}

/// Sends one bundle and parses the answer.
pub fn infer(
    bundle: &PromptBundle,
    backend: &dyn Backend,
    config: &BackendConfig,
) -> Result<ModelVerdict, GatewayError> {
    let start = Instant::now();
    let raw = backend.complete(bundle)?;
    let latency = start.elapsed().as_millis() as u64;
    Ok(verdict_from_response(bundle, raw, !config.strict_json, latency))
}

/// Runs every bundle with at most `max_in_flight` calls outstanding.
///
/// Verdicts come back in input order. A backend error aborts the batch;
/// unparseable responses become `Failed` verdicts unless `fail_fast` is set.
/// When several items fail, the error of the earliest one is reported.
pub fn infer_batch(
    bundles: &[PromptBundle],
    backend: &dyn Backend,
    config: &BackendConfig,
) -> Result<Vec<ModelVerdict>, BatchError> {
    let workers = config.max_in_flight.max(1).min(bundles.len());
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<ModelVerdict>>> = Mutex::new(vec![None; bundles.len()]);
    let errors: Mutex<Vec<(usize, BatchError)>> = Mutex::new(Vec::new());

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(bundle) = bundles.get(i) else { break };
                let outcome = match infer(bundle, backend, config) {
                    Ok(v) if v.is_failed() && config.fail_fast => Err(BatchError::FailFast {
                        posting_id: v.posting_id.clone(),
                        reason: v.parse_error.clone().unwrap_or_default(),
                    }),
                    Ok(v) => Ok(v),
                    Err(source) => Err(BatchError::Backend {
                        posting_id: bundle.posting_id.clone(),
                        source,
                    }),
                };
                match outcome {
                    Ok(v) => slots.lock().expect("slot lock")[i] = Some(v),
                    Err(e) => {
                        abort.store(true, Ordering::SeqCst);
                        errors.lock().expect("error lock").push((i, e));
                    }
                }
            });
        }
    });

    let mut errors = errors.into_inner().expect("error lock");
    if let Some(pos) = errors.iter().enumerate().min_by_key(|(_, (i, _))| *i).map(|(p, _)| p) {
        return Err(errors.swap_remove(pos).1);
    }
    Ok(slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|v| v.expect("every slot filled without errors"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptVariant;
    use std::collections::BTreeMap;
    use std::sync::atomic::AtomicUsize;
    use std::time::Duration;

    fn bundle(id: &str, kind: VariantKind, instance: &str) -> PromptBundle {
        PromptBundle {
            posting_id: id.to_string(),
            variant: PromptVariant::new(kind),
            system_text: "sys".into(),
            instance_text: instance.into(),
            interpolation_record: BTreeMap::new(),
        }
    }

    fn flags_text(p: u8, w: u8, n: u8, t: u8, h: u8) -> String {
        format!(
            r#"{{"posting_id":"P1","features":{{"promptly":{p},"weekend":{w},"nwh":{n},"top_n":{t},"high_cash":{h}}}}}"#
        )
    }

    #[test]
    fn mock_applies_two_flag_rule() {
        let cfg = BackendConfig::default();
        let two = bundle("P1", VariantKind::SyntheticFlags, &flags_text(3, 2, 0, 0, 0));
        let v = infer(&two, &MockRuleOracle, &cfg).unwrap();
        assert_eq!((v.anomaly, v.parse_status), (1, ParseStatus::Clean));
        assert!(v.confidence.is_some());
        assert!(!v.explanation.is_empty());
        assert!(v.raw_response.ends_with(TERMINATOR));

        let none = bundle("P2", VariantKind::SyntheticFlags, &flags_text(1, 0, 0, 0, 0));
        assert_eq!(infer(&none, &MockRuleOracle, &cfg).unwrap().anomaly, 0);
        let one = bundle("P3", VariantKind::SyntheticFlags, &flags_text(2, 0, 0, 0, 0));
        assert_eq!(infer(&one, &MockRuleOracle, &cfg).unwrap().anomaly, 0);
    }

    #[test]
    fn mock_follows_hint_then_percentile() {
        let cfg = BackendConfig::default();
        let hint = bundle(
            "P1",
            VariantKind::AuditCopilot,
            "x\nIsolation Forest Hint: Anomaly (score: 0.7000)\n",
        );
        assert_eq!(infer(&hint, &MockRuleOracle, &cfg).unwrap().anomaly, 1);
        let pct = bundle(
            "P1",
            VariantKind::NoIf,
            "- This amount (9.00) is at the 99th percentile\n",
        );
        assert_eq!(infer(&pct, &MockRuleOracle, &cfg).unwrap().anomaly, 1);
        let low = bundle(
            "P1",
            VariantKind::NoIf,
            "- This amount (9.00) is at the 98th percentile\n",
        );
        assert_eq!(infer(&low, &MockRuleOracle, &cfg).unwrap().anomaly, 0);
        let bare = bundle("P1", VariantKind::NoStatsNoIf, "{}");
        assert_eq!(infer(&bare, &MockRuleOracle, &cfg).unwrap().anomaly, 0);
    }

    #[test]
    fn replay_miss_names_posting() {
        let backend = ReplayBackend::new("m", []);
        let b = bundle("P9", VariantKind::NoIf, "x");
        match backend.complete(&b) {
            Err(GatewayError::ReplayMiss { posting_id, key }) => {
                assert_eq!(posting_id, "P9");
                assert_eq!(key, replay_key(&b, "m"));
            }
            other => panic!("expected miss, got {other:?}"),
        }
    }

    #[test]
    fn replay_key_depends_on_model() {
        let b = bundle("P1", VariantKind::NoIf, "x");
        assert_ne!(replay_key(&b, "a"), replay_key(&b, "b"));
        assert_eq!(replay_key(&b, "a").len(), 64);
    }

    #[derive(Debug)]
    struct Scripted {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Backend for Scripted {
        fn complete(&self, bundle: &PromptBundle) -> Result<String, GatewayError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            let n: u64 = bundle.posting_id[1..].parse().unwrap();
            std::thread::sleep(Duration::from_millis((n * 7) % 5));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            if bundle.instance_text == "miss" {
                return Err(GatewayError::ReplayMiss {
                    key: "k".into(),
                    posting_id: bundle.posting_id.clone(),
                });
            }
            Ok(bundle.instance_text.clone())
        }
    }

    fn scripted() -> Scripted {
        Scripted {
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    #[test]
    fn batch_keeps_order_and_bounds_concurrency() {
        let bundles: Vec<_> = (0..100)
            .map(|i| {
                bundle(
                    &format!("P{i}"),
                    VariantKind::NoIf,
                    &format!(r#"{{"anomaly": {}}}"#, i % 2),
                )
            })
            .collect();
        let backend = scripted();
        let cfg = BackendConfig {
            max_in_flight: 8,
            ..BackendConfig::default()
        };
        let out = infer_batch(&bundles, &backend, &cfg).unwrap();
        assert_eq!(out.len(), 100);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(v.posting_id, format!("P{i}"));
            assert_eq!(v.anomaly as usize, i % 2);
        }
        assert!(backend.peak.load(Ordering::SeqCst) <= 8);
    }

    #[test]
    fn parse_failures_are_isolated_unless_fail_fast() {
        let mut bundles: Vec<_> = (0..100)
            .map(|i| bundle(&format!("P{i}"), VariantKind::NoIf, r#"{"anomaly": 0}"#))
            .collect();
        bundles[37].instance_text = "no json here".into();
        let cfg = BackendConfig::default();
        let out = infer_batch(&bundles, &scripted(), &cfg).unwrap();
        assert_eq!(out.iter().filter(|v| v.parse_status == ParseStatus::Clean).count(), 99);
        assert!(out[37].is_failed());

        let strict = BackendConfig { fail_fast: true, ..cfg };
        match infer_batch(&bundles, &scripted(), &strict) {
            Err(BatchError::FailFast { posting_id, .. }) => assert_eq!(posting_id, "P37"),
            other => panic!("expected fail-fast, got {other:?}"),
        }
    }

    #[test]
    fn backend_error_aborts_with_earliest_posting() {
        let mut bundles: Vec<_> = (0..20)
            .map(|i| bundle(&format!("P{i}"), VariantKind::NoIf, r#"{"anomaly": 0}"#))
            .collect();
        bundles[5].instance_text = "miss".into();
        bundles[15].instance_text = "miss".into();
        let cfg = BackendConfig {
            max_in_flight: 1,
            ..BackendConfig::default()
        };
        match infer_batch(&bundles, &scripted(), &cfg) {
            Err(BatchError::Backend {
                posting_id,
                source: GatewayError::ReplayMiss { .. },
            }) => {
                assert_eq!(posting_id, "P5")
            }
            other => panic!("expected replay miss, got {other:?}"),
        }
    }

    #[test]
    fn empty_batch() {
        assert!(infer_batch(&[], &MockRuleOracle, &BackendConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = BackendConfig::default();
        assert!(c.validate().is_ok());
        c.max_in_flight = 0;
        assert!(c.validate().is_err());
        let c = BackendConfig {
            kind: BackendKind::Http,
            ..BackendConfig::default()
        };
        assert!(matches!(c.validate(), Err(GatewayError::InvalidConfig(_))));
        assert_eq!("mock".parse::<BackendKind>().unwrap(), BackendKind::MockRuleOracle);
    }
}
