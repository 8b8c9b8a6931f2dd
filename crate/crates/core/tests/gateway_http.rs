//! HTTP backend against a throwaway local server.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;

use auditlens_core::gateway::{build_backend, BackendConfig, BackendKind, GatewayError};
use auditlens_core::pipeline::{detect, RunConfig};
use auditlens_core::prompt::{PromptBundle, PromptVariant, VariantKind};
use auditlens_core::synthgen::GenConfig;

#[derive(Debug, Clone)]
struct Seen {
    headers: BTreeMap<String, String>,
    body: String,
}

type Responder = dyn Fn(usize, &Seen) -> (u16, String) + Send + Sync;

/// Serves one request per connection and records every request.
fn serve(responder: Box<Responder>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let responder: Arc<Responder> = Arc::from(responder);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let log = Arc::clone(&log);
            let responder = Arc::clone(&responder);
            thread::spawn(move || handle(stream, &log, responder.as_ref()));
        }
    });
    (url, seen)
}

fn handle(stream: TcpStream, log: &Mutex<Vec<Seen>>, responder: &Responder) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let mut headers = BTreeMap::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    let req = Seen {
        headers,
        body: String::from_utf8(body).unwrap(),
    };
    let index = {
        let mut log = log.lock().unwrap();
        log.push(req.clone());
        log.len() - 1
    };
    let (status, body) = responder(index, &req);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}

fn chat(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn bundle() -> PromptBundle {
    PromptBundle {
        posting_id: "P1".into(),
        variant: PromptVariant::new(VariantKind::AuditCopilot),
        system_text: "system part".into(),
        instance_text: "instance part".into(),
        interpolation_record: BTreeMap::new(),
    }
}

fn http(url: &str) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Http,
        endpoint_url: Some(url.to_string()),
        model_name: "test-model".into(),
        backoff_ms: 1,
        timeout_secs: 5.0,
        ..BackendConfig::default()
    }
}

#[test]
fn sends_chat_request_with_bearer_token() {
    let (url, seen) = serve(Box::new(|_, _| (200, chat(r#"{"anomaly": 1, "explanation": "odd"}"#))));
    std::env::set_var("AUDITLENS_TEST_TOKEN_SHAPE", "tok-shape");
    let config = BackendConfig {
        auth_token_env_var: Some("AUDITLENS_TEST_TOKEN_SHAPE".into()),
        temperature: 0.2,
        max_output_tokens: 64,
        ..http(&url)
    };
    let backend = build_backend(&config).unwrap();
    let raw = backend.complete(&bundle()).unwrap();
    assert_eq!(raw, r#"{"anomaly": 1, "explanation": "odd"}"#);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].headers["authorization"], "Bearer tok-shape");
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.2);
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], "system part");
    assert_eq!(body["messages"][1]["role"], "user");
    assert_eq!(body["messages"][1]["content"], "instance part");
}

#[test]
fn retries_transient_statuses() {
    let (url, seen) = serve(Box::new(|i, _| match i {
        0 => (503, "{}".into()),
        1 => (429, "{}".into()),
        _ => (200, chat(r#"{"anomaly": 0}"#)),
    }));
    let backend = build_backend(&http(&url)).unwrap();
    assert_eq!(backend.complete(&bundle()).unwrap(), r#"{"anomaly": 0}"#);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_max_retries() {
    let (url, seen) = serve(Box::new(|_, _| (500, "{}".into())));
    let config = BackendConfig {
        max_retries: 2,
        ..http(&url)
    };
    let err = build_backend(&config).unwrap().complete(&bundle()).unwrap_err();
    assert!(matches!(err, GatewayError::Transport { attempts: 3, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(Box::new(|_, _| (400, "{}".into())));
    let err = build_backend(&http(&url)).unwrap().complete(&bundle()).unwrap_err();
    assert!(matches!(err, GatewayError::Transport { attempts: 1, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = BackendConfig {
        max_retries: 1,
        ..http(&format!("http://127.0.0.1:{port}/v1/chat/completions"))
    };
    let err = build_backend(&config).unwrap().complete(&bundle()).unwrap_err();
    assert!(matches!(err, GatewayError::Transport { attempts: 2, .. }), "{err:?}");
}

#[test]
fn missing_token_is_reported_by_name() {
    let config = BackendConfig {
        auth_token_env_var: Some("AUDITLENS_TEST_TOKEN_UNSET".into()),
        ..http("http://127.0.0.1:9/")
    };
    match build_backend(&config) {
        Err(GatewayError::AuthMissing(var)) => assert_eq!(var, "AUDITLENS_TEST_TOKEN_UNSET"),
        other => panic!("expected AuthMissing, got {other:?}"),
    }
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn token_never_reaches_artifacts_or_errors() {
    const TOKEN: &str = "sk-dummy-4f9c2e7a-do-not-log";
    std::env::set_var("AUDITLENS_TEST_TOKEN_SECRET", TOKEN);
    let (url, _) = serve(Box::new(|_, req| {
        let authorized = req.headers.get("authorization").map(String::as_str) == Some(&format!("Bearer {TOKEN}"));
        if authorized {
            (200, chat(r#"{"anomaly": 0, "explanation": "fine"}"#))
        } else {
            (401, "{}".into())
        }
    }));
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig {
        gen: Some(GenConfig {
            n_postings: 120,
            anomaly_rate: 0.05,
            ..GenConfig::default()
        }),
        backend: BackendConfig {
            auth_token_env_var: Some("AUDITLENS_TEST_TOKEN_SECRET".into()),
            ..http(&url)
        },
        output_dir: tmp.path().to_path_buf(),
        ..RunConfig::default()
    };
    let out = detect(&config).unwrap();
    assert_eq!(out.run.verdicts.len(), 120);
    for file in files_under(tmp.path()) {
        let text = std::fs::read_to_string(&file).unwrap_or_default();
        assert!(!text.contains(TOKEN), "token leaked into {}", file.display());
    }

    let backend = build_backend(&config.backend).unwrap();
    assert!(!format!("{backend:?}").contains(TOKEN));
    assert!(!format!("{:?}", config).contains(TOKEN));

    let (bad_url, _) = serve(Box::new(|_, _| (403, "{}".into())));
    let bad = build_backend(&BackendConfig {
        endpoint_url: Some(bad_url),
        ..config.backend.clone()
    })
    .unwrap();
    let err = bad.complete(&bundle()).unwrap_err();
    assert!(!err.to_string().contains(TOKEN) && !format!("{err:?}").contains(TOKEN));
}
