//! HTTP provider behavior against a local fault-injecting stub server:
//! retries, terminal failures, wire format, and payload validation.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use promptlab::backend::{BackendConfig, BackendKind, Client, CompletionKey};
use promptlab::error::Error;
use promptlab::promptkit::{AnswerFormat, RenderedPrompt};

/// Minimal scripted HTTP server. Each connection gets one response chosen by
/// the script from the 1-based request number.
struct StubServer {
    endpoint: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<std::sync::Mutex<Vec<String>>>,
}

fn ok_body(content: &str) -> String {
    serde_json::json!({
        "choices": [{ "message": { "role": "assistant", "content": content } }],
        "usage": { "prompt_tokens": 12, "completion_tokens": 2 }
    })
    .to_string()
}

impl StubServer {
    fn start<F>(script: F) -> StubServer
    where
        F: Fn(usize) -> (u16, String) + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let port = listener.local_addr().unwrap().port();
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(std::sync::Mutex::new(Vec::new()));
        let hits_thread = hits.clone();
        let bodies_thread = bodies.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let n = hits_thread.fetch_add(1, Ordering::SeqCst) + 1;

                // read headers, then the content-length body
                let mut buf = Vec::new();
                let mut chunk = [0u8; 1024];
                let header_end = loop {
                    match stream.read(&mut chunk) {
                        Ok(0) => break None,
                        Ok(k) => {
                            buf.extend_from_slice(&chunk[..k]);
                            if let Some(pos) =
                                buf.windows(4).position(|w| w == b"\r\n\r\n")
                            {
                                break Some(pos + 4);
                            }
                        }
                        Err(_) => break None,
                    }
                };
                if let Some(header_end) = header_end {
                    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
                    let content_length = headers
                        .lines()
                        .find_map(|l| {
                            let (name, value) = l.split_once(':')?;
                            name.eq_ignore_ascii_case("content-length")
                                .then(|| value.trim().parse::<usize>().ok())?
                        })
                        .unwrap_or(0);
                    while buf.len() < header_end + content_length {
                        match stream.read(&mut chunk) {
                            Ok(0) => break,
                            Ok(k) => buf.extend_from_slice(&chunk[..k]),
                            Err(_) => break,
                        }
                    }
                    let body = String::from_utf8_lossy(&buf[header_end..]).to_string();
                    bodies_thread.lock().unwrap().push(body);
                }

                let (status, body) = script(n);
                let reason = match status {
                    200 => "OK",
                    400 => "Bad Request",
                    429 => "Too Many Requests",
                    _ => "Internal Server Error",
                };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\n\
                     Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        StubServer {
            endpoint: format!("http://127.0.0.1:{port}/v1/chat/completions"),
            hits,
            bodies,
        }
    }

    fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn local_config(endpoint: &str) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::LocalHttp,
        model_name: "stub-model".into(),
        endpoint: endpoint.into(),
        temperature: 0.0,
        max_output_tokens: 8,
        cot_max_output_tokens: 512,
        request_timeout_secs: 5,
        max_retries: 3,
        retry_backoff_ms: 1,
        rate_limit: None,
        api_key_env: "PROMPTLAB_TEST_NO_SUCH_KEY".into(),
        mock: None,
    }
}

fn prompt(format: AnswerFormat) -> RenderedPrompt {
    RenderedPrompt::from_single_user("Classify this. Respond Yes or No.\n\nText: hello".into(), format)
}

#[test]
fn persistent_500_fails_after_retries_exhausted() {
    let server = StubServer::start(|_| (500, "{\"error\":\"boom\"}".into()));
    let client = Client::new(local_config(&server.endpoint), None).unwrap();
    let err = client
        .complete(&prompt(AnswerFormat::PlainYesNo), &CompletionKey::Target("t1".into()))
        .unwrap_err();
    match err {
        Error::Backend { status, body } => {
            assert_eq!(status, 500);
            assert!(body.contains("boom"));
        }
        other => panic!("expected backend error, got {other}"),
    }
    // 1 initial attempt + 3 retries
    assert_eq!(server.hits(), 4);
}

#[test]
fn transient_failures_then_success() {
    let server = StubServer::start(|n| {
        if n <= 2 {
            (429, "{\"error\":\"slow down\"}".into())
        } else {
            (200, ok_body("Yes"))
        }
    });
    let client = Client::new(local_config(&server.endpoint), None).unwrap();
    let raw = client
        .complete(&prompt(AnswerFormat::PlainYesNo), &CompletionKey::Target("t1".into()))
        .unwrap();
    assert_eq!(raw, "Yes");
    assert_eq!(server.hits(), 3);
}

#[test]
fn client_error_is_terminal_without_retries() {
    let server = StubServer::start(|_| (400, "{\"error\":\"bad request\"}".into()));
    let client = Client::new(local_config(&server.endpoint), None).unwrap();
    let err = client
        .complete(&prompt(AnswerFormat::PlainYesNo), &CompletionKey::Target("t1".into()))
        .unwrap_err();
    assert!(matches!(err, Error::Backend { status: 400, .. }), "{err}");
    assert_eq!(server.hits(), 1);
}

#[test]
fn malformed_payload_is_protocol_error() {
    let server = StubServer::start(|_| (200, "{\"choices\":[]}".into()));
    let client = Client::new(local_config(&server.endpoint), None).unwrap();
    let err = client
        .complete(&prompt(AnswerFormat::PlainYesNo), &CompletionKey::Target("t1".into()))
        .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    assert_eq!(server.hits(), 1);
}

#[test]
fn request_body_follows_chat_completions_shape() {
    let server = StubServer::start(|_| (200, ok_body("No")));
    let client = Client::new(local_config(&server.endpoint), None).unwrap();
    client
        .complete(&prompt(AnswerFormat::PlainYesNo), &CompletionKey::Target("t1".into()))
        .unwrap();
    client
        .complete(&prompt(AnswerFormat::FinalAnswer), &CompletionKey::Target("t2".into()))
        .unwrap();
    let bodies = server.bodies.lock().unwrap().clone();
    assert_eq!(bodies.len(), 2);

    let plain: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(plain["model"], "stub-model");
    assert_eq!(plain["temperature"], 0.0);
    assert_eq!(plain["max_tokens"], 8);
    assert_eq!(plain["messages"][0]["role"], "user");
    assert!(plain["messages"][0]["content"]
        .as_str()
        .unwrap()
        .contains("Text: hello"));

    // chain-of-thought prompts get the larger completion budget
    let cot: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
    assert_eq!(cot["max_tokens"], 512);
}

#[test]
fn connection_refused_is_retried_then_fails() {
    // bind a port to learn a dead address, then close it
    let dead_port = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().port()
    };
    let mut config = local_config(&format!("http://127.0.0.1:{dead_port}/v1/chat/completions"));
    config.max_retries = 1;
    let client = Client::new(config, None).unwrap();
    let err = client
        .complete(&prompt(AnswerFormat::PlainYesNo), &CompletionKey::Target("t1".into()))
        .unwrap_err();
    assert!(matches!(err, Error::Backend { status: 0, .. }), "{err}");
}

#[test]
fn openai_compatible_requires_api_key_env() {
    let mut config = local_config("http://127.0.0.1:1/v1/chat/completions");
    config.kind = BackendKind::OpenaiCompatible;
    match Client::new(config, None) {
        Err(Error::Configuration(msg)) => {
            assert!(msg.contains("PROMPTLAB_TEST_NO_SUCH_KEY"), "{msg}")
        }
        other => panic!("expected configuration error, got {:?}", other.err()),
    }
}

#[test]
fn provider_usage_is_recorded_in_cache() {
    let dir = tempfile::tempdir().unwrap();
    let server = StubServer::start(|_| (200, ok_body("Yes")));
    let cache = Arc::new(promptlab::backend::CompletionCache::open(&dir.path().join("log.jsonl")).unwrap());
    let client = Client::new(local_config(&server.endpoint), Some(cache)).unwrap();
    client
        .complete(&prompt(AnswerFormat::PlainYesNo), &CompletionKey::Target("t1".into()))
        .unwrap();
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(record["usage"]["prompt_tokens"], 12);
    assert_eq!(record["usage"]["estimated"], false);
    assert_eq!(record["raw"], "Yes");
}
