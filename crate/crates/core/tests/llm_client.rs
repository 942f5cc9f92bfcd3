//! The chat-completion client against a local mock server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use unlearnlab::augment::{augment_llm, LlmEndpointConfig};
use unlearnlab::Error;

struct Mock {
    url: String,
    bodies: Arc<Mutex<Vec<String>>>,
}

/// Serves `responses` in order (the last one repeats), one per connection,
/// recording every request body.
fn mock(responses: Vec<(u16, String)>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            seen.lock().unwrap().push(String::from_utf8(body).unwrap());
            let (status, payload) = &responses[i.min(responses.len() - 1)];
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                payload.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    Mock { url, bodies }
}

fn config(url: &str, key_env: &str, per_call: usize) -> LlmEndpointConfig {
    LlmEndpointConfig {
        enabled: true,
        base_url: url.to_string(),
        model: "tiny-rewriter".into(),
        api_key_env: key_env.into(),
        timeout_secs: 5,
        max_retries: 1,
        responses_per_call: per_call,
    }
}

fn choices(texts: &[&str]) -> String {
    let items: Vec<String> = texts
        .iter()
        .map(|t| format!(r#"{{"index":0,"message":{{"role":"assistant","content":{}}}}}"#, serde_json::to_string(t).unwrap()))
        .collect();
    format!(r#"{{"id":"x","choices":[{}]}}"#, items.join(","))
}

#[test]
fn missing_key_fails_before_any_request() {
    let m = mock(vec![(200, choices(&["unused"]))]);
    let err = augment_llm(&config(&m.url, "UNLEARNLAB_TEST_KEY_ABSENT", 1), "red square", 1).unwrap_err();
    assert!(matches!(err, Error::LlmConfig(_)), "{err}");
    assert!(m.bodies.lock().unwrap().is_empty());
}

#[test]
fn content_passes_through_and_calls_are_batched() {
    std::env::set_var("UNLEARNLAB_TEST_KEY_A", "secret");
    let fixed = "A red square sits still in the top-left of a black frame.";
    let m = mock(vec![(200, choices(&[fixed, fixed, fixed])), (200, choices(&[fixed, fixed]))]);
    let out = augment_llm(&config(&m.url, "UNLEARNLAB_TEST_KEY_A", 3), "red square", 5).unwrap();
    assert_eq!(out, vec![fixed; 5]);
    let bodies = m.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 2); // ceil(5 / 3)
    let first: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(first["model"], "tiny-rewriter");
    assert_eq!(first["n"], 3);
    let last = first["messages"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(last["content"], "red square");
    assert_eq!(first["messages"][0]["role"], "system");
    let second: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
    assert_eq!(second["n"], 2);
}

#[test]
fn error_status_is_structured_after_retries() {
    std::env::set_var("UNLEARNLAB_TEST_KEY_B", "secret");
    let m = mock(vec![(503, "busy".into())]);
    let err = augment_llm(&config(&m.url, "UNLEARNLAB_TEST_KEY_B", 1), "blue disk", 1).unwrap_err();
    assert!(matches!(err, Error::LlmStatus { status: 503, .. }), "{err}");
    assert_eq!(m.bodies.lock().unwrap().len(), 2); // one try plus one retry

    let m = mock(vec![(401, "no".into())]);
    let err = augment_llm(&config(&m.url, "UNLEARNLAB_TEST_KEY_B", 1), "blue disk", 1).unwrap_err();
    assert!(matches!(err, Error::LlmStatus { status: 401, .. }));
    assert_eq!(m.bodies.lock().unwrap().len(), 1);
}

#[test]
fn malformed_json_is_an_error() {
    std::env::set_var("UNLEARNLAB_TEST_KEY_C", "secret");
    let m = mock(vec![(200, "{\"choices\": [".into())]);
    let err = augment_llm(&config(&m.url, "UNLEARNLAB_TEST_KEY_C", 1), "green cross", 1).unwrap_err();
    assert!(matches!(err, Error::LlmResponse(_)), "{err}");
}

#[test]
fn short_answer_is_an_error() {
    std::env::set_var("UNLEARNLAB_TEST_KEY_D", "secret");
    let m = mock(vec![(200, choices(&["only one"]))]);
    let err = augment_llm(&config(&m.url, "UNLEARNLAB_TEST_KEY_D", 2), "green cross", 2).unwrap_err();
    assert!(matches!(err, Error::LlmResponse(_)), "{err}");
}

#[test]
fn timeout_is_reported() {
    std::env::set_var("UNLEARNLAB_TEST_KEY_E", "secret");
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    thread::spawn(move || {
        let mut held = Vec::new();
        for s in listener.incoming() {
            held.push(s); // accept and never answer
        }
    });
    let mut cfg = config(&url, "UNLEARNLAB_TEST_KEY_E", 1);
    cfg.timeout_secs = 1;
    cfg.max_retries = 0;
    let err = augment_llm(&cfg, "red disk", 1).unwrap_err();
    assert!(matches!(&err, Error::LlmRequest(m) if m.contains("timed out")), "{err}");
}
