use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use ideaforest_core::backend::{Backend, BackendError, CompletionRequest, RemoteBackend, RetryPolicy};

/// Tiny HTTP/1.1 server answering with scripted (status, body) pairs in order;
/// the last one repeats. Returns the base URL and the captured request bodies.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
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
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(String::from_utf8(body).unwrap());
            let (status, text) = &replies[i.min(replies.len() - 1)];
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    (url, seen)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"content": text}, "finish_reason": "stop"}]
    })
    .to_string()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 5,
        base_delay: Duration::from_millis(10),
        jitter: 0.2,
    }
}

#[test]
fn persistent_rate_limit_gives_up_after_five_attempts() {
    let (url, seen) = serve(vec![(429, "{}".into())]);
    let backend = RemoteBackend::new(&url, None, "m").unwrap().with_retry(fast_retry());
    let started = Instant::now();
    let err = backend
        .send(&CompletionRequest::new("sys", "user"))
        .unwrap_err();
    let elapsed = started.elapsed();
    assert!(matches!(err, BackendError::ProviderUnavailable { attempts: 5, .. }), "{err}");
    assert!(err.is_unreachable());
    assert_eq!(seen.lock().unwrap().len(), 5);
    // waits of 10, 20, 40, 80 ms, each at least 80% of nominal
    assert!(elapsed >= Duration::from_millis(120), "{elapsed:?}");
}

#[test]
fn transient_errors_are_retried_until_success() {
    let (url, seen) = serve(vec![
        (429, "{}".into()),
        (503, "{}".into()),
        (200, ok_body("PLAN: hi")),
    ]);
    let backend = RemoteBackend::new(&url, None, "m").unwrap().with_retry(fast_retry());
    let r = backend.send(&CompletionRequest::new("sys", "user")).unwrap();
    assert_eq!(r.text, "PLAN: hi");
    assert!(!r.truncated);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn temperature_and_prompts_reach_the_provider() {
    let (url, seen) = serve(vec![(200, ok_body("x"))]);
    let backend = RemoteBackend::new(&url, Some("k".into()), "model-a").unwrap();
    let req = CompletionRequest::new("be terse", "solve it").with_temperature(0.25);
    backend.send(&req).unwrap();
    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(body["temperature"], 0.25);
    assert_eq!(body["model"], "model-a");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], "be terse");
    assert_eq!(body["messages"][1]["content"], "solve it");
}

#[test]
fn rejected_credentials_are_not_retried() {
    let (url, seen) = serve(vec![(401, "bad key".into())]);
    let backend = RemoteBackend::new(&url, Some("nope".into()), "m")
        .unwrap()
        .with_retry(fast_retry());
    let err = backend.send(&CompletionRequest::new("s", "u")).unwrap_err();
    assert!(matches!(err, BackendError::AuthError(_)), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn length_cutoff_is_flagged_as_truncated() {
    let body = serde_json::json!({
        "choices": [{"message": {"content": "PLAN: par"}, "finish_reason": "length"}]
    })
    .to_string();
    let (url, _) = serve(vec![(200, body)]);
    let backend = RemoteBackend::new(&url, None, "m").unwrap();
    let r = backend.send(&CompletionRequest::new("s", "u")).unwrap();
    assert!(r.truncated);
}

#[test]
fn unreachable_host_is_provider_unavailable() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let backend = RemoteBackend::new(&format!("http://127.0.0.1:{port}"), None, "m")
        .unwrap()
        .with_retry(fast_retry());
    let err = backend.send(&CompletionRequest::new("s", "u")).unwrap_err();
    assert!(err.is_unreachable());
}
