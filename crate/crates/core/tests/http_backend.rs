use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use ordersmith::backend::{
    label_distribution, with_cache, with_counter, Backend, BackendError, CacheStore, HttpBackend, HttpConfig,
    HttpProtocol,
};
use ordersmith::LabelSpace;
use serde_json::{json, Value};

struct Request {
    auth: Option<String>,
    body: Value,
}

type Handler = dyn Fn(&Request, usize) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server: one request per connection.
struct Server {
    url: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<Value>>>,
    peak: Arc<AtomicUsize>,
}

fn serve(handler: Arc<Handler>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (h, b, a, p) = (hits.clone(), bodies.clone(), active.clone(), peak.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let (handler, h, b, a, p) = (handler.clone(), h.clone(), b.clone(), a.clone(), p.clone());
            thread::spawn(move || {
                let now = a.fetch_add(1, Ordering::SeqCst) + 1;
                p.fetch_max(now, Ordering::SeqCst);
                handle(stream, &*handler, &h, &b);
                a.fetch_sub(1, Ordering::SeqCst);
            });
        }
    });
    Server {
        url,
        hits,
        bodies,
        peak,
    }
}

fn handle(mut stream: TcpStream, handler: &Handler, hits: &AtomicUsize, bodies: &Mutex<Vec<Value>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut length = 0;
    let mut auth = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            length = v.trim().parse().unwrap();
        }
        if lower.starts_with("authorization:") {
            auth = Some(line["authorization:".len()..].trim().to_string());
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let body: Value = serde_json::from_slice(&body).unwrap();
    let n = hits.fetch_add(1, Ordering::SeqCst);
    bodies.lock().unwrap().push(body.clone());
    let (status, text) = handler(&Request { auth, body }, n);
    let reply = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    let _ = stream.write_all(reply.as_bytes());
}

fn config(url: &str, protocol: HttpProtocol) -> HttpConfig {
    HttpConfig {
        url: url.to_string(),
        model: "tiny".into(),
        protocol,
        backoff_ms: 1,
        timeout_secs: 10,
        ..HttpConfig::default()
    }
}

fn space() -> LabelSpace {
    LabelSpace::from_verbalizers(&["positive", "negative"]).unwrap()
}

fn candidates() -> Vec<String> {
    vec!["positive".into(), "negative".into()]
}

#[test]
fn candidates_protocol_round_trip() {
    let server = serve(Arc::new(|req: &Request, _| {
        assert_eq!(req.auth.as_deref(), Some("Bearer sekrit"));
        let n = req.body["candidates"].as_array().unwrap().len();
        let lp: Vec<f64> = (0..n).map(|i| -0.3567 - 0.8473 * i as f64).collect();
        (200, json!({ "log_probs": lp }).to_string())
    }));
    let backend = HttpBackend::new(HttpConfig {
        api_key: Some("sekrit".into()),
        ..config(&server.url, HttpProtocol::Candidates)
    })
    .unwrap();
    let d = label_distribution(&backend, "Review: fine\nSentiment:", &space()).unwrap();
    assert!((d.probs()[0] - 0.700_000_449_318_495).abs() < 1e-9);
    let body = &server.bodies.lock().unwrap()[0];
    assert_eq!(body["prompt"], "Review: fine\nSentiment:");
    assert_eq!(body["model"], "tiny");
    assert_eq!(body["candidates"], json!(["positive", "negative"]));
}

#[test]
fn openai_echo_protocol() {
    let server = serve(Arc::new(|req: &Request, _| {
        let text = req.body["prompt"].as_str().unwrap().to_string();
        assert_eq!(req.body["echo"], true);
        assert_eq!(req.body["max_tokens"], 0);
        // One token for the prompt, then the continuation ("very good" is two tokens).
        let cut = text.find("Sentiment:").unwrap() + "Sentiment:".len();
        let tail = &text[cut..];
        let mut offsets = vec![0];
        let mut logprobs = vec![Value::Null];
        let pieces: Vec<&str> = if tail == " very good" { vec![" very", " good"] } else { vec![tail] };
        let mut at = cut;
        for piece in pieces {
            offsets.push(at);
            logprobs.push(json!(if piece.contains("positive") { -0.5 } else { -1.5 }));
            at += piece.len();
        }
        let choice = json!({"logprobs": {"token_logprobs": logprobs, "text_offset": offsets}});
        (200, json!({ "choices": [choice] }).to_string())
    }));
    let backend = HttpBackend::new(config(&server.url, HttpProtocol::OpenaiEcho)).unwrap();
    let lp = backend.next_token_logprobs("Review: ok\nSentiment:", &candidates()).unwrap();
    assert_eq!(lp, vec![-0.5, -1.5]);
    let bodies = server.bodies.lock().unwrap().clone();
    assert_eq!(bodies[0]["prompt"], "Review: ok\nSentiment: positive");
    assert_eq!(bodies[1]["prompt"], "Review: ok\nSentiment: negative");

    let multi = backend.next_token_logprobs("Review: ok\nSentiment:", &["very good".to_string()]);
    assert!(matches!(multi, Err(BackendError::TokenizationError(t)) if t == "very good"));
}

#[test]
fn transient_failures_are_retried() {
    let server = serve(Arc::new(|_: &Request, n| {
        if n < 2 {
            (503, "busy".into())
        } else {
            (200, json!({"log_probs": [-0.1, -2.0]}).to_string())
        }
    }));
    let backend = HttpBackend::new(config(&server.url, HttpProtocol::Candidates)).unwrap();
    assert_eq!(backend.next_token_logprobs("p", &candidates()).unwrap(), vec![-0.1, -2.0]);
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_failure_becomes_unavailable() {
    let server = serve(Arc::new(|_: &Request, _| (500, "down".into())));
    let backend = HttpBackend::new(config(&server.url, HttpProtocol::Candidates)).unwrap();
    match backend.next_token_logprobs("p", &candidates()) {
        Err(BackendError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("unexpected {other:?}"),
    }
    // One initial attempt plus three retries.
    assert_eq!(server.hits.load(Ordering::SeqCst), 4);
}

#[test]
fn multi_token_error_object() {
    let server = serve(Arc::new(|_: &Request, _| {
        (400, json!({"error": {"type": "multi_token", "token": "negative"}}).to_string())
    }));
    let backend = HttpBackend::new(config(&server.url, HttpProtocol::Candidates)).unwrap();
    let err = backend.next_token_logprobs("p", &candidates()).unwrap_err();
    assert!(matches!(err, BackendError::TokenizationError(t) if t == "negative"));
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_responses_are_protocol_errors() {
    for reply in [
        (400, "not json".to_string()),
        (200, json!({"log_probs": [-0.1]}).to_string()),
        (200, json!({"log_probs": [-0.1, 3.0]}).to_string()),
        (200, json!({"other": 1}).to_string()),
    ] {
        let r = reply.clone();
        let server = serve(Arc::new(move |_: &Request, _| r.clone()));
        let backend = HttpBackend::new(config(&server.url, HttpProtocol::Candidates)).unwrap();
        let err = backend.next_token_logprobs("p", &candidates()).unwrap_err();
        assert!(matches!(err, BackendError::ProtocolError(_)), "{reply:?} gave {err:?}");
        assert_eq!(server.hits.load(Ordering::SeqCst), 1);
    }
}

#[test]
fn in_flight_requests_are_bounded() {
    let server = serve(Arc::new(|_: &Request, _| {
        thread::sleep(Duration::from_millis(40));
        (200, json!({"log_probs": [-0.1, -2.0]}).to_string())
    }));
    let backend = Arc::new(
        HttpBackend::new(HttpConfig {
            max_in_flight: 2,
            ..config(&server.url, HttpProtocol::Candidates)
        })
        .unwrap(),
    );
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let b = backend.clone();
            thread::spawn(move || b.next_token_logprobs(&format!("p{i}"), &candidates()).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(server.hits.load(Ordering::SeqCst), 8);
    assert!(server.peak.load(Ordering::SeqCst) <= 2);
}

#[test]
fn cache_avoids_repeat_requests() {
    let server = serve(Arc::new(|_: &Request, _| (200, json!({"log_probs": [-0.1, -2.0]}).to_string())));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.tsv");
    let real = with_counter(HttpBackend::new(config(&server.url, HttpProtocol::Candidates)).unwrap());
    let calls = real.counter();
    let cached = with_cache(real, Arc::new(CacheStore::open(&path).unwrap()));
    for _ in 0..3 {
        cached.next_token_logprobs("same", &candidates()).unwrap();
    }
    assert_eq!(calls.get(), 1);
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
    let reopened = with_cache(
        HttpBackend::new(config(&server.url, HttpProtocol::Candidates)).unwrap(),
        Arc::new(CacheStore::open(&path).unwrap()),
    );
    reopened.next_token_logprobs("same", &candidates()).unwrap();
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}
