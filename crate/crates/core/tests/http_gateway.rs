//! The HTTP backend against a small in-process server speaking the
//! chat-completions and embeddings wire format.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use visualmem_core::gateway::{EmbedKind, Embedder, GenerationRequest, HttpConfig, HttpGateway, Message, Part, SchemaId};
use visualmem_core::{Gateway, GatewayError};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

type Handler = dyn Fn(usize, &Seen) -> (u16, String) + Send + Sync;

struct Mock {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
    peak: Arc<AtomicUsize>,
}

fn read_request(stream: &TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let (mut len, mut auth) = (0, None);
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (name, value) = h.split_once(':')?;
        match name.to_ascii_lowercase().as_str() {
            "content-length" => len = value.trim().parse().ok()?,
            "authorization" => auth = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Seen { path, auth, body: serde_json::from_slice(&body).ok()? })
}

fn serve(delay: Duration, handler: Arc<Handler>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let peak = Arc::new(AtomicUsize::new(0));
    let active = Arc::new(AtomicUsize::new(0));
    let (s, p) = (seen.clone(), peak.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (seen, peak, active, handler) = (s.clone(), p.clone(), active.clone(), handler.clone());
            thread::spawn(move || {
                let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                if let Some(req) = read_request(&stream) {
                    let n = {
                        let mut seen = seen.lock().unwrap();
                        seen.push(req.clone());
                        seen.len() - 1
                    };
                    thread::sleep(delay);
                    let (status, body) = handler(n, &req);
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                }
                active.fetch_sub(1, Ordering::SeqCst);
            });
        }
    });
    Mock { url, seen, peak }
}

fn reply(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn mcq_request() -> GenerationRequest {
    GenerationRequest::new(
        SchemaId::McqAnswer,
        vec![Message::system("Answer the question."), Message::user(vec![Part::text("Which colour? A red B blue")])],
    )
}

fn gateway(url: &str, key: Option<&str>) -> HttpGateway {
    let mut config = HttpConfig::new(url, "test-model");
    config.api_key = key.map(str::to_string);
    config.embedding_model = Some("embed-model".into());
    config.timeout_secs = 10;
    HttpGateway::new(config)
}

#[test]
fn fenced_reply_is_accepted_first_time() {
    let mock = serve(Duration::ZERO, Arc::new(|_, _| (200, reply("```json\n{\"choice\": \"B\", \"rationale\": \"blue\"}\n```"))));
    let doc = gateway(&mock.url, Some("secret")).generate_structured(&mcq_request()).unwrap();
    assert_eq!(doc["choice"], "B");

    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret"));
    assert_eq!(seen[0].body["model"], "test-model");
    let system = seen[0].body["messages"][0]["content"].to_string();
    assert!(system.contains("single JSON object"), "{system}");
}

#[test]
fn one_repair_round_then_give_up() {
    // Bad, then good: the second request carries the rejected reply and the reason.
    let mock = serve(Duration::ZERO, Arc::new(|n, _| {
        (200, reply(if n == 0 { "{\"choice\": \"E\"}" } else { "{\"choice\": \"A\"}" }))
    }));
    let doc = gateway(&mock.url, None).generate_structured(&mcq_request()).unwrap();
    assert_eq!(doc["choice"], "A");
    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert!(seen[0].auth.is_none());
    let msgs = seen[1].body["messages"].as_array().unwrap();
    assert_eq!(msgs[msgs.len() - 2]["role"], "assistant");
    assert!(msgs[msgs.len() - 1].to_string().contains("rejected"));
    drop(seen);

    let mock = serve(Duration::ZERO, Arc::new(|_, _| (200, reply("I think it is blue."))));
    let err = gateway(&mock.url, None).generate_structured(&mcq_request()).unwrap_err();
    assert!(matches!(err, GatewayError::NonConformingOutput { schema: SchemaId::McqAnswer, .. }), "{err}");
    assert_eq!(mock.seen.lock().unwrap().len(), 2);
}

#[test]
fn transport_failures_are_reported() {
    let mock = serve(Duration::ZERO, Arc::new(|_, _| (500, "{\"error\": \"down\"}".to_string())));
    let gw = gateway(&mock.url, None);
    assert!(matches!(gw.generate_structured(&mcq_request()), Err(GatewayError::Transport(_))));
    assert!(matches!(gw.embed(EmbedKind::Text, "hello"), Err(GatewayError::Transport(_))));

    let mock = serve(Duration::ZERO, Arc::new(|_, _| (200, "{\"choices\": []}".to_string())));
    assert!(matches!(gateway(&mock.url, None).generate_structured(&mcq_request()), Err(GatewayError::Transport(_))));

    // Nothing listening.
    let closed = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let gw = gateway(&format!("http://{closed}/v1"), None);
    assert!(matches!(gw.embed(EmbedKind::Text, "hello"), Err(GatewayError::Transport(_))));

    // Invalid requests never reach the wire.
    let mock = serve(Duration::ZERO, Arc::new(|_, _| (200, reply("{}"))));
    let gw = gateway(&mock.url, None);
    let mut bad = mcq_request();
    bad.temperature = 2.0;
    assert!(matches!(gw.generate_structured(&bad), Err(GatewayError::InvalidRequest(_))));
    assert!(gw.embed(EmbedKind::Text, "  ").is_err());
    assert!(mock.seen.lock().unwrap().is_empty());
}

#[test]
fn embeddings_use_the_embedding_model() {
    let mock = serve(Duration::ZERO, Arc::new(|_, _| (200, json!({"data": [{"embedding": [3.0, 4.0]}]}).to_string())));
    let v = gateway(&mock.url, None).embed(EmbedKind::Text, "a red bicycle").unwrap();
    assert_eq!(v.values(), &[3.0, 4.0]);
    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body, json!({"model": "embed-model", "input": "a red bicycle"}));
}

#[test]
fn in_flight_requests_are_bounded() {
    let mock = serve(Duration::from_millis(60), Arc::new(|_, _| (200, json!({"data": [{"embedding": [1.0]}]}).to_string())));
    let mut config = HttpConfig::new(mock.url.clone(), "m");
    config.max_in_flight = 2;
    let gw = Arc::new(HttpGateway::new(config));
    let workers: Vec<_> = (0..8)
        .map(|i| {
            let gw = gw.clone();
            thread::spawn(move || gw.embed(EmbedKind::Text, &format!("item {i}")).unwrap())
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    assert_eq!(mock.seen.lock().unwrap().len(), 8);
    let peak = mock.peak.load(Ordering::SeqCst);
    assert!((1..=2).contains(&peak), "peak concurrency {peak}");
}
