//! HTTP backends against an in-process stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use memforest::config::{Backends, Config};
use memforest_core::backends::{ChildView, Choice, PortErrorKind, PortKind};
use memforest_core::substrate::{TemporalAnchor, Timestamp};
use serde_json::{json, Value};

enum Reply {
    Json(u16, Value),
    /// Accept the request and answer nothing for this long.
    Stall(Duration),
}

fn chat(content: &str) -> Reply {
    Reply::Json(
        200,
        json!({
            "choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3},
        }),
    )
}

struct Stub {
    base_url: String,
    seen: Arc<Mutex<Vec<Value>>>,
    handle: JoinHandle<()>,
}

impl Stub {
    /// Serves `replies` in order, one connection each.
    fn start(replies: Vec<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let base_url = format!("http://{}/v1", listener.local_addr().expect("addr"));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let handle = std::thread::spawn(move || {
            for reply in replies {
                let (stream, _) = listener.accept().expect("accept");
                let mut reader = BufReader::new(stream.try_clone().expect("clone"));
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).expect("header");
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().expect("length");
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).expect("body");
                log.lock().expect("log").push(serde_json::from_slice(&body).expect("json request"));
                let mut stream = stream;
                match reply {
                    Reply::Json(code, v) => {
                        let text = v.to_string();
                        let _ = write!(
                            stream,
                            "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                            text.len()
                        );
                    }
                    Reply::Stall(d) => std::thread::sleep(d),
                }
            }
        });
        Self { base_url, seen, handle }
    }

    fn requests(self) -> Vec<Value> {
        self.handle.join().expect("stub thread");
        Arc::try_unwrap(self.seen).expect("sole owner").into_inner().expect("lock")
    }
}

fn backends(stub: &Stub, ports: &str, retries: u32, timeout: u64) -> Backends {
    let text = format!(
        "{ports}\n[http]\nbase_url = \"{}\"\nmodel = \"m\"\nembedding_model = \"e\"\ntimeout_secs = {timeout}\nretries = {retries}\nbackoff_ms = 1\n",
        stub.base_url
    );
    let cfg = Config::parse(&text, Path::new(".")).expect("config");
    Backends::build(&cfg, false).expect("backends")
}

fn span() -> TemporalAnchor {
    TemporalAnchor::point(Timestamp(1_700_000_000))
}

#[test]
fn summarizer_parses_reply_and_meters_tokens() {
    let stub = Stub::start(vec![chat(r#"{"summary":"Bob moved to Miami."}"#)]);
    let b = backends(&stub, "[summarizer]\nkind = \"http\"", 0, 5);
    let out = b.ports().summarize(&span(), &["Bob moved.", "He likes it."]).expect("summary");
    assert_eq!(out, "Bob moved to Miami.");
    let c = b.ledger.snapshot().get(PortKind::Summarizer).clone();
    assert_eq!((c.calls, c.failures, c.repairs), (1, 0, 0));
    assert_eq!((c.input_tokens, c.output_tokens), (12, 3));
    let reqs = stub.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0]["model"], "m");
    assert_eq!(reqs[0]["temperature"], 0);
    assert!(reqs[0]["messages"][1]["content"].as_str().expect("user prompt").contains("He likes it."));
}

#[test]
fn malformed_reply_is_repaired_once() {
    let stub = Stub::start(vec![chat("Sure! The summary is: Bob moved."), chat(r#"{"summary":"Bob moved."}"#)]);
    let b = backends(&stub, "[summarizer]\nkind = \"http\"", 0, 5);
    let out = b.ports().summarize(&span(), &["Bob moved."]).expect("repaired");
    assert_eq!(out, "Bob moved.");
    let c = b.ledger.snapshot().get(PortKind::Summarizer).clone();
    assert_eq!((c.calls, c.repairs, c.failures), (1, 1, 0));
    let reqs = stub.requests();
    assert_eq!(reqs.len(), 2);
    assert_eq!(reqs[1]["messages"].as_array().expect("messages").len(), 4);
}

#[test]
fn second_schema_violation_is_permanent() {
    let stub = Stub::start(vec![chat("nope"), chat(r#"{"summary": 3}"#)]);
    let b = backends(&stub, "[summarizer]\nkind = \"http\"", 0, 5);
    let err = b.ports().summarize(&span(), &["x"]).unwrap_err();
    assert_eq!(err.kind, PortErrorKind::Permanent);
    assert!(err.message.contains("after repair"), "{}", err.message);
    assert_eq!(b.ledger.snapshot().get(PortKind::Summarizer).failures, 1);
    stub.requests();
}

#[test]
fn server_errors_are_retried() {
    let stub = Stub::start(vec![Reply::Json(503, json!({"error": "busy"})), chat(r#"{"summary":"ok"}"#)]);
    let b = backends(&stub, "[summarizer]\nkind = \"http\"", 1, 5);
    assert_eq!(b.ports().summarize(&span(), &["x"]).expect("retried"), "ok");
    assert_eq!(stub.requests().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(vec![Reply::Json(400, json!({"error": "bad request"}))]);
    let b = backends(&stub, "[summarizer]\nkind = \"http\"", 3, 5);
    let err = b.ports().summarize(&span(), &["x"]).unwrap_err();
    assert_eq!(err.kind, PortErrorKind::Permanent);
    assert_eq!(stub.requests().len(), 1);
}

#[test]
fn timeout_is_transient_and_counted() {
    let stub = Stub::start(vec![Reply::Stall(Duration::from_millis(2_500))]);
    let b = backends(&stub, "[summarizer]\nkind = \"http\"", 0, 1);
    let err = b.ports().summarize(&span(), &["x"]).unwrap_err();
    assert_eq!(err.kind, PortErrorKind::Transient);
    assert_eq!(b.ledger.snapshot().get(PortKind::Summarizer).failures, 1);
    stub.requests();
}

#[test]
fn embedder_reads_first_vector() {
    let stub = Stub::start(vec![Reply::Json(200, json!({"data": [{"embedding": [3.0, 4.0]}]}))]);
    let b = backends(&stub, "[embedder]\nkind = \"http\"", 0, 5);
    let v = b.ports().embed("hello").expect("vector");
    assert_eq!(v, vec![0.6, 0.8]);
    assert_eq!(b.embedder_id, "http:e");
    let reqs = stub.requests();
    assert_eq!(reqs[0], json!({"model": "e", "input": "hello"}));
}

#[test]
fn chooser_maps_empty_list_to_stop() {
    let stub = Stub::start(vec![chat(r#"{"children":[1,0]}"#), chat(r#"{"children":[]}"#)]);
    let b = backends(&stub, "[chooser]\nkind = \"http\"", 0, 5);
    let kids = [
        ChildView { summary: "Boston years", interval: span(), is_leaf: false },
        ChildView { summary: "Davis years", interval: span(), is_leaf: false },
    ];
    let ports = b.ports();
    assert_eq!(ports.choose("where before Miami", &kids).expect("chooser").expect("ok"), Choice::Children(vec![1, 0]));
    assert_eq!(ports.choose("where before Miami", &kids).expect("chooser").expect("ok"), Choice::Stop);
    stub.requests();
}
