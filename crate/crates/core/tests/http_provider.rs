use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use kgmem_core::config::ProviderConfig;
use kgmem_core::provider::{ChatExchange, HttpProvider, Provider, ProviderError, Task};

struct Captured {
    request_line: String,
    authorization: Option<String>,
    body: serde_json::Value,
}

/// Serve `responses` in order, one per connection, reporting each request.
fn serve(responses: Vec<(u16, String, Duration)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body, delay) in responses {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut raw = vec![0; length];
            reader.read_exact(&mut raw).unwrap();
            let _ = tx.send(Captured {
                request_line: request_line.trim().to_string(),
                authorization,
                body: serde_json::from_slice(&raw).unwrap_or(serde_json::Value::Null),
            });
            thread::sleep(delay);
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (format!("http://{addr}/v1"), rx)
}

fn config(base_url: String, dim: usize) -> ProviderConfig {
    ProviderConfig {
        kind: kgmem_core::ProviderKind::Http,
        base_url,
        api_key_env: Some("KGMEM_TEST_KEY".into()),
        embed_dim: dim,
        timeout_ms: 500,
        max_retries: 0,
        ..ProviderConfig::default()
    }
}

fn provider(base_url: String, dim: usize) -> HttpProvider {
    std::env::set_var("KGMEM_TEST_KEY", "sk-test");
    HttpProvider::from_config(&config(base_url, dim)).unwrap()
}

fn quick() -> Duration {
    Duration::ZERO
}

#[test]
fn chat_completion_round_trip() {
    let body = r#"{"choices":[{"message":{"role":"assistant","content":"my shoes|are in|the closet"}}],
                  "usage":{"prompt_tokens":12,"completion_tokens":5,"total_tokens":17}}"#;
    let (url, rx) = serve(vec![(200, body.into(), quick())]);
    let p = provider(url, 4);
    let exchange = ChatExchange::new("sys", "hello", Task::General).with_max_output_tokens(64);
    let out = p.chat_complete(&exchange).unwrap();
    assert_eq!(out.text, "my shoes|are in|the closet");
    assert_eq!((out.usage.prompt_tokens, out.usage.completion_tokens, out.usage.total_tokens), (12, 5, 17));

    let req = rx.recv().unwrap();
    assert_eq!(req.request_line, "POST /v1/chat/completions HTTP/1.1");
    assert_eq!(req.authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(req.body["model"], "gpt-4.1-mini");
    assert_eq!(req.body["max_tokens"], 64);
    assert_eq!(req.body["messages"][0]["role"], "system");
    assert_eq!(req.body["messages"][1]["content"], "hello");
}

#[test]
fn embedding_round_trip() {
    let body = r#"{"data":[{"embedding":[0.5,0.5,0.5,0.5],"index":0}]}"#;
    let (url, rx) = serve(vec![(200, body.into(), quick())]);
    let e = provider(url, 4).embed("my shoes").unwrap();
    assert_eq!(e.values(), &[0.5, 0.5, 0.5, 0.5]);
    let req = rx.recv().unwrap();
    assert_eq!(req.request_line, "POST /v1/embeddings HTTP/1.1");
    assert_eq!(req.body["input"], "my shoes");
    assert_eq!(req.body["model"], "text-embedding-ada-002");
}

#[test]
fn wrong_dimension_is_rejected() {
    let body = r#"{"data":[{"embedding":[1.0,0.0]}]}"#;
    let (url, _rx) = serve(vec![(200, body.into(), quick())]);
    let err = provider(url, 4).embed("x").unwrap_err();
    assert_eq!(err, ProviderError::DimensionMismatch { expected: 4, got: 2 });
}

#[test]
fn non_success_status_is_reported() {
    let (url, _rx) = serve(vec![(401, r#"{"error":"bad key"}"#.into(), quick())]);
    let err = provider(url, 4)
        .chat_complete(&ChatExchange::new("", "hi", Task::General))
        .unwrap_err();
    match err {
        ProviderError::Status { status, body } => {
            assert_eq!(status, 401);
            assert!(body.contains("bad key"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_body_is_reported() {
    let (url, _rx) = serve(vec![(200, r#"{"choices":[]}"#.into(), quick())]);
    let err = provider(url, 4)
        .chat_complete(&ChatExchange::new("", "hi", Task::General))
        .unwrap_err();
    assert!(matches!(err, ProviderError::MalformedResponse(_)), "{err:?}");
}

#[test]
fn slow_server_times_out() {
    let (url, _rx) = serve(vec![(200, "{}".into(), Duration::from_millis(1500))]);
    let err = provider(url, 4).embed("x").unwrap_err();
    assert_eq!(err, ProviderError::Timeout);
}

#[test]
fn server_errors_are_retried() {
    let ok = r#"{"data":[{"embedding":[0.0,1.0,0.0,0.0]}]}"#;
    let (url, rx) = serve(vec![(503, "busy".into(), quick()), (200, ok.into(), quick())]);
    std::env::set_var("KGMEM_TEST_KEY", "sk-test");
    let mut cfg = config(url, 4);
    cfg.max_retries = 1;
    let e = HttpProvider::from_config(&cfg).unwrap().embed("x").unwrap();
    assert_eq!(e.values()[1], 1.0);
    assert_eq!(rx.iter().take(2).count(), 2);
}

#[test]
fn missing_key_fails_fast() {
    let mut cfg = config("http://127.0.0.1:9/v1".into(), 4);
    cfg.api_key_env = Some("KGMEM_SURELY_UNSET_VAR".into());
    assert_eq!(
        HttpProvider::from_config(&cfg).unwrap_err(),
        ProviderError::MissingApiKey("KGMEM_SURELY_UNSET_VAR".into())
    );
}
