use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use radforge::agent::{fills, Gateway, LiveBackend, LiveConfig, RetryPolicy, RoleName};
use radforge::metrics::{keyword_label, label_via_service, Labeler};
use radforge::Error;
use serde_json::{json, Value};

type Seen = Arc<Mutex<Vec<(Value, Option<String>)>>>;

/// Serves the scripted `(status, body)` replies in order, one per
/// connection, and records each request body and authorization header.
struct Stub {
    url: String,
    seen: Seen,
}

fn stub(replies: Vec<(u16, String)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let Ok((mut stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock()
                .unwrap()
                .push((serde_json::from_slice(&buf).unwrap_or(Value::Null), auth));
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    Stub { url, seen }
}

fn completion(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn live(url: &str) -> Gateway {
    let backend = LiveBackend::new(LiveConfig {
        endpoint: url.to_string(),
        model: "test-model".into(),
        api_key: Some("k-123".into()),
        timeout: Duration::from_secs(5),
    })
    .unwrap();
    Gateway::new(backend).with_retry(RetryPolicy {
        budget: 4,
        backoff_base: Duration::from_millis(1),
    })
}

#[test]
fn retries_rate_limits_then_succeeds() {
    let s = stub(vec![
        (429, "{}".into()),
        (503, "{}".into()),
        (200, completion("lungs / edema")),
    ]);
    let gw = live(&s.url);
    let reply = gw
        .call(
            RoleName::Classify,
            fills([("sentence", "Mild edema.".into()), ("labels", "lungs / edema".into())]),
            &[],
        )
        .unwrap();
    assert_eq!(reply.text, "lungs / edema");
    let seen = s.seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let (body, auth) = &seen[0];
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert!(body["messages"][1]["content"].as_str().unwrap().contains("Mild edema."));
    assert_eq!(auth.as_deref(), Some("Bearer k-123"));
}

#[test]
fn exhausted_budget_reports_attempts() {
    let s = stub(vec![(429, "{}".into()); 5]);
    let err = live(&s.url)
        .call(
            RoleName::Summarize,
            fills([("leaf", "x".into()), ("sentences", "y".into())]),
            &[],
        )
        .unwrap_err();
    assert_eq!(err.exit_code(), 3);
    match err {
        Error::Transport(t) => {
            assert_eq!(t.attempts, 5);
            assert_eq!(t.status, Some(429));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn client_errors_are_not_retried() {
    let s = stub(vec![(400, "{\"error\":\"bad\"}".into()), (200, completion("never"))]);
    let err = live(&s.url)
        .call(
            RoleName::Summarize,
            fills([("leaf", "x".into()), ("sentences", "y".into())]),
            &[],
        )
        .unwrap_err();
    assert!(
        matches!(err, Error::Transport(ref t) if t.attempts == 1 && t.status == Some(400)),
        "{err}"
    );
    assert_eq!(s.seen.lock().unwrap().len(), 1);
}

#[test]
fn local_images_are_inlined() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    std::fs::write(&img, [0x89, b'P', b'N', b'G']).unwrap();
    let s = stub(vec![(200, completion("The heart is normal."))]);
    let gw = live(&s.url);
    let f = fills([
        ("report_id", "r".into()),
        ("organ", "heart".into()),
        ("knowledge", "k".into()),
        ("ground_truth", "g".into()),
    ]);
    gw.call(RoleName::DescribeOrgan, f, &[img.to_string_lossy().into_owned()])
        .unwrap();
    let seen = s.seen.lock().unwrap();
    let parts = seen[0].0["messages"][1]["content"].as_array().unwrap().clone();
    assert_eq!(parts[0]["type"], "text");
    assert_eq!(parts[1]["image_url"]["url"], "data:image/png;base64,iVBORw==");
}

#[test]
fn labeler_service_round_trip() {
    let gold = keyword_label("Cardiomegaly. Small left pleural effusion.");
    let reply = json!({ "labels": [gold, keyword_label("")] }).to_string();
    let s = stub(vec![(200, reply)]);
    let reports = vec!["a".to_string(), "b".to_string()];
    let labels = Labeler::parse(&s.url).unwrap().label_all(&reports).unwrap();
    assert_eq!(labels[0], gold);
    assert_eq!(s.seen.lock().unwrap()[0].0["reports"], json!(["a", "b"]));

    let s = stub(vec![(200, json!({ "labels": [] }).to_string())]);
    assert_eq!(label_via_service(&reports, &s.url).unwrap_err().exit_code(), 2);

    let s = stub(vec![(500, "{}".into())]);
    assert_eq!(label_via_service(&reports, &s.url).unwrap_err().exit_code(), 3);
    assert!(label_via_service(&[], "http://127.0.0.1:9").unwrap().is_empty());
}
