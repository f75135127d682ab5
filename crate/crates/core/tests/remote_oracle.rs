//! Remote reward oracle against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use aesformer::reward::{
    score_rollout, OracleError, RemoteOracleConfig, RemoteRewardOracle, RewardOracle, RewardWeights, TOKEN_ENV,
};
use aesformer::world::{Lexicon, World, WorldConfig};
use aesformer::PromptId;

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<(String, String)>,
    body: String,
}

impl Seen {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Clone, Copy)]
enum Reply {
    Status(u16),
    /// 200 with a fixed distribution, echoing the request id.
    Probs([f64; 6]),
    /// 200 with a foreign request id.
    WrongId,
}

fn read_request(stream: &mut TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut headers = Vec::new();
    let mut len = 0usize;
    loop {
        line.clear();
        reader.read_line(&mut line).ok()?;
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let (k, v) = l.split_once(':')?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.eq_ignore_ascii_case("content-length") {
            len = v.parse().ok()?;
        }
        headers.push((k, v));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).ok()?;
    Some(Seen {
        headers,
        body: String::from_utf8(body).ok()?,
    })
}

/// Serves `script` in order (repeating the last entry) and records requests.
fn serve(script: Vec<Reply>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { continue };
            let Some(req) = read_request(&mut stream) else { continue };
            let id = serde_json::from_str::<serde_json::Value>(&req.body)
                .ok()
                .and_then(|v| v["request_id"].as_str().map(str::to_string))
                .unwrap_or_default();
            log.lock().unwrap().push(req);
            let reply = script[i.min(script.len() - 1)];
            let (status, body) = match reply {
                Reply::Status(s) => (s, String::from("{}")),
                Reply::Probs(p) => {
                    let probs: serde_json::Map<String, serde_json::Value> =
                        (0..6).map(|k| (k.to_string(), p[k].into())).collect();
                    (200, serde_json::json!({"request_id": id, "score_probs": probs}).to_string())
                }
                Reply::WrongId => (
                    200,
                    serde_json::json!({"request_id": "nope", "score_probs": {"0": 1, "1": 0, "2": 0, "3": 0, "4": 0, "5": 0}})
                        .to_string(),
                ),
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, seen)
}

fn oracle(url: &str, retries: u32) -> (World, RemoteRewardOracle) {
    let w = World::generate(Lexicon::default(), WorldConfig::default()).unwrap();
    let cfg = RemoteOracleConfig {
        endpoint: url.to_string(),
        timeout_ms: 5_000,
        max_retries: retries,
        backoff_ms: 1,
        max_backoff_ms: 4,
    };
    let o = RemoteRewardOracle::new(cfg, w.vocab.clone());
    (w, o)
}

#[test]
fn retries_server_errors_with_identical_requests_and_bearer_token() {
    std::env::set_var(TOKEN_ENV, "sekrit");
    let (url, seen) = serve(vec![
        Reply::Status(503),
        Reply::Status(500),
        Reply::Probs([0.0, 0.0, 0.0, 0.0, 1.0, 3.0]),
    ]);
    let (w, o) = oracle(&url, 3);
    let prof = &w.profiles()[0];
    let d = o.creativity(prof.id, prof.ideal_plan.raw_tokens()).unwrap();
    assert!((aesformer::reward::expected_score(&d) - 4.75).abs() < 1e-12);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen.iter().all(|s| s.body == seen[0].body));
    assert!(seen.iter().all(|s| s.header("authorization") == Some("Bearer sekrit")));
    let id = seen[0].header("x-request-id").unwrap();
    assert!(seen[0].body.contains(id));
    assert!(seen[0].body.contains("\"kind\":\"creativity\""));
}

#[test]
fn persistent_failure_is_unavailable_after_all_attempts() {
    let (url, seen) = serve(vec![Reply::Status(502)]);
    let (w, o) = oracle(&url, 2);
    let prof = &w.profiles()[1];
    let err = o
        .alignment(prof.id, prof.ideal_plan.raw_tokens(), &prof.ideal_plan)
        .unwrap_err();
    assert!(matches!(err, OracleError::Unavailable(_)), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_and_bad_payloads_are_not_retried() {
    for reply in [Reply::Status(400), Reply::WrongId] {
        let (url, seen) = serve(vec![reply]);
        let (w, o) = oracle(&url, 3);
        let err = o
            .creativity(PromptId(0), w.profiles()[0].ideal_plan.raw_tokens())
            .unwrap_err();
        assert!(matches!(err, OracleError::Malformed(_)), "{err}");
        assert_eq!(seen.lock().unwrap().len(), 1);
    }
}

#[test]
fn refused_connection_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let (w, o) = oracle(&format!("http://127.0.0.1:{port}/score"), 1);
    let err = o
        .creativity(PromptId(0), w.profiles()[0].ideal_plan.raw_tokens())
        .unwrap_err();
    assert!(matches!(err, OracleError::Unavailable(_)));
}

#[test]
fn remote_scores_feed_the_reward_combination() {
    let (url, seen) = serve(vec![Reply::Probs([0.0, 0.0, 0.0, 0.0, 0.0, 1.0])]);
    let (w, o) = oracle(&url, 0);
    let prof = &w.profiles()[2];
    let b = score_rollout(
        prof.ideal_plan.raw_tokens(),
        &prof.ideal_plan,
        prof.id,
        &o,
        &RewardWeights::default(),
        &w.vocab,
    )
    .unwrap();
    assert_eq!((b.format, b.alignment, b.creativity), (1, 1.0, 1.0));
    assert!((b.combined - 1.0).abs() < 1e-12);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert!(seen[0].body.contains("\"reference\""));
}
