mod common;

use std::sync::Arc;

use common::{verdict_json, Reply, Stub};
use soapgrpo::claims::{Claim, ClaimExtractor, EntailmentChecker, TextKind};
use soapgrpo::judge::{JudgeClient, RemoteChecker, RemoteExtractor, Winner, JUDGE_SYSTEM_PROMPT};
use soapgrpo::Error;

#[test]
fn retries_server_errors_then_succeeds() {
    let stub = Stub::start(|n, _| match n {
        0 => Reply::status(503, "busy"),
        1 => Reply::status(429, "slow down"),
        _ => Reply::content("hello"),
    });
    let client = JudgeClient::new(stub.config()).unwrap();
    assert_eq!(client.chat_complete("sys", "user").unwrap(), "hello");
    assert_eq!(stub.requests().len(), 3);
}

#[test]
fn gives_up_after_max_retries() {
    let stub = Stub::start(|_, _| Reply::status(500, "down"));
    let mut cfg = stub.config();
    cfg.max_retries = 2;
    let client = JudgeClient::new(cfg).unwrap();
    match client.chat_complete("sys", "user") {
        Err(e @ Error::Transport { attempts: 3, .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(stub.requests().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(|_, _| Reply::status(400, "bad model"));
    let client = JudgeClient::new(stub.config()).unwrap();
    match client.chat_complete("sys", "user") {
        Err(Error::Request { status: 400, body }) => assert_eq!(body, "bad model"),
        other => panic!("expected request error, got {other:?}"),
    }
    assert_eq!(stub.requests().len(), 1);
}

#[test]
fn connection_refused_is_a_transport_error() {
    let url = {
        let stub = Stub::start(|_, _| Reply::content("x"));
        stub.url.clone()
    };
    let mut cfg = soapgrpo::judge::EndpointConfig {
        base_url: url,
        api_key_env_var: String::new(),
        backoff_ms: 1,
        max_retries: 1,
        ..Default::default()
    };
    cfg.timeout_secs = 2.0;
    let client = JudgeClient::new(cfg).unwrap();
    assert!(matches!(
        client.chat_complete("s", "u"),
        Err(Error::Transport { attempts: 2, .. })
    ));
}

#[test]
fn request_body_and_correlation_id() {
    let stub = Stub::start(|_, _| Reply::content("ok"));
    let client = JudgeClient::new(stub.config()).unwrap();
    client.chat_complete("the system", "the user").unwrap();
    client.chat_complete("the system", "again").unwrap();
    let seen = stub.requests();
    assert_eq!(seen[0].body["model"], "stub-model");
    assert_eq!(seen[0].body["temperature"], 0.0);
    assert_eq!(seen[0].system_message(), "the system");
    assert_eq!(seen[0].user_message(), "the user");
    assert!(seen[0].authorization.is_none());
    let ids: Vec<_> = seen.iter().map(|s| s.request_id.clone().unwrap()).collect();
    assert_ne!(ids[0], ids[1]);
}

#[test]
fn mismatched_correlation_id_is_retried() {
    let stub = Stub::start(|n, _| {
        let mut r = Reply::content("ok");
        if n == 0 {
            r.echo = Some(Some("someone-else".into()));
        }
        r
    });
    let client = JudgeClient::new(stub.config()).unwrap();
    assert_eq!(client.chat_complete("s", "u").unwrap(), "ok");
    assert_eq!(stub.requests().len(), 2);
}

#[test]
fn bearer_token_comes_from_the_environment() {
    let stub = Stub::start(|_, _| Reply::content("ok"));
    let mut cfg = stub.config();
    cfg.api_key_env_var = "SOAPGRPO_STUB_TEST_KEY".into();
    // SAFETY: this variable is only read by this test.
    unsafe { std::env::set_var("SOAPGRPO_STUB_TEST_KEY", "sk-test-123") };
    let client = JudgeClient::new(cfg).unwrap();
    client.chat_complete("s", "u").unwrap();
    assert_eq!(
        stub.requests()[0].authorization.as_deref(),
        Some("Bearer sk-test-123")
    );
}

#[test]
fn malformed_bodies_are_retried() {
    let stub = Stub::start(|n, _| match n {
        0 => Reply::status(200, "not json"),
        1 => Reply::status(200, r#"{"choices": []}"#),
        _ => Reply::content("fine"),
    });
    let client = JudgeClient::new(stub.config()).unwrap();
    assert_eq!(client.chat_complete("s", "u").unwrap(), "fine");
}

#[test]
fn judge_rerequests_until_the_schema_validates() {
    let stub = Stub::start(|n, _| match n {
        0 => Reply::content("Sure! Here is my verdict."),
        1 => Reply::content(&verdict_json("both")),
        _ => Reply::content(&verdict_json("grpo")),
    });
    let client = JudgeClient::new(stub.config()).unwrap();
    let v = client
        .pairwise_judge("Doctor: Hi.", "base note", "grpo note")
        .unwrap();
    assert_eq!(v.pairwise_preference.overall_winner, Winner::Grpo);
    let seen = stub.requests();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].system_message(), JUDGE_SYSTEM_PROMPT);
    assert!(seen[0]
        .user_message()
        .contains("[BASE_NOTE]\n<<<\nbase note\n>>>"));
}

#[test]
fn judge_reports_validation_error_when_every_reply_is_invalid() {
    let stub = Stub::start(|_, _| Reply::content("{}"));
    let mut cfg = stub.config();
    cfg.max_retries = 1;
    let client = JudgeClient::new(cfg).unwrap();
    let err = client.pairwise_judge("d", "b", "g").unwrap_err();
    assert!(matches!(err, Error::Validation { .. }), "{err:?}");
    assert_eq!(stub.requests().len(), 2);
}

#[test]
fn in_flight_requests_are_bounded() {
    let stub = Stub::start(|_, _| {
        let mut r = Reply::content("yes");
        r.delay_ms = 30;
        r
    });
    let mut cfg = stub.config();
    cfg.max_in_flight = 2;
    let client = Arc::new(JudgeClient::new(cfg).unwrap());
    std::thread::scope(|s| {
        for _ in 0..8 {
            let c = client.clone();
            s.spawn(move || c.chat_complete("s", "u").unwrap());
        }
    });
    let peak = stub
        .peak_in_flight
        .load(std::sync::atomic::Ordering::SeqCst);
    assert!(peak <= 2, "peak in flight {peak}");
    assert_eq!(stub.requests().len(), 8);
}

#[test]
fn remote_extractor_and_checker() {
    let stub = Stub::start(|_, seen| {
        let user = seen.user_message();
        if user.starts_with("Premise:") {
            Reply::content(if user.ends_with("Claim: patient has fever") {
                "Yes"
            } else {
                "No."
            })
        } else {
            Reply::content("- Patient has fever.\n- Patient denies cough.")
        }
    });
    let client = Arc::new(JudgeClient::new(stub.config()).unwrap());
    let extractor = RemoteExtractor::new(client.clone());
    assert_eq!(extractor.info().name, "remote:stub-model");
    let claims = extractor
        .extract("Patient: I have a fever.", TextKind::Dialogue)
        .unwrap();
    assert_eq!(
        claims.texts(),
        vec!["patient has fever", "patient denies cough"]
    );
    assert!(extractor.extract("  ", TextKind::Note).unwrap().is_empty());

    let checker = RemoteChecker::new(client);
    let verdicts = checker
        .entails_all(
            "Patient: I have a fever.",
            &[
                Claim::new("patient has fever"),
                Claim::new("patient denies cough"),
                Claim::new("patient has fever"),
            ],
        )
        .unwrap();
    assert_eq!(verdicts, vec![true, false, true]);
}
