#![allow(dead_code)]

pub mod oracles;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use soapgrpo::judge::{EndpointConfig, REQUEST_ID_HEADER};

#[derive(Clone, Debug)]
pub struct Seen {
    pub authorization: Option<String>,
    pub request_id: Option<String>,
    pub body: serde_json::Value,
}

impl Seen {
    pub fn user_message(&self) -> &str {
        self.body["messages"][1]["content"].as_str().unwrap_or("")
    }

    pub fn system_message(&self) -> &str {
        self.body["messages"][0]["content"].as_str().unwrap_or("")
    }
}

pub struct Reply {
    pub status: u16,
    pub body: String,
    /// `Some(None)` echoes the request id; `Some(Some(v))` sends `v`.
    pub echo: Option<Option<String>>,
    pub delay_ms: u64,
}

impl Reply {
    pub fn content(text: &str) -> Reply {
        Reply {
            status: 200,
            body: serde_json::json!({
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]
            })
            .to_string(),
            echo: Some(None),
            delay_ms: 0,
        }
    }

    pub fn status(status: u16, body: &str) -> Reply {
        Reply {
            status,
            body: body.into(),
            echo: Some(None),
            delay_ms: 0,
        }
    }
}

type Handler = dyn Fn(usize, &Seen) -> Reply + Send + Sync;

/// A local chat-completions endpoint. Each request is answered on its own
/// thread so concurrency can be observed.
pub struct Stub {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    pub peak_in_flight: Arc<AtomicUsize>,
    server: Arc<tiny_http::Server>,
    acceptor: Option<thread::JoinHandle<()>>,
}

impl Stub {
    pub fn start(handler: impl Fn(usize, &Seen) -> Reply + Send + Sync + 'static) -> Stub {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind stub"));
        let url = format!("http://{}/v1", server.server_addr().to_ip().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let peak = Arc::new(AtomicUsize::new(0));
        let current = Arc::new(AtomicUsize::new(0));
        let counter = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let acceptor = {
            let (server, seen, peak) = (server.clone(), seen.clone(), peak.clone());
            thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let (seen, peak, current, handler) =
                        (seen.clone(), peak.clone(), current.clone(), handler.clone());
                    let n = counter.fetch_add(1, Ordering::SeqCst);
                    thread::spawn(move || {
                        let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(now, Ordering::SeqCst);
                        let header = |req: &tiny_http::Request, name: &'static str| {
                            req.headers()
                                .iter()
                                .find(|h| h.field.equiv(name))
                                .map(|h| h.value.to_string())
                        };
                        let authorization = header(&req, "Authorization");
                        let request_id = header(&req, REQUEST_ID_HEADER);
                        let mut raw = String::new();
                        req.as_reader().read_to_string(&mut raw).unwrap();
                        let s = Seen {
                            authorization,
                            request_id,
                            body: serde_json::from_str(&raw).unwrap_or(serde_json::Value::Null),
                        };
                        seen.lock().unwrap().push(s.clone());
                        let reply = handler(n, &s);
                        if reply.delay_ms > 0 {
                            thread::sleep(std::time::Duration::from_millis(reply.delay_ms));
                        }
                        let mut resp = tiny_http::Response::from_string(reply.body)
                            .with_status_code(reply.status);
                        let echo = match reply.echo {
                            Some(None) => s.request_id.clone(),
                            Some(Some(v)) => Some(v),
                            None => None,
                        };
                        if let Some(v) = echo {
                            resp.add_header(
                                tiny_http::Header::from_bytes(
                                    REQUEST_ID_HEADER.as_bytes(),
                                    v.as_bytes(),
                                )
                                .unwrap(),
                            );
                        }
                        current.fetch_sub(1, Ordering::SeqCst);
                        let _ = req.respond(resp);
                    });
                }
            })
        };
        Stub {
            url,
            seen,
            peak_in_flight: peak,
            server,
            acceptor: Some(acceptor),
        }
    }

    pub fn config(&self) -> EndpointConfig {
        EndpointConfig {
            base_url: self.url.clone(),
            model_name: "stub-model".into(),
            api_key_env_var: String::new(),
            timeout_secs: 10.0,
            max_retries: 3,
            max_in_flight: 4,
            temperature: 0.0,
            backoff_ms: 1,
        }
    }

    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

/// A fully valid verdict in which every winner is `winner`.
pub fn verdict_json(winner: &str) -> String {
    serde_json::json!({
        "clinical_tags": {
            "primary_conditions": ["sinusitis"],
            "systems": ["respiratory"],
            "medications": [],
            "procedures": []
        },
        "base": {"hallucinations": [], "omissions": ["P: follow-up not documented"]},
        "grpo": {"hallucinations": [], "omissions": []},
        "pairwise_preference": {
            "dimensions": {
                "factuality": {"winner": winner},
                "completeness": {"winner": winner},
                "organization": {"winner": winner},
                "brevity": {"winner": winner}
            },
            "overall_winner": winner,
            "overall_confidence": 4,
            "rationale_short": "stub"
        }
    })
    .to_string()
}
