//! Local completion server for exercising the HTTP backend.

#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::Value;

pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl Reply {
    pub fn ok(text: &str) -> Self {
        Self::json(200, serde_json::json!({ "text": text }))
    }

    pub fn json(status: u16, v: Value) -> Self {
        Self {
            status,
            body: v.to_string(),
            delay: Duration::ZERO,
        }
    }

    pub fn raw(status: u16, body: &str) -> Self {
        Self {
            status,
            body: body.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn after(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

pub struct Request {
    pub body: Value,
    pub authorization: Option<String>,
}

type Handler = dyn Fn(usize, &Request) -> Reply + Send + Sync;

pub struct Stub {
    pub url: String,
    hits: Arc<AtomicUsize>,
    in_flight_max: Arc<AtomicUsize>,
    requests: Arc<Mutex<Vec<Request>>>,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

impl Stub {
    /// `handler` gets the zero-based arrival number and the parsed request.
    pub fn start(handler: impl Fn(usize, &Request) -> Reply + Send + Sync + 'static) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let port = server.server_addr().to_ip().unwrap().port();
        let hits = Arc::new(AtomicUsize::new(0));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let in_flight_max = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let handle = {
            let server = server.clone();
            let (hits, in_flight, in_flight_max, requests) =
                (hits.clone(), in_flight.clone(), in_flight_max.clone(), requests.clone());
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let n = hits.fetch_add(1, Ordering::SeqCst);
                    let (handler, in_flight, in_flight_max, requests) = (
                        handler.clone(),
                        in_flight.clone(),
                        in_flight_max.clone(),
                        requests.clone(),
                    );
                    std::thread::spawn(move || {
                        let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                        in_flight_max.fetch_max(now, Ordering::SeqCst);
                        let mut text = String::new();
                        let _ = req.as_reader().read_to_string(&mut text);
                        let parsed = Request {
                            body: serde_json::from_str(&text).unwrap_or(Value::Null),
                            authorization: req
                                .headers()
                                .iter()
                                .find(|h| h.field.equiv("Authorization"))
                                .map(|h| h.value.to_string()),
                        };
                        let reply = handler(n, &parsed);
                        requests.lock().unwrap().push(parsed);
                        std::thread::sleep(reply.delay);
                        in_flight.fetch_sub(1, Ordering::SeqCst);
                        let header =
                            tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap();
                        let resp = tiny_http::Response::from_string(reply.body)
                            .with_status_code(reply.status)
                            .with_header(header);
                        let _ = req.respond(resp);
                    });
                }
            })
        };
        Self {
            url: format!("http://127.0.0.1:{port}/complete"),
            hits,
            in_flight_max,
            requests,
            server,
            handle: Some(handle),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.in_flight_max.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> std::sync::MutexGuard<'_, Vec<Request>> {
        self.requests.lock().unwrap()
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
