#![allow(dead_code)]

use std::net::SocketAddr;
use std::time::Duration;

use difflab_service::wire::{Event, SessionView, TrainingState};
use difflab_service::{app_state, router, AppState, ServiceConfig};
use futures_util::StreamExt;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

pub struct Server {
    pub addr: SocketAddr,
    pub state: AppState,
    pub http: reqwest::Client,
}

pub async fn start(config: ServiceConfig) -> Server {
    let state = app_state(config);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server {
        addr,
        state,
        http: reqwest::Client::new(),
    }
}

pub async fn start_default() -> Server {
    start(ServiceConfig::default()).await
}

/// Status and raw body of a response.
pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json<T: DeserializeOwned>(&self) -> T {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("unexpected body ({e}): {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn error(&self) -> String {
        let v: Value = self.json();
        v["error"].as_str().expect("error bodies carry a message").to_string()
    }
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    async fn finish(resp: reqwest::Response) -> Reply {
        let status = resp.status().as_u16();
        let body = resp.bytes().await.unwrap().to_vec();
        Reply { status, body }
    }

    pub async fn get(&self, path: &str) -> Reply {
        Self::finish(self.http.get(self.url(path)).send().await.unwrap()).await
    }

    pub async fn post(&self, path: &str, body: Value) -> Reply {
        Self::finish(self.http.post(self.url(path)).json(&body).send().await.unwrap()).await
    }

    pub async fn post_raw(&self, path: &str, body: &'static str) -> Reply {
        Self::finish(self.http.post(self.url(path)).body(body).send().await.unwrap()).await
    }

    pub async fn put(&self, path: &str, body: Value) -> Reply {
        Self::finish(self.http.put(self.url(path)).json(&body).send().await.unwrap()).await
    }

    pub async fn put_raw(&self, path: &str, body: &'static str) -> Reply {
        Self::finish(self.http.put(self.url(path)).body(body).send().await.unwrap()).await
    }

    pub async fn create_session(&self) -> String {
        let r = self.post("/sessions", json!({})).await;
        assert_eq!(r.status, 201);
        r.json::<SessionView>().id
    }

    pub async fn session(&self, id: &str) -> SessionView {
        let r = self.get(&format!("/sessions/{id}")).await;
        assert_eq!(r.status, 200, "{}", String::from_utf8_lossy(&r.body));
        r.json()
    }

    pub async fn events(&self, id: &str) -> Events {
        let url = format!("ws://{}/sessions/{id}/events", self.addr);
        let (stream, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        Events { stream }
    }

    /// Polls until the run leaves the running/cancelling states.
    pub async fn wait_idle(&self, id: &str) -> SessionView {
        for _ in 0..600 {
            let view = self.session(id).await;
            if !matches!(view.training.state, TrainingState::Running | TrainingState::Cancelling) {
                return view;
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
        panic!("training did not finish");
    }
}

pub struct Events {
    stream: tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>,
}

impl Events {
    /// Next event, parsed strictly.
    pub async fn next(&mut self) -> Event {
        loop {
            let msg = tokio::time::timeout(Duration::from_secs(60), self.stream.next())
                .await
                .expect("event within a minute")
                .expect("stream open")
                .expect("valid frame");
            if let Message::Text(text) = msg {
                return serde_json::from_str(&text).unwrap_or_else(|e| panic!("bad event {text}: {e}"));
            }
        }
    }

    /// Events up to and including the first terminal one.
    pub async fn until_terminal(&mut self) -> Vec<Event> {
        let mut out = Vec::new();
        loop {
            let e = self.next().await;
            let done = e.is_terminal();
            out.push(e);
            if done {
                return out;
            }
        }
    }

    /// Whether another event arrives within `wait`.
    pub async fn quiet_for(&mut self, wait: Duration) -> bool {
        loop {
            match tokio::time::timeout(wait, self.stream.next()).await {
                Err(_) => return true,
                Ok(Some(Ok(Message::Text(_)))) => return false,
                Ok(Some(Ok(_))) => continue,
                Ok(_) => return true,
            }
        }
    }
}

/// A small stroke drawing: an L shape plus a dot.
pub fn strokes_body(n: usize) -> Value {
    json!({
        "kind": "custom",
        "n": n,
        "seed": 4,
        "strokes": [[[100.0, 100.0], [100.0, 300.0], [260.0, 300.0]], [[300.0, 120.0]]],
        "canvas": {"width": 400.0, "height": 400.0},
    })
}

/// Training overrides that finish in well under a second.
pub fn quick_training(epochs: usize) -> Value {
    json!({"epochs": epochs, "steps_per_epoch": 4, "batch_size": 64, "preview_n": 50, "preview_steps": 10})
}
