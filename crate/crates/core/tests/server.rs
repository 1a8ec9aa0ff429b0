use std::net::SocketAddr;
use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;

use cophy::command::Vocabulary;
use cophy::policy::{Model, ModelConfig};
use cophy::scenario::{generate_batch, Template};
use cophy::server::{router, AppState, Planner, SessionConfig, FRAME_JSON_SCHEMA};
use cophy::trajectory::cluster_prototypes;

fn planner() -> Planner {
    let data = generate_batch(&Template::ALL, 2, 3);
    let experts: Vec<_> = data.iter().map(|s| s.expert.clone()).collect();
    let bank = cluster_prototypes(&experts, 8, 3).unwrap().bank;
    let model = Model::new(ModelConfig::default(), bank, 3).unwrap();
    Planner { model: Arc::new(model), vocab: Arc::new(Vocabulary::default()), config: SessionConfig::default() }
}

async fn spawn_server() -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(AppState::new(planner()))).await.unwrap() });
    addr
}

/// Minimal HTTP/1.1 exchange; returns the status code and the body.
async fn http(addr: SocketAddr, method: &str, path: &str, body: Option<Value>) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let payload = body.map(|b| b.to_string()).unwrap_or_default();
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
        payload.len()
    );
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8(raw).unwrap();
    let status = text[9..12].parse().unwrap();
    let (head, body) = text.split_once("\r\n\r\n").unwrap();
    let body = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") { dechunk(body) } else { body.to_string() };
    (status, body)
}

fn dechunk(mut s: &str) -> String {
    let mut out = String::new();
    loop {
        let (size, rest) = s.split_once("\r\n").unwrap();
        let n = usize::from_str_radix(size.trim(), 16).unwrap();
        if n == 0 {
            return out;
        }
        out.push_str(&rest[..n]);
        s = &rest[n + 2..];
    }
}

struct Validator(jsonschema::JSONSchema);

impl Validator {
    fn new() -> Self {
        let schema: Value = serde_json::from_str(FRAME_JSON_SCHEMA).unwrap();
        Self(jsonschema::JSONSchema::compile(&schema).unwrap())
    }

    fn check(&self, msg: &Value) {
        if let Err(errors) = self.0.validate(msg) {
            let all: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
            panic!("schema violations: {all:?}");
        }
    }
}

type Socket = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

async fn connect(addr: SocketAddr, id: &str) -> Socket {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws")).await.unwrap();
    ws
}

async fn recv(ws: &mut Socket) -> Value {
    loop {
        match ws.next().await.unwrap().unwrap() {
            Message::Text(t) => return serde_json::from_str(&t).unwrap(),
            Message::Close(_) => panic!("socket closed"),
            _ => continue,
        }
    }
}

async fn send(ws: &mut Socket, msg: Value) {
    ws.send(Message::Text(msg.to_string())).await.unwrap();
}

async fn start(addr: SocketAddr, seed: u64, template: &str) -> Value {
    let (status, body) = http(addr, "POST", "/sessions", Some(json!({ "seed": seed, "template": template }))).await;
    assert_eq!(status, 201, "{body}");
    serde_json::from_str(&body).unwrap()
}

/// Runs a fixed script on a fresh session and returns every frame received.
async fn scripted_episode(addr: SocketAddr, v: &Validator) -> Vec<Value> {
    let started = start(addr, 11, "lane_change").await;
    let id = started["id"].as_str().unwrap().to_string();
    let mut ws = connect(addr, &id).await;
    let mut frames = vec![recv(&mut ws).await];
    send(&mut ws, json!({ "type": "command", "text": "change lane right" })).await;
    frames.push(recv(&mut ws).await);
    send(&mut ws, json!({ "type": "step", "ticks": 8 })).await;
    for _ in 0..8 {
        frames.push(recv(&mut ws).await);
    }
    for f in &frames {
        v.check(f);
    }
    frames
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn session_lifecycle_over_http_and_websocket() {
    let addr = spawn_server().await;
    let v = Validator::new();

    let (status, schema) = http(addr, "GET", "/schema", None).await;
    assert_eq!(status, 200);
    assert_eq!(serde_json::from_str::<Value>(&schema).unwrap(), serde_json::from_str::<Value>(FRAME_JSON_SCHEMA).unwrap());

    let started = start(addr, 4, "lane_change").await;
    let id = started["id"].as_str().unwrap().to_string();
    assert_eq!(started["vocabulary"], json!(Vocabulary::texts()));
    v.check(&started["frame"]);
    assert_eq!(started["frame"]["reason"], "start");
    assert_eq!(started["frame"]["candidates"].as_array().unwrap().len(), 8);

    let mut ws = connect(addr, &id).await;
    let hello = recv(&mut ws).await;
    v.check(&hello);
    assert_eq!(hello["tick"], 0);

    send(&mut ws, json!({ "type": "command", "text": "Change Lane Left" })).await;
    let err = recv(&mut ws).await;
    v.check(&err);
    assert_eq!(err["type"], "error");
    assert_eq!(err["code"], "unknown_command");
    assert_eq!(err["vocabulary"], json!(Vocabulary::texts()));

    let (_, listing) = http(addr, "GET", "/sessions", None).await;
    let listing: Value = serde_json::from_str(&listing).unwrap();
    assert_eq!(listing[0]["mode"], "distilled");
    assert_eq!(listing[0]["tick"], 0);

    send(&mut ws, json!({ "type": "command", "text": "change lane left" })).await;
    let cmd = recv(&mut ws).await;
    v.check(&cmd);
    assert_eq!(cmd["reason"], "command");
    assert_eq!(cmd["command"], "change lane left");

    send(&mut ws, json!({ "type": "jump" })).await;
    assert_eq!(recv(&mut ws).await["code"], "bad_message");

    send(&mut ws, json!({ "type": "step", "ticks": 3 })).await;
    for k in 1..=3 {
        let f = recv(&mut ws).await;
        v.check(&f);
        assert_eq!(f["tick"], k);
        assert!(f["previous_selected"].is_array());
    }
    send(&mut ws, json!({ "type": "clear" })).await;
    let cleared = recv(&mut ws).await;
    assert_eq!(cleared["reason"], "clear");
    assert_eq!(cleared["tick"], 3);

    send(&mut ws, json!({ "type": "step", "ticks": 10 })).await;
    let mut last = Value::Null;
    for _ in 0..5 {
        last = recv(&mut ws).await;
        v.check(&last);
    }
    assert_eq!(last["tick"], 8);
    assert_eq!(last["terminal"], true);
    let pdms = last["episode"]["pdms"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pdms));

    let (status, _) = http(addr, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, 204);
    let (status, body) = http(addr, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, 404);
    v.check(&serde_json::from_str(&body).unwrap());
    let (status, _) = http(addr, "POST", "/sessions", Some(json!({ "seed": 1, "template": "roundabout" }))).await;
    assert!((400..500).contains(&status));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn same_seed_replays_identical_frames() {
    let addr = spawn_server().await;
    let v = Validator::new();
    let a = scripted_episode(addr, &v).await;
    let b = scripted_episode(addr, &v).await;
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    assert_eq!(a.last().unwrap()["terminal"], true);
}
