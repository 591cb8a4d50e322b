use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use normbridge_core::config::AppConfig;
use normbridge_core::engine::{Engine, MemoryTranscript};
use normbridge_core::middleware::server::{self, ServerOptions};
use normbridge_core::middleware::{Body, Gateway, Hub, Receipt};
use normbridge_core::model::Role;
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

struct Server {
    addr: std::net::SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    _assets: tempfile::TempDir,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
    }
}

async fn start() -> Server {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/study.json");
    let config = AppConfig::load(&path).unwrap();
    let assets = tempfile::tempdir().unwrap();
    std::fs::write(
        assets.path().join("index.html"),
        "<!doctype html><title>client</title>",
    )
    .unwrap();
    let hub = Arc::new(Hub::new(config.offline_buffer));
    let engine = Engine::new(
        Arc::new(config.build_backends(None).unwrap()),
        config.engine_config(),
        hub.clone(),
        Arc::new(MemoryTranscript::new()),
    );
    let router = server::router(
        Gateway::new(hub, engine),
        ServerOptions {
            static_dir: Some(assets.path().to_path_buf()),
            ..ServerOptions::default()
        },
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel();
    tokio::spawn(server::serve(listener, router, async move {
        let _ = stopped.await;
    }));
    Server {
        addr,
        stop: Some(stop),
        _assets: assets,
    }
}

async fn open(server: &Server) -> Ws {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/ws", server.addr))
        .await
        .unwrap();
    ws
}

async fn send(ws: &mut Ws, frame: Value) {
    ws.send(Message::text(frame.to_string())).await.unwrap();
}

/// Next text frame as raw JSON, or `None` on close.
async fn next_raw(ws: &mut Ws) -> Option<String> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next())
            .await
            .expect("timed out waiting for a frame")?;
        match msg.ok()? {
            Message::Text(t) => return Some(t.as_str().to_string()),
            Message::Close(_) => return None,
            _ => {}
        }
    }
}

async fn next_of(ws: &mut Ws, kind: &str) -> (String, Value) {
    loop {
        let raw = next_raw(ws)
            .await
            .unwrap_or_else(|| panic!("closed while waiting for {kind}"));
        let v: Value = serde_json::from_str(&raw).unwrap();
        if v["type"] == kind {
            return (raw, v);
        }
    }
}

async fn hello(server: &Server, session: &str, role: &str) -> Ws {
    let mut ws = open(server).await;
    send(
        &mut ws,
        json!({"type": "hello", "session_id": session, "identity": role, "seq": 1, "body": {"v": 1}}),
    )
    .await;
    ws
}

#[tokio::test]
async fn high_impact_turn_over_websocket() {
    let server = start().await;
    let mut sme = hello(&server, "ws1", "SME").await;
    let mut fle = hello(&server, "ws1", "FLE").await;
    send(
        &mut sme,
        json!({"type": "speech", "session_id": "ws1", "identity": "SME", "seq": 2,
               "body": {"text": "Hurry up and sign the contract."}}),
    )
    .await;
    let (_, ack) = next_of(&mut sme, "ack").await;
    assert_eq!(ack["body"]["ack_seq"], 2);
    let (_, prompt) = next_of(&mut sme, "correction_prompt").await;
    assert_eq!(prompt["turn_id"], "1");
    assert_eq!(prompt["body"]["translation"], "快点签合同。");
    assert_eq!(prompt["body"]["remediation"], "请您快点签合同，好吗？");
    send(
        &mut sme,
        json!({"type": "choice", "session_id": "ws1", "turn_id": "1", "identity": "SME", "seq": 3,
               "body": {"choice": "remediation"}}),
    )
    .await;
    let (raw, deliver) = next_of(&mut fle, "deliver").await;
    assert_eq!(deliver["body"]["text"], "请您快点签合同，好吗？");
    assert!(
        raw.starts_with(
            r#"{"type":"deliver","session_id":"ws1","turn_id":"1","identity":"FLE","seq":"#
        ),
        "{raw}"
    );
}

#[tokio::test]
async fn invalid_hello_gets_error_and_close() {
    let server = start().await;
    for first in [
        "not json".to_string(),
        json!({"type": "speech", "session_id": "x", "identity": "SME", "seq": 1, "body": {"text": "hi"}}).to_string(),
        json!({"type": "hello", "session_id": "x", "seq": 1, "body": {"v": 1}}).to_string(),
        json!({"type": "hello", "session_id": "x", "identity": "SME", "seq": 1, "body": {"v": 2}}).to_string(),
    ] {
        let mut ws = open(&server).await;
        ws.send(Message::text(first.clone())).await.unwrap();
        let raw = next_raw(&mut ws).await.expect("error frame");
        let v: Value = serde_json::from_str(&raw).unwrap();
        assert_eq!(v["type"], "error", "{first}");
        assert_eq!(next_raw(&mut ws).await, None, "{first}");
    }
}

#[tokio::test]
async fn bad_frames_after_hello_are_rejected_without_closing() {
    let server = start().await;
    let mut sme = hello(&server, "ws2", "SME").await;
    sme.send(Message::text("{")).await.unwrap();
    next_of(&mut sme, "error").await;
    send(
        &mut sme,
        json!({"type": "deliver", "session_id": "ws2", "identity": "SME", "seq": 2, "body": {"text": "x"}}),
    )
    .await;
    next_of(&mut sme, "error").await;
    send(
        &mut sme,
        json!({"type": "speech", "session_id": "ws2", "identity": "SME", "seq": 3, "body": {"text": "Thanks."}}),
    )
    .await;
    let (_, ack) = next_of(&mut sme, "ack").await;
    assert_eq!(ack["body"]["ack_seq"], 3);
    // seq must increase
    send(
        &mut sme,
        json!({"type": "speech", "session_id": "ws2", "identity": "SME", "seq": 3, "body": {"text": "Thanks."}}),
    )
    .await;
    next_of(&mut sme, "error").await;
}

#[tokio::test]
async fn second_connection_takes_over_the_role() {
    let server = start().await;
    let mut first = hello(&server, "ws3", "FLE").await;
    let _second = hello(&server, "ws3", "FLE").await;
    let (_, err) = next_of(&mut first, "error").await;
    assert!(err["body"]["message"]
        .as_str()
        .unwrap()
        .contains("replaced"));
    assert_eq!(next_raw(&mut first).await, None);
}

#[tokio::test]
async fn static_client_assets_under_app() {
    let server = start().await;
    let page = reqwest::get(format!("http://{}/app/index.html", server.addr))
        .await
        .unwrap();
    assert_eq!(page.status(), 200);
    assert!(page.text().await.unwrap().contains("<title>client</title>"));
    let missing = reqwest::get(format!("http://{}/app/nope.js", server.addr))
        .await
        .unwrap();
    assert_eq!(missing.status(), 404);
}

#[derive(Clone, Default)]
struct Captured(Arc<parking_lot::Mutex<Vec<u8>>>);

impl Write for Captured {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[test]
fn offline_overflow_drops_oldest_and_warns() {
    let captured = Captured::default();
    let writer = captured.clone();
    let subscriber = tracing_subscriber::fmt()
        .with_writer(move || writer.clone())
        .with_ansi(false)
        .finish();
    tracing::subscriber::with_default(subscriber, || {
        let hub = Hub::new(2);
        let receipts: Vec<Receipt> = (0..3)
            .map(|i| {
                hub.send(
                    "s",
                    Role::Fle,
                    None,
                    Body::Deliver {
                        text: format!("m{i}"),
                        notice: None,
                    },
                )
            })
            .collect();
        assert_eq!(
            receipts,
            [
                Receipt::Queued,
                Receipt::Queued,
                Receipt::QueuedDroppedOldest
            ]
        );
        let mut reg = hub.register("s", Role::Fle, false);
        let texts: Vec<String> = std::iter::from_fn(|| reg.rx.try_recv().ok())
            .map(|o| match o {
                normbridge_core::middleware::Outbound::Frame(m) => match m.body {
                    Body::Deliver { text, .. } => text,
                    other => panic!("{other:?}"),
                },
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(texts, ["m1", "m2"]);
    });
    let log = String::from_utf8(captured.0.lock().clone()).unwrap();
    assert!(log.contains("WARN"), "{log}");
    assert!(
        log.contains("session=\"s\"") || log.contains("session=s"),
        "{log}"
    );
}
