//! WebSocket endpoint (`/ws`) plus static web-client assets under `/app`.

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use super::protocol::{decode, encode, Body, WireMessage};
use super::{Gateway, Outbound};

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub static_dir: Option<PathBuf>,
    pub heartbeat: Duration,
    /// Unanswered pings after which a connection is dropped.
    pub missed_pongs: u32,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            static_dir: None,
            heartbeat: Duration::from_secs(15),
            missed_pongs: 2,
        }
    }
}

#[derive(Clone)]
struct AppState {
    gateway: Arc<Gateway>,
    options: Arc<ServerOptions>,
}

pub fn router(gateway: Arc<Gateway>, options: ServerOptions) -> Router {
    let static_dir = options.static_dir.clone();
    let state = AppState {
        gateway,
        options: Arc::new(options),
    };
    let router = Router::new().route("/ws", get(upgrade)).with_state(state);
    match static_dir {
        Some(dir) => router.nest_service("/app", ServeDir::new(dir)),
        None => router,
    }
}

pub async fn serve(
    listener: TcpListener,
    router: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router)
        .with_graceful_shutdown(shutdown)
        .await
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, state))
}

fn error_frame(session_id: &str, seq: u64, message: String) -> Message {
    Message::Text(
        encode(&WireMessage {
            session_id: session_id.to_string(),
            turn_id: None,
            identity: None,
            seq,
            body: Body::Error { message },
        })
        .into(),
    )
}

async fn connection(socket: WebSocket, state: AppState) {
    let (mut sink, mut stream) = socket.split();
    let hello = loop {
        match stream.next().await {
            Some(Ok(Message::Text(t))) => break decode(t.as_bytes()),
            Some(Ok(Message::Binary(b))) => break decode(&b),
            Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
            _ => return,
        }
    };
    let connected = match hello {
        Ok(msg) => state.gateway.connect(&msg).await,
        Err(e) => Err(e),
    };
    let (mut link, mut rx) = match connected {
        Ok(c) => c,
        Err(e) => {
            let _ = sink.send(error_frame("", 1, e.to_string())).await;
            let _ = sink.send(Message::Close(None)).await;
            return;
        }
    };
    let hub = state.gateway.hub().clone();
    let period = state.options.heartbeat;
    let mut ticker = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
    let (mut awaiting_pong, mut missed) = (false, 0u32);
    loop {
        tokio::select! {
            out = rx.recv() => match out {
                Some(Outbound::Frame(msg)) => {
                    if sink.send(Message::Text(encode(&msg).into())).await.is_err() {
                        break;
                    }
                }
                Some(Outbound::Close) | None => {
                    let _ = sink.send(Message::Close(None)).await;
                    break;
                }
            },
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(t))) => match decode(t.as_bytes()) {
                    Ok(msg) => state.gateway.handle(&mut link, msg),
                    Err(e) => {
                        hub.send(&link.session_id, link.role, None, Body::Error { message: e.to_string() });
                    }
                },
                Some(Ok(Message::Pong(_))) => {
                    awaiting_pong = false;
                    missed = 0;
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
            _ = ticker.tick() => {
                if awaiting_pong {
                    missed += 1;
                    if missed >= state.options.missed_pongs {
                        tracing::warn!(session = %link.session_id, role = %link.role, "heartbeat lost; closing connection");
                        break;
                    }
                }
                awaiting_pong = true;
                if sink.send(Message::Ping(Bytes::new())).await.is_err() {
                    break;
                }
            }
        }
    }
    state.gateway.disconnect(&link);
}
