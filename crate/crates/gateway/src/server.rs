//! Websocket transport: `/ws?scenario=<id>`.

use std::future::Future;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use serde::Deserialize;
use tokio::net::TcpListener;

use crate::session::{CloseReason, Gateway};
use crate::wire::WireMessage;

#[derive(Debug, Deserialize)]
struct WsParams {
    scenario: Option<String>,
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new().route("/ws", get(upgrade)).with_state(gateway)
}

async fn upgrade(ws: WebSocketUpgrade, Query(params): Query<WsParams>, State(gateway): State<Arc<Gateway>>) -> Response {
    ws.on_upgrade(move |socket| run_connection(socket, gateway, params.scenario))
}

async fn send_all(socket: &mut WebSocket, frames: Vec<WireMessage>) -> bool {
    for frame in frames {
        if socket.send(Message::Text(frame.to_json().into())).await.is_err() {
            return false;
        }
    }
    true
}

async fn run_connection(mut socket: WebSocket, gateway: Arc<Gateway>, scenario: Option<String>) {
    let idle = gateway.idle_timeout();
    let (mut conn, frames) = gateway.open(scenario.as_deref());
    let mut alive = send_all(&mut socket, frames).await;

    while alive && !conn.is_finished() {
        let msg = match tokio::time::timeout(idle, socket.recv()).await {
            Err(_) => {
                let end = conn.close(CloseReason::IdleTimeout);
                send_all(&mut socket, end.into_iter().collect()).await;
                break;
            }
            Ok(None) | Ok(Some(Err(_))) | Ok(Some(Ok(Message::Close(_)))) => break,
            Ok(Some(Ok(msg))) => msg,
        };
        let frames = match msg {
            Message::Text(text) => conn.handle_text(text.as_str()).await,
            Message::Binary(_) => vec![conn.unsupported_frame()],
            Message::Ping(_) | Message::Pong(_) => continue,
            Message::Close(_) => unreachable!("handled above"),
        };
        alive = send_all(&mut socket, frames).await;
    }
    conn.close(CloseReason::Disconnect);
    let _ = socket.send(Message::Close(None)).await;
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    gateway: Arc<Gateway>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "gateway listening");
    axum::serve(listener, router(gateway))
        .with_graceful_shutdown(shutdown)
        .await
}

