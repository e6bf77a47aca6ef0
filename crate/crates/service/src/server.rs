//! HTTP + websocket front end over a [`Hub`].

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{CloseFrame, Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::broadcast::error::{RecvError, TryRecvError};
use tower_http::services::ServeDir;

use crate::hub::Hub;
use crate::protocol::{decode, encode, Message, CLOSE_PROTOCOL_ERROR, PROTOCOL_VERSION};

pub const DEFAULT_PORT: u16 = 8765;

#[derive(Debug, Clone, Serialize)]
pub struct StepReply {
    pub stepped: bool,
    pub revision: u64,
    pub finished: bool,
}

pub fn router(hub: Arc<Hub>, ui_dir: Option<PathBuf>) -> Router {
    let router = Router::new()
        .route("/ws", get(ws_handler))
        .route("/step", post(step_handler))
        .route("/snapshot", get(snapshot_handler))
        .with_state(hub);
    match ui_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router.fallback(|| async { (StatusCode::NOT_FOUND, "no UI directory configured (--ui-dir)\n") }),
    }
}

async fn ws_handler(ws: WebSocketUpgrade, State(hub): State<Arc<Hub>>) -> Response {
    ws.on_upgrade(move |socket| session(socket, hub))
}

async fn step_handler(State(hub): State<Arc<Hub>>) -> Response {
    let result = tokio::task::spawn_blocking(move || {
        let stepped = hub.step()?.is_some();
        Ok::<_, hitl_sgraph::simulator::PipelineError>(StepReply {
            stepped,
            revision: hub.revision(),
            finished: hub.is_finished(),
        })
    })
    .await;
    match result {
        Ok(Ok(reply)) => Json(reply).into_response(),
        Ok(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn snapshot_handler(State(hub): State<Arc<Hub>>) -> Response {
    Json(hub.snapshot()).into_response()
}

async fn close(socket: &mut (impl SinkExt<WsMessage> + Unpin), reason: String) {
    log::info!("closing session: {reason}");
    let frame = CloseFrame { code: CLOSE_PROTOCOL_ERROR, reason: reason.into() };
    let _ = socket.send(WsMessage::Close(Some(frame))).await;
}

/// Tracks what this client has been sent so resyncs and broadcasts never
/// repeat or skip a revision.
struct Outbox {
    sent_revision: u64,
}

impl Outbox {
    /// Text to send for a broadcast event, or `None` to drop it.
    fn filter(&mut self, msg: &Message, hub: &Hub) -> Option<String> {
        match msg {
            Message::Delta(d) if d.revision <= self.sent_revision => None,
            Message::Delta(d) if d.revision > self.sent_revision + 1 => {
                let snap = hub.snapshot();
                self.sent_revision = snap.revision;
                Some(encode(&Message::Snapshot(snap)))
            }
            Message::Snapshot(s) if s.revision <= self.sent_revision => None,
            _ => {
                if let Some(r) = msg.revision().filter(|_| matches!(msg, Message::Delta(_) | Message::Snapshot(_))) {
                    self.sent_revision = r;
                }
                Some(encode(msg))
            }
        }
    }
}

async fn session(socket: WebSocket, hub: Arc<Hub>) {
    let (mut tx, mut rx) = socket.split();

    let hello = match rx.next().await {
        Some(Ok(WsMessage::Text(text))) => decode(text.as_str()),
        Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
        Some(Ok(_)) => {
            close(&mut tx, "first frame must be a text hello".into()).await;
            return;
        }
    };
    let last_revision = match hello {
        Ok(Message::Hello(h)) if h.protocol_version == PROTOCOL_VERSION => h.last_revision,
        Ok(Message::Hello(h)) => {
            close(&mut tx, format!("unsupported protocol version {}", h.protocol_version)).await;
            return;
        }
        Ok(other) => {
            close(&mut tx, format!("expected hello, got {}", other.type_name())).await;
            return;
        }
        Err(e) => {
            close(&mut tx, e.to_string()).await;
            return;
        }
    };

    let mut sub = hub.subscribe(last_revision);
    let mut outbox = Outbox { sent_revision: last_revision.unwrap_or(0) };
    for msg in &sub.initial {
        if let Message::Snapshot(s) = msg {
            outbox.sent_revision = s.revision;
        }
        if let Message::Delta(d) = msg {
            outbox.sent_revision = d.revision;
        }
        if tx.send(WsMessage::Text(encode(msg).into())).await.is_err() {
            return;
        }
    }

    loop {
        tokio::select! {
            frame = rx.next() => {
                let text = match frame {
                    Some(Ok(WsMessage::Text(text))) => text,
                    Some(Ok(WsMessage::Ping(_) | WsMessage::Pong(_))) => continue,
                    Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(WsMessage::Binary(_))) => {
                        close(&mut tx, "binary frames are not part of the protocol".into()).await;
                        return;
                    }
                };
                let (cmd_id, plane_ids) = match decode(text.as_str()) {
                    Ok(Message::CreateRoom { cmd_id, plane_ids }) => (cmd_id, plane_ids),
                    Ok(other) => {
                        close(&mut tx, format!("clients may not send {}", other.type_name())).await;
                        return;
                    }
                    Err(e) => {
                        close(&mut tx, e.to_string()).await;
                        return;
                    }
                };
                let writer = hub.clone();
                let Ok(reply) = tokio::task::spawn_blocking(move || writer.create_room(&cmd_id, plane_ids)).await else {
                    return;
                };
                // forward the commit before the ack so the client already holds the room
                if let Message::Ack { revision, .. } = &reply {
                    while outbox.sent_revision < *revision {
                        let event = match sub.events.try_recv() {
                            Ok(event) => event,
                            Err(TryRecvError::Lagged(_)) => continue,
                            Err(_) => Message::Snapshot(hub.snapshot()),
                        };
                        if let Some(text) = outbox.filter(&event, &hub) {
                            if tx.send(WsMessage::Text(text.into())).await.is_err() {
                                return;
                            }
                        }
                    }
                }
                if tx.send(WsMessage::Text(encode(&reply).into())).await.is_err() {
                    return;
                }
            }
            event = sub.events.recv() => {
                let event = match event {
                    Ok(event) => event,
                    Err(RecvError::Lagged(n)) => {
                        log::warn!("session lagged by {n} events, resending snapshot");
                        Message::Snapshot(hub.snapshot())
                    }
                    Err(RecvError::Closed) => return,
                };
                if let Some(text) = outbox.filter(&event, &hub) {
                    if tx.send(WsMessage::Text(text.into())).await.is_err() {
                        return;
                    }
                }
            }
        }
    }
}

/// Feed logged keyframes at `speed`× real time (log stamps in seconds).
/// With `speed == 0` nothing is stepped here; clients POST `/step`.
pub async fn replay(hub: Arc<Hub>, speed: f64) {
    if !(speed > 0.0) {
        return;
    }
    let Some(first) = hub.next_stamp() else { return };
    let start = tokio::time::Instant::now();
    while let Some(stamp) = hub.next_stamp() {
        let due = start + Duration::from_secs_f64(((stamp - first) / speed).max(0.0));
        tokio::time::sleep_until(due).await;
        let writer = hub.clone();
        match tokio::task::spawn_blocking(move || writer.step()).await {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => {
                log::error!("replay stopped: {e}");
                return;
            }
            Err(e) => {
                log::error!("replay task failed: {e}");
                return;
            }
        }
    }
    let writer = hub.clone();
    let _ = tokio::task::spawn_blocking(move || writer.optimize()).await;
    log::info!("log replay finished at revision {}", hub.revision());
}

/// Serve until the listener fails, replaying the log alongside.
pub async fn serve(listener: TcpListener, hub: Arc<Hub>, ui_dir: Option<PathBuf>, speed: f64) -> std::io::Result<()> {
    tokio::spawn(replay(hub.clone(), speed));
    axum::serve(listener, router(hub, ui_dir)).await
}
