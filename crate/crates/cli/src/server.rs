//! Websocket front end for [`SessionManager`].
//!
//! `GET /catalog` lists maps and checkpoints. `GET /ws` upgrades to a
//! websocket that carries one JSON [`ClientMessage`] or [`ServerMessage`]
//! per text frame. Sessions with auto-run enabled advance at 10 Hz.

use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use steerdrive::service::{ClientMessage, Reply, ServerMessage, SessionManager};
use tokio::sync::mpsc;

use crate::commands::{load_checkpoints, load_maps};
use crate::ServeArgs;

pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/catalog", get(catalog))
        .route("/ws", get(upgrade))
        .with_state(manager)
}

async fn catalog(State(m): State<Arc<SessionManager>>) -> impl IntoResponse {
    Json(m.catalog())
}

async fn upgrade(ws: WebSocketUpgrade, State(m): State<Arc<SessionManager>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, m))
}

fn encode(msg: &ServerMessage) -> Message {
    Message::Text(serde_json::to_string(msg).expect("server messages serialize").into())
}

async fn connection(mut socket: WebSocket, manager: Arc<SessionManager>) {
    let (tx, mut rx) = mpsc::unbounded_channel::<ServerMessage>();
    loop {
        tokio::select! {
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let reply = match serde_json::from_str::<ClientMessage>(&text) {
                    Ok(msg) => {
                        let m = manager.clone();
                        match tokio::task::spawn_blocking(move || m.dispatch(msg)).await {
                            Ok(r) => r,
                            Err(e) => Err(steerdrive::error::Error::State(format!("worker failed: {e}"))),
                        }
                    }
                    Err(e) => Err(steerdrive::error::Error::Json(e)),
                };
                let out = match reply {
                    Ok(Reply::Ack(detail)) => ServerMessage::Ack { detail },
                    Ok(Reply::Snapshot(session, snapshot)) => ServerMessage::Snapshot { session, snapshot },
                    Ok(Reply::Subscribed(session, snapshot, feed)) => {
                        let forward = tx.clone();
                        let id = session.clone();
                        tokio::task::spawn_blocking(move || {
                            while let Ok(snapshot) = feed.recv() {
                                if forward.send(ServerMessage::Snapshot { session: id.clone(), snapshot }).is_err() {
                                    break;
                                }
                            }
                        });
                        ServerMessage::Snapshot { session, snapshot }
                    }
                    Err(e) => ServerMessage::error(&e),
                };
                if socket.send(encode(&out)).await.is_err() {
                    break;
                }
            }
            Some(out) = rx.recv() => {
                if socket.send(encode(&out)).await.is_err() {
                    break;
                }
            }
        }
    }
}

async fn auto_run(manager: Arc<SessionManager>) {
    let mut clock = tokio::time::interval(Duration::from_millis(100));
    clock.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        clock.tick().await;
        let m = manager.clone();
        if let Ok(failures) = tokio::task::spawn_blocking(move || m.tick()).await {
            for (id, e) in failures {
                log::warn!("auto-run stopped for session {id}: {e}");
            }
        }
    }
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let maps = load_maps(&a.maps)?;
    let checkpoints = load_checkpoints(&a.ckpt)?;
    let manager = Arc::new(SessionManager::new(maps, checkpoints));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        let addr = listener.local_addr()?;
        let catalog = manager.catalog();
        println!("listening on {addr}");
        log::info!("maps {:?}, checkpoints {:?}", catalog.maps, catalog.checkpoints);
        tokio::spawn(auto_run(manager.clone()));
        axum::serve(listener, router(manager)).await.context("server failed")
    })
}
