use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use log::{debug, info, warn};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

use crate::config::ServerConfig;
use crate::connection::Connection;
use crate::session::SessionManager;
use crate::ServiceError;

/// HTTP routes: `GET /ws` upgrades to a session socket, `GET /api/poses`
/// lists the selectable target poses.
pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/api/poses", get(list_poses))
        .with_state(manager)
}

async fn list_poses(State(manager): State<Arc<SessionManager>>) -> Response {
    let mut res = Json(manager.poses()).into_response();
    res.headers_mut()
        .insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, header::HeaderValue::from_static("*"));
    res
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(manager): State<Arc<SessionManager>>) -> Response {
    ws.on_upgrade(move |socket| ws_session(socket, manager))
}

async fn ws_session(socket: WebSocket, manager: Arc<SessionManager>) {
    let (mut tx, mut rx) = socket.split();
    let mut conn = Connection::new(manager);
    while let Some(msg) = rx.next().await {
        let text = match msg {
            Ok(Message::Text(t)) => t,
            Ok(Message::Binary(_)) => {
                let err = crate::protocol::ServerMsg::error("MalformedMessage", "binary frames are not supported");
                if tx.send(Message::Text(err.to_json().into())).await.is_err() {
                    break;
                }
                continue;
            }
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        for reply in conn.handle(text.as_str()) {
            if tx.send(Message::Text(reply.to_json().into())).await.is_err() {
                conn.close();
                return;
            }
        }
    }
    if let Some(summary) = conn.close() {
        debug!("websocket closed; session {} ended", summary.session_id);
    }
}

/// Serves newline-delimited JSON sessions on raw TCP connections.
pub async fn serve_tcp(listener: TcpListener, manager: Arc<SessionManager>) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let manager = manager.clone();
        tokio::spawn(async move {
            if let Err(e) = tcp_session(stream, manager).await {
                debug!("tcp client {peer}: {e}");
            }
        });
    }
}

async fn tcp_session(stream: TcpStream, manager: Arc<SessionManager>) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    let mut conn = Connection::new(manager);
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let mut out = String::new();
        for reply in conn.handle(&line) {
            out.push_str(&reply.to_json());
            out.push('\n');
        }
        write.write_all(out.as_bytes()).await?;
    }
    conn.close();
    Ok(())
}

/// Bound listeners, ready to serve.
pub struct Server {
    manager: Arc<SessionManager>,
    http: TcpListener,
    tcp: Option<TcpListener>,
}

impl Server {
    pub async fn bind(config: &ServerConfig) -> Result<Self, ServiceError> {
        let resources = config.load_resources()?;
        let manager = Arc::new(SessionManager::new(
            Arc::new(resources),
            config.pipeline_config(),
            &config.log_dir,
            config.max_sessions,
        ));
        let http = TcpListener::bind(config.listen_addr()?).await?;
        let tcp = match config.tcp_addr()? {
            Some(addr) => Some(TcpListener::bind(addr).await?),
            None => None,
        };
        Ok(Self { manager, http, tcp })
    }

    pub fn http_addr(&self) -> std::io::Result<SocketAddr> {
        self.http.local_addr()
    }

    pub fn tcp_addr(&self) -> Option<std::io::Result<SocketAddr>> {
        self.tcp.as_ref().map(|l| l.local_addr())
    }

    pub fn manager(&self) -> Arc<SessionManager> {
        self.manager.clone()
    }

    /// Serves until a listener fails.
    pub async fn run(self) -> Result<(), ServiceError> {
        info!("listening for websocket clients on {}", self.http.local_addr()?);
        let app = router(self.manager.clone());
        let http = axum::serve(self.http, app);
        match self.tcp {
            Some(listener) => {
                info!("listening for tcp clients on {}", listener.local_addr()?);
                tokio::select! {
                    r = http => r?,
                    r = serve_tcp(listener, self.manager) => r?,
                }
            }
            None => http.await?,
        }
        warn!("server stopped");
        Ok(())
    }
}
