use std::sync::Arc;

use asana_core::session_log::SessionSummary;
use log::warn;

use crate::protocol::{ClientMsg, ServerMsg};
use crate::session::SessionManager;
use crate::ServiceError;

/// Protocol state of one client connection: at most one open session.
/// Transport-independent; both the TCP and the WebSocket listeners drive it.
pub struct Connection {
    manager: Arc<SessionManager>,
    session: Option<String>,
}

impl Connection {
    pub fn new(manager: Arc<SessionManager>) -> Self {
        Self { manager, session: None }
    }

    pub fn session_id(&self) -> Option<&str> {
        self.session.as_deref()
    }

    /// Handles one client message and returns the replies in send order.
    pub fn handle(&mut self, text: &str) -> Vec<ServerMsg> {
        let msg = match ClientMsg::parse(text) {
            Ok(m) => m,
            Err(e) => return vec![ServerMsg::error(e.code, e.message)],
        };
        let result = match msg {
            ClientMsg::Start { pose_id, variant } => match &self.session {
                Some(id) => Err(ServiceError::SessionActive(id.clone())),
                None => self.manager.start(&pose_id, variant).map(|started| {
                    self.session = Some(started.session_id.clone());
                    vec![ServerMsg::Started(started)]
                }),
            },
            ClientMsg::Frame(record) => match &self.session {
                Some(id) => self.manager.handle_frame(id, &record),
                None => Err(ServiceError::NoSession),
            },
            ClientMsg::End => match self.session.take() {
                Some(id) => self.manager.end(&id).map(|s| vec![ServerMsg::Summary(s)]),
                None => Err(ServiceError::NoSession),
            },
        };
        result.unwrap_or_else(|e| vec![ServerMsg::error(e.code(), e.to_string())])
    }

    /// Ends the open session, if any. Called when the client goes away.
    pub fn close(&mut self) -> Option<SessionSummary> {
        let id = self.session.take()?;
        match self.manager.end(&id) {
            Ok(summary) => Some(summary),
            Err(e) => {
                warn!("closing session {id}: {e}");
                None
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.close();
    }
}
