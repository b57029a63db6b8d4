//! Wire messages. Every message is one JSON object with a `type` field,
//! sent as one line (TCP) or one text frame (WebSocket).

use asana_core::model::ModelVariant;
use asana_core::pipeline::{ClassificationMsg, EvaluationMsg, FeedbackMsg, OutputRecord};
use asana_core::session_log::SessionSummary;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

/// Client to server.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientMsg {
    Start { pose_id: String, variant: ModelVariant },
    /// A `.kpjsonl` frame record, kept as the exact text received.
    Frame(String),
    End,
}

#[derive(Deserialize)]
struct Envelope<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    pose_id: Option<String>,
    variant: Option<ModelVariant>,
    #[serde(borrow)]
    frame: Option<&'a RawValue>,
}

/// Why a client message was not understood.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolError {
    pub code: &'static str,
    pub message: String,
}

impl ClientMsg {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let bad = |code, message: String| ProtocolError { code, message };
        let env: Envelope = serde_json::from_str(text.trim()).map_err(|e| bad("MalformedMessage", e.to_string()))?;
        match env.kind {
            "start" => Ok(ClientMsg::Start {
                pose_id: env
                    .pose_id
                    .ok_or_else(|| bad("MalformedMessage", "start needs a pose_id".into()))?,
                variant: env.variant.unwrap_or(ModelVariant::Float),
            }),
            "frame" => env
                .frame
                .map(|f| ClientMsg::Frame(f.get().to_owned()))
                .ok_or_else(|| bad("MalformedMessage", "frame message has no frame record".into())),
            "end" => Ok(ClientMsg::End),
            other => Err(bad("UnknownMessageType", format!("unknown message type {other:?}"))),
        }
    }

    pub fn to_json(&self) -> String {
        match self {
            ClientMsg::Start { pose_id, variant } => {
                serde_json::json!({"type": "start", "pose_id": pose_id, "variant": variant}).to_string()
            }
            ClientMsg::Frame(record) => format!(r#"{{"type":"frame","frame":{}}}"#, record.trim()),
            ClientMsg::End => r#"{"type":"end"}"#.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Started {
    pub session_id: String,
    pub pose_id: String,
    pub display_name: String,
    pub angle_table_version: String,
    pub variant: ModelVariant,
    /// Joint names in the order used by evaluation messages.
    pub joints: Vec<String>,
    pub window: usize,
    pub classifier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub code: String,
    pub message: String,
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Started(Started),
    Evaluation(EvaluationMsg),
    Classification(ClassificationMsg),
    Feedback(FeedbackMsg),
    Summary(SessionSummary),
    Error(ErrorMsg),
}

impl ServerMsg {
    pub fn error(code: impl Into<String>, message: impl Into<String>) -> Self {
        ServerMsg::Error(ErrorMsg {
            code: code.into(),
            message: message.into(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

impl From<OutputRecord> for ServerMsg {
    fn from(r: OutputRecord) -> Self {
        match r {
            OutputRecord::Evaluation(m) => ServerMsg::Evaluation(m),
            OutputRecord::Classification(m) => ServerMsg::Classification(m),
            OutputRecord::Feedback(m) => ServerMsg::Feedback(m),
        }
    }
}

/// Entry of the `/api/poses` listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseInfo {
    pub pose_id: String,
    pub display_name: String,
    pub joints: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_record_is_kept_verbatim() {
        let record = r#"{"t":33,"id":1,"kp":[0.5,1e-3,1.0]}"#;
        let msg = ClientMsg::parse(&format!(r#"{{"type":"frame","frame":{record}}}"#)).unwrap();
        assert_eq!(msg, ClientMsg::Frame(record.to_owned()));
        assert_eq!(ClientMsg::parse(&msg.to_json()).unwrap(), msg);
    }

    #[test]
    fn start_defaults_to_float() {
        let msg = ClientMsg::parse(r#"{"type":"start","pose_id":"tadasana"}"#).unwrap();
        assert_eq!(
            msg,
            ClientMsg::Start {
                pose_id: "tadasana".into(),
                variant: ModelVariant::Float
            }
        );
        let q = ClientMsg::parse(r#"{"type":"start","pose_id":"x","variant":"quantized"}"#).unwrap();
        assert!(matches!(q, ClientMsg::Start { variant: ModelVariant::Quantized, .. }));
    }

    #[test]
    fn bad_messages() {
        assert_eq!(ClientMsg::parse("{not json").unwrap_err().code, "MalformedMessage");
        assert_eq!(ClientMsg::parse(r#"{"type":"dance"}"#).unwrap_err().code, "UnknownMessageType");
        assert_eq!(ClientMsg::parse(r#"{"type":"start"}"#).unwrap_err().code, "MalformedMessage");
        assert_eq!(ClientMsg::parse(r#"{"type":"frame"}"#).unwrap_err().code, "MalformedMessage");
        assert_eq!(ClientMsg::parse(r#"{"kind":"end"}"#).unwrap_err().code, "MalformedMessage");
    }

    #[test]
    fn server_messages_are_type_tagged() {
        let e = ServerMsg::error("UnknownSession", "no session");
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["type"], "error");
        assert_eq!(v["code"], "UnknownSession");
        assert_eq!(serde_json::from_str::<ServerMsg>(&e.to_json()).unwrap(), e);
    }
}
