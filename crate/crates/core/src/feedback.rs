//! Corrective feedback: overlay highlights, text guidance and spoken
//! messages derived from a posture report.
//!
//! Every flagged joint yields an overlay event on every frame. Text and
//! voice are rate limited: at most one message per frame, for the worst
//! flagged joint, and never twice for the same joint inside the cooldown
//! window.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::PostureReport;

const DEFAULT_TEMPLATES: &str = include_str!("../data/feedback_templates.toml");

pub const DEFAULT_COOLDOWN_MS: i64 = 2000;

pub const COLOR_MAJOR: &str = "#E53935";
pub const COLOR_MINOR: &str = "#FFB300";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeedbackError {
    #[error("no message template for joint {0}")]
    UnknownJoint(String),
    #[error("invalid template table: {0}")]
    InvalidTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Overlay,
    Text,
    Voice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Minor,
    Major,
}

impl Severity {
    /// Major when the deviation exceeds twice the flag threshold.
    pub fn classify(deviation_deg: f64, flag_threshold_deg: f64) -> Self {
        if deviation_deg > 2.0 * flag_threshold_deg {
            Severity::Major
        } else {
            Severity::Minor
        }
    }

    pub fn color(self) -> &'static str {
        match self {
            Severity::Major => COLOR_MAJOR,
            Severity::Minor => COLOR_MINOR,
        }
    }
}

/// Which way the joint angle has to move to approach the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
}

impl Direction {
    /// `signed_deviation_deg` is measured minus reference; a positive value
    /// means the joint is too open and has to close.
    pub fn correcting(signed_deviation_deg: f64) -> Self {
        if signed_deviation_deg > 0.0 {
            Direction::Decrease
        } else {
            Direction::Increase
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Overlay { color: String },
    Message { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub timestamp_ms: i64,
    pub channel: Channel,
    pub joint: Option<String>,
    pub severity: Severity,
    #[serde(flatten)]
    pub payload: Payload,
}

impl FeedbackEvent {
    pub fn message(&self) -> Option<&str> {
        match &self.payload {
            Payload::Message { message } => Some(message),
            Payload::Overlay { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateRow {
    increase: String,
    decrease: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    version: String,
    joint: BTreeMap<String, TemplateRow>,
}

/// Message table keyed by joint name and correction direction.
#[derive(Debug, Clone)]
pub struct TemplateTable {
    pub version: String,
    rows: BTreeMap<String, TemplateRow>,
}

impl Default for TemplateTable {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TEMPLATES).expect("shipped templates are valid")
    }
}

impl TemplateTable {
    pub fn from_toml(text: &str) -> Result<Self, FeedbackError> {
        let file: TemplateFile =
            toml::from_str(text).map_err(|e| FeedbackError::InvalidTable(e.to_string()))?;
        if let Some((name, _)) = file
            .joint
            .iter()
            .find(|(_, r)| r.increase.trim().is_empty() || r.decrease.trim().is_empty())
        {
            return Err(FeedbackError::InvalidTable(format!("{name}: empty message")));
        }
        Ok(Self {
            version: file.version,
            rows: file.joint,
        })
    }

    pub fn load(path: &Path) -> Result<Self, FeedbackError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FeedbackError::InvalidTable(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn lookup(&self, joint: &str, direction: Direction) -> Result<&str, FeedbackError> {
        let row = self
            .rows
            .get(joint)
            .ok_or_else(|| FeedbackError::UnknownJoint(joint.to_owned()))?;
        Ok(match direction {
            Direction::Increase => &row.increase,
            Direction::Decrease => &row.decrease,
        })
    }
}

/// Per-session record of when each joint last produced a message.
#[derive(Debug, Clone, Default)]
pub struct CooldownState {
    last_message_ms: HashMap<String, i64>,
}

impl CooldownState {
    pub fn last_message_ms(&self, joint: &str) -> Option<i64> {
        self.last_message_ms.get(joint).copied()
    }
}

#[derive(Debug, Clone)]
pub struct FeedbackGenerator {
    templates: TemplateTable,
    cooldown_ms: i64,
}

impl Default for FeedbackGenerator {
    fn default() -> Self {
        Self::new(TemplateTable::default(), DEFAULT_COOLDOWN_MS)
    }
}

impl FeedbackGenerator {
    pub fn new(templates: TemplateTable, cooldown_ms: i64) -> Self {
        Self {
            templates,
            cooldown_ms,
        }
    }

    pub fn templates(&self) -> &TemplateTable {
        &self.templates
    }

    pub fn cooldown_ms(&self) -> i64 {
        self.cooldown_ms
    }

    pub fn generate(
        &self,
        report: &PostureReport,
        state: &mut CooldownState,
        now_ms: i64,
    ) -> Vec<FeedbackEvent> {
        let mut events = Vec::new();
        // (deviation, signed deviation, joint name, severity) of the worst joint
        let mut worst: Option<(f64, f64, &str, Severity)> = None;
        for (_, joint) in report.flagged() {
            let (Some(dev), Some(signed)) = (joint.deviation_deg, joint.signed_deviation_deg) else {
                continue;
            };
            let severity = Severity::classify(dev, joint.flag_threshold_deg);
            events.push(FeedbackEvent {
                timestamp_ms: now_ms,
                channel: Channel::Overlay,
                joint: Some(joint.name.clone()),
                severity,
                payload: Payload::Overlay {
                    color: severity.color().to_owned(),
                },
            });
            if worst.is_none_or(|(d, ..)| dev > d) {
                worst = Some((dev, signed, &joint.name, severity));
            }
        }

        let Some((_, signed, name, severity)) = worst else {
            return events;
        };
        if let Some(last) = state.last_message_ms(name) {
            if now_ms - last < self.cooldown_ms {
                return events;
            }
        }
        // joints without a template still get overlays, just no message
        let Ok(text) = self.templates.lookup(name, Direction::correcting(signed)) else {
            return events;
        };
        for channel in [Channel::Text, Channel::Voice] {
            events.push(FeedbackEvent {
                timestamp_ms: now_ms,
                channel,
                joint: Some(name.to_owned()),
                severity,
                payload: Payload::Message {
                    message: text.to_owned(),
                },
            });
        }
        state.last_message_ms.insert(name.to_owned(), now_ms);
        events
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biomech::FeatureVector;
    use crate::evaluator::{evaluate_posture, PoseLibrary};
    use proptest::prelude::*;

    fn t_pose_report(offsets: &[(usize, f64)]) -> PostureReport {
        let lib = PoseLibrary::builtin();
        let pose = lib.get("t_pose").unwrap();
        let mut angles = pose.ref_angles();
        for &(i, d) in offsets {
            angles[i] += d;
        }
        evaluate_posture(&FeatureVector::from_angles(angles, 0), pose).unwrap()
    }

    #[test]
    fn template_rows() {
        let t = TemplateTable::default();
        assert_eq!(t.lookup("left_knee", Direction::Increase).unwrap(), "Straighten your left knee");
        assert_eq!(t.lookup("left_knee", Direction::Decrease).unwrap(), "Bend your left knee");
        assert_eq!(t.lookup("right_shoulder", Direction::Decrease).unwrap(), "Lower your right arm");
        assert_eq!(t.lookup("right_hip", Direction::Increase).unwrap(), "Raise your right leg");
        assert_eq!(
            t.lookup("nose", Direction::Increase),
            Err(FeedbackError::UnknownJoint("nose".into()))
        );
    }

    #[test]
    fn no_flags_no_events() {
        let gen = FeedbackGenerator::default();
        let mut st = CooldownState::default();
        assert!(gen.generate(&t_pose_report(&[]), &mut st, 0).is_empty());
    }

    #[test]
    fn elbow_flag_then_cooldown() {
        let gen = FeedbackGenerator::default();
        let mut st = CooldownState::default();
        // elbow closed 20 degrees short of straight: open it
        let rep = t_pose_report(&[(0, -20.0)]);
        let ev = gen.generate(&rep, &mut st, 1000);
        assert_eq!(ev.len(), 3);
        assert_eq!(ev[0].channel, Channel::Overlay);
        assert_eq!(ev[0].joint.as_deref(), Some("left_elbow"));
        assert_eq!(ev[0].severity, Severity::Minor);
        assert_eq!(ev[0].payload, Payload::Overlay { color: COLOR_MINOR.into() });
        assert_eq!(ev[1].channel, Channel::Text);
        assert_eq!(ev[1].message(), Some("Straighten your left elbow"));
        assert_eq!(ev[2].channel, Channel::Voice);
        assert_eq!(ev[2].message(), Some("Straighten your left elbow"));

        let again = gen.generate(&rep, &mut st, 1500);
        assert_eq!(again.len(), 1);
        assert_eq!(again[0].channel, Channel::Overlay);

        assert_eq!(gen.generate(&rep, &mut st, 3000).len(), 3, "cooldown elapsed");
    }

    #[test]
    fn too_open_joint_is_told_to_close() {
        let gen = FeedbackGenerator::default();
        let mut st = CooldownState::default();
        let rep = t_pose_report(&[(2, 20.0)]);
        let ev = gen.generate(&rep, &mut st, 0);
        assert_eq!(ev[1].message(), Some("Lower your left arm"));
    }

    #[test]
    fn worst_joint_speaks_and_major_severity() {
        let gen = FeedbackGenerator::default();
        let mut st = CooldownState::default();
        let rep = t_pose_report(&[(2, -20.0), (6, -40.0)]);
        let ev = gen.generate(&rep, &mut st, 0);
        let overlays: Vec<_> = ev.iter().filter(|e| e.channel == Channel::Overlay).collect();
        assert_eq!(overlays.len(), 2);
        assert_eq!(overlays[1].severity, Severity::Major);
        let voice: Vec<_> = ev.iter().filter(|e| e.channel == Channel::Voice).collect();
        assert_eq!(voice.len(), 1);
        assert_eq!(voice[0].message(), Some("Straighten your left knee"));

        // worst joint in cooldown: no fallback to the next one
        let ev = gen.generate(&rep, &mut st, 100);
        assert!(ev.iter().all(|e| e.channel == Channel::Overlay));
    }

    #[test]
    fn event_wire_shape() {
        let ev = FeedbackEvent {
            timestamp_ms: 7,
            channel: Channel::Voice,
            joint: Some("left_knee".into()),
            severity: Severity::Major,
            payload: Payload::Message {
                message: "Bend your left knee".into(),
            },
        };
        let json = serde_json::to_value(&ev).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "timestamp_ms": 7, "channel": "voice", "joint": "left_knee",
                "severity": "major", "message": "Bend your left knee"
            })
        );
        assert_eq!(serde_json::from_value::<FeedbackEvent>(json).unwrap(), ev);
    }

    proptest! {
        #[test]
        fn overlays_track_flags_and_voice_respects_cooldown(
            frames in prop::collection::vec(
                (prop::collection::vec(-60.0f64..60.0, 8), 1i64..1500), 1..40)
        ) {
            let gen = FeedbackGenerator::default();
            let lib = PoseLibrary::builtin();
            let pose = lib.get("t_pose").unwrap();
            let mut st = CooldownState::default();
            let mut now = 0;
            let mut last_voice: HashMap<String, i64> = HashMap::new();
            for (offsets, dt) in frames {
                now += dt;
                let angles: Vec<f64> = pose
                    .ref_angles()
                    .iter()
                    .zip(&offsets)
                    .map(|(r, o)| (r + o).clamp(0.0, 180.0))
                    .collect();
                let rep = evaluate_posture(&FeatureVector::from_angles(angles, now), pose).unwrap();
                let ev = gen.generate(&rep, &mut st, now);
                let overlay: Vec<_> = ev
                    .iter()
                    .filter(|e| e.channel == Channel::Overlay)
                    .map(|e| e.joint.clone().unwrap())
                    .collect();
                let flagged: Vec<_> = rep.flagged().map(|(_, j)| j.name.clone()).collect();
                prop_assert_eq!(overlay, flagged);
                let voices: Vec<_> = ev.iter().filter(|e| e.channel == Channel::Voice).collect();
                prop_assert!(voices.len() <= 1);
                for v in voices {
                    let joint = v.joint.clone().unwrap();
                    if let Some(prev) = last_voice.get(&joint) {
                        prop_assert!(now - prev >= DEFAULT_COOLDOWN_MS);
                    }
                    last_voice.insert(joint, now);
                }
            }
        }
    }
}
