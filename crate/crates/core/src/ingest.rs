//! Keypoint frame ingestion: wire-record parsing, body-frame normalization
//! and exponential smoothing.
//!
//! Frames arrive as one JSON record per line:
//!
//! ```text
//! {"t":1234,"id":7,"kp":[x0,y0,c0, x1,y1,c1, ... x16,y16,c16]}
//! ```
//!
//! `kp` holds the 17 COCO keypoints in order. The same record layout is used
//! on the live socket and in `.kpjsonl` session logs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_KEYPOINTS: usize = 17;

/// Flat length of the `kp` array: x, y, confidence per keypoint.
pub const RECORD_VALUES: usize = NUM_KEYPOINTS * 3;

/// Torso lengths below this are treated as a collapsed skeleton.
pub const MIN_TORSO_LENGTH: f64 = 1e-9;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// COCO keypoint indices.
pub mod coco {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("degenerate torso (length {torso_length:e})")]
    DegenerateTorso { torso_length: f64 },
    #[error("hip/shoulder anchors below confidence {min_confidence}")]
    LowConfidenceAnchors { min_confidence: f64 },
}

impl IngestError {
    /// Short machine-readable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::MalformedRecord(_) => "MalformedRecord",
            IngestError::SchemaViolation(_) => "SchemaViolation",
            IngestError::DegenerateTorso { .. } => "DegenerateTorso",
            IngestError::LowConfidenceAnchors { .. } => "LowConfidenceAnchors",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// One timestamped set of 17 keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    pub timestamp_ms: i64,
    pub frame_id: u64,
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
}

/// Serialized form of a frame record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub t: i64,
    pub id: u64,
    pub kp: Vec<f64>,
}

impl KeypointFrame {
    pub fn to_record(&self) -> FrameRecord {
        let kp = self
            .keypoints
            .iter()
            .flat_map(|k| [k.x, k.y, k.confidence])
            .collect();
        FrameRecord {
            t: self.timestamp_ms,
            id: self.frame_id,
            kp,
        }
    }

    /// Compact single-line JSON, suitable for a `.kpjsonl` file.
    pub fn to_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("frame record serializes")
    }

    pub fn from_record(record: FrameRecord) -> Result<Self, IngestError> {
        if record.kp.len() != RECORD_VALUES {
            return Err(IngestError::SchemaViolation(format!(
                "expected {RECORD_VALUES} values in kp ({NUM_KEYPOINTS} keypoints), got {}",
                record.kp.len()
            )));
        }
        if record.t < 0 {
            return Err(IngestError::SchemaViolation(format!(
                "negative timestamp {}",
                record.t
            )));
        }
        let mut keypoints = [Keypoint::default(); NUM_KEYPOINTS];
        for (i, chunk) in record.kp.chunks_exact(3).enumerate() {
            let (x, y, c) = (chunk[0], chunk[1], chunk[2]);
            if !x.is_finite() || !y.is_finite() {
                return Err(IngestError::SchemaViolation(format!(
                    "keypoint {} ({}) has a non-finite coordinate",
                    i, KEYPOINT_NAMES[i]
                )));
            }
            if !(0.0..=1.0).contains(&c) {
                return Err(IngestError::SchemaViolation(format!(
                    "keypoint {} ({}) confidence {} outside [0,1]",
                    i, KEYPOINT_NAMES[i], c
                )));
            }
            keypoints[i] = Keypoint::new(x, y, c);
        }
        Ok(Self {
            timestamp_ms: record.t,
            frame_id: record.id,
            keypoints,
        })
    }
}

/// Parses and validates one wire record.
pub fn parse_frame(line: &str) -> Result<KeypointFrame, IngestError> {
    let record: FrameRecord = serde_json::from_str(line.trim())
        .map_err(|e| IngestError::MalformedRecord(e.to_string()))?;
    KeypointFrame::from_record(record)
}

/// Keypoints in the body frame: hip midpoint at the origin, unit torso length.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFrame {
    pub timestamp_ms: i64,
    pub frame_id: u64,
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
    /// Hip-to-shoulder-midpoint distance before normalization.
    pub torso_length: f64,
}

impl NormalizedFrame {
    /// Drops the torso length, giving a plain frame in body coordinates.
    pub fn to_keypoint_frame(&self) -> KeypointFrame {
        KeypointFrame {
            timestamp_ms: self.timestamp_ms,
            frame_id: self.frame_id,
            keypoints: self.keypoints,
        }
    }
}

fn midpoint(a: &Keypoint, b: &Keypoint) -> [f64; 2] {
    [(a.x + b.x) / 2.0, (a.y + b.y) / 2.0]
}

/// Re-expresses a frame in the body frame.
///
/// Rotation is left untouched: the orientation of the body carries meaning
/// for a posture (an inverted pose is not an upright one).
pub fn normalize(frame: &KeypointFrame, min_confidence: f64) -> Result<NormalizedFrame, IngestError> {
    let kp = &frame.keypoints;
    let anchors = [
        coco::LEFT_HIP,
        coco::RIGHT_HIP,
        coco::LEFT_SHOULDER,
        coco::RIGHT_SHOULDER,
    ];
    if anchors.iter().any(|&i| kp[i].confidence < min_confidence) {
        return Err(IngestError::LowConfidenceAnchors { min_confidence });
    }
    let hip = midpoint(&kp[coco::LEFT_HIP], &kp[coco::RIGHT_HIP]);
    let shoulder = midpoint(&kp[coco::LEFT_SHOULDER], &kp[coco::RIGHT_SHOULDER]);
    let torso_length = (shoulder[0] - hip[0]).hypot(shoulder[1] - hip[1]);
    if !(torso_length >= MIN_TORSO_LENGTH) {
        return Err(IngestError::DegenerateTorso { torso_length });
    }
    let mut keypoints = *kp;
    for k in keypoints.iter_mut() {
        k.x = (k.x - hip[0]) / torso_length;
        k.y = (k.y - hip[1]) / torso_length;
    }
    Ok(NormalizedFrame {
        timestamp_ms: frame.timestamp_ms,
        frame_id: frame.frame_id,
        keypoints,
        torso_length,
    })
}

/// Per-coordinate exponential moving average over normalized frames.
#[derive(Debug, Clone)]
pub struct Smoother {
    alpha: f64,
    prev: Option<[Keypoint; NUM_KEYPOINTS]>,
}

impl Smoother {
    /// `alpha` must lie in (0, 1]; 1 disables smoothing.
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "smoothing alpha {alpha} outside (0,1]");
        Self { alpha, prev: None }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_empty(&self) -> bool {
        self.prev.is_none()
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }

    pub fn smooth(&mut self, mut frame: NormalizedFrame) -> NormalizedFrame {
        if let Some(prev) = &self.prev {
            let a = self.alpha;
            let blend = |cur: f64, old: f64| {
                // keep the result inside [min, max] despite rounding
                (a * cur + (1.0 - a) * old).clamp(cur.min(old), cur.max(old))
            };
            for (k, p) in frame.keypoints.iter_mut().zip(prev) {
                k.x = blend(k.x, p.x);
                k.y = blend(k.y, p.y);
            }
        }
        self.prev = Some(frame.keypoints);
        frame
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub min_confidence: f64,
    pub alpha: f64,
    /// Consecutive dropped frames after which the smoother is reset.
    pub max_gap: u32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.3,
            alpha: 0.5,
            max_gap: 10,
        }
    }
}

/// Stateful front half of the pipeline for one session: frame ordering,
/// normalization, drop accounting and smoothing.
#[derive(Debug, Clone)]
pub struct FrameIngestor {
    config: IngestConfig,
    smoother: Smoother,
    last_frame_id: Option<u64>,
    consecutive_drops: u32,
    dropped: u64,
    accepted: u64,
}

impl FrameIngestor {
    pub fn new(config: IngestConfig) -> Self {
        Self {
            smoother: Smoother::new(config.alpha),
            config,
            last_frame_id: None,
            consecutive_drops: 0,
            dropped: 0,
            accepted: 0,
        }
    }

    pub fn config(&self) -> &IngestConfig {
        &self.config
    }

    /// Frames that passed validation, including the ones later dropped.
    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn smoother(&self) -> &Smoother {
        &self.smoother
    }

    /// Rejects frames whose id does not strictly increase. A rejected frame
    /// leaves the ingestor untouched.
    pub fn check_order(&self, frame: &KeypointFrame) -> Result<(), IngestError> {
        match self.last_frame_id {
            Some(last) if frame.frame_id <= last => Err(IngestError::SchemaViolation(format!(
                "frame id {} does not follow {}",
                frame.frame_id, last
            ))),
            _ => Ok(()),
        }
    }

    /// Normalizes and smooths one frame. Normalization failures count as
    /// drops; after `max_gap` consecutive drops the smoother forgets its
    /// history.
    pub fn ingest(&mut self, frame: &KeypointFrame) -> Result<NormalizedFrame, IngestError> {
        self.check_order(frame)?;
        self.last_frame_id = Some(frame.frame_id);
        self.accepted += 1;
        match normalize(frame, self.config.min_confidence) {
            Ok(norm) => {
                self.consecutive_drops = 0;
                Ok(self.smoother.smooth(norm))
            }
            Err(e) => {
                self.dropped += 1;
                self.consecutive_drops += 1;
                if self.consecutive_drops >= self.config.max_gap {
                    self.smoother.reset();
                }
                Err(e)
            }
        }
    }
}
