//! Real-time yoga posture analysis: keypoint ingestion, joint-angle
//! features, a CNN-LSTM pose classifier, posture scoring against reference
//! poses and corrective feedback.

pub mod biomech;
pub mod edge_opt;
pub mod evaluator;
pub mod feedback;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod session_log;
pub mod synth;
