//! Per-session frame pipeline: parse, normalize, smooth, extract features,
//! evaluate against the target pose, classify the sliding window and
//! generate feedback.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biomech::{extract_features, AngleTable, FeatureVector};
use crate::edge_opt::quantize;
use crate::evaluator::{evaluate_posture, EvalError, JointReport, PoseLibrary, ReferencePose};
use crate::feedback::{CooldownState, FeedbackEvent, FeedbackGenerator, TemplateTable, DEFAULT_COOLDOWN_MS};
use crate::ingest::{parse_frame, FrameIngestor, IngestConfig, IngestError, KeypointFrame};
use crate::model::{AnyModel, ModelError, ModelFile, ModelMeta, ModelVariant};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown pose {0}")]
    UnknownPose(String),
    #[error("model variant {0} is not available")]
    VariantUnavailable(ModelVariant),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("model does not fit the angle table: {0}")]
    IncompatibleModel(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Stable identifier used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::UnknownPose(_) => "UnknownPose",
            PipelineError::VariantUnavailable(_) => "VariantUnavailable",
            PipelineError::InvalidConfig(_) => "InvalidConfig",
            PipelineError::IncompatibleModel(_) => "IncompatibleModel",
            PipelineError::Ingest(e) => e.code(),
            PipelineError::Model(_) => "ModelError",
            PipelineError::Eval(_) => "EvalError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub ingest: IngestConfig,
    /// Frames in the classification window.
    pub window: usize,
    /// Frames between classification refreshes once the window is full.
    pub stride: usize,
    pub cooldown_ms: i64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ingest: IngestConfig::default(),
            window: 30,
            stride: 5,
            cooldown_ms: DEFAULT_COOLDOWN_MS,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::InvalidConfig(msg));
        let i = &self.ingest;
        if !(i.alpha > 0.0 && i.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0,1]", i.alpha));
        }
        if !(0.0..=1.0).contains(&i.min_confidence) {
            return bad(format!("min_confidence {} outside [0,1]", i.min_confidence));
        }
        if i.max_gap == 0 {
            return bad("max_gap must be positive".into());
        }
        if self.window < 3 {
            return bad(format!("window {} is shorter than 3", self.window));
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        if self.cooldown_ms < 0 {
            return bad("cooldown must be non-negative".into());
        }
        Ok(())
    }
}

/// Classifier weights available to sessions.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub meta: ModelMeta,
    pub source_variant: ModelVariant,
    float: Option<Arc<AnyModel>>,
    quantized: Arc<AnyModel>,
}

impl ModelSet {
    /// A float (or pruned) file serves both variants, quantizing on load;
    /// a quantized file serves only the quantized variant.
    pub fn new(file: ModelFile, table: &AngleTable) -> Result<Self, PipelineError> {
        if file.meta.angle_table_version != table.version {
            return Err(PipelineError::IncompatibleModel(format!(
                "model uses angle table {}, loaded table is {}",
                file.meta.angle_table_version, table.version
            )));
        }
        if file.model.dims().input != table.len() {
            return Err(PipelineError::IncompatibleModel(format!(
                "model expects {} angles, table has {}",
                file.model.dims().input,
                table.len()
            )));
        }
        let source_variant = file.variant();
        let (float, quantized) = match file.model {
            AnyModel::Float(p) => {
                let q = quantize(&p).map_err(|e| PipelineError::IncompatibleModel(e.to_string()))?;
                (Some(Arc::new(AnyModel::Float(p))), Arc::new(AnyModel::Quantized(q)))
            }
            q @ AnyModel::Quantized(_) => (None, Arc::new(q)),
        };
        Ok(Self {
            meta: file.meta,
            source_variant,
            float,
            quantized,
        })
    }

    pub fn get(&self, variant: ModelVariant) -> Option<Arc<AnyModel>> {
        match variant {
            ModelVariant::Float | ModelVariant::Pruned => self.float.clone(),
            ModelVariant::Quantized => Some(self.quantized.clone()),
        }
    }
}

/// Shared read-only data: angle table, pose library, message templates and
/// optional classifier.
#[derive(Debug, Clone)]
pub struct Resources {
    pub table: AngleTable,
    pub library: PoseLibrary,
    pub templates: TemplateTable,
    pub models: Option<ModelSet>,
}

impl Resources {
    pub fn builtin() -> Self {
        Self {
            table: AngleTable::default(),
            library: PoseLibrary::builtin(),
            templates: TemplateTable::default(),
            models: None,
        }
    }

    pub fn with_model(mut self, file: ModelFile) -> Result<Self, PipelineError> {
        self.models = Some(ModelSet::new(file, &self.table)?);
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameStatus {
    /// Scored against the target pose.
    Ok,
    /// Failed normalization; counted as a drop.
    Dropped,
    /// Normalized, but every joint was masked.
    Unevaluable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationMsg {
    pub frame_id: u64,
    pub timestamp_ms: i64,
    pub status: FrameStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub score: Option<f64>,
    pub raw_score: Option<f64>,
    pub evaluated_joint_count: usize,
    pub joints: Vec<JointReport>,
}

impl EvaluationMsg {
    pub fn flagged_joints(&self) -> impl Iterator<Item = &str> {
        self.joints.iter().filter(|j| j.flagged).map(|j| j.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMsg {
    pub frame_id: u64,
    pub timestamp_ms: i64,
    pub label: String,
    pub class_index: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMsg {
    pub frame_id: u64,
    #[serde(flatten)]
    pub event: FeedbackEvent,
}

/// Everything the pipeline emits, tagged by `type`; used both on the wire
/// and in session logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutputRecord {
    Evaluation(EvaluationMsg),
    Classification(ClassificationMsg),
    Feedback(FeedbackMsg),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub evaluation: EvaluationMsg,
    pub classification: Option<ClassificationMsg>,
    pub feedback: Vec<FeedbackMsg>,
}

impl FrameOutput {
    /// Records in delivery order: evaluation, classification, feedback.
    pub fn records(&self) -> Vec<OutputRecord> {
        let mut out = Vec::with_capacity(2 + self.feedback.len());
        out.push(OutputRecord::Evaluation(self.evaluation.clone()));
        if let Some(c) = &self.classification {
            out.push(OutputRecord::Classification(c.clone()));
        }
        out.extend(self.feedback.iter().cloned().map(OutputRecord::Feedback));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Biomech,
    Model,
    Evaluate,
    Feedback,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Ingest, Stage::Biomech, Stage::Model, Stage::Evaluate, Stage::Feedback];
}

/// Wall-clock time spent in each stage for one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes([Duration; 5]);

impl StageTimes {
    pub fn get(&self, stage: Stage) -> Duration {
        self.0[stage as usize]
    }
}

struct Clock<'a> {
    times: Option<&'a mut StageTimes>,
    last: Instant,
}

impl<'a> Clock<'a> {
    fn new(times: Option<&'a mut StageTimes>) -> Self {
        Self {
            times,
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: Stage) {
        if let Some(t) = self.times.as_deref_mut() {
            let now = Instant::now();
            t.0[stage as usize] += now - self.last;
            self.last = now;
        }
    }
}

/// State of one session. Frames must be fed in arrival order.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    table: AngleTable,
    target: ReferencePose,
    feedback: FeedbackGenerator,
    classifier: Option<(Arc<AnyModel>, Arc<[String]>)>,
    ingestor: FrameIngestor,
    cooldown: CooldownState,
    window: VecDeque<FeatureVector>,
    pushed: u64,
}

impl Pipeline {
    pub fn new(
        resources: &Resources,
        pose_id: &str,
        variant: ModelVariant,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let target = resources
            .library
            .get(pose_id)
            .ok_or_else(|| PipelineError::UnknownPose(pose_id.to_owned()))?
            .clone();
        let classifier = match &resources.models {
            Some(set) => {
                let model = set.get(variant).ok_or(PipelineError::VariantUnavailable(variant))?;
                Some((model, set.meta.class_labels.clone().into()))
            }
            None => None,
        };
        Ok(Self {
            table: resources.table.clone(),
            target,
            feedback: FeedbackGenerator::new(resources.templates.clone(), config.cooldown_ms),
            classifier,
            ingestor: FrameIngestor::new(config.ingest),
            cooldown: CooldownState::default(),
            window: VecDeque::with_capacity(config.window),
            pushed: 0,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn target(&self) -> &ReferencePose {
        &self.target
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    /// Frames that passed validation (including drops).
    pub fn frames(&self) -> u64 {
        self.ingestor.accepted()
    }

    pub fn drops(&self) -> u64 {
        self.ingestor.dropped()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn process_line(&mut self, line: &str) -> Result<FrameOutput, PipelineError> {
        self.process_line_timed(line, None)
    }

    /// Like [`Self::process_line`], adding per-stage wall-clock time to
    /// `times` (parsing counts as ingest).
    pub fn process_line_timed(&mut self, line: &str, times: Option<&mut StageTimes>) -> Result<FrameOutput, PipelineError> {
        let mut clock = Clock::new(times);
        let frame = parse_frame(line)?;
        self.run(&frame, &mut clock)
    }

    pub fn process(&mut self, frame: &KeypointFrame) -> Result<FrameOutput, PipelineError> {
        self.run(frame, &mut Clock::new(None))
    }

    /// Rejected frames (bad order) leave the session state unchanged.
    fn run(&mut self, frame: &KeypointFrame, clock: &mut Clock<'_>) -> Result<FrameOutput, PipelineError> {
        let min_conf = self.config.ingest.min_confidence;
        let normalized = match self.ingestor.ingest(frame) {
            Ok(n) => n,
            Err(e @ (IngestError::MalformedRecord(_) | IngestError::SchemaViolation(_))) => return Err(e.into()),
            Err(reason) => {
                clock.lap(Stage::Ingest);
                return Ok(FrameOutput {
                    evaluation: EvaluationMsg {
                        frame_id: frame.frame_id,
                        timestamp_ms: frame.timestamp_ms,
                        status: FrameStatus::Dropped,
                        reason: Some(reason.code().to_owned()),
                        score: None,
                        raw_score: None,
                        evaluated_joint_count: 0,
                        joints: Vec::new(),
                    },
                    classification: None,
                    feedback: Vec::new(),
                });
            }
        };
        clock.lap(Stage::Ingest);

        let features = extract_features(&normalized, &self.table.angles, min_conf);
        if self.window.len() == self.config.window {
            self.window.pop_front();
        }
        self.window.push_back(features.clone());
        self.pushed += 1;
        clock.lap(Stage::Biomech);

        let classification = self.classify(frame)?;
        clock.lap(Stage::Model);

        let (evaluation, report) = match evaluate_posture(&features, &self.target) {
            Ok(report) => (
                EvaluationMsg {
                    frame_id: frame.frame_id,
                    timestamp_ms: frame.timestamp_ms,
                    status: FrameStatus::Ok,
                    reason: None,
                    score: Some(report.score),
                    raw_score: Some(report.raw_score),
                    evaluated_joint_count: report.evaluated_joint_count,
                    joints: report.joints.clone(),
                },
                Some(report),
            ),
            Err(EvalError::NoEvaluableJoints) => (
                EvaluationMsg {
                    frame_id: frame.frame_id,
                    timestamp_ms: frame.timestamp_ms,
                    status: FrameStatus::Unevaluable,
                    reason: Some("NoEvaluableJoints".to_owned()),
                    score: None,
                    raw_score: None,
                    evaluated_joint_count: 0,
                    joints: Vec::new(),
                },
                None,
            ),
            Err(e) => return Err(e.into()),
        };
        clock.lap(Stage::Evaluate);

        let feedback = match &report {
            Some(r) => self
                .feedback
                .generate(r, &mut self.cooldown, frame.timestamp_ms)
                .into_iter()
                .map(|event| FeedbackMsg {
                    frame_id: frame.frame_id,
                    event,
                })
                .collect(),
            None => Vec::new(),
        };
        clock.lap(Stage::Feedback);

        Ok(FrameOutput {
            evaluation,
            classification,
            feedback,
        })
    }

    fn classify(&self, frame: &KeypointFrame) -> Result<Option<ClassificationMsg>, PipelineError> {
        let Some((model, labels)) = &self.classifier else {
            return Ok(None);
        };
        let t = self.config.window as u64;
        if self.pushed < t || !(self.pushed - t).is_multiple_of(self.config.stride as u64) {
            return Ok(None);
        }
        let seq: Vec<FeatureVector> = self.window.iter().cloned().collect();
        let (class_index, confidence) = model.predict(&seq)?;
        Ok(Some(ClassificationMsg {
            frame_id: frame.frame_id,
            timestamp_ms: frame.timestamp_ms,
            label: labels.get(class_index).cloned().unwrap_or_else(|| class_index.to_string()),
            class_index,
            confidence,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ModelParams};
    use crate::synth::{inject_mask, pose_stream, SkeletonSpec};

    fn model_file() -> ModelFile {
        let labels: Vec<String> = PoseLibrary::builtin().poses().iter().map(|p| p.pose_id.clone()).collect();
        ModelFile::new(
            ModelMeta {
                class_labels: labels,
                angle_table_version: AngleTable::default().version,
                window: 30,
                seed: Some(1),
                pruned_fraction: None,
            },
            AnyModel::Float(ModelParams::init_seeded(ModelDims::new(8, 4, 6, 5), 1)),
        )
    }

    fn stream(pose: &str, n: usize) -> Vec<KeypointFrame> {
        let lib = PoseLibrary::builtin();
        let spec = SkeletonSpec::from_pose(lib.get(pose).unwrap()).unwrap();
        pose_stream(&spec, n, (200.0, [320.0, 300.0])).unwrap()
    }

    #[test]
    fn perfect_pose_stream() {
        let res = Resources::builtin().with_model(model_file()).unwrap();
        let mut p = Pipeline::new(&res, "tree", ModelVariant::Float, PipelineConfig::default()).unwrap();
        let mut classified = Vec::new();
        for (i, f) in stream("tree", 45).iter().enumerate() {
            let out = p.process(f).unwrap();
            assert!((out.evaluation.score.unwrap() - 1.0).abs() < 1e-12);
            assert!(out.feedback.is_empty());
            if out.classification.is_some() {
                classified.push(i + 1);
            }
        }
        assert_eq!(classified, [30, 35, 40, 45]);
    }

    #[test]
    fn wrong_pose_produces_feedback_with_cooldown() {
        let res = Resources::builtin();
        let mut p = Pipeline::new(&res, "t_pose", ModelVariant::Float, PipelineConfig::default()).unwrap();
        let frames = stream("mountain", 200);
        let mut texts: Vec<(String, i64)> = Vec::new();
        for f in &frames {
            let out = p.process(f).unwrap();
            assert!(out.evaluation.score.unwrap() < 1.0);
            assert!(out.classification.is_none());
            let overlays = out.feedback.iter().filter(|m| m.event.channel == crate::feedback::Channel::Overlay).count();
            assert_eq!(overlays, out.evaluation.flagged_joints().count());
            texts.extend(
                out.feedback
                    .iter()
                    .filter(|m| m.event.channel == crate::feedback::Channel::Text)
                    .map(|m| (m.event.joint.clone().unwrap(), m.event.timestamp_ms)),
            );
        }
        assert_eq!(texts[0].1, 0);
        for (i, (joint, t)) in texts.iter().enumerate() {
            if let Some((_, prev)) = texts[..i].iter().rev().find(|(j, _)| j == joint) {
                assert!(t - prev >= DEFAULT_COOLDOWN_MS);
            }
        }
    }

    #[test]
    fn dropped_and_unevaluable_frames() {
        let res = Resources::builtin();
        let mut p = Pipeline::new(&res, "tree", ModelVariant::Float, PipelineConfig::default()).unwrap();
        let mut frames = stream("tree", 3);
        inject_mask(&mut frames[1], &[11], 0.0);
        for k in frames[2].keypoints.iter_mut().skip(7) {
            k.confidence = 0.0;
        }
        for k in frames[2].keypoints[5..7].iter_mut() {
            k.confidence = 1.0;
        }
        frames[2].keypoints[11].confidence = 1.0;
        frames[2].keypoints[12].confidence = 1.0;
        let out: Vec<_> = frames.iter().map(|f| p.process(f).unwrap()).collect();
        assert_eq!(out[0].evaluation.status, FrameStatus::Ok);
        assert_eq!(out[1].evaluation.status, FrameStatus::Dropped);
        assert_eq!(out[1].evaluation.reason.as_deref(), Some("LowConfidenceAnchors"));
        assert_eq!(out[2].evaluation.status, FrameStatus::Unevaluable);
        assert_eq!(p.drops(), 1);
        assert_eq!(p.frames(), 3);
        assert_eq!(p.window_len(), 2);
    }

    #[test]
    fn out_of_order_frame_is_rejected_without_side_effects() {
        let res = Resources::builtin();
        let mut p = Pipeline::new(&res, "tree", ModelVariant::Float, PipelineConfig::default()).unwrap();
        let frames = stream("tree", 3);
        p.process(&frames[1]).unwrap();
        assert!(matches!(p.process(&frames[0]), Err(PipelineError::Ingest(IngestError::SchemaViolation(_)))));
        assert_eq!(p.frames(), 1);
        p.process(&frames[2]).unwrap();
    }

    #[test]
    fn unknown_pose_and_missing_variant() {
        let res = Resources::builtin();
        assert!(matches!(
            Pipeline::new(&res, "lotus", ModelVariant::Float, PipelineConfig::default()),
            Err(PipelineError::UnknownPose(_))
        ));
        let mut file = model_file();
        let AnyModel::Float(p) = &file.model else { unreachable!() };
        file.model = AnyModel::Quantized(quantize(p).unwrap());
        let res = Resources::builtin().with_model(file).unwrap();
        assert!(matches!(
            Pipeline::new(&res, "tree", ModelVariant::Float, PipelineConfig::default()),
            Err(PipelineError::VariantUnavailable(ModelVariant::Float))
        ));
        assert!(Pipeline::new(&res, "tree", ModelVariant::Quantized, PipelineConfig::default()).is_ok());
    }

    #[test]
    fn output_records_round_trip_through_json() {
        let res = Resources::builtin();
        let mut p = Pipeline::new(&res, "t_pose", ModelVariant::Float, PipelineConfig::default()).unwrap();
        let out = p.process(&stream("mountain", 1)[0]).unwrap();
        let records = out.records();
        assert!(records.len() > 2);
        for r in records {
            let text = serde_json::to_string(&r).unwrap();
            let back: OutputRecord = serde_json::from_str(&text).unwrap();
            assert_eq!(back, r, "{text}");
        }
    }

    #[test]
    fn invalid_config() {
        let res = Resources::builtin();
        let config = PipelineConfig {
            window: 2,
            ..PipelineConfig::default()
        };
        assert!(matches!(
            Pipeline::new(&res, "tree", ModelVariant::Float, config),
            Err(PipelineError::InvalidConfig(_))
        ));
    }
}
