//! Append-only session logs and offline replay.
//!
//! A log is a `.kpjsonl` file: frame records exactly as received, with the
//! pipeline's output records (objects carrying a `type` field) interleaved
//! after each frame. The first line is a header and a finished log ends with
//! a summary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelVariant;
use crate::pipeline::{
    ClassificationMsg, EvaluationMsg, FeedbackMsg, FrameOutput, FrameStatus, OutputRecord, Pipeline, PipelineConfig,
    PipelineError, Resources,
};

pub const LOG_FORMAT: &str = "asana-session-log";
pub const LOG_VERSION: u32 = 1;
pub const LOG_EXTENSION: &str = "kpjsonl";

#[derive(Debug, Error)]
pub enum SessionLogError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("log has no header")]
    MissingHeader,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub session_id: String,
    pub pose_id: String,
    pub variant: ModelVariant,
    pub angle_table_version: String,
    pub config: PipelineConfig,
    /// Wall-clock start, milliseconds since the Unix epoch.
    pub started_at_ms: i64,
}

impl LogHeader {
    pub fn new(session_id: &str, pose_id: &str, variant: ModelVariant, angle_table_version: &str, config: PipelineConfig) -> Self {
        let started_at_ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as i64);
        Self {
            format: LOG_FORMAT.to_owned(),
            version: LOG_VERSION,
            session_id: session_id.to_owned(),
            pose_id: pose_id.to_owned(),
            variant,
            angle_table_version: angle_table_version.to_owned(),
            config,
            started_at_ms,
        }
    }
}

/// An input line the pipeline refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub line: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub pose_id: String,
    /// Frames that passed validation, drops included.
    pub frames: u64,
    pub drops: u64,
    pub unevaluable: u64,
    pub rejected: u64,
    pub mean_score: Option<f64>,
    pub min_score: Option<f64>,
    pub flag_counts: BTreeMap<String, u64>,
    /// Time between the first and last frame.
    pub duration_ms: i64,
}

/// Accumulates a [`SessionSummary`] from evaluation records in order.
#[derive(Debug, Clone)]
pub struct SummaryBuilder {
    frames: u64,
    drops: u64,
    unevaluable: u64,
    rejected: u64,
    score_sum: f64,
    scored: u64,
    min_score: Option<f64>,
    flag_counts: BTreeMap<String, u64>,
    first_ms: Option<i64>,
    last_ms: Option<i64>,
}

impl SummaryBuilder {
    pub fn new<'a>(joint_names: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            frames: 0,
            drops: 0,
            unevaluable: 0,
            rejected: 0,
            score_sum: 0.0,
            scored: 0,
            min_score: None,
            flag_counts: joint_names.into_iter().map(|n| (n.to_owned(), 0)).collect(),
            first_ms: None,
            last_ms: None,
        }
    }

    pub fn add(&mut self, eval: &EvaluationMsg) {
        self.frames += 1;
        self.first_ms.get_or_insert(eval.timestamp_ms);
        self.last_ms = Some(eval.timestamp_ms);
        match eval.status {
            FrameStatus::Dropped => self.drops += 1,
            FrameStatus::Unevaluable => self.unevaluable += 1,
            FrameStatus::Ok => {}
        }
        if let Some(score) = eval.score {
            self.score_sum += score;
            self.scored += 1;
            self.min_score = Some(self.min_score.map_or(score, |m| m.min(score)));
        }
        for name in eval.flagged_joints() {
            *self.flag_counts.entry(name.to_owned()).or_default() += 1;
        }
    }

    pub fn reject(&mut self) {
        self.rejected += 1;
    }

    pub fn finish(&self, session_id: &str, pose_id: &str) -> SessionSummary {
        SessionSummary {
            session_id: session_id.to_owned(),
            pose_id: pose_id.to_owned(),
            frames: self.frames,
            drops: self.drops,
            unevaluable: self.unevaluable,
            rejected: self.rejected,
            mean_score: (self.scored > 0).then(|| self.score_sum / self.scored as f64),
            min_score: self.min_score,
            flag_counts: self.flag_counts.clone(),
            duration_ms: match (self.first_ms, self.last_ms) {
                (Some(a), Some(b)) => b - a,
                _ => 0,
            },
        }
    }
}

/// Non-frame lines of a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Header(LogHeader),
    Evaluation(EvaluationMsg),
    Classification(ClassificationMsg),
    Feedback(FeedbackMsg),
    Rejected(RejectedRecord),
    Summary(SessionSummary),
}

impl From<OutputRecord> for LogRecord {
    fn from(r: OutputRecord) -> Self {
        match r {
            OutputRecord::Evaluation(m) => LogRecord::Evaluation(m),
            OutputRecord::Classification(m) => LogRecord::Classification(m),
            OutputRecord::Feedback(m) => LogRecord::Feedback(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogEntry {
    /// A frame record, verbatim.
    Frame(String),
    Record(LogRecord),
}

pub struct SessionLogWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl SessionLogWriter {
    /// Creates `<dir>/<session_id>.kpjsonl` and writes the header.
    pub fn create(dir: &Path, header: &LogHeader) -> Result<Self, SessionLogError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.{LOG_EXTENSION}", header.session_id));
        let mut writer = Self {
            out: BufWriter::new(fs::File::create(&path)?),
            path,
        };
        writer.record(&LogRecord::Header(header.clone()))?;
        writer.out.flush()?;
        Ok(writer)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn record(&mut self, record: &LogRecord) -> Result<(), SessionLogError> {
        let text = serde_json::to_string(record).map_err(|e| SessionLogError::Format {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(self.out, "{text}")?;
        Ok(())
    }

    /// Appends a processed frame and its outputs, then flushes.
    pub fn frame(&mut self, line: &str, output: &FrameOutput) -> Result<(), SessionLogError> {
        writeln!(self.out, "{}", line.trim())?;
        for r in output.records() {
            self.record(&r.into())?;
        }
        self.out.flush()?;
        Ok(())
    }

    pub fn rejected(&mut self, line: &str, error: &PipelineError) -> Result<(), SessionLogError> {
        self.record(&LogRecord::Rejected(RejectedRecord {
            line: line.trim().to_owned(),
            code: error.code().to_owned(),
            message: error.to_string(),
        }))?;
        self.out.flush()?;
        Ok(())
    }

    pub fn finish(mut self, summary: &SessionSummary) -> Result<PathBuf, SessionLogError> {
        self.record(&LogRecord::Summary(summary.clone()))?;
        self.out.flush()?;
        Ok(self.path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub header: LogHeader,
    pub entries: Vec<LogEntry>,
}

impl SessionLog {
    pub fn read(path: &Path) -> Result<Self, SessionLogError> {
        Self::parse(BufReader::new(fs::File::open(path)?))
    }

    pub fn parse(reader: impl BufRead) -> Result<Self, SessionLogError> {
        let mut header = None;
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let format_err = |e: serde_json::Error| SessionLogError::Format {
                line: i + 1,
                message: e.to_string(),
            };
            let value: serde_json::Value = serde_json::from_str(trimmed).map_err(format_err)?;
            if value.get("type").is_none() {
                entries.push(LogEntry::Frame(trimmed.to_owned()));
                continue;
            }
            match serde_json::from_value(value).map_err(format_err)? {
                LogRecord::Header(h) if header.is_none() && entries.is_empty() => header = Some(h),
                LogRecord::Header(_) => {
                    return Err(SessionLogError::Format {
                        line: i + 1,
                        message: "header must be the first line".into(),
                    })
                }
                record => entries.push(LogEntry::Record(record)),
            }
        }
        let header = header.ok_or(SessionLogError::MissingHeader)?;
        if header.format != LOG_FORMAT || header.version != LOG_VERSION {
            return Err(SessionLogError::Format {
                line: 1,
                message: format!("unsupported log {} v{}", header.format, header.version),
            });
        }
        Ok(Self { header, entries })
    }

    pub fn frame_lines(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Frame(l) => Some(l.as_str()),
            LogEntry::Record(_) => None,
        })
    }

    pub fn records(&self) -> impl Iterator<Item = &LogRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Record(r) => Some(r),
            LogEntry::Frame(_) => None,
        })
    }

    pub fn evaluations(&self) -> impl Iterator<Item = &EvaluationMsg> {
        self.records().filter_map(|r| match r {
            LogRecord::Evaluation(e) => Some(e),
            _ => None,
        })
    }

    pub fn summary(&self) -> Option<&SessionSummary> {
        self.records().find_map(|r| match r {
            LogRecord::Summary(s) => Some(s),
            _ => None,
        })
    }

    /// Summary recomputed from the recorded evaluation and rejected records.
    pub fn recorded_summary(&self, joint_names: &[String]) -> SessionSummary {
        let mut b = SummaryBuilder::new(joint_names.iter().map(String::as_str));
        for r in self.records() {
            match r {
                LogRecord::Evaluation(e) => b.add(e),
                LogRecord::Rejected(_) => b.reject(),
                _ => {}
            }
        }
        b.finish(&self.header.session_id, &self.header.pose_id)
    }
}

/// Result of feeding a log's frames back through the offline pipeline.
#[derive(Debug, Clone)]
pub struct Replay {
    pub outputs: Vec<FrameOutput>,
    /// Summary of the replayed evaluations.
    pub summary: SessionSummary,
    /// Frame ids whose replayed evaluation differs from the recorded one.
    pub evaluation_mismatches: Vec<u64>,
    /// Whether the replayed feedback equals the recorded feedback.
    pub feedback_matches: bool,
    /// `None` when no classifier was available for the replay.
    pub classifications_match: Option<bool>,
}

impl Replay {
    pub fn reproduces_log(&self) -> bool {
        self.evaluation_mismatches.is_empty() && self.feedback_matches && self.classifications_match != Some(false)
    }
}

/// Replays `log` against `pose_id` (default: the logged target pose).
pub fn replay(log: &SessionLog, resources: &Resources, pose_id: Option<&str>) -> Result<Replay, SessionLogError> {
    let pose_id = pose_id.unwrap_or(&log.header.pose_id);
    let mut pipeline = Pipeline::new(resources, pose_id, log.header.variant, log.header.config)?;
    let names = pipeline.target().joint_names.clone();
    let mut builder = SummaryBuilder::new(names.iter().map(String::as_str));
    let mut outputs = Vec::new();
    for line in log.frame_lines() {
        match pipeline.process_line(line) {
            Ok(out) => {
                builder.add(&out.evaluation);
                outputs.push(out);
            }
            // a logged frame line always parsed live; only a changed config
            // could reject it now
            Err(_) => builder.reject(),
        }
    }
    for r in log.records() {
        if let LogRecord::Rejected(_) = r {
            builder.reject();
        }
    }

    let recorded: Vec<&EvaluationMsg> = log.evaluations().collect();
    let mut evaluation_mismatches: Vec<u64> = outputs
        .iter()
        .zip(&recorded)
        .filter(|(o, r)| o.evaluation != ***r)
        .map(|(o, _)| o.evaluation.frame_id)
        .collect();
    if recorded.len() != outputs.len() {
        evaluation_mismatches.extend(outputs.iter().skip(recorded.len()).map(|o| o.evaluation.frame_id));
        evaluation_mismatches.extend(recorded.iter().skip(outputs.len()).map(|r| r.frame_id));
    }
    let recorded_feedback: Vec<&FeedbackMsg> = log
        .records()
        .filter_map(|r| match r {
            LogRecord::Feedback(f) => Some(f),
            _ => None,
        })
        .collect();
    let replayed_feedback: Vec<&FeedbackMsg> = outputs.iter().flat_map(|o| &o.feedback).collect();
    let classifications_match = pipeline.has_classifier().then(|| {
        let recorded: Vec<&ClassificationMsg> = log
            .records()
            .filter_map(|r| match r {
                LogRecord::Classification(c) => Some(c),
                _ => None,
            })
            .collect();
        let replayed: Vec<&ClassificationMsg> = outputs.iter().filter_map(|o| o.classification.as_ref()).collect();
        recorded == replayed
    });
    let feedback_matches = recorded_feedback == replayed_feedback;
    Ok(Replay {
        summary: builder.finish(&log.header.session_id, pose_id),
        outputs,
        evaluation_mismatches,
        feedback_matches,
        classifications_match,
    })
}
