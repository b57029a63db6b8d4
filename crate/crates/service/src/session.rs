use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use asana_core::model::ModelVariant;
use asana_core::pipeline::{Pipeline, PipelineConfig, PipelineError, Resources};
use asana_core::session_log::{LogHeader, SessionLog, SessionLogWriter, SessionSummary};
use log::{debug, info};

use crate::protocol::{PoseInfo, ServerMsg, Started};
use crate::ServiceError;

struct Session {
    joint_names: Vec<String>,
    pipeline: Pipeline,
    /// Taken when the session ends.
    log: Option<SessionLogWriter>,
}

/// Owns every live session. Shared data is read-only; each session has its
/// own lock, so sessions never wait on each other except while a session is
/// being created or removed.
pub struct SessionManager {
    resources: Arc<Resources>,
    config: PipelineConfig,
    log_dir: PathBuf,
    max_sessions: usize,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionManager {
    pub fn new(resources: Arc<Resources>, config: PipelineConfig, log_dir: &Path, max_sessions: usize) -> Self {
        Self {
            resources,
            config,
            log_dir: log_dir.to_owned(),
            max_sessions,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn resources(&self) -> &Resources {
        &self.resources
    }

    pub fn log_dir(&self) -> &Path {
        &self.log_dir
    }

    pub fn active_sessions(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    pub fn poses(&self) -> Vec<PoseInfo> {
        self.resources
            .library
            .poses()
            .iter()
            .map(|p| PoseInfo {
                pose_id: p.pose_id.clone(),
                display_name: p.display_name.clone(),
                joints: p.joint_names.clone(),
            })
            .collect()
    }

    pub fn start(&self, pose_id: &str, variant: ModelVariant) -> Result<Started, ServiceError> {
        let mut sessions = self.sessions.lock().expect("session map poisoned");
        if sessions.len() >= self.max_sessions {
            return Err(ServiceError::CapacityExceeded(self.max_sessions));
        }
        let pipeline = Pipeline::new(&self.resources, pose_id, variant, self.config).map_err(|e| match e {
            PipelineError::UnknownPose(p) => ServiceError::UnknownPose(p),
            e => e.into(),
        })?;
        let session_id = uuid::Uuid::new_v4().simple().to_string();
        let version = &self.resources.table.version;
        let header = LogHeader::new(&session_id, pose_id, variant, version, self.config);
        let log = SessionLogWriter::create(&self.log_dir, &header)?;
        let target = pipeline.target();
        let started = Started {
            session_id: session_id.clone(),
            pose_id: pose_id.to_owned(),
            display_name: target.display_name.clone(),
            angle_table_version: version.clone(),
            variant,
            joints: target.joint_names.clone(),
            window: self.config.window,
            classifier: pipeline.has_classifier(),
        };
        let session = Session {
            joint_names: target.joint_names.clone(),
            pipeline,
            log: Some(log),
        };
        sessions.insert(session_id.clone(), Arc::new(Mutex::new(session)));
        info!("session {session_id} started for {pose_id} ({variant})");
        Ok(started)
    }

    fn session(&self, session_id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_owned()))
    }

    /// Runs one frame record through the session's pipeline and appends it
    /// to the log before returning the messages to send. A rejected record
    /// is logged and returned as [`ServiceError::Frame`]; the session
    /// carries on.
    pub fn handle_frame(&self, session_id: &str, record: &str) -> Result<Vec<ServerMsg>, ServiceError> {
        let session = self.session(session_id)?;
        let mut guard = session.lock().expect("session poisoned");
        let s = &mut *guard;
        let log = s
            .log
            .as_mut()
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_owned()))?;
        match s.pipeline.process_line(record) {
            Ok(out) => {
                log.frame(record, &out)?;
                Ok(out.records().into_iter().map(ServerMsg::from).collect())
            }
            Err(e) => {
                debug!("session {session_id}: rejected frame: {e}");
                log.rejected(record, &e)?;
                Err(ServiceError::Frame(e))
            }
        }
    }

    /// Closes the session, finalizing its log. The summary is recomputed
    /// from the records on disk.
    pub fn end(&self, session_id: &str) -> Result<SessionSummary, ServiceError> {
        let session = self
            .sessions
            .lock()
            .expect("session map poisoned")
            .remove(session_id)
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_owned()))?;
        // waits for a frame of this session that is still in flight
        let mut session = session.lock().expect("session poisoned");
        let writer = session
            .log
            .take()
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_owned()))?;
        let summary = SessionLog::read(writer.path())?.recorded_summary(&session.joint_names);
        let path = writer.finish(&summary)?;
        info!(
            "session {session_id} ended: {} frames, {} drops, log {}",
            summary.frames,
            summary.drops,
            path.display()
        );
        Ok(summary)
    }
}
