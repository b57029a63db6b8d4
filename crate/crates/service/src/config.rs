use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use asana_core::biomech::AngleTable;
use asana_core::evaluator::PoseLibrary;
use asana_core::feedback::TemplateTable;
use asana_core::ingest::IngestConfig;
use asana_core::model::ModelFile;
use asana_core::pipeline::{PipelineConfig, Resources};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Server settings, usually read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    /// HTTP listener: WebSocket sessions on `/ws` and the pose list on
    /// `/api/poses`.
    pub listen: String,
    /// Optional raw TCP listener speaking newline-delimited JSON.
    pub tcp_listen: Option<String>,
    pub model_path: Option<PathBuf>,
    pub pose_path: Option<PathBuf>,
    pub angle_table_path: Option<PathBuf>,
    pub templates_path: Option<PathBuf>,
    pub alpha: f64,
    pub min_confidence: f64,
    pub max_gap: u32,
    pub cooldown_ms: i64,
    /// Classification window T, in frames.
    pub window: usize,
    pub stride: usize,
    pub log_dir: PathBuf,
    pub max_sessions: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            listen: "127.0.0.1:8765".into(),
            tcp_listen: None,
            model_path: None,
            pose_path: None,
            angle_table_path: None,
            templates_path: None,
            alpha: p.ingest.alpha,
            min_confidence: p.ingest.min_confidence,
            max_gap: p.ingest.max_gap,
            cooldown_ms: p.cooldown_ms,
            window: p.window,
            stride: p.stride,
            log_dir: PathBuf::from("sessions"),
            max_sessions: 8,
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            ingest: IngestConfig {
                min_confidence: self.min_confidence,
                alpha: self.alpha,
                max_gap: self.max_gap,
            },
            window: self.window,
            stride: self.stride,
            cooldown_ms: self.cooldown_ms,
        }
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ServiceError> {
        parse_addr(&self.listen)
    }

    pub fn tcp_addr(&self) -> Result<Option<SocketAddr>, ServiceError> {
        self.tcp_listen.as_deref().map(parse_addr).transpose()
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.pipeline_config().validate()?;
        self.listen_addr()?;
        self.tcp_addr()?;
        if self.max_sessions == 0 {
            return Err(ServiceError::Config("max_sessions must be positive".into()));
        }
        Ok(())
    }

    /// Reads every configured data file. Missing paths fall back to the
    /// shipped tables; a configured path that cannot be read is an error.
    pub fn load_resources(&self) -> Result<Resources, ServiceError> {
        self.validate()?;
        let table = match &self.angle_table_path {
            Some(p) => AngleTable::load(p).map_err(|e| file_error(p, e))?,
            None => AngleTable::default(),
        };
        let library = match &self.pose_path {
            Some(p) => PoseLibrary::load(p, &table).map_err(|e| file_error(p, e))?,
            None => PoseLibrary::builtin(),
        };
        let templates = match &self.templates_path {
            Some(p) => TemplateTable::load(p).map_err(|e| file_error(p, e))?,
            None => TemplateTable::default(),
        };
        let resources = Resources {
            table,
            library,
            templates,
            models: None,
        };
        let Some(path) = &self.model_path else {
            return Ok(resources);
        };
        let file = ModelFile::load(path).map_err(|e| file_error(path, e))?;
        if file.meta.window != self.window {
            return Err(ServiceError::Config(format!(
                "model {} was trained on {}-frame windows, server window is {}",
                path.display(),
                file.meta.window,
                self.window
            )));
        }
        Ok(resources.with_model(file)?)
    }
}

fn parse_addr(s: &str) -> Result<SocketAddr, ServiceError> {
    s.parse()
        .map_err(|e| ServiceError::Config(format!("bad listen address {s:?}: {e}")))
}

fn file_error(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Config(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_pipeline_defaults() {
        let c = ServerConfig::default();
        assert_eq!(c.pipeline_config(), PipelineConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let c = ServerConfig::from_toml("listen = \"0.0.0.0:9000\"\nwindow = 10\n").unwrap();
        assert_eq!(c.window, 10);
        assert_eq!(c.max_sessions, 8);
        assert_eq!(c.listen_addr().unwrap().port(), 9000);
    }

    #[test]
    fn rejects_short_window_and_unknown_keys() {
        let c = ServerConfig {
            window: 2,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(ServerConfig::from_toml("windw = 30").is_err());
    }

    #[test]
    fn unreadable_pose_file_fails_at_startup() {
        let c = ServerConfig {
            pose_path: Some("/nonexistent/poses.toml".into()),
            ..Default::default()
        };
        assert!(matches!(c.load_resources(), Err(ServiceError::Config(_))));
    }
}
