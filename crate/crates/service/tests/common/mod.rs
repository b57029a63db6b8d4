#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use asana_core::model::{AnyModel, ModelDims, ModelFile, ModelMeta, ModelParams};
use asana_core::pipeline::{PipelineConfig, Resources};
use asana_core::synth::{pose_stream, SkeletonSpec};
use asana_service::SessionManager;

/// Built-in tables plus an untrained classifier over the built-in poses.
pub fn resources() -> Resources {
    let base = Resources::builtin();
    let labels: Vec<String> = base.library.poses().iter().map(|p| p.pose_id.clone()).collect();
    let dims = ModelDims::new(base.table.len(), 4, 6, labels.len());
    let meta = ModelMeta {
        class_labels: labels,
        angle_table_version: base.table.version.clone(),
        window: PipelineConfig::default().window,
        seed: Some(7),
        pruned_fraction: None,
    };
    let file = ModelFile::new(meta, AnyModel::Float(ModelParams::init_seeded(dims, 7)));
    base.with_model(file).unwrap()
}

pub fn manager(log_dir: &Path, max_sessions: usize) -> Arc<SessionManager> {
    Arc::new(SessionManager::new(
        Arc::new(resources()),
        PipelineConfig::default(),
        log_dir,
        max_sessions,
    ))
}

/// Frame records of a skeleton holding `pose_id` exactly.
pub fn perfect_lines(pose_id: &str, count: usize) -> Vec<String> {
    let res = Resources::builtin();
    let spec = SkeletonSpec::from_pose(res.library.get(pose_id).unwrap()).unwrap();
    pose_stream(&spec, count, (180.0, [320.0, 240.0]))
        .unwrap()
        .iter()
        .map(|f| f.to_line())
        .collect()
}

/// Frame records of `pose_id` with one joint held `offset_deg` away.
pub fn bent_lines(pose_id: &str, joint: usize, offset_deg: f64, count: usize) -> Vec<String> {
    let res = Resources::builtin();
    let mut spec = SkeletonSpec::from_pose(res.library.get(pose_id).unwrap()).unwrap();
    spec.angles[joint] -= offset_deg;
    pose_stream(&spec, count, (180.0, [320.0, 240.0]))
        .unwrap()
        .iter()
        .map(|f| f.to_line())
        .collect()
}
