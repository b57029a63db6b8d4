//! Deterministic synthetic skeletons and datasets.
//!
//! Skeletons are built by 2-D forward kinematics in image coordinates
//! (y grows downward, the subject's left side at +x) so that the joint
//! angles measured on the result are exactly the assigned ones.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biomech::{extract_features, AngleTable, FeatureVector, NUM_ANGLES};
use crate::evaluator::{PoseLibrary, ReferencePose};
use crate::ingest::{coco, normalize, parse_frame, IngestError, Keypoint, KeypointFrame, NUM_KEYPOINTS};
use crate::model::{Dataset, SequenceSample};

/// Angle vector every synthetic sequence starts from.
pub const NEUTRAL_ANGLES: [f64; NUM_ANGLES] = [170.0, 170.0, 30.0, 30.0, 170.0, 170.0, 170.0, 170.0];

/// Milliseconds between consecutive synthetic frames (about 30 FPS).
pub const FRAME_INTERVAL_MS: i64 = 33;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid skeleton spec: {0}")]
    InvalidSpec(String),
    #[error("requested {requested} classes but the library has {available} poses")]
    TooManyClasses { requested: usize, available: usize },
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error("frame {line}: {source}")]
    Frame { line: usize, source: IngestError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimbLengths {
    pub torso: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
    pub shoulder_half_width: f64,
    pub hip_half_width: f64,
}

impl Default for LimbLengths {
    fn default() -> Self {
        Self {
            torso: 1.0,
            upper_arm: 0.45,
            forearm: 0.4,
            thigh: 0.55,
            shin: 0.5,
            shoulder_half_width: 0.35,
            hip_half_width: 0.25,
        }
    }
}

impl LimbLengths {
    fn all(&self) -> [f64; 7] {
        [
            self.torso,
            self.upper_arm,
            self.forearm,
            self.thigh,
            self.shin,
            self.shoulder_half_width,
            self.hip_half_width,
        ]
    }
}

/// Joint angles (in angle-table order) plus body proportions and a global
/// rotation about the hip midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub lengths: LimbLengths,
    pub angles: [f64; NUM_ANGLES],
    pub orientation_deg: f64,
}

impl SkeletonSpec {
    pub fn new(angles: [f64; NUM_ANGLES]) -> Self {
        Self {
            lengths: LimbLengths::default(),
            angles,
            orientation_deg: 0.0,
        }
    }

    pub fn from_pose(pose: &ReferencePose) -> Result<Self, SynthError> {
        let angles: [f64; NUM_ANGLES] = pose
            .ref_angles()
            .try_into()
            .map_err(|v: Vec<f64>| SynthError::InvalidSpec(format!("pose has {} angles", v.len())))?;
        Ok(Self::new(angles))
    }

    pub fn rotated(mut self, degrees: f64) -> Self {
        self.orientation_deg += degrees;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if let Some(l) = self.lengths.all().iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(SynthError::InvalidSpec(format!("limb length {l} must be positive")));
        }
        if let Some(a) = self.angles.iter().find(|a| !(0.0..=180.0).contains(*a)) {
            return Err(SynthError::InvalidSpec(format!("angle {a} outside [0,180]")));
        }
        if !self.orientation_deg.is_finite() {
            return Err(SynthError::InvalidSpec("orientation must be finite".into()));
        }
        Ok(())
    }
}

type Vec2 = [f64; 2];

fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

fn unit(a: Vec2) -> Vec2 {
    scale(a, 1.0 / a[0].hypot(a[1]))
}

fn rotate(v: Vec2, degrees: f64) -> Vec2 {
    let (s, c) = degrees.to_radians().sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c]
}

/// Next point of a chain: from `joint`, turn `angle` degrees away from the
/// direction pointing back along the previous segment.
fn chain(joint: Vec2, back: Vec2, angle: f64, sign: f64, length: f64) -> Vec2 {
    add(joint, scale(rotate(unit(sub(back, joint)), sign * angle), length))
}

/// Builds a frame whose hip midpoint is the origin, with confidence 1
/// everywhere.
pub fn skeleton_to_frame(spec: &SkeletonSpec) -> Result<KeypointFrame, SynthError> {
    spec.validate()?;
    let l = &spec.lengths;
    let [l_elbow, r_elbow, l_shoulder, r_shoulder, l_hip, r_hip, l_knee, r_knee] = spec.angles;
    let mut p = [[0.0; 2]; NUM_KEYPOINTS];

    p[coco::LEFT_HIP] = [l.hip_half_width, 0.0];
    p[coco::RIGHT_HIP] = [-l.hip_half_width, 0.0];
    p[coco::LEFT_SHOULDER] = [l.shoulder_half_width, -l.torso];
    p[coco::RIGHT_SHOULDER] = [-l.shoulder_half_width, -l.torso];

    // arms swing outward from the torso, legs likewise
    for (side, shoulder, elbow, wrist, hip, a_shoulder, a_elbow) in [
        (1.0, coco::LEFT_SHOULDER, coco::LEFT_ELBOW, coco::LEFT_WRIST, coco::LEFT_HIP, l_shoulder, l_elbow),
        (-1.0, coco::RIGHT_SHOULDER, coco::RIGHT_ELBOW, coco::RIGHT_WRIST, coco::RIGHT_HIP, r_shoulder, r_elbow),
    ] {
        let sign = -side;
        p[elbow] = chain(p[shoulder], p[hip], a_shoulder, sign, l.upper_arm);
        p[wrist] = chain(p[elbow], p[shoulder], a_elbow, sign, l.forearm);
    }
    for (side, hip, knee, ankle, shoulder, a_hip, a_knee) in [
        (1.0, coco::LEFT_HIP, coco::LEFT_KNEE, coco::LEFT_ANKLE, coco::LEFT_SHOULDER, l_hip, l_knee),
        (-1.0, coco::RIGHT_HIP, coco::RIGHT_KNEE, coco::RIGHT_ANKLE, coco::RIGHT_SHOULDER, r_hip, r_knee),
    ] {
        p[knee] = chain(p[hip], p[shoulder], a_hip, side, l.thigh);
        p[ankle] = chain(p[knee], p[hip], a_knee, side, l.shin);
    }

    let neck = [0.0, -l.torso];
    let head = |dx: f64, dy: f64| add(neck, scale([dx, dy], l.torso));
    p[coco::NOSE] = head(0.0, -0.35);
    p[coco::LEFT_EYE] = head(0.05, -0.4);
    p[coco::RIGHT_EYE] = head(-0.05, -0.4);
    p[coco::LEFT_EAR] = head(0.1, -0.37);
    p[coco::RIGHT_EAR] = head(-0.1, -0.37);

    let mut keypoints = [Keypoint::default(); NUM_KEYPOINTS];
    for (k, pos) in keypoints.iter_mut().zip(p) {
        let [x, y] = rotate(pos, spec.orientation_deg);
        *k = Keypoint::new(x, y, 1.0);
    }
    Ok(KeypointFrame {
        timestamp_ms: 0,
        frame_id: 0,
        keypoints,
    })
}

/// Applies `scale` then `offset` to every keypoint, as a camera would.
pub fn place(frame: &KeypointFrame, scale_by: f64, offset: [f64; 2]) -> KeypointFrame {
    let mut out = frame.clone();
    for k in out.keypoints.iter_mut() {
        k.x = k.x * scale_by + offset[0];
        k.y = k.y * scale_by + offset[1];
    }
    out
}

/// Sets the confidence of the listed keypoints.
pub fn inject_mask(frame: &mut KeypointFrame, keypoints: &[usize], confidence: f64) {
    for &i in keypoints {
        frame.keypoints[i].confidence = confidence;
    }
}

/// `count` identical frames of `spec`, as a camera at a fixed placement
/// would report them.
pub fn pose_stream(spec: &SkeletonSpec, count: usize, placement: (f64, [f64; 2])) -> Result<Vec<KeypointFrame>, SynthError> {
    let base = place(&skeleton_to_frame(spec)?, placement.0, placement.1);
    Ok((0..count)
        .map(|i| {
            let mut f = base.clone();
            f.frame_id = i as u64;
            f.timestamp_ms = i as i64 * FRAME_INTERVAL_MS;
            f
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Frames per sequence.
    pub window: usize,
    pub noise_deg: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            samples_per_class: 100,
            window: 30,
            noise_deg: 3.0,
            seed: 42,
        }
    }
}

/// Sequences easing linearly from [`NEUTRAL_ANGLES`] to each class's
/// reference angles, with Gaussian angle noise clamped to [0, 180].
///
/// Classes are the first `num_classes` poses of `library`; samples are
/// grouped by class. Sample `i` draws its noise from its own ChaCha stream,
/// so any sample can be regenerated alone.
pub fn make_dataset(config: &DatasetConfig, library: &PoseLibrary) -> Result<Dataset, SynthError> {
    if config.num_classes > library.len() {
        return Err(SynthError::TooManyClasses {
            requested: config.num_classes,
            available: library.len(),
        });
    }
    if config.window < 3 {
        return Err(SynthError::InvalidConfig(format!("window {} is shorter than 3", config.window)));
    }
    let noise = Normal::new(0.0, config.noise_deg)
        .map_err(|e| SynthError::InvalidConfig(format!("noise {}: {e}", config.noise_deg)))?;
    let poses = &library.poses()[..config.num_classes];
    let last = (config.window - 1) as f64;
    let mut samples = Vec::with_capacity(config.num_classes * config.samples_per_class);
    for (label, pose) in poses.iter().enumerate() {
        let target = pose.ref_angles();
        if target.len() != NUM_ANGLES {
            return Err(SynthError::InvalidSpec(format!("{} has {} angles", pose.pose_id, target.len())));
        }
        for _ in 0..config.samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(samples.len() as u64);
            let features = (0..config.window)
                .map(|t| {
                    let s = t as f64 / last;
                    let angles = NEUTRAL_ANGLES
                        .iter()
                        .zip(&target)
                        .map(|(&n, &r)| ((1.0 - s) * n + s * r + noise.sample(&mut rng)).clamp(0.0, 180.0))
                        .collect();
                    FeatureVector::from_angles(angles, t as i64 * FRAME_INTERVAL_MS)
                })
                .collect();
            samples.push(SequenceSample { features, label });
        }
    }
    Ok(Dataset {
        class_labels: poses.iter().map(|p| p.pose_id.clone()).collect(),
        samples,
    })
}

/// Sidecar describing how a `.kpjsonl` dataset file splits into samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSidecar {
    pub class_labels: Vec<String>,
    pub angle_table_version: String,
    pub window: usize,
    /// Label of each consecutive block of `window` frames.
    pub labels: Vec<usize>,
}

/// Path of the sidecar that accompanies `frames_path`.
pub fn sidecar_path(frames_path: &Path) -> std::path::PathBuf {
    frames_path.with_extension("labels.json")
}

/// Writes every sample as `window` skeleton frames, one record per line,
/// plus the label sidecar next to it.
pub fn export_dataset(dataset: &Dataset, table: &AngleTable, frames_path: &Path) -> Result<(), SynthError> {
    let window = dataset.samples.first().map_or(0, |s| s.features.len());
    if dataset.samples.iter().any(|s| s.features.len() != window) {
        return Err(SynthError::InvalidConfig("samples differ in length".into()));
    }
    let mut out = BufWriter::new(fs::File::create(frames_path)?);
    let mut frame_id = 0u64;
    for sample in &dataset.samples {
        for fv in &sample.features {
            let angles: [f64; NUM_ANGLES] = fv
                .angles
                .clone()
                .try_into()
                .map_err(|_| SynthError::InvalidSpec("expected 8 angles".into()))?;
            let mut frame = skeleton_to_frame(&SkeletonSpec::new(angles))?;
            frame.frame_id = frame_id;
            frame.timestamp_ms = frame_id as i64 * FRAME_INTERVAL_MS;
            writeln!(out, "{}", frame.to_line())?;
            frame_id += 1;
        }
    }
    out.flush()?;
    let sidecar = LabelSidecar {
        class_labels: dataset.class_labels.clone(),
        angle_table_version: table.version.clone(),
        window,
        labels: dataset.samples.iter().map(|s| s.label).collect(),
    };
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| SynthError::Format(e.to_string()))?;
    fs::write(sidecar_path(frames_path), text)?;
    Ok(())
}

/// Reads a dataset written by [`export_dataset`], recomputing features
/// from the keypoints.
pub fn read_dataset(frames_path: &Path, table: &AngleTable, min_confidence: f64) -> Result<Dataset, SynthError> {
    let sidecar: LabelSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(frames_path))?)
        .map_err(|e| SynthError::Format(e.to_string()))?;
    if sidecar.angle_table_version != table.version {
        return Err(SynthError::Format(format!(
            "dataset uses angle table {}, expected {}",
            sidecar.angle_table_version, table.version
        )));
    }
    if let Some(&bad) = sidecar.labels.iter().find(|&&l| l >= sidecar.class_labels.len()) {
        return Err(SynthError::Format(format!("label {bad} has no class name")));
    }
    let reader = BufReader::new(fs::File::open(frames_path)?);
    let mut features = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = parse_frame(&line).map_err(|source| SynthError::Frame { line: i + 1, source })?;
        let norm = normalize(&frame, min_confidence).map_err(|source| SynthError::Frame { line: i + 1, source })?;
        features.push(extract_features(&norm, &table.angles, min_confidence));
    }
    if sidecar.window == 0 || features.len() != sidecar.window * sidecar.labels.len() {
        return Err(SynthError::Format(format!(
            "{} frames do not split into {} samples of {}",
            features.len(),
            sidecar.labels.len(),
            sidecar.window
        )));
    }
    let mut frames = features.into_iter();
    let samples = sidecar
        .labels
        .iter()
        .map(|&label| SequenceSample {
            features: frames.by_ref().take(sidecar.window).collect(),
            label,
        })
        .collect();
    Ok(Dataset {
        class_labels: sidecar.class_labels,
        samples,
    })
}
