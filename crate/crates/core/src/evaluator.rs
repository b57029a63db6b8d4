//! Posture evaluation against reference poses: per-joint deviation, the
//! overall score and correctness flags.
//!
//! For a frame with `N` evaluable (unmasked) joints the score is
//!
//! ```text
//! score = 1/N * sum_i clamp(1 - |theta_i - ref_i| / theta_max_i, 0, 1)
//! ```
//!
//! and joint `i` is flagged when `|theta_i - ref_i| > flag_threshold_i`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biomech::{AngleTable, FeatureVector};

const DEFAULT_LIBRARY: &str = include_str!("../data/poses.toml");

pub const DEFAULT_THETA_MAX_DEG: f64 = 45.0;
pub const DEFAULT_FLAG_THRESHOLD_DEG: f64 = 15.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("feature vector has {got} angles, reference pose expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no evaluable joints (all masked)")]
    NoEvaluableJoints,
    #[error("invalid pose library: {0}")]
    InvalidLibrary(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointReference {
    pub ref_deg: f64,
    pub theta_max_deg: f64,
    pub flag_threshold_deg: f64,
}

/// Ideal angles of one asana, in angle-table order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferencePose {
    pub pose_id: String,
    pub display_name: String,
    pub joint_names: Vec<String>,
    pub joints: Vec<JointReference>,
}

impl ReferencePose {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn ref_angles(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.ref_deg).collect()
    }

    /// Same pose with every joint's flag threshold replaced.
    pub fn with_flag_threshold(&self, tau: f64) -> Self {
        let mut out = self.clone();
        out.joints.iter_mut().for_each(|j| j.flag_threshold_deg = tau);
        out
    }

    fn validate(&self) -> Result<(), EvalError> {
        for (name, j) in self.joint_names.iter().zip(&self.joints) {
            if !(0.0..=180.0).contains(&j.ref_deg) {
                return Err(EvalError::InvalidLibrary(format!(
                    "{}.{name}: ref_deg {} outside [0,180]",
                    self.pose_id, j.ref_deg
                )));
            }
            if !(j.theta_max_deg > 0.0 && j.flag_threshold_deg > 0.0) {
                return Err(EvalError::InvalidLibrary(format!(
                    "{}.{name}: thresholds must be positive",
                    self.pose_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointEntry {
    ref_deg: f64,
    theta_max_deg: Option<f64>,
    flag_threshold_deg: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseEntry {
    pose_id: String,
    display_name: String,
    joints: BTreeMap<String, JointEntry>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Defaults {
    theta_max_deg: Option<f64>,
    flag_threshold_deg: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryFile {
    angle_table_version: String,
    #[serde(default)]
    defaults: Defaults,
    #[serde(rename = "pose")]
    poses: Vec<PoseEntry>,
}

/// Reference poses loaded from a pose file; immutable after load.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseLibrary {
    pub angle_table_version: String,
    poses: Vec<ReferencePose>,
}

impl PoseLibrary {
    /// The shipped five-pose starter library.
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_LIBRARY, &AngleTable::default()).expect("shipped poses are valid")
    }

    pub fn load(path: &Path, table: &AngleTable) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::InvalidLibrary(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, table)
    }

    pub fn from_toml(text: &str, table: &AngleTable) -> Result<Self, EvalError> {
        let file: LibraryFile =
            toml::from_str(text).map_err(|e| EvalError::InvalidLibrary(e.to_string()))?;
        if file.angle_table_version != table.version {
            return Err(EvalError::InvalidLibrary(format!(
                "pose file targets angle table {}, loaded table is {}",
                file.angle_table_version, table.version
            )));
        }
        let theta_max = file.defaults.theta_max_deg.unwrap_or(DEFAULT_THETA_MAX_DEG);
        let tau = file.defaults.flag_threshold_deg.unwrap_or(DEFAULT_FLAG_THRESHOLD_DEG);
        let mut poses: Vec<ReferencePose> = Vec::with_capacity(file.poses.len());
        for entry in file.poses {
            if poses.iter().any(|p| p.pose_id == entry.pose_id) {
                return Err(EvalError::InvalidLibrary(format!("duplicate pose {}", entry.pose_id)));
            }
            if let Some(extra) = entry.joints.keys().find(|k| table.index_of(k).is_none()) {
                return Err(EvalError::InvalidLibrary(format!(
                    "{}: unknown angle {extra}",
                    entry.pose_id
                )));
            }
            let joints = table
                .names()
                .map(|name| {
                    let j = entry.joints.get(name).ok_or_else(|| {
                        EvalError::InvalidLibrary(format!("{}: missing angle {name}", entry.pose_id))
                    })?;
                    Ok(JointReference {
                        ref_deg: j.ref_deg,
                        theta_max_deg: j.theta_max_deg.unwrap_or(theta_max),
                        flag_threshold_deg: j.flag_threshold_deg.unwrap_or(tau),
                    })
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            let pose = ReferencePose {
                pose_id: entry.pose_id,
                display_name: entry.display_name,
                joint_names: table.names().map(str::to_owned).collect(),
                joints,
            };
            pose.validate()?;
            poses.push(pose);
        }
        if poses.is_empty() {
            return Err(EvalError::InvalidLibrary("no poses defined".into()));
        }
        Ok(Self {
            angle_table_version: file.angle_table_version,
            poses,
        })
    }

    pub fn get(&self, pose_id: &str) -> Option<&ReferencePose> {
        self.poses.iter().find(|p| p.pose_id == pose_id)
    }

    pub fn poses(&self) -> &[ReferencePose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointDeviation {
    /// Measured minus reference, degrees. Meaningless when masked.
    pub signed_deg: f64,
    pub masked: bool,
}

impl JointDeviation {
    pub fn abs_deg(&self) -> f64 {
        self.signed_deg.abs()
    }
}

pub fn deviations(
    features: &FeatureVector,
    reference: &ReferencePose,
) -> Result<Vec<JointDeviation>, EvalError> {
    if features.len() != reference.len() || features.mask.len() != reference.len() {
        return Err(EvalError::LengthMismatch {
            expected: reference.len(),
            got: features.len(),
        });
    }
    Ok(features
        .angles
        .iter()
        .zip(&features.mask)
        .zip(&reference.joints)
        .map(|((&theta, &valid), j)| JointDeviation {
            signed_deg: if valid { theta - j.ref_deg } else { 0.0 },
            masked: !valid,
        })
        .collect())
}

fn mean_term(
    devs: &[JointDeviation],
    reference: &ReferencePose,
    term: impl Fn(f64) -> f64,
) -> Result<f64, EvalError> {
    let (sum, n) = devs
        .iter()
        .zip(&reference.joints)
        .filter(|(d, _)| !d.masked)
        .fold((0.0, 0usize), |(sum, n), (d, j)| {
            (sum + term(1.0 - d.abs_deg() / j.theta_max_deg), n + 1)
        });
    if n == 0 {
        return Err(EvalError::NoEvaluableJoints);
    }
    Ok(sum / n as f64)
}

/// Mean per-joint term over unmasked joints, each term clamped to [0, 1].
pub fn score(devs: &[JointDeviation], reference: &ReferencePose) -> Result<f64, EvalError> {
    mean_term(devs, reference, |t| t.clamp(0.0, 1.0))
}

/// Same mean without clamping; negative once deviations exceed theta_max.
pub fn score_unclamped(devs: &[JointDeviation], reference: &ReferencePose) -> Result<f64, EvalError> {
    mean_term(devs, reference, |t| t)
}

pub fn flag_joints(devs: &[JointDeviation], reference: &ReferencePose) -> Vec<bool> {
    devs.iter()
        .zip(&reference.joints)
        .map(|(d, j)| !d.masked && d.abs_deg() > j.flag_threshold_deg)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub name: String,
    pub deviation_deg: Option<f64>,
    pub signed_deviation_deg: Option<f64>,
    pub flagged: bool,
    pub masked: bool,
    pub flag_threshold_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostureReport {
    pub pose_id: String,
    pub score: f64,
    /// Score without per-joint clamping, for diagnostics.
    pub raw_score: f64,
    pub joints: Vec<JointReport>,
    pub evaluated_joint_count: usize,
    pub timestamp_ms: i64,
}

impl PostureReport {
    pub fn flagged(&self) -> impl Iterator<Item = (usize, &JointReport)> {
        self.joints.iter().enumerate().filter(|(_, j)| j.flagged)
    }

    pub fn flag_count(&self) -> usize {
        self.joints.iter().filter(|j| j.flagged).count()
    }
}

pub fn evaluate_posture(
    features: &FeatureVector,
    reference: &ReferencePose,
) -> Result<PostureReport, EvalError> {
    let devs = deviations(features, reference)?;
    let score_value = score(&devs, reference)?;
    let raw_score = score_unclamped(&devs, reference)?;
    let flags = flag_joints(&devs, reference);
    let joints = devs
        .iter()
        .zip(&flags)
        .zip(&reference.joint_names)
        .zip(&reference.joints)
        .map(|(((d, &flagged), name), j)| JointReport {
            name: name.clone(),
            deviation_deg: (!d.masked).then(|| d.abs_deg()),
            signed_deviation_deg: (!d.masked).then_some(d.signed_deg),
            flagged,
            masked: d.masked,
            flag_threshold_deg: j.flag_threshold_deg,
        })
        .collect();
    Ok(PostureReport {
        pose_id: reference.pose_id.clone(),
        score: score_value,
        raw_score,
        joints,
        evaluated_joint_count: devs.iter().filter(|d| !d.masked).count(),
        timestamp_ms: features.timestamp_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose(refs: &[f64], theta_max: f64, tau: f64) -> ReferencePose {
        ReferencePose {
            pose_id: "p".into(),
            display_name: "P".into(),
            joint_names: (0..refs.len()).map(|i| format!("j{i}")).collect(),
            joints: refs
                .iter()
                .map(|&r| JointReference {
                    ref_deg: r,
                    theta_max_deg: theta_max,
                    flag_threshold_deg: tau,
                })
                .collect(),
        }
    }

    fn devs(values: &[f64]) -> Vec<JointDeviation> {
        values
            .iter()
            .map(|&v| JointDeviation {
                signed_deg: v,
                masked: false,
            })
            .collect()
    }

    /// Direct transcription of the score formula with clamping.
    fn score_oracle(delta: &[f64], theta_max: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..delta.len() {
            let mut term = 1.0 - delta[i] / theta_max[i];
            if term < 0.0 {
                term = 0.0;
            }
            if term > 1.0 {
                term = 1.0;
            }
            total += term;
        }
        total / delta.len() as f64
    }

    #[test]
    fn shipped_library_loads() {
        let lib = PoseLibrary::builtin();
        let ids: Vec<_> = lib.poses().iter().map(|p| p.pose_id.as_str()).collect();
        assert_eq!(ids, ["mountain", "warrior_ii", "tree", "chair", "t_pose"]);
        let t = lib.get("t_pose").unwrap();
        assert_eq!(t.ref_angles(), [180.0, 180.0, 90.0, 90.0, 180.0, 180.0, 180.0, 180.0]);
        assert_eq!(t.joints[0].theta_max_deg, 45.0);
        assert_eq!(t.joints[0].flag_threshold_deg, 15.0);
        assert_eq!(lib.get("tree").unwrap().joints[6].flag_threshold_deg, 20.0);
    }

    #[test]
    fn library_rejects_bad_files() {
        let table = AngleTable::default();
        let wrong_version = DEFAULT_LIBRARY.replace("coco17-angles-v1", "other");
        assert!(PoseLibrary::from_toml(&wrong_version, &table).is_err());
        let missing = DEFAULT_LIBRARY.replacen("right_knee = { ref_deg = 180.0 }\n", "", 1);
        assert!(PoseLibrary::from_toml(&missing, &table).is_err());
        let out_of_range = DEFAULT_LIBRARY.replacen("ref_deg = 175.0", "ref_deg = 190.0", 1);
        assert!(PoseLibrary::from_toml(&out_of_range, &table).is_err());
        let unknown = DEFAULT_LIBRARY.replacen("left_elbow =", "left_wrist =", 1);
        assert!(PoseLibrary::from_toml(&unknown, &table).is_err());
    }

    #[test]
    fn deviation_examples() {
        let r = pose(&[85.0, 90.0], 45.0, 15.0);
        let exact = FeatureVector::from_angles(vec![85.0, 90.0], 0);
        assert!(deviations(&exact, &r).unwrap().iter().all(|d| d.abs_deg() == 0.0));

        let off = FeatureVector::from_angles(vec![100.0, 90.0], 0);
        let d = deviations(&off, &r).unwrap();
        assert_eq!(d[0].signed_deg, 15.0);
        assert_eq!(d[0].abs_deg(), 15.0);

        let mut masked = FeatureVector::from_angles(vec![170.0, 90.0], 0);
        masked.mask[0] = false;
        assert!(deviations(&masked, &r).unwrap()[0].masked);

        let short = FeatureVector::from_angles(vec![1.0], 0);
        assert_eq!(
            deviations(&short, &r),
            Err(EvalError::LengthMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn score_examples() {
        let r = pose(&[0.0, 0.0], 60.0, 15.0);
        assert_eq!(score(&devs(&[0.0, 0.0]), &r).unwrap(), 1.0);
        assert_eq!(score(&devs(&[15.0, 30.0]), &r).unwrap(), 0.625);
        assert_eq!(score(&devs(&[120.0, -120.0]), &r).unwrap(), 0.0);
        assert_eq!(score_unclamped(&devs(&[120.0, -120.0]), &r).unwrap(), -1.0);
        let all_masked = vec![
            JointDeviation {
                signed_deg: 0.0,
                masked: true
            };
            2
        ];
        assert_eq!(score(&all_masked, &r), Err(EvalError::NoEvaluableJoints));
    }

    #[test]
    fn score_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..=8);
            let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..180.0)).collect();
            let theta_max: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..90.0)).collect();
            let mut r = pose(&vec![0.0; n], 1.0, 1.0);
            for (j, &m) in r.joints.iter_mut().zip(&theta_max) {
                j.theta_max_deg = m;
            }
            let got = score(&devs(&delta), &r).unwrap();
            assert!((got - score_oracle(&delta, &theta_max)).abs() <= 1e-12);
        }
    }

    #[test]
    fn flag_boundary() {
        let r = pose(&[0.0, 0.0, 0.0], 45.0, 15.0);
        let mut d = devs(&[15.0, 15.01, 1000.0]);
        d[2].masked = true;
        assert_eq!(flag_joints(&d, &r), [false, true, false]);
    }

    #[test]
    fn evaluate_posture_composition() {
        let lib = PoseLibrary::builtin();
        let t = lib.get("t_pose").unwrap();
        let perfect = FeatureVector::from_angles(t.ref_angles(), 5);
        let rep = evaluate_posture(&perfect, t).unwrap();
        assert_eq!(rep.score, 1.0);
        assert_eq!(rep.flag_count(), 0);
        assert_eq!(rep.evaluated_joint_count, 8);
        assert_eq!(rep.timestamp_ms, 5);

        let mut angles = t.ref_angles();
        angles[3] -= 30.0;
        let rep = evaluate_posture(&FeatureVector::from_angles(angles, 0), t).unwrap();
        assert_eq!(rep.flag_count(), 1);
        assert!(rep.joints[3].flagged);
        assert_eq!(rep.joints[3].signed_deviation_deg, Some(-30.0));
        assert_eq!(rep.joints[3].deviation_deg, Some(30.0));
        assert!(rep.score < 1.0);

        let mut blind = perfect.clone();
        blind.mask.iter_mut().for_each(|m| *m = false);
        assert_eq!(evaluate_posture(&blind, t), Err(EvalError::NoEvaluableJoints));
    }

    proptest! {
        #[test]
        fn score_monotone_and_order_free(
            delta in prop::collection::vec(0.0f64..180.0, 1..8),
            bump in 0.0f64..50.0,
            idx in 0usize..8,
        ) {
            let r = pose(&vec![0.0; delta.len()], 45.0, 15.0);
            let base = score(&devs(&delta), &r).unwrap();
            let i = idx % delta.len();
            let mut worse = delta.clone();
            worse[i] += bump;
            prop_assert!(score(&devs(&worse), &r).unwrap() <= base);
            let mut reversed = delta.clone();
            reversed.reverse();
            prop_assert!((score(&devs(&reversed), &r).unwrap() - base).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
            prop_assert_eq!(base == 1.0, delta.iter().all(|&d| d == 0.0));
        }

        #[test]
        fn flags_monotone_in_threshold(
            delta in prop::collection::vec(-90.0f64..90.0, 8),
            tau in 0.1f64..60.0,
            shrink in 0.0f64..1.0,
        ) {
            let loose = pose(&[0.0; 8], 45.0, tau);
            let tight = loose.with_flag_threshold(tau * shrink.max(1e-3));
            let d = devs(&delta);
            for (a, b) in flag_joints(&d, &loose).iter().zip(flag_joints(&d, &tight)) {
                prop_assert!(!a || b);
            }
        }
    }
}
