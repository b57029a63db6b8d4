//! Joint angles and the per-frame biomechanical feature vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{NormalizedFrame, NUM_KEYPOINTS};

/// Segments shorter than this have no usable direction.
pub const MIN_SEGMENT_LENGTH: f64 = 1e-9;

/// Number of angles in the shipped table.
pub const NUM_ANGLES: usize = 8;

const DEFAULT_TABLE: &str = include_str!("../data/angles.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BiomechError {
    #[error("zero-length segment at the angle vertex")]
    ZeroLengthSegment,
    #[error("invalid angle table: {0}")]
    InvalidTable(String),
}

/// Interior angle at `B` between `B->A` and `B->C`, in degrees.
pub fn joint_angle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Result<f64, BiomechError> {
    let ba = [a[0] - b[0], a[1] - b[1]];
    let bc = [c[0] - b[0], c[1] - b[1]];
    let len_ba = ba[0].hypot(ba[1]);
    let len_bc = bc[0].hypot(bc[1]);
    if !(len_ba > MIN_SEGMENT_LENGTH && len_bc > MIN_SEGMENT_LENGTH) {
        return Err(BiomechError::ZeroLengthSegment);
    }
    // acos(u·v) evaluated as 2·atan2(|u - v|, |u + v|) on the unit vectors:
    // the same angle, but without acos losing half the digits near 0 and 180
    let u = [ba[0] / len_ba, ba[1] / len_ba];
    let v = [bc[0] / len_bc, bc[1] / len_bc];
    let diff = (u[0] - v[0]).hypot(u[1] - v[1]);
    let sum = (u[0] + v[0]).hypot(u[1] + v[1]);
    Ok((2.0 * diff.atan2(sum)).to_degrees().clamp(0.0, 180.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AngleDefinition {
    pub name: String,
    /// `(A, B, C)` keypoint indices; `B` is the vertex.
    pub points: [usize; 3],
}

impl AngleDefinition {
    pub fn vertex(&self) -> usize {
        self.points[1]
    }
}

/// Versioned list of angle definitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AngleTable {
    pub version: String,
    #[serde(rename = "angle")]
    pub angles: Vec<AngleDefinition>,
}

impl Default for AngleTable {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TABLE).expect("shipped angle table is valid")
    }
}

impl AngleTable {
    pub fn from_toml(text: &str) -> Result<Self, BiomechError> {
        let table: AngleTable =
            toml::from_str(text).map_err(|e| BiomechError::InvalidTable(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BiomechError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BiomechError::InvalidTable(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), BiomechError> {
        if self.angles.is_empty() {
            return Err(BiomechError::InvalidTable("no angles defined".into()));
        }
        for (i, def) in self.angles.iter().enumerate() {
            let [a, b, c] = def.points;
            if a == b || b == c || a == c {
                return Err(BiomechError::InvalidTable(format!(
                    "{}: indices must be distinct",
                    def.name
                )));
            }
            if def.points.iter().any(|&p| p >= NUM_KEYPOINTS) {
                return Err(BiomechError::InvalidTable(format!(
                    "{}: keypoint index out of range",
                    def.name
                )));
            }
            if self.angles[..i].iter().any(|d| d.name == def.name) {
                return Err(BiomechError::InvalidTable(format!("duplicate angle {}", def.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.angles.iter().position(|d| d.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.angles.iter().map(|d| d.name.as_str())
    }
}

/// Joint angles of one frame. Invalid angles hold 0 with `mask` false, so
/// the numbers are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub angles: Vec<f64>,
    pub mask: Vec<bool>,
    pub timestamp_ms: i64,
}

impl FeatureVector {
    /// All angles valid.
    pub fn from_angles(angles: Vec<f64>, timestamp_ms: i64) -> Self {
        let mask = vec![true; angles.len()];
        Self {
            angles,
            mask,
            timestamp_ms,
        }
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn extract_features(
    frame: &NormalizedFrame,
    defs: &[AngleDefinition],
    min_confidence: f64,
) -> FeatureVector {
    let kp = &frame.keypoints;
    let (angles, mask) = defs
        .iter()
        .map(|def| {
            let [a, b, c] = def.points.map(|i| kp[i]);
            if [a, b, c].iter().any(|k| k.confidence < min_confidence) {
                return (0.0, false);
            }
            match joint_angle(a.position(), b.position(), c.position()) {
                Ok(theta) => (theta, true),
                Err(_) => (0.0, false),
            }
        })
        .unzip();
    FeatureVector {
        angles,
        mask,
        timestamp_ms: frame.timestamp_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{coco, normalize, Keypoint, KeypointFrame};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent route: unsigned angle from atan2(cross, dot).
    fn atan2_oracle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
        let u = [a[0] - b[0], a[1] - b[1]];
        let v = [c[0] - b[0], c[1] - b[1]];
        let cross = u[0] * v[1] - u[1] * v[0];
        let dot = u[0] * v[0] + u[1] * v[1];
        cross.atan2(dot).abs().to_degrees()
    }

    #[test]
    fn closed_form_angles() {
        let cases = [
            ([0.0, 1.0], [1.0, 0.0], 90.0),
            ([-1.0, 0.0], [1.0, 0.0], 180.0),
            ([1.0, 1.0], [1.0, 0.0], 45.0),
        ];
        for (a, c, want) in cases {
            let got = joint_angle(a, [0.0, 0.0], c).unwrap();
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_length_segment() {
        assert_eq!(
            joint_angle([1.0, 1.0], [1.0, 1.0], [2.0, 0.0]),
            Err(BiomechError::ZeroLengthSegment)
        );
        assert_eq!(
            joint_angle([0.0, 1.0], [0.0, 0.0], [0.0, 0.0]),
            Err(BiomechError::ZeroLengthSegment)
        );
    }

    #[test]
    fn matches_atan2_oracle_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let mut p = || [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            let (a, b, c) = (p(), p(), p());
            let got = joint_angle(a, b, c).unwrap();
            assert!((got - atan2_oracle(a, b, c)).abs() < 1e-6);
        }
    }

    #[test]
    fn shipped_table_is_the_eight_anatomical_angles() {
        let t = AngleTable::default();
        assert_eq!(t.len(), NUM_ANGLES);
        let names: Vec<_> = t.names().collect();
        assert_eq!(
            names,
            [
                "left_elbow",
                "right_elbow",
                "left_shoulder",
                "right_shoulder",
                "left_hip",
                "right_hip",
                "left_knee",
                "right_knee"
            ]
        );
        assert_eq!(t.angles[0].points, [coco::LEFT_SHOULDER, coco::LEFT_ELBOW, coco::LEFT_WRIST]);
        assert_eq!(t.angles[7].vertex(), coco::RIGHT_KNEE);
    }

    #[test]
    fn table_validation() {
        let dup = "version = \"x\"\n[[angle]]\nname = \"a\"\npoints = [1, 2, 3]\n[[angle]]\nname = \"a\"\npoints = [4, 5, 6]\n";
        assert!(AngleTable::from_toml(dup).is_err());
        let repeated = "version = \"x\"\n[[angle]]\nname = \"a\"\npoints = [1, 1, 3]\n";
        assert!(AngleTable::from_toml(repeated).is_err());
        let range = "version = \"x\"\n[[angle]]\nname = \"a\"\npoints = [1, 2, 17]\n";
        assert!(AngleTable::from_toml(range).is_err());
    }

    /// Upright figure: arms hanging down at 30 degrees, elbows bent, legs straight.
    fn standing_frame(conf: f64) -> KeypointFrame {
        let mut kp = [Keypoint::new(0.0, -1.3, conf); NUM_KEYPOINTS];
        let mut set = |i: usize, x: f64, y: f64| kp[i] = Keypoint::new(x, y, conf);
        set(coco::LEFT_SHOULDER, 0.35, -1.0);
        set(coco::RIGHT_SHOULDER, -0.35, -1.0);
        set(coco::LEFT_ELBOW, 0.6, -0.6);
        set(coco::RIGHT_ELBOW, -0.6, -0.6);
        set(coco::LEFT_WRIST, 0.6, -0.2);
        set(coco::RIGHT_WRIST, -0.6, -0.2);
        set(coco::LEFT_HIP, 0.25, 0.0);
        set(coco::RIGHT_HIP, -0.25, 0.0);
        set(coco::LEFT_KNEE, 0.25, 0.55);
        set(coco::RIGHT_KNEE, -0.25, 0.55);
        set(coco::LEFT_ANKLE, 0.25, 1.05);
        set(coco::RIGHT_ANKLE, -0.25, 1.05);
        KeypointFrame {
            timestamp_ms: 40,
            frame_id: 1,
            keypoints: kp,
        }
    }

    #[test]
    fn extract_features_matches_oracle_and_masks() {
        let table = AngleTable::default();
        let raw = standing_frame(1.0);
        let norm = normalize(&raw, 0.3).unwrap();
        let fv = extract_features(&norm, &table.angles, 0.3);
        assert_eq!(fv.timestamp_ms, 40);
        assert!(fv.mask.iter().all(|&m| m));
        for (def, theta) in table.angles.iter().zip(&fv.angles) {
            let [a, b, c] = def.points.map(|i| raw.keypoints[i].position());
            assert!((theta - atan2_oracle(a, b, c)).abs() < 1e-9, "{}", def.name);
        }
        assert!((fv.angles[6] - 180.0).abs() < 1e-9);

        let mut occluded = raw.clone();
        occluded.keypoints[coco::LEFT_WRIST].confidence = 0.0;
        let fv = extract_features(&normalize(&occluded, 0.3).unwrap(), &table.angles, 0.3);
        assert_eq!(fv.mask, [false, true, true, true, true, true, true, true]);
        assert_eq!(fv.angles[0], 0.0);

        let mut blind = normalize(&raw, 0.3).unwrap();
        blind.keypoints.iter_mut().for_each(|k| k.confidence = 0.0);
        let fv = extract_features(&blind, &table.angles, 0.3);
        assert!(fv.mask.iter().all(|&m| !m));
        assert!(fv.angles.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn degenerate_segment_is_masked() {
        let table = AngleTable::default();
        let mut raw = standing_frame(1.0);
        raw.keypoints[coco::LEFT_KNEE] = raw.keypoints[coco::LEFT_ANKLE];
        let fv = extract_features(&normalize(&raw, 0.3).unwrap(), &table.angles, 0.3);
        assert!(!fv.mask[6]);
        assert!(fv.mask[7]);
    }

    fn pt() -> impl Strategy<Value = [f64; 2]> {
        (-10.0f64..10.0, -10.0f64..10.0).prop_map(|(x, y)| [x, y])
    }

    fn non_degenerate() -> impl Strategy<Value = ([f64; 2], [f64; 2], [f64; 2])> {
        (pt(), pt(), pt()).prop_filter("segments long enough", |(a, b, c)| {
            (a[0] - b[0]).hypot(a[1] - b[1]) > 0.1 && (c[0] - b[0]).hypot(c[1] - b[1]) > 0.1
        })
    }

    proptest! {
        #[test]
        fn symmetric_in_end_points((a, b, c) in non_degenerate()) {
            prop_assert_eq!(joint_angle(a, b, c).unwrap(), joint_angle(c, b, a).unwrap());
        }

        #[test]
        fn invariant_under_similarity_transforms(
            (a, b, c) in non_degenerate(),
            t in pt(),
            s in 0.1f64..10.0,
            phi in 0.0f64..std::f64::consts::TAU,
        ) {
            let theta = joint_angle(a, b, c).unwrap();
            let (sin, cos) = phi.sin_cos();
            let about_b = |p: [f64; 2], scale: f64, rot: bool| {
                let (dx, dy) = ((p[0] - b[0]) * scale, (p[1] - b[1]) * scale);
                let (dx, dy) = if rot { (cos * dx - sin * dy, sin * dx + cos * dy) } else { (dx, dy) };
                [b[0] + dx, b[1] + dy]
            };
            let shift = |p: [f64; 2]| [p[0] + t[0], p[1] + t[1]];
            let translated = joint_angle(shift(a), shift(b), shift(c)).unwrap();
            let scaled = joint_angle(about_b(a, s, false), b, about_b(c, s, false)).unwrap();
            let rotated = joint_angle(about_b(a, 1.0, true), b, about_b(c, 1.0, true)).unwrap();
            let tol = 1e-9;
            prop_assert!((translated - theta).abs() < tol);
            prop_assert!((scaled - theta).abs() < tol);
            prop_assert!((rotated - theta).abs() < tol);
        }

        #[test]
        fn output_in_range(a in pt(), b in pt(), c in pt()) {
            if let Ok(theta) = joint_angle(a, b, c) {
                prop_assert!((0.0..=180.0).contains(&theta));
            }
        }
    }
}
