//! Per-frame latency of the full pipeline, stage by stage.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::EdgeOptError;
use crate::model::ModelVariant;
use crate::pipeline::{Pipeline, PipelineConfig, Resources, Stage, StageTimes};

/// Leading frames processed but not measured.
pub const WARMUP_FRAMES: usize = 20;
pub const MIN_MEASURED_FRAMES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub variant: ModelVariant,
    pub pose_id: String,
    pub frames_measured: usize,
    pub warmup_frames: usize,
    pub end_to_end: LatencyStats,
    pub ingest: LatencyStats,
    pub biomech: LatencyStats,
    pub model: LatencyStats,
    pub evaluate: LatencyStats,
    pub feedback: LatencyStats,
}

impl BenchReport {
    pub fn stage(&self, stage: Stage) -> &LatencyStats {
        match stage {
            Stage::Ingest => &self.ingest,
            Stage::Biomech => &self.biomech,
            Stage::Model => &self.model,
            Stage::Evaluate => &self.evaluate,
            Stage::Feedback => &self.feedback,
        }
    }
}

/// Median (mean of the two middle values for even counts), nearest-rank
/// 95th percentile and maximum. `samples` must be non-empty.
pub fn percentile_summary(samples: &[f64]) -> LatencyStats {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    LatencyStats {
        median_us: median,
        p95_us: s[rank - 1],
        max_us: s[n - 1],
    }
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Runs `lines` through a fresh pipeline single-threaded and reports
/// per-frame latency after the warm-up. Rejected lines still count as
/// frames.
pub fn bench(
    resources: &Resources,
    pose_id: &str,
    variant: ModelVariant,
    config: PipelineConfig,
    lines: &[&str],
) -> Result<BenchReport, EdgeOptError> {
    let needed = WARMUP_FRAMES + MIN_MEASURED_FRAMES;
    if lines.len() < needed {
        return Err(EdgeOptError::InsufficientFrames {
            needed,
            got: lines.len(),
        });
    }
    let mut pipeline = Pipeline::new(resources, pose_id, variant, config)?;
    let measured = lines.len() - WARMUP_FRAMES;
    let mut total = Vec::with_capacity(measured);
    let mut stages: [Vec<f64>; 5] = std::array::from_fn(|_| Vec::with_capacity(measured));
    for (i, line) in lines.iter().enumerate() {
        let mut times = StageTimes::default();
        let start = Instant::now();
        let out = pipeline.process_line_timed(line, Some(&mut times));
        let elapsed = start.elapsed();
        std::hint::black_box(&out);
        if i < WARMUP_FRAMES {
            continue;
        }
        total.push(micros(elapsed));
        for (samples, stage) in stages.iter_mut().zip(Stage::ALL) {
            samples.push(micros(times.get(stage)));
        }
    }
    let [ingest, biomech, model, evaluate, feedback] = stages.map(|s| percentile_summary(&s));
    Ok(BenchReport {
        variant,
        pose_id: pose_id.to_owned(),
        frames_measured: measured,
        warmup_frames: WARMUP_FRAMES,
        end_to_end: percentile_summary(&total),
        ingest,
        biomech,
        model,
        evaluate,
        feedback,
    })
}
