//! Track sets, dataset generation and dataset statistics.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::expert::{record_demonstrations, Dataset, Demonstration, FsmPhase, RecordingReport, TrackEntry};
use crate::harness::config::ExperimentConfig;
use crate::harness::tracks::generate_track;
use crate::harness::HarnessError;

/// Generates the configured train and validation tracks.
pub fn build_tracks(cfg: &ExperimentConfig) -> Result<(Vec<TrackEntry>, Vec<TrackEntry>), HarnessError> {
    let make = |ids: &[u32]| -> Result<Vec<TrackEntry>, HarnessError> {
        ids.iter()
            .map(|&id| Ok(TrackEntry { id, track: Arc::new(generate_track(&cfg.tracks.generator, cfg.seed, id)?) }))
            .collect()
    };
    Ok((make(&cfg.tracks.train_ids)?, make(&cfg.tracks.val_ids)?))
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, RecordingReport), HarnessError> {
    let (train, val) = build_tracks(cfg)?;
    Ok(record_demonstrations(&train, &val, &cfg.recording, cfg.seed)?)
}

/// Curvature of the circle through the ego origin, the middle label point
/// and the last label point.
pub fn trajectory_curvature(trajectory: &[[f64; 2]]) -> f64 {
    let a = [0.0, 0.0];
    let b = trajectory[trajectory.len() / 2];
    let c = trajectory[trajectory.len() - 1];
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let d = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).hypot(p[1] - q[1]);
    let denom = d(a, b) * d(b, c) * d(a, c);
    if denom < 1e-9 {
        0.0
    } else {
        2.0 * cross / denom
    }
}

/// Curvature above which a record counts as a sharp turn, 1/m.
pub const SHARP_CURVATURE: f64 = 1.0 / 150.0;

/// Fraction of records that are rare events: sharp turns or any FSM state
/// other than lane keeping.
pub fn rare_fraction<'a>(records: impl IntoIterator<Item = &'a Demonstration>) -> f64 {
    let (mut rare, mut n) = (0usize, 0usize);
    for r in records {
        n += 1;
        if r.meta.fsm_state != FsmPhase::LaneKeep || trajectory_curvature(&r.trajectory).abs() > SHARP_CURVATURE {
            rare += 1;
        }
    }
    rare as f64 / n.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiModalityReport {
    pub bins: usize,
    pub multimodal_bins: usize,
    pub fraction: f64,
}

/// Splits sorted values at the largest gap and returns the distance between
/// the two cluster means, requiring at least `min_size` values per cluster.
pub fn cluster_separation(sorted: &[f64], min_size: usize) -> Option<f64> {
    if sorted.len() < 2 * min_size {
        return None;
    }
    let split = (min_size..=sorted.len() - min_size)
        .max_by(|&i, &j| (sorted[i] - sorted[i - 1]).total_cmp(&(sorted[j] - sorted[j - 1])).then(j.cmp(&i)))?;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some(mean(&sorted[split..]) - mean(&sorted[..split]))
}

/// Bins overtake-onset records (lane keeping in the start lane with an
/// obstacle ahead in trigger range) by quantized observation and reports the
/// share of bins whose final label lateral offsets form two clusters at
/// least `separation` apart.
pub fn multimodality(
    records: &[Demonstration],
    trigger_range: (f64, f64),
    separation: f64,
    min_bin: usize,
) -> MultiModalityReport {
    let mut bins: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
    for r in records {
        let a = &r.affordance;
        if r.meta.fsm_state != FsmPhase::LaneKeep
            || a.lateral_offset.abs() > 0.5
            || a.dist_ahead_same_lane < trigger_range.0
            || a.dist_ahead_same_lane > trigger_range.1
        {
            continue;
        }
        let mut key: Vec<i64> = r.observation.ranges.iter().map(|x| (x / 5.0).floor() as i64).collect();
        key.push((r.observation.speed / 2.0).floor() as i64);
        bins.entry(key).or_default().push(r.trajectory.last().expect("nonempty label")[1]);
    }
    let mut report = MultiModalityReport { bins: 0, multimodal_bins: 0, fraction: 0.0 };
    for ys in bins.values_mut().filter(|v| v.len() >= min_bin) {
        ys.sort_by(f64::total_cmp);
        report.bins += 1;
        if cluster_separation(ys, 2).is_some_and(|s| s >= separation) {
            report.multimodal_bins += 1;
        }
    }
    report.fraction = report.multimodal_bins as f64 / report.bins.max(1) as f64;
    report
}
