//! Random closed-loop track generation.
//!
//! A loop is a ring of `corners` left-turning arcs whose angles sum to 2π,
//! separated by straights. Some straights carry an S-bend (a +κ/−κ arc pair)
//! in the middle. Two straight lengths are solved for so the loop closes.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::expert::derive_seed;
use crate::geometry::{FrenetCoord, GeometryError, SegmentSpec, Track, TrackSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackGenConfig {
    pub corners: usize,
    pub straight_min: f64,
    pub straight_max: f64,
    pub corner_curvature_min: f64,
    pub corner_curvature_max: f64,
    pub s_bend_probability: f64,
    pub s_bend_curvature_min: f64,
    pub s_bend_curvature_max: f64,
    pub s_bend_angle_min: f64,
    pub s_bend_angle_max: f64,
    pub lane_width: f64,
    pub num_lanes: usize,
    pub max_attempts: usize,
}

impl Default for TrackGenConfig {
    fn default() -> Self {
        Self {
            corners: 4,
            straight_min: 400.0,
            straight_max: 1200.0,
            corner_curvature_min: 1.0 / 350.0,
            corner_curvature_max: 1.0 / 90.0,
            s_bend_probability: 0.35,
            s_bend_curvature_min: 1.0 / 250.0,
            s_bend_curvature_max: 1.0 / 100.0,
            s_bend_angle_min: 0.15,
            s_bend_angle_max: 0.35,
            lane_width: 3.5,
            num_lanes: 3,
            max_attempts: 1000,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrackGenError {
    #[error("no closed track found for id {id} after {attempts} attempts")]
    Exhausted { id: u32, attempts: usize },
    #[error("invalid track generation config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Net displacement of a list of segments starting at heading `h0`.
fn displacement(segs: &[SegmentSpec], h0: f64) -> ([f64; 2], f64) {
    let mut p = [0.0, 0.0];
    let mut h = h0;
    for s in segs {
        if s.curvature == 0.0 {
            p[0] += s.length * h.cos();
            p[1] += s.length * h.sin();
        } else {
            let h1 = h + s.curvature * s.length;
            p[0] += (h1.sin() - h.sin()) / s.curvature;
            p[1] -= (h1.cos() - h.cos()) / s.curvature;
            h = h1;
        }
    }
    (p, h)
}

/// Generates the track with the given id. The same (config, seed, id)
/// always yields the same track.
pub fn generate_track(cfg: &TrackGenConfig, seed: u64, id: u32) -> Result<Track, TrackGenError> {
    if cfg.corners < 3 {
        return Err(TrackGenError::Config("need at least 3 corners".into()));
    }
    if !(cfg.straight_min > 0.0 && cfg.straight_max >= cfg.straight_min) {
        return Err(TrackGenError::Config("bad straight length range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7472_6163, id as u64]));
    for _ in 0..cfg.max_attempts {
        if let Some(track) = attempt(cfg, &mut rng)? {
            return Ok(track);
        }
    }
    Err(TrackGenError::Exhausted { id, attempts: cfg.max_attempts })
}

fn attempt<R: Rng>(cfg: &TrackGenConfig, rng: &mut R) -> Result<Option<Track>, TrackGenError> {
    let n = cfg.corners;
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.4)).collect();
    let wsum: f64 = weights.iter().sum();
    let corners: Vec<SegmentSpec> = weights
        .iter()
        .map(|w| {
            let angle = 2.0 * PI * w / wsum;
            let k = rng.random_range(cfg.corner_curvature_min..=cfg.corner_curvature_max);
            SegmentSpec::arc(angle / k, k)
        })
        .collect();
    let s_bends: Vec<Vec<SegmentSpec>> = (0..n)
        .map(|_| {
            if rng.random_bool(cfg.s_bend_probability) {
                let k = rng.random_range(cfg.s_bend_curvature_min..=cfg.s_bend_curvature_max);
                let angle = rng.random_range(cfg.s_bend_angle_min..=cfg.s_bend_angle_max);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                vec![SegmentSpec::arc(angle / k, sign * k), SegmentSpec::arc(angle / k, -sign * k)]
            } else {
                Vec::new()
            }
        })
        .collect();
    let mut lengths: Vec<f64> =
        (0..n).map(|_| rng.random_range(cfg.straight_min..=cfg.straight_max)).collect();

    // Straight j runs at heading h_j; corner j follows it.
    let mut headings = Vec::with_capacity(n);
    let mut h = 0.0;
    for c in &corners {
        headings.push(h);
        h += c.curvature * c.length;
    }
    // Pick the pair of straights closest to perpendicular as the unknowns.
    let (mut a, mut b, mut best) = (0, 1, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let cross = (headings[j] - headings[i]).sin().abs();
            if cross > best {
                (a, b, best) = (i, j, cross);
            }
        }
    }
    let mut rest = [0.0, 0.0];
    for j in 0..n {
        let (p, _) = displacement(&s_bends[j], headings[j]);
        rest[0] += p[0];
        rest[1] += p[1];
        let (p, _) = displacement(&corners[j..=j], headings[j]);
        rest[0] += p[0];
        rest[1] += p[1];
        if j != a && j != b {
            rest[0] += lengths[j] * headings[j].cos();
            rest[1] += lengths[j] * headings[j].sin();
        }
    }
    // Solve la·ua + lb·ub = -rest.
    let (ua, ub) = ([headings[a].cos(), headings[a].sin()], [headings[b].cos(), headings[b].sin()]);
    let det = ua[0] * ub[1] - ua[1] * ub[0];
    let la = (-rest[0] * ub[1] + rest[1] * ub[0]) / det;
    let lb = (-ua[0] * rest[1] + ua[1] * rest[0]) / det;
    if la < cfg.straight_min || lb < cfg.straight_min || la > 3.0 * cfg.straight_max || lb > 3.0 * cfg.straight_max {
        return Ok(None);
    }
    lengths[a] = la;
    lengths[b] = lb;

    let mut segments = Vec::new();
    for j in 0..n {
        if s_bends[j].is_empty() {
            segments.push(SegmentSpec::straight(lengths[j]));
        } else {
            segments.push(SegmentSpec::straight(0.5 * lengths[j]));
            segments.extend(s_bends[j].iter().copied());
            segments.push(SegmentSpec::straight(0.5 * lengths[j]));
        }
        segments.push(corners[j]);
    }
    let spec =
        TrackSpec { segments, lane_width: cfg.lane_width, num_lanes: cfg.num_lanes, closed: true };
    let track = match Track::new(spec) {
        Ok(t) => t,
        Err(GeometryError::NotClosed { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    Ok(is_simple(&track).then_some(track))
}

/// Rejects loops where distant parts of the road come close to each other:
/// points just beyond both road edges must project back to their own s.
fn is_simple(track: &Track) -> bool {
    let l = track.total_length();
    let off = 1.5 * track.half_width();
    let n = (l / 5.0).ceil() as usize;
    (0..n).all(|i| {
        let s = i as f64 * l / n as f64;
        [-off, off].iter().all(|&d| {
            track
                .frenet_to_world(FrenetCoord { s, d })
                .and_then(|p| track.world_to_frenet(p))
                .map(|fc| track.s_gap(s, fc.s).abs() < 1.0)
                .unwrap_or(false)
        })
    })
}
