//! Kinematic bicycle simulator with a static-obstacle world, a planar
//! ray-cast range sensor, and collision / off-road detection.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, FrenetCoord, GeometryError, Pose, Track};

/// Simulator step, seconds (50 Hz).
pub const DT_SIM: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cannot place {requested} obstacles: at most {max} fit on a {length:.1} m track (clear zone {clear:.1} m, min spacing {spacing_min:.1} m)")]
    TooManyObstacles { requested: usize, max: usize, length: f64, clear: f64, spacing_min: f64 },
    #[error("invalid obstacle density config: {0}")]
    BadDensity(String),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace encoding: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub length: f64,
    pub width: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self { wheelbase: 2.7, length: 4.5, width: 1.8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionLimits {
    pub steer_max: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    pub v_hard_max: f64,
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self { steer_max: 0.5, accel_min: -6.0, accel_max: 3.0, v_hard_max: 30.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub steer: f64,
    pub accel: f64,
}

impl Action {
    /// Builds an action clamped to `limits`.
    pub fn clamped(steer: f64, accel: f64, limits: &ActionLimits) -> Self {
        Self {
            steer: steer.clamp(-limits.steer_max, limits.steer_max),
            accel: accel.clamp(limits.accel_min, limits.accel_max),
        }
    }

    pub fn new(steer: f64, accel: f64) -> Self {
        Self::clamped(steer, accel, &ActionLimits::default())
    }

    pub fn is_within(&self, limits: &ActionLimits) -> bool {
        self.steer.abs() <= limits.steer_max
            && self.accel >= limits.accel_min
            && self.accel <= limits.accel_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose,
    pub speed: f64,
    pub wheelbase: f64,
}

/// One forward-Euler step of the kinematic bicycle model. All updates use
/// the pre-step state.
pub fn step(state: &VehicleState, action: &Action, dt: f64, v_hard_max: f64) -> VehicleState {
    debug_assert!(dt > 0.0);
    let Pose { x, y, heading } = state.pose;
    let v = state.speed;
    let x = x + v * heading.cos() * dt;
    let y = y + v * heading.sin() * dt;
    let heading = wrap_angle(heading + v / state.wheelbase * action.steer.tan() * dt);
    let speed = (v + action.accel * dt).clamp(0.0, v_hard_max);
    VehicleState { pose: Pose { x, y, heading }, speed, wheelbase: state.wheelbase }
}

/// An oriented rectangle in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: [f64; 2],
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedRect {
    fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.heading.sin_cos();
        ([c, s], [-s, c])
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (ax, ay) = self.axes();
        let (l, w) = (self.half_length, self.half_width);
        let [cx, cy] = self.center;
        let corner = |sl: f64, sw: f64| {
            [cx + sl * l * ax[0] + sw * w * ay[0], cy + sl * l * ax[1] + sw * w * ay[1]]
        };
        [corner(1.0, 1.0), corner(1.0, -1.0), corner(-1.0, -1.0), corner(-1.0, 1.0)]
    }

    /// Separating-axis overlap test. Touching counts as overlap.
    pub fn intersects(&self, other: &OrientedRect) -> bool {
        let (a1, a2) = self.axes();
        let (b1, b2) = other.axes();
        let t = [other.center[0] - self.center[0], other.center[1] - self.center[1]];
        let dot = |u: [f64; 2], v: [f64; 2]| u[0] * v[0] + u[1] * v[1];
        for axis in [a1, a2, b1, b2] {
            let ra = self.half_length * dot(a1, axis).abs() + self.half_width * dot(a2, axis).abs();
            let rb =
                other.half_length * dot(b1, axis).abs() + other.half_width * dot(b2, axis).abs();
            if dot(t, axis).abs() > ra + rb {
                return false;
            }
        }
        true
    }

    /// Distance along a unit-direction ray to the rectangle boundary, if hit.
    /// A ray starting inside reports distance 0.
    pub fn ray_hit(&self, origin: [f64; 2], dir: [f64; 2]) -> Option<f64> {
        let (ax, ay) = self.axes();
        let rel = [origin[0] - self.center[0], origin[1] - self.center[1]];
        let o = [rel[0] * ax[0] + rel[1] * ax[1], rel[0] * ay[0] + rel[1] * ay[1]];
        let d = [dir[0] * ax[0] + dir[1] * ax[1], dir[0] * ay[0] + dir[1] * ay[1]];
        let half = [self.half_length, self.half_width];
        let mut t_min = f64::NEG_INFINITY;
        let mut t_max = f64::INFINITY;
        for i in 0..2 {
            if d[i].abs() < 1e-15 {
                if o[i].abs() > half[i] {
                    return None;
                }
            } else {
                let t1 = (-half[i] - o[i]) / d[i];
                let t2 = (half[i] - o[i]) / d[i];
                t_min = t_min.max(t1.min(t2));
                t_max = t_max.min(t1.max(t2));
            }
        }
        if t_max < t_min || t_max < 0.0 {
            None
        } else {
            Some(t_min.max(0.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub frenet: FrenetCoord,
    pub half_length: f64,
    pub half_width: f64,
}

impl Obstacle {
    /// World rectangle, oriented along the road tangent at the anchor.
    pub fn rect(&self, track: &Track) -> Result<OrientedRect, GeometryError> {
        let center = track.frenet_to_world(self.frenet)?;
        let heading = track.pose_at(self.frenet.s)?.heading;
        Ok(OrientedRect { center, heading, half_length: self.half_length, half_width: self.half_width })
    }
}

/// Controls obstacle placement along the track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    pub spacing_min: f64,
    pub spacing_max: f64,
    /// No obstacle is placed within this arc-length distance of s = 0.
    pub clear_zone: f64,
    /// Exact obstacle count; `None` fills the track with spacing draws.
    pub count: Option<usize>,
    pub half_length: f64,
    pub half_width: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            spacing_min: 50.0,
            spacing_max: 200.0,
            clear_zone: 100.0,
            count: None,
            half_length: 2.25,
            half_width: 0.9,
        }
    }
}

impl DensityConfig {
    /// Last arc length an obstacle anchor may occupy.
    fn end_s(&self, track: &Track) -> f64 {
        if track.is_closed() {
            track.total_length() - self.clear_zone
        } else {
            track.total_length() - self.half_length
        }
    }

    /// Largest count that fits: the first obstacle sits at the clear zone edge
    /// and successive anchors are at least `spacing_min` apart.
    pub fn max_count(&self, track: &Track) -> usize {
        let span = self.end_s(track) - self.clear_zone;
        if span < 0.0 {
            0
        } else {
            (span / self.spacing_min).floor() as usize + 1
        }
    }
}

/// Places static obstacles, each centered in a uniformly chosen lane. The
/// first anchor is at `clear_zone`; successive gaps are uniform in
/// `[spacing_min, spacing_max]`. With an explicit count, each gap's upper
/// bound is shrunk just enough that the remaining obstacles still fit.
pub fn place_obstacles<R: Rng + ?Sized>(
    track: &Track,
    rng: &mut R,
    cfg: &DensityConfig,
) -> Result<Vec<Obstacle>, SimError> {
    if !(cfg.spacing_min > 0.0) || cfg.spacing_max < cfg.spacing_min {
        return Err(SimError::BadDensity(format!(
            "spacing range [{}, {}]",
            cfg.spacing_min, cfg.spacing_max
        )));
    }
    if cfg.spacing_min <= 2.0 * cfg.half_length {
        return Err(SimError::BadDensity(format!(
            "spacing_min {} must exceed obstacle length {}",
            cfg.spacing_min,
            2.0 * cfg.half_length
        )));
    }
    if 2.0 * cfg.half_width > track.lane_width() {
        return Err(SimError::BadDensity("obstacle wider than a lane".into()));
    }
    let end = cfg.end_s(track);
    let max = cfg.max_count(track);
    let too_many = |requested| SimError::TooManyObstacles {
        requested,
        max,
        length: track.total_length(),
        clear: cfg.clear_zone,
        spacing_min: cfg.spacing_min,
    };
    let mut anchors = Vec::new();
    match cfg.count {
        Some(0) => {}
        Some(n) => {
            if n > max {
                return Err(too_many(n));
            }
            let mut s = cfg.clear_zone;
            anchors.push(s);
            for placed in 1..n {
                let remaining_after = (n - 1 - placed) as f64;
                let hi = cfg.spacing_max.min(end - s - remaining_after * cfg.spacing_min);
                let gap = uniform(rng, cfg.spacing_min, hi.max(cfg.spacing_min));
                s += gap;
                anchors.push(s);
            }
        }
        None => {
            if max == 0 {
                return Err(too_many(1));
            }
            let mut s = cfg.clear_zone;
            while s <= end {
                anchors.push(s);
                s += uniform(rng, cfg.spacing_min, cfg.spacing_max);
            }
        }
    }
    let obstacles = anchors
        .into_iter()
        .map(|s| {
            let lane = rng.random_range(0..track.num_lanes());
            Obstacle {
                frenet: FrenetCoord { s, d: track.lane_center(lane) },
                half_length: cfg.half_length,
                half_width: cfg.half_width,
            }
        })
        .collect::<Vec<_>>();
    debug_assert!(obstacles
        .windows(2)
        .all(|w| w[1].frenet.s - w[0].frenet.s >= 2.0 * cfg.half_length));
    Ok(obstacles)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub n_beams: usize,
    pub fov: f64,
    pub max_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { n_beams: 19, fov: PI, max_range: 60.0 }
    }
}

impl SensorConfig {
    /// Bearing of beam `i` relative to the vehicle heading.
    pub fn bearing(&self, i: usize) -> f64 {
        -0.5 * self.fov + i as f64 * self.fov / (self.n_beams - 1) as f64
    }
}

/// Ranges in meters plus ego speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ranges: Vec<f64>,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionKind {
    None,
    Obstacle,
    OffRoad,
}

impl CollisionKind {
    pub fn is_collision(self) -> bool {
        self != CollisionKind::None
    }
}

/// Simulator ground truth for one episode.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub track: Arc<Track>,
    obstacles: Vec<Obstacle>,
    obstacle_rects: Vec<OrientedRect>,
    pub ego: VehicleState,
    pub vehicle: VehicleParams,
    pub sim_time: f64,
}

/// Smallest reported range; a beam starting inside geometry reads this.
pub const MIN_RANGE: f64 = 1e-6;

impl WorldState {
    pub fn new(
        track: Arc<Track>,
        mut obstacles: Vec<Obstacle>,
        ego: VehicleState,
        vehicle: VehicleParams,
    ) -> Result<Self, GeometryError> {
        obstacles.sort_by(|a, b| a.frenet.s.total_cmp(&b.frenet.s));
        let obstacle_rects =
            obstacles.iter().map(|o| o.rect(&track)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { track, obstacles, obstacle_rects, ego, vehicle, sim_time: 0.0 })
    }

    /// Obstacles sorted by arc length.
    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn obstacle_rects(&self) -> &[OrientedRect] {
        &self.obstacle_rects
    }

    pub fn ego_rect(&self) -> OrientedRect {
        OrientedRect {
            center: self.ego.pose.position(),
            heading: self.ego.pose.heading,
            half_length: 0.5 * self.vehicle.length,
            half_width: 0.5 * self.vehicle.width,
        }
    }

    pub fn ego_frenet(&self) -> Result<FrenetCoord, GeometryError> {
        self.track.world_to_frenet(self.ego.pose.position())
    }

    /// Advances the ego by one step and the clock by `dt`.
    pub fn advance(&mut self, action: &Action, dt: f64, limits: &ActionLimits) {
        self.ego = step(&self.ego, action, dt, limits.v_hard_max);
        self.sim_time += dt;
    }

    pub fn observe(&self, sensor: &SensorConfig) -> Observation {
        Observation { ranges: cast_rays(self, &self.ego.pose, sensor), speed: self.ego.speed }
    }
}

/// Casts `n_beams` rays from `pose` against the road edges and obstacle
/// rectangles; ranges are clipped to `(0, max_range]`.
pub fn cast_rays(world: &WorldState, pose: &Pose, sensor: &SensorConfig) -> Vec<f64> {
    assert!(sensor.n_beams >= 3, "need at least 3 beams");
    assert!(sensor.fov > 0.0 && sensor.fov <= 2.0 * PI, "fov out of range");
    let origin = pose.position();
    let reach = sensor.max_range;
    let nearby: Vec<&OrientedRect> = world
        .obstacle_rects
        .iter()
        .filter(|r| {
            let diag = r.half_length.hypot(r.half_width);
            (r.center[0] - origin[0]).hypot(r.center[1] - origin[1]) <= reach + diag
        })
        .collect();
    let hw = world.track.half_width();
    (0..sensor.n_beams)
        .map(|i| {
            let bearing = pose.heading + sensor.bearing(i);
            let dir = [bearing.cos(), bearing.sin()];
            let mut best = reach;
            for offset in [hw, -hw] {
                if let Some(t) = ray_edge_hit(&world.track, offset, origin, dir, best) {
                    best = best.min(t);
                }
            }
            for r in &nearby {
                if let Some(t) = r.ray_hit(origin, dir) {
                    best = best.min(t);
                }
            }
            best.clamp(MIN_RANGE, reach)
        })
        .collect()
}

/// Nearest hit of a ray against the track edge at lateral offset `offset`.
fn ray_edge_hit(
    track: &Track,
    offset: f64,
    origin: [f64; 2],
    dir: [f64; 2],
    max_t: f64,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut keep = |t: f64| {
        if t >= 0.0 && t <= max_t && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    for seg in track.segments() {
        let h0 = seg.start.heading;
        if seg.curvature == 0.0 {
            let (s, c) = h0.sin_cos();
            let a = [seg.start.x - offset * s, seg.start.y + offset * c];
            let e = [c * seg.length, s * seg.length];
            // Solve origin + t·dir = a + u·e.
            let denom = dir[0] * e[1] - dir[1] * e[0];
            if denom.abs() < 1e-12 {
                continue;
            }
            let w = [a[0] - origin[0], a[1] - origin[1]];
            let t = (w[0] * e[1] - w[1] * e[0]) / denom;
            let u = (w[0] * dir[1] - w[1] * dir[0]) / denom;
            if (0.0..=1.0).contains(&u) {
                keep(t);
            }
        } else {
            let k = seg.curvature;
            let c = seg.arc_center();
            let radius = (1.0 / k - offset).abs();
            let a0 = (seg.start.y - c[1]).atan2(seg.start.x - c[0]);
            let span = seg.length * k.abs();
            let w = [origin[0] - c[0], origin[1] - c[1]];
            let b = w[0] * dir[0] + w[1] * dir[1];
            let cc = w[0] * w[0] + w[1] * w[1] - radius * radius;
            let disc = b * b - cc;
            if disc < 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            for t in [-b - sq, -b + sq] {
                if t < 0.0 || t > max_t {
                    continue;
                }
                let p = [origin[0] + t * dir[0] - c[0], origin[1] + t * dir[1] - c[1]];
                let a = p[1].atan2(p[0]);
                let swept = if k > 0.0 { a - a0 } else { a0 - a };
                if swept.rem_euclid(2.0 * PI) <= span + 1e-12 {
                    keep(t);
                }
            }
        }
    }
    best
}

/// Classifies the current ego placement. Obstacle contact wins over off-road.
pub fn check_collision(world: &WorldState) -> CollisionKind {
    let ego = world.ego_rect();
    let reach = ego.half_length.hypot(ego.half_width);
    for r in &world.obstacle_rects {
        let near = (r.center[0] - ego.center[0]).hypot(r.center[1] - ego.center[1])
            <= reach + r.half_length.hypot(r.half_width);
        if near && ego.intersects(r) {
            return CollisionKind::Obstacle;
        }
    }
    let hw = world.track.half_width();
    for corner in ego.corners() {
        match world.track.world_to_frenet(corner) {
            Ok(fc) if fc.d.abs() <= hw => {}
            _ => return CollisionKind::OffRoad,
        }
    }
    CollisionKind::None
}

/// One line of an exported episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub track_id: u32,
    pub episode: usize,
    pub t: f64,
    pub pose: Pose,
    pub speed: f64,
    pub action: Action,
    pub collision_kind: CollisionKind,
    /// Distance driven since episode start, meters.
    pub odometer: f64,
    /// Set on the final record of an episode ended by a stall.
    #[serde(default)]
    pub stalled: bool,
}

pub fn write_trace<W: Write>(out: &mut W, records: &[TraceRecord]) -> Result<(), SimError> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: std::io::BufRead>(input: R) -> Result<Vec<TraceRecord>, SimError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{SegmentSpec, TrackSpec};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight_track(len: f64) -> Arc<Track> {
        Arc::new(
            Track::new(TrackSpec {
                segments: vec![SegmentSpec::straight(len)],
                lane_width: 3.5,
                num_lanes: 2,
                closed: false,
            })
            .unwrap(),
        )
    }

    fn ego_at(x: f64, y: f64, heading: f64, speed: f64) -> VehicleState {
        VehicleState { pose: Pose::new(x, y, heading), speed, wheelbase: 2.7 }
    }

    #[test]
    fn straight_coasting() {
        let s = step(&ego_at(0.0, 0.0, 0.0, 10.0), &Action::new(0.0, 0.0), 0.1, 30.0);
        assert_abs_diff_eq!(s.pose.x, 1.0, epsilon = 1e-12);
        assert_eq!(s.pose.y, 0.0);
        assert_eq!(s.pose.heading, 0.0);
        assert_eq!(s.speed, 10.0);
    }

    #[test]
    fn no_reverse() {
        let s = step(&ego_at(0.0, 0.0, 0.0, 0.0), &Action::new(0.0, -1.0), 0.1, 30.0);
        assert_eq!(s.speed, 0.0);
    }

    #[test]
    fn steady_steer_traces_bicycle_circle() {
        let delta: f64 = 0.1;
        let expected = 2.7 / delta.tan();
        let mut s = ego_at(0.0, 0.0, 0.0, 5.0);
        let dt = 1e-3;
        let action = Action::new(delta, 0.0);
        let mut pts = Vec::new();
        for _ in 0..20_000 {
            s = step(&s, &action, dt, 30.0);
            pts.push(s.pose.position());
        }
        // Center should be at (0, R); every point should sit on radius R.
        let worst = pts
            .iter()
            .map(|p| ((p[0]).hypot(p[1] - expected) - expected).abs() / expected)
            .fold(0.0, f64::max);
        assert!(worst < 0.01, "radius deviation {worst}");
    }

    #[test]
    fn action_clamps() {
        let a = Action::new(2.0, -20.0);
        assert_eq!(a, Action { steer: 0.5, accel: -6.0 });
        assert!(a.is_within(&ActionLimits::default()));
    }

    #[test]
    fn degenerate_spacing_places_evenly() {
        let track = straight_track(1000.0);
        let cfg = DensityConfig { spacing_min: 100.0, spacing_max: 100.0, ..Default::default() };
        let obs = place_obstacles(&track, &mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
        let s: Vec<f64> = obs.iter().map(|o| o.frenet.s).collect();
        let expected: Vec<f64> = (0..9).map(|i| 100.0 + 100.0 * i as f64).collect();
        assert_eq!(s, expected);
    }

    #[test]
    fn too_many_obstacles_rejected() {
        let track = straight_track(1000.0);
        let cfg = DensityConfig { count: Some(((1000.0 - 100.0) / 50.0) as usize + 1), ..Default::default() };
        assert!(matches!(
            place_obstacles(&track, &mut ChaCha8Rng::seed_from_u64(1), &cfg),
            Err(SimError::TooManyObstacles { .. })
        ));
    }

    #[test]
    fn exact_count_respects_spacing() {
        let track = straight_track(2000.0);
        let cfg = DensityConfig { count: Some(30), ..Default::default() };
        for seed in 0..20 {
            let obs = place_obstacles(&track, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
            assert_eq!(obs.len(), 30);
            for w in obs.windows(2) {
                let gap = w[1].frenet.s - w[0].frenet.s;
                assert!((50.0..=200.0).contains(&gap), "gap {gap}");
            }
            assert!(obs.last().unwrap().frenet.s <= 2000.0);
        }
    }

    #[test]
    fn forward_beam_sees_nothing_on_empty_road() {
        let track = straight_track(500.0);
        let world =
            WorldState::new(track, vec![], ego_at(10.0, -1.75, 0.0, 10.0), Default::default()).unwrap();
        let sensor = SensorConfig::default();
        let ranges = cast_rays(&world, &world.ego.pose, &sensor);
        assert_eq!(ranges[sensor.n_beams / 2], sensor.max_range);
    }

    #[test]
    fn forward_beam_hits_obstacle_face() {
        let track = straight_track(500.0);
        let ob = Obstacle { frenet: FrenetCoord { s: 32.25, d: -1.75 }, half_length: 2.25, half_width: 0.9 };
        let world =
            WorldState::new(track, vec![ob], ego_at(10.0, -1.75, 0.0, 10.0), Default::default()).unwrap();
        let ranges = cast_rays(&world, &world.ego.pose, &SensorConfig::default());
        assert_abs_diff_eq!(ranges[9], 20.0, epsilon = 1e-6);
    }

    #[test]
    fn side_beam_hits_right_edge() {
        let track = straight_track(500.0);
        let world =
            WorldState::new(track, vec![], ego_at(10.0, -2.0, 0.0, 10.0), Default::default()).unwrap();
        let ranges = cast_rays(&world, &world.ego.pose, &SensorConfig::default());
        // Beam 0 points at -π/2: straight at the right edge (y = -3.5).
        assert_abs_diff_eq!(ranges[0], 1.5, epsilon = 1e-6);
        assert_abs_diff_eq!(ranges[18], 5.5, epsilon = 1e-6);
    }

    #[test]
    fn beam_hits_curved_edge() {
        let r = 100.0;
        let track = Arc::new(
            Track::new(TrackSpec {
                segments: vec![SegmentSpec::arc(2.0 * PI * r, 1.0 / r)],
                lane_width: 3.5,
                num_lanes: 2,
                closed: true,
            })
            .unwrap(),
        );
        // At the start (0,0) heading 0; the left beam points at the center (0, 100).
        let world =
            WorldState::new(track, vec![], ego_at(0.0, 0.0, 0.0, 10.0), Default::default()).unwrap();
        let ranges = cast_rays(&world, &world.ego.pose, &SensorConfig::default());
        assert_abs_diff_eq!(ranges[18], 3.5, epsilon = 1e-9);
        assert_abs_diff_eq!(ranges[0], 3.5, epsilon = 1e-9);
        // Forward beam chord to the outer edge circle of radius 103.5.
        let expected = (103.5f64.powi(2) - 100.0f64.powi(2)).sqrt();
        assert_abs_diff_eq!(ranges[9], expected.min(60.0), epsilon = 1e-9);
    }

    #[test]
    fn collision_cases() {
        let track = straight_track(500.0);
        let world =
            WorldState::new(track.clone(), vec![], ego_at(10.0, -1.75, 0.0, 10.0), Default::default())
                .unwrap();
        assert_eq!(check_collision(&world), CollisionKind::None);

        let ob = Obstacle { frenet: FrenetCoord { s: 50.0, d: -1.75 }, half_length: 2.25, half_width: 0.9 };
        let world =
            WorldState::new(track.clone(), vec![ob], ego_at(50.0, -1.75, 0.0, 10.0), Default::default())
                .unwrap();
        assert_eq!(check_collision(&world), CollisionKind::Obstacle);

        // Corner at d = -(3.5 + 0.01): center at -(3.5 + 0.01 - 0.9).
        let world =
            WorldState::new(track.clone(), vec![], ego_at(10.0, -(3.51 - 0.9), 0.0, 10.0), Default::default())
                .unwrap();
        assert_eq!(check_collision(&world), CollisionKind::OffRoad);
        let world =
            WorldState::new(track.clone(), vec![], ego_at(10.0, -(3.49 - 0.9), 0.0, 10.0), Default::default())
                .unwrap();
        assert_eq!(check_collision(&world), CollisionKind::None);

        // Both: obstacle wins.
        let ob = Obstacle { frenet: FrenetCoord { s: 50.0, d: -2.6 }, half_length: 2.25, half_width: 0.9 };
        let world =
            WorldState::new(track, vec![ob], ego_at(50.0, -2.7, 0.0, 10.0), Default::default()).unwrap();
        assert_eq!(check_collision(&world), CollisionKind::Obstacle);
    }

    #[test]
    fn rect_overlap_rotated() {
        let a = OrientedRect { center: [0.0, 0.0], heading: 0.0, half_length: 2.0, half_width: 1.0 };
        // b's axis passes (1.91, -0.99) inside a.
        let b = OrientedRect { center: [2.9, 0.0], heading: PI / 4.0, half_length: 2.0, half_width: 0.1 };
        assert!(a.intersects(&b));
        let c = OrientedRect { center: [3.5, 0.0], heading: PI / 4.0, half_length: 2.0, half_width: 0.1 };
        assert!(!a.intersects(&c));
    }

    proptest::proptest! {
        #[test]
        fn clamped_actions_stay_within_limits(steer in -5.0f64..5.0, accel in -50.0f64..50.0) {
            let limits = ActionLimits::default();
            proptest::prop_assert!(Action::clamped(steer, accel, &limits).is_within(&limits));
        }

        #[test]
        fn speed_never_goes_negative(v in 0.0f64..40.0, accel in -20.0f64..20.0, steer in -0.5f64..0.5) {
            let s = step(&ego_at(0.0, 0.0, 0.3, v), &Action { steer, accel }, 0.02, 40.0);
            proptest::prop_assert!(s.speed >= 0.0 && s.speed <= 40.0);
        }

        #[test]
        fn beam_ranges_are_positive_and_capped(x in 5.0f64..400.0, y in -3.0f64..3.0, h in -0.6f64..0.6) {
            let world = WorldState::new(straight_track(500.0), vec![], ego_at(x, y, h, 10.0), Default::default()).unwrap();
            let sensor = SensorConfig::default();
            let ranges = cast_rays(&world, &world.ego.pose, &sensor);
            proptest::prop_assert_eq!(ranges.len(), sensor.n_beams);
            proptest::prop_assert!(ranges.iter().all(|&r| r > 0.0 && r <= sensor.max_range));
        }
    }
}
