//! Rule-based demonstrator: a four-state overtaking FSM on top of a
//! lane-keeping PD controller, affordance extraction, and the demonstration
//! recorder that turns expert episodes into labeled trajectory datasets.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::InputScaling;
use crate::geometry::{wrap_angle, world_to_car_frame, FrenetCoord, GeometryError, Pose, Track};
use crate::simulator::{
    check_collision, place_obstacles, Action, ActionLimits, CollisionKind, DensityConfig,
    Observation, SensorConfig, SimError, VehicleParams, VehicleState, WorldState, DT_SIM,
};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("train and validation track ids overlap: {0:?}")]
    TrackOverlap(Vec<u32>),
    #[error("bad recording config: {0}")]
    Config(String),
    #[error("expert collided ({kind:?}) on track {track_id} episode {episode} at t={t:.2}s")]
    ExpertCollision { track_id: u32, episode: usize, t: f64, kind: CollisionKind },
}

/// Tunables of the demonstrator. Defaults are desk-scale choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub v_cruise: f64,
    pub friction_mu: f64,
    pub kappa_floor: f64,
    /// Deceleration assumed when anticipating curves ahead, m/s².
    pub curve_decel: f64,
    pub curve_lookahead: f64,
    /// Lateral closed-loop natural frequency (rad/s) and damping.
    pub lateral_omega: f64,
    pub lateral_zeta: f64,
    /// Lateral error fed to the PD is saturated to this magnitude, meters.
    pub lateral_error_cap: f64,
    pub speed_gain: f64,
    /// Deceleration used to size the following distance behind obstacles.
    pub follow_decel: f64,
    /// Bumper-to-bumper distance kept when stopped behind an obstacle.
    pub follow_margin: f64,
    /// Obstacles farther ahead than this are ignored, so braking only starts
    /// once the obstacle is within sensor reach.
    pub reaction_range: f64,
    /// Conservative lateral convergence rate used to predict where the ego
    /// will be when it reaches an obstacle, 1/s.
    pub lateral_rate: f64,
    pub trigger_min: f64,
    pub trigger_max: f64,
    pub return_clear_min: f64,
    pub return_clear_max: f64,
    pub center_tolerance: f64,
    /// Arc length behind the ego that must be free before moving into a lane.
    pub clear_behind: f64,
    pub steer_noise_std: f64,
    pub speed_noise_std: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            v_cruise: 22.0,
            friction_mu: 0.7,
            kappa_floor: 1e-4,
            curve_decel: 2.0,
            curve_lookahead: 120.0,
            lateral_omega: 3.0,
            lateral_zeta: 0.7,
            lateral_error_cap: 3.0,
            speed_gain: 2.0,
            follow_decel: 4.0,
            follow_margin: 4.0,
            reaction_range: 55.0,
            lateral_rate: 1.5,
            trigger_min: 25.0,
            trigger_max: 45.0,
            return_clear_min: 8.0,
            return_clear_max: 20.0,
            center_tolerance: 0.3,
            clear_behind: 10.0,
            steer_noise_std: 0.01,
            speed_noise_std: 0.5,
        }
    }
}

impl ExpertConfig {
    pub fn noiseless(mut self) -> Self {
        self.steer_noise_std = 0.0;
        self.speed_noise_std = 0.0;
        self
    }

    /// Distance needed to move back into the original lane, meters.
    fn return_distance(&self, speed: f64) -> f64 {
        speed.max(5.0) * 1.2 + 10.0
    }
}

/// Curvature- and friction-bounded speed limit.
pub fn speed_limit(curvature: f64, friction_mu: f64, v_cruise: f64, kappa_floor: f64) -> f64 {
    assert!(friction_mu > 0.0, "friction must be positive");
    v_cruise.min((friction_mu * GRAVITY / curvature.abs().max(kappa_floor)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsmPhase {
    LaneKeep,
    Initiate,
    Passing,
    Return,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FsmState {
    pub phase: FsmPhase,
    pub overtake_trigger_dist: f64,
    pub return_clear_dist: f64,
    pub original_lane: usize,
    pub passing_lane: usize,
}

impl FsmState {
    pub fn new<R: Rng + ?Sized>(lane: usize, cfg: &ExpertConfig, rng: &mut R) -> Self {
        Self {
            phase: FsmPhase::LaneKeep,
            overtake_trigger_dist: rng.random_range(cfg.trigger_min..=cfg.trigger_max),
            return_clear_dist: rng.random_range(cfg.return_clear_min..=cfg.return_clear_max),
            original_lane: lane,
            passing_lane: lane,
        }
    }

    /// Lane the lateral controller currently steers toward.
    pub fn target_lane(&self) -> usize {
        match self.phase {
            FsmPhase::LaneKeep | FsmPhase::Return => self.original_lane,
            FsmPhase::Initiate | FsmPhase::Passing => self.passing_lane,
        }
    }
}

fn adjacent_lane(track: &Track, lane: usize) -> usize {
    if lane + 1 < track.num_lanes() {
        lane + 1
    } else {
        lane - 1
    }
}

/// Lanes directly left and right of `lane` that exist on the track.
fn neighbor_lanes(track: &Track, lane: usize) -> impl Iterator<Item = usize> {
    let left = (lane + 1 < track.num_lanes()).then_some(lane + 1);
    let right = lane.checked_sub(1);
    left.into_iter().chain(right)
}

/// Signed arc-length gaps (obstacle minus ego) of obstacles in `lane`.
fn lane_gaps<'a>(world: &'a WorldState, ego_s: f64, lane: usize) -> impl Iterator<Item = f64> + 'a {
    world
        .obstacles()
        .iter()
        .filter(move |o| world.track.lane_of(o.frenet.d) == lane)
        .map(move |o| world.track.s_gap(ego_s, o.frenet.s))
}

/// Gap to the nearest obstacle strictly ahead in `lane`.
fn gap_ahead(world: &WorldState, ego_s: f64, lane: usize) -> Option<f64> {
    lane_gaps(world, ego_s, lane).filter(|g| *g > 0.0).min_by(f64::total_cmp)
}

fn lane_clear(world: &WorldState, ego_s: f64, lane: usize, from: f64, to: f64) -> bool {
    !lane_gaps(world, ego_s, lane).any(|g| g >= from && g <= to)
}

/// Advances the overtaking state machine by one tick.
pub fn fsm_step<R: Rng + ?Sized>(
    fsm: &FsmState,
    world: &WorldState,
    cfg: &ExpertConfig,
    rng: &mut R,
) -> Result<FsmState, GeometryError> {
    let fc = world.ego_frenet()?;
    let track = &world.track;
    let speed = world.ego.speed;
    let mut next = *fsm;
    match fsm.phase {
        FsmPhase::LaneKeep => {
            let lane = fsm.original_lane;
            if let Some(gap) = gap_ahead(world, fc.s, lane) {
                let needed = gap + cfg.return_clear_min + cfg.return_distance(speed) + 5.0;
                if gap < fsm.overtake_trigger_dist {
                    // Pass on either side when both are free.
                    let open: Vec<usize> = neighbor_lanes(track, lane)
                        .filter(|&l| lane_clear(world, fc.s, l, -cfg.clear_behind, needed))
                        .collect();
                    if !open.is_empty() {
                        let passing = open[rng.random_range(0..open.len())];
                        next.phase = FsmPhase::Initiate;
                        next.passing_lane = passing;
                        next.overtake_trigger_dist =
                            rng.random_range(cfg.trigger_min..=cfg.trigger_max);
                        let drawn = rng.random_range(cfg.return_clear_min..=cfg.return_clear_max);
                        // The return must finish before the next obstacle in the passing lane.
                        let room = gap_ahead(world, fc.s, passing)
                            .map(|g| g - gap - cfg.return_distance(speed) - 5.0)
                            .unwrap_or(f64::INFINITY);
                        next.return_clear_dist = drawn.min(room).max(cfg.return_clear_min);
                    }
                }
            }
        }
        FsmPhase::Initiate => {
            if (fc.d - track.lane_center(fsm.passing_lane)).abs() < cfg.center_tolerance {
                next.phase = FsmPhase::Passing;
            }
        }
        FsmPhase::Passing => {
            let lane = fsm.original_lane;
            let ret = cfg.return_distance(speed);
            // Urgent return: something blocks the passing lane ahead.
            let urgent = gap_ahead(world, fc.s, fsm.passing_lane).is_some_and(|g| g < ret + 15.0);
            let behind = if urgent { 6.0 } else { fsm.return_clear_dist };
            if lane_clear(world, fc.s, lane, -behind, ret) {
                next.phase = FsmPhase::Return;
            }
        }
        FsmPhase::Return => {
            if (fc.d - track.lane_center(fsm.original_lane)).abs() < cfg.center_tolerance {
                next.phase = FsmPhase::LaneKeep;
                next.passing_lane = fsm.original_lane;
            }
        }
    }
    Ok(next)
}

/// Speed bound from curvature ahead, assuming `curve_decel` braking.
pub fn anticipated_speed_limit(track: &Track, s: f64, cfg: &ExpertConfig) -> Result<f64, GeometryError> {
    let mut v = f64::INFINITY;
    let step = 2.0;
    let n = (cfg.curve_lookahead / step).ceil() as usize;
    for i in 0..=n {
        let ahead = i as f64 * step;
        let s_i = s + ahead;
        if !track.is_closed() && s_i > track.total_length() {
            break;
        }
        let k = track.curvature_at(s_i)?;
        let lim = speed_limit(k, cfg.friction_mu, cfg.v_cruise, cfg.kappa_floor);
        v = v.min((lim * lim + 2.0 * cfg.curve_decel * ahead).sqrt());
    }
    Ok(v)
}

/// Speed that still allows stopping behind any obstacle the ego is predicted
/// to overlap laterally when it gets there.
pub fn following_speed_limit(
    world: &WorldState,
    fc: FrenetCoord,
    target_d: f64,
    cfg: &ExpertConfig,
) -> f64 {
    let ego_half_len = 0.5 * world.vehicle.length;
    let ego_half_w = 0.5 * world.vehicle.width;
    let v = world.ego.speed.max(1.0);
    let mut limit = f64::INFINITY;
    for o in world.obstacles() {
        let gap = world.track.s_gap(fc.s, o.frenet.s);
        let contact = ego_half_len + o.half_length;
        if gap <= -contact || gap > cfg.reaction_range {
            continue;
        }
        let bumper = gap - contact;
        let t = (bumper.max(0.0)) / v;
        let d_pred = target_d + (fc.d - target_d) * (-cfg.lateral_rate * t).exp();
        // The lateral band swept between now and then must clear the obstacle.
        let lo = d_pred.min(fc.d) - ego_half_w - 0.2;
        let hi = d_pred.max(fc.d) - ego_half_w - 0.2 + 2.0 * ego_half_w + 0.4;
        let (olo, ohi) = (o.frenet.d - o.half_width, o.frenet.d + o.half_width);
        let overlaps_path = hi > olo && lo < ohi;
        let lateral_pred_overlap = (d_pred - o.frenet.d).abs() < ego_half_w + o.half_width + 0.2;
        if overlaps_path && lateral_pred_overlap {
            let room = (bumper - cfg.follow_margin).max(0.0);
            limit = limit.min((2.0 * cfg.follow_decel * room).sqrt());
        }
    }
    limit
}

/// PD lane keeping toward `target_lane` plus curvature feed-forward and a P
/// speed loop. Gains are scheduled on speed so the lateral error obeys a
/// second-order response with the configured frequency and damping.
pub fn lane_keep_action<R: Rng + ?Sized>(
    world: &WorldState,
    target_lane: usize,
    v_target: f64,
    cfg: &ExpertConfig,
    limits: &ActionLimits,
    noise_rng: Option<&mut R>,
) -> Result<Action, GeometryError> {
    let fc = world.ego_frenet()?;
    let road = world.track.pose_at(fc.s)?;
    let kappa = world.track.curvature_at(fc.s)?;
    let wheelbase = world.ego.wheelbase;
    let v = world.ego.speed.max(5.0);
    let err = (fc.d - world.track.lane_center(target_lane))
        .clamp(-cfg.lateral_error_cap, cfg.lateral_error_cap);
    let heading_err = wrap_angle(world.ego.pose.heading - road.heading);
    let (w, z) = (cfg.lateral_omega, cfg.lateral_zeta);
    let feedforward = (wheelbase * kappa).atan();
    let mut steer = feedforward - wheelbase / v * (2.0 * z * w * heading_err) - wheelbase * w * w / (v * v) * err;
    let mut accel = cfg.speed_gain * (v_target - world.ego.speed);
    if let Some(rng) = noise_rng {
        if cfg.steer_noise_std > 0.0 {
            steer += Normal::new(0.0, cfg.steer_noise_std).expect("finite std").sample(rng);
        }
    }
    if !accel.is_finite() {
        accel = 0.0;
    }
    Ok(Action::clamped(steer, accel, limits))
}

/// Affordance indicators used as the auxiliary learning target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffordanceVector {
    pub heading_error: f64,
    pub lateral_offset: f64,
    pub dist_left_mark: f64,
    pub dist_right_mark: f64,
    pub dist_ahead_same_lane: f64,
    pub dist_ahead_adjacent_lane: f64,
}

impl AffordanceVector {
    pub const DIM: usize = 6;

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.heading_error,
            self.lateral_offset,
            self.dist_left_mark,
            self.dist_right_mark,
            self.dist_ahead_same_lane,
            self.dist_ahead_adjacent_lane,
        ]
    }
}

pub fn compute_affordance(world: &WorldState, max_range: f64) -> Result<AffordanceVector, GeometryError> {
    let track = &world.track;
    let fc = world.ego_frenet()?;
    let road = track.pose_at(fc.s)?;
    let lane = track.lane_of(fc.d);
    let right_mark = track.lane_center(lane) - 0.5 * track.lane_width();
    let left_mark = right_mark + track.lane_width();
    let ahead = |lane| gap_ahead(world, fc.s, lane).unwrap_or(max_range).min(max_range);
    Ok(AffordanceVector {
        heading_error: wrap_angle(world.ego.pose.heading - road.heading),
        lateral_offset: fc.d,
        dist_left_mark: (left_mark - fc.d).max(0.0),
        dist_right_mark: (fc.d - right_mark).max(0.0),
        dist_ahead_same_lane: ahead(lane),
        dist_ahead_adjacent_lane: ahead(adjacent_lane(track, lane)),
    })
}

/// The demonstrator: FSM, noise stream and configuration for one episode.
#[derive(Debug, Clone)]
pub struct Expert {
    pub cfg: ExpertConfig,
    pub limits: ActionLimits,
    pub fsm: FsmState,
    rng: ChaCha8Rng,
    speed_noise: f64,
}

impl Expert {
    pub fn new(cfg: ExpertConfig, limits: ActionLimits, lane: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fsm = FsmState::new(lane, &cfg, &mut rng);
        Self { cfg, limits, fsm, rng, speed_noise: 0.0 }
    }

    /// Redraws the target-speed perturbation; called once per sample tick.
    pub fn resample_speed_noise(&mut self) {
        self.speed_noise = if self.cfg.speed_noise_std > 0.0 {
            Normal::new(0.0, self.cfg.speed_noise_std).expect("finite std").sample(&mut self.rng)
        } else {
            0.0
        };
    }

    /// Updates the FSM and returns the action for the next simulator step.
    pub fn act(&mut self, world: &WorldState) -> Result<Action, GeometryError> {
        self.fsm = fsm_step(&self.fsm, world, &self.cfg, &mut self.rng)?;
        let fc = world.ego_frenet()?;
        let target_lane = self.fsm.target_lane();
        let target_d = world.track.lane_center(target_lane);
        let v_curve = anticipated_speed_limit(&world.track, fc.s, &self.cfg)?;
        let v_follow = following_speed_limit(world, fc, target_d, &self.cfg);
        let v_target = (v_curve.min(v_follow) + self.speed_noise).max(0.0);
        let v_target = v_target.min(v_curve).min(v_follow);
        lane_keep_action(world, target_lane, v_target, &self.cfg, &self.limits, Some(&mut self.rng))
    }
}

/// Executed expert action used as the behavioral-cloning actuation target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuationLabel {
    pub steer: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub track_id: u32,
    pub episode: usize,
    pub t: f64,
    pub fsm_state: FsmPhase,
    /// Expert action executed from this tick; consumed by the actuation baseline.
    #[serde(default)]
    pub action: Option<Action>,
    /// World pose at this tick, kept so labels can be re-derived.
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub observation: Observation,
    pub trajectory: Vec<[f64; 2]>,
    pub affordance: AffordanceVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actuation: Option<ActuationLabel>,
    pub meta: DemoMeta,
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub k: usize,
    pub dt_label: f64,
    pub n_beams: usize,
    /// Range features are divided by this before entering the network.
    pub range_scale: f64,
    /// Speed feature is divided by this before entering the network.
    pub speed_scale: f64,
    pub train_tracks: Vec<u32>,
    pub val_tracks: Vec<u32>,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Demonstration>,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Demonstration> {
        self.records.iter().filter(|r| self.header.train_tracks.contains(&r.meta.track_id))
    }

    pub fn val(&self) -> impl Iterator<Item = &Demonstration> {
        self.records.iter().filter(|r| self.header.val_tracks.contains(&r.meta.track_id))
    }

    pub fn input_scaling(&self) -> InputScaling {
        InputScaling::new(self.header.n_beams, self.header.range_scale, self.header.speed_scale)
    }

    pub fn write_jsonl<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(input: R) -> std::io::Result<Self> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "empty dataset"))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported dataset schema {}", header.schema_version),
            ));
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { header, records })
    }
}

/// Demonstration recording parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordingConfig {
    pub samples: usize,
    pub train_fraction: f64,
    pub k: usize,
    pub dt_label: f64,
    /// Interval between logged samples, seconds.
    pub sample_tick: f64,
    pub episode_duration: f64,
    pub start_speed: f64,
    /// Lane the ego starts in and returns to; the middle lane when absent.
    pub start_lane: Option<usize>,
    /// Fraction of episodes recorded on an empty track.
    pub empty_episode_fraction: f64,
    pub expert: ExpertConfig,
    pub limits: ActionLimits,
    pub vehicle: VehicleParams,
    pub sensor: SensorConfig,
    pub density: DensityConfig,
}

impl Default for RecordingConfig {
    fn default() -> Self {
        Self {
            samples: 50_000,
            train_fraction: 0.7,
            k: 5,
            dt_label: 0.3,
            sample_tick: 0.1,
            episode_duration: 60.0,
            start_speed: 15.0,
            start_lane: None,
            empty_episode_fraction: 0.25,
            expert: ExpertConfig::default(),
            limits: ActionLimits::default(),
            vehicle: VehicleParams::default(),
            sensor: SensorConfig::default(),
            density: DensityConfig::default(),
        }
    }
}

impl RecordingConfig {
    pub fn start_lane(&self, track: &Track) -> usize {
        self.start_lane.unwrap_or(track.num_lanes() / 2).min(track.num_lanes() - 1)
    }

    /// Simulator steps per sample tick.
    pub fn steps_per_tick(&self) -> Result<usize, ExpertError> {
        ratio(self.sample_tick, DT_SIM, "sample_tick / dt_sim")
    }

    /// Sample ticks between consecutive trajectory label points.
    pub fn ticks_per_label(&self) -> Result<usize, ExpertError> {
        ratio(self.dt_label, self.sample_tick, "dt_label / sample_tick")
    }
}

fn ratio(num: f64, den: f64, what: &str) -> Result<usize, ExpertError> {
    let r = num / den;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-9 {
        return Err(ExpertError::Config(format!("{what} = {r} must be a positive integer")));
    }
    Ok(n as usize)
}

/// Mixes a master seed with stream indices into an independent 64-bit seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut x = master ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = splitmix(x ^ splitmix(p.wrapping_add(0xD1B5_4A32_D192_ED03)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A track handed to the recorder.
#[derive(Debug, Clone)]
pub struct TrackEntry {
    pub id: u32,
    pub track: Arc<Track>,
}

/// Raw per-tick log of one expert episode.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub track_id: u32,
    pub episode: usize,
    pub ticks: Vec<TickLog>,
    pub collision: Option<(f64, CollisionKind)>,
}

#[derive(Debug, Clone)]
pub struct TickLog {
    pub t: f64,
    pub pose: Pose,
    pub observation: Observation,
    pub affordance: AffordanceVector,
    pub fsm_state: FsmPhase,
    pub action: Action,
}

/// Builds the world for a recording or evaluation episode: ego centered in
/// `lane` at `start_s`, obstacles drawn from `seed` and placed relative to
/// the start so the clear zone lies ahead of the ego.
pub fn episode_world(
    track: Arc<Track>,
    density: Option<&DensityConfig>,
    vehicle: VehicleParams,
    start_speed: f64,
    lane: usize,
    start_s: f64,
    seed: u64,
) -> Result<WorldState, ExpertError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obstacles = match density {
        Some(d) => place_obstacles(&track, &mut rng, d)?,
        None => Vec::new(),
    };
    let start_s = track.wrap_s(start_s)?;
    if track.is_closed() {
        for o in &mut obstacles {
            o.frenet.s = track.wrap_s(o.frenet.s + start_s)?;
        }
    }
    let start = track.pose_at(start_s)?;
    let d0 = track.lane_center(lane);
    let p = track.frenet_to_world(FrenetCoord { s: start_s, d: d0 })?;
    let ego = VehicleState {
        pose: Pose::new(p[0], p[1], start.heading),
        speed: start_speed,
        wheelbase: vehicle.wheelbase,
    };
    Ok(WorldState::new(track, obstacles, ego, vehicle)?)
}

/// Uniform start arc length for an episode on a closed track; 0 otherwise.
pub fn episode_start_s(track: &Track, seed: u64) -> f64 {
    if track.is_closed() {
        unit_float(seed) * track.total_length()
    } else {
        0.0
    }
}

/// Runs one expert episode, logging every sample tick. Stops at the first
/// collision, which is reported in the log.
pub fn run_expert_episode(
    entry: &TrackEntry,
    episode: usize,
    cfg: &RecordingConfig,
    master_seed: u64,
) -> Result<EpisodeLog, ExpertError> {
    let steps_per_tick = cfg.steps_per_tick()?;
    let seed = derive_seed(master_seed, &[entry.id as u64, episode as u64]);
    let empty = unit_float(derive_seed(seed, &[1])) < cfg.empty_episode_fraction;
    let density = if empty { None } else { Some(&cfg.density) };
    let mut world = episode_world(
        entry.track.clone(),
        density,
        cfg.vehicle,
        cfg.start_speed,
        cfg.start_lane(&entry.track),
        episode_start_s(&entry.track, derive_seed(seed, &[4])),
        derive_seed(seed, &[2]),
    )?;
    let lane = cfg.start_lane(&entry.track);
    let mut expert = Expert::new(cfg.expert, cfg.limits, lane, derive_seed(seed, &[3]));
    let n_ticks = (cfg.episode_duration / cfg.sample_tick).round() as usize;
    let mut ticks = Vec::with_capacity(n_ticks + 1);
    let mut collision = None;
    'ticks: for tick in 0..=n_ticks {
        expert.resample_speed_noise();
        let pose = world.ego.pose;
        let observation = world.observe(&cfg.sensor);
        let affordance = compute_affordance(&world, cfg.sensor.max_range)?;
        let first = expert.act(&world)?;
        ticks.push(TickLog {
            t: tick as f64 * cfg.sample_tick,
            pose,
            observation,
            affordance,
            fsm_state: expert.fsm.phase,
            action: first,
        });
        if tick == n_ticks {
            break;
        }
        for step in 0..steps_per_tick {
            let action = if step == 0 { first } else { expert.act(&world)? };
            world.advance(&action, DT_SIM, &cfg.limits);
            let kind = check_collision(&world);
            if kind.is_collision() {
                collision = Some((world.sim_time, kind));
                break 'ticks;
            }
        }
    }
    Ok(EpisodeLog { track_id: entry.id, episode, ticks, collision })
}

pub(crate) fn unit_float(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Turns an episode log into labeled demonstrations. Each record's label is
/// the realized future positions at `dt_label` spacing, expressed in that
/// record's ego frame; records whose label horizon runs past the end of the
/// log are dropped.
pub fn label_episode(log: &EpisodeLog, k: usize, ticks_per_label: usize) -> Vec<Demonstration> {
    let horizon = k * ticks_per_label;
    if log.ticks.len() <= horizon {
        return Vec::new();
    }
    (0..log.ticks.len() - horizon)
        .map(|i| {
            let now = &log.ticks[i];
            let trajectory = (1..=k)
                .map(|j| world_to_car_frame(&now.pose, log.ticks[i + j * ticks_per_label].pose.position()))
                .collect();
            Demonstration {
                observation: now.observation.clone(),
                trajectory,
                affordance: now.affordance,
                actuation: None,
                meta: DemoMeta {
                    track_id: log.track_id,
                    episode: log.episode,
                    t: now.t,
                    fsm_state: now.fsm_state,
                    action: Some(now.action),
                    pose: now.pose,
                },
            }
        })
        .collect()
}

/// Outcome of a recording run besides the dataset itself.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordingReport {
    pub episodes: usize,
    pub expert_collisions: Vec<String>,
}

/// Records expert demonstrations on the given train and validation tracks.
/// Sample budgets are split `train_fraction` / rest between the two track
/// sets and evenly across tracks within a set.
pub fn record_demonstrations(
    train: &[TrackEntry],
    val: &[TrackEntry],
    cfg: &RecordingConfig,
    master_seed: u64,
) -> Result<(Dataset, RecordingReport), ExpertError> {
    let overlap: Vec<u32> =
        train.iter().filter(|t| val.iter().any(|v| v.id == t.id)).map(|t| t.id).collect();
    if !overlap.is_empty() {
        return Err(ExpertError::TrackOverlap(overlap));
    }
    if train.is_empty() || val.is_empty() {
        return Err(ExpertError::Config("need at least one train and one validation track".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(ExpertError::Config(format!("train_fraction {}", cfg.train_fraction)));
    }
    let ticks_per_label = cfg.ticks_per_label()?;
    cfg.steps_per_tick()?;
    let n_train = (cfg.samples as f64 * cfg.train_fraction).round() as usize;
    let n_val = cfg.samples - n_train;
    let mut budgets = Vec::new();
    for (set, total) in [(train, n_train), (val, n_val)] {
        let base = total / set.len();
        let extra = total % set.len();
        for (i, entry) in set.iter().enumerate() {
            budgets.push((entry.clone(), base + usize::from(i < extra)));
        }
    }
    let n_ticks = (cfg.episode_duration / cfg.sample_tick).round() as usize;
    let per_episode = (n_ticks + 1).saturating_sub(cfg.k * ticks_per_label);
    if per_episode == 0 {
        return Err(ExpertError::Config("episode shorter than the label horizon".into()));
    }

    let mut report = RecordingReport::default();
    let mut records = Vec::with_capacity(cfg.samples);
    for (entry, budget) in budgets {
        let mut track_records: Vec<Demonstration> = Vec::with_capacity(budget);
        let mut next_episode = 0;
        while track_records.len() < budget {
            let missing = budget - track_records.len();
            let batch = missing.div_ceil(per_episode);
            let logs: Vec<Result<EpisodeLog, ExpertError>> = (next_episode..next_episode + batch)
                .into_par_iter()
                .map(|ep| run_expert_episode(&entry, ep, cfg, master_seed))
                .collect();
            next_episode += batch;
            for log in logs {
                let log = log?;
                report.episodes += 1;
                if let Some((t, kind)) = log.collision {
                    report.expert_collisions.push(
                        ExpertError::ExpertCollision { track_id: log.track_id, episode: log.episode, t, kind }
                            .to_string(),
                    );
                    continue;
                }
                track_records.extend(label_episode(&log, cfg.k, ticks_per_label));
            }
        }
        track_records.truncate(budget);
        records.extend(track_records);
    }
    records.sort_by(|a, b| {
        (a.meta.track_id, a.meta.episode)
            .cmp(&(b.meta.track_id, b.meta.episode))
            .then(a.meta.t.total_cmp(&b.meta.t))
    });
    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        k: cfg.k,
        dt_label: cfg.dt_label,
        n_beams: cfg.sensor.n_beams,
        range_scale: cfg.sensor.max_range,
        speed_scale: cfg.limits.v_hard_max,
        train_tracks: train.iter().map(|t| t.id).collect(),
        val_tracks: val.iter().map(|t| t.id).collect(),
        master_seed,
    };
    Ok((Dataset { header, records }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{SegmentSpec, TrackSpec};
    use crate::simulator::Obstacle;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn track(segments: Vec<SegmentSpec>, closed: bool) -> Arc<Track> {
        Arc::new(Track::new(TrackSpec { segments, lane_width: 3.5, num_lanes: 3, closed }).unwrap())
    }

    fn straight(len: f64) -> Arc<Track> {
        track(vec![SegmentSpec::straight(len)], false)
    }

    /// Ego in the middle lane at arc length `s`, offset `dd` from its center.
    fn world_at(t: Arc<Track>, s: f64, dd: f64, heading_off: f64, speed: f64, obstacles: Vec<Obstacle>) -> WorldState {
        let d = t.lane_center(1) + dd;
        let p = t.frenet_to_world(FrenetCoord { s, d }).unwrap();
        let h = t.pose_at(s).unwrap().heading + heading_off;
        let ego = VehicleState { pose: Pose::new(p[0], p[1], h), speed, wheelbase: 2.7 };
        WorldState::new(t, obstacles, ego, VehicleParams::default()).unwrap()
    }

    fn car(s: f64, d: f64) -> Obstacle {
        Obstacle { frenet: FrenetCoord { s, d }, half_length: 2.25, half_width: 0.9 }
    }

    const NO_NOISE: Option<&mut ChaCha8Rng> = None;

    #[test]
    fn speed_limit_examples() {
        assert_eq!(speed_limit(0.0, 0.7, 22.0, 1e-4), 22.0);
        assert_abs_diff_eq!(speed_limit(0.02, 0.7, 40.0, 1e-4), 18.53, epsilon = 5e-3);
        let (a, b) = (speed_limit(0.02, 0.7, 40.0, 1e-4), speed_limit(0.04, 0.7, 40.0, 1e-4));
        assert_abs_diff_eq!(a / b, 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn lane_keep_equilibrium_and_sign() {
        let cfg = ExpertConfig::default().noiseless();
        let limits = ActionLimits::default();
        let w = world_at(straight(500.0), 50.0, 0.0, 0.0, 20.0, vec![]);
        assert_eq!(lane_keep_action(&w, 1, 20.0, &cfg, &limits, NO_NOISE).unwrap(), Action::new(0.0, 0.0));
        let left = world_at(straight(500.0), 50.0, 1.0, 0.0, 20.0, vec![]);
        assert!(lane_keep_action(&left, 1, 20.0, &cfg, &limits, NO_NOISE).unwrap().steer < 0.0);
    }

    #[test]
    fn circle_steady_state() {
        let r = 150.0;
        let circle = track(vec![SegmentSpec::arc(2.0 * std::f64::consts::PI * r, 1.0 / r)], true);
        let cfg = ExpertConfig::default().noiseless();
        let limits = ActionLimits::default();
        let mut w = world_at(circle, 0.0, 0.0, 0.0, 15.0, vec![]);
        let steps = (10.0 / DT_SIM).round() as usize;
        for _ in 0..steps {
            let a = lane_keep_action(&w, 1, 15.0, &cfg, &limits, NO_NOISE).unwrap();
            w.advance(&a, DT_SIM, &limits);
        }
        let d = w.ego_frenet().unwrap().d - w.track.lane_center(1);
        assert!(d.abs() < 0.3, "offset {d}");
    }

    #[test]
    fn empty_road_keeps_lane() {
        let cfg = RecordingConfig::default();
        let mut w = world_at(straight(3000.0), 0.0, 0.0, 0.0, 20.0, vec![]);
        let mut ex = Expert::new(cfg.expert, cfg.limits, 1, 3);
        for _ in 0..3000 {
            let a = ex.act(&w).unwrap();
            assert_eq!(ex.fsm.phase, FsmPhase::LaneKeep);
            w.advance(&a, DT_SIM, &cfg.limits);
        }
    }

    #[test]
    fn trigger_fires_at_the_drawn_distance() {
        let cfg = ExpertConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fsm = FsmState::new(1, &cfg, &mut rng);
        fsm.overtake_trigger_dist = 30.0;
        let mut w = world_at(straight(1000.0), 0.0, 0.0, 0.0, 15.0, vec![car(100.0, 0.0)]);
        let mut prev_gap = f64::INFINITY;
        loop {
            let gap = 100.0 - w.ego_frenet().unwrap().s;
            let next = fsm_step(&fsm, &w, &cfg, &mut rng).unwrap();
            if next.phase == FsmPhase::Initiate {
                assert!(gap < 30.0 && prev_gap >= 30.0, "fired at gap {gap}, previous {prev_gap}");
                break;
            }
            assert!(gap > 0.0, "never fired");
            fsm = next;
            prev_gap = gap;
            w.advance(&Action::new(0.0, 0.0), DT_SIM, &ActionLimits::default());
        }
    }

    #[test]
    fn seeds_draw_different_triggers() {
        let cfg = ExpertConfig::default();
        let a = FsmState::new(1, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = FsmState::new(1, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        assert_ne!(a.overtake_trigger_dist, b.overtake_trigger_dist);
        for s in [a, b] {
            assert!((cfg.trigger_min..=cfg.trigger_max).contains(&s.overtake_trigger_dist));
        }
    }

    #[test]
    fn affordance_examples() {
        let t = straight(500.0);
        let a = compute_affordance(&world_at(t.clone(), 50.0, 0.0, 0.0, 10.0, vec![]), 60.0).unwrap();
        assert_eq!(a.to_vec(), vec![0.0, 0.0, 1.75, 1.75, 60.0, 60.0]);
        let b = compute_affordance(&world_at(t.clone(), 50.0, 0.0, 0.0, 10.0, vec![car(87.0, 0.0)]), 60.0).unwrap();
        assert_abs_diff_eq!(b.dist_ahead_same_lane, 37.0, epsilon = 1e-9);
        assert_eq!(b.dist_ahead_adjacent_lane, 60.0);
        let c = compute_affordance(&world_at(t, 50.0, 0.0, 0.1, 10.0, vec![]), 60.0).unwrap();
        assert_abs_diff_eq!(c.heading_error, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn straight_labels_follow_kinematics() {
        let mut cfg = RecordingConfig { start_speed: 22.0, empty_episode_fraction: 1.0, ..Default::default() };
        cfg.expert = cfg.expert.noiseless();
        let entry = TrackEntry { id: 0, track: straight(3000.0) };
        let log = run_expert_episode(&entry, 0, &cfg, 5).unwrap();
        assert!(log.collision.is_none());
        let recs = label_episode(&log, cfg.k, cfg.ticks_per_label().unwrap());
        // The last 1.5 s of the episode has no complete label.
        assert_eq!(recs.len(), log.ticks.len() - 15);
        assert_abs_diff_eq!(recs.last().unwrap().meta.t, cfg.episode_duration - 1.5, epsilon = 1e-9);
        for r in &recs {
            for (k, p) in r.trajectory.iter().enumerate() {
                assert_abs_diff_eq!(p[0], 22.0 * 0.3 * (k + 1) as f64, epsilon = 1e-6);
                assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn labels_match_future_poses() {
        let cfg = RecordingConfig::default();
        let t = track(
            vec![
                SegmentSpec::straight(200.0),
                SegmentSpec::arc(std::f64::consts::PI * 80.0, 1.0 / 80.0),
                SegmentSpec::straight(200.0),
                SegmentSpec::arc(std::f64::consts::PI * 80.0, 1.0 / 80.0),
            ],
            true,
        );
        let entry = TrackEntry { id: 3, track: t };
        let log = run_expert_episode(&entry, 1, &cfg, 9).unwrap();
        assert!(log.collision.is_none());
        let per = cfg.ticks_per_label().unwrap();
        for (i, r) in label_episode(&log, cfg.k, per).iter().enumerate().step_by(37) {
            for k in 0..cfg.k {
                let want = world_to_car_frame(&log.ticks[i].pose, log.ticks[i + (k + 1) * per].pose.position());
                assert_eq!(r.trajectory[k], want);
            }
            assert!(r.meta.action.unwrap().is_within(&cfg.limits));
        }
    }

    #[test]
    fn dataset_jsonl_roundtrip() {
        let cfg = RecordingConfig { samples: 400, ..Default::default() };
        let t = |id| TrackEntry { id, track: straight(3000.0) };
        let (ds, rep) = record_demonstrations(&[t(0)], &[t(1)], &cfg, 2).unwrap();
        assert_eq!(ds.records.len(), 400);
        assert_eq!(ds.train().count(), 280);
        assert!(rep.expert_collisions.is_empty());
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).lines().next().unwrap().contains("schema_version"));
        assert_eq!(Dataset::read_jsonl(&buf[..]).unwrap(), ds);
        assert!(matches!(record_demonstrations(&[t(0)], &[t(0)], &cfg, 2), Err(ExpertError::TrackOverlap(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        // Mark distances sum to the lane width whenever the ego is inside a lane.
        #[test]
        fn marks_sum_to_lane_width(s in 10.0f64..400.0, dd in -1.7f64..1.7, h in -0.3f64..0.3) {
            let a = compute_affordance(&world_at(straight(500.0), s, dd, h, 10.0, vec![]), 60.0).unwrap();
            prop_assert!((a.dist_left_mark + a.dist_right_mark - 3.5).abs() < 1e-6);
            prop_assert!(a.to_vec().iter().skip(2).all(|&x| x >= 0.0));
        }

        // The FSM only ever moves one step along the overtaking cycle.
        #[test]
        fn fsm_transitions_follow_the_cycle(seed in 0u64..1000, gap in 5.0f64..80.0, dd in -4.0f64..4.0) {
            let cfg = ExpertConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = straight(1000.0);
            let w = world_at(t, 100.0, dd, 0.0, 15.0, vec![car(100.0 + gap, 0.0)]);
            for phase in [FsmPhase::LaneKeep, FsmPhase::Initiate, FsmPhase::Passing, FsmPhase::Return] {
                let mut fsm = FsmState::new(1, &cfg, &mut rng);
                fsm.phase = phase;
                fsm.passing_lane = if phase == FsmPhase::LaneKeep { 1 } else { 2 };
                let next = fsm_step(&fsm, &w, &cfg, &mut rng).unwrap().phase;
                let successor = match phase {
                    FsmPhase::LaneKeep => FsmPhase::Initiate,
                    FsmPhase::Initiate => FsmPhase::Passing,
                    FsmPhase::Passing => FsmPhase::Return,
                    FsmPhase::Return => FsmPhase::LaneKeep,
                };
                prop_assert!(next == phase || next == successor, "{phase:?} -> {next:?}");
            }
        }
    }
}
