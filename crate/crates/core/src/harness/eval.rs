//! Closed-loop evaluation and controller replay.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::baseline::baseline_policy;
use crate::controller::{LqrConfig, LqrFollower, TimedPath};
use crate::expert::{
    derive_seed, episode_start_s, episode_world, run_expert_episode, Expert, RecordingConfig, TrackEntry,
};
use crate::geometry::{FrenetCoord, Pose};
use crate::harness::config::ExperimentConfig;
use crate::harness::HarnessError;
use crate::losses::{pairs, select_trajectory, GmmLayout};
use crate::network::{HeadKind, Model};
use crate::simulator::{check_collision, step, Action, CollisionKind, TraceRecord, VehicleState, WorldState, DT_SIM};

pub const METERS_PER_MILE: f64 = 1609.344;
const MPS_TO_MPH: f64 = 3600.0 / METERS_PER_MILE;

/// What drives the ego during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Agent<'a> {
    Expert,
    Model(&'a Model),
}

impl Agent<'_> {
    pub fn name(&self, fallback: &str) -> String {
        match self {
            Agent::Expert => "expert".into(),
            Agent::Model(_) => fallback.into(),
        }
    }
}

/// Output of the network at one replan tick, held until the next one.
#[derive(Debug, Clone)]
enum Plan {
    /// World-frame path with its planning origin at index 0.
    Path(TimedPath),
    Hold(Action),
    Expert,
}

/// Predicted trajectory in the ego frame (physical meters) for a model with
/// a GMM or linear trajectory head.
pub fn predict_trajectory(model: &Model, obs: &crate::simulator::Observation) -> Result<Vec<[f64; 2]>, HarnessError> {
    let cache = model.forward_observation(obs)?;
    for (i, head) in model.net.spec.heads.iter().enumerate() {
        match *head {
            HeadKind::Gmm { modes, dim } => {
                let raw = cache.output(i, 0);
                return Ok(select_trajectory(&raw, GmmLayout::new(modes, dim), model.normalizer("gmm")?));
            }
            HeadKind::Linear { .. } => {
                return Ok(pairs(&model.normalizer("linear")?.invert(&cache.output(i, 0))));
            }
            _ => {}
        }
    }
    Err(HarnessError::Invalid("model has no trajectory head".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub track_id: u32,
    pub episode: usize,
    pub meters: f64,
    pub time: f64,
    pub collision: CollisionKind,
    pub stalled: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub summary: EpisodeSummary,
    pub trace: Vec<TraceRecord>,
}

/// Runs one evaluation episode on `entry`. The episode ends on the first
/// collision, at the mileage cap, or after a stall.
pub fn eval_episode(
    entry: &TrackEntry,
    episode: usize,
    agent: Agent<'_>,
    cfg: &ExperimentConfig,
) -> Result<EpisodeOutcome, HarnessError> {
    let ev = &cfg.eval;
    let rec = &cfg.recording;
    let seed = derive_seed(cfg.seed, &[0x6576_616c, entry.id as u64, episode as u64]);
    let lane = rec.start_lane(&entry.track);
    let mut world = episode_world(
        entry.track.clone(),
        Some(&ev.density),
        rec.vehicle,
        ev.start_speed,
        lane,
        episode_start_s(&entry.track, derive_seed(seed, &[4])),
        derive_seed(seed, &[2]),
    )?;
    let mut expert = Expert::new(rec.expert, rec.limits, lane, derive_seed(seed, &[3]));
    let mut follower = LqrFollower::new(ev.lqr, rec.limits)?;
    let steps = (ev.replan_interval / DT_SIM).round() as usize;
    let trace_every = ((ev.trace_interval / ev.replan_interval).round() as usize).max(1);
    let cap = ev.episode_mile_cap * METERS_PER_MILE;
    let mut odometer = 0.0;
    let mut slow_time = 0.0;
    let mut trace = Vec::new();
    let mut collision = CollisionKind::None;
    let mut stalled = false;
    let mut last_action = Action { steer: 0.0, accel: 0.0 };
    let record = |world: &WorldState, action: Action, kind: CollisionKind, odometer: f64| TraceRecord {
        track_id: entry.id,
        episode,
        t: world.sim_time,
        pose: world.ego.pose,
        speed: world.ego.speed,
        action,
        collision_kind: kind,
        odometer,
        stalled: false,
    };
    for tick in 0.. {
        let plan = match agent {
            Agent::Expert => {
                expert.resample_speed_noise();
                Plan::Expert
            }
            Agent::Model(model) => {
                let obs = world.observe(&rec.sensor);
                if model.head("actuation").is_some() && model.head("gmm").is_none() && model.head("linear").is_none() {
                    Plan::Hold(baseline_policy(model, &obs, &rec.limits).map_err(|e| HarnessError::Invalid(e.to_string()))?)
                } else {
                    let traj = predict_trajectory(model, &obs)?;
                    Plan::Path(TimedPath::from_trajectory(&traj, model.checkpoint.meta.dt_label).to_world(&world.ego.pose))
                }
            }
        };
        if tick % trace_every == 0 {
            trace.push(record(&world, last_action, CollisionKind::None, odometer));
        }
        let mut done = false;
        for i in 0..steps {
            let action = match &plan {
                Plan::Expert => expert.act(&world)?,
                Plan::Hold(a) => *a,
                Plan::Path(path) => {
                    let local = path.in_frame(&world.ego.pose);
                    follower.follow_path(&local, i as f64 * DT_SIM, &world.ego)?
                }
            };
            let before = world.ego.pose.position();
            world.advance(&action, DT_SIM, &rec.limits);
            let after = world.ego.pose.position();
            odometer += (after[0] - before[0]).hypot(after[1] - before[1]);
            last_action = action;
            collision = check_collision(&world);
            if collision.is_collision() || odometer >= cap {
                done = true;
                break;
            }
        }
        if world.ego.speed < ev.stall_speed {
            slow_time += ev.replan_interval;
        } else {
            slow_time = 0.0;
        }
        if slow_time >= ev.stall_time {
            stalled = true;
            done = true;
        }
        if done {
            break;
        }
    }
    trace.push(TraceRecord { stalled, ..record(&world, last_action, collision, odometer) });
    Ok(EpisodeOutcome {
        summary: EpisodeSummary {
            track_id: entry.id,
            episode,
            meters: odometer,
            time: world.sim_time,
            collision,
            stalled,
        },
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub miles_driven: f64,
    pub collisions: usize,
    pub obstacle_collisions: usize,
    pub off_road: usize,
    pub stalls: usize,
    pub collisions_per_100mi: f64,
    pub mean_speed_mph: f64,
    pub episodes: Vec<EpisodeSummary>,
}

impl EvalReport {
    pub fn from_episodes(agent: String, episodes: Vec<EpisodeSummary>) -> Self {
        let meters: f64 = episodes.iter().map(|e| e.meters).sum();
        let time: f64 = episodes.iter().map(|e| e.time).sum();
        let count = |k: CollisionKind| episodes.iter().filter(|e| e.collision == k).count();
        let obstacle_collisions = count(CollisionKind::Obstacle);
        let off_road = count(CollisionKind::OffRoad);
        let collisions = obstacle_collisions + off_road;
        let miles = meters / METERS_PER_MILE;
        Self {
            agent,
            miles_driven: miles,
            collisions,
            obstacle_collisions,
            off_road,
            stalls: episodes.iter().filter(|e| e.stalled).count(),
            collisions_per_100mi: if miles > 0.0 { 100.0 * collisions as f64 / miles } else { 0.0 },
            mean_speed_mph: if time > 0.0 { meters / time * MPS_TO_MPH } else { 0.0 },
            episodes,
        }
    }
}

/// Evaluates `agent` on the validation tracks until `miles_target` is
/// reached. Episodes cycle over tracks in order and run in parallel batches;
/// results are consumed in episode order so the outcome does not depend on
/// scheduling.
pub fn eval_closed_loop(
    agent: Agent<'_>,
    name: &str,
    tracks: &[TrackEntry],
    cfg: &ExperimentConfig,
) -> Result<(EvalReport, Vec<TraceRecord>), HarnessError> {
    if tracks.is_empty() {
        return Err(HarnessError::Invalid("no evaluation tracks".into()));
    }
    let target = cfg.eval.miles_target * METERS_PER_MILE;
    let batch = rayon::current_num_threads().max(tracks.len());
    let mut meters = 0.0;
    let mut summaries = Vec::new();
    let mut traces = Vec::new();
    let mut next = 0usize;
    while meters < target {
        let outcomes: Vec<Result<EpisodeOutcome, HarnessError>> = (next..next + batch)
            .into_par_iter()
            .map(|i| eval_episode(&tracks[i % tracks.len()], i / tracks.len(), agent, cfg))
            .collect();
        next += batch;
        for o in outcomes {
            if meters >= target {
                break;
            }
            let o = o?;
            meters += o.summary.meters;
            summaries.push(o.summary);
            traces.extend(o.trace);
        }
    }
    Ok((EvalReport::from_episodes(name.to_string(), summaries), traces))
}

/// Recomputes the aggregate metrics from decimated traces: the last record
/// of each episode carries its distance, duration and outcome.
pub fn report_from_traces(agent: String, traces: &[TraceRecord]) -> EvalReport {
    let mut episodes: Vec<EpisodeSummary> = Vec::new();
    for r in traces {
        let same = episodes.last().is_some_and(|e| e.track_id == r.track_id && e.episode == r.episode);
        let summary = EpisodeSummary {
            track_id: r.track_id,
            episode: r.episode,
            meters: r.odometer,
            time: r.t,
            collision: r.collision_kind,
            stalled: r.stalled,
        };
        if same {
            *episodes.last_mut().expect("nonempty") = summary;
        } else {
            episodes.push(summary);
        }
    }
    EvalReport::from_episodes(agent, episodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub ticks: usize,
    pub rms_lateral: f64,
    pub max_lateral: f64,
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Drives the LQR follower along an expert episode's realized path, replanned
/// every sample tick from the expert's future poses, and measures the
/// distance from the followed path.
pub fn replay_expert(
    entry: &TrackEntry,
    episode: usize,
    rec: &RecordingConfig,
    lqr: LqrConfig,
    seed: u64,
) -> Result<ReplayReport, HarnessError> {
    let log = run_expert_episode(entry, episode, rec, seed)?;
    let per_label = rec.ticks_per_label()?;
    let steps = rec.steps_per_tick()?;
    let horizon = rec.k * per_label;
    let poses: Vec<Pose> = log.ticks.iter().map(|t| t.pose).collect();
    let first = &log.ticks[0];
    let mut ego = VehicleState { pose: first.pose, speed: first.observation.speed, wheelbase: rec.vehicle.wheelbase };
    let mut follower = LqrFollower::new(lqr, rec.limits)?;
    let (mut sq, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for i in 0..poses.len().saturating_sub(horizon) {
        let lo = i.saturating_sub(30);
        let hi = (i + 30).min(poses.len() - 1);
        let p = ego.pose.position();
        let err = (lo..hi)
            .map(|j| point_segment_distance(p, poses[j].position(), poses[j + 1].position()))
            .fold(f64::INFINITY, f64::min);
        sq += err * err;
        max = max.max(err);
        n += 1;
        let path = TimedPath {
            points: (0..=rec.k).map(|j| poses[i + j * per_label].position()).collect(),
            dt: rec.dt_label,
        };
        for s in 0..steps {
            let action = follower.follow_path(&path.in_frame(&ego.pose), s as f64 * DT_SIM, &ego)?;
            ego = step(&ego, &action, DT_SIM, rec.limits.v_hard_max);
        }
    }
    Ok(ReplayReport { ticks: n, rms_lateral: (sq / n.max(1) as f64).sqrt(), max_lateral: max })
}

/// Follows lane-center reference trajectories on an empty track and returns
/// the largest lateral deviation from the lane center after the first
/// `settle` seconds.
pub fn oracle_lane_following(
    entry: &TrackEntry,
    rec: &RecordingConfig,
    lqr: LqrConfig,
    replan_interval: f64,
    duration: f64,
    settle: f64,
) -> Result<f64, HarnessError> {
    let track = &entry.track;
    let lane = rec.start_lane(track);
    let d = track.lane_center(lane);
    let mut world = episode_world(track.clone(), None, rec.vehicle, rec.start_speed, lane, 0.0, 0)?;
    let mut follower = LqrFollower::new(lqr, rec.limits)?;
    let steps = (replan_interval / DT_SIM).round() as usize;
    let ticks = (duration / replan_interval).round() as usize;
    let mut worst = 0.0f64;
    for tick in 0..ticks {
        let fc = world.ego_frenet()?;
        let v = crate::expert::anticipated_speed_limit(track, fc.s, &rec.expert)?;
        let points = (0..=rec.k)
            .map(|j| track.frenet_to_world(FrenetCoord { s: fc.s + v * rec.dt_label * j as f64, d }))
            .collect::<Result<Vec<_>, _>>()?;
        let path = TimedPath { points, dt: rec.dt_label };
        for s in 0..steps {
            let action = follower.follow_path(&path.in_frame(&world.ego.pose), s as f64 * DT_SIM, &world.ego)?;
            world.advance(&action, DT_SIM, &rec.limits);
        }
        if tick as f64 * replan_interval >= settle {
            worst = worst.max((world.ego_frenet()?.d - d).abs());
        }
    }
    Ok(worst)
}
