//! Speed-scheduled LQR trajectory follower.

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{car_to_world_frame, world_to_car_frame, wrap_angle, Pose};
use crate::simulator::{Action, ActionLimits, VehicleState, DT_SIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("Riccati iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("inconsistent system dimensions: {0}")]
    Dimensions(String),
    #[error("singular matrix R + BᵀPB")]
    Singular,
    #[error("invalid controller config: {0}")]
    Config(String),
}

/// Stabilizing DARE solution and the matching feedback gain.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    pub p: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

/// Infinite-horizon discrete LQR by fixed-point iteration of the algebraic
/// Riccati equation, starting from P = Q.
pub fn solve_discrete_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<LqrSolution, ControlError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(ControlError::Dimensions(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>, ControlError> {
        let s = r + b.transpose() * p * b;
        let inv = s.try_inverse().ok_or(ControlError::Singular)?;
        Ok(inv * b.transpose() * p * a)
    };
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let k = gain(&p)?;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * k;
        let next = 0.5 * (&next + next.transpose());
        residual = (&next - &p).abs().max();
        p = next;
        if residual < tol {
            let gain = gain(&p)?;
            return Ok(LqrSolution { p, gain });
        }
    }
    Err(ControlError::NoConvergence { iterations: max_iter, residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LqrConfig {
    /// Diagonal state cost on (lateral error, heading error).
    pub q: [f64; 2],
    pub r: f64,
    pub lookahead: f64,
    pub speed_gain: f64,
    pub riccati_tol: f64,
    pub riccati_max_iter: usize,
    /// Gains are re-solved when speed drifts this far from the last solve.
    pub resolve_speed_delta: f64,
    /// Speed floor for the linearized model.
    pub min_model_speed: f64,
    /// Paths shorter than this are treated as a request to stop.
    pub min_path_length: f64,
    /// Adds the steering angle matching the path curvature at the reference.
    pub curvature_feedforward: bool,
    /// Measure LQR errors at the ego's projection onto the path instead of
    /// at the lookahead point.
    pub project_errors: bool,
    /// Adds the path's planned acceleration to the speed command.
    pub accel_feedforward: bool,
}

impl Default for LqrConfig {
    fn default() -> Self {
        Self {
            q: [1.0, 0.5],
            r: 4.0,
            lookahead: 0.45,
            speed_gain: 0.8,
            riccati_tol: 1e-10,
            riccati_max_iter: 100_000,
            resolve_speed_delta: 1.0,
            min_model_speed: 1.0,
            min_path_length: 0.3,
            curvature_feedforward: true,
            project_errors: true,
            accel_feedforward: true,
        }
    }
}

impl LqrConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.q[0] >= 0.0 && self.q[1] >= 0.0 && self.r > 0.0) {
            return Err(ControlError::Config("need Q ≥ 0 and R > 0".into()));
        }
        if !(self.lookahead >= 0.0 && self.speed_gain >= 0.0 && self.min_model_speed > 0.0) {
            return Err(ControlError::Config("negative lookahead or gain".into()));
        }
        Ok(())
    }
}

/// Error-state model (lateral error, heading error) of the kinematic bicycle
/// at speed `v`, discretized at `dt`.
pub fn error_state_model(v: f64, wheelbase: f64, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, v * dt, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, v * dt / wheelbase]);
    (a, b)
}

/// Time-stamped path: `points[i]` is reached at `i · dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedPath {
    pub points: Vec<[f64; 2]>,
    pub dt: f64,
}

/// Interpolated target on a [`TimedPath`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub position: [f64; 2],
    pub heading: f64,
    pub curvature: f64,
    pub target_speed: f64,
    /// Change in segment speed across the reference, m/s².
    pub accel: f64,
}

/// Lateral and heading error of the ego (origin, heading 0) relative to the
/// nearest point of a path given in the ego frame.
pub fn projected_errors(points: &[[f64; 2]]) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        if len2 < 1e-12 {
            continue;
        }
        let t = (-(a[0] * dx + a[1] * dy) / len2).clamp(0.0, 1.0);
        let (px, py) = (a[0] + t * dx, a[1] + t * dy);
        let d2 = px * px + py * py;
        if d2 < best.0 {
            let h = dy.atan2(dx);
            let (sh, ch) = h.sin_cos();
            // ego relative to the segment line, positive to its left
            let lateral = -(a[0]) * -sh + -(a[1]) * ch;
            best = (d2, lateral, wrap_angle(-h));
        }
    }
    (best.1, best.2)
}

impl TimedPath {
    /// Path starting at the ego origin followed by the K predicted points.
    pub fn from_trajectory(trajectory: &[[f64; 2]], dt_label: f64) -> Self {
        let mut points = Vec::with_capacity(trajectory.len() + 1);
        points.push([0.0, 0.0]);
        points.extend_from_slice(trajectory);
        Self { points, dt: dt_label }
    }

    /// Re-expresses the path from the frame of `from` into world coordinates.
    pub fn to_world(&self, from: &Pose) -> Self {
        Self { points: self.points.iter().map(|p| car_to_world_frame(from, *p)).collect(), dt: self.dt }
    }

    /// Re-expresses a world-frame path in the frame of `pose`.
    pub fn in_frame(&self, pose: &Pose) -> Self {
        Self { points: self.points.iter().map(|p| world_to_car_frame(pose, *p)).collect(), dt: self.dt }
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Linear interpolation at time `t`, extrapolating along the last
    /// segment past the end.
    pub fn reference_at(&self, t: f64) -> ReferencePoint {
        let n = self.points.len();
        debug_assert!(n >= 2);
        let u = (t / self.dt).max(0.0);
        let i = (u.floor() as usize).min(n - 2);
        let f = u - i as f64;
        let (p, q) = (self.points[i], self.points[i + 1]);
        let seg = dist(p, q);
        let curvature = if n >= 3 {
            let j = i.min(n - 3);
            menger_curvature(self.points[j], self.points[j + 1], self.points[j + 2])
        } else {
            0.0
        };
        let accel = if n >= 3 {
            let j = i.min(n - 3);
            let (a, b, c) = (self.points[j], self.points[j + 1], self.points[j + 2]);
            (dist(b, c) - dist(a, b)) / (self.dt * self.dt)
        } else {
            0.0
        };
        ReferencePoint {
            position: [p[0] + f * (q[0] - p[0]), p[1] + f * (q[1] - p[1])],
            heading: (q[1] - p[1]).atan2(q[0] - p[0]),
            curvature,
            target_speed: seg / self.dt,
            accel,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Signed curvature of the circle through three points (positive = left).
pub fn menger_curvature(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let denom = dist(a, b) * dist(b, c) * dist(a, c);
    if denom < 1e-9 {
        0.0
    } else {
        2.0 * cross / denom
    }
}

/// LQR steering plus proportional speed control. Owns a per-episode gain
/// cache.
#[derive(Debug, Clone)]
pub struct LqrFollower {
    pub cfg: LqrConfig,
    pub limits: ActionLimits,
    cached: Option<(f64, Vector2<f64>)>,
}

impl LqrFollower {
    pub fn new(cfg: LqrConfig, limits: ActionLimits) -> Result<Self, ControlError> {
        cfg.validate()?;
        Ok(Self { cfg, limits, cached: None })
    }

    /// Feedback gain for the current speed, re-solved on large speed changes.
    pub fn gain(&mut self, speed: f64, wheelbase: f64) -> Result<Vector2<f64>, ControlError> {
        let v = speed.max(self.cfg.min_model_speed);
        if let Some((v0, k)) = self.cached {
            if (v - v0).abs() <= self.cfg.resolve_speed_delta {
                return Ok(k);
            }
        }
        let (a, b) = error_state_model(v, wheelbase, DT_SIM);
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.cfg.q));
        let r = DMatrix::from_element(1, 1, self.cfg.r);
        let k = solve_discrete_riccati(&a, &b, &q, &r, self.cfg.riccati_tol, self.cfg.riccati_max_iter)?.gain;
        let k = Vector2::new(k[(0, 0)], k[(0, 1)]);
        self.cached = Some((v, k));
        Ok(k)
    }

    /// Action tracking a K-point ego-frame trajectory planned at this instant.
    pub fn follow(
        &mut self,
        trajectory: &[[f64; 2]],
        dt_label: f64,
        state: &VehicleState,
    ) -> Result<Action, ControlError> {
        self.follow_path(&TimedPath::from_trajectory(trajectory, dt_label), 0.0, state)
    }

    /// Action tracking `path` (in the current ego frame) planned `elapsed`
    /// seconds ago.
    pub fn follow_path(
        &mut self,
        path: &TimedPath,
        elapsed: f64,
        state: &VehicleState,
    ) -> Result<Action, ControlError> {
        if path.points.len() < 2 {
            return Err(ControlError::Config("trajectory needs at least 2 points".into()));
        }
        if path.length() < self.cfg.min_path_length {
            return Ok(Action::clamped(0.0, self.limits.accel_min, &self.limits));
        }
        let reference = path.reference_at(elapsed + self.cfg.lookahead);
        let (lateral, heading) = if self.cfg.project_errors {
            projected_errors(&path.points)
        } else {
            let [xr, yr] = reference.position;
            let (sr, cr) = reference.heading.sin_cos();
            (xr * sr - yr * cr, wrap_angle(-reference.heading))
        };
        let k = self.gain(state.speed, state.wheelbase)?;
        let mut steer = -(k.dot(&Vector2::new(lateral, heading)));
        if self.cfg.curvature_feedforward {
            steer += (state.wheelbase * reference.curvature).atan();
        }
        let mut accel = self.cfg.speed_gain * (reference.target_speed - state.speed);
        if self.cfg.accel_feedforward {
            accel += reference.accel;
        }
        Ok(Action::clamped(steer, accel, &self.limits))
    }
}

/// Spectral radius of a 2×2 matrix.
pub fn spectral_radius2(m: &Matrix2<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}
