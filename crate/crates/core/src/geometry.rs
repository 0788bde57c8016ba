//! Track geometry: piecewise straight/arc centerlines, arc-length lookup,
//! Frenet projection and ego-frame transforms.
//!
//! Conventions: world frame is x right, y up; headings are counter-clockwise
//! from +x and wrapped into (-π, π]. Lateral offset `d` is positive to the
//! left of the direction of travel. Lane 0 is the rightmost lane.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("track has no segments")]
    EmptyTrack,
    #[error("segment {index}: length must be positive, got {length}")]
    NonPositiveLength { index: usize, length: f64 },
    #[error("segment {index}: straight segments must have zero curvature, got {curvature}")]
    CurvedStraight { index: usize, curvature: f64 },
    #[error("segment {index}: arc segments must have nonzero curvature")]
    FlatArc { index: usize },
    #[error("segment {index}: |curvature| {curvature} too tight for a road {road_width} m wide")]
    TooTight { index: usize, curvature: f64, road_width: f64 },
    #[error("track needs at least two lanes, got {0}")]
    TooFewLanes(usize),
    #[error("lane width must be positive, got {0}")]
    BadLaneWidth(f64),
    #[error("closed track does not close: end pose is {gap:.3} m / {heading_gap:.3e} rad from start")]
    NotClosed { gap: f64, heading_gap: f64 },
    #[error("arc length {s} outside open track of length {length}")]
    OutOfRange { s: f64, length: f64 },
    #[error("point ({x:.3}, {y:.3}) is {distance:.3} m from the centerline (limit {limit:.3} m)")]
    ProjectionFailed { x: f64, y: f64, distance: f64, limit: f64 },
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: wrap_angle(heading) }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetCoord {
    pub s: f64,
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Straight,
    Arc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub kind: SegmentKind,
    pub length: f64,
    #[serde(default)]
    pub curvature: f64,
}

impl SegmentSpec {
    pub fn straight(length: f64) -> Self {
        Self { kind: SegmentKind::Straight, length, curvature: 0.0 }
    }

    pub fn arc(length: f64, curvature: f64) -> Self {
        Self { kind: SegmentKind::Arc, length, curvature }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub segments: Vec<SegmentSpec>,
    pub lane_width: f64,
    pub num_lanes: usize,
    /// Closed tracks wrap `s` modulo the total length and must close geometrically.
    #[serde(default = "default_closed")]
    pub closed: bool,
}

fn default_closed() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment {
    kind: SegmentKind,
    length: f64,
    curvature: f64,
    start_s: f64,
    start: Pose,
}

impl Segment {
    /// Centerline pose at local arc length `u` (0 ≤ u ≤ length).
    fn pose_at(&self, u: f64) -> Pose {
        let (x0, y0, h0) = (self.start.x, self.start.y, self.start.heading);
        match self.kind {
            SegmentKind::Straight => Pose::new(x0 + u * h0.cos(), y0 + u * h0.sin(), h0),
            SegmentKind::Arc => {
                let k = self.curvature;
                let h = h0 + k * u;
                Pose::new(
                    x0 + (h.sin() - h0.sin()) / k,
                    y0 - (h.cos() - h0.cos()) / k,
                    h,
                )
            }
        }
    }

    fn arc_center(&self) -> [f64; 2] {
        let r = 1.0 / self.curvature;
        let h0 = self.start.heading;
        [self.start.x - r * h0.sin(), self.start.y + r * h0.cos()]
    }

    /// Closest point parameter on this segment and the squared distance to it.
    fn project(&self, p: [f64; 2]) -> (f64, f64) {
        let u = match self.kind {
            SegmentKind::Straight => {
                let (c, s) = (self.start.heading.cos(), self.start.heading.sin());
                ((p[0] - self.start.x) * c + (p[1] - self.start.y) * s).clamp(0.0, self.length)
            }
            SegmentKind::Arc => {
                let k = self.curvature;
                let c = self.arc_center();
                let dx = p[0] - c[0];
                let dy = p[1] - c[1];
                if dx.hypot(dy) < 1e-12 {
                    0.0
                } else {
                    // Angle swept from the start radius, measured in the travel direction.
                    let a0 = (self.start.y - c[1]).atan2(self.start.x - c[0]);
                    let a = dy.atan2(dx);
                    let swept = if k > 0.0 { a - a0 } else { a0 - a };
                    let swept = swept.rem_euclid(2.0 * PI);
                    let total = self.length * k.abs();
                    if swept <= total {
                        swept / k.abs()
                    } else {
                        // Outside the arc's angular span: pick the nearer end.
                        let past_end = swept - total;
                        let before_start = 2.0 * PI - swept;
                        if past_end < before_start {
                            self.length
                        } else {
                            0.0
                        }
                    }
                }
            }
        };
        let q = self.pose_at(u);
        let d2 = (p[0] - q.x).powi(2) + (p[1] - q.y).powi(2);
        (u, d2)
    }
}

/// A built track: immutable, precomputed centerline.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    spec: TrackSpec,
    segments: Vec<Segment>,
    total_length: f64,
}

/// Tolerance used when checking that a closed track returns to its start pose.
pub const CLOSURE_TOLERANCE: f64 = 1e-6;

pub fn build_track(spec: TrackSpec) -> Result<Track, GeometryError> {
    Track::new(spec)
}

impl Track {
    pub fn new(spec: TrackSpec) -> Result<Self, GeometryError> {
        if spec.segments.is_empty() {
            return Err(GeometryError::EmptyTrack);
        }
        if spec.num_lanes < 2 {
            return Err(GeometryError::TooFewLanes(spec.num_lanes));
        }
        if !(spec.lane_width > 0.0) {
            return Err(GeometryError::BadLaneWidth(spec.lane_width));
        }
        let road_width = spec.lane_width * spec.num_lanes as f64;
        let mut segments = Vec::with_capacity(spec.segments.len());
        let mut start = Pose::new(0.0, 0.0, 0.0);
        let mut start_s = 0.0;
        for (index, seg) in spec.segments.iter().enumerate() {
            if !(seg.length > 0.0) {
                return Err(GeometryError::NonPositiveLength { index, length: seg.length });
            }
            match seg.kind {
                SegmentKind::Straight if seg.curvature != 0.0 => {
                    return Err(GeometryError::CurvedStraight { index, curvature: seg.curvature })
                }
                SegmentKind::Arc if seg.curvature == 0.0 => {
                    return Err(GeometryError::FlatArc { index })
                }
                _ => {}
            }
            if seg.curvature.abs() * road_width >= 1.0 {
                return Err(GeometryError::TooTight { index, curvature: seg.curvature, road_width });
            }
            let built = Segment {
                kind: seg.kind,
                length: seg.length,
                curvature: seg.curvature,
                start_s,
                start,
            };
            let end = built.pose_at(seg.length);
            // Keep the unwrapped heading continuous for the next segment's start.
            start = Pose { x: end.x, y: end.y, heading: end.heading };
            start_s += seg.length;
            segments.push(built);
        }
        let track = Self { spec, segments, total_length: start_s };
        if track.spec.closed {
            let gap = start.x.hypot(start.y);
            let heading_gap = wrap_angle(start.heading).abs();
            if gap > CLOSURE_TOLERANCE || heading_gap > CLOSURE_TOLERANCE {
                return Err(GeometryError::NotClosed { gap, heading_gap });
            }
        }
        Ok(track)
    }

    pub fn spec(&self) -> &TrackSpec {
        &self.spec
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn is_closed(&self) -> bool {
        self.spec.closed
    }

    pub fn lane_width(&self) -> f64 {
        self.spec.lane_width
    }

    pub fn num_lanes(&self) -> usize {
        self.spec.num_lanes
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.spec.lane_width * self.spec.num_lanes as f64
    }

    pub fn max_projection_distance(&self) -> f64 {
        3.0 * self.half_width()
    }

    /// Lateral offset of a lane's center; lane 0 is rightmost.
    pub fn lane_center(&self, lane: usize) -> f64 {
        -self.half_width() + self.spec.lane_width * (lane as f64 + 0.5)
    }

    /// Lane index containing lateral offset `d`, clamped to the road.
    pub fn lane_of(&self, d: f64) -> usize {
        let idx = ((d + self.half_width()) / self.spec.lane_width).floor();
        idx.clamp(0.0, (self.spec.num_lanes - 1) as f64) as usize
    }

    /// Normalizes `s` into [0, total_length) for closed tracks, or checks range for open ones.
    pub fn wrap_s(&self, s: f64) -> Result<f64, GeometryError> {
        if self.spec.closed {
            let w = s.rem_euclid(self.total_length);
            // rem_euclid can round up to the modulus itself
            Ok(if w >= self.total_length { 0.0 } else { w })
        } else if (0.0..self.total_length).contains(&s) || s == self.total_length {
            Ok(s)
        } else {
            Err(GeometryError::OutOfRange { s, length: self.total_length })
        }
    }

    /// Signed forward distance from `from` to `to` along the track. On closed
    /// tracks the result lies in [-L/2, L/2).
    pub fn s_gap(&self, from: f64, to: f64) -> f64 {
        let diff = to - from;
        if self.spec.closed {
            let l = self.total_length;
            (diff + 0.5 * l).rem_euclid(l) - 0.5 * l
        } else {
            diff
        }
    }

    fn segment_index(&self, s: f64) -> usize {
        // Half-open intervals [start, end): a join belongs to the following segment.
        match self
            .segments
            .binary_search_by(|seg| seg.start_s.partial_cmp(&s).expect("finite arc length"))
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        }
    }

    pub fn curvature_at(&self, s: f64) -> Result<f64, GeometryError> {
        let s = self.wrap_s(s)?;
        Ok(self.segments[self.segment_index(s)].curvature)
    }

    /// Centerline pose at arc length `s`.
    pub fn pose_at(&self, s: f64) -> Result<Pose, GeometryError> {
        let s = self.wrap_s(s)?;
        let seg = &self.segments[self.segment_index(s)];
        Ok(seg.pose_at(s - seg.start_s))
    }

    pub fn frenet_to_world(&self, fc: FrenetCoord) -> Result<[f64; 2], GeometryError> {
        let p = self.pose_at(fc.s)?;
        Ok([p.x - fc.d * p.heading.sin(), p.y + fc.d * p.heading.cos()])
    }

    pub fn world_to_frenet(&self, point: [f64; 2]) -> Result<FrenetCoord, GeometryError> {
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, seg) in self.segments.iter().enumerate() {
            let (u, d2) = seg.project(point);
            if best.map_or(true, |(_, _, bd)| d2 < bd) {
                best = Some((i, u, d2));
            }
        }
        let (i, u, d2) = best.expect("track has segments");
        let limit = self.max_projection_distance();
        if d2.sqrt() > limit {
            return Err(GeometryError::ProjectionFailed {
                x: point[0],
                y: point[1],
                distance: d2.sqrt(),
                limit,
            });
        }
        let seg = &self.segments[i];
        let q = seg.pose_at(u);
        let d = -(point[0] - q.x) * q.heading.sin() + (point[1] - q.y) * q.heading.cos();
        let s = self.wrap_s(seg.start_s + u).unwrap_or(self.total_length);
        Ok(FrenetCoord { s, d })
    }

    /// Iterates (start_s, length, curvature, start pose) for each segment.
    pub fn segments(&self) -> impl Iterator<Item = SegmentView> + '_ {
        self.segments.iter().map(|s| SegmentView {
            kind: s.kind,
            start_s: s.start_s,
            length: s.length,
            curvature: s.curvature,
            start: s.start,
        })
    }
}

/// Read-only view of a built segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentView {
    pub kind: SegmentKind,
    pub start_s: f64,
    pub length: f64,
    pub curvature: f64,
    pub start: Pose,
}

impl SegmentView {
    /// Center of an arc segment's osculating circle. Meaningless for straights.
    pub fn arc_center(&self) -> [f64; 2] {
        let r = 1.0 / self.curvature;
        [self.start.x - r * self.start.heading.sin(), self.start.y + r * self.start.heading.cos()]
    }
}

/// Expresses a world point in the ego frame: x along heading, y to the left.
pub fn world_to_car_frame(pose: &Pose, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = pose.heading.sin_cos();
    let dx = p[0] - pose.x;
    let dy = p[1] - pose.y;
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Inverse of [`world_to_car_frame`].
pub fn car_to_world_frame(pose: &Pose, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = pose.heading.sin_cos();
    [pose.x + c * p[0] - s * p[1], pose.y + s * p[0] + c * p[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn circle(radius: f64) -> Track {
        Track::new(TrackSpec {
            segments: vec![SegmentSpec::arc(2.0 * PI * radius, 1.0 / radius)],
            lane_width: 3.5,
            num_lanes: 2,
            closed: true,
        })
        .unwrap()
    }

    fn open_straight(len: f64) -> Track {
        Track::new(TrackSpec {
            segments: vec![SegmentSpec::straight(len)],
            lane_width: 3.5,
            num_lanes: 2,
            closed: false,
        })
        .unwrap()
    }

    #[test]
    fn single_straight() {
        let t = open_straight(100.0);
        assert_eq!(t.total_length(), 100.0);
        let end = t.pose_at(100.0).unwrap();
        assert_abs_diff_eq!(end.x, 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(end.y, 0.0, epsilon = 1e-12);
        assert_eq!(t.pose_at(0.0).unwrap(), Pose::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn full_circle_closes() {
        let t = circle(100.0);
        let start = t.segments().next().unwrap().start;
        let seg = t.segments().next().unwrap();
        let end = Segment {
            kind: seg.kind,
            length: seg.length,
            curvature: seg.curvature,
            start_s: 0.0,
            start,
        }
        .pose_at(seg.length);
        assert!((end.x - start.x).abs() < 1e-9 && (end.y - start.y).abs() < 1e-9);
    }

    #[test]
    fn straight_then_quarter_arc_heading() {
        let t = Track::new(TrackSpec {
            segments: vec![SegmentSpec::straight(50.0), SegmentSpec::arc(78.5398, 0.02)],
            lane_width: 3.5,
            num_lanes: 2,
            closed: false,
        })
        .unwrap();
        let end = t.pose_at(t.total_length()).unwrap();
        assert_abs_diff_eq!(end.heading, 0.02 * 78.5398, epsilon = 1e-12);
        assert_abs_diff_eq!(end.heading, 1.5708, epsilon = 1e-4);
    }

    #[test]
    fn rejects_bad_specs() {
        let base = |segments| TrackSpec { segments, lane_width: 3.5, num_lanes: 2, closed: false };
        assert_eq!(Track::new(base(vec![])), Err(GeometryError::EmptyTrack));
        assert!(matches!(
            Track::new(base(vec![SegmentSpec::straight(0.0)])),
            Err(GeometryError::NonPositiveLength { .. })
        ));
        assert!(matches!(
            Track::new(base(vec![SegmentSpec::arc(10.0, 0.2)])),
            Err(GeometryError::TooTight { .. })
        ));
        let mut one_lane = base(vec![SegmentSpec::straight(10.0)]);
        one_lane.num_lanes = 1;
        assert_eq!(Track::new(one_lane), Err(GeometryError::TooFewLanes(1)));
        let mut not_closed = base(vec![SegmentSpec::straight(10.0)]);
        not_closed.closed = true;
        assert!(matches!(Track::new(not_closed), Err(GeometryError::NotClosed { .. })));
    }

    #[test]
    fn curvature_lookup_and_join_tie_break() {
        let t = Track::new(TrackSpec {
            segments: vec![SegmentSpec::straight(50.0), SegmentSpec::arc(78.5398, 0.02)],
            lane_width: 3.5,
            num_lanes: 2,
            closed: false,
        })
        .unwrap();
        assert_eq!(t.curvature_at(10.0).unwrap(), 0.0);
        assert_eq!(t.curvature_at(60.0).unwrap(), 0.02);
        // Exactly at the join: the following segment wins; either side agrees with sampling.
        assert_eq!(t.curvature_at(50.0).unwrap(), 0.02);
        assert_eq!(t.curvature_at(50.0 - 1e-9).unwrap(), 0.0);
        assert_eq!(t.curvature_at(50.0 + 1e-9).unwrap(), 0.02);
        assert!(matches!(t.curvature_at(500.0), Err(GeometryError::OutOfRange { .. })));
    }

    #[test]
    fn closed_track_wraps() {
        let t = circle(100.0);
        let l = t.total_length();
        assert_abs_diff_eq!(t.wrap_s(l + 5.0).unwrap(), 5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.wrap_s(-5.0).unwrap(), l - 5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.s_gap(l - 5.0, 5.0), 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.s_gap(5.0, l - 5.0), -10.0, epsilon = 1e-9);
    }

    #[test]
    fn frenet_straight_examples() {
        let t = open_straight(100.0);
        let fc = t.world_to_frenet([10.0, 0.0]).unwrap();
        assert_abs_diff_eq!(fc.s, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fc.d, 0.0, epsilon = 1e-12);
        let fc = t.world_to_frenet([10.0, 2.0]).unwrap();
        assert_abs_diff_eq!(fc.s, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fc.d, 2.0, epsilon = 1e-12);
        let p = t.frenet_to_world(FrenetCoord { s: 10.0, d: 2.0 }).unwrap();
        assert_abs_diff_eq!(p[0], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn frenet_circle_radius_98() {
        let t = circle(100.0);
        // Center of the left-turning circle is at (0, 100).
        let angle: f64 = 0.7;
        let p = [98.0 * angle.cos(), 100.0 + 98.0 * angle.sin()];
        let fc = t.world_to_frenet(p).unwrap();
        assert_abs_diff_eq!(fc.d, 2.0, epsilon = 1e-9);
        let back = t.frenet_to_world(fc).unwrap();
        assert_abs_diff_eq!(back[0], p[0], epsilon = 1e-9);
        assert_abs_diff_eq!(back[1], p[1], epsilon = 1e-9);
    }

    #[test]
    fn projection_too_far_fails() {
        let t = open_straight(100.0);
        assert!(matches!(
            t.world_to_frenet([50.0, 40.0]),
            Err(GeometryError::ProjectionFailed { .. })
        ));
    }

    #[test]
    fn car_frame_examples() {
        let p = world_to_car_frame(&Pose::new(0.0, 0.0, 0.0), [5.0, 0.0]);
        assert_eq!(p, [5.0, 0.0]);
        let pose = Pose::new(1.0, 1.0, PI / 2.0);
        let p = world_to_car_frame(&pose, [1.0, 3.0]);
        assert_abs_diff_eq!(p[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
        let back = car_to_world_frame(&pose, p);
        assert_abs_diff_eq!(back[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(0.1 + 4.0 * PI), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn lanes() {
        let t = open_straight(100.0);
        assert_eq!(t.half_width(), 3.5);
        assert_eq!(t.lane_center(0), -1.75);
        assert_eq!(t.lane_center(1), 1.75);
        assert_eq!(t.lane_of(-1.0), 0);
        assert_eq!(t.lane_of(0.5), 1);
        assert_eq!(t.lane_of(-10.0), 0);
        assert_eq!(t.lane_of(10.0), 1);
    }

    proptest::proptest! {
        #[test]
        fn wrapped_angles_land_in_half_open_range(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            proptest::prop_assert!(w > -PI && w <= PI);
            let turns = (a - w) / (2.0 * PI);
            proptest::prop_assert!((turns - turns.round()).abs() < 1e-9);
        }

        #[test]
        fn frenet_round_trip_on_a_circle(s in 0.0f64..628.0, d in -3.4f64..3.4) {
            let t = circle(100.0);
            let p = t.frenet_to_world(FrenetCoord { s, d }).unwrap();
            let back = t.world_to_frenet(p).unwrap();
            proptest::prop_assert!(back.s >= 0.0 && back.s < t.total_length());
            proptest::prop_assert!(t.s_gap(s, back.s).abs() < 1e-6, "{} vs {}", s, back.s);
            proptest::prop_assert!((back.d - d).abs() < 1e-6);
        }
    }
}
