//! Piecewise analytic ground paths: straight lines, circular fillets and
//! in-place spins, traversed at constant speed.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::world::{TRAIL_CORNER_RADIUS, TRAIL_HALF_SIDE};
use super::SimError;
use crate::geometry::Se3Pose;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PathTemplate {
    /// Laps around the scenario's square trail, starting mid-way along the
    /// bottom side. `reverse` traverses it clockwise.
    SquareLoop { laps: usize, reverse: bool },
    /// Follows the trail counter-clockwise for `out_length` meters, spins
    /// in place by 180 degrees and returns to the start.
    OutAndBack { out_length: f64 },
    /// Arbitrary open polyline with filleted corners.
    Waypoints { points: Vec<[f64; 2]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSpec {
    pub template: PathTemplate,
    /// Ground speed in m/s.
    pub speed: f64,
    /// Sensor height above ground in m.
    pub height: f64,
    /// Yaw rate for in-place spins in rad/s.
    pub spin_rate: f64,
}

impl Default for PathSpec {
    fn default() -> Self {
        Self::new(PathTemplate::SquareLoop { laps: 2, reverse: false })
    }
}

impl PathSpec {
    pub fn new(template: PathTemplate) -> Self {
        Self {
            template,
            speed: 5.0,
            height: 1.0,
            spin_rate: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Segment {
    Line { from: Vector2<f64>, to: Vector2<f64> },
    /// Arc of `radius` about `center`, starting at polar angle `start`,
    /// sweeping `sweep` radians (sign gives direction).
    Arc { center: Vector2<f64>, radius: f64, start: f64, sweep: f64 },
    Spin { at: Vector2<f64>, yaw: f64, sweep: f64 },
}

impl Segment {
    fn length(&self) -> f64 {
        match self {
            Segment::Line { from, to } => (to - from).norm(),
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
            Segment::Spin { .. } => 0.0,
        }
    }
}

/// A time-parameterized ground path.
#[derive(Clone, Debug)]
pub struct Path {
    segments: Vec<Segment>,
    durations: Vec<f64>,
    speed: f64,
    height: f64,
    spin_rate: f64,
}

impl Path {
    pub fn from_spec(spec: &PathSpec) -> Result<Path, SimError> {
        if !(spec.speed > 0.0) || !(spec.spin_rate > 0.0) {
            return Err(SimError::InvalidPath("speed and spin rate must be positive".into()));
        }
        let segments = match &spec.template {
            PathTemplate::SquareLoop { laps, reverse } => square_loop(*laps, *reverse)?,
            PathTemplate::OutAndBack { out_length } => out_and_back(*out_length)?,
            PathTemplate::Waypoints { points } => {
                let pts: Vec<Vector2<f64>> = points.iter().map(|p| Vector2::new(p[0], p[1])).collect();
                fillet_polyline(&pts, TRAIL_CORNER_RADIUS)?
            }
        };
        let durations = segments
            .iter()
            .map(|s| match s {
                Segment::Spin { sweep, .. } => sweep.abs() / spec.spin_rate,
                other => other.length() / spec.speed,
            })
            .collect();
        Ok(Path {
            segments,
            durations,
            speed: spec.speed,
            height: spec.height,
            spin_rate: spec.spin_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.durations.iter().sum()
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let mut acc = 0.0;
        for (i, d) in self.durations.iter().enumerate() {
            if t < acc + d || i + 1 == self.durations.len() {
                return (i, (t - acc).clamp(0.0, *d));
            }
            acc += d;
        }
        (0, 0.0)
    }

    /// Planar state `(position, yaw, world velocity)` at time `t`.
    fn state(&self, t: f64) -> (Vector2<f64>, f64, Vector2<f64>) {
        let (i, local) = self.locate(t);
        match &self.segments[i] {
            Segment::Line { from, to } => {
                let dir = (to - from).normalize();
                (from + dir * (self.speed * local), dir.y.atan2(dir.x), dir * self.speed)
            }
            Segment::Arc { center, radius, start, sweep } => {
                let sign = sweep.signum();
                let ang = start + sign * self.speed * local / radius;
                let pos = center + Vector2::new(ang.cos(), ang.sin()) * *radius;
                let heading = ang + sign * PI / 2.0;
                let dir = Vector2::new(heading.cos(), heading.sin());
                (pos, heading, dir * self.speed)
            }
            Segment::Spin { at, yaw, sweep } => (*at, yaw + sweep.signum() * self.spin_rate * local, Vector2::zeros()),
        }
    }

    pub fn pose_at(&self, t: f64) -> Se3Pose {
        let (p, yaw, _) = self.state(t);
        Se3Pose::from_yaw(yaw, Vector3::new(p.x, p.y, self.height))
    }

    /// Velocity in the world frame.
    pub fn velocity_at(&self, t: f64) -> Vector3<f64> {
        let (_, _, v) = self.state(t);
        Vector3::new(v.x, v.y, 0.0)
    }

    /// Time at which the `lap`-th closed lap ends for loop templates.
    pub fn lap_time(&self, laps_total: usize, lap: usize) -> f64 {
        self.duration() * lap as f64 / laps_total as f64
    }

    /// Positions sampled every `step` seconds, for bounds checks.
    pub fn sample_positions(&self, step: f64) -> Vec<Vector2<f64>> {
        let n = (self.duration() / step).ceil() as usize;
        (0..=n).map(|i| self.state((i as f64 * step).min(self.duration())).0).collect()
    }
}

fn square_loop(laps: usize, reverse: bool) -> Result<Vec<Segment>, SimError> {
    if laps == 0 {
        return Err(SimError::InvalidPath("loop needs at least one lap".into()));
    }
    let h = TRAIL_HALF_SIDE;
    let mut corners = vec![
        Vector2::new(h, -h),
        Vector2::new(h, h),
        Vector2::new(-h, h),
        Vector2::new(-h, -h),
    ];
    if reverse {
        corners = vec![
            Vector2::new(-h, -h),
            Vector2::new(-h, h),
            Vector2::new(h, h),
            Vector2::new(h, -h),
        ];
    }
    let start = Vector2::new(0.0, -h);
    let mut pts = vec![start];
    for _ in 0..laps {
        pts.extend(corners.iter().copied());
        pts.push(start);
    }
    fillet_polyline(&pts, TRAIL_CORNER_RADIUS)
}

fn out_and_back(out_length: f64) -> Result<Vec<Segment>, SimError> {
    if !(out_length > 0.0) {
        return Err(SimError::InvalidPath("out length must be positive".into()));
    }
    // Walk the counter-clockwise trail polyline for `out_length` meters.
    let h = TRAIL_HALF_SIDE;
    let trail = [
        Vector2::new(0.0, -h),
        Vector2::new(h, -h),
        Vector2::new(h, h),
        Vector2::new(-h, h),
        Vector2::new(-h, -h),
        Vector2::new(0.0, -h),
    ];
    let mut pts = vec![trail[0]];
    let mut remaining = out_length;
    for w in trail.windows(2) {
        let seg = (w[1] - w[0]).norm();
        if remaining <= seg {
            pts.push(w[0] + (w[1] - w[0]) * (remaining / seg));
            remaining = 0.0;
            break;
        }
        pts.push(w[1]);
        remaining -= seg;
    }
    if remaining > 0.0 {
        return Err(SimError::InvalidPath("out length exceeds the trail".into()));
    }
    let mut out = fillet_polyline(&pts, TRAIL_CORNER_RADIUS)?;
    let turn = *pts.last().unwrap();
    let before = pts[pts.len() - 2];
    let heading = (turn - before).y.atan2((turn - before).x);
    out.push(Segment::Spin { at: turn, yaw: heading, sweep: PI });
    let back: Vec<Vector2<f64>> = pts.iter().rev().copied().collect();
    out.extend(fillet_polyline(&back, TRAIL_CORNER_RADIUS)?);
    Ok(out)
}

/// Replaces every interior corner of an open polyline by a tangent arc.
fn fillet_polyline(pts: &[Vector2<f64>], radius: f64) -> Result<Vec<Segment>, SimError> {
    let pts: Vec<Vector2<f64>> = pts
        .iter()
        .enumerate()
        .filter(|(i, p)| *i == 0 || (*p - pts[i - 1]).norm() > 1e-9)
        .map(|(_, p)| *p)
        .collect();
    if pts.len() < 2 {
        return Err(SimError::InvalidPath("path needs at least two distinct points".into()));
    }
    let mut segments = Vec::new();
    let mut cursor = pts[0];
    let mut prev_tangent = 0.0;
    for i in 1..pts.len() - 1 {
        let d_in = (pts[i] - pts[i - 1]).normalize();
        let d_out = (pts[i + 1] - pts[i]).normalize();
        let cross = d_in.x * d_out.y - d_in.y * d_out.x;
        let turn = cross.atan2(d_in.dot(&d_out));
        if turn.abs() < 1e-9 {
            continue;
        }
        if turn.abs() > PI - 1e-6 {
            return Err(SimError::InvalidPath("polyline reverses; use a spin".into()));
        }
        let tangent = radius * (turn.abs() / 2.0).tan();
        let len_in = (pts[i] - pts[i - 1]).norm();
        if prev_tangent + tangent > len_in + 1e-9 {
            return Err(SimError::InvalidPath("corner fillet does not fit".into()));
        }
        prev_tangent = tangent;
        let a = pts[i] - d_in * tangent;
        let b = pts[i] + d_out * tangent;
        let left = Vector2::new(-d_in.y, d_in.x);
        let center = a + left * (radius * turn.signum());
        if (a - cursor).norm() > 1e-12 {
            segments.push(Segment::Line { from: cursor, to: a });
        }
        let start = (a - center).y.atan2((a - center).x);
        segments.push(Segment::Arc { center, radius, start, sweep: turn });
        cursor = b;
    }
    if prev_tangent > (pts[pts.len() - 1] - pts[pts.len() - 2]).norm() + 1e-9 {
        return Err(SimError::InvalidPath("corner fillet does not fit".into()));
    }
    let last = *pts.last().unwrap();
    if (last - cursor).norm() > 1e-12 {
        segments.push(Segment::Line { from: cursor, to: last });
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn angle_diff(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(2.0 * PI);
        d.min(2.0 * PI - d)
    }

    #[test]
    fn square_loop_closes_after_each_lap() {
        let path = Path::from_spec(&PathSpec::new(PathTemplate::SquareLoop { laps: 2, reverse: false })).unwrap();
        let lap = path.pose_at(path.lap_time(2, 1));
        let end = path.pose_at(path.duration());
        let (dt, da) = lap.distance_to(&end);
        assert!(dt < 1e-9 && da < 1e-9, "dt={dt} da={da}");
        let (dt0, _) = path.pose_at(0.0).distance_to(&end);
        assert!(dt0 < 1e-9);
    }

    #[test]
    fn path_is_continuous() {
        for template in [
            PathTemplate::SquareLoop { laps: 1, reverse: true },
            PathTemplate::OutAndBack { out_length: 50.0 },
        ] {
            let path = Path::from_spec(&PathSpec::new(template)).unwrap();
            let dt = 0.01;
            let n = (path.duration() / dt) as usize;
            for i in 1..n {
                let a = path.pose_at((i - 1) as f64 * dt);
                let b = path.pose_at(i as f64 * dt);
                let (d, r) = a.distance_to(&b);
                assert!(d < 5.0 * dt + 1e-9 && r < 0.8 * dt + 1e-6 + 5.0 * dt / 4.0, "jump at {i}: {d} {r}");
            }
        }
    }

    #[test]
    fn out_and_back_headings_reverse() {
        let spec = PathSpec::new(PathTemplate::OutAndBack { out_length: 15.0 });
        let path = Path::from_spec(&spec).unwrap();
        // straight 15 m out, pi spin, straight back
        let out_heading = path.pose_at(1.0).yaw();
        let back_heading = path.pose_at(path.duration() - 1.0).yaw();
        assert!((angle_diff(out_heading, back_heading) - PI).abs() < 1e-9);
        let end = path.pose_at(path.duration());
        assert!((end.translation - path.pose_at(0.0).translation).norm() < 1e-9);
    }

    #[test]
    fn velocity_matches_finite_difference() {
        let path = Path::from_spec(&PathSpec::new(PathTemplate::SquareLoop { laps: 1, reverse: false })).unwrap();
        for &t in &[1.0, 5.3, 9.9, 17.2, 25.0] {
            let h = 1e-5;
            let fd = (path.pose_at(t + h).translation - path.pose_at(t - h).translation) / (2.0 * h);
            assert!((fd - path.velocity_at(t)).norm() < 1e-5);
        }
    }
}
