//! Rigid-body pose algebra and radar point containers.
//!
//! Tangent vectors are ordered `[rho; phi]`: the first three entries are the
//! translational part, the last three the rotation vector.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{Isometry3, Matrix3, Matrix6, Quaternion, Translation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this rotation angle the closed forms switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation angle {0} is at pi; logarithm is ambiguous")]
    AmbiguousLog(f64),
    #[error("malformed trajectory line {line}: {reason}")]
    MalformedTrajectory { line: usize, reason: String },
    #[error("trajectory timestamps must be strictly increasing (at index {0})")]
    NonMonotonicTimestamps(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*phi)
}

/// Rotation vector of `q`, angle in `[0, pi]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    // Pick the hemisphere with non-negative scalar part so the angle is <= pi.
    let q = if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        *q
    };
    let v = q.imag();
    let s = v.norm();
    if s < 1e-12 {
        return v * (2.0 / q.w);
    }
    let angle = 2.0 * s.atan2(q.w);
    v * (angle / s)
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        return Matrix3::identity() + k * (0.5 - t2 / 24.0) + k2 * (1.0 / 6.0 - t2 / 120.0);
    }
    let t2 = theta * theta;
    Matrix3::identity() + k * ((1.0 - theta.cos()) / t2) + k2 * ((theta - theta.sin()) / (t2 * theta))
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        return Matrix3::identity() - k * 0.5 + k2 * (1.0 / 12.0 + t2 / 720.0);
    }
    let t2 = theta * theta;
    let coeff = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() - k * 0.5 + k2 * coeff
}

/// The coupling block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = p * r * p;
    let (c1, c2, c3) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 / 6.0 - t2 / 120.0, 1.0 / 24.0 - t2 / 720.0, 1.0 / 120.0 - t2 / 2520.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let t3 = t2 * theta;
        (
            (theta - s) / t3,
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t3),
        )
    };
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3) in `[rho; phi]` ordering.
pub fn se3_left_jacobian(xi: &Vector6<f64>) -> Matrix6<f64> {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let j = so3_left_jacobian(&phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&se3_q_block(&rho, &phi));
    out
}

pub fn se3_right_jacobian(xi: &Vector6<f64>) -> Matrix6<f64> {
    se3_left_jacobian(&(-xi))
}

/// Inverse of the SE(3) right Jacobian, computed blockwise.
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let neg = -xi;
    let rho = neg.fixed_rows::<3>(0).into_owned();
    let phi = neg.fixed_rows::<3>(3).into_owned();
    let j_inv = so3_left_jacobian_inv(&phi);
    let q = se3_q_block(&rho, &phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(j_inv * q * j_inv)));
    out
}

/// A rigid transform in SE(3): `p -> rotation * p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Se3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation(r: UnitQuaternion<f64>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Planar pose: yaw about +z (radians) and a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw), translation)
    }

    pub fn compose(&self, other: &Se3Pose) -> Se3Pose {
        let rotation = UnitQuaternion::new_normalize((self.rotation * other.rotation).into_inner());
        Se3Pose {
            rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Se3Pose {
        let rotation = self.rotation.inverse();
        Se3Pose {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    /// `self^-1 * other`, the pose of `other` expressed in `self`'s frame.
    pub fn between(&self, other: &Se3Pose) -> Se3Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }

    /// Heading of the x-axis projected on the ground plane.
    pub fn yaw(&self) -> f64 {
        let r = self.rotation_matrix();
        r[(1, 0)].atan2(r[(0, 0)])
    }

    /// Rotation with the yaw removed: maps the sensor frame to a frame
    /// parallel to the ground plane sharing the sensor's heading.
    pub fn leveling_rotation(&self) -> UnitQuaternion<f64> {
        let unyaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -self.yaw());
        unyaw * self.rotation
    }

    pub fn exp(xi: &Vector6<f64>) -> Se3Pose {
        let rho = xi.fixed_rows::<3>(0).into_owned();
        let phi = xi.fixed_rows::<3>(3).into_owned();
        Se3Pose {
            rotation: so3_exp(&phi),
            translation: so3_left_jacobian(&phi) * rho,
        }
    }

    /// Logarithm; fails when the rotation angle is (numerically) pi.
    pub fn log(&self) -> Result<Vector6<f64>, GeometryError> {
        let phi = so3_log(&self.rotation);
        let angle = phi.norm();
        if std::f64::consts::PI - angle < 1e-9 {
            return Err(GeometryError::AmbiguousLog(angle));
        }
        Ok(self.log_unchecked_with(phi))
    }

    /// Logarithm without the ambiguity check; near pi the hemisphere
    /// choice of [`so3_log`] is used.
    pub fn log_unchecked(&self) -> Vector6<f64> {
        self.log_unchecked_with(so3_log(&self.rotation))
    }

    fn log_unchecked_with(&self, phi: Vector3<f64>) -> Vector6<f64> {
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&rho);
        out.fixed_rows_mut::<3>(3).copy_from(&phi);
        out
    }

    /// Adjoint in `[rho; phi]` ordering: `exp(Ad * xi) = T exp(xi) T^-1`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut out = Matrix6::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        out.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&self.translation) * r));
        out
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    /// Translation distance and rotation angle between two poses.
    pub fn distance_to(&self, other: &Se3Pose) -> (f64, f64) {
        let d = self.between(other);
        (d.translation.norm(), d.angle())
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

impl From<Isometry3<f64>> for Se3Pose {
    fn from(iso: Isometry3<f64>) -> Self {
        Se3Pose::new(iso.rotation, iso.translation.vector)
    }
}

impl std::ops::Mul for Se3Pose {
    type Output = Se3Pose;
    fn mul(self, rhs: Se3Pose) -> Se3Pose {
        self.compose(&rhs)
    }
}

/// One radar detection in the sensor frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub position: Vector3<f64>,
    pub intensity: f64,
    /// Radial velocity in m/s, positive when the reflector recedes.
    pub doppler: f64,
}

impl RadarPoint {
    pub fn new(position: Vector3<f64>, intensity: f64, doppler: f64) -> Self {
        Self { position, intensity, doppler }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarScan {
    pub timestamp: f64,
    pub points: Vec<RadarPoint>,
    /// Sensor-to-world orientation reported by the IMU.
    pub imu_orientation: UnitQuaternion<f64>,
}

impl RadarScan {
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }
}

/// Applies `pose` to every point position; intensity and Doppler are kept.
pub fn transform_cloud(points: &[RadarPoint], pose: &Se3Pose) -> Vec<RadarPoint> {
    points
        .iter()
        .map(|p| RadarPoint {
            position: pose.transform_point(&p.position),
            ..*p
        })
        .collect()
}

pub fn transform_positions(points: &[Vector3<f64>], pose: &Se3Pose) -> Vec<Vector3<f64>> {
    points.iter().map(|p| pose.transform_point(p)).collect()
}

/// Timestamped poses in strictly increasing time order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub stamps: Vec<f64>,
    pub poses: Vec<Se3Pose>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(stamps: Vec<f64>, poses: Vec<Se3Pose>) -> Result<Self, GeometryError> {
        assert_eq!(stamps.len(), poses.len(), "stamp/pose length mismatch");
        if let Some(i) = stamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(GeometryError::NonMonotonicTimestamps(i + 1));
        }
        Ok(Self { stamps, poses })
    }

    pub fn push(&mut self, stamp: f64, pose: Se3Pose) -> Result<(), GeometryError> {
        if let Some(&last) = self.stamps.last() {
            if stamp <= last {
                return Err(GeometryError::NonMonotonicTimestamps(self.stamps.len()));
            }
        }
        self.stamps.push(stamp);
        self.poses.push(pose);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Se3Pose)> {
        self.stamps.iter().copied().zip(self.poses.iter())
    }

    /// Cumulative travelled distance at each pose.
    pub fn path_lengths(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.len());
        for (i, p) in self.poses.iter().enumerate() {
            if i > 0 {
                acc += (p.translation - self.poses[i - 1].translation).norm();
            }
            out.push(acc);
        }
        out
    }

    /// Index of the pose whose stamp is within `tol` of `stamp`.
    pub fn index_of(&self, stamp: f64, tol: f64) -> Option<usize> {
        let i = self.stamps.partition_point(|&s| s < stamp - tol);
        (i < self.stamps.len() && (self.stamps[i] - stamp).abs() <= tol).then_some(i)
    }

    /// TUM text: `timestamp tx ty tz qx qy qz qw`, 9 significant digits.
    pub fn to_tum_string(&self) -> String {
        let mut out = String::new();
        for (t, p) in self.iter() {
            let q = p.rotation.coords; // (i, j, k, w)
            let fields = [t, p.translation.x, p.translation.y, p.translation.z, q.x, q.y, q.z, q.w];
            let line: Vec<String> = fields.iter().map(|v| fmt_sig(*v, 9)).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn write_tum<W: Write>(&self, mut w: W) -> Result<(), GeometryError> {
        w.write_all(self.to_tum_string().as_bytes())?;
        Ok(())
    }

    pub fn read_tum<R: BufRead>(r: R) -> Result<Self, GeometryError> {
        let mut traj = Trajectory::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| GeometryError::MalformedTrajectory {
                line: n + 1,
                reason: e.to_string(),
            })?;
            if vals.len() != 8 {
                return Err(GeometryError::MalformedTrajectory {
                    line: n + 1,
                    reason: format!("expected 8 fields, got {}", vals.len()),
                });
            }
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            let pose = Se3Pose::new(
                UnitQuaternion::new_normalize(q),
                Vector3::new(vals[1], vals[2], vals[3]),
            );
            traj.push(vals[0], pose)?;
        }
        Ok(traj)
    }
}

/// Formats `v` with `digits` significant digits in plain or exponent form.
pub fn fmt_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".to_string() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{:.*e}", digits - 1, v)
    }
}
