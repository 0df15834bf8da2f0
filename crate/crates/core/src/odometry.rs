//! Registration-free odometry: ego velocity from Doppler returns by
//! three-point RANSAC, rotated into the world by the IMU and integrated.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{RadarPoint, RadarScan, Se3Pose, Trajectory};

/// Triplets whose direction matrix is worse conditioned than this are skipped.
pub const MAX_TRIPLET_CONDITION: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum OdometryError {
    #[error("ego-velocity estimation failed: best hypothesis has {found} inliers, need {required}")]
    EstimationFailed { found: usize, required: usize },
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Doppler residual threshold in m/s.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            inlier_threshold: 0.2,
            min_inliers: 10,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), OdometryError> {
        if !(self.inlier_threshold > 0.0) {
            return Err(OdometryError::InvalidConfig("inlier threshold must be > 0".into()));
        }
        if self.min_inliers < 3 {
            return Err(OdometryError::InvalidConfig("min inlier count must be >= 3".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoVelocityEstimate {
    /// Sensor-frame velocity in m/s.
    pub velocity: Vector3<f64>,
    pub inlier_indices: Vec<usize>,
    pub iterations_used: usize,
}

impl EgoVelocityEstimate {
    pub fn inlier_cloud(&self, scan: &RadarScan) -> Vec<RadarPoint> {
        self.inlier_indices.iter().map(|&i| scan.points[i]).collect()
    }
}

/// Doppler residual of one return under velocity `v`: `doppler + u.v`.
pub fn doppler_residual(p: &RadarPoint, v: &Vector3<f64>) -> f64 {
    p.doppler + p.position.normalize().dot(v)
}

/// Solves `u_i . v = -doppler_i` for three returns. Returns `None` when the
/// direction matrix is too ill-conditioned.
pub fn solve_triplet(dirs: &[Vector3<f64>; 3], dopplers: &[f64; 3]) -> Option<Vector3<f64>> {
    let a = Matrix3::from_rows(&[dirs[0].transpose(), dirs[1].transpose(), dirs[2].transpose()]);
    let sv = a.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if !(min > 0.0) || max / min > MAX_TRIPLET_CONDITION {
        return None;
    }
    let b = Vector3::new(-dopplers[0], -dopplers[1], -dopplers[2]);
    a.lu().solve(&b)
}

fn least_squares(points: &[RadarPoint], idx: &[usize]) -> Option<Vector3<f64>> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for &i in idx {
        let u = points[i].position.normalize();
        ata += u * u.transpose();
        atb -= u * points[i].doppler;
    }
    ata.cholesky().map(|c| c.solve(&atb))
}

fn inliers(points: &[RadarPoint], v: &Vector3<f64>, thr: f64) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| doppler_residual(&points[i], v).abs() <= thr)
        .collect()
}

/// Estimates the sensor-frame ego velocity of `scan`. `stream` selects an
/// independent RNG stream (e.g. the scan index) under `cfg.seed`.
pub fn estimate_ego_velocity(
    scan: &RadarScan,
    cfg: &RansacConfig,
    stream: u64,
) -> Result<EgoVelocityEstimate, OdometryError> {
    cfg.validate()?;
    let valid: Vec<usize> = (0..scan.points.len())
        .filter(|&i| scan.points[i].position.norm() > 1e-9)
        .collect();
    let points = &scan.points;
    let fail = |found| OdometryError::EstimationFailed {
        found,
        required: cfg.min_inliers,
    };
    if valid.len() < 3 {
        return Err(fail(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);

    let mut best: Option<(usize, Vector3<f64>)> = None;
    for _ in 0..cfg.max_iterations {
        let a = valid[rng.random_range(0..valid.len())];
        let b = valid[rng.random_range(0..valid.len())];
        let c = valid[rng.random_range(0..valid.len())];
        if a == b || b == c || a == c {
            continue;
        }
        let dirs = [
            points[a].position.normalize(),
            points[b].position.normalize(),
            points[c].position.normalize(),
        ];
        let Some(v) = solve_triplet(&dirs, &[points[a].doppler, points[b].doppler, points[c].doppler]) else {
            continue;
        };
        let count = valid
            .iter()
            .filter(|&&i| doppler_residual(&points[i], &v).abs() <= cfg.inlier_threshold)
            .count();
        if best.is_none_or(|(n, _)| count > n) {
            best = Some((count, v));
        }
    }
    let Some((count, hypothesis)) = best else {
        return Err(fail(0));
    };
    if count < cfg.min_inliers {
        return Err(fail(count));
    }

    // Refit on the consensus set until it stops changing.
    let mut set: Vec<usize> = inliers(points, &hypothesis, cfg.inlier_threshold)
        .into_iter()
        .filter(|i| valid.binary_search(i).is_ok())
        .collect();
    let mut velocity = hypothesis;
    for _ in 0..10 {
        let Some(v) = least_squares(points, &set) else { break };
        velocity = v;
        let next: Vec<usize> = inliers(points, &velocity, cfg.inlier_threshold)
            .into_iter()
            .filter(|i| valid.binary_search(i).is_ok())
            .collect();
        if next == set {
            break;
        }
        set = next;
    }
    let inlier_indices: Vec<usize> = set
        .into_iter()
        .filter(|&i| doppler_residual(&points[i], &velocity).abs() <= cfg.inlier_threshold)
        .collect();
    if inlier_indices.len() < cfg.min_inliers {
        return Err(fail(inlier_indices.len()));
    }
    Ok(EgoVelocityEstimate {
        velocity,
        inlier_indices,
        iterations_used: cfg.max_iterations,
    })
}

/// Per-scan odometry products alongside the integrated trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometryResult {
    pub trajectory: Trajectory,
    /// Sensor-frame velocity used for each scan (held over on failure).
    pub velocities: Vec<Vector3<f64>>,
    /// RANSAC inlier cloud per scan; empty when estimation failed.
    pub inlier_clouds: Vec<Vec<RadarPoint>>,
    /// True where estimation failed and the previous velocity was held.
    pub failed: Vec<bool>,
}

/// Integrates Doppler ego velocities with IMU orientation. The world
/// velocity `R_imu * v_sensor` is integrated with the trapezoidal rule;
/// orientation is taken from the IMU. Starts at the origin.
pub fn integrate_odometry(scans: &[RadarScan], cfg: &RansacConfig) -> OdometryResult {
    let estimates: Vec<Result<EgoVelocityEstimate, OdometryError>> = scans
        .par_iter()
        .enumerate()
        .map(|(i, s)| estimate_ego_velocity(s, cfg, i as u64))
        .collect();

    let mut trajectory = Trajectory::new();
    let mut velocities = Vec::with_capacity(scans.len());
    let mut inlier_clouds = Vec::with_capacity(scans.len());
    let mut failed = Vec::with_capacity(scans.len());
    let mut last_v = Vector3::zeros();
    let mut position = Vector3::zeros();
    let mut prev_world_v: Option<Vector3<f64>> = None;
    for (k, (scan, est)) in scans.iter().zip(estimates).enumerate() {
        let (v, cloud, flag) = match est {
            Ok(e) => {
                let cloud = e.inlier_cloud(scan);
                (e.velocity, cloud, false)
            }
            Err(_) => (last_v, Vec::new(), true),
        };
        last_v = v;
        let world_v = scan.imu_orientation * v;
        if let Some(pv) = prev_world_v {
            let dt = scan.timestamp - scans[k - 1].timestamp;
            position += 0.5 * (pv + world_v) * dt;
        }
        prev_world_v = Some(world_v);
        // Timestamps are validated by the trajectory container.
        trajectory
            .push(scan.timestamp, Se3Pose::new(scan.imu_orientation, position))
            .expect("scan timestamps must be strictly increasing");
        velocities.push(v);
        inlier_clouds.push(cloud);
        failed.push(flag);
    }
    OdometryResult {
        trajectory,
        velocities,
        inlier_clouds,
        failed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn scan_from(points: Vec<RadarPoint>) -> RadarScan {
        RadarScan {
            timestamp: 0.0,
            points,
            imu_orientation: UnitQuaternion::identity(),
        }
    }

    fn sphere_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let az: f64 = rng.random_range(-1.0..1.0);
                let el: f64 = rng.random_range(-0.25..0.25);
                let r: f64 = rng.random_range(2.0..40.0);
                Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * r
            })
            .collect()
    }

    #[test]
    fn zero_doppler_gives_zero_velocity() {
        let pts = sphere_points(50, 1).into_iter().map(|p| RadarPoint::new(p, 1.0, 0.0)).collect();
        let est = estimate_ego_velocity(&scan_from(pts), &RansacConfig::default(), 0).unwrap();
        assert!(est.velocity.norm() < 1e-12);
        assert_eq!(est.inlier_indices.len(), 50);
    }

    #[test]
    fn recovers_velocity_with_gross_outliers() {
        let v = Vector3::new(1.0, 0.5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<RadarPoint> = sphere_points(300, 3)
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut d = -p.normalize().dot(&v);
                if i % 5 < 2 {
                    let off: f64 = rng.random_range(0.5..3.0);
                    d += if rng.random_bool(0.5) { off } else { -off };
                }
                RadarPoint::new(p, 1.0, d)
            })
            .collect();
        let est = estimate_ego_velocity(&scan_from(pts), &RansacConfig::default(), 0).unwrap();
        assert!((est.velocity - v).norm() < 1e-9);
        assert_eq!(est.inlier_indices.len(), 180);
    }

    #[test]
    fn coplanar_triplet_is_rejected() {
        // All three directions lie in the x-y plane through the origin.
        let dirs = [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0).normalize(),
        ];
        assert!(solve_triplet(&dirs, &[-1.0, -0.5, -1.06]).is_none());
        let good = [Vector3::x(), Vector3::y(), Vector3::z()];
        assert_eq!(solve_triplet(&good, &[-1.0, -2.0, -3.0]), Some(Vector3::new(1.0, 2.0, 3.0)));
    }

    #[test]
    fn planar_scan_fails_estimation() {
        let pts = (0..30)
            .map(|i| {
                let a = i as f64 * 0.05 - 0.7;
                RadarPoint::new(Vector3::new(a.cos(), a.sin(), 0.0) * 10.0, 1.0, -a.cos())
            })
            .collect();
        let err = estimate_ego_velocity(&scan_from(pts), &RansacConfig::default(), 0).unwrap_err();
        assert!(matches!(err, OdometryError::EstimationFailed { .. }));
    }

    #[test]
    fn inliers_always_satisfy_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Vector3::new(-0.4, 2.0, 0.1);
        let pts: Vec<RadarPoint> = sphere_points(200, 5)
            .into_iter()
            .map(|p| {
                let noise: f64 = rng.random_range(-0.3..0.3);
                RadarPoint::new(p, 1.0, -p.normalize().dot(&v) + noise)
            })
            .collect();
        let cfg = RansacConfig::default();
        let est = estimate_ego_velocity(&scan_from(pts.clone()), &cfg, 9).unwrap();
        for &i in &est.inlier_indices {
            assert!(doppler_residual(&pts[i], &est.velocity).abs() <= cfg.inlier_threshold);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = RansacConfig {
            min_inliers: 2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.min_inliers = 3;
        cfg.inlier_threshold = 0.0;
        assert!(cfg.validate().is_err());
    }

    fn constant_velocity_scans(v_world: Vector3<f64>, n: usize, rate: f64) -> Vec<RadarScan> {
        let dirs = sphere_points(40, 8);
        (0..n)
            .map(|k| RadarScan {
                timestamp: k as f64 / rate,
                points: dirs
                    .iter()
                    .map(|p| RadarPoint::new(*p, 1.0, -p.normalize().dot(&v_world)))
                    .collect(),
                imu_orientation: UnitQuaternion::identity(),
            })
            .collect()
    }

    #[test]
    fn stationary_sequence_stays_at_origin() {
        let scans = constant_velocity_scans(Vector3::zeros(), 20, 10.0);
        let odo = integrate_odometry(&scans, &RansacConfig::default());
        assert!(odo.trajectory.poses.iter().all(|p| p.translation == Vector3::zeros()));
    }

    #[test]
    fn constant_velocity_integrates_exactly() {
        let scans = constant_velocity_scans(Vector3::new(1.0, 0.0, 0.0), 101, 10.0);
        let odo = integrate_odometry(&scans, &RansacConfig::default());
        let end = odo.trajectory.poses.last().unwrap().translation;
        assert!((end - Vector3::new(10.0, 0.0, 0.0)).norm() < 1e-6, "{end}");
        assert!(odo.failed.iter().all(|f| !f));
    }

    #[test]
    fn failed_scan_holds_previous_velocity() {
        let mut scans = constant_velocity_scans(Vector3::new(2.0, 0.0, 0.0), 5, 10.0);
        scans[3].points.truncate(2);
        let odo = integrate_odometry(&scans, &RansacConfig::default());
        assert_eq!(odo.failed, vec![false, false, false, true, false]);
        assert!((odo.velocities[3] - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-9);
        assert!(odo.inlier_clouds[3].is_empty());
    }
}
