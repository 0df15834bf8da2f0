//! Keyframe selection, multi-keyframe accumulation and oriented surface
//! points.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{transform_cloud, RadarPoint, Se3Pose, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyframeConfig {
    /// Translation gate in meters.
    pub min_translation: f64,
    /// Rotation gate in degrees.
    pub min_rotation_deg: f64,
    pub surface: SurfaceConfig,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            min_translation: 1.5,
            min_rotation_deg: 5.0,
            surface: SurfaceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceConfig {
    pub cell_size: f64,
    pub min_points: usize,
    /// Cells with smallest/middle eigenvalue ratio above this are dropped.
    pub planarity_ratio: f64,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            cell_size: 1.0,
            min_points: 6,
            planarity_ratio: 0.5,
        }
    }
}

/// Per-cell mean and normal of a point cloud.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub mean: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub weight: usize,
}

impl SurfacePoint {
    pub fn transformed(&self, pose: &Se3Pose) -> SurfacePoint {
        SurfacePoint {
            mean: pose.transform_point(&self.mean),
            normal: pose.transform_vector(&self.normal),
            weight: self.weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub id: usize,
    /// Index of the source scan.
    pub scan_index: usize,
    pub timestamp: f64,
    pub pose: Se3Pose,
    /// RANSAC inlier cloud in the sensor frame.
    pub cloud: Vec<RadarPoint>,
    pub surface_points: Vec<SurfacePoint>,
    /// Odometry path length travelled up to this keyframe.
    pub path_length: f64,
}

/// Greedy keyframe selection: the first scan is always a keyframe, then a
/// new one whenever translation or rotation since the last keyframe reaches
/// its gate.
pub fn select_keyframes(
    trajectory: &Trajectory,
    inlier_clouds: &[Vec<RadarPoint>],
    cfg: &KeyframeConfig,
) -> Vec<Keyframe> {
    assert_eq!(trajectory.len(), inlier_clouds.len(), "trajectory and clouds must align");
    let lengths = trajectory.path_lengths();
    let rot_gate = cfg.min_rotation_deg.to_radians();
    let mut out: Vec<Keyframe> = Vec::new();
    for (i, (stamp, pose)) in trajectory.iter().enumerate() {
        let take = match out.last() {
            None => true,
            Some(last) => {
                let (dt, da) = last.pose.distance_to(pose);
                dt >= cfg.min_translation || da >= rot_gate
            }
        };
        if take {
            out.push(Keyframe {
                id: out.len(),
                scan_index: i,
                timestamp: stamp,
                pose: *pose,
                cloud: inlier_clouds[i].clone(),
                surface_points: compute_surface_points(
                    &inlier_clouds[i].iter().map(|p| p.position).collect::<Vec<_>>(),
                    &cfg.surface,
                ),
                path_length: lengths[i],
            });
        }
    }
    out
}

/// Voxel-grid surface points. Cells with at least `min_points` points get a
/// mean and covariance; the normal is the eigenvector of the smallest
/// eigenvalue, oriented toward the sensor origin. Non-planar cells are
/// dropped. Output is ordered by cell index.
pub fn compute_surface_points(points: &[Vector3<f64>], cfg: &SurfaceConfig) -> Vec<SurfacePoint> {
    let mut cells: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = (
            (p.x / cfg.cell_size).floor() as i64,
            (p.y / cfg.cell_size).floor() as i64,
            (p.z / cfg.cell_size).floor() as i64,
        );
        cells.entry(key).or_default().push(i);
    }
    let mut out = Vec::new();
    for idx in cells.values() {
        if idx.len() < cfg.min_points.max(3) {
            continue;
        }
        if let Some(sp) = fit_surface(points, idx, cfg.planarity_ratio) {
            out.push(sp);
        }
    }
    out
}

fn fit_surface(points: &[Vector3<f64>], idx: &[usize], planarity_ratio: f64) -> Option<SurfacePoint> {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = points[i] - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l_min, l_mid) = (eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]]);
    let scale = eig.eigenvalues[order[2]].max(1e-300);
    if l_mid <= 1e-12 * scale || l_min > planarity_ratio * l_mid {
        return None;
    }
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned().normalize();
    if normal.dot(&(-mean)) < 0.0 {
        normal = -normal;
    }
    Some(SurfacePoint {
        mean,
        normal,
        weight: idx.len(),
    })
}

/// Concatenates the clouds of the last `k` keyframes (up to and including
/// `frames[newest]`), expressed in the newest keyframe's frame.
pub fn accumulate_keyframes(frames: &[Keyframe], newest: usize, k: usize) -> Vec<RadarPoint> {
    let k = k.max(1);
    let first = (newest + 1).saturating_sub(k);
    let anchor = frames[newest].pose;
    let mut out = Vec::new();
    for f in &frames[first..=newest] {
        if f.id == frames[newest].id {
            out.extend_from_slice(&f.cloud);
        } else {
            let rel = anchor.between(&f.pose);
            out.extend(transform_cloud(&f.cloud, &rel));
        }
    }
    out
}

/// Accumulated cloud of the last `k` keyframes and its surface points, in
/// the newest keyframe's frame. Registration and alignment scoring work on
/// submaps because a single ~300-point scan yields few surface points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submap {
    pub keyframe_id: usize,
    pub points: Vec<Vector3<f64>>,
    pub surface_points: Vec<SurfacePoint>,
}

pub fn build_submaps(frames: &[Keyframe], k: usize, cfg: &SurfaceConfig) -> Vec<Submap> {
    (0..frames.len())
        .into_par_iter()
        .map(|i| {
            let points: Vec<Vector3<f64>> = accumulate_keyframes(frames, i, k).iter().map(|p| p.position).collect();
            let surface_points = compute_surface_points(&points, cfg);
            Submap {
                keyframe_id: frames[i].id,
                points,
                surface_points,
            }
        })
        .collect()
}
