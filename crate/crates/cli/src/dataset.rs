//! On-disk sequence layout:
//!
//! ```text
//! <dir>/manifest.json     scan files, stamps, IMU quaternions, GT poses
//! <dir>/scans/000000.csv  x,y,z,intensity,doppler
//! <dir>/groundtruth.tum
//! <dir>/config.toml       generating config (synthetic data only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use radarloop::geometry::{RadarPoint, RadarScan, Se3Pose, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const GROUND_TRUTH: &str = "groundtruth.tum";
pub const CONFIG: &str = "config.toml";

/// Quaternion stored as `[qx, qy, qz, qw]`.
type QuatArray = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub timestamp: f64,
    pub imu_orientation: QuatArray,
    /// `[tx, ty, tz, qx, qy, qz, qw]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<[f64; 7]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scans: Vec<ManifestEntry>,
}

pub struct Dataset {
    pub scans: Vec<RadarScan>,
    pub ground_truth: Option<Trajectory>,
    /// Present for synthetic datasets.
    pub config: Option<PipelineConfig>,
}

fn quat_array(q: &UnitQuaternion<f64>) -> QuatArray {
    let c = q.coords;
    [c.x, c.y, c.z, c.w]
}

fn quat_from(a: &[f64]) -> Result<UnitQuaternion<f64>> {
    let q = Quaternion::new(a[3], a[0], a[1], a[2]);
    if !(q.norm() > 1e-9) || a.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Data(format!("invalid quaternion {a:?}")));
    }
    // already-unit input is kept bit-exact
    if (q.norm() - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(UnitQuaternion::new_unchecked(q));
    }
    Ok(UnitQuaternion::new_normalize(q))
}

pub fn write_scan_csv(path: &Path, scan: &RadarScan) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "z", "intensity", "doppler"])?;
    for p in &scan.points {
        // Display prints the shortest string that parses back exactly
        w.write_record([
            p.position.x.to_string(),
            p.position.y.to_string(),
            p.position.z.to_string(),
            p.intensity.to_string(),
            p.doppler.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<Vec<RadarPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    let expected = ["x", "y", "z", "intensity", "doppler"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(CliError::Data(format!("{}: expected header x,y,z,intensity,doppler", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        let v = v.map_err(|e| CliError::Data(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if v.len() != 5 || v.iter().any(|x| !x.is_finite()) {
            return Err(CliError::Data(format!("{} row {}: bad values", path.display(), i + 1)));
        }
        out.push(RadarPoint::new(Vector3::new(v[0], v[1], v[2]), v[3], v[4]));
    }
    Ok(out)
}

pub fn write_points_csv(path: &Path, points: &[RadarPoint]) -> Result<()> {
    write_scan_csv(
        path,
        &RadarScan {
            timestamp: 0.0,
            points: points.to_vec(),
            imu_orientation: UnitQuaternion::identity(),
        },
    )
}

pub fn write_dataset(
    dir: &Path,
    scans: &[RadarScan],
    ground_truth: Option<&Trajectory>,
    config: Option<&PipelineConfig>,
) -> Result<()> {
    let scan_dir = dir.join("scans");
    fs::create_dir_all(&scan_dir)?;
    if let Some(gt) = ground_truth {
        if gt.len() != scans.len() {
            return Err(CliError::Data("one ground-truth pose per scan required".into()));
        }
    }
    let mut entries = Vec::with_capacity(scans.len());
    for (i, scan) in scans.iter().enumerate() {
        let file = format!("scans/{i:06}.csv");
        write_scan_csv(&dir.join(&file), scan)?;
        let ground_truth = ground_truth.map(|gt| {
            let p = &gt.poses[i];
            let q = quat_array(&p.rotation);
            [p.translation.x, p.translation.y, p.translation.z, q[0], q[1], q[2], q[3]]
        });
        entries.push(ManifestEntry {
            file,
            timestamp: scan.timestamp,
            imu_orientation: quat_array(&scan.imu_orientation),
            ground_truth,
        });
    }
    let manifest = Manifest { scans: entries };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    if let Some(gt) = ground_truth {
        fs::write(dir.join(GROUND_TRUTH), gt.to_tum_string())?;
    }
    if let Some(cfg) = config {
        fs::write(dir.join(CONFIG), cfg.to_toml())?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.scans.is_empty() {
        return Err(CliError::Data("manifest lists no scans".into()));
    }
    let mut scans = Vec::with_capacity(manifest.scans.len());
    let mut gt_poses = Vec::new();
    for e in &manifest.scans {
        scans.push(RadarScan {
            timestamp: e.timestamp,
            points: read_points_csv(&dir.join(&e.file))?,
            imu_orientation: quat_from(&e.imu_orientation)?,
        });
        if let Some(g) = e.ground_truth {
            gt_poses.push(Se3Pose::new(quat_from(&g[3..])?, Vector3::new(g[0], g[1], g[2])));
        }
    }
    if scans.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(CliError::Data("scan timestamps must increase".into()));
    }
    let ground_truth = match gt_poses.len() {
        0 => None,
        n if n == scans.len() => Some(
            Trajectory::from_parts(scans.iter().map(|s| s.timestamp).collect(), gt_poses)
                .map_err(|e| CliError::Data(e.to_string()))?,
        ),
        _ => return Err(CliError::Data("ground truth given for only some scans".into())),
    };
    let config_path = dir.join(CONFIG);
    let config = if config_path.exists() {
        Some(PipelineConfig::load(Some(&config_path), &[])?)
    } else {
        None
    };
    Ok(Dataset {
        scans,
        ground_truth,
        config,
    })
}

pub fn read_tum(path: &Path) -> Result<Trajectory> {
    let f = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Trajectory::read_tum(std::io::BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_tum(path: &Path, traj: &Trajectory) -> Result<()> {
    fs::write(path, traj.to_tum_string())?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn scan_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:06}.csv"))
}
