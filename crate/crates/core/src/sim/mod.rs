//! Synthetic worlds and a directional 4D radar simulator.

mod path;
mod sensor;
mod world;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use path::{Path, PathSpec, PathTemplate};
pub use sensor::{simulate_scan, ImuDrift, SensorModel};
pub use world::{
    generate_world, trail_skeleton, Primitive, Scenario, Surface, WorldModel, REFLECTIVITY_SCALE,
    TRAIL_CORNER_RADIUS, TRAIL_HALF_SIDE,
};

use crate::geometry::{RadarScan, Se3Pose, Trajectory};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scenario `{0}` (expected `tunnel` or `forest`)")]
    UnknownScenario(String),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("path leaves the world bounds at ({0:.2}, {1:.2})")]
    PathOutOfBounds(f64, f64),
    #[error("invalid sensor model: {0}")]
    InvalidSensor(String),
}

/// A simulated recording with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSequence {
    pub scans: Vec<RadarScan>,
    pub ground_truth: Trajectory,
    /// True sensor-frame ego velocity per scan.
    pub velocities: Vec<Vector3<f64>>,
}

/// Options for [`generate_sequence`] beyond the path and sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceOptions {
    pub rate_hz: f64,
    pub seed: u64,
    pub imu_drift: ImuDrift,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        Self {
            rate_hz: 10.0,
            seed: 0,
            imu_drift: ImuDrift::default(),
        }
    }
}

/// Simulates the scans along `path` at the configured rate. Each scan uses
/// its own RNG stream split from the master seed, so scans are generated in
/// parallel and the result does not depend on thread scheduling.
pub fn generate_sequence(
    world: &WorldModel,
    path: &PathSpec,
    sensor: &SensorModel,
    opts: &SequenceOptions,
) -> Result<SimSequence, SimError> {
    sensor.validate()?;
    if !(opts.rate_hz > 0.0) {
        return Err(SimError::InvalidPath("rate must be positive".into()));
    }
    let path = Path::from_spec(path)?;
    for p in path.sample_positions(0.1) {
        if !world.contains_xy(&p) {
            return Err(SimError::PathOutOfBounds(p.x, p.y));
        }
    }
    let n = (path.duration() * opts.rate_hz + 1e-9).floor() as usize;
    let phase = (opts.seed % 1000) as f64 * 0.37;
    let results: Vec<(RadarScan, Se3Pose, Vector3<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let t = i as f64 / opts.rate_hz;
            let pose = path.pose_at(t);
            let v_world = path.velocity_at(t);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64 + 1);
            let mut scan = simulate_scan(world, &pose, &v_world, sensor, t, &mut rng);
            scan.imu_orientation = opts.imu_drift.error_at(t, phase) * pose.rotation;
            let v_sensor = pose.rotation.inverse() * v_world;
            (scan, pose, v_sensor)
        })
        .collect();
    let mut scans = Vec::with_capacity(n);
    let mut stamps = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    for (scan, pose, v) in results {
        stamps.push(scan.timestamp);
        poses.push(pose);
        velocities.push(v);
        scans.push(scan);
    }
    let ground_truth = Trajectory::from_parts(stamps, poses).expect("uniform sampling is increasing");
    Ok(SimSequence {
        scans,
        ground_truth,
        velocities,
    })
}
