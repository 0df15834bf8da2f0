use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::world::WorldModel;
use super::SimError;
use crate::geometry::{RadarPoint, RadarScan, Se3Pose};

/// Directional 4D radar model. Angles in degrees, distances in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorModel {
    pub azimuth_half_fov_deg: f64,
    pub elevation_half_fov_deg: f64,
    pub max_range: f64,
    pub range_noise: f64,
    pub angular_noise_deg: f64,
    pub doppler_noise: f64,
    /// Log-normal sigma of the multiplicative intensity noise.
    pub intensity_noise: f64,
    /// Target (non-ground) detections per scan.
    pub target_points: usize,
    /// Ground detections per scan.
    pub ground_points: usize,
    pub dropout: f64,
    /// Fraction of detections given a dynamic-object Doppler.
    pub outlier_fraction: f64,
    /// Outlier Doppler is drawn uniformly from `[-max, max]`.
    pub outlier_doppler_max: f64,
    /// Outlier draws closer than this to the true Doppler are redrawn.
    pub outlier_min_deviation: f64,
    /// Ray budget per scan.
    pub max_rays: usize,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            azimuth_half_fov_deg: 60.0,
            elevation_half_fov_deg: 15.0,
            max_range: 40.0,
            range_noise: 0.05,
            angular_noise_deg: 0.3,
            doppler_noise: 0.05,
            intensity_noise: 0.2,
            target_points: 240,
            ground_points: 60,
            dropout: 0.02,
            outlier_fraction: 0.1,
            outlier_doppler_max: 3.0,
            outlier_min_deviation: 0.0,
            max_rays: 6000,
        }
    }
}

impl SensorModel {
    pub fn noiseless(mut self) -> Self {
        self.range_noise = 0.0;
        self.angular_noise_deg = 0.0;
        self.doppler_noise = 0.0;
        self.intensity_noise = 0.0;
        self.dropout = 0.0;
        self.outlier_fraction = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let sigmas = [
            self.range_noise,
            self.angular_noise_deg,
            self.doppler_noise,
            self.intensity_noise,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(SimError::InvalidSensor("noise sigmas must be >= 0".into()));
        }
        for fov in [self.azimuth_half_fov_deg, self.elevation_half_fov_deg] {
            if !(fov > 0.0 && fov <= 180.0) {
                return Err(SimError::InvalidSensor("FOV half-angles must lie in (0, 180]".into()));
            }
        }
        if !(self.max_range > 0.0) {
            return Err(SimError::InvalidSensor("max range must be positive".into()));
        }
        for p in [self.dropout, self.outlier_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidSensor("probabilities must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// True when `p` (sensor frame) lies inside the FOV cone and range.
    pub fn in_view(&self, p: &Vector3<f64>) -> bool {
        let r = p.norm();
        if r == 0.0 || r > self.max_range {
            return false;
        }
        let az = p.y.atan2(p.x).to_degrees();
        let el = (p.z / r).asin().to_degrees();
        az.abs() <= self.azimuth_half_fov_deg && el.abs() <= self.elevation_half_fov_deg
    }
}

fn direction(az: f64, el: f64) -> Vector3<f64> {
    Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Simulates one scan. `ego_velocity` is in the world frame; the returned
/// scan's IMU orientation is the true sensor orientation (drift is applied
/// by the sequence generator).
pub fn simulate_scan<R: Rng>(
    world: &WorldModel,
    sensor_pose: &Se3Pose,
    ego_velocity: &Vector3<f64>,
    sensor: &SensorModel,
    timestamp: f64,
    rng: &mut R,
) -> RadarScan {
    let v_sensor = sensor_pose.rotation.inverse() * ego_velocity;
    let origin = sensor_pose.translation;
    let nearby = world.surfaces_near(&origin.xy(), sensor.max_range);
    let az_max = sensor.azimuth_half_fov_deg.to_radians();
    let el_max = sensor.elevation_half_fov_deg.to_radians();
    let ang_sigma = sensor.angular_noise_deg.to_radians();
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");

    let mut points = Vec::with_capacity(sensor.target_points + sensor.ground_points);
    let emit = |rng: &mut R, az: f64, el: f64, range: f64, reflectivity: f64, points: &mut Vec<RadarPoint>| {
        if sensor.dropout > 0.0 && rng.random_bool(sensor.dropout) {
            return;
        }
        let true_dir = direction(az, el);
        let mut doppler = -true_dir.dot(&v_sensor);
        if sensor.doppler_noise > 0.0 {
            doppler += sensor.doppler_noise * gauss.sample(rng);
        }
        if sensor.outlier_fraction > 0.0 && rng.random_bool(sensor.outlier_fraction) {
            let m = sensor.outlier_doppler_max;
            let truth = -true_dir.dot(&v_sensor);
            let mut d = rng.random_range(-m..=m);
            let mut tries = 0;
            while (d - truth).abs() < sensor.outlier_min_deviation && tries < 1000 {
                d = rng.random_range(-m..=m);
                tries += 1;
            }
            doppler = d;
        }
        let (mut maz, mut mel, mut mr) = (az, el, range);
        if ang_sigma > 0.0 {
            maz += ang_sigma * gauss.sample(rng);
            mel += ang_sigma * gauss.sample(rng);
        }
        if sensor.range_noise > 0.0 {
            mr += sensor.range_noise * gauss.sample(rng);
        }
        let mut intensity = reflectivity / (range * range);
        if sensor.intensity_noise > 0.0 {
            let s = sensor.intensity_noise;
            intensity *= (s * gauss.sample(rng) - 0.5 * s * s).exp();
        }
        let position = direction(maz, mel) * mr;
        if mr <= 0.0 || !sensor.in_view(&position) {
            return;
        }
        points.push(RadarPoint { position, intensity, doppler });
    };

    let mut rays = 0;
    let mut targets = 0;
    while targets < sensor.target_points && rays < sensor.max_rays {
        rays += 1;
        let az = rng.random_range(-az_max..=az_max);
        let el = rng.random_range(-el_max..=el_max);
        let dir_world = sensor_pose.rotation * direction(az, el);
        match world.raycast(&origin, &dir_world, &nearby, true) {
            Some((t, Some(idx))) if t <= sensor.max_range => {
                targets += 1;
                emit(rng, az, el, t, world.surfaces[idx].reflectivity, &mut points);
            }
            _ => {}
        }
    }
    let mut ground = 0;
    let mut ground_rays = 0;
    while world.ground && ground < sensor.ground_points && ground_rays < sensor.max_rays {
        ground_rays += 1;
        let az = rng.random_range(-az_max..=az_max);
        let el = rng.random_range(-el_max..=0.0);
        let dir_world = sensor_pose.rotation * direction(az, el);
        if let Some((t, hit)) = world.raycast(&origin, &dir_world, &nearby, true) {
            if t <= sensor.max_range {
                ground += 1;
                let refl = hit.map_or(world.ground_reflectivity, |i| world.surfaces[i].reflectivity);
                emit(rng, az, el, t, refl, &mut points);
            }
        }
    }

    RadarScan {
        timestamp,
        points,
        imu_orientation: sensor_pose.rotation,
    }
}

/// Orientation error model of the IMU: a yaw drift growing linearly in
/// time plus slow roll/pitch oscillations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuDrift {
    pub yaw_rate_deg_per_s: f64,
    pub tilt_amplitude_deg: f64,
    pub tilt_period_s: f64,
}

impl Default for ImuDrift {
    fn default() -> Self {
        Self {
            yaw_rate_deg_per_s: 0.06,
            tilt_amplitude_deg: 0.2,
            tilt_period_s: 40.0,
        }
    }
}

impl ImuDrift {
    pub fn none() -> Self {
        Self {
            yaw_rate_deg_per_s: 0.0,
            tilt_amplitude_deg: 0.0,
            tilt_period_s: 40.0,
        }
    }

    /// World-frame error rotation at time `t`; `phase` decorrelates roll and pitch.
    pub fn error_at(&self, t: f64, phase: f64) -> UnitQuaternion<f64> {
        let w = 2.0 * std::f64::consts::PI / self.tilt_period_s;
        let a = self.tilt_amplitude_deg.to_radians();
        let yaw = (self.yaw_rate_deg_per_s * t).to_radians();
        UnitQuaternion::from_euler_angles(a * (w * t + phase).sin(), a * (w * t + 1.7 * phase).cos(), yaw)
    }
}
