//! Alignment quality: CorAl entropy measures, registration-derived measures,
//! self-supervised training data and the logistic alignment classifier.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Se3Pose;
use crate::keyframing::{Keyframe, Submap};
use crate::logistic::{logistic, train_logistic, LogisticConfig, LogisticError, LogisticModel};
use crate::registration::{evaluate_p2d, RegistrationConfig};
use crate::spatial::PointGrid;

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("no point has enough neighbors for an entropy estimate")]
    MeasuresUndefined,
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("training failed: {0}")]
    Training(#[from] LogisticError),
    #[error("no samples of the requested classes")]
    NoSamples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    pub radius: f64,
    pub min_neighbors: usize,
    pub det_floor: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            radius: 1.5,
            min_neighbors: 5,
            det_floor: 1e-12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyMeasures {
    pub joint: f64,
    pub separate: f64,
    pub overlap: f64,
}

fn neighborhood_entropy(points: &[Vector3<f64>], idx: impl Iterator<Item = usize>, det_floor: f64) -> f64 {
    let mut n = 0.0;
    let mut sum = Vector3::zeros();
    let mut outer = Matrix3::zeros();
    for i in idx {
        let p = points[i];
        n += 1.0;
        sum += p;
        outer += p * p.transpose();
    }
    let mean = sum / n;
    let cov = outer / n - mean * mean.transpose();
    let det = cov.determinant().max(det_floor);
    0.5 * ((2.0 * std::f64::consts::PI * std::f64::consts::E).powi(3) * det).ln()
}

/// CorAl measures of `b` mapped by `pose` into the frame of `a`.
///
/// Entropies average over the points whose own-cloud neighborhood has at
/// least `min_neighbors` points (the joint neighborhood is then at least as
/// large). Overlap counts points with a neighbor from the other cloud.
pub fn compute_entropy_measures(
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
    pose: &Se3Pose,
    cfg: &EntropyConfig,
) -> Result<EntropyMeasures, AlignmentError> {
    if a.is_empty() || b.is_empty() {
        return Err(AlignmentError::EmptyCloud);
    }
    let na = a.len();
    let mut joint: Vec<Vector3<f64>> = a.to_vec();
    joint.extend(b.iter().map(|p| pose.transform_point(p)));
    let grid = PointGrid::new(&joint, cfg.radius);
    let per_point: Vec<(Option<(f64, f64)>, bool)> = (0..joint.len())
        .into_par_iter()
        .map(|i| {
            let nbrs = grid.within(&joint[i], cfg.radius);
            let in_a = i < na;
            let own = nbrs.iter().filter(|&&j| (j < na) == in_a).count();
            let crosses = own < nbrs.len();
            let entropies = (own >= cfg.min_neighbors).then(|| {
                let hj = neighborhood_entropy(&joint, nbrs.iter().copied(), cfg.det_floor);
                let hs = neighborhood_entropy(&joint, nbrs.iter().copied().filter(|&j| (j < na) == in_a), cfg.det_floor);
                (hj, hs)
            });
            (entropies, crosses)
        })
        .collect();
    let valid: Vec<(f64, f64)> = per_point.iter().filter_map(|(e, _)| *e).collect();
    if valid.is_empty() {
        return Err(AlignmentError::MeasuresUndefined);
    }
    let n = valid.len() as f64;
    Ok(EntropyMeasures {
        joint: valid.iter().map(|v| v.0).sum::<f64>() / n,
        separate: valid.iter().map(|v| v.1).sum::<f64>() / n,
        overlap: per_point.iter().filter(|(_, c)| *c).count() as f64 / joint.len() as f64,
    })
}

/// `[H_j, H_s, H_o, C_f, C_o, C_a]`; the bias is implicit. Entropy fields are
/// NaN when they were not computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityVector {
    #[serde(with = "nan_as_null")]
    pub h_joint: f64,
    #[serde(with = "nan_as_null")]
    pub h_separate: f64,
    #[serde(with = "nan_as_null")]
    pub h_overlap: f64,
    pub cost: f64,
    pub correspondences: f64,
    pub avg_set_size: f64,
}

/// JSON has no NaN; uncomputed measures travel as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl QualityVector {
    pub fn augmented(&self) -> [f64; 7] {
        [
            self.h_joint,
            self.h_separate,
            self.h_overlap,
            self.cost,
            self.correspondences,
            self.avg_set_size,
            1.0,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    Coral,
    Cfear,
    Combined,
}

impl FeatureSet {
    pub fn indices(self) -> &'static [usize] {
        match self {
            FeatureSet::Coral => &[0, 1, 2],
            FeatureSet::Cfear => &[3, 4, 5],
            FeatureSet::Combined => &[0, 1, 2, 3, 4, 5],
        }
    }

    pub fn needs_entropy(self) -> bool {
        self != FeatureSet::Cfear
    }

    pub fn extract(self, qv: &QualityVector) -> Vec<f64> {
        let full = qv.augmented();
        self.indices().iter().map(|&i| full[i]).collect()
    }
}

/// Quality vector of `query` placed into the candidate frame by `pose`.
pub fn quality_vector(
    query: &Submap,
    candidate: &Submap,
    pose: &Se3Pose,
    entropy: Option<&EntropyConfig>,
    reg: &RegistrationConfig,
) -> Result<QualityVector, AlignmentError> {
    let m = evaluate_p2d(&query.surface_points, &candidate.surface_points, pose, reg);
    let h = match entropy {
        Some(cfg) => compute_entropy_measures(&candidate.points, &query.points, pose, cfg)?,
        None => EntropyMeasures {
            joint: f64::NAN,
            separate: f64::NAN,
            overlap: f64::NAN,
        },
    };
    Ok(QualityVector {
        h_joint: h.joint,
        h_separate: h.separate,
        h_overlap: h.overlap,
        cost: m.cost,
        correspondences: m.correspondences as f64,
        avg_set_size: m.average_set_size,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceClass {
    None,
    Small,
    Medium,
    Large,
}

impl DisturbanceClass {
    pub const NEGATIVE: [DisturbanceClass; 3] = [DisturbanceClass::Small, DisturbanceClass::Medium, DisturbanceClass::Large];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceAxes {
    /// Translation in a random ground-plane direction, rotation about z.
    GroundPlane,
    /// Translation in a random 3D direction, rotation about a random axis.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceSpec {
    /// (translation m, rotation deg) per class.
    pub small: (f64, f64),
    pub medium: (f64, f64),
    pub large: (f64, f64),
    pub axes: DisturbanceAxes,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            small: (0.5, 0.5),
            medium: (1.0, 2.0),
            large: (2.0, 15.0),
            axes: DisturbanceAxes::GroundPlane,
        }
    }
}

impl DisturbanceSpec {
    pub fn magnitude(&self, class: DisturbanceClass) -> (f64, f64) {
        match class {
            DisturbanceClass::None => (0.0, 0.0),
            DisturbanceClass::Small => self.small,
            DisturbanceClass::Medium => self.medium,
            DisturbanceClass::Large => self.large,
        }
    }

    /// Random disturbance `D` of the class magnitude; the perturbed pose is
    /// `D * T`.
    pub fn sample<R: Rng>(&self, class: DisturbanceClass, rng: &mut R) -> Se3Pose {
        let (t, deg) = self.magnitude(class);
        let angle = deg.to_radians();
        match self.axes {
            DisturbanceAxes::GroundPlane => {
                let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Se3Pose::from_yaw(sign * angle, Vector3::new(dir.cos(), dir.sin(), 0.0) * t)
            }
            DisturbanceAxes::Full => {
                let dir = random_unit(rng);
                let axis = random_unit(rng);
                Se3Pose::new(nalgebra::UnitQuaternion::from_scaled_axis(axis * angle), dir * t)
            }
        }
    }
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledAlignmentSample {
    pub quality: QualityVector,
    pub aligned: bool,
    pub class: DisturbanceClass,
    /// (query keyframe id, candidate keyframe id).
    pub pair: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub entropy: EntropyConfig,
    pub disturbance: DisturbanceSpec,
    pub feature_set: FeatureSet,
    pub logistic: LogisticConfig,
    /// Use every n-th eligible training pair.
    pub pair_step: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            entropy: EntropyConfig::default(),
            disturbance: DisturbanceSpec::default(),
            feature_set: FeatureSet::Cfear,
            logistic: LogisticConfig::default(),
            pair_step: 1,
        }
    }
}

/// (query, candidate) keyframe indices of consecutive submaps. With
/// `offset` equal to the submap size the two submaps share no scans.
pub fn training_pairs(n_keyframes: usize, offset: usize, step: usize) -> Vec<(usize, usize)> {
    let offset = offset.max(1);
    (offset..n_keyframes).step_by(step.max(1)).map(|q| (q, q - offset)).collect()
}

/// One positive at the odometry transform and one negative per disturbance
/// class for each pair. Negatives are scored at the perturbed pose without
/// re-registration. Pairs whose measures are undefined are skipped.
pub fn synthesize_training_set(
    keyframes: &[Keyframe],
    submaps: &[Submap],
    pairs: &[(usize, usize)],
    cfg: &AlignmentConfig,
    reg: &RegistrationConfig,
    seed: u64,
) -> Vec<LabeledAlignmentSample> {
    pairs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(k, &(q, c))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let odom = keyframes[c].pose.between(&keyframes[q].pose);
            let mut out = Vec::with_capacity(4);
            let classes = [DisturbanceClass::None, DisturbanceClass::Small, DisturbanceClass::Medium, DisturbanceClass::Large];
            for class in classes {
                let d = cfg.disturbance.sample(class, &mut rng);
                let pose = d.compose(&odom);
                if let Ok(quality) = quality_vector(&submaps[q], &submaps[c], &pose, Some(&cfg.entropy), reg) {
                    out.push(LabeledAlignmentSample {
                        quality,
                        aligned: class == DisturbanceClass::None,
                        class,
                        pair: (keyframes[q].id, keyframes[c].id),
                    });
                }
            }
            out
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentClassifier {
    pub feature_set: FeatureSet,
    pub model: LogisticModel,
    pub config_hash: String,
}

impl AlignmentClassifier {
    /// Weights over `[H_j, H_s, H_o, C_f, C_o, C_a, 1]`, zero for unused
    /// features.
    pub fn beta(&self) -> [f64; 7] {
        let mut b = [0.0; 7];
        for (slot, &i) in self.feature_set.indices().iter().enumerate() {
            b[i] = self.model.theta[slot];
        }
        b[6] = *self.model.theta.last().unwrap();
        b
    }

    /// Pre-sigmoid score `d_align`.
    pub fn decision(&self, qv: &QualityVector) -> f64 {
        self.model.decision(&self.feature_set.extract(qv))
    }

    pub fn needs_entropy(&self) -> bool {
        self.feature_set.needs_entropy()
    }
}

pub fn classify_alignment(qv: &QualityVector, clf: &AlignmentClassifier) -> f64 {
    logistic(clf.decision(qv))
}

/// Trains on the positives and the negatives of `classes`.
pub fn train_alignment_classifier(
    samples: &[LabeledAlignmentSample],
    feature_set: FeatureSet,
    classes: &[DisturbanceClass],
    cfg: &LogisticConfig,
    config_hash: String,
) -> Result<AlignmentClassifier, AlignmentError> {
    let chosen: Vec<&LabeledAlignmentSample> = samples
        .iter()
        .filter(|s| s.aligned || classes.contains(&s.class))
        .collect();
    if chosen.is_empty() {
        return Err(AlignmentError::NoSamples);
    }
    let x: Vec<Vec<f64>> = chosen.iter().map(|s| feature_set.extract(&s.quality)).collect();
    let y: Vec<bool> = chosen.iter().map(|s| s.aligned).collect();
    let model = train_logistic(&x, &y, cfg)?;
    Ok(AlignmentClassifier {
        feature_set,
        model,
        config_hash,
    })
}
