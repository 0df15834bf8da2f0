//! Registration-backed verification of retrieved loop candidates and the
//! combined loop classifier over `[d_odom, d_sc, d_align]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{quality_vector, AlignmentClassifier, EntropyConfig, QualityVector};
use crate::keyframing::{Keyframe, Submap};
use crate::logistic::{logistic, train_logistic, LogisticConfig, LogisticError, LogisticModel};
use crate::place_recognition::{shift_initial_guess, RetrievedCandidate};
use crate::registration::{register_p2d, RegistrationConfig, RegistrationResult};

#[derive(Debug, Error, PartialEq)]
pub enum VerificationError {
    #[error("loop classifier training failed: {0}")]
    TrainingFailed(#[from] LogisticError),
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    pub registration: RegistrationConfig,
    pub entropy: EntropyConfig,
    /// Loop acceptance threshold `y_th`.
    pub threshold: f64,
    /// Registrations that hit the iteration cap get no alignment score,
    /// so the candidate is rejected like one without overlap.
    pub require_convergence: bool,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            entropy: EntropyConfig::default(),
            threshold: 0.9,
            require_convergence: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub query: usize,
    pub candidate: usize,
    pub d_sc: f64,
    pub d_odom: f64,
    pub shift: usize,
    /// None when registration found no overlap.
    pub registration: Option<RegistrationResult>,
    pub quality: Option<QualityVector>,
    /// Pre-sigmoid alignment score.
    pub d_align: Option<f64>,
    pub y_loop: f64,
}

impl LoopCandidate {
    pub fn features(&self) -> Option<[f64; 3]> {
        self.d_align.map(|a| [self.d_odom, self.d_sc, a])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopClassifier {
    pub model: LogisticModel,
    pub threshold: f64,
    pub config_hash: String,
}

impl LoopClassifier {
    /// `[theta_odom, theta_sc, theta_align, bias]`.
    pub fn theta(&self) -> [f64; 4] {
        let t = &self.model.theta;
        [t[0], t[1], t[2], t[3]]
    }

    pub fn score(&self, features: &[f64; 3]) -> f64 {
        let t = self.theta();
        logistic(t[0] * features[0] + t[1] * features[1] + t[2] * features[2] + t[3])
    }
}

/// Registers the query submap against the candidate submap starting from
/// the descriptor's yaw shift, then scores the alignment at the refined
/// pose. Returns no registration when the submaps do not overlap, and no
/// score when the registration did not converge (if so configured).
pub fn register_candidate(
    query: usize,
    retrieved: &RetrievedCandidate,
    keyframes: &[Keyframe],
    submaps: &[Submap],
    n_sec: usize,
    align: &AlignmentClassifier,
    cfg: &VerificationConfig,
) -> (Option<RegistrationResult>, Option<QualityVector>, Option<f64>) {
    let c = retrieved.candidate;
    let init = shift_initial_guess(&keyframes[query].pose, &keyframes[c].pose, retrieved.shift, n_sec);
    let Ok(reg) = register_p2d(&submaps[query].surface_points, &submaps[c].surface_points, &init, &cfg.registration) else {
        return (None, None, None);
    };
    if cfg.require_convergence && !reg.converged {
        return (Some(reg), None, None);
    }
    let entropy = align.needs_entropy().then_some(&cfg.entropy);
    match quality_vector(&submaps[query], &submaps[c], &reg.relative_pose, entropy, &cfg.registration) {
        Ok(qv) => {
            let d = align.decision(&qv);
            (Some(reg), Some(qv), Some(d))
        }
        Err(_) => (Some(reg), None, None),
    }
}

/// Full verification of one retrieved candidate. Without a loop classifier
/// `y_loop` is left at 0 (used while collecting training features).
#[allow(clippy::too_many_arguments)]
pub fn verify_candidate(
    query: usize,
    retrieved: &RetrievedCandidate,
    keyframes: &[Keyframe],
    submaps: &[Submap],
    n_sec: usize,
    align: &AlignmentClassifier,
    loop_clf: Option<&LoopClassifier>,
    cfg: &VerificationConfig,
) -> LoopCandidate {
    let (registration, quality, d_align) = register_candidate(query, retrieved, keyframes, submaps, n_sec, align, cfg);
    let mut out = LoopCandidate {
        query,
        candidate: retrieved.candidate,
        d_sc: retrieved.d_sc,
        d_odom: retrieved.d_odom,
        shift: retrieved.shift,
        registration,
        quality,
        d_align,
        y_loop: 0.0,
    };
    if let (Some(clf), Some(f)) = (loop_clf, out.features()) {
        out.y_loop = clf.score(&f);
    }
    out
}

pub fn train_loop_classifier(
    features: &[[f64; 3]],
    labels: &[bool],
    cfg: &LogisticConfig,
    threshold: f64,
    config_hash: String,
) -> Result<LoopClassifier, VerificationError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(VerificationError::InvalidThreshold(threshold));
    }
    let x: Vec<Vec<f64>> = features.iter().map(|f| f.to_vec()).collect();
    let model = train_logistic(&x, labels, cfg)?;
    Ok(LoopClassifier {
        model,
        threshold,
        config_hash,
    })
}

/// Highest `y_loop` strictly above the threshold; ties go to the lower
/// candidate id.
pub fn select_best(verified: &[LoopCandidate], threshold: f64) -> Option<&LoopCandidate> {
    best_candidate(verified).filter(|c| c.y_loop > threshold)
}

/// Highest `y_loop` regardless of the threshold.
pub fn best_candidate(verified: &[LoopCandidate]) -> Option<&LoopCandidate> {
    verified.iter().fold(None, |best: Option<&LoopCandidate>, c| match best {
        Some(b) if b.y_loop > c.y_loop || (b.y_loop == c.y_loop && b.candidate < c.candidate) => Some(b),
        _ => Some(c),
    })
}

/// Outcome of the decision on a query's best candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    /// True loop accepted.
    Success,
    /// Wrong candidate rejected.
    SafeFailureLowConfidence,
    /// True loop rejected.
    SafeFailureFalseLow,
    /// Wrong candidate accepted.
    DangerousFailure,
}

impl Outcome {
    pub fn classify(is_true: bool, y_loop: f64, threshold: f64) -> Outcome {
        match (is_true, y_loop > threshold) {
            (true, true) => Outcome::Success,
            (false, false) => Outcome::SafeFailureLowConfidence,
            (true, false) => Outcome::SafeFailureFalseLow,
            (false, true) => Outcome::DangerousFailure,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::SafeFailureLowConfidence => "safe-failure-low-confidence",
            Outcome::SafeFailureFalseLow => "safe-failure-false-low",
            Outcome::DangerousFailure => "dangerous-failure",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::FeatureSet;
    use crate::geometry::Se3Pose;
    use crate::keyframing::SurfacePoint;
    use nalgebra::Vector3;

    fn cand(id: usize, y: f64) -> LoopCandidate {
        LoopCandidate {
            query: 99,
            candidate: id,
            d_sc: 0.1,
            d_odom: 0.1,
            shift: 0,
            registration: None,
            quality: None,
            d_align: None,
            y_loop: y,
        }
    }

    #[test]
    fn select_best_cases() {
        assert!(select_best(&[cand(1, 0.3), cand(2, 0.5)], 0.9).is_none());
        let v = [cand(1, 0.3), cand(2, 0.95), cand(3, 0.8)];
        assert_eq!(select_best(&v, 0.9).unwrap().candidate, 2);
        let tie = [cand(7, 0.95), cand(4, 0.95)];
        assert_eq!(select_best(&tie, 0.9).unwrap().candidate, 4);
        assert!(select_best(&[], 0.9).is_none());
    }

    fn toy() -> (Vec<[f64; 3]>, Vec<bool>) {
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..40 {
            let pos = i % 2 == 0;
            let jitter = (i as f64 * 0.37).sin() * 0.1;
            f.push(if pos { [0.2 + jitter, 0.3, 5.0 + jitter] } else { [2.0 + jitter, 0.6, -5.0 + jitter] });
            l.push(pos);
        }
        (f, l)
    }

    #[test]
    fn separable_toy_and_flipped_labels() {
        let (f, l) = toy();
        let clf = train_loop_classifier(&f, &l, &LogisticConfig::default(), 0.5, String::new()).unwrap();
        for (x, y) in f.iter().zip(&l) {
            assert_eq!(clf.score(x) > 0.5, *y);
        }
        let flipped: Vec<bool> = l.iter().map(|v| !v).collect();
        let neg = train_loop_classifier(&f, &flipped, &LogisticConfig::default(), 0.5, String::new()).unwrap();
        for (a, b) in clf.theta().iter().zip(neg.theta()) {
            assert!((a + b).abs() < 1e-6);
        }
        assert!(train_loop_classifier(&f, &vec![true; f.len()], &LogisticConfig::default(), 0.5, String::new()).is_err());
        assert!(train_loop_classifier(&f, &l, &LogisticConfig::default(), 1.0, String::new()).is_err());
    }

    #[test]
    fn score_is_exact_logistic_and_monotone() {
        let (f, l) = toy();
        let clf = train_loop_classifier(&f, &l, &LogisticConfig::default(), 0.9, String::new()).unwrap();
        let t = clf.theta();
        let x = [0.5, 0.4, 1.0];
        assert_eq!(clf.score(&x), logistic(t[0] * x[0] + t[1] * x[1] + t[2] * x[2] + t[3]));
        assert!(t[2] > 0.0);
        assert!(clf.score(&[0.5, 0.4, 1.5]) >= clf.score(&x));
    }

    #[test]
    fn outcome_classes() {
        assert_eq!(Outcome::classify(true, 0.95, 0.9), Outcome::Success);
        assert_eq!(Outcome::classify(false, 0.95, 0.9), Outcome::DangerousFailure);
        assert_eq!(Outcome::classify(true, 0.2, 0.9), Outcome::SafeFailureFalseLow);
        assert_eq!(Outcome::classify(false, 0.9, 0.9), Outcome::SafeFailureLowConfidence);
    }

    fn boxes() -> Vec<SurfacePoint> {
        let mut out = Vec::new();
        for (cx, cy) in [(6.0, 3.0), (12.0, -4.0), (18.0, 6.0), (9.0, -9.0)] {
            for (nx, ny) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                let n = Vector3::new(nx, ny, 0.0);
                for k in -1..=1 {
                    for z in [0.5, 1.5] {
                        let mean = Vector3::new(cx, cy, z) + n + Vector3::new(-ny, nx, 0.0) * (0.6 * k as f64);
                        out.push(SurfacePoint { mean, normal: n, weight: 6 });
                    }
                }
            }
        }
        for x in 0..6 {
            for y in -2..=2 {
                let mean = Vector3::new(3.0 * x as f64, 3.0 * y as f64, -1.0);
                out.push(SurfacePoint { mean, normal: Vector3::z(), weight: 6 });
            }
        }
        out
    }

    #[test]
    fn unconverged_registration_gets_no_score() {
        let query = boxes();
        let offset = Se3Pose::from_yaw(5f64.to_radians(), Vector3::new(0.5, 0.0, 0.0));
        let cand: Vec<SurfacePoint> = query.iter().map(|p| p.transformed(&offset)).collect();
        let submap = |sp: Vec<SurfacePoint>, id| Submap {
            keyframe_id: id,
            points: sp.iter().map(|p| p.mean).collect(),
            surface_points: sp,
        };
        let submaps = [submap(query, 0), submap(cand, 1)];
        let keyframes: Vec<Keyframe> = (0..2)
            .map(|id| Keyframe {
                id,
                scan_index: id,
                timestamp: id as f64,
                pose: Se3Pose::identity(),
                cloud: Vec::new(),
                surface_points: Vec::new(),
                path_length: 0.0,
            })
            .collect();
        let align = AlignmentClassifier {
            feature_set: FeatureSet::Cfear,
            model: LogisticModel {
                theta: vec![-1.0, 0.0, 0.0, 0.0],
                standardized_weights: vec![0.0; 4],
                feature_mean: vec![0.0; 3],
                feature_scale: vec![1.0; 3],
                iterations: 0,
                converged: true,
            },
            config_hash: String::new(),
        };
        let retrieved = RetrievedCandidate { candidate: 1, d_sc: 0.1, d_odom: 0.0, shift: 0 };
        let mut cfg = VerificationConfig::default();
        cfg.registration.max_iterations = 1;
        let (reg, qv, d) = register_candidate(0, &retrieved, &keyframes, &submaps, 60, &align, &cfg);
        assert!(!reg.unwrap().converged);
        assert!(qv.is_none() && d.is_none());

        cfg.require_convergence = false;
        let (_, qv, d) = register_candidate(0, &retrieved, &keyframes, &submaps, 60, &align, &cfg);
        assert!(qv.is_some() && d.is_some());

        cfg = VerificationConfig::default();
        let (reg, _, d) = register_candidate(0, &retrieved, &keyframes, &submaps, 60, &align, &cfg);
        assert!(reg.unwrap().converged && d.is_some());
    }
}
