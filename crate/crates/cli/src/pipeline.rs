//! In-process pipeline: front end, classifier training, loop detection per
//! grid cell and pose-graph back end.

use radarloop::alignment::{
    synthesize_training_set, train_alignment_classifier, training_pairs, AlignmentClassifier, DisturbanceClass,
    FeatureSet, LabeledAlignmentSample,
};
use radarloop::evaluation::{keyframe_ground_truth, label_pair, roc_curve, LoopLabel};
use radarloop::geometry::{RadarScan, Se3Pose, Trajectory};
use radarloop::keyframing::{build_submaps, select_keyframes, Keyframe, Submap};
use radarloop::logistic::config_hash;
use radarloop::loop_verification::{
    best_candidate, train_loop_classifier, verify_candidate, LoopCandidate, LoopClassifier,
};
use radarloop::odometry::{integrate_odometry, OdometryResult};
use radarloop::place_recognition::{build_database, retrieve_candidates};
use radarloop::pose_graph::{build_graph, optimize, LoopConstraint};
use radarloop::sim::{generate_sequence, generate_world, SequenceOptions, SimSequence};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

/// Odometry, keyframes and registration submaps of one sequence.
pub struct Frontend {
    pub odometry: OdometryResult,
    pub keyframes: Vec<Keyframe>,
    pub submaps: Vec<Submap>,
}

impl Frontend {
    pub fn keyframe_trajectory(&self) -> Trajectory {
        Trajectory::from_parts(
            self.keyframes.iter().map(|k| k.timestamp).collect(),
            self.keyframes.iter().map(|k| k.pose).collect(),
        )
        .expect("keyframe stamps increase")
    }

    pub fn stamps(&self) -> Vec<f64> {
        self.keyframes.iter().map(|k| k.timestamp).collect()
    }
}

pub fn run_frontend(scans: &[RadarScan], cfg: &PipelineConfig) -> Result<Frontend> {
    if scans.is_empty() {
        return Err(CliError::Data("sequence has no scans".into()));
    }
    let odometry = integrate_odometry(scans, &cfg.odometry);
    let keyframes = select_keyframes(&odometry.trajectory, &odometry.inlier_clouds, &cfg.keyframing);
    let submaps = build_submaps(&keyframes, cfg.submap_keyframes, &cfg.keyframing.surface);
    Ok(Frontend {
        odometry,
        keyframes,
        submaps,
    })
}

/// Simulates the sequence described by `cfg`. `noise_seed` drives the sensor
/// noise; the world always comes from `cfg.seed`.
pub fn simulate(cfg: &PipelineConfig, path: &radarloop::sim::PathSpec, noise_seed: u64) -> Result<SimSequence> {
    let world = generate_world(cfg.seed, cfg.scenario);
    let opts = SequenceOptions {
        rate_hz: cfg.sim.rate_hz,
        seed: noise_seed,
        imu_drift: cfg.sim.imu_drift.clone(),
    };
    generate_sequence(&world, path, &cfg.sim.sensor, &opts).map_err(|e| CliError::Config(e.to_string()))
}

/// Held-out AUROC of one feature set against one disturbance class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentAuroc {
    pub feature_set: FeatureSet,
    pub class: DisturbanceClass,
    pub auroc: Option<f64>,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTraining {
    pub classifier: AlignmentClassifier,
    pub evaluation: Vec<AlignmentAuroc>,
    pub pairs: usize,
    pub samples: usize,
}

const DISTURBED: [DisturbanceClass; 3] = [DisturbanceClass::Small, DisturbanceClass::Medium, DisturbanceClass::Large];

/// Self-supervised alignment training on consecutive submaps. Held-out
/// AUROCs use a classifier per (feature set, class) trained on the leading
/// pairs and scored on the trailing ones; the deployed classifier uses all
/// pairs and every disturbance class.
pub fn train_alignment(front: &Frontend, cfg: &PipelineConfig) -> Result<AlignmentTraining> {
    let offset = cfg.submap_keyframes;
    let pairs = training_pairs(front.keyframes.len(), offset, cfg.alignment.pair_step);
    let samples = synthesize_training_set(
        &front.keyframes,
        &front.submaps,
        &pairs,
        &cfg.alignment,
        &cfg.verification.registration,
        cfg.seed,
    );
    if samples.is_empty() {
        return Err(CliError::Numerical("no alignment training samples".into()));
    }
    let hash = config_hash(&(&cfg.alignment, &cfg.verification.registration, cfg.submap_keyframes));
    let classifier = train_alignment_classifier(
        &samples,
        cfg.alignment.feature_set,
        &DISTURBED,
        &cfg.alignment.logistic,
        hash.clone(),
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;

    // Split by query keyframe with a gap so that no submap is shared.
    let n_train = ((1.0 - cfg.evaluation.holdout_fraction) * pairs.len() as f64).round() as usize;
    let split_query = pairs.get(n_train).map_or(usize::MAX, |p| p.0);
    let (train, test): (Vec<&LabeledAlignmentSample>, Vec<&LabeledAlignmentSample>) =
        samples.iter().partition(|s| s.pair.0 < split_query);
    let test: Vec<&LabeledAlignmentSample> = test.into_iter().filter(|s| s.pair.1 >= split_query).collect();
    let train: Vec<LabeledAlignmentSample> = train.into_iter().cloned().collect();

    let mut evaluation = Vec::new();
    for fs in [FeatureSet::Coral, FeatureSet::Cfear, FeatureSet::Combined] {
        for class in DISTURBED {
            let subset: Vec<&&LabeledAlignmentSample> =
                test.iter().filter(|s| s.aligned || s.class == class).collect();
            let auroc = train_alignment_classifier(&train, fs, &[class], &cfg.alignment.logistic, hash.clone())
                .ok()
                .and_then(|clf| {
                    let scores: Vec<f64> = subset.iter().map(|s| clf.decision(&s.quality)).collect();
                    let labels: Vec<bool> = subset.iter().map(|s| s.aligned).collect();
                    roc_curve(&scores, &labels).ok().map(|r| r.1)
                });
            evaluation.push(AlignmentAuroc {
                feature_set: fs,
                class,
                auroc,
                train_samples: train.iter().filter(|s| s.aligned || s.class == class).count(),
                test_samples: subset.len(),
            });
        }
    }
    Ok(AlignmentTraining {
        classifier,
        evaluation,
        pairs: pairs.len(),
        samples: samples.len(),
    })
}

/// Retrieval plus verification of the top `top_k` candidates of every
/// query, using descriptors over `k` keyframes. Queries without eligible
/// candidates are omitted.
pub fn detect_loops(
    front: &Frontend,
    k: usize,
    top_k: usize,
    align: &AlignmentClassifier,
    loop_clf: Option<&LoopClassifier>,
    cfg: &PipelineConfig,
) -> Vec<(usize, Vec<LoopCandidate>)> {
    let descriptors = build_database(&front.keyframes, k, &cfg.descriptor);
    let retrieval = cfg.retrieval_for(k, top_k);
    let mut out = Vec::new();
    for q in 0..front.keyframes.len() {
        let retrieved = retrieve_candidates(q, &front.keyframes, &descriptors, &retrieval);
        if retrieved.is_empty() {
            continue;
        }
        let verified = retrieved
            .iter()
            .map(|r| {
                verify_candidate(
                    q,
                    r,
                    &front.keyframes,
                    &front.submaps,
                    cfg.descriptor.n_sec,
                    align,
                    loop_clf,
                    &cfg.verification,
                )
            })
            .collect();
        out.push((q, verified));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopTrainingSummary {
    pub keyframes: usize,
    pub samples: usize,
    pub positives: usize,
}

/// Trains the loop classifier for descriptor size `k` from a sequence with
/// ground truth: every verified candidate with a defined alignment score is
/// one sample labeled by the loop distance rule.
pub fn train_loop(
    front: &Frontend,
    gt: &Trajectory,
    k: usize,
    align: &AlignmentClassifier,
    cfg: &PipelineConfig,
) -> Result<(LoopClassifier, LoopTrainingSummary)> {
    let gt_kf = keyframe_ground_truth(gt, &front.stamps()).map_err(|e| CliError::Data(e.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (q, verified) in detect_loops(front, k, cfg.loop_training.top_k, align, None, cfg) {
        for c in &verified {
            if let Some(f) = c.features() {
                features.push(f);
                labels.push(label_pair(q, c.candidate, &gt_kf, cfg.evaluation.loop_distance).is_true);
            }
        }
    }
    let hash = config_hash(&(k, &cfg.loop_training, &cfg.retrieval, &cfg.descriptor, &align.config_hash));
    let clf = train_loop_classifier(
        &features,
        &labels,
        &cfg.loop_training.logistic,
        cfg.verification.threshold,
        hash,
    )
    .map_err(|e| CliError::Numerical(format!("loop classifier for k={k}: {e}")))?;
    let summary = LoopTrainingSummary {
        keyframes: k,
        samples: labels.len(),
        positives: labels.iter().filter(|&&l| l).count(),
    };
    Ok((clf, summary))
}

/// Decision for one query in one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryDecision {
    pub query: usize,
    pub verified: Vec<LoopCandidate>,
    /// Index into `verified` of the highest `y_loop`.
    pub best: usize,
    pub accepted: bool,
}

impl QueryDecision {
    pub fn best(&self) -> &LoopCandidate {
        &self.verified[self.best]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub keyframes: usize,
    pub top_k: usize,
    pub decisions: Vec<QueryDecision>,
    pub loops: Vec<LoopConstraint>,
    /// Optimized keyframe trajectory.
    pub slam: Trajectory,
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
}

/// Best-candidate selection over the first `top_k` verified candidates and
/// a single pose-graph optimization over the accepted loops.
pub fn run_cell(
    front: &Frontend,
    detections: &[(usize, Vec<LoopCandidate>)],
    k: usize,
    top_k: usize,
    cfg: &PipelineConfig,
) -> Result<CellResult> {
    let threshold = cfg.verification.threshold;
    let mut decisions = Vec::new();
    let mut loops = Vec::new();
    for (q, verified) in detections {
        let verified: Vec<LoopCandidate> = verified.iter().take(top_k).cloned().collect();
        let best_id = best_candidate(&verified).expect("non-empty").candidate;
        let best = verified.iter().position(|c| c.candidate == best_id).expect("present");
        let chosen = &verified[best];
        let accepted = chosen.y_loop > threshold && chosen.registration.is_some();
        if accepted {
            let reg = chosen.registration.as_ref().expect("checked");
            loops.push(LoopConstraint {
                query: *q,
                candidate: chosen.candidate,
                relative: reg.relative_pose,
                cost: reg.cost,
            });
        }
        decisions.push(QueryDecision {
            query: *q,
            verified,
            best,
            accepted,
        });
    }
    let poses: Vec<Se3Pose> = front.keyframes.iter().map(|k| k.pose).collect();
    let lengths: Vec<f64> = front.keyframes.iter().map(|k| k.path_length).collect();
    let graph = build_graph(&poses, &lengths, &loops, &cfg.graph).map_err(|e| CliError::Numerical(e.to_string()))?;
    let opt = optimize(&graph, &cfg.graph);
    let slam = Trajectory::from_parts(front.stamps(), opt.poses).expect("keyframe stamps increase");
    Ok(CellResult {
        keyframes: k,
        top_k,
        decisions,
        loops,
        slam,
        initial_chi2: opt.initial_chi2,
        final_chi2: opt.final_chi2,
        iterations: opt.iterations,
    })
}

/// Ground-truth label of a decision's best candidate.
pub fn best_label(d: &QueryDecision, gt_kf: &[Se3Pose], loop_distance: f64) -> LoopLabel {
    label_pair(d.query, d.best().candidate, gt_kf, loop_distance)
}

/// Classifiers used by a SLAM run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Models {
    pub alignment: AlignmentClassifier,
    /// One loop classifier per descriptor keyframe count.
    pub loops: Vec<(usize, LoopClassifier)>,
}

impl Models {
    pub fn loop_classifier(&self, k: usize) -> Option<&LoopClassifier> {
        self.loops.iter().find(|(kk, _)| *kk == k).map(|(_, c)| c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub alignment: AlignmentTraining,
    pub loops: Vec<LoopTrainingSummary>,
}

/// Trains all classifiers on the internal training sequence: same world,
/// noise seed offset from the master seed, the configured training path.
pub fn train_models(cfg: &PipelineConfig) -> Result<(Models, TrainingSummary)> {
    let seq = simulate(cfg, &cfg.loop_training.path, cfg.seed.wrapping_add(cfg.loop_training.seed_offset))?;
    let front = run_frontend(&seq.scans, cfg)?;
    let alignment = train_alignment(&front, cfg)?;
    let mut loops = Vec::new();
    let mut summaries = Vec::new();
    for &k in &cfg.grid.keyframes {
        let (clf, s) = train_loop(&front, &seq.ground_truth, k, &alignment.classifier, cfg)?;
        loops.push((k, clf));
        summaries.push(s);
    }
    Ok((
        Models {
            alignment: alignment.classifier.clone(),
            loops,
        },
        TrainingSummary {
            alignment,
            loops: summaries,
        },
    ))
}

/// Runs every grid cell. Verification happens once per descriptor size at
/// the largest top-k; smaller cells use the leading candidates, which is
/// the same as retrieving fewer since retrieval is ranked.
pub fn run_grid(front: &Frontend, models: &Models, cfg: &PipelineConfig) -> Result<Vec<CellResult>> {
    let max_top = *cfg.grid.top_k.iter().max().expect("validated");
    let mut out = Vec::new();
    for &k in &cfg.grid.keyframes {
        let clf = models
            .loop_classifier(k)
            .ok_or_else(|| CliError::Config(format!("no loop classifier for k={k}")))?;
        let detections = detect_loops(front, k, max_top, &models.alignment, Some(clf), cfg);
        for &t in &cfg.grid.top_k {
            out.push(run_cell(front, &detections, k, t, cfg)?);
        }
    }
    Ok(out)
}
