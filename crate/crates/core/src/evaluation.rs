//! Ground-truth loop labels, ROC/PR curves, KITTI drift and ATE.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Se3Pose, Trajectory};
use crate::spatial::PointGrid;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("need at least 3 poses for alignment, got {0}")]
    AlignmentUndefined(usize),
    #[error("trajectories have mismatched timestamps at index {0}")]
    MismatchedTimestamps(usize),
    #[error("no ground truth for keyframe {0}")]
    MissingGroundTruth(usize),
}

/// Loops are same-direction when the heading difference is below this.
pub const SAME_DIRECTION_MAX_DEG: f64 = 90.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopLabel {
    pub query: usize,
    pub candidate: usize,
    pub is_true: bool,
    pub distance: f64,
    pub heading_diff_deg: f64,
}

impl LoopLabel {
    pub fn same_direction(&self) -> bool {
        self.heading_diff_deg < SAME_DIRECTION_MAX_DEG
    }
}

/// Absolute yaw difference in degrees, in [0, 180].
pub fn heading_difference(a: &Se3Pose, b: &Se3Pose) -> f64 {
    let mut d = (a.yaw() - b.yaw()).rem_euclid(std::f64::consts::TAU);
    if d > std::f64::consts::PI {
        d = std::f64::consts::TAU - d;
    }
    d.to_degrees()
}

pub fn label_pair(query: usize, candidate: usize, gt: &[Se3Pose], threshold: f64) -> LoopLabel {
    let distance = (gt[query].translation - gt[candidate].translation).norm();
    LoopLabel {
        query,
        candidate,
        is_true: distance <= threshold,
        distance,
        heading_diff_deg: heading_difference(&gt[query], &gt[candidate]),
    }
}

/// Labels every (query, earlier candidate) pair with `candidate + recency <
/// query`. `gt` holds one ground-truth pose per keyframe.
pub fn label_ground_truth_loops(gt: &[Se3Pose], recency: usize, threshold: f64) -> Vec<LoopLabel> {
    let mut out = Vec::new();
    for q in 0..gt.len() {
        for c in 0..q.saturating_sub(recency) {
            out.push(label_pair(q, c, gt, threshold));
        }
    }
    out
}

/// Ground-truth pose of each keyframe, looked up by timestamp.
pub fn keyframe_ground_truth(gt: &Trajectory, stamps: &[f64]) -> Result<Vec<Se3Pose>, EvalError> {
    stamps
        .iter()
        .enumerate()
        .map(|(i, &t)| gt.index_of(t, 1e-6).map(|k| gt.poses[k]).ok_or(EvalError::MissingGroundTruth(i)))
        .collect()
}

/// Fraction of query points with a candidate point within `radius`, after
/// mapping the query by `relative` (query to candidate frame).
pub fn overlap_ratio(query: &[Vector3<f64>], candidate: &[Vector3<f64>], relative: &Se3Pose, radius: f64) -> f64 {
    if query.is_empty() || candidate.is_empty() {
        return 0.0;
    }
    let grid = PointGrid::new(candidate, radius);
    let hits = query
        .iter()
        .filter(|p| grid.any_within(&relative.transform_point(p), radius))
        .count();
    hits as f64 / query.len() as f64
}

pub fn symmetric_overlap(a: &[Vector3<f64>], b: &[Vector3<f64>], relative: &Se3Pose, radius: f64) -> f64 {
    0.5 * (overlap_ratio(a, b, relative, radius) + overlap_ratio(b, a, &relative.inverse(), radius))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl CurvePoint {
    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }
    /// 1 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            ratio(self.tp, self.tp + self.fp)
        }
    }
    pub fn recall(&self) -> f64 {
        self.tpr()
    }
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Threshold sweep over unique scores, descending; a sample is predicted
/// positive when `score >= threshold`. The first point (threshold +inf)
/// predicts nothing.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<CurvePoint> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    let mut out = vec![CurvePoint {
        threshold: f64::INFINITY,
        tp: 0,
        fp: 0,
        tn: neg,
        fn_: pos,
    }];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(CurvePoint {
            threshold: t,
            tp,
            fp,
            tn: neg - fp,
            fn_: pos - tp,
        });
    }
    out
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::UndefinedMetric("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::UndefinedMetric("NaN score".into()));
    }
    Ok(())
}

/// ROC curve and trapezoidal AUROC. Ties count one half, so the area equals
/// the Mann-Whitney pair-counting statistic.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<(Vec<CurvePoint>, f64), EvalError> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::UndefinedMetric("ROC needs both classes".into()));
    }
    let curve = sweep(scores, labels);
    // twice the area in count units, exact in integers
    let mut twice: u128 = 0;
    for w in curve.windows(2) {
        twice += ((w[1].fp - w[0].fp) as u128) * ((w[1].tp + w[0].tp) as u128);
    }
    let auroc = twice as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok((curve, auroc))
}

/// Precision-recall points without interpolation.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<CurvePoint>, EvalError> {
    check_inputs(scores, labels)?;
    if !labels.iter().any(|&l| l) {
        return Err(EvalError::UndefinedMetric("PR needs a positive sample".into()));
    }
    Ok(sweep(scores, labels))
}

/// Loop-detection PR curve. Each entry is the best candidate of one query:
/// its score and whether it is a true loop. Recall is over the queries that
/// have a ground-truth loop, so a wrong candidate never adds recall.
pub fn loop_pr_curve(best: &[(f64, bool)], queries_with_loop: usize) -> Result<Vec<CurvePoint>, EvalError> {
    if queries_with_loop == 0 {
        return Err(EvalError::UndefinedMetric("no query has a ground-truth loop".into()));
    }
    let scores: Vec<f64> = best.iter().map(|b| b.0).collect();
    let labels: Vec<bool> = best.iter().map(|b| b.1).collect();
    check_inputs(&scores, &labels)?;
    let mut curve = sweep(&scores, &labels);
    for p in &mut curve {
        // fn_ becomes the loops not recovered at this threshold
        p.fn_ = queries_with_loop.saturating_sub(p.tp);
    }
    Ok(curve)
}

pub fn max_f1(curve: &[CurvePoint]) -> f64 {
    curve.iter().map(CurvePoint::f1).fold(0.0, f64::max)
}

/// Highest recall among points with precision >= `min_precision`.
pub fn recall_at_precision(curve: &[CurvePoint], min_precision: f64) -> f64 {
    curve
        .iter()
        .filter(|p| p.tp + p.fp > 0 && p.precision() >= min_precision)
        .map(CurvePoint::recall)
        .fold(0.0, f64::max)
}

pub const DEFAULT_KITTI_LENGTHS: [f64; 8] = [20.0, 40.0, 60.0, 80.0, 100.0, 120.0, 140.0, 160.0];
/// Ratio between the standard KITTI lengths (100..800 m) and ours.
pub const KITTI_LENGTH_SCALE: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KittiMetrics {
    /// Translational drift in percent.
    pub t_rel: f64,
    /// Rotational drift in degrees per 100 m.
    pub r_rel: f64,
    pub segments: usize,
}

fn check_aligned(est: &Trajectory, gt: &Trajectory) -> Result<(), EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::MismatchedTimestamps(est.len().min(gt.len())));
    }
    for (i, (a, b)) in est.stamps.iter().zip(&gt.stamps).enumerate() {
        if (a - b).abs() > 1e-6 {
            return Err(EvalError::MismatchedTimestamps(i));
        }
    }
    Ok(())
}

/// KITTI relative error: for every start pose and length, the error of the
/// estimated relative motion against ground truth over the first
/// subsequence whose ground-truth path reaches that length, divided by the
/// length. Averaged over all segments.
pub fn kitti_metrics(est: &Trajectory, gt: &Trajectory, lengths: &[f64]) -> Result<KittiMetrics, EvalError> {
    check_aligned(est, gt)?;
    let dist = gt.path_lengths();
    let total = dist.last().copied().unwrap_or(0.0);
    let shortest = lengths.iter().copied().fold(f64::INFINITY, f64::min);
    if lengths.is_empty() || total < shortest {
        return Err(EvalError::UndefinedMetric(format!(
            "trajectory of {total:.1} m is shorter than the smallest subsequence length"
        )));
    }
    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    for first in 0..gt.len() {
        for &len in lengths {
            let target = dist[first] + len;
            let Some(last) = (first..gt.len()).find(|&j| dist[j] >= target) else {
                continue;
            };
            let gt_rel = gt.poses[first].between(&gt.poses[last]);
            let est_rel = est.poses[first].between(&est.poses[last]);
            let err = gt_rel.between(&est_rel);
            t_sum += err.translation.norm() / len;
            r_sum += err.angle() / len;
            count += 1;
        }
    }
    if count == 0 {
        return Err(EvalError::UndefinedMetric("no complete subsequence".into()));
    }
    Ok(KittiMetrics {
        t_rel: 100.0 * t_sum / count as f64,
        r_rel: (r_sum / count as f64).to_degrees() * 100.0,
        segments: count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    /// RMSE after rigid alignment of the estimate onto ground truth.
    pub aligned: f64,
    /// RMSE with only the first poses made to coincide, no fitting.
    pub unaligned: f64,
    /// Maps estimate coordinates into ground-truth coordinates.
    pub alignment: Se3Pose,
}

/// Least-squares rigid transform mapping `src` onto `dst` (Kabsch).
pub fn rigid_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Se3Pose, EvalError> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(EvalError::AlignmentUndefined(n));
    }
    let cs = src.iter().sum::<Vector3<f64>>() / n as f64;
    let cd = dst.iter().sum::<Vector3<f64>>() / n as f64;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = v * fix * u.transpose();
    let rot = nalgebra::UnitQuaternion::from_matrix(&r);
    Ok(Se3Pose::new(rot, cd - rot * cs))
}

fn rmse(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<AteResult, EvalError> {
    check_aligned(est, gt)?;
    let e: Vec<Vector3<f64>> = est.poses.iter().map(|p| p.translation).collect();
    let g: Vec<Vector3<f64>> = gt.poses.iter().map(|p| p.translation).collect();
    let alignment = rigid_alignment(&e, &g)?;
    let moved: Vec<Vector3<f64>> = e.iter().map(|p| alignment.transform_point(p)).collect();
    let anchor = gt.poses[0].compose(&est.poses[0].inverse());
    let anchored: Vec<Vector3<f64>> = e.iter().map(|p| anchor.transform_point(p)).collect();
    Ok(AteResult {
        aligned: rmse(&moved, &g),
        unaligned: rmse(&anchored, &g),
        alignment,
    })
}

/// Ground-truth subsequence at the estimate's timestamps.
pub fn sample_at(gt: &Trajectory, stamps: &[f64]) -> Result<Trajectory, EvalError> {
    let poses = keyframe_ground_truth(gt, stamps)?;
    Trajectory::from_parts(stamps.to_vec(), poses).map_err(|_| EvalError::MismatchedTimestamps(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_meter_rule() {
        let gt = vec![Se3Pose::identity(), Se3Pose::from_translation(Vector3::new(5.9, 0.0, 0.0)), Se3Pose::from_translation(Vector3::new(6.1, 0.0, 0.0))];
        assert!(label_pair(1, 0, &gt, 6.0).is_true);
        assert!(!label_pair(2, 0, &gt, 6.0).is_true);
        let same = label_pair(0, 0, &gt, 6.0);
        assert!(same.is_true && same.distance == 0.0);
    }

    #[test]
    fn labels_respect_recency() {
        let gt = vec![Se3Pose::identity(); 25];
        let labels = label_ground_truth_loops(&gt, 20, 6.0);
        // q=21 -> c=0, q=22 -> 0,1, ... q=24 -> 0..3
        assert_eq!(labels.len(), 1 + 2 + 3 + 4);
        assert!(labels.iter().all(|l| l.candidate + 20 < l.query));
    }

    #[test]
    fn heading_stratification() {
        let a = Se3Pose::from_yaw(0.1, Vector3::zeros());
        let b = Se3Pose::from_yaw(0.1 + std::f64::consts::PI, Vector3::zeros());
        assert!((heading_difference(&a, &b) - 180.0).abs() < 1e-9);
        let c = Se3Pose::from_yaw(-3.1, Vector3::zeros());
        let d = Se3Pose::from_yaw(3.1, Vector3::zeros());
        assert!(heading_difference(&c, &d) < 5.0);
    }

    #[test]
    fn overlap_cases() {
        let pts: Vec<Vector3<f64>> = (0..100).map(|i| Vector3::new(i as f64 * 0.5, 0.0, 0.0)).collect();
        assert_eq!(overlap_ratio(&pts, &pts, &Se3Pose::identity(), 0.1), 1.0);
        let (left, right) = pts.split_at(50);
        let all = [left, right].concat();
        assert!((overlap_ratio(&all, left, &Se3Pose::identity(), 0.1) - 0.5).abs() < 1e-12);
        assert_eq!(overlap_ratio(&[], &pts, &Se3Pose::identity(), 1.0), 0.0);
    }

    fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut twice, mut pairs) = (0u128, 0u128);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1;
                    if si > sj {
                        twice += 2;
                    } else if si == sj {
                        twice += 1;
                    }
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auroc_hand_case() {
        let (_, a) = roc_curve(&[0.9, 0.6, 0.1], &[true, false, true]).unwrap();
        assert_eq!(a, 0.5);
        let (_, b) = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(b, 1.0);
    }

    #[test]
    fn auroc_equals_pair_counting() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(2..=200);
            // coarse scores force ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 7.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let (_, a) = roc_curve(&scores, &labels).unwrap();
            assert_eq!(a, pair_count_auroc(&scores, &labels));
        }
    }

    #[test]
    fn auroc_monotone_invariant_and_single_class() {
        let s = [0.3, 0.1, 0.7, 0.5, 0.5];
        let l = [true, false, true, false, true];
        let (_, a) = roc_curve(&s, &l).unwrap();
        let t: Vec<f64> = s.iter().map(|v| (5.0 * v).exp()).collect();
        assert_eq!(a, roc_curve(&t, &l).unwrap().1);
        assert!(roc_curve(&s, &[true; 5]).is_err());
    }

    #[test]
    fn pr_precision_one_above_negatives() {
        let s = [0.9, 0.8, 0.7, 0.3, 0.2];
        let l = [true, true, true, false, false];
        let pr = pr_curve(&s, &l).unwrap();
        for p in &pr {
            if p.threshold > 0.3 {
                assert_eq!(p.precision(), 1.0);
            }
        }
        assert_eq!(recall_at_precision(&pr, 1.0), 1.0);
    }

    #[test]
    fn loop_pr_recall_denominator() {
        // 3 queries with a loop; best candidates: two right, one wrong
        let best = [(0.95, true), (0.9, false), (0.8, true)];
        let curve = loop_pr_curve(&best, 4).unwrap();
        let last = curve.last().unwrap();
        assert_eq!(last.tp, 2);
        assert_eq!(last.recall(), 0.5);
        assert_eq!(recall_at_precision(&curve, 1.0), 0.25);
    }

    fn straight(n: usize, step: f64, scale: f64, yaw_rate: f64) -> Trajectory {
        let mut t = Trajectory::new();
        let mut pose = Se3Pose::identity();
        for i in 0..n {
            t.push(i as f64, pose).unwrap();
            let inc = Se3Pose::from_yaw(yaw_rate * step, Vector3::new(step * scale, 0.0, 0.0));
            pose = pose.compose(&inc);
        }
        t
    }

    #[test]
    fn kitti_identity_and_drifts() {
        let gt = straight(400, 0.5, 1.0, 0.0);
        let m = kitti_metrics(&gt, &gt, &DEFAULT_KITTI_LENGTHS).unwrap();
        assert_eq!((m.t_rel, m.r_rel), (0.0, 0.0));
        let scaled = straight(400, 0.5, 1.01, 0.0);
        let m = kitti_metrics(&scaled, &gt, &DEFAULT_KITTI_LENGTHS).unwrap();
        assert!((m.t_rel - 1.0).abs() < 0.05, "{m:?}");
        let yawed = straight(400, 0.5, 1.0, 0.1f64.to_radians());
        let m = kitti_metrics(&yawed, &gt, &DEFAULT_KITTI_LENGTHS).unwrap();
        assert!((m.r_rel - 10.0).abs() < 0.5, "{m:?}");
        let short = straight(10, 0.5, 1.0, 0.0);
        assert!(kitti_metrics(&short, &short, &DEFAULT_KITTI_LENGTHS).is_err());
    }

    #[test]
    fn ate_rigid_invariance() {
        let gt = straight(50, 1.0, 1.0, 0.05);
        assert_eq!(ate(&gt, &gt).unwrap().aligned, 0.0);
        let g = Se3Pose::new(nalgebra::UnitQuaternion::from_euler_angles(0.1, 0.2, 1.0), Vector3::new(5.0, -2.0, 1.0));
        let moved = Trajectory::from_parts(gt.stamps.clone(), gt.poses.iter().map(|p| g.compose(p)).collect()).unwrap();
        let r = ate(&moved, &gt).unwrap();
        assert!(r.aligned < 1e-9 && r.unaligned < 1e-9);
        assert!(ate(&gt, &Trajectory::from_parts(vec![0.0, 1.0], vec![Se3Pose::identity(); 2]).unwrap()).is_err());
    }

    #[test]
    fn ate_mismatched_stamps() {
        let a = straight(10, 1.0, 1.0, 0.0);
        let mut b = a.clone();
        b.stamps[3] += 0.5;
        assert_eq!(ate(&a, &b).unwrap_err(), EvalError::MismatchedTimestamps(3));
    }
}
