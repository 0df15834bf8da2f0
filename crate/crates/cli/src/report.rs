//! Metrics over pipeline results: loop-detection curves, outcome counts,
//! direction-stratified recall, the overlap gate and trajectory errors.

use std::collections::BTreeMap;

use radarloop::evaluation::{
    ate, kitti_metrics, label_ground_truth_loops, label_pair, loop_pr_curve, max_f1, overlap_ratio,
    recall_at_precision, roc_curve, sample_at, CurvePoint, KITTI_LENGTH_SCALE,
};
use radarloop::geometry::{Se3Pose, Trajectory};
use radarloop::keyframing::Keyframe;
use radarloop::loop_verification::Outcome;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{best_label, CellResult};

/// Drift and absolute error of one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub t_rel: f64,
    pub r_rel: f64,
    pub ate: f64,
    /// ATE with only the first poses coinciding.
    pub ate_unaligned: f64,
}

pub fn trajectory_metrics(est: &Trajectory, gt: &Trajectory, lengths: &[f64]) -> Result<TrajectoryMetrics> {
    let gt = sample_at(gt, &est.stamps).map_err(|e| CliError::Data(e.to_string()))?;
    let k = kitti_metrics(est, &gt, lengths).map_err(|e| CliError::Numerical(e.to_string()))?;
    let a = ate(est, &gt).map_err(|e| CliError::Numerical(e.to_string()))?;
    Ok(TrajectoryMetrics {
        t_rel: k.t_rel,
        r_rel: k.r_rel,
        ate: a.aligned,
        ate_unaligned: a.unaligned,
    })
}

/// Per-query verification record, one JSON line each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: usize,
    pub candidate: usize,
    pub d_sc: f64,
    pub d_odom: f64,
    pub d_align: Option<f64>,
    pub y_loop: f64,
    pub gt_loop: bool,
    pub gt_distance: f64,
    pub heading_diff_deg: f64,
    pub accepted: bool,
    pub outcome: Outcome,
    /// Every verified candidate as (id, y_loop).
    pub verified: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub success: usize,
    pub safe_failure_low_confidence: usize,
    pub safe_failure_false_low: usize,
    pub dangerous_failure: usize,
}

impl OutcomeCounts {
    fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Success => self.success += 1,
            Outcome::SafeFailureLowConfidence => self.safe_failure_low_confidence += 1,
            Outcome::SafeFailureFalseLow => self.safe_failure_false_low += 1,
            Outcome::DangerousFailure => self.dangerous_failure += 1,
        }
    }
}

/// Recall restricted to queries whose ground-truth loops include one of the
/// given direction class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalRecall {
    pub queries_with_loop: usize,
    pub detected: usize,
    /// None when no query has such a loop.
    pub recall: Option<f64>,
}

impl DirectionalRecall {
    fn new(queries_with_loop: usize, detected: usize) -> Self {
        Self {
            queries_with_loop,
            detected,
            recall: (queries_with_loop > 0).then(|| detected as f64 / queries_with_loop as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub keyframes: usize,
    pub top_k: usize,
    pub queries: usize,
    pub queries_with_loop: usize,
    pub accepted_loops: usize,
    pub outcomes: OutcomeCounts,
    pub recall_at_precision_1: f64,
    pub max_f1: f64,
    /// AUROC of `y_loop` over every verified candidate.
    pub candidate_auroc: Option<f64>,
    pub same_direction: DirectionalRecall,
    pub opposite_direction: DirectionalRecall,
    pub slam: TrajectoryMetrics,
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub pr_curve: Vec<CurvePoint>,
    #[serde(skip)]
    pub roc_curve: Vec<CurvePoint>,
    #[serde(skip)]
    pub records: Vec<QueryRecord>,
}

/// Which ground-truth loops each query has among its eligible candidates.
#[derive(Clone, Copy, Debug, Default)]
struct QueryTruth {
    any: bool,
    same: bool,
    opposite: bool,
}

fn query_truth(gt_kf: &[Se3Pose], cfg: &PipelineConfig) -> Vec<QueryTruth> {
    let mut out = vec![QueryTruth::default(); gt_kf.len()];
    for l in label_ground_truth_loops(gt_kf, cfg.retrieval.recency_exclusion, cfg.evaluation.loop_distance) {
        if l.is_true {
            let t = &mut out[l.query];
            t.any = true;
            if l.same_direction() {
                t.same = true;
            } else {
                t.opposite = true;
            }
        }
    }
    out
}

pub fn evaluate_cell(cell: &CellResult, gt_kf: &[Se3Pose], gt: &Trajectory, cfg: &PipelineConfig) -> Result<CellReport> {
    let truth = query_truth(gt_kf, cfg);
    let threshold = cfg.verification.threshold;
    let mut records = Vec::with_capacity(cell.decisions.len());
    let mut outcomes = OutcomeCounts::default();
    let mut best = Vec::with_capacity(cell.decisions.len());
    let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
    let (mut same_n, mut same_hit, mut opp_n, mut opp_hit) = (0, 0, 0, 0);
    for d in &cell.decisions {
        let label = best_label(d, gt_kf, cfg.evaluation.loop_distance);
        let b = d.best();
        for c in &d.verified {
            all_scores.push(c.y_loop);
            all_labels.push(label_pair(d.query, c.candidate, gt_kf, cfg.evaluation.loop_distance).is_true);
        }
        let outcome = Outcome::classify(label.is_true, if d.accepted { b.y_loop } else { 0.0 }, threshold);
        outcomes.add(outcome);
        best.push((b.y_loop, label.is_true));
        let t = truth[d.query];
        let hit = d.accepted && label.is_true;
        if t.same {
            same_n += 1;
            if hit && label.same_direction() {
                same_hit += 1;
            }
        }
        if t.opposite {
            opp_n += 1;
            if hit && !label.same_direction() {
                opp_hit += 1;
            }
        }
        records.push(QueryRecord {
            query: d.query,
            candidate: b.candidate,
            d_sc: b.d_sc,
            d_odom: b.d_odom,
            d_align: b.d_align,
            y_loop: b.y_loop,
            gt_loop: label.is_true,
            gt_distance: label.distance,
            heading_diff_deg: label.heading_diff_deg,
            accepted: d.accepted,
            outcome,
            verified: d.verified.iter().map(|c| (c.candidate, c.y_loop)).collect(),
        });
    }
    let queries_with_loop = cell.decisions.iter().filter(|d| truth[d.query].any).count();
    let (pr_curve, r_at_p1, f1) = match loop_pr_curve(&best, queries_with_loop) {
        Ok(c) => {
            let r = recall_at_precision(&c, 1.0);
            let f = max_f1(&c);
            (c, r, f)
        }
        Err(_) => (Vec::new(), 0.0, 0.0),
    };
    let (roc, auroc) = match roc_curve(&all_scores, &all_labels) {
        Ok((c, a)) => (c, Some(a)),
        Err(_) => (Vec::new(), None),
    };
    Ok(CellReport {
        keyframes: cell.keyframes,
        top_k: cell.top_k,
        queries: cell.decisions.len(),
        queries_with_loop,
        accepted_loops: cell.loops.len(),
        outcomes,
        recall_at_precision_1: r_at_p1,
        max_f1: f1,
        candidate_auroc: auroc,
        same_direction: DirectionalRecall::new(same_n, same_hit),
        opposite_direction: DirectionalRecall::new(opp_n, opp_hit),
        slam: trajectory_metrics(&cell.slam, gt, &cfg.evaluation.kitti_lengths)?,
        initial_chi2: cell.initial_chi2,
        final_chi2: cell.final_chi2,
        iterations: cell.iterations,
        pr_curve,
        roc_curve: roc,
        records,
    })
}

/// Overlap of opposite-direction ground-truth loop pairs under ground-truth
/// alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapGateStats {
    pub gate: f64,
    pub radius: f64,
    pub opposite_pairs: usize,
    pub below_gate: usize,
    /// Fraction of pairs the gate labels as non-loops; None without pairs.
    pub fraction_below: Option<f64>,
    pub same_pairs: usize,
    pub same_below_gate: usize,
    pub mean_overlap_opposite: Option<f64>,
    pub mean_overlap_same: Option<f64>,
}

pub fn overlap_gate_stats(keyframes: &[Keyframe], gt_kf: &[Se3Pose], cfg: &PipelineConfig) -> OverlapGateStats {
    let clouds: Vec<Vec<_>> = keyframes.iter().map(|k| k.cloud.iter().map(|p| p.position).collect()).collect();
    let (radius, gate) = (cfg.evaluation.overlap_radius, cfg.evaluation.overlap_gate);
    let (mut opp, mut opp_below, mut opp_sum) = (0usize, 0usize, 0.0);
    let (mut same, mut same_below, mut same_sum) = (0usize, 0usize, 0.0);
    for l in label_ground_truth_loops(gt_kf, cfg.retrieval.recency_exclusion, cfg.evaluation.loop_distance) {
        if !l.is_true {
            continue;
        }
        let rel = gt_kf[l.candidate].between(&gt_kf[l.query]);
        let o = overlap_ratio(&clouds[l.query], &clouds[l.candidate], &rel, radius);
        if l.same_direction() {
            same += 1;
            same_sum += o;
            same_below += usize::from(o < gate);
        } else {
            opp += 1;
            opp_sum += o;
            opp_below += usize::from(o < gate);
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    OverlapGateStats {
        gate,
        radius,
        opposite_pairs: opp,
        below_gate: opp_below,
        fraction_below: mean(opp_below as f64, opp),
        same_pairs: same,
        same_below_gate: same_below,
        mean_overlap_opposite: mean(opp_sum, opp),
        mean_overlap_same: mean(same_sum, same),
    }
}

/// Machine-readable summary of one SLAM run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub scans: usize,
    pub keyframes: usize,
    pub kitti_lengths: Vec<f64>,
    pub kitti_length_scale: f64,
    pub odometry: TrajectoryMetrics,
    pub cells: Vec<CellReport>,
    pub overlap_gate: OverlapGateStats,
    /// Extra named sections, e.g. training summaries.
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunReport {
    pub fn best_cell(&self) -> Option<&CellReport> {
        self.cells.iter().max_by(|a, b| {
            a.recall_at_precision_1
                .total_cmp(&b.recall_at_precision_1)
                .then(a.max_f1.total_cmp(&b.max_f1))
        })
    }

    pub fn cell(&self, keyframes: usize, top_k: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.keyframes == keyframes && c.top_k == top_k)
    }

    /// Text table: odometry row and one SLAM row per cell.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>9} {:>14} {:>8}\n",
            "method", "t_rel[%]", "r_rel[deg/100m]", "ATE[m]"
        );
        let row = |name: &str, m: &TrajectoryMetrics| {
            format!("{:<16} {:>9.3} {:>14.3} {:>8.3}\n", name, m.t_rel, m.r_rel, m.ate)
        };
        s += &row("odometry", &self.odometry);
        for c in &self.cells {
            s += &row(&format!("slam k{}/top{}", c.keyframes, c.top_k), &c.slam);
        }
        s
    }
}

pub fn build_report(
    cfg: &PipelineConfig,
    scans: usize,
    keyframes: &[Keyframe],
    odometry: &Trajectory,
    cells: &[CellResult],
    gt: &Trajectory,
) -> Result<RunReport> {
    let stamps: Vec<f64> = keyframes.iter().map(|k| k.timestamp).collect();
    let gt_kf = sample_at(gt, &stamps).map_err(|e| CliError::Data(e.to_string()))?.poses;
    let cells = cells
        .iter()
        .map(|c| evaluate_cell(c, &gt_kf, gt, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        scenario: cfg.scenario.to_string(),
        seed: cfg.seed,
        scans,
        keyframes: keyframes.len(),
        kitti_lengths: cfg.evaluation.kitti_lengths.clone(),
        kitti_length_scale: KITTI_LENGTH_SCALE,
        odometry: trajectory_metrics(odometry, gt, &cfg.evaluation.kitti_lengths)?,
        cells,
        overlap_gate: overlap_gate_stats(keyframes, &gt_kf, cfg),
        extra: BTreeMap::new(),
    })
}
