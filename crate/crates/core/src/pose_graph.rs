//! Pose graph over keyframes with odometry and loop-closure edges, solved by
//! Levenberg-Marquardt on right-multiplied se(3) increments.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{se3_right_jacobian_inv, Se3Pose};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge references unknown node {0}")]
    UnknownNode(usize),
    #[error("information matrix of edge {0}-{1} is not positive definite")]
    NotPositiveDefinite(usize, usize),
    #[error("graph has no nodes")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopInformation {
    Fixed,
    /// Fixed information scaled by `min(1, reference / C_f)`.
    CostScaled { reference_cost: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Odometry translation sigma per square root meter travelled.
    pub odom_sigma_t: f64,
    /// Odometry rotation sigma in degrees per square root meter.
    pub odom_sigma_r_deg: f64,
    /// Edge lengths are floored at this before scaling, in meters.
    pub min_edge_length: f64,
    pub loop_sigma_t: f64,
    pub loop_sigma_r_deg: f64,
    pub cauchy_scale: f64,
    pub loop_information: LoopInformation,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            odom_sigma_t: 0.02,
            odom_sigma_r_deg: 0.05,
            min_edge_length: 0.1,
            loop_sigma_t: 0.3,
            loop_sigma_r_deg: 1.0,
            cauchy_scale: 1.0,
            loop_information: LoopInformation::Fixed,
            max_iterations: 100,
            relative_tolerance: 1e-9,
        }
    }
}

/// Residual `log(z^-1 * x_from^-1 * x_to)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub measurement: Se3Pose,
    pub information: Matrix6<f64>,
    /// Cauchy kernel applies.
    pub robust: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseGraph {
    pub nodes: Vec<Se3Pose>,
    pub odometry: Vec<Edge>,
    pub loops: Vec<Edge>,
    pub cauchy_scale: f64,
}

/// Accepted loop closure: `relative` maps query coordinates into the
/// candidate frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConstraint {
    pub query: usize,
    pub candidate: usize,
    pub relative: Se3Pose,
    pub cost: f64,
}

pub fn diagonal_information(sigma_t: f64, sigma_r: f64) -> Matrix6<f64> {
    let (a, b) = (1.0 / (sigma_t * sigma_t), 1.0 / (sigma_r * sigma_r));
    Matrix6::from_diagonal(&Vector6::new(a, a, a, b, b, b))
}

fn is_spd(m: &Matrix6<f64>) -> bool {
    (m - m.transpose()).abs().max() <= 1e-9 * m.abs().max() && m.cholesky().is_some()
}

/// Chain of odometry edges between consecutive nodes plus one edge per loop
/// from candidate to query.
pub fn build_graph(
    poses: &[Se3Pose],
    path_lengths: &[f64],
    loops: &[LoopConstraint],
    cfg: &GraphConfig,
) -> Result<PoseGraph, GraphError> {
    if poses.is_empty() {
        return Err(GraphError::Empty);
    }
    let mut graph = PoseGraph {
        nodes: poses.to_vec(),
        odometry: Vec::with_capacity(poses.len().saturating_sub(1)),
        loops: Vec::with_capacity(loops.len()),
        cauchy_scale: cfg.cauchy_scale,
    };
    for i in 1..poses.len() {
        let len = (path_lengths[i] - path_lengths[i - 1]).abs().max(cfg.min_edge_length);
        let info = diagonal_information(cfg.odom_sigma_t * len.sqrt(), cfg.odom_sigma_r_deg.to_radians() * len.sqrt());
        graph.add_edge(
            Edge {
                from: i - 1,
                to: i,
                measurement: poses[i - 1].between(&poses[i]),
                information: info,
                robust: false,
            },
            true,
        )?;
    }
    let base = diagonal_information(cfg.loop_sigma_t, cfg.loop_sigma_r_deg.to_radians());
    for l in loops {
        let scale = match cfg.loop_information {
            LoopInformation::Fixed => 1.0,
            LoopInformation::CostScaled { reference_cost } => {
                if l.cost > reference_cost {
                    reference_cost / l.cost
                } else {
                    1.0
                }
            }
        };
        graph.add_edge(
            Edge {
                from: l.candidate,
                to: l.query,
                measurement: l.relative,
                information: base * scale,
                robust: true,
            },
            true,
        )?;
    }
    Ok(graph)
}

impl PoseGraph {
    /// Adds an odometry (`robust == false`) or loop edge. With `check`, the
    /// information matrix must be symmetric positive definite.
    pub fn add_edge(&mut self, edge: Edge, check: bool) -> Result<(), GraphError> {
        for n in [edge.from, edge.to] {
            if n >= self.nodes.len() {
                return Err(GraphError::UnknownNode(n));
            }
        }
        if check && !is_spd(&edge.information) {
            return Err(GraphError::NotPositiveDefinite(edge.from, edge.to));
        }
        if edge.robust {
            self.loops.push(edge);
        } else {
            self.odometry.push(edge);
        }
        Ok(())
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.odometry.iter().chain(&self.loops)
    }

    /// Robust chi-squared of `poses`.
    pub fn chi2(&self, poses: &[Se3Pose]) -> f64 {
        self.edges()
            .map(|e| {
                let r = edge_residual(&poses[e.from], &poses[e.to], &e.measurement);
                let s = r.dot(&(e.information * r));
                if e.robust {
                    cauchy(s, self.cauchy_scale).0
                } else {
                    s
                }
            })
            .sum()
    }

    /// g2o text: `VERTEX_SE3:QUAT` and `EDGE_SE3:QUAT` with the upper
    /// triangle of the information matrix.
    pub fn to_g2o(&self, poses: &[Se3Pose]) -> String {
        let mut out = String::new();
        for (i, p) in poses.iter().enumerate() {
            let _ = writeln!(out, "VERTEX_SE3:QUAT {i} {}", pose_fields(p));
        }
        if !poses.is_empty() {
            let _ = writeln!(out, "FIX 0");
        }
        for e in self.edges() {
            let _ = write!(out, "EDGE_SE3:QUAT {} {} {}", e.from, e.to, pose_fields(&e.measurement));
            for r in 0..6 {
                for c in r..6 {
                    let _ = write!(out, " {}", e.information[(r, c)]);
                }
            }
            out.push('\n');
        }
        out
    }
}

fn pose_fields(p: &Se3Pose) -> String {
    let q = p.rotation.quaternion();
    format!(
        "{} {} {} {} {} {} {}",
        p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
    )
}

/// Cauchy kernel of a squared error: `(rho(s), rho'(s))`.
pub fn cauchy(s: f64, c: f64) -> (f64, f64) {
    let c2 = c * c;
    (c2 * (s / c2).ln_1p(), 1.0 / (1.0 + s / c2))
}

pub fn edge_residual(xi: &Se3Pose, xj: &Se3Pose, z: &Se3Pose) -> Vector6<f64> {
    z.inverse().compose(&xi.inverse()).compose(xj).log_unchecked()
}

/// Residual and its Jacobians w.r.t. right perturbations of `xi` and `xj`.
pub fn edge_jacobians(xi: &Se3Pose, xj: &Se3Pose, z: &Se3Pose) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let e = edge_residual(xi, xj, z);
    let jr_inv = se3_right_jacobian_inv(&e);
    let jj = jr_inv;
    let ji = -jr_inv * xj.inverse().compose(xi).adjoint();
    (e, ji, jj)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub poses: Vec<Se3Pose>,
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Chi-squared after each accepted step, starting with the initial value.
    pub chi2_history: Vec<f64>,
}

fn linearize(graph: &PoseGraph, poses: &[Se3Pose]) -> (DMatrix<f64>, DVector<f64>) {
    let dim = 6 * (poses.len() - 1);
    let mut h = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    for e in graph.edges() {
        let (r, ji, jj) = edge_jacobians(&poses[e.from], &poses[e.to], &e.measurement);
        let w = if e.robust {
            cauchy(r.dot(&(e.information * r)), graph.cauchy_scale).1
        } else {
            1.0
        };
        let omega = e.information * w;
        let blocks = [(e.from, ji), (e.to, jj)];
        for &(a, ja) in &blocks {
            if a == 0 {
                continue;
            }
            let ra = 6 * (a - 1);
            let jt_omega = ja.transpose() * omega;
            let mut seg = b.fixed_rows_mut::<6>(ra);
            seg += jt_omega * r;
            for &(c, jc) in &blocks {
                if c == 0 {
                    continue;
                }
                let rc = 6 * (c - 1);
                let mut blk = h.fixed_view_mut::<6, 6>(ra, rc);
                blk += jt_omega * jc;
            }
        }
    }
    (h, b)
}

fn apply(poses: &[Se3Pose], delta: &DVector<f64>) -> Vec<Se3Pose> {
    let mut out = poses.to_vec();
    for (k, p) in out.iter_mut().enumerate().skip(1) {
        let d = Vector6::from_iterator(delta.rows(6 * (k - 1), 6).iter().copied());
        *p = p.compose(&Se3Pose::exp(&d));
    }
    out
}

/// Levenberg-Marquardt with node 0 held fixed. Stops when the relative chi2
/// decrease of an accepted step falls below the tolerance, when no damped
/// step decreases chi2, or after the iteration limit.
pub fn optimize(graph: &PoseGraph, cfg: &GraphConfig) -> OptimizeResult {
    let mut poses = graph.nodes.clone();
    let mut chi2 = graph.chi2(&poses);
    let initial_chi2 = chi2;
    let mut history = vec![chi2];
    if poses.len() < 2 || chi2 == 0.0 {
        return OptimizeResult {
            poses,
            initial_chi2,
            final_chi2: chi2,
            iterations: 0,
            converged: true,
            chi2_history: history,
        };
    }
    let mut lambda = 1e-4;
    let mut converged = false;
    let mut iterations = 0;
    'outer: while iterations < cfg.max_iterations {
        iterations += 1;
        let (h, b) = linearize(graph, &poses);
        loop {
            let mut damped = h.clone();
            for k in 0..damped.nrows() {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let step = damped.cholesky().map(|c| -c.solve(&b));
            if let Some(step) = step {
                let trial = apply(&poses, &step);
                let trial_chi2 = graph.chi2(&trial);
                if trial_chi2 < chi2 {
                    let rel = (chi2 - trial_chi2) / chi2;
                    poses = trial;
                    chi2 = trial_chi2;
                    history.push(chi2);
                    lambda = (lambda / 3.0).max(1e-12);
                    if rel < cfg.relative_tolerance || chi2 == 0.0 {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
            }
            lambda *= 4.0;
            if lambda > 1e12 {
                // no damped step improves: at a minimum up to round-off
                converged = true;
                break 'outer;
            }
        }
    }
    OptimizeResult {
        poses,
        initial_chi2,
        final_chi2: chi2,
        iterations,
        converged,
        chi2_history: history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, scale: f64) -> Se3Pose {
        Se3Pose::new(
            UnitQuaternion::from_euler_angles(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-3.0..3.0)),
            Vector3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale)),
        )
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for _ in 0..20 {
            let xi = random_pose(&mut rng, 10.0);
            let xj = random_pose(&mut rng, 10.0);
            // measurement near the true relative pose keeps the residual
            // away from the log singularity
            let z = xi.between(&xj).compose(&Se3Pose::exp(&(Vector6::from_fn(|_, _| rng.random_range(-0.3..0.3)))));
            let (_, ji, jj) = edge_jacobians(&xi, &xj, &z);
            let mut ni = Matrix6::zeros();
            let mut nj = Matrix6::zeros();
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let col_i = (edge_residual(&xi.compose(&Se3Pose::exp(&d)), &xj, &z) - edge_residual(&xi.compose(&Se3Pose::exp(&-d)), &xj, &z)) / (2.0 * h);
                let col_j = (edge_residual(&xi, &xj.compose(&Se3Pose::exp(&d)), &z) - edge_residual(&xi, &xj.compose(&Se3Pose::exp(&-d)), &z)) / (2.0 * h);
                ni.set_column(k, &col_i);
                nj.set_column(k, &col_j);
            }
            assert!((ji - ni).norm() / ji.norm() < 1e-4);
            assert!((jj - nj).norm() / jj.norm() < 1e-4);
        }
    }

    fn chain(n: usize) -> (Vec<Se3Pose>, Vec<f64>) {
        let poses: Vec<Se3Pose> = (0..n)
            .map(|i| Se3Pose::from_yaw(0.05 * i as f64, Vector3::new(i as f64, 0.1 * i as f64, 0.0)))
            .collect();
        let lengths = (0..n).map(|i| i as f64).collect();
        (poses, lengths)
    }

    #[test]
    fn consistent_chain_is_unchanged() {
        let (poses, lengths) = chain(10);
        let g = build_graph(&poses, &lengths, &[], &GraphConfig::default()).unwrap();
        assert_eq!(g.odometry.len(), 9);
        assert!(g.loops.is_empty());
        let res = optimize(&g, &GraphConfig::default());
        assert!(res.final_chi2 < 1e-18);
        for (a, b) in res.poses.iter().zip(&poses) {
            let (dt, da) = a.distance_to(b);
            assert!(dt < 1e-9 && da < 1e-9);
        }
    }

    #[test]
    fn loop_adds_one_edge_and_unknown_nodes_fail() {
        let (poses, lengths) = chain(10);
        let l = LoopConstraint {
            query: 9,
            candidate: 0,
            relative: poses[0].between(&poses[9]),
            cost: 0.0,
        };
        let g = build_graph(&poses, &lengths, &[l], &GraphConfig::default()).unwrap();
        assert_eq!(g.loops.len(), 1);
        for e in g.edges() {
            assert!(e.information.cholesky().is_some());
        }
        let bad = LoopConstraint { query: 12, ..l };
        assert_eq!(build_graph(&poses, &lengths, &[bad], &GraphConfig::default()).unwrap_err(), GraphError::UnknownNode(12));
    }

    /// Square loop with yaw-drifting odometry.
    fn drifting_square(n_side: usize, drift: f64) -> (Vec<Se3Pose>, Vec<Se3Pose>, Vec<f64>) {
        let mut gt = vec![Se3Pose::identity()];
        let mut est = vec![Se3Pose::identity()];
        let mut lengths = vec![0.0];
        for k in 0..4 * n_side {
            let turn = if (k + 1) % n_side == 0 { std::f64::consts::FRAC_PI_2 } else { 0.0 };
            let inc = Se3Pose::from_yaw(turn, Vector3::new(1.0, 0.0, 0.0));
            let noisy = Se3Pose::from_yaw(turn + drift, Vector3::new(1.0, 0.0, 0.0));
            gt.push(gt.last().unwrap().compose(&inc));
            est.push(est.last().unwrap().compose(&noisy));
            lengths.push(lengths.last().unwrap() + 1.0);
        }
        (gt, est, lengths)
    }

    #[test]
    fn exact_loop_reduces_endpoint_error() {
        let (gt, est, lengths) = drifting_square(10, 0.004);
        let n = gt.len();
        let l = LoopConstraint {
            query: n - 1,
            candidate: 0,
            relative: gt[0].between(&gt[n - 1]),
            cost: 0.0,
        };
        let cfg = GraphConfig::default();
        let g = build_graph(&est, &lengths, &[l], &cfg).unwrap();
        let res = optimize(&g, &cfg);
        let before = (est[n - 1].translation - gt[n - 1].translation).norm();
        let after = (res.poses[n - 1].translation - gt[n - 1].translation).norm();
        assert!(after < before, "{after} vs {before}");
        assert!(res.converged);
    }

    #[test]
    fn chi2_monotone_and_gauge_fixed_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (gt, _, lengths) = drifting_square(rng.random_range(4..9), 0.0);
            let n = gt.len();
            let est: Vec<Se3Pose> = gt
                .iter()
                .enumerate()
                .map(|(i, p)| if i == 0 { *p } else { p.compose(&Se3Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-0.05..0.05)))) })
                .collect();
            let mut loops = Vec::new();
            for _ in 0..3 {
                let q = rng.random_range(n / 2..n);
                let c = rng.random_range(0..n / 4);
                loops.push(LoopConstraint {
                    query: q,
                    candidate: c,
                    relative: gt[c].between(&gt[q]).compose(&Se3Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-0.2..0.2)))),
                    cost: 0.0,
                });
            }
            let cfg = GraphConfig::default();
            let g = build_graph(&est, &lengths, &loops, &cfg).unwrap();
            let res = optimize(&g, &cfg);
            assert!(res.chi2_history.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(res.poses[0], est[0]);
        }
    }

    #[test]
    fn zero_information_edge_changes_nothing() {
        let (gt, est, lengths) = drifting_square(6, 0.01);
        let n = gt.len();
        let cfg = GraphConfig::default();
        let l = LoopConstraint {
            query: n - 1,
            candidate: 0,
            relative: gt[0].between(&gt[n - 1]),
            cost: 0.0,
        };
        let g = build_graph(&est, &lengths, &[l], &cfg).unwrap();
        let mut g0 = g.clone();
        g0.add_edge(
            Edge {
                from: 2,
                to: n - 3,
                measurement: Se3Pose::from_translation(Vector3::new(50.0, 0.0, 0.0)),
                information: Matrix6::zeros(),
                robust: true,
            },
            false,
        )
        .unwrap();
        let a = optimize(&g, &cfg);
        let b = optimize(&g0, &cfg);
        for (p, q) in a.poses.iter().zip(&b.poses) {
            let (dt, da) = p.distance_to(q);
            assert!(dt < 1e-9 && da < 1e-9);
        }
    }

    #[test]
    fn cost_scaled_information() {
        let (poses, lengths) = chain(5);
        let l = LoopConstraint {
            query: 4,
            candidate: 0,
            relative: poses[0].between(&poses[4]),
            cost: 0.2,
        };
        let cfg = GraphConfig {
            loop_information: LoopInformation::CostScaled { reference_cost: 0.05 },
            ..Default::default()
        };
        let g = build_graph(&poses, &lengths, &[l], &cfg).unwrap();
        let fixed = diagonal_information(0.3, 1f64.to_radians());
        assert!((g.loops[0].information - fixed * 0.25).norm() < 1e-9);
    }

    #[test]
    fn g2o_dump_has_all_elements() {
        let (poses, lengths) = chain(4);
        let g = build_graph(&poses, &lengths, &[], &GraphConfig::default()).unwrap();
        let text = g.to_g2o(&poses);
        assert_eq!(text.lines().filter(|l| l.starts_with("VERTEX_SE3:QUAT")).count(), 4);
        let edge = text.lines().find(|l| l.starts_with("EDGE_SE3:QUAT")).unwrap();
        assert_eq!(edge.split_whitespace().count(), 1 + 2 + 7 + 21);
    }
}
