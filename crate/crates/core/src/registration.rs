//! Point-to-distribution registration of oriented surface points.
//!
//! The estimated pose `T` maps query coordinates into the candidate frame.
//! Each query surface point is associated with the nearest candidate mean
//! within the correspondence radius, and the residual is the offset along
//! the candidate normal, `n_c . (T * mu_q - mu_c)`, under a Huber kernel.

use nalgebra::{Matrix6, RowVector6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{hat, Se3Pose};
use crate::keyframing::SurfacePoint;
use crate::spatial::PointGrid;

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("too few correspondences within {0} m")]
    NoOverlap(f64),
    #[error("empty surface point set")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub correspondence_radius: f64,
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub max_halvings: usize,
    /// Fewer correspondences than this, initially or at the final pose,
    /// means no overlap.
    pub min_correspondences: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            correspondence_radius: 2.0,
            huber_delta: 0.3,
            max_iterations: 50,
            step_tolerance: 1e-6,
            max_halvings: 5,
            min_correspondences: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Maps query coordinates into the candidate frame.
    pub relative_pose: Se3Pose,
    /// Mean robust cost over the final correspondences (C_f).
    pub cost: f64,
    /// Final correspondence count (C_o).
    pub correspondences: usize,
    /// Mean of the two surface point set sizes (C_a).
    pub average_set_size: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Registration-derived measures of a fixed pose, without optimizing it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct P2dMeasures {
    pub cost: f64,
    pub correspondences: usize,
    pub average_set_size: f64,
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// Residual and its Jacobian w.r.t. a left perturbation `exp(xi) * T`,
/// `xi = [rho; phi]`.
pub fn residual_and_jacobian(
    query: &SurfacePoint,
    candidate: &SurfacePoint,
    pose: &Se3Pose,
) -> (f64, RowVector6<f64>) {
    let p = pose.transform_point(&query.mean);
    let n = candidate.normal;
    let r = n.dot(&(p - candidate.mean));
    let dp_dphi = -hat(&p);
    let rot_part = n.transpose() * dp_dphi;
    let j = RowVector6::new(n.x, n.y, n.z, rot_part[0], rot_part[1], rot_part[2]);
    (r, j)
}

struct Association {
    pairs: Vec<(usize, usize)>,
}

fn associate(query: &[SurfacePoint], grid: &PointGrid, pose: &Se3Pose, radius: f64) -> Association {
    let pairs = query
        .iter()
        .enumerate()
        .filter_map(|(i, q)| {
            grid.nearest_within(&pose.transform_point(&q.mean), radius)
                .map(|(j, _)| (i, j))
        })
        .collect();
    Association { pairs }
}

fn robust_cost(assoc: &Association, query: &[SurfacePoint], cand: &[SurfacePoint], pose: &Se3Pose, delta: f64) -> f64 {
    assoc
        .pairs
        .iter()
        .map(|&(i, j)| {
            let p = pose.transform_point(&query[i].mean);
            huber(cand[j].normal.dot(&(p - cand[j].mean)), delta)
        })
        .sum()
}

fn means(points: &[SurfacePoint]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| p.mean).collect()
}

/// C_f, C_o and C_a evaluated at `pose` as given.
pub fn evaluate_p2d(query: &[SurfacePoint], candidate: &[SurfacePoint], pose: &Se3Pose, cfg: &RegistrationConfig) -> P2dMeasures {
    let cand_means = means(candidate);
    let grid = PointGrid::new(&cand_means, cfg.correspondence_radius);
    let assoc = associate(query, &grid, pose, cfg.correspondence_radius);
    let n = assoc.pairs.len();
    let total = robust_cost(&assoc, query, candidate, pose, cfg.huber_delta);
    P2dMeasures {
        cost: if n > 0 { total / n as f64 } else { 0.0 },
        correspondences: n,
        average_set_size: 0.5 * (query.len() + candidate.len()) as f64,
    }
}

/// Gauss-Newton registration over SE(3) with step halving.
pub fn register_p2d(
    query: &[SurfacePoint],
    candidate: &[SurfacePoint],
    initial: &Se3Pose,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    register_traced(query, candidate, initial, cfg, None)
}

/// As [`register_p2d`], additionally recording `(cost before, cost after)`
/// of every accepted step under that step's fixed association.
pub fn register_traced(
    query: &[SurfacePoint],
    candidate: &[SurfacePoint],
    initial: &Se3Pose,
    cfg: &RegistrationConfig,
    mut trace: Option<&mut Vec<(f64, f64)>>,
) -> Result<RegistrationResult, RegistrationError> {
    if query.is_empty() || candidate.is_empty() {
        return Err(RegistrationError::Empty);
    }
    let cand_means = means(candidate);
    let grid = PointGrid::new(&cand_means, cfg.correspondence_radius);
    let mut pose = *initial;
    let initial_assoc = associate(query, &grid, &pose, cfg.correspondence_radius);
    if initial_assoc.pairs.len() < cfg.min_correspondences.max(1) {
        return Err(RegistrationError::NoOverlap(cfg.correspondence_radius));
    }
    let delta = cfg.huber_delta;
    let mut converged = false;
    let mut iterations = 0;
    let mut assoc = initial_assoc;
    while iterations < cfg.max_iterations {
        iterations += 1;
        if assoc.pairs.is_empty() {
            break;
        }
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for &(i, j) in &assoc.pairs {
            let (r, jac) = residual_and_jacobian(&query[i], &candidate[j], &pose);
            let w = huber_weight(r, delta);
            h += jac.transpose() * jac * w;
            g += jac.transpose() * (w * r);
        }
        let damping = 1e-9 * h.diagonal().max().max(1e-12);
        let Some(chol) = (h + Matrix6::identity() * damping).cholesky() else {
            break;
        };
        let mut step = -chol.solve(&g);
        let before = robust_cost(&assoc, query, candidate, &pose, delta);
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial = Se3Pose::exp(&step).compose(&pose);
            let after = robust_cost(&assoc, query, candidate, &trial, delta);
            if after <= before {
                accepted = Some((trial, after));
                break;
            }
            step *= 0.5;
        }
        let Some((next, after)) = accepted else {
            // no descent direction left under this association
            converged = step.norm() < cfg.step_tolerance;
            break;
        };
        if let Some(t) = trace.as_deref_mut() {
            t.push((before, after));
        }
        pose = next;
        if step.norm() < cfg.step_tolerance {
            converged = true;
            break;
        }
        assoc = associate(query, &grid, &pose, cfg.correspondence_radius);
    }
    let measures = evaluate_p2d(query, candidate, &pose, cfg);
    if measures.correspondences < cfg.min_correspondences.max(1) {
        return Err(RegistrationError::NoOverlap(cfg.correspondence_radius));
    }
    Ok(RegistrationResult {
        relative_pose: pose,
        cost: measures.cost,
        correspondences: measures.correspondences,
        average_set_size: measures.average_set_size,
        converged,
        iterations,
    })
}

/// Largest relative deviation between the analytic residual Jacobian and
/// central finite differences with step `h`, over the given pairs.
pub fn registration_jacobian_check(
    query: &[SurfacePoint],
    candidate: &[SurfacePoint],
    pose: &Se3Pose,
    h: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (q, c) in query.iter().zip(candidate) {
        let (_, analytic) = residual_and_jacobian(q, c, pose);
        let mut numeric = RowVector6::zeros();
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = Se3Pose::exp(&d).compose(pose);
            let minus = Se3Pose::exp(&-d).compose(pose);
            let rp = residual_and_jacobian(q, c, &plus).0;
            let rm = residual_and_jacobian(q, c, &minus).0;
            numeric[k] = (rp - rm) / (2.0 * h);
        }
        let scale = analytic.norm().max(numeric.norm()).max(1e-12);
        worst = worst.max((analytic - numeric).norm() / scale);
    }
    worst
}
