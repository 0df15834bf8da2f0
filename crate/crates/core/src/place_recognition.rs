//! ScanContext descriptors with intensity-sum cells, rotation-shift
//! matching, odometry similarity and joint candidate retrieval.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{RadarPoint, Se3Pose};
use crate::keyframing::{accumulate_keyframes, Keyframe};

#[derive(Debug, Error)]
pub enum PlaceError {
    #[error("descriptor dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("descriptor cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescriptorConfig {
    pub n_ring: usize,
    pub n_sec: usize,
    pub max_range: f64,
    /// Intensity sums are divided by this.
    pub weight: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            n_ring: 20,
            n_sec: 60,
            max_range: 40.0,
            weight: 1000.0,
        }
    }
}

pub const EMPTY_CELL: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanContextDescriptor {
    pub n_ring: usize,
    pub n_sec: usize,
    pub max_range: f64,
    /// Column-major: `cells[sector * n_ring + ring]`.
    pub cells: Vec<f64>,
    pub keyframe_ids: Vec<usize>,
}

impl ScanContextDescriptor {
    pub fn get(&self, ring: usize, sector: usize) -> f64 {
        self.cells[sector * self.n_ring + ring]
    }

    fn column(&self, sector: usize) -> &[f64] {
        &self.cells[sector * self.n_ring..(sector + 1) * self.n_ring]
    }

    /// Circular column shift: column `j` moves to `(j + s) mod n_sec`.
    pub fn shifted(&self, s: usize) -> ScanContextDescriptor {
        let mut out = self.clone();
        for j in 0..self.n_sec {
            let to = (j + s) % self.n_sec;
            out.cells[to * self.n_ring..(to + 1) * self.n_ring].copy_from_slice(self.column(j));
        }
        out
    }

    pub fn occupancy(&self) -> f64 {
        self.cells.iter().filter(|&&v| v != EMPTY_CELL).count() as f64 / self.cells.len() as f64
    }

    /// Row-major copy, `[ring][sector]`.
    pub fn row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cells.len());
        for i in 0..self.n_ring {
            for j in 0..self.n_sec {
                out.push(self.get(i, j));
            }
        }
        out
    }
}

/// Polar binning over the full circle of a cloud already expressed in a
/// frame parallel to the ground plane. Sector 0 starts at azimuth 0 and
/// sectors increase counter-clockwise.
pub fn build_descriptor(points: &[RadarPoint], cfg: &DescriptorConfig, keyframe_ids: Vec<usize>) -> ScanContextDescriptor {
    let mut sums = vec![0.0; cfg.n_ring * cfg.n_sec];
    let mut hits = vec![false; cfg.n_ring * cfg.n_sec];
    let ring_width = cfg.max_range / cfg.n_ring as f64;
    let sector_width = std::f64::consts::TAU / cfg.n_sec as f64;
    for p in points {
        let r = p.position.xy().norm();
        if r >= cfg.max_range {
            continue;
        }
        let ring = ((r / ring_width) as usize).min(cfg.n_ring - 1);
        let az = p.position.y.atan2(p.position.x).rem_euclid(std::f64::consts::TAU);
        let sector = ((az / sector_width) as usize).min(cfg.n_sec - 1);
        let k = sector * cfg.n_ring + ring;
        sums[k] += p.intensity;
        hits[k] = true;
    }
    let cells = sums
        .iter()
        .zip(&hits)
        .map(|(&s, &h)| if h { s / cfg.weight } else { EMPTY_CELL })
        .collect();
    ScanContextDescriptor {
        n_ring: cfg.n_ring,
        n_sec: cfg.n_sec,
        max_range: cfg.max_range,
        cells,
        keyframe_ids,
    }
}

/// Descriptor of the last `k` keyframes up to `newest`, leveled with the
/// newest keyframe's orientation.
pub fn keyframe_descriptor(frames: &[Keyframe], newest: usize, k: usize, cfg: &DescriptorConfig) -> ScanContextDescriptor {
    let cloud = accumulate_keyframes(frames, newest, k);
    let level = Se3Pose::from_rotation(frames[newest].pose.leveling_rotation());
    let leveled: Vec<RadarPoint> = cloud
        .iter()
        .map(|p| RadarPoint::new(level.transform_point(&p.position), p.intensity, p.doppler))
        .collect();
    let first = (newest + 1).saturating_sub(k.max(1));
    build_descriptor(&leveled, cfg, frames[first..=newest].iter().map(|f| f.id).collect())
}

pub fn build_database(frames: &[Keyframe], k: usize, cfg: &DescriptorConfig) -> Vec<ScanContextDescriptor> {
    (0..frames.len())
        .into_par_iter()
        .map(|i| keyframe_descriptor(frames, i, k, cfg))
        .collect()
}

/// Minimum over circular shifts `s` of the mean column cosine distance
/// between `shift(query, s)` and `candidate`. Returns `(d_sc, s)`; ties go
/// to the smallest shift.
pub fn descriptor_distance(query: &ScanContextDescriptor, candidate: &ScanContextDescriptor) -> Result<(f64, usize), PlaceError> {
    if query.n_ring != candidate.n_ring || query.n_sec != candidate.n_sec {
        return Err(PlaceError::DimensionMismatch(query.n_ring, query.n_sec, candidate.n_ring, candidate.n_sec));
    }
    let n = query.n_sec;
    let qn: Vec<f64> = (0..n).map(|j| norm(query.column(j))).collect();
    let cn: Vec<f64> = (0..n).map(|j| norm(candidate.column(j))).collect();
    let mut best = (f64::INFINITY, 0);
    for s in 0..n {
        let mut total = 0.0;
        for (j, qj) in qn.iter().enumerate() {
            let c = (j + s) % n;
            let denom = qj * cn[c];
            total += if denom == 0.0 {
                1.0
            } else {
                1.0 - dot(query.column(j), candidate.column(c)) / denom
            };
        }
        let d = total / n as f64;
        if d < best.0 {
            best = (d, s);
        }
    }
    Ok(best)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Yaw of the shift, in radians.
pub fn shift_yaw(shift: usize, n_sec: usize) -> f64 {
    shift as f64 * std::f64::consts::TAU / n_sec as f64
}

/// Initial query-to-candidate pose from a descriptor shift: a yaw in the
/// leveled frames, zero translation.
pub fn shift_initial_guess(query: &Se3Pose, candidate: &Se3Pose, shift: usize, n_sec: usize) -> Se3Pose {
    let lq = query.leveling_rotation();
    let lc = candidate.leveling_rotation();
    let yaw = nalgebra::UnitQuaternion::from_axis_angle(&Vector3::z_axis(), shift_yaw(shift, n_sec));
    Se3Pose::from_rotation(lc.inverse() * yaw * lq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Keyframes accumulated per descriptor.
    pub keyframes: usize,
    pub top_k: usize,
    /// The most recent keyframes excluded from the database.
    pub recency_exclusion: usize,
    /// Expected odometry drift per meter travelled.
    pub drift_rate: f64,
    pub odom_cap: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            keyframes: 1,
            top_k: 1,
            recency_exclusion: 20,
            drift_rate: 0.05,
            odom_cap: 5.0,
        }
    }
}

/// Odometry distance normalized by the drift expected over the path
/// travelled between the two keyframes, capped.
pub fn odometry_similarity(q: &Keyframe, c: &Keyframe, drift_rate: f64, cap: f64) -> f64 {
    odometry_similarity_raw(&q.pose.translation, q.path_length, &c.pose.translation, c.path_length, drift_rate, cap)
}

pub fn odometry_similarity_raw(tq: &Vector3<f64>, lq: f64, tc: &Vector3<f64>, lc: f64, drift_rate: f64, cap: f64) -> f64 {
    let dist = (tq - tc).norm();
    if dist == 0.0 {
        return 0.0;
    }
    let denom = drift_rate * (lq - lc).abs();
    if denom <= 0.0 {
        return cap;
    }
    (dist / denom).min(cap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCandidate {
    pub candidate: usize,
    pub d_sc: f64,
    pub d_odom: f64,
    pub shift: usize,
}

impl RetrievedCandidate {
    pub fn cost(&self) -> f64 {
        self.d_sc + self.d_odom
    }
}

/// Exhaustive retrieval over keyframes `c` with `c + recency < query`,
/// ranked by `d_sc + d_odom`; ties go to the lower id.
pub fn retrieve_candidates(
    query: usize,
    frames: &[Keyframe],
    descriptors: &[ScanContextDescriptor],
    cfg: &RetrievalConfig,
) -> Vec<RetrievedCandidate> {
    let end = query.saturating_sub(cfg.recency_exclusion);
    let mut scored: Vec<RetrievedCandidate> = (0..end)
        .into_par_iter()
        .map(|c| {
            let (d_sc, shift) = descriptor_distance(&descriptors[query], &descriptors[c]).expect("uniform descriptor grid");
            RetrievedCandidate {
                candidate: c,
                d_sc,
                d_odom: odometry_similarity(&frames[query], &frames[c], cfg.drift_rate, cfg.odom_cap),
                shift,
            }
        })
        .collect();
    scored.sort_by(|a, b| a.cost().total_cmp(&b.cost()).then(a.candidate.cmp(&b.candidate)));
    scored.truncate(cfg.top_k.max(1));
    scored
}

#[derive(Serialize, Deserialize)]
struct CacheIndex {
    n_ring: usize,
    n_sec: usize,
    max_range: f64,
    keyframe_ids: Vec<Vec<usize>>,
}

/// Writes `<stem>.bin` (row-major little-endian f64 matrices, back to back)
/// and `<stem>.json` (dimensions and keyframe ids).
pub fn write_descriptor_cache(stem: &Path, descriptors: &[ScanContextDescriptor]) -> Result<(), PlaceError> {
    let first = descriptors.first();
    let index = CacheIndex {
        n_ring: first.map_or(0, |d| d.n_ring),
        n_sec: first.map_or(0, |d| d.n_sec),
        max_range: first.map_or(0.0, |d| d.max_range),
        keyframe_ids: descriptors.iter().map(|d| d.keyframe_ids.clone()).collect(),
    };
    let mut bytes = Vec::new();
    for d in descriptors {
        for v in d.row_major() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(stem.with_extension("bin"), bytes)?;
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&index).map_err(|e| PlaceError::Cache(e.to_string()))?)?;
    Ok(())
}

pub fn read_descriptor_cache(stem: &Path) -> Result<Vec<ScanContextDescriptor>, PlaceError> {
    let index: CacheIndex =
        serde_json::from_slice(&fs::read(stem.with_extension("json"))?).map_err(|e| PlaceError::Cache(e.to_string()))?;
    let bytes = fs::read(stem.with_extension("bin"))?;
    let cells = index.n_ring * index.n_sec;
    if bytes.len() != cells * 8 * index.keyframe_ids.len() {
        return Err(PlaceError::Cache("binary size does not match index".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(index
        .keyframe_ids
        .iter()
        .enumerate()
        .map(|(k, ids)| {
            let rm = &values[k * cells..(k + 1) * cells];
            let mut col = vec![0.0; cells];
            for i in 0..index.n_ring {
                for j in 0..index.n_sec {
                    col[j * index.n_ring + i] = rm[i * index.n_sec + j];
                }
            }
            ScanContextDescriptor {
                n_ring: index.n_ring,
                n_sec: index.n_sec,
                max_range: index.max_range,
                cells: col,
                keyframe_ids: ids.clone(),
            }
        })
        .collect())
}
