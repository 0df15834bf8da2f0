use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;

/// Half side of the square trail both scenarios are laid out around.
pub const TRAIL_HALF_SIDE: f64 = 20.0;
/// Corner fillet radius of the trail.
pub const TRAIL_CORNER_RADIUS: f64 = 4.0;
/// Reflectivity scale: a unit-reflectivity target at 10 m returns ~2000.
pub const REFLECTIVITY_SCALE: f64 = 2.0e5;

const FOREST_HALF_EXTENT: f64 = 50.0;
const FOREST_TREES: usize = 220;
const FOREST_BOULDERS: usize = 45;
/// Opposite-facing sensors less than 6 m apart share no wall at this width.
const TUNNEL_WIDTH: f64 = 11.0;
const TUNNEL_WALL_HEIGHT: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Tunnel,
    Forest,
}

impl FromStr for Scenario {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "tunnel" => Ok(Scenario::Tunnel),
            "forest" => Ok(Scenario::Forest),
            other => Err(SimError::UnknownScenario(other.to_string())),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Tunnel => "tunnel",
            Scenario::Forest => "forest",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Rectangle `origin + s*u + t*v`, `s, t` in `[0, 1]`, `u` orthogonal to `v`.
    Quad {
        origin: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
    },
    /// Vertical cylinder.
    Cylinder {
        center: Vector2<f64>,
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
    /// Box rotated about +z by `yaw`.
    Box {
        center: Vector3<f64>,
        half_extents: Vector3<f64>,
        yaw: f64,
    },
}

impl Primitive {
    /// Horizontal bounding circle `(center, radius)`.
    pub fn footprint(&self) -> (Vector2<f64>, f64) {
        match self {
            Primitive::Quad { origin, u, v } => {
                let c = origin + 0.5 * (u + v);
                let r = 0.5 * (u + v).xy().norm().max((u - v).xy().norm());
                (c.xy(), r)
            }
            Primitive::Cylinder { center, radius, .. } => (*center, *radius),
            Primitive::Box { center, half_extents, .. } => (center.xy(), half_extents.xy().norm()),
        }
    }

    /// Smallest ray parameter `t > eps` at which `origin + t*dir` hits the
    /// primitive. `dir` must be unit length.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match self {
            Primitive::Quad { origin: o, u, v } => {
                let n = u.cross(v);
                let denom = n.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(o - origin)) / denom;
                if t <= EPS {
                    return None;
                }
                let rel = origin + dir * t - o;
                let s = rel.dot(u) / u.norm_squared();
                let w = rel.dot(v) / v.norm_squared();
                ((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&w)).then_some(t)
            }
            Primitive::Cylinder { center, radius, z_min, z_max } => {
                let ox = origin.x - center.x;
                let oy = origin.y - center.y;
                let a = dir.x * dir.x + dir.y * dir.y;
                if a < 1e-14 {
                    return None;
                }
                let b = 2.0 * (ox * dir.x + oy * dir.y);
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                    if t > EPS {
                        let z = origin.z + t * dir.z;
                        if z >= *z_min && z <= *z_max {
                            return Some(t);
                        }
                    }
                }
                None
            }
            Primitive::Box { center, half_extents, yaw } => {
                let (s, c) = yaw.sin_cos();
                let rel = origin - center;
                // rotate into the box frame by -yaw
                let lo = Vector3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
                let ld = Vector3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for k in 0..3 {
                    if ld[k].abs() < 1e-14 {
                        if lo[k].abs() > half_extents[k] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half_extents[k] - lo[k]) / ld[k];
                    let t2 = (half_extents[k] - lo[k]) / ld[k];
                    t_near = t_near.max(t1.min(t2));
                    t_far = t_far.min(t1.max(t2));
                }
                if t_near > t_far || t_far <= EPS {
                    return None;
                }
                Some(if t_near > EPS { t_near } else { t_far })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub primitive: Primitive,
    pub reflectivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub scenario: Scenario,
    pub seed: u64,
    pub surfaces: Vec<Surface>,
    /// Infinite ground plane at z = 0.
    pub ground: bool,
    pub ground_reflectivity: f64,
    pub bounds_min: Vector2<f64>,
    pub bounds_max: Vector2<f64>,
}

impl WorldModel {
    pub fn contains_xy(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.bounds_min.x && p.x <= self.bounds_max.x && p.y >= self.bounds_min.y && p.y <= self.bounds_max.y
    }

    pub fn count_cylinders(&self) -> usize {
        self.surfaces
            .iter()
            .filter(|s| matches!(s.primitive, Primitive::Cylinder { .. }))
            .count()
    }

    /// Nearest hit along a ray: `(distance, surface index or None for ground)`.
    pub fn raycast(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        candidates: &[usize],
        include_ground: bool,
    ) -> Option<(f64, Option<usize>)> {
        let mut best: Option<(f64, Option<usize>)> = None;
        for &i in candidates {
            if let Some(t) = self.surfaces[i].primitive.intersect(origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, Some(i)));
                }
            }
        }
        if include_ground && self.ground && dir.z < -1e-12 && origin.z > 0.0 {
            let t = -origin.z / dir.z;
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, None));
            }
        }
        best
    }

    /// Surfaces whose footprint comes within `range` of `p`.
    pub fn surfaces_near(&self, p: &Vector2<f64>, range: f64) -> Vec<usize> {
        self.surfaces
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                let (c, r) = s.primitive.footprint();
                (c - p).norm() <= range + r
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Dense samples of the trail centerline, used as a keep-out skeleton.
pub fn trail_skeleton() -> Vec<Vector2<f64>> {
    let h = TRAIL_HALF_SIDE;
    let corners = [
        Vector2::new(-h, -h),
        Vector2::new(h, -h),
        Vector2::new(h, h),
        Vector2::new(-h, h),
    ];
    let mut out = Vec::new();
    for k in 0..4 {
        let a = corners[k];
        let b = corners[(k + 1) % 4];
        let n = 160;
        for i in 0..n {
            out.push(a + (b - a) * (i as f64 / n as f64));
        }
    }
    out
}

fn distance_to_skeleton(p: &Vector2<f64>, skeleton: &[Vector2<f64>]) -> f64 {
    skeleton.iter().map(|s| (s - p).norm()).fold(f64::INFINITY, f64::min)
}

/// Deterministically builds the world for `(seed, scenario)`.
pub fn generate_world(seed: u64, scenario: Scenario) -> WorldModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match scenario {
        Scenario::Tunnel => 1,
        Scenario::Forest => 2,
    });
    match scenario {
        Scenario::Forest => forest(seed, &mut rng),
        Scenario::Tunnel => tunnel(seed, &mut rng),
    }
}

fn forest(seed: u64, rng: &mut ChaCha8Rng) -> WorldModel {
    let skeleton = trail_skeleton();
    let e = FOREST_HALF_EXTENT;
    let mut surfaces = Vec::new();
    let mut trees: Vec<Vector2<f64>> = Vec::new();
    let mut attempts = 0;
    while trees.len() < FOREST_TREES && attempts < 50_000 {
        attempts += 1;
        let p = Vector2::new(rng.random_range(-e..e), rng.random_range(-e..e));
        if distance_to_skeleton(&p, &skeleton) < 3.0 || trees.iter().any(|t| (t - p).norm() < 2.0) {
            continue;
        }
        trees.push(p);
        surfaces.push(Surface {
            primitive: Primitive::Cylinder {
                center: p,
                radius: rng.random_range(0.15..0.45),
                z_min: 0.0,
                z_max: rng.random_range(6.0..14.0),
            },
            reflectivity: REFLECTIVITY_SCALE * rng.random_range(0.6..1.4),
        });
    }
    let mut placed = 0;
    while placed < FOREST_BOULDERS {
        let p = Vector2::new(rng.random_range(-e..e), rng.random_range(-e..e));
        if distance_to_skeleton(&p, &skeleton) < 3.5 || trees.iter().any(|t| (t - p).norm() < 2.0) {
            continue;
        }
        let half = Vector3::new(rng.random_range(0.4..1.3), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));
        surfaces.push(Surface {
            primitive: Primitive::Box {
                center: Vector3::new(p.x, p.y, half.z),
                half_extents: half,
                yaw: rng.random_range(0.0..std::f64::consts::PI),
            },
            reflectivity: REFLECTIVITY_SCALE * rng.random_range(0.8..1.6),
        });
        placed += 1;
    }
    WorldModel {
        scenario: Scenario::Forest,
        seed,
        surfaces,
        ground: true,
        ground_reflectivity: 0.3 * REFLECTIVITY_SCALE,
        bounds_min: Vector2::new(-e, -e),
        bounds_max: Vector2::new(e, e),
    }
}

fn vertical_quad(a: Vector2<f64>, b: Vector2<f64>, height: f64) -> Primitive {
    Primitive::Quad {
        origin: Vector3::new(a.x, a.y, 0.0),
        u: Vector3::new(b.x - a.x, b.y - a.y, 0.0),
        v: Vector3::new(0.0, 0.0, height),
    }
}

/// Builds a rough wall from `a` to `b` out of jittered segments joined by
/// short steps. `normal` points into the corridor. `gaps` (left open) and
/// `smooth` (low jitter) are intervals of arc length measured from the
/// wall midpoint.
fn rough_wall(
    a: Vector2<f64>,
    b: Vector2<f64>,
    normal: Vector2<f64>,
    gaps: &[(f64, f64)],
    smooth: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Surface>,
) {
    let len = (b - a).norm();
    let dir = (b - a) / len;
    let half = 0.5 * len;
    let mut s = 0.0;
    let mut prev_offset: Option<f64> = None;
    while s < len - 1e-9 {
        let seg = rng.random_range(2.0..4.0f64).min(len - s);
        let c0 = s - half;
        let c1 = s + seg - half;
        let mid = 0.5 * (c0 + c1);
        let is_smooth = smooth.iter().any(|(lo, hi)| mid >= *lo && mid <= *hi);
        let jitter = if is_smooth { 0.05 } else { 0.8 };
        let offset = rng.random_range(-jitter..jitter);
        let refl = REFLECTIVITY_SCALE * rng.random_range(0.5..0.9);
        let in_gap = gaps.iter().any(|(lo, hi)| c1 > *lo && c0 < *hi);
        if !in_gap {
            let p0 = a + dir * s + normal * offset;
            let p1 = a + dir * (s + seg) + normal * offset;
            out.push(Surface {
                primitive: vertical_quad(p0, p1, TUNNEL_WALL_HEIGHT),
                reflectivity: refl,
            });
            if let Some(po) = prev_offset {
                let q0 = a + dir * s + normal * po;
                out.push(Surface {
                    primitive: vertical_quad(q0, p0, TUNNEL_WALL_HEIGHT),
                    reflectivity: refl,
                });
            }
            prev_offset = Some(offset);
        } else {
            prev_offset = None;
        }
        s += seg;
    }
}

fn tunnel(seed: u64, rng: &mut ChaCha8Rng) -> WorldModel {
    let h = TRAIL_HALF_SIDE;
    let hw = TUNNEL_WIDTH / 2.0;
    let inner = h - hw;
    let outer = h + hw;
    let mut surfaces = Vec::new();
    // (start corner, end corner, inward normal) per side, counter-clockwise.
    let sides = [
        (Vector2::new(-1.0, -1.0), Vector2::new(1.0, -1.0), Vector2::new(0.0, 1.0)),
        (Vector2::new(1.0, -1.0), Vector2::new(1.0, 1.0), Vector2::new(-1.0, 0.0)),
        (Vector2::new(1.0, 1.0), Vector2::new(-1.0, 1.0), Vector2::new(0.0, -1.0)),
        (Vector2::new(-1.0, 1.0), Vector2::new(-1.0, -1.0), Vector2::new(1.0, 0.0)),
    ];
    for (side, (a, b, n)) in sides.iter().enumerate() {
        let dir = (b - a).normalize();
        // one side tunnel per side, one feature-poor stretch on every other side
        let gap_center = rng.random_range(-0.4..0.4) * inner;
        let gaps = [(gap_center - 2.0, gap_center + 2.0)];
        let smooth: Vec<(f64, f64)> = if side % 2 == 0 {
            let lo = rng.random_range(-0.8..0.1) * inner;
            vec![(lo, lo + 14.0)]
        } else {
            Vec::new()
        };
        // outer wall faces inward (normal n), inner wall faces outward (-n)
        rough_wall(a * outer, b * outer, *n, &gaps, &smooth, rng, &mut surfaces);
        rough_wall(a * inner, b * inner, -*n, &[], &smooth, rng, &mut surfaces);

        // side tunnel stub behind the gap
        let mid_outer = (a + b) * 0.5 * outer;
        let depth = rng.random_range(6.0..10.0);
        let g0 = mid_outer + dir * gaps[0].0;
        let g1 = mid_outer + dir * gaps[0].1;
        let back = -*n * depth;
        let refl = REFLECTIVITY_SCALE * 0.7;
        for (p, q) in [(g0, g0 + back), (g1, g1 + back), (g0 + back, g1 + back)] {
            surfaces.push(Surface {
                primitive: vertical_quad(p, q, TUNNEL_WALL_HEIGHT),
                reflectivity: refl,
            });
        }

        // equipment and pillars against the walls, away from smooth stretches
        let n_features = rng.random_range(4..8);
        for _ in 0..n_features {
            let c = rng.random_range(-(inner - 3.0)..(inner - 3.0));
            let against_outer = rng.random_bool(0.5);
            let half = Vector3::new(rng.random_range(0.3..1.0), rng.random_range(0.25..0.45), rng.random_range(0.4..1.5));
            let blocked = smooth.iter().chain(gaps.iter()).any(|(lo, hi)| c >= lo - 3.0 && c <= hi + 3.0);
            if blocked {
                continue;
            }
            let (wall_dist, inward) = if against_outer { (outer, *n) } else { (inner, -*n) };
            let base = (a + b) * 0.5 * wall_dist + dir * c;
            let center = base + inward * (half.y + 0.45);
            surfaces.push(Surface {
                primitive: Primitive::Box {
                    center: Vector3::new(center.x, center.y, half.z),
                    half_extents: half,
                    yaw: dir.y.atan2(dir.x),
                },
                reflectivity: REFLECTIVITY_SCALE * rng.random_range(1.0..2.0),
            });
        }
    }
    let ext = outer + 15.0;
    WorldModel {
        scenario: Scenario::Tunnel,
        seed,
        surfaces,
        ground: true,
        ground_reflectivity: 0.3 * REFLECTIVITY_SCALE,
        bounds_min: Vector2::new(-ext, -ext),
        bounds_max: Vector2::new(ext, ext),
    }
}
