//! Uniform hash grid for fixed-radius neighbor queries.

use std::collections::HashMap;

use nalgebra::Vector3;

type CellKey = (i64, i64, i64);

/// Buckets point indices by cubic cell. Queries with a radius no larger
/// than the cell size only need to visit the 27 surrounding cells.
#[derive(Debug, Clone)]
pub struct PointGrid<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<CellKey, Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut cells: HashMap<CellKey, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, cell)).or_default().push(i);
        }
        Self { points, cell, cells }
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        self.points
    }

    fn for_each_candidate(&self, q: &Vector3<f64>, radius: f64, mut f: impl FnMut(usize)) {
        let reach = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = key(q, self.cell);
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        bucket.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }

    /// Indices within `radius` of `q`, sorted ascending.
    pub fn within(&self, q: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        self.for_each_candidate(q, radius, |i| {
            if (self.points[i] - q).norm_squared() <= r2 {
                out.push(i);
            }
        });
        out.sort_unstable();
        out
    }

    pub fn any_within(&self, q: &Vector3<f64>, radius: f64) -> bool {
        let r2 = radius * radius;
        let mut found = false;
        self.for_each_candidate(q, radius, |i| {
            found |= (self.points[i] - q).norm_squared() <= r2;
        });
        found
    }

    /// Nearest point within `radius`; ties resolve to the lower index.
    pub fn nearest_within(&self, q: &Vector3<f64>, radius: f64) -> Option<(usize, f64)> {
        let r2 = radius * radius;
        let mut best: Option<(usize, f64)> = None;
        self.for_each_candidate(q, radius, |i| {
            let d2 = (self.points[i] - q).norm_squared();
            if d2 <= r2 {
                match best {
                    Some((bi, bd)) if d2 > bd || (d2 == bd && i > bi) => {}
                    _ => best = Some((i, d2)),
                }
            }
        });
        best.map(|(i, d2)| (i, d2.sqrt()))
    }
}

fn key(p: &Vector3<f64>, cell: f64) -> CellKey {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}
