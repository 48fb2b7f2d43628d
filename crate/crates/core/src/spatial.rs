//! Uniform ground-plane binning for neighbourhood and box queries.

use std::collections::HashMap;

use crate::cloudio::Point;
use crate::geometry::Box3D;

/// Buckets point indices by `(floor(x / cell), floor(y / cell))`.
#[derive(Debug, Clone)]
pub struct GridIndex<'a> {
    points: &'a [Point],
    cell: f64,
    bins: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Point], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut bins: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            bins.entry(Self::key(cell, p.x, p.y)).or_default().push(i);
        }
        GridIndex { points, cell, bins }
    }

    fn key(cell: f64, x: f64, y: f64) -> (i64, i64) {
        ((x / cell).floor() as i64, (y / cell).floor() as i64)
    }

    pub fn points(&self) -> &'a [Point] {
        self.points
    }

    /// Indices (ascending) of points whose xy lies in the given rectangle.
    fn candidates(&self, lo: [f64; 2], hi: [f64; 2]) -> Vec<usize> {
        let (i0, j0) = Self::key(self.cell, lo[0], lo[1]);
        let (i1, j1) = Self::key(self.cell, hi[0], hi[1]);
        let mut out = Vec::new();
        for i in i0..=i1 {
            for j in j0..=j1 {
                if let Some(v) = self.bins.get(&(i, j)) {
                    out.extend_from_slice(v);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Indices (ascending) of points within Euclidean distance `radius` of `center`.
    pub fn within_radius(&self, center: [f64; 3], radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        self.candidates(
            [center[0] - radius, center[1] - radius],
            [center[0] + radius, center[1] + radius],
        )
        .into_iter()
        .filter(|&i| {
            let p = &self.points[i];
            let d = [p.x - center[0], p.y - center[1], p.z - center[2]];
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r2
        })
        .collect()
    }

    /// Indices (ascending) of points inside `b` (boundary inclusive).
    pub fn inside_box(&self, b: &Box3D) -> Vec<usize> {
        let (lo, hi) = b.aabb();
        self.candidates([lo[0], lo[1]], [hi[0], hi[1]])
            .into_iter()
            .filter(|&i| b.contains(self.points[i].xyz()))
            .collect()
    }

    pub fn count_inside(&self, b: &Box3D) -> usize {
        self.inside_box(b).len()
    }
}
