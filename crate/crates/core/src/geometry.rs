//! Rotated box algebra: containment, BEV/3D/2D IoU, a Monte-Carlo IoU
//! oracle and greedy NMS.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frontview::ProjectionConfig;
use crate::uvpm::Proposal;

/// Intersections with area below this are treated as empty (m²).
pub const AREA_EPS: f64 = 1e-12;

/// Wrap an angle to `[-π, π)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let w = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// An oriented 3D box: center, full extents along its local axes, and a yaw
/// about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    /// Builds a box, normalising the yaw. Panics on non-positive extents.
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        assert!(
            size.iter().all(|&d| d > 0.0 && d.is_finite()),
            "box extents must be positive, got {size:?}"
        );
        Box3D { center, size, yaw: normalize_yaw(yaw) }
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn z_min(&self) -> f64 {
        self.center[2] - self.size[2] / 2.0
    }

    pub fn z_max(&self) -> f64 {
        self.center[2] + self.size[2] / 2.0
    }

    /// Express a world point in the box frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Boundary-inclusive containment test.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        (0..3).all(|i| l[i].abs() <= self.size[i] / 2.0)
    }

    /// Footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hx = self.size[0] / 2.0;
        let hy = self.size[1] / 2.0;
        let local = [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]];
        local.map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    /// The eight corners: bottom face first, then top face.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let bev = self.bev_corners();
        let mut out = [[0.0; 3]; 8];
        for (i, q) in bev.iter().enumerate() {
            out[i] = [q[0], q[1], self.z_min()];
            out[i + 4] = [q[0], q[1], self.z_max()];
        }
        out
    }

    /// Same box scaled by `factor` on every axis about its center.
    pub fn scaled(&self, factor: f64) -> Box3D {
        Box3D { size: self.size.map(|d| d * factor), ..*self }
    }

    pub fn footprint(&self) -> Rect2D {
        Rect2D {
            center: [self.center[0], self.center[1]],
            size: [self.size[0], self.size[1]],
            angle: self.yaw,
        }
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in self.corners() {
            for i in 0..3 {
                lo[i] = lo[i].min(c[i]);
                hi[i] = hi[i].max(c[i]);
            }
        }
        (lo, hi)
    }
}

/// A possibly rotated rectangle in a 2D plane (BEV footprint or front-view
/// map coordinates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect2D {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub angle: f64,
}

impl Rect2D {
    pub fn axis_aligned(min: [f64; 2], max: [f64; 2]) -> Self {
        Rect2D {
            center: [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0],
            size: [max[0] - min[0], max[1] - min[1]],
            angle: 0.0,
        }
    }

    pub fn area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.angle.sin_cos();
        let hx = self.size[0] / 2.0;
        let hy = self.size[1] / 2.0;
        let local = [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]];
        local.map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    /// Min and max corners of the unrotated rectangle.
    pub fn min_max(&self) -> ([f64; 2], [f64; 2]) {
        let h = [self.size[0] / 2.0, self.size[1] / 2.0];
        (
            [self.center[0] - h[0], self.center[1] - h[1]],
            [self.center[0] + h[0], self.center[1] + h[1]],
        )
    }
}

/// Signed shoelace area; positive for counter-clockwise order.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    acc / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clipping of `subject` against the convex,
/// counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let denom = d1 - d2;
    if denom.abs() < f64::MIN_POSITIVE {
        return q;
    }
    let t = d1 / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the intersection of two rotated rectangles.
pub fn rect_intersection_area(a: &Rect2D, b: &Rect2D) -> f64 {
    let inter = clip_convex(&a.corners(), &b.corners());
    let area = polygon_area(&inter).abs();
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

fn ratio(inter: f64, union: f64) -> f64 {
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of two rotated rectangles.
pub fn iou_2d(a: &Rect2D, b: &Rect2D) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = rect_intersection_area(a, b);
    ratio(inter, a.area() + b.area() - inter)
}

/// Bird's-eye-view IoU of the yaw-rotated footprints.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    iou_2d(&a.footprint(), &b.footprint())
}

/// Full 3D IoU: footprint intersection times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let dz = (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = rect_intersection_area(&a.footprint(), &b.footprint()) * dz;
    ratio(inter, a.volume() + b.volume() - inter)
}

/// Monte-Carlo 3D IoU: uniform samples in the joint axis-aligned bounds,
/// ratio of samples in both boxes to samples in either.
pub fn iou_3d_oracle(a: &Box3D, b: &Box3D, n_samples: usize, seed: u64) -> f64 {
    assert!(n_samples > 0, "n_samples must be positive");
    let (alo, ahi) = a.aabb();
    let (blo, bhi) = b.aabb();
    let lo: [f64; 3] = std::array::from_fn(|i| alo[i].min(blo[i]));
    let hi: [f64; 3] = std::array::from_fn(|i| ahi[i].max(bhi[i]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut both = 0u64;
    let mut either = 0u64;
    for _ in 0..n_samples {
        let p: [f64; 3] = std::array::from_fn(|i| lo[i] + (hi[i] - lo[i]) * rng.random::<f64>());
        let in_a = a.contains(p);
        let in_b = b.contains(p);
        both += u64::from(in_a && in_b);
        either += u64::from(in_a || in_b);
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Which overlap measure NMS and matching use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IouKind {
    Bev,
    ThreeD,
    /// Axis-aligned rectangles of the boxes projected into the front view.
    FrontView(ProjectionConfig),
}

impl IouKind {
    pub fn iou(&self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouKind::Bev => iou_bev(a, b),
            IouKind::ThreeD => iou_3d(a, b),
            IouKind::FrontView(cfg) => match (cfg.project_box(a), cfg.project_box(b)) {
                (Some(ra), Some(rb)) => iou_2d(&ra, &rb),
                _ => 0.0,
            },
        }
    }
}

/// Greedy NMS. Output is sorted by descending score; equal scores keep
/// input order.
pub fn nms(proposals: &[Proposal], iou_threshold: f64, kind: IouKind) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&i, &j| {
        proposals[j]
            .objectness
            .total_cmp(&proposals[i].objectness)
            .then(i.cmp(&j))
    });
    let mut suppressed = vec![false; proposals.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(proposals[i].clone());
        for &j in &order[rank + 1..] {
            if !suppressed[j] && kind.iou(&proposals[i].bbox, &proposals[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
