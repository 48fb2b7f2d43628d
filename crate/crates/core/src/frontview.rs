//! Front-view XYZ map: each lidar return is binned by azimuth and elevation,
//! keeping height, range and intensity of the nearest return per cell.

use thiserror::Error;

use crate::cloudio::PointCloud;
use crate::geometry::{Box3D, Rect2D};

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("azimuth is undefined for a point on the vertical axis")]
    UndefinedAzimuth,
    #[error("invalid projection config: {0}")]
    InvalidConfig(String),
    #[error("crop rectangle has zero area")]
    ZeroArea,
    #[error("crop rectangle lies outside the map")]
    OutOfBounds,
}

/// Angular resolution and field of view of the front-view grid (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    pub delta_theta: f64,
    pub delta_phi: f64,
    pub theta_range: [f64; 2],
    pub phi_range: [f64; 2],
}

impl Default for ProjectionConfig {
    /// 0.4° cells over a 90° x 26.9° HDL-64 style field of view.
    fn default() -> Self {
        ProjectionConfig {
            delta_theta: 0.4f64.to_radians(),
            delta_phi: 0.4f64.to_radians(),
            theta_range: [-45f64.to_radians(), 45f64.to_radians()],
            phi_range: [-24.9f64.to_radians(), 2f64.to_radians()],
        }
    }
}

/// `floor` that absorbs the last-bit error of quotients such as
/// `(-π/2) / (π/180)`.
fn floor_index(x: f64) -> i64 {
    (x + 1e-9).floor() as i64
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<(), ProjectionError> {
        let ok = self.delta_theta > 0.0
            && self.delta_phi > 0.0
            && self.theta_range[0] < self.theta_range[1]
            && self.phi_range[0] < self.phi_range[1]
            && [self.delta_theta, self.delta_phi]
                .iter()
                .chain(&self.theta_range)
                .chain(&self.phi_range)
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(ProjectionError::InvalidConfig(format!("{self:?}")))
        }
    }

    fn col_offset(&self) -> i64 {
        floor_index(self.theta_range[0] / self.delta_theta)
    }

    fn row_offset(&self) -> i64 {
        floor_index(self.phi_range[0] / self.delta_phi)
    }

    pub fn cols(&self) -> usize {
        (floor_index(self.theta_range[1] / self.delta_theta) - self.col_offset() + 1) as usize
    }

    pub fn rows(&self) -> usize {
        (floor_index(self.phi_range[1] / self.delta_phi) - self.row_offset() + 1) as usize
    }

    /// Unbounded `(row, col)` cell of a point; may fall outside the grid.
    pub fn raw_index(&self, p: [f64; 3]) -> Result<(i64, i64), ProjectionError> {
        if p[0] == 0.0 && p[1] == 0.0 {
            return Err(ProjectionError::UndefinedAzimuth);
        }
        let theta = p[1].atan2(p[0]);
        let phi = p[2].atan2(p[0].hypot(p[1]));
        Ok((
            floor_index(phi / self.delta_phi) - self.row_offset(),
            floor_index(theta / self.delta_theta) - self.col_offset(),
        ))
    }

    /// Grid cell `(row, col)` of a point, or `None` when it falls outside the
    /// configured angular ranges.
    pub fn project_point(&self, p: [f64; 3]) -> Result<Option<(usize, usize)>, ProjectionError> {
        let (r, c) = self.raw_index(p)?;
        if r >= 0 && c >= 0 && (r as usize) < self.rows() && (c as usize) < self.cols() {
            Ok(Some((r as usize, c as usize)))
        } else {
            Ok(None)
        }
    }

    /// Bounding rectangle (x = column, y = row, cell units) of the projected
    /// box corners. `None` if a corner has no azimuth.
    pub fn project_box(&self, b: &Box3D) -> Option<Rect2D> {
        let mut lo = [i64::MAX; 2];
        let mut hi = [i64::MIN; 2];
        for corner in b.corners() {
            let (r, c) = self.raw_index(corner).ok()?;
            lo = [lo[0].min(c), lo[1].min(r)];
            hi = [hi[0].max(c), hi[1].max(r)];
        }
        Some(Rect2D::axis_aligned(
            [lo[0] as f64, lo[1] as f64],
            [(hi[0] + 1) as f64, (hi[1] + 1) as f64],
        ))
    }
}

/// Dense `rows x cols` grid with height, distance and intensity planes and
/// an occupancy mask. Empty cells hold 0 in every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontViewMap {
    pub rows: usize,
    pub cols: usize,
    pub height: Vec<f64>,
    pub distance: Vec<f64>,
    pub intensity: Vec<f64>,
    pub occupied: Vec<bool>,
}

impl FrontViewMap {
    pub fn empty(rows: usize, cols: usize) -> Self {
        FrontViewMap {
            rows,
            cols,
            height: vec![0.0; rows * cols],
            distance: vec![0.0; rows * cols],
            intensity: vec![0.0; rows * cols],
            occupied: vec![false; rows * cols],
        }
    }

    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn channels(&self, r: usize, c: usize) -> [f64; 3] {
        let i = self.idx(r, c);
        [self.height[i], self.distance[i], self.intensity[i]]
    }

    pub fn is_occupied(&self, r: usize, c: usize) -> bool {
        self.occupied[self.idx(r, c)]
    }
}

/// Projects every in-range point; when several land in one cell the
/// nearest (then lowest index) wins.
pub fn build_map(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<FrontViewMap, ProjectionError> {
    cfg.validate()?;
    let mut map = FrontViewMap::empty(cfg.rows(), cfg.cols());
    for p in &cloud.points {
        let Ok(Some((r, c))) = cfg.project_point(p.xyz()) else {
            continue;
        };
        let d = (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
        let i = map.idx(r, c);
        if !map.occupied[i] || d < map.distance[i] {
            map.occupied[i] = true;
            map.height[i] = p.z;
            map.distance[i] = d;
            map.intensity[i] = p.intensity;
        }
    }
    Ok(map)
}

/// A resampled window of a [`FrontViewMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `(height, distance, intensity)`.
    pub data: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

impl Patch {
    pub fn occupied_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// Flattened `rows x cols x 3` values, row-major, channels last.
    pub fn to_hwc(&self) -> Vec<f64> {
        self.data.iter().flat_map(|c| c.iter().copied()).collect()
    }
}

/// Nearest-neighbour resample of the axis-aligned window `rect`
/// (x = column, y = row) to `out_rows x out_cols`. Samples that fall off the
/// map are unoccupied.
pub fn crop_patch(
    map: &FrontViewMap,
    rect: &Rect2D,
    out_rows: usize,
    out_cols: usize,
) -> Result<Patch, ProjectionError> {
    let (lo, hi) = rect.min_max();
    if !(rect.size[0] > 0.0 && rect.size[1] > 0.0) || out_rows == 0 || out_cols == 0 {
        return Err(ProjectionError::ZeroArea);
    }
    if hi[0] <= 0.0 || hi[1] <= 0.0 || lo[0] >= map.cols as f64 || lo[1] >= map.rows as f64 {
        return Err(ProjectionError::OutOfBounds);
    }
    let mut data = Vec::with_capacity(out_rows * out_cols);
    let mut mask = Vec::with_capacity(out_rows * out_cols);
    let step_r = rect.size[1] / out_rows as f64;
    let step_c = rect.size[0] / out_cols as f64;
    for i in 0..out_rows {
        let r = (lo[1] + (i as f64 + 0.5) * step_r).floor();
        for j in 0..out_cols {
            let c = (lo[0] + (j as f64 + 0.5) * step_c).floor();
            if r >= 0.0 && c >= 0.0 && (r as usize) < map.rows && (c as usize) < map.cols {
                let (r, c) = (r as usize, c as usize);
                if map.is_occupied(r, c) {
                    data.push(map.channels(r, c));
                    mask.push(true);
                    continue;
                }
            }
            data.push([0.0; 3]);
            mask.push(false);
        }
    }
    Ok(Patch { rows: out_rows, cols: out_cols, data, mask })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Height,
    Distance,
    Intensity,
    Occupancy,
}

/// Binary PGM (P5) of one channel, highest elevation row at the top,
/// occupied values stretched to 1..=255 and empty cells black.
pub fn render_pgm(map: &FrontViewMap, channel: Channel) -> Vec<u8> {
    let plane: Vec<f64> = match channel {
        Channel::Height => map.height.clone(),
        Channel::Distance => map.distance.clone(),
        Channel::Intensity => map.intensity.clone(),
        Channel::Occupancy => map.occupied.iter().map(|&o| f64::from(u8::from(o))).collect(),
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, &o) in plane.iter().zip(&map.occupied) {
        if o {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", map.cols, map.rows).into_bytes();
    for r in (0..map.rows).rev() {
        for c in 0..map.cols {
            let i = map.idx(r, c);
            let px = if map.occupied[i] {
                1 + ((plane[i] - lo) / span * 254.0).round() as u8
            } else {
                0
            };
            out.push(px);
        }
    }
    out
}
