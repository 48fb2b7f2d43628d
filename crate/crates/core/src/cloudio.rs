//! Point cloud ingestion (KITTI Velodyne `.bin`), synthetic labelled scenes,
//! and the text formats used to persist detections and truth boxes.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::geometry::{iou_bev, Box3D};
use crate::uvpm::Proposal;

pub const DETECTION_HEADER: &str = "# wsdet-detections v1";
pub const TRUTH_HEADER: &str = "# wsdet-truth v1";
/// Class names indexed by position in `Proposal::class_probs`.
pub const CLASS_NAMES: [&str; 1] = ["Car"];
/// Car prior footprint (length, width, height) in meters.
pub const CAR_PRIOR: [f64; 3] = [3.9, 1.6, 1.56];
/// Focal length used to turn box heights into image-space pixels.
pub const FOCAL_PX: f64 = 721.5;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed velodyne file {path}: {len} bytes is not a multiple of 16")]
    Malformed { path: PathBuf, len: usize },
    #[error("{path}: expected header `{expected}`, found `{found}`")]
    Schema {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("invalid scene parameters: {0}")]
    InvalidSpec(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CloudError + '_ {
    move |source| CloudError::Io { path: path.to_path_buf(), source }
}

/// One lidar return in the vehicle frame (x forward, y left, z up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_id: impl Into<String>) -> Self {
        PointCloud { points, frame_id: frame_id.into() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count_inside(&self, b: &Box3D) -> usize {
        self.points.iter().filter(|p| b.contains(p.xyz())).count()
    }

    /// Rigid rotation about the vertical axis through the origin.
    pub fn rotated(&self, yaw: f64) -> PointCloud {
        let (s, c) = yaw.sin_cos();
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| Point::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z, p.intensity))
                .collect(),
            frame_id: self.frame_id.clone(),
        }
    }
}

/// Decodes a KITTI Velodyne scan: little-endian `f32` quadruples
/// `(x, y, z, intensity)`.
pub fn read_velodyne_bin(path: impl AsRef<Path>) -> Result<PointCloud, CloudError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let points = decode_velodyne(&bytes).ok_or_else(|| CloudError::Malformed {
        path: path.to_path_buf(),
        len: bytes.len(),
    })?;
    let frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PointCloud::new(points, frame_id))
}

/// Decodes raw Velodyne bytes; `None` when the length is not a multiple of 16.
pub fn decode_velodyne(bytes: &[u8]) -> Option<Vec<Point>> {
    if !bytes.len().is_multiple_of(16) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(16)
            .map(|rec| {
                let f = |i: usize| {
                    f64::from(f32::from_le_bytes([rec[4 * i], rec[4 * i + 1], rec[4 * i + 2], rec[4 * i + 3]]))
                };
                Point::new(f(0), f(1), f(2), f(3))
            })
            .collect(),
    )
}

pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_velodyne_bin(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), CloudError> {
    atomic_write(path.as_ref(), &encode_velodyne(cloud))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CloudError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Optional image-space annotations used for difficulty binning.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Annotations {
    pub height_px: f64,
    /// 0 = fully visible, 1 = partly occluded, 2 = largely occluded.
    pub occlusion: u8,
    pub truncation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthBox {
    pub bbox: Box3D,
    pub class: String,
    pub annotations: Option<Annotations>,
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub n_objects: usize,
    /// Region for object centers, `((x_min, x_max), (y_min, y_max))`, vehicle frame.
    pub ground_extent: ([f64; 2], [f64; 2]),
    /// Minimum number of cloud points inside every planted box.
    pub points_per_object: usize,
    /// Gaussian jitter applied to object points (m).
    pub noise_sigma: f64,
    pub rng_seed: u64,
    /// Uniformly scattered ground returns.
    pub ground_points: usize,
    pub ground_z: f64,
    /// Angular sampling pitch (rad) that sets how many returns an object gets.
    pub angular_resolution: f64,
    /// Expected returns per angular cell of an object's silhouette.
    pub fill: f64,
    /// All object corners stay within this azimuth of the x axis (rad).
    pub max_azimuth: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_objects: 3,
            ground_extent: ([8.0, 40.0], [-18.0, 18.0]),
            points_per_object: 50,
            noise_sigma: 0.02,
            rng_seed: 42,
            ground_points: 1500,
            ground_z: -1.78,
            angular_resolution: 0.4f64.to_radians(),
            fill: 2.0,
            max_azimuth: 40f64.to_radians(),
        }
    }
}

impl SceneSpec {
    pub fn with_seed(seed: u64) -> Self {
        SceneSpec { rng_seed: seed, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub truth: Vec<TruthBox>,
}

/// Angular (azimuth, elevation) bounds of a box as seen from the origin.
fn angular_bounds(b: &Box3D) -> ([f64; 2], [f64; 2]) {
    let mut az = [f64::INFINITY, f64::NEG_INFINITY];
    let mut el = [f64::INFINITY, f64::NEG_INFINITY];
    for c in b.corners() {
        let a = c[1].atan2(c[0]);
        let e = c[2].atan2(c[0].hypot(c[1]));
        az = [az[0].min(a), az[1].max(a)];
        el = [el[0].min(e), el[1].max(e)];
    }
    (az, el)
}

/// Places boxes of jittered car size on the ground, fills each with a number
/// of returns proportional to its angular footprint, and scatters sparse
/// ground returns. Pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, CloudError> {
    if spec.points_per_object == 0 {
        return Err(CloudError::InvalidSpec("points_per_object must be positive".into()));
    }
    if spec.angular_resolution.is_nan() || spec.angular_resolution <= 0.0 || spec.fill.is_nan() || spec.fill <= 0.0 {
        return Err(CloudError::InvalidSpec("angular_resolution and fill must be positive".into()));
    }
    let ([x0, x1], [y0, y1]) = spec.ground_extent;
    if !(x0 < x1 && y0 < y1) {
        return Err(CloudError::InvalidSpec("ground_extent is degenerate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(spec.n_objects);
    for k in 0..spec.n_objects {
        let mut placed = None;
        for _ in 0..10_000 {
            let size = CAR_PRIOR.map(|d| d * rng.random_range(0.9..=1.1));
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let cx = rng.random_range(x0..x1);
            let cy = rng.random_range(y0..y1);
            let b = Box3D::new([cx, cy, spec.ground_z + size[2] / 2.0], size, yaw);
            let in_view = b
                .bev_corners()
                .iter()
                .all(|q| q[0] > 1.0 && q[1].atan2(q[0]).abs() <= spec.max_azimuth);
            // keep at least a meter of free space around every object
            let inflated = Box3D::new(b.center, [size[0] + 2.0, size[1] + 2.0, size[2]], yaw);
            let clear = boxes.iter().all(|o| iou_bev(&inflated, o) == 0.0);
            if in_view && clear {
                placed = Some(b);
                break;
            }
        }
        let b = placed.ok_or_else(|| {
            CloudError::InvalidSpec(format!("could not place object {k} inside the ground extent"))
        })?;
        boxes.push(b);
    }

    let mut points = Vec::new();
    for b in &boxes {
        let (az, el) = angular_bounds(b);
        let cells = ((az[1] - az[0]) / spec.angular_resolution).ceil()
            * ((el[1] - el[0]) / spec.angular_resolution).ceil();
        let target = spec.points_per_object.max((spec.fill * cells).ceil() as usize);
        let (s, c) = b.yaw.sin_cos();
        let mut inside = 0usize;
        let mut emitted = 0usize;
        while inside < spec.points_per_object || emitted < target {
            let l: [f64; 3] = std::array::from_fn(|i| b.size[i] * (rng.random::<f64>() - 0.5));
            let noise: [f64; 3] = std::array::from_fn(|_| spec.noise_sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng));
            let p = [
                b.center[0] + c * l[0] - s * l[1] + noise[0],
                b.center[1] + s * l[0] + c * l[1] + noise[1],
                b.center[2] + l[2] + noise[2],
            ];
            inside += usize::from(b.contains(p));
            emitted += 1;
            points.push(Point::new(p[0], p[1], p[2], rng.random_range(0.2..0.9)));
        }
    }
    for _ in 0..spec.ground_points {
        let x = rng.random_range(2.0..70.0);
        let y = rng.random_range(-35.0..35.0);
        let z = spec.ground_z + spec.noise_sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        points.push(Point::new(x, y, z, rng.random_range(0.0..0.3)));
    }

    let truth = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| TruthBox {
            bbox: *b,
            class: CLASS_NAMES[0].to_string(),
            annotations: Some(annotate(b, i, &boxes, spec.max_azimuth)),
        })
        .collect();
    Ok(SyntheticScene {
        cloud: PointCloud::new(points, format!("synthetic_{:06}", spec.rng_seed)),
        truth,
    })
}

/// Image-style annotations: pixel height from depth, occlusion from angular
/// overlap with nearer boxes, truncation from the part outside the view.
fn annotate(b: &Box3D, idx: usize, all: &[Box3D], max_azimuth: f64) -> Annotations {
    let depth = b.center[0].max(1e-3);
    let (az, el) = angular_bounds(b);
    let area = (az[1] - az[0]) * (el[1] - el[0]);
    let mut covered: f64 = 0.0;
    for (j, o) in all.iter().enumerate() {
        if j == idx || o.center[0].hypot(o.center[1]) >= b.center[0].hypot(b.center[1]) {
            continue;
        }
        let (oaz, oel) = angular_bounds(o);
        let w = (az[1].min(oaz[1]) - az[0].max(oaz[0])).max(0.0);
        let h = (el[1].min(oel[1]) - el[0].max(oel[0])).max(0.0);
        covered += w * h;
    }
    let frac = if area > 0.0 { (covered / area).min(1.0) } else { 0.0 };
    let occlusion = if frac == 0.0 {
        0
    } else if frac < 0.5 {
        1
    } else {
        2
    };
    let outside = (az[1] - max_azimuth).max(0.0) + (-max_azimuth - az[0]).max(0.0);
    let truncation = if az[1] > az[0] { (outside / (az[1] - az[0])).min(1.0) } else { 0.0 };
    Annotations { height_px: FOCAL_PX * b.size[2] / depth, occlusion, truncation }
}

fn class_name(index: usize) -> String {
    CLASS_NAMES
        .get(index)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{index}"))
}

/// Serialises detections: header line, then one line per proposal with
/// `class score cx cy cz dx dy dz yaw anchor p_1 .. p_L`.
pub fn format_detections(dets: &[Proposal]) -> String {
    let mut out = String::new();
    out.push_str(DETECTION_HEADER);
    out.push('\n');
    for d in dets {
        let best = d
            .class_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let b = &d.bbox;
        write!(
            out,
            "{} {} {} {} {} {} {} {} {} {}",
            class_name(best),
            d.objectness,
            b.center[0],
            b.center[1],
            b.center[2],
            b.size[0],
            b.size[1],
            b.size[2],
            b.yaw,
            d.source_anchor
        )
        .unwrap();
        for p in &d.class_probs {
            write!(out, " {p}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_detections(dets: &[Proposal], path: impl AsRef<Path>) -> Result<(), CloudError> {
    atomic_write(path.as_ref(), format_detections(dets).as_bytes())
}

fn check_header(path: &Path, text: &str, expected: &str) -> Result<(), CloudError> {
    let first = text.lines().next().unwrap_or("");
    if first.trim_end() != expected {
        return Err(CloudError::Schema {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: first.to_string(),
        });
    }
    Ok(())
}

fn parse_fields<'a>(
    path: &'a Path,
    line_no: usize,
    fields: &'a [&'a str],
) -> impl Fn(usize) -> Result<f64, CloudError> + 'a {
    move |i| {
        fields
            .get(i)
            .ok_or_else(|| CloudError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("missing column {i}"),
            })?
            .parse::<f64>()
            .map_err(|e| CloudError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("column {i}: {e}"),
            })
    }
}

pub fn parse_detections(path: &Path, text: &str) -> Result<Vec<Proposal>, CloudError> {
    check_header(path, text, DETECTION_HEADER)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = parse_fields(path, i + 1, &fields);
        if fields.len() < 11 {
            return Err(CloudError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected at least 11 columns, found {}", fields.len()),
            });
        }
        let size = [num(5)?, num(6)?, num(7)?];
        if !size.iter().all(|&d| d > 0.0) {
            return Err(CloudError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "box extents must be positive".into(),
            });
        }
        let anchor = fields[9].parse::<usize>().map_err(|e| CloudError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("anchor index: {e}"),
        })?;
        let probs = (10..fields.len()).map(&num).collect::<Result<Vec<_>, _>>()?;
        out.push(Proposal {
            bbox: Box3D { center: [num(2)?, num(3)?, num(4)?], size, yaw: num(8)? },
            objectness: num(1)?,
            class_probs: probs,
            source_anchor: anchor,
        });
    }
    Ok(out)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Proposal>, CloudError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_detections(path, &text)
}

/// Truth boxes: `class cx cy cz dx dy dz yaw height_px occlusion truncation`,
/// with `-` for missing annotations.
pub fn format_truth(truth: &[TruthBox]) -> String {
    let mut out = String::new();
    out.push_str(TRUTH_HEADER);
    out.push('\n');
    for t in truth {
        let b = &t.bbox;
        write!(
            out,
            "{} {} {} {} {} {} {} {}",
            t.class, b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw
        )
        .unwrap();
        match &t.annotations {
            Some(a) => writeln!(out, " {} {} {}", a.height_px, a.occlusion, a.truncation).unwrap(),
            None => out.push_str(" - - -\n"),
        }
    }
    out
}

pub fn write_truth(truth: &[TruthBox], path: impl AsRef<Path>) -> Result<(), CloudError> {
    atomic_write(path.as_ref(), format_truth(truth).as_bytes())
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<TruthBox>, CloudError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    check_header(path, &text, TRUTH_HEADER)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 11 {
            return Err(CloudError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 11 columns, found {}", fields.len()),
            });
        }
        let num = parse_fields(path, i + 1, &fields);
        let size = [num(4)?, num(5)?, num(6)?];
        if !size.iter().all(|&d| d > 0.0) {
            return Err(CloudError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "box extents must be positive".into(),
            });
        }
        let annotations = if fields[8] == "-" {
            None
        } else {
            let occlusion = fields[9].parse::<u8>().map_err(|e| CloudError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("occlusion: {e}"),
            })?;
            Some(Annotations { height_px: num(8)?, occlusion, truncation: num(10)? })
        };
        out.push(TruthBox {
            bbox: Box3D { center: [num(1)?, num(2)?, num(3)?], size, yaw: num(7)? },
            class: fields[0].to_string(),
            annotations,
        });
    }
    Ok(out)
}
