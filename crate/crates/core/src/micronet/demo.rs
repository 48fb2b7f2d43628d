//! End-to-end distillation exercise: the fusion student learns to imitate
//! the scripted teacher's confidences on proposals from a synthetic scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{distill_batch_loss, student_fusion_forward, Adam, FusionConfig, MicronetError, ScriptedTeacher};
use super::{TeacherOracle, Tensor, DEFAULT_BAND};
use crate::cloudio::{generate_scene, SceneSpec, CAR_PRIOR};
use crate::frontview::{build_map, crop_patch, ProjectionConfig};
use crate::geometry::{iou_bev, Box3D, Rect2D};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub band: [f64; 2],
    pub n_objects: usize,
    pub n_background: usize,
    /// Side of the teacher's input patch.
    pub teacher_patch: usize,
    pub fusion: FusionConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            seed: 7,
            steps: 200,
            lr: 3e-3,
            band: DEFAULT_BAND,
            n_objects: 4,
            n_background: 8,
            teacher_patch: 16,
            fusion: FusionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    /// Mean loss over contributing pairs before each step, plus one final
    /// evaluation after the last update (`steps + 1` entries).
    pub losses: Vec<f64>,
    pub teacher_scores: Vec<f64>,
    /// Pairs outside the ambiguity band.
    pub contributing: usize,
}

/// Distance channel divisor applied to the student input.
const RANGE_SCALE: f64 = 10.0;

pub fn run_distill_demo(cfg: &DemoConfig) -> Result<DemoReport, MicronetError> {
    let proj = ProjectionConfig::default();
    let spec = SceneSpec { n_objects: cfg.n_objects, ..SceneSpec::with_seed(cfg.seed) };
    let scene = generate_scene(&spec).map_err(|e| MicronetError::Input(e.to_string()))?;
    let map = build_map(&scene.cloud, &proj).map_err(|e| MicronetError::Input(e.to_string()))?;

    let s = cfg.fusion.input_size;
    let full = Rect2D::axis_aligned([0.0, 0.0], [map.cols as f64, map.rows as f64]);
    let whole = crop_patch(&map, &full, s, s).map_err(|e| MicronetError::Input(e.to_string()))?;
    let mut hwc = whole.to_hwc();
    hwc.iter_mut().skip(1).step_by(3).for_each(|d| *d /= RANGE_SCALE);
    let input = Tensor::new(&[s, s, 3], hwc)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut boxes: Vec<Box3D> = scene.truth.iter().map(|t| t.bbox).collect();
    let mut tries = 0;
    while boxes.len() < scene.truth.len() + cfg.n_background && tries < 10_000 {
        tries += 1;
        let b = Box3D::new(
            [rng.random_range(6.0..45.0), rng.random_range(-20.0..20.0), -1.0],
            CAR_PRIOR,
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        );
        if scene.truth.iter().all(|t| iou_bev(&t.bbox, &b) == 0.0) {
            boxes.push(b);
        }
    }

    let teacher = ScriptedTeacher::default();
    let (sx, sy) = (s as f64 / map.cols as f64, s as f64 / map.rows as f64);
    let mut rects = Vec::new();
    let mut scores = Vec::new();
    for b in &boxes {
        let Some(r) = proj.project_box(b) else { continue };
        let Ok(patch) = crop_patch(&map, &r, cfg.teacher_patch, cfg.teacher_patch) else { continue };
        scores.push(teacher.classify(&patch)[0]);
        rects.push(Rect2D { center: [r.center[0] * sx, r.center[1] * sy], size: [r.size[0] * sx, r.size[1] * sy], angle: 0.0 });
    }
    if rects.is_empty() {
        return Err(MicronetError::EmptyInput("demo proposals"));
    }

    let mut params = cfg.fusion.init_params(&mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut contributing = 0;
    for step in 0..=cfg.steps {
        let bound = params.bind(true);
        let out = student_fusion_forward(&input, &rects, &bound, &cfg.fusion)?;
        let (sum, used) = distill_batch_loss(&out.foreground_scores()?, &scores, cfg.band)?;
        contributing = used;
        let loss = if used > 0 { sum.scale(1.0 / used as f64)? } else { sum };
        losses.push(loss.item());
        if step == cfg.steps {
            break;
        }
        loss.backward()?;
        opt.step(&mut params, &bound);
    }
    Ok(DemoReport { losses, teacher_scores: scores, contributing })
}
