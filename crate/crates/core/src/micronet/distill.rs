//! Teacher-gated distillation: hardened targets outside an ambiguity band,
//! binary cross-entropy inside, nothing at all in between.

use super::{viewpoint_encode, MicronetError, Tensor, VIEWPOINT_BINS};
use crate::frontview::Patch;

pub const DEFAULT_BAND: [f64; 2] = [0.3, 0.7];
const SCORE_CLAMP: f64 = 1e-7;

/// Target for a teacher score: `Some(1)` at or above the band, `Some(0)` at
/// or below it, `None` (skip) strictly inside.
pub fn harden_target(teacher: f64, band: [f64; 2]) -> Option<f64> {
    if teacher >= band[1] {
        Some(1.0)
    } else if teacher <= band[0] {
        Some(0.0)
    } else {
        None
    }
}

/// Per-pair loss, or `None` when the teacher is ambiguous.
pub fn distill_loss(student: f64, teacher: f64, band: [f64; 2]) -> Option<f64> {
    let t = harden_target(teacher, band)?;
    let s = student.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    Some(-(t * s.ln() + (1.0 - t) * (1.0 - s).ln()))
}

/// Summed loss over a batch of student scores (any shape, one per teacher
/// score) and the number of contributing pairs. Skipped pairs stay in the
/// graph with zero weight, so their gradient is exactly zero.
pub fn distill_batch_loss(
    student: &Tensor,
    teacher: &[f64],
    band: [f64; 2],
) -> Result<(Tensor, usize), MicronetError> {
    if student.numel() != teacher.len() {
        return Err(MicronetError::ShapeMismatch(format!(
            "distill: {} student scores, {} teacher scores",
            student.numel(),
            teacher.len()
        )));
    }
    let s = student.reshape(&[teacher.len()])?.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
    let mut pos = Vec::with_capacity(teacher.len());
    let mut neg = Vec::with_capacity(teacher.len());
    let mut used = 0;
    for &t in teacher {
        match harden_target(t, band) {
            Some(h) => {
                used += 1;
                pos.push(-h);
                neg.push(-(1.0 - h));
            }
            None => {
                pos.push(0.0);
                neg.push(0.0);
            }
        }
    }
    let n = teacher.len();
    let pos = Tensor::new(&[n], pos)?;
    let neg = Tensor::new(&[n], neg)?;
    let ln_s = s.ln()?;
    let ln_1s = s.scale(-1.0)?.add_scalar(1.0)?.ln()?;
    let loss = ln_s.mul(&pos)?.add(&ln_1s.mul(&neg)?)?.sum()?;
    Ok((loss, used))
}

/// The pre-trained teacher boundary: per-class confidences and a 16-bin
/// viewpoint distribution with per-bin angle residuals.
pub trait TeacherOracle {
    fn classify(&self, patch: &Patch) -> Vec<f64>;
    fn viewpoint(&self, patch: &Patch) -> ([f64; VIEWPOINT_BINS], [f64; VIEWPOINT_BINS]);
}

/// Deterministic stand-in teacher driven by patch statistics: confidence is
/// a logistic function of the occupied fraction; the viewpoint comes from
/// the left/right range imbalance across the patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedTeacher {
    pub steepness: f64,
    pub midpoint: f64,
    pub sharpness: f64,
}

impl Default for ScriptedTeacher {
    fn default() -> Self {
        ScriptedTeacher { steepness: 12.0, midpoint: 0.35, sharpness: 4.0 }
    }
}

impl ScriptedTeacher {
    fn heading(patch: &Patch) -> f64 {
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for r in 0..patch.rows {
            for c in 0..patch.cols {
                let i = r * patch.cols + c;
                if patch.mask[i] {
                    let half = usize::from(2 * c >= patch.cols);
                    sums[half] += patch.data[i][1];
                    counts[half] += 1;
                }
            }
        }
        if counts[0] == 0 || counts[1] == 0 {
            return 0.0;
        }
        let dl = sums[0] / counts[0] as f64;
        let dr = sums[1] / counts[1] as f64;
        (dr - dl).atan2(1.0).rem_euclid(std::f64::consts::TAU)
    }
}

impl TeacherOracle for ScriptedTeacher {
    fn classify(&self, patch: &Patch) -> Vec<f64> {
        let occ = patch.occupied_fraction();
        vec![1.0 / (1.0 + (-self.steepness * (occ - self.midpoint)).exp())]
    }

    fn viewpoint(&self, patch: &Patch) -> ([f64; VIEWPOINT_BINS], [f64; VIEWPOINT_BINS]) {
        let heading = Self::heading(patch);
        let (bin, residual) = viewpoint_encode(heading);
        let width = std::f64::consts::TAU / VIEWPOINT_BINS as f64;
        let mut probs = [0.0; VIEWPOINT_BINS];
        for (k, p) in probs.iter_mut().enumerate() {
            let center = (k as f64 + 0.5) * width;
            *p = (self.sharpness * (center - heading).cos()).exp();
        }
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        let mut residuals = [0.0; VIEWPOINT_BINS];
        residuals[bin] = residual;
        (probs, residuals)
    }
}
