//! Desk-scale two-branch student: an attention branch and a residual
//! branch, each fused with RoIAligned proposal features by channel
//! addition, summed, and read out by classification and rotation heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{multi_head, roi_align, AttentionParams, Bound, MicronetError, Mlp, ParamStore, Tensor};
use crate::geometry::Rect2D;

type Result<T> = std::result::Result<T, MicronetError>;

/// Taps of the 1D convolution in the attention feed-forward path; offsets
/// run from `-1` to `+2` along the token axis.
const CONV1D_TAPS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Side of the square xyz-map input.
    pub input_size: usize,
    /// Channel width of every feature map.
    pub width: usize,
    /// Self-attention blocks, matched one-to-one by conv blocks.
    pub sa_blocks: usize,
    /// Stride-2 residual stages; `input_size / 2^res_stages` must equal `pool`.
    pub res_stages: usize,
    /// RoIAlign / pooled output side.
    pub pool: usize,
    pub hidden: usize,
    /// Foreground classes plus background.
    pub classes: usize,
    pub bins: usize,
    /// Drop probability before the heads; 0 disables the mask.
    pub dropout: f64,
    pub dropout_seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            input_size: 128,
            width: 8,
            sa_blocks: 4,
            res_stages: 5,
            pool: 4,
            hidden: 32,
            classes: 2,
            bins: 16,
            dropout: 0.0,
            dropout_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// `n x classes`; column 0 is background.
    pub class_logits: Tensor,
    /// `n x bins`.
    pub rotation_logits: Tensor,
}

impl FusionOutput {
    /// Foreground probability (`1 - p(background)`) per proposal, as `n`.
    pub fn foreground_scores(&self) -> Result<Tensor> {
        let (n, _) = self.class_logits.dims2("foreground_scores")?;
        let p = self.class_logits.softmax_rows()?.transpose()?.gather_rows(&[0])?;
        p.scale(-1.0)?.add_scalar(1.0)?.reshape(&[n])
    }
}

impl FusionConfig {
    /// Minimal instance used by the gradient checks.
    pub fn toy() -> Self {
        FusionConfig { input_size: 16, width: 3, sa_blocks: 2, res_stages: 2, pool: 4, hidden: 6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MicronetError::ShapeMismatch(m));
        if self.width == 0 || self.pool == 0 || self.classes < 2 || self.bins == 0 || self.res_stages == 0 {
            return bad(format!("degenerate fusion config {self:?}"));
        }
        if !self.input_size.is_multiple_of(4) || !(self.input_size / 4).is_multiple_of(self.pool) {
            return bad(format!("input {} does not pool to {}", self.input_size, self.pool));
        }
        if self.input_size >> self.res_stages != self.pool || !self.input_size.is_multiple_of(1 << self.res_stages) {
            return bad(format!("{} stages do not reduce {} to {}", self.res_stages, self.input_size, self.pool));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {}", self.dropout));
        }
        Ok(())
    }

    /// Randomly initialized weights (uniform, fan-in scaled).
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore {
        let w = self.width;
        let mut s = ParamStore::new();
        let conv = |s: &mut ParamStore, name: &str, cin: usize, rng: &mut dyn rand::RngCore| {
            let scale = (1.0 / (9 * cin) as f64).sqrt();
            let n = 9 * cin * w;
            let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
            s.insert(name, &[3, 3, cin, w], data).expect("conv shape");
        };
        conv(&mut s, "a.conv0", 3, rng);
        conv(&mut s, "a.conv1", w, rng);
        let ws = (1.0 / w as f64).sqrt();
        for i in 0..self.sa_blocks {
            for m in ["wq", "wk", "wv", "wo"] {
                s.insert_uniform(&format!("a.sa{i}.{m}"), &[w, w], ws, rng);
            }
            for k in 0..CONV1D_TAPS {
                s.insert_uniform(&format!("a.sa{i}.ffn{k}"), &[w, w], ws / 2.0, rng);
            }
            s.insert_zeros(&format!("a.sa{i}.ffn_b"), &[w]);
            conv(&mut s, &format!("a.blk{i}"), w, rng);
        }
        for j in 0..self.res_stages {
            let cin = if j == 0 { 3 } else { w };
            conv(&mut s, &format!("b.s{j}.conv1"), cin, rng);
            conv(&mut s, &format!("b.s{j}.conv2"), w, rng);
            conv(&mut s, &format!("b.s{j}.short"), cin, rng);
            conv(&mut s, &format!("b.s{j}.id1"), w, rng);
            conv(&mut s, &format!("b.s{j}.id2"), w, rng);
        }
        let flat = self.pool * self.pool * w;
        Mlp::declare(&mut s, "cls", flat, &[self.hidden, self.classes], rng);
        Mlp::declare(&mut s, "rot", flat, &[self.hidden, self.bins], rng);
        s
    }
}

fn scaled_rect(r: &Rect2D, factor: f64) -> Rect2D {
    Rect2D {
        center: [r.center[0] / factor, r.center[1] / factor],
        size: [r.size[0] / factor, r.size[1] / factor],
        angle: 0.0,
    }
}

/// `x + Σ_k shift(x, k - 1) W_k + b`, rectified before the residual add.
fn conv1d_ffn(x: &Tensor, p: &Bound, i: usize) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for k in 0..CONV1D_TAPS {
        let term = x.shift_rows(k as isize - 1)?.matmul(p.get(&format!("a.sa{i}.ffn{k}"))?)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    let y = acc.expect("at least one tap").add_bias(p.get(&format!("a.sa{i}.ffn_b"))?)?.relu()?;
    x.add(&y)
}

fn residual_stage(x: &Tensor, p: &Bound, j: usize) -> Result<Tensor> {
    let g = |n: &str| p.get(&format!("b.s{j}.{n}"));
    let main = x.conv2d(g("conv1")?, 2)?.relu()?.conv2d(g("conv2")?, 1)?;
    let h = main.add(&x.conv2d(g("short")?, 2)?)?.relu()?;
    let id = h.conv2d(g("id1")?, 1)?.relu()?.conv2d(g("id2")?, 1)?;
    h.add(&id)?.relu()
}

/// Forward pass over an `S x S x 3` xyz-map and proposal rectangles in its
/// pixel coordinates (x = column, y = row).
pub fn student_fusion_forward(
    xyz: &Tensor,
    proposals: &[Rect2D],
    params: &Bound,
    cfg: &FusionConfig,
) -> Result<FusionOutput> {
    cfg.validate()?;
    let s = cfg.input_size;
    if xyz.shape() != [s, s, 3] {
        return Err(MicronetError::ShapeMismatch(format!("fusion input {:?}, expected [{s}, {s}, 3]", xyz.shape())));
    }
    if proposals.is_empty() {
        return Err(MicronetError::EmptyInput("fusion proposals"));
    }
    let (p, w) = (cfg.pool, cfg.width);

    // branch A
    let fa = xyz.conv2d(params.get("a.conv0")?, 2)?.relu()?.conv2d(params.get("a.conv1")?, 2)?.relu()?;
    let fa_pooled = fa.adaptive_avg_pool(p)?;
    let attn = (0..cfg.sa_blocks)
        .map(|i| {
            let g = |m: &str| params.get(&format!("a.sa{i}.{m}")).cloned();
            AttentionParams::new(vec![g("wq")?], vec![g("wk")?], vec![g("wv")?], g("wo")?)
        })
        .collect::<Result<Vec<_>>>()?;

    // branch B; RoIAlign reads the second stage (or the last, if shallower)
    let mut fb = xyz.clone();
    let roi_stage = 1.min(cfg.res_stages - 1);
    let mut fb_roi = None;
    for j in 0..cfg.res_stages {
        fb = residual_stage(&fb, params, j)?;
        if j == roi_stage {
            fb_roi = Some(fb.clone());
        }
    }
    let fb_roi = fb_roi.expect("at least one stage");
    let roi_factor = (1usize << (roi_stage + 1)) as f64;

    let mut rows = Vec::with_capacity(proposals.len());
    for rect in proposals {
        let a_in = fa_pooled.add(&roi_align(&fa, &scaled_rect(rect, 4.0), p)?)?;
        let mut t = a_in.reshape(&[p * p, w])?;
        let mut c = a_in;
        for (i, ap) in attn.iter().enumerate() {
            t = t.add(&multi_head(&t, &t, ap)?)?;
            t = conv1d_ffn(&t, params, i)?;
            c = c.conv2d(params.get(&format!("a.blk{i}"))?, 1)?.relu()?;
        }
        let a_out = t.reshape(&[p, p, w])?.add(&c)?;
        let b_out = fb.add(&roi_align(&fb_roi, &scaled_rect(rect, roi_factor), p)?)?;
        rows.push(a_out.add(&b_out)?.reshape(&[1, p * p * w])?);
    }
    let mut feats = Tensor::concat_rows(&rows)?;
    if cfg.dropout > 0.0 {
        let keep = 1.0 - cfg.dropout;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.dropout_seed);
        let mask = (0..feats.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        feats = feats.mul(&Tensor::new(feats.shape(), mask)?)?;
    }
    let cls = Mlp::from_bound(params, "cls", 2, false)?;
    let rot = Mlp::from_bound(params, "rot", 2, false)?;
    Ok(FusionOutput { class_logits: cls.forward(&feats)?, rotation_logits: rot.forward(&feats)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> Tensor {
        let n = cfg.input_size * cfg.input_size * 3;
        Tensor::new(&[cfg.input_size, cfg.input_size, 3], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn output_shapes() {
        let cfg = FusionConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = cfg.init_params(&mut rng).bind(false);
        let props = [Rect2D::axis_aligned([1.0, 2.0], [9.0, 7.5]), Rect2D::axis_aligned([4.0, 4.0], [16.0, 16.0])];
        let out = student_fusion_forward(&input(&cfg, &mut rng), &props, &params, &cfg).unwrap();
        assert_eq!(out.class_logits.shape(), &[2, 2]);
        assert_eq!(out.rotation_logits.shape(), &[2, 16]);
    }

    #[test]
    fn zero_weights_give_uniform_classes() {
        let cfg = FusionConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = cfg.init_params(&mut rng);
        store.fill(0.0);
        let props = [Rect2D::axis_aligned([0.0, 0.0], [5.0, 5.0])];
        let out = student_fusion_forward(&input(&cfg, &mut rng), &props, &store.bind(false), &cfg).unwrap();
        assert!(out.class_logits.data().iter().all(|&v| v == 0.0));
        let sm = out.class_logits.softmax_rows().unwrap();
        assert!(sm.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn default_config_is_consistent() {
        FusionConfig::default().validate().unwrap();
        let bad = FusionConfig { res_stages: 3, ..FusionConfig::default() };
        assert!(bad.validate().is_err());
    }
}
