//! Point-set layers: farthest-point sampling, set abstraction, and
//! inverse-distance feature propagation, plus the seed/vote backbone.

use rand::Rng;

use super::{Bound, MicronetError, ParamStore, Tensor};

type Result<T> = std::result::Result<T, MicronetError>;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy max-min selection of `m` indices starting from index 0; ties go
/// to the lowest index. Returns all indices (in FPS order) when `m >= n`.
pub fn farthest_point_sampling(xyz: &[[f64; 3]], m: usize) -> Vec<usize> {
    let n = xyz.len();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let mut picked = Vec::with_capacity(m);
    let mut best = vec![f64::INFINITY; n];
    let mut cur = 0;
    for _ in 0..m {
        picked.push(cur);
        let c = xyz[cur];
        let mut next = 0;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in xyz.iter().enumerate() {
            let d = dist2(p, &c);
            if d < best[i] {
                best[i] = d;
            }
            if best[i] > far {
                far = best[i];
                next = i;
            }
        }
        cur = next;
    }
    picked
}

/// Shared per-row perceptron: `Linear -> ReLU` per layer; the last ReLU is
/// optional so the stack can end in a linear head.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<(Tensor, Tensor)>,
    pub relu_last: bool,
}

impl Mlp {
    /// Registers `prefix.{i}.w` (`in x out`) and `prefix.{i}.b` in the store.
    pub fn declare(store: &mut ParamStore, prefix: &str, input: usize, widths: &[usize], rng: &mut impl Rng) {
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            store.insert_uniform(&format!("{prefix}.{i}.w"), &[fan_in, w], (1.0 / fan_in.max(1) as f64).sqrt(), rng);
            store.insert_zeros(&format!("{prefix}.{i}.b"), &[w]);
            fan_in = w;
        }
    }

    pub fn from_bound(bound: &Bound, prefix: &str, n_layers: usize, relu_last: bool) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| Ok((bound.get(&format!("{prefix}.{i}.w"))?.clone(), bound.get(&format!("{prefix}.{i}.b"))?.clone())))
            .collect::<Result<Vec<_>>>()?;
        if layers.is_empty() {
            return Err(MicronetError::EmptyInput("mlp widths"));
        }
        Ok(Mlp { layers, relu_last })
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map(|(w, _)| w.shape()[1]).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add_bias(b)?;
            if i < last || self.relu_last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Geometry of one set-abstraction level.
#[derive(Debug, Clone, PartialEq)]
pub struct SetAbstractionLayer {
    pub npoint: usize,
    pub radius: f64,
    pub nsample: usize,
}

/// FPS-samples centers, groups up to `nsample` neighbors within `radius`
/// (lowest indices first, padded by repeating the first neighbor), feeds
/// `[xyz - center, features]` through the shared MLP and max-pools per
/// group. Returns the center positions and their `m x C_out` features.
pub fn set_abstraction(
    xyz: &[[f64; 3]],
    features: &Tensor,
    layer: &SetAbstractionLayer,
    mlp: &Mlp,
) -> Result<(Vec<[f64; 3]>, Tensor)> {
    let (n, _) = features.dims2("set_abstraction")?;
    if n == 0 || xyz.is_empty() {
        return Err(MicronetError::EmptyInput("set_abstraction"));
    }
    if n != xyz.len() || layer.nsample == 0 {
        return Err(MicronetError::ShapeMismatch(format!(
            "set_abstraction: {} positions, {n} feature rows, nsample {}",
            xyz.len(),
            layer.nsample
        )));
    }
    let centers = farthest_point_sampling(xyz, layer.npoint.max(1));
    let r2 = layer.radius * layer.radius;
    let ns = layer.nsample;
    let mut idx = Vec::with_capacity(centers.len() * ns);
    let mut rel = Vec::with_capacity(centers.len() * ns * 3);
    for &c in &centers {
        let cp = xyz[c];
        let mut group: Vec<usize> = (0..n).filter(|&i| dist2(&xyz[i], &cp) <= r2).take(ns).collect();
        // the center itself is always within the radius
        let first = group[0];
        group.resize(ns, first);
        for &i in &group {
            rel.extend_from_slice(&[xyz[i][0] - cp[0], xyz[i][1] - cp[1], xyz[i][2] - cp[2]]);
        }
        idx.extend(group);
    }
    let rel = Tensor::new(&[idx.len(), 3], rel)?;
    let grouped = Tensor::concat_cols(&[rel, features.gather_rows(&idx)?])?;
    let pooled = mlp.forward(&grouped)?.max_pool_groups(ns)?;
    Ok((centers.iter().map(|&c| xyz[c]).collect(), pooled))
}

/// Interpolation taps from `coarse` onto each `fine` position: the three
/// nearest coarse points weighted by normalized inverse distance, or a
/// single weight-1 tap on an exact positional match.
pub fn three_nn_weights(fine: &[[f64; 3]], coarse: &[[f64; 3]]) -> Vec<Vec<(usize, f64)>> {
    fine.iter()
        .map(|p| {
            let mut near: Vec<(f64, usize)> = Vec::with_capacity(4);
            for (i, q) in coarse.iter().enumerate() {
                let d = dist2(p, q);
                if near.len() < 3 || d < near[near.len() - 1].0 {
                    let pos = near.partition_point(|&(e, _)| e <= d);
                    near.insert(pos, (d, i));
                    near.truncate(3);
                }
            }
            if let Some(&(d, i)) = near.first() {
                if d == 0.0 {
                    return vec![(i, 1.0)];
                }
            }
            let inv: Vec<f64> = near.iter().map(|&(d, _)| 1.0 / d.sqrt()).collect();
            let total: f64 = inv.iter().sum();
            near.iter().zip(&inv).map(|(&(_, i), w)| (i, w / total)).collect()
        })
        .collect()
}

/// Upsamples `coarse_features` onto `fine` positions, concatenates the
/// optional skip features and applies the MLP.
pub fn feature_propagation(
    fine: &[[f64; 3]],
    coarse: &[[f64; 3]],
    coarse_features: &Tensor,
    skip: Option<&Tensor>,
    mlp: &Mlp,
) -> Result<Tensor> {
    let (nc, c) = coarse_features.dims2("feature_propagation")?;
    if nc == 0 || fine.is_empty() {
        return Err(MicronetError::EmptyInput("feature_propagation"));
    }
    if nc != coarse.len() {
        return Err(MicronetError::ShapeMismatch(format!(
            "feature_propagation: {} coarse positions, {nc} rows",
            coarse.len()
        )));
    }
    let interp = coarse_features.sparse_rows(vec![fine.len(), c], three_nn_weights(fine, coarse))?;
    let x = match skip {
        Some(s) => Tensor::concat_cols(&[interp, s.clone()])?,
        None => interp,
    };
    mlp.forward(&x)
}

/// Four SA levels, two FP levels back to the first level, and a linear
/// vote head emitting `(dx, dy, dz, score)` per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBackboneConfig {
    pub in_features: usize,
    pub sa: Vec<SetAbstractionLayer>,
    pub sa_mlp: Vec<usize>,
    pub fp_mlps: [Vec<usize>; 2],
    pub head_hidden: usize,
    pub out: usize,
}

impl Default for PointBackboneConfig {
    fn default() -> Self {
        let sa = [(2048, 0.2), (1024, 0.4), (512, 0.8), (256, 1.2)]
            .iter()
            .map(|&(npoint, radius)| SetAbstractionLayer { npoint, radius, nsample: 16 })
            .collect();
        PointBackboneConfig {
            in_features: 58,
            sa,
            sa_mlp: vec![64, 64, 128],
            fp_mlps: [vec![128, 128], vec![256, 256]],
            head_hidden: 128,
            out: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PointBackbone {
    pub config: PointBackboneConfig,
    pub params: ParamStore,
}

impl PointBackbone {
    pub fn random(config: PointBackboneConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let mut width = config.in_features;
        let mut level_widths = vec![width];
        for l in 0..config.sa.len() {
            Mlp::declare(&mut params, &format!("sa{l}"), width + 3, &config.sa_mlp, rng);
            width = *config.sa_mlp.last().unwrap();
            level_widths.push(width);
        }
        let last = config.sa.len();
        // FP0: deepest level onto SA level last-2; FP1: onto SA level 1
        let skips = [level_widths[last - 2], level_widths[1]];
        for (k, widths) in config.fp_mlps.iter().enumerate() {
            Mlp::declare(&mut params, &format!("fp{k}"), width + skips[k], widths, rng);
            width = *widths.last().unwrap();
        }
        Mlp::declare(&mut params, "head", width, &[config.head_hidden, config.out], rng);
        PointBackbone { config, params }
    }

    /// Returns the seed positions (first-level FPS centers) and the
    /// `n_seeds x out` head output.
    pub fn forward(&self, xyz: &[[f64; 3]], features: &Tensor) -> Result<(Vec<[f64; 3]>, Tensor)> {
        let cfg = &self.config;
        if cfg.sa.len() < 3 {
            return Err(MicronetError::ShapeMismatch("backbone needs at least 3 SA levels".into()));
        }
        let b = self.params.bind(false);
        let mut levels: Vec<(Vec<[f64; 3]>, Tensor)> = vec![(xyz.to_vec(), features.clone())];
        for (l, layer) in cfg.sa.iter().enumerate() {
            let mlp = Mlp::from_bound(&b, &format!("sa{l}"), cfg.sa_mlp.len(), true)?;
            let (pos, feat) = &levels[l];
            let next = set_abstraction(pos, feat, layer, &mlp)?;
            levels.push(next);
        }
        let last = cfg.sa.len();
        let targets = [last - 2, 1];
        let mut cur = levels[last].clone();
        for (k, &t) in targets.iter().enumerate() {
            let mlp = Mlp::from_bound(&b, &format!("fp{k}"), cfg.fp_mlps[k].len(), true)?;
            let up = feature_propagation(&levels[t].0, &cur.0, &cur.1, Some(&levels[t].1), &mlp)?;
            cur = (levels[t].0.clone(), up);
        }
        let head = Mlp::from_bound(&b, "head", 2, false)?;
        Ok((cur.0, head.forward(&cur.1)?))
    }
}
