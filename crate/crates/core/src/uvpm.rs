//! Unsupervised voting proposals: a ground-plane anchor grid is filtered by
//! normalized front-view density and a whole-object expansion check; the
//! survivors become a pseudo point cloud whose sampled seeds vote for object
//! centers; clustered votes are aligned into oriented boxes and suppressed.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::cloudio::{Point, PointCloud, CAR_PRIOR};
use crate::frontview::{crop_patch, FrontViewMap, ProjectionConfig, ProjectionError};
use crate::geometry::{nms, normalize_yaw, Box3D, IouKind, Rect2D};
use crate::micronet::{farthest_point_sampling, MicronetError, PointBackbone, Tensor};
use crate::spatial::GridIndex;

#[derive(Debug, Error)]
pub enum UvpmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pseudo point cloud is empty")]
    EmptyPseudo,
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Network(#[from] MicronetError),
}

type Result<T> = std::result::Result<T, UvpmError>;

/// A scored oriented box with a class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: Box3D,
    /// Objectness in `[0, 1]`.
    pub objectness: f64,
    /// Distribution over the foreground classes.
    pub class_probs: Vec<f64>,
    /// Anchor (or survivor) index the proposal descends from.
    pub source_anchor: usize,
}

impl Proposal {
    pub fn new(bbox: Box3D, objectness: f64, class_probs: Vec<f64>, source_anchor: usize) -> Self {
        Proposal { bbox, objectness, class_probs, source_anchor }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalMode {
    /// Seeds, votes and clusters between the filter and refinement.
    Voting,
    /// No voting: every verified survivor is refined directly.
    UpmCompat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteMode {
    /// Neighborhood statistics of the real cloud.
    Geometric,
    /// Offsets and scores from the point backbone's vote head.
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UvpmConfig {
    /// Density threshold δ.
    pub delta: f64,
    /// Expansion factor ε.
    pub epsilon: f64,
    /// Shell tolerance τ (points).
    pub shell_tolerance: usize,
    /// Seed count M.
    pub n_seeds: usize,
    /// Cluster count K.
    pub k_clusters: usize,
    /// Seed neighborhood radius ρ (m).
    pub vote_radius: f64,
    /// Votes farther than this from every cluster seed are dropped (m).
    pub cluster_radius: f64,
    /// Seeds with fewer real points within ρ abstain.
    pub min_vote_points: usize,
    pub prior_scale: [f64; 3],
    pub yaw_steps: usize,
    pub anchor_spacing: f64,
    /// `((x_min, x_max), (y_min, y_max))` in the vehicle frame (m).
    pub extent: ([f64; 2], [f64; 2]),
    /// Height of the anchor template center (m).
    pub template_z: f64,
    /// Returns less than this far above the template bottom count as ground (m).
    pub ground_clearance: f64,
    /// Side S of the resized density patch.
    pub patch_size: usize,
    /// BEV IoU threshold of the final suppression.
    pub nms_threshold: f64,
    pub mode: ProposalMode,
    pub vote_mode: VoteMode,
}

impl Default for UvpmConfig {
    fn default() -> Self {
        UvpmConfig {
            delta: 0.3,
            epsilon: 0.1,
            shell_tolerance: 5,
            n_seeds: 1024,
            k_clusters: 32,
            vote_radius: 2.0,
            cluster_radius: 1.5,
            min_vote_points: 5,
            prior_scale: CAR_PRIOR,
            yaw_steps: 32,
            anchor_spacing: 0.2,
            extent: ([0.0, 70.0], [-35.0, 35.0]),
            template_z: -1.0,
            ground_clearance: 0.15,
            patch_size: 16,
            nms_threshold: 0.5,
            mode: ProposalMode::Voting,
            vote_mode: VoteMode::Geometric,
        }
    }
}

impl UvpmConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(UvpmError::Config(m.to_string()));
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return fail("delta must be finite and non-negative");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail("epsilon must be positive");
        }
        if self.k_clusters == 0 || self.n_seeds == 0 || self.yaw_steps == 0 || self.patch_size == 0 {
            return fail("k_clusters, n_seeds, yaw_steps and patch_size must be positive");
        }
        if !(self.vote_radius > 0.0 && self.cluster_radius > 0.0 && self.anchor_spacing > 0.0) {
            return fail("radii and spacing must be positive");
        }
        if self.prior_scale.iter().any(|&d| d.is_nan() || d <= 0.0) {
            return fail("prior_scale must be positive");
        }
        let (ex, ey) = self.extent;
        if !(ex[0] < ex[1] && ey[0] < ey[1]) {
            return fail("extent must be non-degenerate");
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return fail("nms_threshold must lie in [0, 1]");
        }
        Ok(())
    }

    fn ground_top(&self) -> f64 {
        self.template_z - self.prior_scale[2] / 2.0 + self.ground_clearance
    }
}

/// Anchor centers on a half-open grid, `i`-major over x.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub spacing: f64,
    pub extent: ([f64; 2], [f64; 2]),
    pub nx: usize,
    pub ny: usize,
    pub template: Box3D,
}

fn half_open_count(lo: f64, hi: f64, step: f64) -> usize {
    (((hi - lo) / step - 1e-9).ceil() as usize).max(1)
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, k: usize) -> [f64; 2] {
        let (i, j) = (k / self.ny, k % self.ny);
        [self.extent.0[0] + i as f64 * self.spacing, self.extent.1[0] + j as f64 * self.spacing]
    }

    pub fn anchor_box(&self, k: usize) -> Box3D {
        let [x, y] = self.center(k);
        Box3D { center: [x, y, self.template.center[2]], ..self.template }
    }
}

pub fn build_anchor_grid(cfg: &UvpmConfig) -> AnchorGrid {
    let (ex, ey) = cfg.extent;
    AnchorGrid {
        spacing: cfg.anchor_spacing,
        extent: cfg.extent,
        nx: half_open_count(ex[0], ex[1], cfg.anchor_spacing),
        ny: half_open_count(ey[0], ey[1], cfg.anchor_spacing),
        template: Box3D::new([0.0, 0.0, cfg.template_z], cfg.prior_scale, 0.0),
    }
}

/// Occupied fraction of the anchor's resized front-view patch, or `None`
/// when the box reaches behind the sensor or misses the map.
pub fn anchor_density(b: &Box3D, map: &FrontViewMap, proj: &ProjectionConfig, patch_size: usize) -> Option<f64> {
    if b.corners().iter().any(|c| c[0] <= 0.0) {
        return None;
    }
    let rect = proj.project_box(b)?;
    let patch = crop_patch(map, &rect, patch_size, patch_size).ok()?;
    Some(patch.occupied_fraction())
}

/// Normalized density `D_c`; 0 for anchors without a usable projection.
pub fn density(b: &Box3D, map: &FrontViewMap, proj: &ProjectionConfig, patch_size: usize) -> f64 {
    anchor_density(b, map, proj, patch_size).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Survivor {
    pub anchor: usize,
    pub bbox: Box3D,
    pub density: f64,
}

/// Anchors with a usable projection and density ≥ δ, in grid order.
pub fn filter_anchors(grid: &AnchorGrid, map: &FrontViewMap, proj: &ProjectionConfig, cfg: &UvpmConfig) -> Vec<Survivor> {
    (0..grid.len())
        .into_par_iter()
        .filter_map(|k| {
            let bbox = grid.anchor_box(k);
            let d = anchor_density(&bbox, map, proj, cfg.patch_size)?;
            (d >= cfg.delta).then_some(Survivor { anchor: k, bbox, density: d })
        })
        .collect()
}

/// True iff scaling the box by `1 + ε` adds at most τ points.
pub fn expansion_check(b: &Box3D, index: &GridIndex<'_>, cfg: &UvpmConfig) -> bool {
    let outer = index.count_inside(&b.scaled(1.0 + cfg.epsilon));
    let inner = index.count_inside(b);
    outer - inner <= cfg.shell_tolerance
}

/// One point per survivor at its anchor center; intensity carries the density.
pub fn make_pseudo_cloud(survivors: &[Survivor]) -> PointCloud {
    let pts = survivors
        .iter()
        .map(|s| Point::new(s.bbox.center[0], s.bbox.center[1], s.bbox.center[2], s.density))
        .collect();
    PointCloud::new(pts, "pseudo")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seed {
    /// Index into the pseudo cloud.
    pub pseudo_index: usize,
    pub xyz: [f64; 3],
    /// Geometric: `[count, centroid offset (3), covariance eigenvalues (3, descending)]`.
    /// Learned: `[dx, dy, dz, score logit]`.
    pub feature: Vec<f64>,
}

/// How seed features are produced.
#[derive(Debug, Clone, Copy)]
pub enum SeedBackbone<'a> {
    Geometric,
    Learned(&'a PointBackbone),
}

/// Real, non-ground points within ρ of `c`.
fn neighborhood(c: [f64; 3], index: &GridIndex<'_>, cfg: &UvpmConfig) -> Vec<[f64; 3]> {
    let floor = cfg.ground_top();
    index
        .within_radius(c, cfg.vote_radius)
        .into_iter()
        .map(|i| index.points()[i].xyz())
        .filter(|p| p[2] >= floor)
        .collect()
}

fn geometric_feature(c: [f64; 3], index: &GridIndex<'_>, cfg: &UvpmConfig) -> Vec<f64> {
    let nb = neighborhood(c, index, cfg);
    if nb.is_empty() {
        return vec![0.0; 7];
    }
    let n = nb.len() as f64;
    let mut mean = [0.0; 3];
    for p in &nb {
        (0..3).for_each(|k| mean[k] += p[k] / n);
    }
    let mut cov = Matrix3::zeros();
    for p in &nb {
        let d = nalgebra::Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose() / n;
    }
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let mut f = vec![n, mean[0] - c[0], mean[1] - c[1], mean[2] - c[2]];
    f.extend(eig);
    f
}

/// Pseudo-point features for the learned backbone: density, then zeros.
fn pseudo_features(pseudo: &PointCloud, width: usize) -> std::result::Result<Tensor, MicronetError> {
    let mut data = vec![0.0; pseudo.len() * width];
    for (i, p) in pseudo.points.iter().enumerate() {
        data[i * width] = p.intensity;
    }
    Tensor::new(&[pseudo.len(), width], data)
}

/// FPS-selected seeds (start at index 0) with backbone features.
pub fn generate_seeds(
    pseudo: &PointCloud,
    index: &GridIndex<'_>,
    backbone: SeedBackbone<'_>,
    cfg: &UvpmConfig,
) -> Result<Vec<Seed>> {
    if pseudo.is_empty() {
        return Err(UvpmError::EmptyPseudo);
    }
    let xyz: Vec<[f64; 3]> = pseudo.points.iter().map(Point::xyz).collect();
    match backbone {
        SeedBackbone::Geometric => {
            let picks = farthest_point_sampling(&xyz, cfg.n_seeds);
            Ok(picks
                .into_par_iter()
                .map(|i| Seed { pseudo_index: i, xyz: xyz[i], feature: geometric_feature(xyz[i], index, cfg) })
                .collect())
        }
        SeedBackbone::Learned(net) => {
            let feats = pseudo_features(pseudo, net.config.in_features)?;
            let (_, out) = net.forward(&xyz, &feats)?;
            // the first backbone level samples with the same FPS rule, so its
            // leading rows are exactly the FPS-M seeds
            let picks = farthest_point_sampling(&xyz, cfg.n_seeds);
            let w = out.shape()[1];
            Ok(picks
                .iter()
                .enumerate()
                .filter(|(k, _)| *k < out.shape()[0])
                .map(|(k, &i)| Seed { pseudo_index: i, xyz: xyz[i], feature: out.data()[k * w..(k + 1) * w].to_vec() })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub seed: usize,
    pub target: [f64; 3],
    pub weight: f64,
}

/// Geometric seeds vote for their neighborhood centroid (weight = point
/// count over the largest count) or abstain below `min_vote_points`;
/// learned seeds vote at `xyz + offset` with weight `sigmoid(score)`.
pub fn vote(seeds: &[Seed], cfg: &UvpmConfig) -> Vec<Vote> {
    match cfg.vote_mode {
        VoteMode::Geometric => {
            let max = seeds.iter().map(|s| s.feature.first().copied().unwrap_or(0.0)).fold(0.0, f64::max);
            seeds
                .iter()
                .enumerate()
                .filter(|(_, s)| s.feature.len() >= 4 && s.feature[0] >= cfg.min_vote_points.max(1) as f64)
                .map(|(k, s)| Vote {
                    seed: k,
                    target: [s.xyz[0] + s.feature[1], s.xyz[1] + s.feature[2], s.xyz[2] + s.feature[3]],
                    weight: s.feature[0] / max,
                })
                .collect()
        }
        VoteMode::Learned => seeds
            .iter()
            .enumerate()
            .filter(|(_, s)| s.feature.len() >= 4)
            .map(|(k, s)| Vote {
                seed: k,
                target: [s.xyz[0] + s.feature[0], s.xyz[1] + s.feature[1], s.xyz[2] + s.feature[2]],
                weight: 1.0 / (1.0 + (-s.feature[3]).exp()),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub center: [f64; 3],
    /// Vote indices.
    pub members: Vec<usize>,
    pub weight: f64,
}

/// FPS picks `k` cluster seeds among the vote targets; every vote joins the
/// nearest seed within `radius` (ties to the earlier seed) or is dropped.
/// Centers are weight-weighted member means; empty clusters are removed.
pub fn cluster_votes(votes: &[Vote], k: usize, radius: f64) -> Vec<Cluster> {
    let pts: Vec<[f64; 3]> = votes.iter().map(|v| v.target).collect();
    let seeds = farthest_point_sampling(&pts, k.max(1));
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); seeds.len()];
    for (vi, p) in pts.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (ci, &s) in seeds.iter().enumerate() {
            let q = pts[s];
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, ci));
            }
        }
        if let Some((_, ci)) = best {
            members[ci].push(vi);
        }
    }
    members
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(|m| {
            let w: f64 = m.iter().map(|&i| votes[i].weight).sum();
            let mut c = [0.0; 3];
            for &i in &m {
                let f = if w > 0.0 { votes[i].weight / w } else { 1.0 / m.len() as f64 };
                (0..3).for_each(|a| c[a] += f * votes[i].target[a]);
            }
            Cluster { center: c, members: m, weight: w }
        })
        .collect()
}

/// Area of the xy bounding rectangle of `pts` in a frame rotated by `theta`.
pub fn aligned_area(pts: &[[f64; 2]], theta: f64) -> (f64, [f64; 2]) {
    let (s, c) = theta.sin_cos();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in pts {
        let u = c * p[0] + s * p[1];
        let v = -s * p[0] + c * p[1];
        lo = [lo[0].min(u), lo[1].min(v)];
        hi = [hi[0].max(u), hi[1].max(v)];
    }
    let ext = [hi[0] - lo[0], hi[1] - lo[1]];
    (ext[0] * ext[1], ext)
}

/// Minimum-area angle among `steps` uniform angles in `[0, π)` (first wins
/// ties) and its rectangle extents along / across that angle.
pub fn best_alignment(pts: &[[f64; 2]], steps: usize) -> (f64, [f64; 2]) {
    let mut best = (f64::INFINITY, 0.0, [0.0; 2]);
    for k in 0..steps.max(1) {
        let theta = k as f64 * std::f64::consts::PI / steps.max(1) as f64;
        let (area, ext) = aligned_area(pts, theta);
        if area < best.0 {
            best = (area, theta, ext);
        }
    }
    (best.1, best.2)
}

/// Outcome of [`refine`] before objectness normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub bbox: Box3D,
    /// Minimum-area search angle; `bbox.yaw` equals it modulo π/2.
    pub search_angle: f64,
    /// Non-ground points used for the alignment.
    pub support: usize,
}

/// Places the prior box at `center`, aligns its yaw to the minimum-area
/// rectangle of the nearby non-ground points (long side along the prior's
/// length), then moves it to their centroid once.
pub fn refine(center: [f64; 3], index: &GridIndex<'_>, cfg: &UvpmConfig) -> Refined {
    let [dx, dy, dz] = cfg.prior_scale;
    let reach = dx.hypot(dy) / 2.0;
    let c = [center[0], center[1], cfg.template_z];
    let floor = cfg.ground_top();
    let top = cfg.template_z + dz / 2.0;
    let query = [c[0], c[1], c[2]];
    let pts: Vec<[f64; 2]> = index
        .within_radius(query, reach.hypot(dz / 2.0))
        .into_iter()
        .map(|i| index.points()[i].xyz())
        .filter(|p| p[2] >= floor && p[2] <= top && (p[0] - c[0]).hypot(p[1] - c[1]) <= reach)
        .map(|p| [p[0], p[1]])
        .collect();
    if pts.len() < 3 {
        return Refined { bbox: Box3D::new(c, cfg.prior_scale, 0.0), search_angle: 0.0, support: pts.len() };
    }
    let (theta, ext) = best_alignment(&pts, cfg.yaw_steps);
    let along_length = if (ext[0] >= ext[1]) == (dx >= dy) { theta } else { theta + std::f64::consts::FRAC_PI_2 };
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    Refined {
        bbox: Box3D::new([cx, cy, cfg.template_z], cfg.prior_scale, normalize_yaw(along_length)),
        search_angle: theta,
        support: pts.len(),
    }
}

/// Every intermediate product of one proposal run.
#[derive(Debug, Clone, Default)]
pub struct UvpmRun {
    pub survivors: Vec<Survivor>,
    /// Survivors passing the expansion check.
    pub verified: Vec<Survivor>,
    pub seeds: Vec<Seed>,
    pub votes: Vec<Vote>,
    pub clusters: Vec<Cluster>,
    /// Refined proposals before suppression.
    pub raw: Vec<Proposal>,
    /// Final proposals, by descending objectness.
    pub proposals: Vec<Proposal>,
}

fn clamp_center(b: &mut Box3D, cfg: &UvpmConfig) {
    let (ex, ey) = cfg.extent;
    let (hx, hy) = (cfg.prior_scale[0] / 2.0, cfg.prior_scale[1] / 2.0);
    b.center[0] = b.center[0].clamp(ex[0] - hx, ex[1] + hx);
    b.center[1] = b.center[1].clamp(ey[0] - hy, ey[1] + hy);
}

/// The full proposal pipeline. `backbone` is required in learned-vote mode.
pub fn run(
    cloud: &PointCloud,
    map: &FrontViewMap,
    proj: &ProjectionConfig,
    cfg: &UvpmConfig,
    backbone: Option<&PointBackbone>,
) -> Result<UvpmRun> {
    cfg.validate()?;
    proj.validate()?;
    let seed_backbone = match (cfg.vote_mode, backbone) {
        (VoteMode::Geometric, _) => SeedBackbone::Geometric,
        (VoteMode::Learned, Some(b)) => SeedBackbone::Learned(b),
        (VoteMode::Learned, None) => return Err(UvpmError::Config("learned voting needs a point backbone".into())),
    };
    let mut out = UvpmRun::default();
    let grid = build_anchor_grid(cfg);
    out.survivors = filter_anchors(&grid, map, proj, cfg);
    let index = GridIndex::new(&cloud.points, 1.0);
    out.verified = out.survivors.par_iter().filter(|s| expansion_check(&s.bbox, &index, cfg)).copied().collect();
    if out.verified.is_empty() {
        return Ok(out);
    }

    // (center, weight, source anchor) per refinement candidate
    let candidates: Vec<([f64; 3], f64, usize)> = match cfg.mode {
        ProposalMode::UpmCompat => out.verified.iter().map(|s| (s.bbox.center, s.density, s.anchor)).collect(),
        ProposalMode::Voting => {
            let pseudo = make_pseudo_cloud(&out.verified);
            out.seeds = generate_seeds(&pseudo, &index, seed_backbone, cfg)?;
            out.votes = vote(&out.seeds, cfg);
            out.clusters = cluster_votes(&out.votes, cfg.k_clusters, cfg.cluster_radius);
            out.clusters
                .iter()
                .map(|c| {
                    let lead = out.votes[c.members[0]].seed;
                    let anchor = out.verified[out.seeds[lead].pseudo_index].anchor;
                    (c.center, c.weight, anchor)
                })
                .collect()
        }
    };
    let max_w = candidates.iter().map(|c| c.1).fold(0.0, f64::max);
    out.raw = candidates
        .par_iter()
        .map(|&(center, w, anchor)| {
            let mut b = refine(center, &index, cfg).bbox;
            clamp_center(&mut b, cfg);
            let s = if max_w > 0.0 { (w / max_w).clamp(0.0, 1.0) } else { 0.0 };
            Proposal::new(b, s, vec![1.0], anchor)
        })
        .collect();
    out.proposals = nms(&out.raw, cfg.nms_threshold, IouKind::Bev);
    Ok(out)
}

/// End-to-end proposals after suppression.
pub fn propose(
    cloud: &PointCloud,
    map: &FrontViewMap,
    proj: &ProjectionConfig,
    cfg: &UvpmConfig,
    backbone: Option<&PointBackbone>,
) -> Result<Vec<Proposal>> {
    Ok(run(cloud, map, proj, cfg, backbone)?.proposals)
}

/// Front-view rectangle of a proposal's projected corners.
pub fn project_to_2d(p: &Proposal, proj: &ProjectionConfig) -> Option<Rect2D> {
    proj.project_box(&p.bbox)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudio::{generate_scene, SceneSpec};
    use crate::frontview::build_map;

    #[test]
    fn grid_counts() {
        let g = build_anchor_grid(&UvpmConfig::default());
        assert_eq!((g.nx, g.ny, g.len()), (350, 350, 122_500));
        let g = build_anchor_grid(&UvpmConfig { anchor_spacing: 35.0, ..Default::default() });
        assert_eq!(g.len(), 4);
        let g = build_anchor_grid(&UvpmConfig { anchor_spacing: 100.0, ..Default::default() });
        assert_eq!(g.len(), 1);
        assert_eq!(g.center(0), [0.0, -35.0]);
    }

    #[test]
    fn empty_cloud_gives_nothing() {
        let proj = ProjectionConfig::default();
        let cloud = PointCloud::new(vec![], "empty");
        let map = build_map(&cloud, &proj).unwrap();
        let cfg = UvpmConfig::default();
        let r = run(&cloud, &map, &proj, &cfg, None).unwrap();
        assert!(r.survivors.is_empty() && r.proposals.is_empty());
        assert!(make_pseudo_cloud(&[]).is_empty());
    }

    #[test]
    fn expansion_check_cases() {
        let cfg = UvpmConfig::default();
        let b = Box3D::new([10.0, 0.0, -1.0], [4.0, 2.0, 1.6], 0.3);
        let inside: Vec<Point> = (0..40)
            .map(|i| {
                let t = i as f64 / 40.0;
                let p = [10.0 + (t - 0.5) * 2.0 * 0.3f64.cos(), (t - 0.5) * 2.0 * 0.3f64.sin(), -1.0];
                Point::new(p[0], p[1], p[2], 0.0)
            })
            .collect();
        let idx = GridIndex::new(&inside, 1.0);
        assert!(expansion_check(&b, &idx, &cfg));
        // half of a cluster hangs out of the +x face
        let shifted = Box3D::new([9.0, 0.0, -1.0], [2.0, 2.0, 1.6], 0.0);
        let straddle: Vec<Point> = (0..40).map(|i| Point::new(9.9 + i as f64 * 0.005, 0.0, -1.0, 0.0)).collect();
        let idx = GridIndex::new(&straddle, 1.0);
        assert!(!expansion_check(&shifted, &idx, &cfg));
    }

    #[test]
    fn clustering_cases() {
        let v = |x: f64, y: f64| Vote { seed: 0, target: [x, y, 0.0], weight: 1.0 };
        let same = vec![v(1.0, 1.0); 5];
        let c = cluster_votes(&same, 1, 1.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].center, [1.0, 1.0, 0.0]);
        let few = vec![v(0.0, 0.0), v(10.0, 0.0), v(20.0, 0.0)];
        assert_eq!(cluster_votes(&few, 8, 1.0).len(), 3);
        assert!(cluster_votes(&[], 3, 1.0).is_empty());
    }

    #[test]
    fn axis_aligned_points_align_to_zero() {
        let pts: Vec<[f64; 2]> =
            (0..20).flat_map(|i| (0..8).map(move |j| [i as f64 * 0.2, j as f64 * 0.2])).collect();
        let (theta, _) = best_alignment(&pts, 32);
        let q = std::f64::consts::FRAC_PI_2;
        let m = theta.rem_euclid(q);
        assert!(m.min(q - m) < std::f64::consts::PI / 32.0 + 1e-12);
    }

    #[test]
    fn planted_scene_yields_proposals() {
        let scene = generate_scene(&SceneSpec::with_seed(42)).unwrap();
        let proj = ProjectionConfig::default();
        let map = build_map(&scene.cloud, &proj).unwrap();
        let cfg = UvpmConfig::default();
        let r = run(&scene.cloud, &map, &proj, &cfg, None).unwrap();
        assert!(r.raw.len() >= 3);
        for p in &r.proposals {
            assert!((0.0..=1.0).contains(&p.objectness));
        }
    }
}
