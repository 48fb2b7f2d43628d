//! Detection-vs-truth matching, interpolated average precision, KITTI-style
//! difficulty bins, and CSV / JSON metric tables.
//!
//! `AP_2D` is measured on the front-view plane: boxes are compared through
//! the bounding rectangles of their projected corners.

use serde::Serialize;
use thiserror::Error;

use crate::cloudio::{Annotations, TruthBox};
use crate::frontview::ProjectionConfig;
use crate::geometry::IouKind;
use crate::uvpm::Proposal;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("average precision is undefined without ground-truth objects")]
    NoTruths,
    #[error("invalid IoU threshold {0}")]
    Threshold(f64),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Metric {
    #[serde(rename = "AP_2D")]
    Ap2d,
    #[serde(rename = "AP_bird")]
    ApBird,
    #[serde(rename = "AP_3D")]
    Ap3d,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ap2d, Metric::ApBird, Metric::Ap3d];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Ap2d => "AP_2D",
            Metric::ApBird => "AP_bird",
            Metric::Ap3d => "AP_3D",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    All,
}

impl Difficulty {
    pub fn name(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::All => "all",
        }
    }
}

/// Tightest difficulty an annotated object satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DifficultyBin {
    Easy,
    Moderate,
    Hard,
    Ignored,
    /// No annotations: the object cannot be binned.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Interpolation {
    #[serde(rename = "11-point")]
    Eleven,
    #[serde(rename = "40-point")]
    Forty,
}

impl Interpolation {
    fn recall_samples(&self) -> Vec<f64> {
        match self {
            Interpolation::Eleven => (0..=10).map(|i| i as f64 / 10.0).collect(),
            Interpolation::Forty => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub metric: Metric,
    pub difficulty: Difficulty,
    pub interpolation: Interpolation,
    /// Front-view geometry used by `AP_2D`.
    pub projection: ProjectionConfig,
}

impl EvalConfig {
    pub fn new(metric: Metric, iou_threshold: f64, difficulty: Difficulty) -> Self {
        EvalConfig {
            iou_threshold,
            metric,
            difficulty,
            interpolation: Interpolation::Eleven,
            projection: ProjectionConfig::default(),
        }
    }

    fn iou_kind(&self) -> IouKind {
        match self.metric {
            Metric::Ap2d => IouKind::FrontView(self.projection),
            Metric::ApBird => IouKind::Bev,
            Metric::Ap3d => IouKind::ThreeD,
        }
    }
}

/// Every metric at IoU 0.3 and 0.5 for easy, moderate and hard.
pub fn standard_configs() -> Vec<EvalConfig> {
    let mut out = Vec::new();
    for metric in Metric::ALL {
        for iou in [0.3, 0.5] {
            for d in [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard] {
                out.push(EvalConfig::new(metric, iou, d));
            }
        }
    }
    out
}

/// The public KITTI convention.
pub fn difficulty_bin(annotations: Option<&Annotations>) -> DifficultyBin {
    let Some(a) = annotations else { return DifficultyBin::All };
    if a.height_px >= 40.0 && a.occlusion == 0 && a.truncation <= 0.15 {
        DifficultyBin::Easy
    } else if a.height_px >= 25.0 && a.occlusion <= 1 && a.truncation <= 0.30 {
        DifficultyBin::Moderate
    } else if a.height_px >= 25.0 && a.occlusion <= 2 && a.truncation <= 0.50 {
        DifficultyBin::Hard
    } else {
        DifficultyBin::Ignored
    }
}

/// Whether a truth counts at `level`. The criteria nest (easy objects are
/// also moderate and hard); un-annotated objects count at every level.
fn counts_at(bin: DifficultyBin, level: Difficulty) -> bool {
    use DifficultyBin as B;
    match (level, bin) {
        (Difficulty::All, _) | (_, B::All) => true,
        (Difficulty::Easy, b) => b == B::Easy,
        (Difficulty::Moderate, b) => matches!(b, B::Easy | B::Moderate),
        (Difficulty::Hard, b) => matches!(b, B::Easy | B::Moderate | B::Hard),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Tp(usize),
    Fp,
    /// Overlaps a truth outside the evaluated difficulty; not counted.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMatch {
    /// Index into the input detections.
    pub index: usize,
    pub score: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// In evaluation order (descending score, then input index).
    pub detections: Vec<DetectionMatch>,
    /// Per truth: matched by a true positive.
    pub truth_matched: Vec<bool>,
    /// Truths that count at the evaluated difficulty.
    pub n_relevant: usize,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.detections.iter().filter(|d| matches!(d.outcome, Outcome::Tp(_))).count()
    }

    pub fn fp(&self) -> usize {
        self.detections.iter().filter(|d| d.outcome == Outcome::Fp).count()
    }
}

fn score_order(dets: &[Proposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].objectness.total_cmp(&dets[i].objectness).then(i.cmp(&j)));
    order
}

/// Greedy matching by descending score against unmatched relevant truths.
pub fn match_detections(dets: &[Proposal], truths: &[TruthBox], cfg: &EvalConfig) -> MatchResult {
    let kind = cfg.iou_kind();
    let relevant: Vec<bool> =
        truths.iter().map(|t| counts_at(difficulty_bin(t.annotations.as_ref()), cfg.difficulty)).collect();
    let mut matched = vec![false; truths.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        let mut hits_ignored = false;
        for (t, truth) in truths.iter().enumerate() {
            let iou = kind.iou(&d.bbox, &truth.bbox);
            if !relevant[t] {
                hits_ignored |= iou >= cfg.iou_threshold;
                continue;
            }
            if !matched[t] && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, t));
            }
        }
        let outcome = match best {
            Some((iou, t)) if iou >= cfg.iou_threshold => {
                matched[t] = true;
                Outcome::Tp(t)
            }
            _ if hits_ignored => Outcome::Ignored,
            _ => Outcome::Fp,
        };
        out.push(DetectionMatch { index: i, score: d.objectness, outcome });
    }
    MatchResult { detections: out, truth_matched: matched, n_relevant: relevant.iter().filter(|&&r| r).count() }
}

/// Interpolated AP over the pooled, score-sorted detections of all scenes.
/// Ties keep scene order, then per-scene evaluation order.
pub fn average_precision(results: &[MatchResult], interpolation: Interpolation) -> Result<f64, EvalError> {
    let n_truth: usize = results.iter().map(|r| r.n_relevant).sum();
    if n_truth == 0 {
        return Err(EvalError::NoTruths);
    }
    let mut pooled: Vec<(f64, bool)> = results
        .iter()
        .flat_map(|r| r.detections.iter())
        .filter(|d| d.outcome != Outcome::Ignored)
        .map(|d| (d.score, matches!(d.outcome, Outcome::Tp(_))))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(pooled.len());
    for (k, &(_, is_tp)) in pooled.iter().enumerate() {
        tp += usize::from(is_tp);
        curve.push((tp as f64 / n_truth as f64, tp as f64 / (k + 1) as f64));
    }
    // running max of precision from the right
    let mut envelope = vec![0.0; curve.len()];
    let mut best = 0.0f64;
    for k in (0..curve.len()).rev() {
        best = best.max(curve[k].1);
        envelope[k] = best;
    }
    let samples = interpolation.recall_samples();
    let total: f64 = samples
        .iter()
        .map(|&r| {
            let k = curve.partition_point(|&(rec, _)| rec < r);
            envelope.get(k).copied().unwrap_or(0.0)
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// AP of one configuration over a batch of `(detections, truths)` scenes.
pub fn evaluate(scenes: &[(Vec<Proposal>, Vec<TruthBox>)], cfg: &EvalConfig) -> Result<f64, EvalError> {
    if !(cfg.iou_threshold > 0.0 && cfg.iou_threshold <= 1.0) {
        return Err(EvalError::Threshold(cfg.iou_threshold));
    }
    let results: Vec<MatchResult> = scenes.iter().map(|(d, t)| match_detections(d, t, cfg)).collect();
    average_precision(&results, cfg.interpolation)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub metric: Metric,
    pub iou: f64,
    pub difficulty: Difficulty,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceEntry {
    pub model: &'static str,
    pub iou: f64,
    pub metric: Metric,
    /// Easy, moderate, hard (percent).
    pub ap: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub interpolation: Interpolation,
    pub rows: Vec<ReportRow>,
    /// Published full-scale numbers for orientation only.
    pub reference_note: &'static str,
    pub reference: Vec<ReferenceEntry>,
}

const REFERENCE_NOTE: &str = "reference, not reproduced: published KITTI car results with full training";

/// Published lidar-input numbers quoted verbatim for orientation.
pub fn reference_block() -> Vec<ReferenceEntry> {
    use Metric::*;
    let e = |model, iou, metric, ap| ReferenceEntry { model, iou, metric, ap };
    vec![
        e("VS3D (Lidar)", 0.3, Ap2d, [78.64, 74.41, 66.24]),
        e("VS3D (Lidar)", 0.3, Ap3d, [65.96, 59.76, 49.78]),
        e("UPM+ResNet50+SA4", 0.3, Ap2d, [83.02, 78.10, 69.02]),
        e("UPM+ResNet50+SA4", 0.3, ApBird, [75.04, 66.35, 56.94]),
        e("UPM+ResNet50+SA4", 0.3, Ap3d, [75.34, 65.15, 55.51]),
        e("UVPM+ResNet50+SA4", 0.3, Ap2d, [84.21, 79.65, 70.35]),
        e("UVPM+ResNet50+SA4", 0.3, ApBird, [76.21, 67.25, 56.32]),
        e("UVPM+ResNet50+SA4", 0.3, Ap3d, [74.04, 64.27, 54.70]),
        e("VS3D (Lidar)", 0.5, Ap2d, [74.54, 66.71, 57.55]),
        e("VS3D (Lidar)", 0.5, Ap3d, [40.32, 37.36, 31.09]),
        e("UPM+ResNet50+SA4", 0.5, Ap2d, [78.24, 72.35, 63.65]),
        e("UPM+ResNet50+SA4", 0.5, ApBird, [62.25, 53.52, 45.41]),
        e("UPM+ResNet50+SA4", 0.5, Ap3d, [52.82, 43.10, 36.12]),
        e("UVPM+ResNet50+SA4", 0.5, Ap2d, [80.15, 72.66, 64.98]),
        e("UVPM+ResNet50+SA4", 0.5, ApBird, [64.27, 53.46, 46.98]),
        e("UVPM+ResNet50+SA4", 0.5, Ap3d, [51.24, 44.35, 35.32]),
    ]
}

/// The metric cross-product. Cells without any relevant truth (for
/// instance an empty run) report AP 0.
pub fn report(scenes: &[(Vec<Proposal>, Vec<TruthBox>)], cfgs: &[EvalConfig]) -> Report {
    let rows = cfgs
        .iter()
        .map(|c| ReportRow {
            metric: c.metric,
            iou: c.iou_threshold,
            difficulty: c.difficulty,
            ap: evaluate(scenes, c).unwrap_or(0.0),
        })
        .collect();
    Report {
        interpolation: cfgs.first().map_or(Interpolation::Eleven, |c| c.interpolation),
        rows,
        reference_note: REFERENCE_NOTE,
        reference: reference_block(),
    }
}

impl Report {
    /// Header `metric,iou,difficulty,ap`, one row per cell.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| EvalError::Csv(e.to_string());
        w.write_record(["metric", "iou", "difficulty", "ap"]).map_err(err)?;
        for r in &self.rows {
            w.write_record([r.metric.name().to_string(), r.iou.to_string(), r.difficulty.name().to_string(), r.ap.to_string()])
                .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Csv(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3D;

    fn truth(x: f64) -> TruthBox {
        TruthBox { bbox: Box3D::new([x, 0.0, -1.0], [3.9, 1.6, 1.56], 0.0), class: "Car".into(), annotations: None }
    }

    fn det(x: f64, s: f64) -> Proposal {
        Proposal::new(Box3D::new([x, 0.0, -1.0], [3.9, 1.6, 1.56], 0.0), s, vec![1.0], 0)
    }

    #[test]
    fn difficulty_examples() {
        let a = |h, o, t| Annotations { height_px: h, occlusion: o, truncation: t };
        assert_eq!(difficulty_bin(Some(&a(50.0, 0, 0.0))), DifficultyBin::Easy);
        assert_eq!(difficulty_bin(Some(&a(30.0, 1, 0.2))), DifficultyBin::Moderate);
        assert_eq!(difficulty_bin(Some(&a(20.0, 0, 0.0))), DifficultyBin::Ignored);
        assert_eq!(difficulty_bin(None), DifficultyBin::All);
    }

    #[test]
    fn matching_rules() {
        let cfg = EvalConfig::new(Metric::Ap3d, 0.5, Difficulty::All);
        let truths = vec![truth(10.0), truth(20.0)];
        let exact = vec![det(10.0, 0.9), det(20.0, 0.8)];
        let m = match_detections(&exact, &truths, &cfg);
        assert_eq!((m.tp(), m.fp()), (2, 0));
        let m = match_detections(&[], &truths, &cfg);
        assert_eq!(m.tp(), 0);
        assert!(m.truth_matched.iter().all(|&x| !x));
        let dup = vec![det(10.1, 0.7), det(10.0, 0.9)];
        let m = match_detections(&dup, &truths[..1], &cfg);
        assert_eq!(m.detections[0].outcome, Outcome::Tp(0));
        assert_eq!(m.detections[0].index, 1);
        assert_eq!(m.detections[1].outcome, Outcome::Fp);
    }

    #[test]
    fn hand_pr_case() {
        let mk = |s: f64, tp: bool| DetectionMatch { index: 0, score: s, outcome: if tp { Outcome::Tp(0) } else { Outcome::Fp } };
        let r = MatchResult {
            detections: vec![mk(0.9, true), mk(0.8, false), mk(0.7, true), mk(0.6, true)],
            truth_matched: vec![true; 3],
            n_relevant: 3,
        };
        let ap = average_precision(&[r], Interpolation::Eleven).unwrap();
        assert_eq!(ap, (4.0 * 1.0 + 7.0 * 0.75) / 11.0);
    }

    #[test]
    fn degenerate_ap() {
        assert_eq!(average_precision(&[], Interpolation::Eleven), Err(EvalError::NoTruths));
        let cfg = EvalConfig::new(Metric::ApBird, 0.3, Difficulty::All);
        let truths = vec![truth(10.0)];
        assert_eq!(evaluate(&[(vec![], truths.clone())], &cfg).unwrap(), 0.0);
        assert_eq!(evaluate(&[(vec![det(10.0, 0.5)], truths)], &cfg).unwrap(), 1.0);
    }

    #[test]
    fn csv_layout() {
        let r = report(&[], &standard_configs());
        let csv = r.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("metric,iou,difficulty,ap"));
        assert_eq!(lines.count(), 18);
        assert!(r.rows.iter().all(|row| row.ap == 0.0));
        assert!(r.to_json().contains("reference, not reproduced"));
    }
}
