//! Flat `key = value` run configuration with `#` comments.
//!
//! Angles are given in degrees, lengths in meters; lists are comma
//! separated. Unknown keys are errors so typos do not pass silently.

use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::cloudio::SceneSpec;
use crate::eval::Interpolation;
use crate::frontview::ProjectionConfig;
use crate::uvpm::{ProposalMode, UvpmConfig, VoteMode};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("exactly one data source is required (`dataset` or `synthetic_seeds`)")]
    DataSource,
}

/// Where scans come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Every `.bin` file in the directory, in name order.
    Dataset(PathBuf),
    /// One generated scene per seed.
    Synthetic(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: DataSource,
    /// Scene generator template; the seed is replaced per scene.
    pub scene: SceneSpec,
    pub projection: ProjectionConfig,
    pub uvpm: UvpmConfig,
    pub iou_thresholds: Vec<f64>,
    pub interpolation: Interpolation,
    pub learned_seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source: DataSource::Synthetic(vec![42]),
            scene: SceneSpec::default(),
            projection: ProjectionConfig::default(),
            uvpm: UvpmConfig::default(),
            iou_thresholds: vec![0.3, 0.5],
            interpolation: Interpolation::Eleven,
            learned_seed: 0,
            out: None,
        }
    }
}

/// `(line, key, value)` triples in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if out.iter().any(|(_, key, _)| key == k) {
            return Err(ConfigError::Duplicate { line, key: k.to_string() });
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn scalar<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigError::Value { line, key: key.to_string(), msg: e.to_string() })
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| scalar(line, key, s.trim())).collect()
}

fn fixed<const N: usize>(line: usize, key: &str, v: &str) -> Result<[f64; N], ConfigError> {
    let xs: Vec<f64> = list(line, key, v)?;
    xs.try_into().map_err(|xs: Vec<f64>| ConfigError::Value {
        line,
        key: key.to_string(),
        msg: format!("expected {N} values, got {}", xs.len()),
    })
}

/// Seeds as a list (`1,2,5`) and/or inclusive ranges (`1..20`).
fn seeds(line: usize, key: &str, v: &str) -> Result<Vec<u64>, ConfigError> {
    let mut out = Vec::new();
    for part in v.split(',').map(str::trim) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (scalar(line, key, a.trim())?, scalar(line, key, b.trim())?);
                out.extend(a..=b);
            }
            None => out.push(scalar(line, key, part)?),
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_str_checked(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        let mut dataset = None;
        let mut synthetic = None;
        for (line, key, v) in parse_pairs(text)? {
            let k = key.as_str();
            let bad = |msg: &str| ConfigError::Value { line, key: key.clone(), msg: msg.to_string() };
            let deg = |v: &str| scalar::<f64>(line, k, v).map(f64::to_radians);
            match k {
                "dataset" => dataset = Some(PathBuf::from(v)),
                "synthetic_seeds" => synthetic = Some(seeds(line, k, &v)?),
                "out" => c.out = Some(PathBuf::from(v)),
                "n_objects" => c.scene.n_objects = scalar(line, k, &v)?,
                "points_per_object" => c.scene.points_per_object = scalar(line, k, &v)?,
                "noise_sigma" => c.scene.noise_sigma = scalar(line, k, &v)?,
                "ground_points" => c.scene.ground_points = scalar(line, k, &v)?,
                "delta_theta_deg" => c.projection.delta_theta = deg(&v)?,
                "delta_phi_deg" => c.projection.delta_phi = deg(&v)?,
                "theta_range_deg" => c.projection.theta_range = fixed::<2>(line, k, &v)?.map(f64::to_radians),
                "phi_range_deg" => c.projection.phi_range = fixed::<2>(line, k, &v)?.map(f64::to_radians),
                "delta" => c.uvpm.delta = scalar(line, k, &v)?,
                "epsilon" => c.uvpm.epsilon = scalar(line, k, &v)?,
                "shell_tolerance" => c.uvpm.shell_tolerance = scalar(line, k, &v)?,
                "n_seeds" => c.uvpm.n_seeds = scalar(line, k, &v)?,
                "k_clusters" => c.uvpm.k_clusters = scalar(line, k, &v)?,
                "vote_radius" => c.uvpm.vote_radius = scalar(line, k, &v)?,
                "cluster_radius" => c.uvpm.cluster_radius = scalar(line, k, &v)?,
                "min_vote_points" => c.uvpm.min_vote_points = scalar(line, k, &v)?,
                "prior_scale" => c.uvpm.prior_scale = fixed::<3>(line, k, &v)?,
                "yaw_steps" => c.uvpm.yaw_steps = scalar(line, k, &v)?,
                "anchor_spacing" => c.uvpm.anchor_spacing = scalar(line, k, &v)?,
                "extent_x" => c.uvpm.extent.0 = fixed::<2>(line, k, &v)?,
                "extent_y" => c.uvpm.extent.1 = fixed::<2>(line, k, &v)?,
                "template_z" => c.uvpm.template_z = scalar(line, k, &v)?,
                "ground_clearance" => c.uvpm.ground_clearance = scalar(line, k, &v)?,
                "patch_size" => c.uvpm.patch_size = scalar(line, k, &v)?,
                "nms_threshold" => c.uvpm.nms_threshold = scalar(line, k, &v)?,
                "mode" => {
                    c.uvpm.mode = match v.as_str() {
                        "uvpm" => ProposalMode::Voting,
                        "upm" => ProposalMode::UpmCompat,
                        _ => return Err(bad("expected uvpm or upm")),
                    }
                }
                "vote" => {
                    c.uvpm.vote_mode = match v.as_str() {
                        "geometric" => VoteMode::Geometric,
                        "learned" => VoteMode::Learned,
                        _ => return Err(bad("expected geometric or learned")),
                    }
                }
                "learned_seed" => c.learned_seed = scalar(line, k, &v)?,
                "iou_thresholds" => c.iou_thresholds = list(line, k, &v)?,
                "interpolation" => {
                    c.interpolation = match v.as_str() {
                        "11" => Interpolation::Eleven,
                        "40" => Interpolation::Forty,
                        _ => return Err(bad("expected 11 or 40")),
                    }
                }
                _ => return Err(ConfigError::UnknownKey { line, key: key.clone() }),
            }
        }
        c.source = match (dataset, synthetic) {
            (Some(d), None) => DataSource::Dataset(d),
            (None, Some(s)) => DataSource::Synthetic(s),
            (None, None) => c.source,
            (Some(_), Some(_)) => return Err(ConfigError::DataSource),
        };
        Ok(c)
    }
}
