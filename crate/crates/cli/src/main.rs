use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wsdet::cloudio::{
    atomic_write, generate_scene, read_detections, read_truth, read_velodyne_bin, write_detections, write_truth,
};
use wsdet::config::{DataSource, RunConfig};
use wsdet::eval::{report, Difficulty, EvalConfig, Metric};
use wsdet::frontview::{build_map, render_pgm, Channel};
use wsdet::micronet::{run_distill_demo, DemoConfig, PointBackbone, PointBackboneConfig};
use wsdet::uvpm::{propose, ProposalMode, VoteMode};
use wsdet::{Box3D, PointCloud, Proposal, TruthBox};

/// Exit code when AP is undefined because no ground truth exists.
const EXIT_UNDEFINED_AP: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "wsdet", version, about = "Label-free lidar proposals and KITTI-style evaluation")]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run a single synthetic scene with this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    vote: Option<VoteArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Uvpm,
    Upm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VoteArg {
    Geometric,
    Learned,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Front-view maps: one PGM per scan plus an occupancy stats line.
    Project,
    /// Proposals: one detection file per scan (and truth for synthetic scans).
    Propose,
    /// Metric table (CSV + JSON) and one BEV SVG per scene.
    Evaluate {
        /// Directory of `<scene>.det` files (default: the output directory).
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Directory of `<scene>.truth` files (default: the output
        /// directory for synthetic runs, the dataset directory otherwise).
        #[arg(long)]
        truths: Option<PathBuf>,
    },
    /// Train the micro student against the scripted teacher.
    DistillDemo {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
    },
    /// BEV SVG of each scan with truth (green) and detections (red) if present.
    Render,
}

struct Scan {
    id: String,
    cloud: PointCloud,
    truth: Option<Vec<TruthBox>>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            RunConfig::from_str_checked(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.source = DataSource::Synthetic(vec![s]);
    }
    if let Some(m) = cli.mode {
        cfg.uvpm.mode = match m {
            ModeArg::Uvpm => ProposalMode::Voting,
            ModeArg::Upm => ProposalMode::UpmCompat,
        };
    }
    if let Some(v) = cli.vote {
        cfg.uvpm.vote_mode = match v {
            VoteArg::Geometric => VoteMode::Geometric,
            VoteArg::Learned => VoteMode::Learned,
        };
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("cannot read dataset directory {}", dir.display()))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.with_context(|| format!("listing {}", dir.display()))?.path();
        if p.extension().is_some_and(|x| x == "bin") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn scene_id(seed: u64) -> String {
    format!("seed{seed:06}")
}

fn load_scans(cfg: &RunConfig) -> Result<Vec<Scan>> {
    match &cfg.source {
        DataSource::Synthetic(seeds) => seeds
            .iter()
            .map(|&seed| {
                let scene = generate_scene(&wsdet::SceneSpec { rng_seed: seed, ..cfg.scene.clone() })?;
                Ok(Scan { id: scene_id(seed), cloud: scene.cloud, truth: Some(scene.truth) })
            })
            .collect(),
        DataSource::Dataset(dir) => {
            let files = if dir.is_file() { vec![dir.clone()] } else { dataset_files(dir)? };
            files
                .iter()
                .map(|p| {
                    let cloud = read_velodyne_bin(p)?;
                    let id = p.file_stem().map_or_else(|| "scan".into(), |s| s.to_string_lossy().into_owned());
                    Ok(Scan { id, cloud, truth: None })
                })
                .collect()
        }
    }
}

fn cmd_project(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let mut stats = String::new();
    for scan in load_scans(cfg)? {
        let map = build_map(&scan.cloud, &cfg.projection)?;
        atomic_write(&dir.join(format!("{}_distance.pgm", scan.id)), &render_pgm(&map, Channel::Distance))?;
        let line = format!("{} points={} occupied={}", scan.id, scan.cloud.len(), map.occupied_count());
        println!("{line}");
        writeln!(stats, "{line}")?;
    }
    atomic_write(&dir.join("occupancy.txt"), stats.as_bytes())?;
    Ok(())
}

fn learned_backbone(cfg: &RunConfig) -> Option<PointBackbone> {
    (cfg.uvpm.vote_mode == VoteMode::Learned).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.learned_seed);
        PointBackbone::random(PointBackboneConfig::default(), &mut rng)
    })
}

fn cmd_propose(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let backbone = learned_backbone(cfg);
    for scan in load_scans(cfg)? {
        let map = build_map(&scan.cloud, &cfg.projection)?;
        let dets = propose(&scan.cloud, &map, &cfg.projection, &cfg.uvpm, backbone.as_ref())
            .with_context(|| format!("proposals for {}", scan.id))?;
        write_detections(&dets, dir.join(format!("{}.det", scan.id)))?;
        if let Some(t) = &scan.truth {
            write_truth(t, dir.join(format!("{}.truth", scan.id)))?;
        }
        println!("{} detections={}", scan.id, dets.len());
    }
    Ok(())
}

fn stems(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))?;
    let mut out = BTreeMap::new();
    for e in entries {
        let p = e.with_context(|| format!("listing {}", dir.display()))?.path();
        if p.extension().is_some_and(|x| x == ext) {
            if let Some(s) = p.file_stem() {
                out.insert(s.to_string_lossy().into_owned(), p);
            }
        }
    }
    Ok(out)
}

/// Undefined-AP condition, reported with its own exit code.
#[derive(Debug)]
struct NoTruths;

impl std::fmt::Display for NoTruths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AP is undefined: the truth files contain no boxes")
    }
}

impl std::error::Error for NoTruths {}

fn cmd_evaluate(cfg: &RunConfig, detections: Option<PathBuf>, truths: Option<PathBuf>) -> Result<()> {
    let dir = out_dir(cfg)?;
    let det_dir = detections.unwrap_or_else(|| dir.clone());
    let truth_dir = truths.unwrap_or_else(|| match &cfg.source {
        DataSource::Dataset(d) if d.is_dir() => d.clone(),
        _ => dir.clone(),
    });
    let dets = stems(&det_dir, "det")?;
    let gts = stems(&truth_dir, "truth")?;
    if dets.is_empty() && gts.is_empty() {
        bail!("no detection or truth files in {} / {}", det_dir.display(), truth_dir.display());
    }
    let missing: Vec<&String> = dets.keys().filter(|k| !gts.contains_key(*k)).chain(gts.keys().filter(|k| !dets.contains_key(*k))).collect();
    if !missing.is_empty() {
        bail!("scene ids without a detection/truth pair: {}", missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "));
    }
    let mut scenes = Vec::new();
    for (id, dp) in &dets {
        let d = read_detections(dp)?;
        let t = read_truth(&gts[id])?;
        atomic_write(&dir.join(format!("{id}.svg")), render_svg(None, &t, &d).as_bytes())?;
        scenes.push((d, t));
    }
    if scenes.iter().all(|(_, t)| t.is_empty()) {
        return Err(NoTruths.into());
    }
    let mut cfgs = Vec::new();
    for metric in Metric::ALL {
        for &iou in &cfg.iou_thresholds {
            for d in [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard] {
                let mut c = EvalConfig::new(metric, iou, d);
                c.interpolation = cfg.interpolation;
                c.projection = cfg.projection;
                cfgs.push(c);
            }
        }
    }
    let rep = report(&scenes, &cfgs);
    atomic_write(&dir.join("metrics.csv"), rep.to_csv()?.as_bytes())?;
    atomic_write(&dir.join("metrics.json"), rep.to_json().as_bytes())?;
    println!("{:<8} {:>5} {:<9} {:>8}", "metric", "iou", "level", "AP");
    for r in &rep.rows {
        println!("{:<8} {:>5} {:<9} {:>8.4}", r.metric.name(), r.iou, r.difficulty.name(), r.ap);
    }
    println!("({})", rep.reference_note);
    Ok(())
}

fn cmd_distill_demo(cfg: &RunConfig, seed: Option<u64>, steps: usize, lr: f64) -> Result<()> {
    let dir = out_dir(cfg)?;
    let demo = DemoConfig { seed: seed.unwrap_or(DemoConfig::default().seed), steps, lr, ..DemoConfig::default() };
    let rep = run_distill_demo(&demo)?;
    if let Some(i) = rep.losses.iter().position(|l| !l.is_finite()) {
        bail!("loss became non-finite at step {i}");
    }
    let mut csv = String::from("step,loss\n");
    for (i, l) in rep.losses.iter().enumerate() {
        writeln!(csv, "{i},{l}")?;
        if i % 20 == 0 || i + 1 == rep.losses.len() {
            println!("step {i:>4} loss {l:.6e}");
        }
    }
    atomic_write(&dir.join("distill_losses.csv"), csv.as_bytes())?;
    println!("contributing pairs: {} of {}", rep.contributing, rep.teacher_scores.len());
    Ok(())
}

fn cmd_render(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    for scan in load_scans(cfg)? {
        let det_path = dir.join(format!("{}.det", scan.id));
        let dets = if det_path.exists() { read_detections(&det_path)? } else { Vec::new() };
        let truth = scan.truth.unwrap_or_default();
        let path = dir.join(format!("{}_bev.svg", scan.id));
        atomic_write(&path, render_svg(Some(&scan.cloud), &truth, &dets).as_bytes())?;
        println!("{}", path.display());
    }
    Ok(())
}

/// Pixels per meter of the BEV render.
const SVG_SCALE: f64 = 10.0;

fn polygon(b: &Box3D, color: &str, to_px: &impl Fn(f64, f64) -> (f64, f64)) -> String {
    let pts: Vec<String> = b
        .bev_corners()
        .iter()
        .map(|c| {
            let (u, v) = to_px(c[0], c[1]);
            format!("{u:.1},{v:.1}")
        })
        .collect();
    format!("<polygon points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n", pts.join(" "))
}

/// SVG 1.1 bird's-eye view, x forward pointing up, y left pointing left.
fn render_svg(cloud: Option<&PointCloud>, truth: &[TruthBox], dets: &[Proposal]) -> String {
    let mut xs = vec![0.0, 40.0];
    let mut ys = vec![-20.0, 20.0];
    for b in truth.iter().map(|t| &t.bbox).chain(dets.iter().map(|d| &d.bbox)) {
        for c in b.bev_corners() {
            xs.push(c[0]);
            ys.push(c[1]);
        }
    }
    let lo_x = xs.iter().copied().fold(f64::INFINITY, f64::min) - 2.0;
    let hi_x = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 2.0;
    let lo_y = ys.iter().copied().fold(f64::INFINITY, f64::min) - 2.0;
    let hi_y = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 2.0;
    let (w, h) = ((hi_y - lo_y) * SVG_SCALE, (hi_x - lo_x) * SVG_SCALE);
    let to_px = |x: f64, y: f64| ((hi_y - y) * SVG_SCALE, (hi_x - x) * SVG_SCALE);
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.1} {h:.1}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    if let Some(cloud) = cloud {
        s.push_str("<g fill=\"#888888\">\n");
        for p in &cloud.points {
            if p.x >= lo_x && p.x <= hi_x && p.y >= lo_y && p.y <= hi_y {
                let (u, v) = to_px(p.x, p.y);
                let _ = writeln!(s, "<circle cx=\"{u:.1}\" cy=\"{v:.1}\" r=\"0.6\"/>");
            }
        }
        s.push_str("</g>\n");
    }
    let (u, v) = to_px(0.0, 0.0);
    let _ = writeln!(s, "<circle cx=\"{u:.1}\" cy=\"{v:.1}\" r=\"3\" fill=\"black\"/>");
    for t in truth {
        s.push_str(&polygon(&t.bbox, "green", &to_px));
    }
    for d in dets {
        s.push_str(&polygon(&d.bbox, "red", &to_px));
    }
    s.push_str("</svg>\n");
    s
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Project => cmd_project(&cfg),
        Command::Propose => cmd_propose(&cfg),
        Command::Evaluate { detections, truths } => cmd_evaluate(&cfg, detections, truths),
        Command::DistillDemo { steps, lr } => cmd_distill_demo(&cfg, cli.seed, steps, lr),
        Command::Render => cmd_render(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<NoTruths>() {
                ExitCode::from(EXIT_UNDEFINED_AP)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
