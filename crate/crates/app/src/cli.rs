//! Command-line entry points.

use crate::error::AppError;
use clap::{Args, Parser, Subcommand};
use shapefit_core::fit::{fit_scene, FitConfig, FitHooks, FitMode, LabelsFile};
use shapefit_core::metrics::harness::{run_harness, suite_scene, Cell, PriorCache, SuiteSpec};
use shapefit_core::metrics::{evaluate, Box3d, EvalReport, Frame};
use shapefit_core::prior::{build_prior, procedural_bank, ShapePrior, BANK_SIZE};
use shapefit_core::scene::load_scene;
use shapefit_core::sdf::{GridMeta, SdfGrid};
use shapefit_core::synth::{write_synth, GtFile, GT_FILE};
use std::path::{Path, PathBuf};

/// Labels file name inside a scene directory.
pub const LABELS_FILE: &str = "labels.json";
/// Dimension of the prior that synthetic ground-truth shapes are drawn from.
pub const GT_DIM: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "shapefit", version, about = "Fit a PCA SDF car prior to masks and LiDAR")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a PCA shape prior from SDF grids.
    BuildPrior(BuildPriorArgs),
    /// Fit every masked instance of a scene.
    Fit(FitArgs),
    /// Generate seeded synthetic scenes with ground truth.
    Synth(SynthArgs),
    /// Score labels against ground truth.
    Eval(EvalArgs),
    /// Run a synthetic ablation suite.
    Harness(HarnessArgs),
    /// Serve the labeling API.
    Serve(ServeArgs),
    /// Serve a stand-in segmenter that answers every prompt with a disk.
    StubSegmenter(StubArgs),
}

#[derive(Debug, Args)]
pub struct BuildPriorArgs {
    /// Directory of `.sdf` grids, or `procedural:<count>`.
    #[arg(long, default_value = "procedural:79")]
    pub models: String,
    #[arg(long, default_value_t = 5)]
    pub dim: usize,
    /// Grid dimensions `LxWxH`.
    #[arg(long, default_value = "64x32x32")]
    pub grid: String,
    #[arg(long, default_value_t = 0.1)]
    pub voxel: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub prior: PathBuf,
    #[arg(long, default_value_t = 150)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_mask: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_pc: f64,
    #[arg(long, default_value_t = 0.1)]
    pub w_ground: f64,
    #[arg(long, default_value_t = 40.0)]
    pub zeta: f64,
    /// JSON fit configuration; the flags above override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optimize instances one after another instead of as one batch.
    #[arg(long)]
    pub sequential: bool,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub scenes: usize,
    #[arg(long, default_value_t = 64)]
    pub beams: usize,
    /// Prior the ground-truth shapes are drawn from; a procedural
    /// 79-model, 10-component prior when omitted.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labels file, or a directory of scene directories holding labels.json.
    #[arg(long)]
    pub pred: PathBuf,
    /// gt.json, or a directory of scene directories holding gt.json.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long = "iou", default_values_t = [0.5])]
    pub iou: Vec<f64>,
    /// Write the JSON report here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HarnessArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "SLF_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Segmenter URL, or `none` to accept client-drawn polygons.
    #[arg(long, env = "SLF_SEGMENTER_URL", default_value = "none")]
    pub segmenter: String,
    #[arg(long, env = "SLF_SCENES_DIR")]
    pub scenes: PathBuf,
    /// Prior file; the procedural default prior when omitted.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Concurrent fit jobs; hardware parallelism when omitted.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Directory that finished labels are written to.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StubArgs {
    #[arg(long, default_value_t = 8081)]
    pub port: u16,
    #[arg(long, default_value_t = 20)]
    pub radius: u32,
}

pub fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::BuildPrior(a) => build_prior_cmd(&a),
        Command::Fit(a) => fit_cmd(&a),
        Command::Synth(a) => synth_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Harness(a) => harness_cmd(&a),
        Command::Serve(a) => crate::service::serve_blocking(&a),
        Command::StubSegmenter(a) => crate::segmenter::serve_stub_blocking(a.port, a.radius),
    }
}

pub fn parse_grid(s: &str) -> Result<[usize; 3], AppError> {
    let parts: Vec<&str> = s.split('x').collect();
    let bad = || AppError::usage(format!("--grid expects LxWxH, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut dims = [0; 3];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p.trim().parse().map_err(|_| bad())?;
        if *d < 2 {
            return Err(bad());
        }
    }
    Ok(dims)
}

fn build_prior_cmd(a: &BuildPriorArgs) -> Result<(), AppError> {
    let dims = parse_grid(&a.grid)?;
    if !(a.voxel > 0.0 && a.voxel.is_finite()) {
        return Err(AppError::usage("--voxel must be positive"));
    }
    let meta = GridMeta::centered(dims, a.voxel);
    let bank = match a.models.strip_prefix("procedural:") {
        Some(n) => {
            let n: usize = n.parse().map_err(|_| AppError::usage(format!("bad model count in {:?}", a.models)))?;
            procedural_bank(n, meta).map_err(AppError::internal)?
        }
        None => read_bank(Path::new(&a.models), &meta)?,
    };
    if a.dim == 0 || a.dim >= bank.len() {
        return Err(AppError::usage(format!("--dim must lie in 1..{} for {} models", bank.len(), bank.len())));
    }
    let prior = build_prior(&bank, a.dim).map_err(AppError::data)?;
    prior.save(&a.out).map_err(|e| AppError::data(format!("{}: {e}", a.out.display())))?;
    eprintln!("prior: {} models, d={}, grid {:?} at {} m -> {}", bank.len(), a.dim, dims, a.voxel, a.out.display());
    Ok(())
}

fn read_bank(dir: &Path, meta: &GridMeta) -> Result<Vec<SdfGrid>, AppError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| AppError::data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "sdf"))
        .collect();
    files.sort();
    let mut bank = Vec::with_capacity(files.len());
    for f in &files {
        let g = SdfGrid::load(f).map_err(|e| AppError::data(format!("{}: {e}", f.display())))?;
        if g.meta() != meta {
            return Err(AppError::data(format!("{}: grid {:?} differs from --grid/--voxel", f.display(), g.meta())));
        }
        bank.push(g);
    }
    Ok(bank)
}

/// Fit configuration from an optional JSON file with the CLI flags applied.
pub fn fit_config(a: &FitArgs) -> Result<FitConfig, AppError> {
    let mut cfg = match &a.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| AppError::data(format!("{}: {e}", p.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| AppError::data(format!("{}: {e}", p.display())))?
        }
        None => FitConfig::default(),
    };
    cfg.iterations = a.iters;
    cfg.seed_trial_iters = cfg.seed_trial_iters.min(a.iters.max(1));
    cfg.learning_rate = a.lr;
    cfg.weights.w_mask = a.w_mask;
    cfg.weights.w_pc = a.w_pc;
    cfg.weights.w_ground = a.w_ground;
    cfg.render.zeta = a.zeta;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_prior(path: &Path) -> Result<ShapePrior, AppError> {
    ShapePrior::load(path).map_err(|e| AppError::data(format!("{}: {e}", path.display())))
}

fn fit_cmd(a: &FitArgs) -> Result<(), AppError> {
    let cfg = fit_config(a)?;
    let prior = load_prior(&a.prior)?;
    let scene = load_scene(&a.scene).map_err(|e| AppError::data(format!("{}: {e}", a.scene.display())))?;
    let mode = if a.sequential { FitMode::Sequential } else { FitMode::Batched };
    let results = fit_scene(&scene, &prior, &cfg, mode, FitHooks::default())?;
    let json = LabelsFile::from_results(&results, &cfg).to_json();
    match &a.out {
        Some(p) => write(p, json.as_bytes()),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), AppError> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| AppError::data(format!("{}: {e}", d.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| AppError::data(format!("{}: {e}", path.display())))
}

/// Directory name of synthetic scene `i`.
pub fn scene_dir_name(i: usize) -> String {
    format!("scene_{i:03}")
}

fn synth_cmd(a: &SynthArgs) -> Result<(), AppError> {
    let spec = SuiteSpec { seed: a.seed, ..Default::default() };
    let cell = Cell { beams: a.beams, ..Default::default() };
    let gt_prior = match &a.prior {
        Some(p) => std::sync::Arc::new(load_prior(p)?),
        None => PriorCache::default().get(BANK_SIZE, GT_DIM)?,
    };
    for i in 0..a.scenes {
        let s = suite_scene(&spec, &gt_prior, i, &cell)?;
        write_synth(&s, a.out.join(scene_dir_name(i)))?;
    }
    eprintln!("{} scene(s) -> {}", a.scenes, a.out.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AppError> {
    let bytes = std::fs::read(path).map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| AppError::data(format!("{}: {e}", path.display())))
}

fn frame(pred: &Path, gt: &Path) -> Result<Frame, AppError> {
    let labels: LabelsFile = read_json(pred)?;
    let gt = GtFile::load(gt).map_err(|e| AppError::data(format!("{}: {e}", gt.display())))?;
    Ok(Frame {
        preds: labels.instances.iter().filter_map(|l| l.to_box().map(|b| (l.confidence, b))).collect(),
        gts: gt.instances.iter().map(|g| g.to_box()).collect::<Vec<Box3d>>(),
    })
}

/// Pairs prediction and ground-truth files; directories are matched by
/// scene subdirectory name.
pub fn eval_frames(pred: &Path, gt: &Path) -> Result<Vec<Frame>, AppError> {
    if !gt.is_dir() {
        return Ok(vec![frame(pred, gt)?]);
    }
    if gt.join(GT_FILE).is_file() {
        let p = if pred.is_dir() { pred.join(LABELS_FILE) } else { pred.to_path_buf() };
        return Ok(vec![frame(&p, &gt.join(GT_FILE))?]);
    }
    let mut names: Vec<String> = std::fs::read_dir(gt)
        .map_err(|e| AppError::data(format!("{}: {e}", gt.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(GT_FILE).is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(AppError::data(format!("{}: no scene with {GT_FILE}", gt.display())));
    }
    names
        .iter()
        .map(|n| {
            let nested = pred.join(n).join(LABELS_FILE);
            let p = if nested.is_file() { nested } else { pred.join(format!("{n}.json")) };
            frame(&p, &gt.join(n).join(GT_FILE))
        })
        .collect()
}

pub fn eval_report(a: &EvalArgs) -> Result<EvalReport, AppError> {
    if a.iou.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(AppError::usage("--iou thresholds must lie in [0, 1]"));
    }
    Ok(evaluate(&eval_frames(&a.pred, &a.gt)?, &a.iou))
}

fn eval_cmd(a: &EvalArgs) -> Result<(), AppError> {
    let report = eval_report(a)?;
    if let Some(p) = &a.out {
        write(p, report.to_json().as_bytes())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn harness_cmd(a: &HarnessArgs) -> Result<(), AppError> {
    let spec: SuiteSpec = read_json(&a.suite)?;
    let report = run_harness(&spec)?;
    write(&a.out, report.to_csv().as_bytes())?;
    print!("{}", report.to_table());
    Ok(())
}
