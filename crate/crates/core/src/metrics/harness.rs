//! Sweeps over energy terms, prior size, prompts, beams, and mask corruption
//! on a seeded synthetic suite.

use super::{evaluate, iou_3d, iou_bev, orientation_error, Box3d, EvalReport, Frame, IouKind};
use crate::energy::EnergyWeights;
use crate::fit::{fit_scene, FitConfig, FitHooks, FitMode, FitResult, FitStatus};
use crate::prior::{PriorError, ShapePrior};
use crate::render::median;
use crate::sdf::GridMeta;
use crate::synth::{corrupt_mask, gen_scene, scene_seed, Morph, SynthConfig, SynthError, SynthScene};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("spec error: {0}")]
    Spec(String),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Fit(#[from] crate::fit::FitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    pub scenes: usize,
    pub seed: u64,
    pub thresholds: Vec<f64>,
    /// Prior the ground-truth shapes are drawn from.
    pub gt_bank: usize,
    pub gt_dim: usize,
    /// Scene template; its seed is replaced per scene.
    pub synth: SynthConfig,
    pub fit: FitConfig,
    /// Axis name to values; each axis is varied alone around the base cell.
    pub axes: BTreeMap<String, Vec<serde_json::Value>>,
    /// Instances count as eligible when unoccluded with at least this many frustum points.
    pub eligible_points: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            scenes: 50,
            seed: 1,
            thresholds: vec![0.5, 0.7],
            gt_bank: 79,
            gt_dim: 10,
            synth: SynthConfig::default(),
            fit: FitConfig::default(),
            axes: BTreeMap::new(),
            eligible_points: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terms {
    Full,
    MaskPc,
    Pc,
    Mask,
}

impl Terms {
    pub fn weights(self, base: &EnergyWeights) -> EnergyWeights {
        let (m, p, g) = match self {
            Terms::Full => (base.w_mask, base.w_pc, base.w_ground),
            Terms::MaskPc => (base.w_mask, base.w_pc, 0.0),
            Terms::Pc => (0.0, base.w_pc, 0.0),
            Terms::Mask => (base.w_mask, 0.0, 0.0),
        };
        EnergyWeights { w_mask: m, w_pc: p, w_ground: g, ..*base }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "full" => Terms::Full,
            "mask+pc" | "mask_pc" => Terms::MaskPc,
            "pc" => Terms::Pc,
            "mask" => Terms::Mask,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Terms::Full => "full",
            Terms::MaskPc => "mask+pc",
            Terms::Pc => "pc",
            Terms::Mask => "mask",
        }
    }
}

/// One sweep setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub terms: Terms,
    pub dim: usize,
    pub bank: usize,
    pub points: usize,
    pub beams: usize,
    pub morph: Option<(Morph, usize)>,
}

impl Default for Cell {
    fn default() -> Self {
        Self {
            terms: Terms::Full,
            dim: 5,
            bank: 79,
            points: 3,
            beams: 64,
            morph: None,
        }
    }
}

fn parse_morph(s: &str) -> Option<Option<(Morph, usize)>> {
    Some(match s {
        "none" => None,
        "erode5" => Some((Morph::Erode, 5)),
        "erode9" => Some((Morph::Erode, 9)),
        "dilate5" => Some((Morph::Dilate, 5)),
        "dilate9" => Some((Morph::Dilate, 9)),
        _ => return None,
    })
}

fn morph_name(m: Option<(Morph, usize)>) -> String {
    match m {
        None => "none".into(),
        Some((Morph::Erode, k)) => format!("erode{k}"),
        Some((Morph::Dilate, k)) => format!("dilate{k}"),
    }
}

/// Cells of the sweep: the base cell, then each axis value in spec order.
pub fn expand_axes(spec: &SuiteSpec) -> Result<Vec<(String, String, Cell)>, HarnessError> {
    let mut cells = vec![("base".to_string(), "base".to_string(), Cell::default())];
    for (axis, values) in &spec.axes {
        for v in values {
            let bad = || HarnessError::Spec(format!("bad value {v} for axis {axis}"));
            let as_usize = || v.as_u64().map(|x| x as usize).ok_or_else(bad);
            let as_str = || v.as_str().ok_or_else(bad);
            let mut c = Cell::default();
            match axis.as_str() {
                "energy" => c.terms = Terms::parse(as_str()?).ok_or_else(bad)?,
                "dim" => c.dim = as_usize()?,
                "bank" => c.bank = as_usize()?,
                "points" => c.points = as_usize()?,
                "beams" => c.beams = as_usize()?,
                "morph" => c.morph = parse_morph(as_str()?).ok_or_else(bad)?,
                _ => return Err(HarnessError::Spec(format!("unknown sweep axis '{axis}'"))),
            }
            let label = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            cells.push((axis.clone(), label, c));
        }
    }
    Ok(cells)
}

/// Per-instance outcome compared with ground truth of the same id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub scene: usize,
    pub id: u32,
    pub occluded: bool,
    pub frustum_points: usize,
    pub status: FitStatus,
    pub iou_3d: f64,
    pub iou_bev: f64,
    pub center_error: f64,
    pub yaw_error: f64,
    pub yaw_error_dagger: f64,
    pub confidence: f64,
}

impl InstanceRecord {
    pub fn eligible(&self, min_points: usize) -> bool {
        !self.occluded && self.frustum_points >= min_points
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub axis: String,
    pub value: String,
    pub report: EvalReport,
    pub instances: Vec<InstanceRecord>,
    pub summary: CellSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    /// Mean 3D IoU over all instances, matched by id.
    pub mean_iou_3d: f64,
    pub mean_center_error: f64,
    pub eligible: usize,
    /// Fraction of eligible instances with 3D IoU of at least 0.5.
    pub eligible_recall_05: f64,
    pub median_center_error: f64,
    pub median_yaw_error_dagger: f64,
}

pub fn summarize(records: &[InstanceRecord], min_points: usize) -> CellSummary {
    let n = records.len().max(1) as f64;
    let el: Vec<&InstanceRecord> = records.iter().filter(|r| r.eligible(min_points)).collect();
    let ce: Vec<f64> = el.iter().map(|r| r.center_error).collect();
    let ye: Vec<f64> = el.iter().map(|r| r.yaw_error_dagger).collect();
    CellSummary {
        mean_iou_3d: records.iter().map(|r| r.iou_3d).sum::<f64>() / n,
        mean_center_error: records.iter().map(|r| r.center_error).sum::<f64>() / n,
        eligible: el.len(),
        eligible_recall_05: if el.is_empty() { 0.0 } else { el.iter().filter(|r| r.iou_3d >= 0.5).count() as f64 / el.len() as f64 },
        median_center_error: median(&ce).unwrap_or(0.0),
        median_yaw_error_dagger: median(&ye).unwrap_or(0.0),
    }
}

/// Procedural priors keyed by (bank size, requested dim); dims are capped at bank − 1.
#[derive(Default)]
pub struct PriorCache {
    priors: Mutex<HashMap<(usize, usize), std::sync::Arc<ShapePrior>>>,
}

impl PriorCache {
    pub fn get(&self, bank: usize, dim: usize) -> Result<std::sync::Arc<ShapePrior>, HarnessError> {
        let d = dim.min(bank.saturating_sub(1));
        if let Some(p) = self.priors.lock().expect("cache lock").get(&(bank, d)) {
            return Ok(p.clone());
        }
        let p = std::sync::Arc::new(ShapePrior::procedural(bank, d, GridMeta::centered([64, 32, 32], 0.1))?);
        self.priors.lock().expect("cache lock").insert((bank, d), p.clone());
        Ok(p)
    }
}

/// Scene `index` of the suite with the cell's sensor and prompt settings.
pub fn suite_scene(spec: &SuiteSpec, gt_prior: &ShapePrior, index: usize, cell: &Cell) -> Result<SynthScene, HarnessError> {
    let mut cfg = spec.synth.clone();
    cfg.seed = scene_seed(spec.seed, index);
    cfg.lidar.beams = cell.beams;
    cfg.prompt_points = cell.points;
    let mut s = gen_scene(&cfg, gt_prior)?;
    if let Some((op, k)) = cell.morph {
        for inst in &mut s.scene.instances {
            if let Some(m) = &inst.mask {
                inst.mask = Some(corrupt_mask(m, op, k));
            }
        }
    }
    Ok(s)
}

pub fn records_for(scene_index: usize, s: &SynthScene, results: &[FitResult]) -> Vec<InstanceRecord> {
    s.gt
        .instances
        .iter()
        .map(|g| {
            let r = results.iter().find(|r| r.id == g.id).expect("one result per instance");
            let gt_box = g.to_box();
            let (i3, ib) = match &r.bbox {
                Some(b) => (iou_3d(b, &gt_box).unwrap_or(0.0), iou_bev(b, &gt_box).unwrap_or(0.0)),
                None => (0.0, 0.0),
            };
            let c = r.bbox.map_or([r.pose.x, r.pose.y, r.pose.z], |b| b.center);
            InstanceRecord {
                scene: scene_index,
                id: g.id,
                occluded: g.occluded,
                frustum_points: r.frustum_points,
                status: r.status,
                iou_3d: i3,
                iou_bev: ib,
                center_error: (0..3).map(|k| (c[k] - g.center[k]).powi(2)).sum::<f64>().sqrt(),
                yaw_error: orientation_error(r.pose.theta, g.yaw, false),
                yaw_error_dagger: orientation_error(r.pose.theta, g.yaw, true),
                confidence: r.confidence,
            }
        })
        .collect()
}

pub fn frame_for(s: &SynthScene, results: &[FitResult]) -> Frame {
    Frame {
        preds: results.iter().filter_map(|r| r.bbox.map(|b| (r.confidence, b))).collect(),
        gts: s.gt.instances.iter().map(|g| g.to_box()).collect::<Vec<Box3d>>(),
    }
}

/// Fits every scene of the suite under one cell.
pub fn run_cell(spec: &SuiteSpec, cell: &Cell, priors: &PriorCache) -> Result<(EvalReport, Vec<InstanceRecord>), HarnessError> {
    let gt_prior = priors.get(spec.gt_bank, spec.gt_dim)?;
    let prior = priors.get(cell.bank, cell.dim)?;
    let mut cfg = spec.fit;
    cfg.weights = cell.terms.weights(&spec.fit.weights);
    let per_scene: Vec<(Frame, Vec<InstanceRecord>)> = (0..spec.scenes)
        .into_par_iter()
        .map(|i| {
            let s = suite_scene(spec, &gt_prior, i, cell)?;
            let results = fit_scene(&s.scene, &prior, &cfg, FitMode::Batched, FitHooks::default())?;
            Ok((frame_for(&s, &results), records_for(i, &s, &results)))
        })
        .collect::<Result<_, HarnessError>>()?;
    let (frames, records): (Vec<Frame>, Vec<Vec<InstanceRecord>>) = per_scene.into_iter().unzip();
    Ok((evaluate(&frames, &spec.thresholds), records.into_iter().flatten().collect()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarnessReport {
    pub cells: Vec<CellResult>,
}

/// Runs every cell; identical settings are computed once.
pub fn run_harness(spec: &SuiteSpec) -> Result<HarnessReport, HarnessError> {
    let cells = expand_axes(spec)?;
    let priors = PriorCache::default();
    let mut unique: Vec<Cell> = Vec::new();
    for (_, _, c) in &cells {
        if !unique.contains(c) {
            unique.push(*c);
        }
    }
    let computed: Vec<(EvalReport, Vec<InstanceRecord>)> = unique.par_iter().map(|c| run_cell(spec, c, &priors)).collect::<Result<_, _>>()?;
    let cells = cells
        .into_iter()
        .map(|(axis, value, c)| {
            let k = unique.iter().position(|u| *u == c).expect("cell computed");
            let (report, instances) = computed[k].clone();
            let summary = summarize(&instances, spec.eligible_points);
            CellResult { axis, value, report, instances, summary }
        })
        .collect();
    Ok(HarnessReport { cells })
}

impl HarnessReport {
    /// One row per (cell, metric).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,metric,score\n");
        for c in &self.cells {
            let mut row = |m: &str, v: f64| out.push_str(&format!("{},{},{},{:.6}\n", c.axis, c.value, m, v));
            for e in &c.report.ap {
                let k = match e.kind {
                    IouKind::Bev => "bev",
                    IouKind::ThreeD => "3d",
                };
                row(&format!("ap_{k}@{}", e.threshold), e.ap.unwrap_or(f64::NAN));
            }
            row("mean_iou_3d", c.summary.mean_iou_3d);
            row("mean_center_error", c.summary.mean_center_error);
            row("eligible_recall_05", c.summary.eligible_recall_05);
            row("median_center_error", c.summary.median_center_error);
            row("median_yaw_error_dagger", c.summary.median_yaw_error_dagger);
            row("ate", c.report.translation_error);
            row("ase", c.report.size_error);
            row("aoe", c.report.orientation_error);
            row("aoe_dagger", c.report.orientation_error_dagger);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:<10} {:>8} {:>8} {:>9} {:>9} {:>8}\n", "axis", "value", "AP3D.5", "AP3D.7", "meanIoU", "medCE(m)", "medAOE+");
        for c in &self.cells {
            let ap = |t: f64| c.report.ap_at(IouKind::ThreeD, t).map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
            s.push_str(&format!(
                "{:<8} {:<10} {:>8} {:>8} {:>9.4} {:>9.3} {:>8.2}\n",
                c.axis,
                c.value,
                ap(0.5),
                ap(0.7),
                c.summary.mean_iou_3d,
                c.summary.median_center_error,
                c.summary.median_yaw_error_dagger.to_degrees()
            ));
        }
        s
    }
}

pub fn cell_label(c: &Cell) -> String {
    format!("{} d={} bank={} pts={} beams={} morph={}", c.terms.name(), c.dim, c.bank, c.points, c.beams, morph_name(c.morph))
}
