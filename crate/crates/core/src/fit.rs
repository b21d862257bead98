//! Initialization and Adam optimization of pose and shape for every instance
//! of a scene, plus box, occupancy, and confidence extraction.

use crate::energy::{total_energy, EnergyError, EnergyTerms, EnergyWeights, Evaluation, Observation};
use crate::geom::{wrap_angle, Pose, Vec3};
use crate::metrics::Box3d;
use crate::prior::{ShapeCode, ShapePrior};
use crate::render::{median, occlusion_maps, Mask, OcclusionMap, RenderConfig};
use crate::scene::{fit_scene_ground, frustum_points, FrustumCloud, GroundPlane, RansacConfig, Scene, N_MIN};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::sync::atomic::{AtomicBool, Ordering};
use thiserror::Error;

/// Bound on normalized shape coordinates `s_k / sigma_k`.
pub const CODE_LIMIT: f64 = 3.0;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("decoded shape has no interior")]
    EmptyShape,
    #[error("only {0} frustum points")]
    TooFewPoints(usize),
    #[error("cancelled")]
    Cancelled,
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub yaw_seeds: usize,
    pub seed_trial_iters: usize,
    /// Yaw is optimized in units of this many radians.
    pub yaw_scale: f64,
    /// Move the median initializer back along the horizontal viewing ray by
    /// a quarter of the mean shape's length plus width. The median lies on
    /// the visible surface, not at the object center.
    pub recenter_init: bool,
    pub weights: EnergyWeights,
    pub render: RenderConfig,
    pub n_min: usize,
    /// Frustums larger than this are evenly subsampled for the energy. 0 keeps all points.
    pub max_points: usize,
    pub ransac: RansacConfig,
    /// Stop once the best energy improves by less than 1e-6 over 10 steps.
    pub plateau_stop: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            iterations: 150,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            yaw_seeds: 4,
            seed_trial_iters: 30,
            yaw_scale: 0.4,
            recenter_init: true,
            weights: EnergyWeights::default(),
            render: RenderConfig::default(),
            n_min: N_MIN,
            max_points: 256,
            ransac: RansacConfig::default(),
            plateau_stop: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.seed_trial_iters < 1 || self.iterations < self.seed_trial_iters {
            return bad("need iterations >= seed_trial_iters >= 1");
        }
        if !(self.yaw_scale > 0.0 && self.yaw_scale.is_finite()) {
            return bad("yaw_scale must be positive");
        }
        if self.yaw_seeds < 1 {
            return bad("yaw_seeds must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps be positive");
        }
        self.weights.validate().map_err(|e| FitError::Config(e.to_string()))?;
        self.render.validate().map_err(FitError::Config)?;
        Ok(())
    }

    /// Yaw seeds evenly spaced over the circle, starting at 0.
    pub fn seed_angles(&self) -> Vec<f64> {
        let step = 2.0 * std::f64::consts::PI / self.yaw_seeds as f64;
        (0..self.yaw_seeds).map(|k| k as f64 * step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Ok,
    LowPoints,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub id: u32,
    pub status: FitStatus,
    pub pose: Pose,
    pub code: ShapeCode,
    pub bbox: Option<Box3d>,
    pub confidence: f64,
    pub energy: EnergyTerms,
    pub iterations: usize,
    pub frustum_points: usize,
    /// Index of the retained yaw seed.
    pub seed: usize,
    /// Lowest energy of each seed during the trial steps.
    pub trial_energies: Vec<f64>,
}

/// Progress report after one optimizer step of one instance.
#[derive(Debug, Clone)]
pub struct Progress {
    pub instance_id: u32,
    /// Steps completed on the instance, counting each trial step once.
    pub iteration: usize,
    /// Lowest energy seen so far.
    pub energy: f64,
    pub pose: Pose,
    pub code: ShapeCode,
}

#[derive(Default, Clone, Copy)]
pub struct FitHooks<'a> {
    pub on_step: Option<&'a (dyn Fn(&Progress) + Sync)>,
    pub cancel: Option<&'a AtomicBool>,
}

impl FitHooks<'_> {
    fn cancelled(&self) -> bool {
        self.cancel.is_some_and(|c| c.load(Ordering::Relaxed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// All instances advance together, one iteration at a time, in parallel.
    Batched,
    /// Each instance runs to completion before the next starts.
    Sequential,
}

/// Initial poses: coordinate-wise median position with every yaw seed.
pub fn init_instance(frustum: &FrustumCloud, prior: &ShapePrior, cfg: &FitConfig) -> Result<Vec<(Pose, ShapeCode)>, FitError> {
    if frustum.len() < cfg.n_min.max(1) {
        return Err(FitError::TooFewPoints(frustum.len()));
    }
    let c = median_point(&frustum.points).expect("non-empty frustum");
    Ok(cfg
        .seed_angles()
        .into_iter()
        .map(|th| (Pose::new(c.x, c.y, c.z, th).expect("finite frustum points"), ShapeCode::zeros(prior.dim())))
        .collect())
}

/// Shifts seed positions away from `eye` in the ground plane by a quarter of
/// the mean shape's length plus width.
pub fn recenter(seeds: &mut [(Pose, ShapeCode)], prior: &ShapePrior, eye: &Vec3) {
    let Some((lo, hi)) = local_bounds(prior, &ShapeCode::zeros(prior.dim())) else { return };
    let d = ((hi.x - lo.x) + (hi.y - lo.y)) / 4.0;
    for (p, _) in seeds {
        let (dx, dy) = (p.x - eye.x, p.y - eye.y);
        let n = dx.hypot(dy);
        if n > 1e-9 {
            p.x += d * dx / n;
            p.y += d * dy / n;
        }
    }
}

pub fn median_point(points: &[Vec3]) -> Option<Vec3> {
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    let zs: Vec<f64> = points.iter().map(|p| p.z).collect();
    Some(Vec3::new(median(&xs)?, median(&ys)?, median(&zs)?))
}

/// Box around the voxel centers with `phi >= 0`, padded by half a voxel.
pub fn extract_box(prior: &ShapePrior, s: &ShapeCode, p: &Pose) -> Result<Box3d, FitError> {
    let (lo, hi) = local_bounds(prior, s).ok_or(FitError::EmptyShape)?;
    let mid = (lo + hi) / 2.0;
    let c = p.object_to_world(&mid);
    Ok(Box3d {
        center: [c.x, c.y, c.z],
        dims: [hi.x - lo.x, hi.y - lo.y, hi.z - lo.z],
        yaw: p.theta,
    })
}

/// Object-frame padded bounds of the decoded interior.
pub fn local_bounds(prior: &ShapePrior, s: &ShapeCode) -> Option<(Vec3, Vec3)> {
    prior.field(s).occupied_bounds()
}

/// Binary world-frame occupancy grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// World coordinate of the lower corner of voxel (0, 0, 0).
    pub min: [f64; 3],
    /// `dims[0] * dims[1] * dims[2]` cells, x fastest.
    pub data: Vec<u8>,
}

impl Occupancy {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    pub fn volume(&self) -> f64 {
        self.count() as f64 * self.voxel_size.powi(3)
    }
}

/// Marks every output voxel whose center maps inside the shape.
pub fn export_occupancy(prior: &ShapePrior, s: &ShapeCode, p: &Pose, voxel_size: f64, min: Vec3, max: Vec3) -> Occupancy {
    let dims = [0, 1, 2].map(|a| ((max[a] - min[a]) / voxel_size).round().max(0.0) as usize);
    let field = prior.field(s);
    let mut data = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let w = min + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * voxel_size;
                data.push(u8::from(field.sample(&p.world_to_object(&w)) >= 0.0));
            }
        }
    }
    Occupancy {
        dims,
        voxel_size,
        min: [min.x, min.y, min.z],
        data,
    }
}

/// IoU of the binarized, occlusion-masked projection against the binarized target.
pub fn confidence(y_proj: &Mask, o: &OcclusionMap, y: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for ((&p, &vis), &t) in y_proj.values().iter().zip(&o.data).zip(y.values()) {
        let a = p >= 0.5 && vis == 1;
        let b = t >= 0.5;
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Same as [`confidence`] with the projection given only inside the
/// evaluation window (zero elsewhere).
fn window_confidence(obs: &Observation<'_>, e: &Evaluation, target: &Mask) -> f64 {
    let (t, vis) = obs.gather(&e.lattice.window);
    let (mut inter, mut a_count) = (0usize, 0usize);
    for ((p, o), t) in e.projection().iter().zip(&vis).zip(&t) {
        let a = *p >= 0.5 && *o == 1.0;
        a_count += usize::from(a);
        inter += usize::from(a && *t >= 0.5);
    }
    let union = a_count + target.count_on() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone)]
struct Track {
    q: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    best_e: f64,
    best_q: Vec<f64>,
    best_terms: EnergyTerms,
    failed: bool,
}

impl Track {
    fn new(pose: &Pose, code: &ShapeCode, scales: &[f64]) -> Self {
        let mut q = vec![pose.x, pose.y, pose.z, pose.theta / scales[3]];
        q.extend(code.0.iter().zip(&scales[4..]).map(|(s, sg)| (s / sg).clamp(-CODE_LIMIT, CODE_LIMIT)));
        Self {
            m: vec![0.0; q.len()],
            v: vec![0.0; q.len()],
            best_q: q.clone(),
            q,
            t: 0,
            best_e: f64::INFINITY,
            best_terms: EnergyTerms::default(),
            failed: false,
        }
    }
}

/// Optimizer coordinates are the parameters divided by these scales.
fn coordinate_scales(prior: &ShapePrior, cfg: &FitConfig) -> Vec<f64> {
    let mut v = vec![1.0, 1.0, 1.0, cfg.yaw_scale];
    v.extend_from_slice(prior.sigma());
    v
}

fn decode_q(q: &[f64], scales: &[f64]) -> (Pose, ShapeCode) {
    let pose = Pose {
        x: q[0],
        y: q[1],
        z: q[2],
        theta: wrap_angle(q[3] * scales[3]),
    };
    (pose, ShapeCode(q[4..].iter().zip(&scales[4..]).map(|(u, s)| u * s).collect()))
}

/// One instance's optimizer: seed trials, then a single continued track.
struct Runner<'a> {
    id: u32,
    scales: Vec<f64>,
    frustum_points: usize,
    obs: Observation<'a>,
    tracks: Vec<Track>,
    chosen: Option<usize>,
    step: usize,
    done: bool,
    history: Vec<f64>,
    trial: Vec<f64>,
}

impl Runner<'_> {
    fn evaluate(&self, prior: &ShapePrior, cfg: &FitConfig, q: &[f64], grad: bool) -> Option<(EnergyTerms, Vec<f64>)> {
        let (pose, code) = decode_q(q, &self.scales);
        let e = total_energy(prior, &code, &pose, &self.obs, &cfg.weights, &cfg.render, grad).ok()?;
        e.terms.total.is_finite().then_some((e.terms, e.grad))
    }

    fn adam_step(&self, prior: &ShapePrior, cfg: &FitConfig, tr: &mut Track) {
        if tr.failed {
            return;
        }
        let Some((terms, grad)) = self.evaluate(prior, cfg, &tr.q, true) else {
            tr.failed = true;
            return;
        };
        if terms.total < tr.best_e {
            tr.best_e = terms.total;
            tr.best_q.clone_from(&tr.q);
            tr.best_terms = terms;
        }
        tr.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(tr.t);
        let c2 = 1.0 - b2.powi(tr.t);
        for i in 0..tr.q.len() {
            // chain rule into normalized shape coordinates
            let g = grad[i] * self.scales[i];
            tr.m[i] = b1 * tr.m[i] + (1.0 - b1) * g;
            tr.v[i] = b2 * tr.v[i] + (1.0 - b2) * g * g;
            tr.q[i] -= cfg.learning_rate * (tr.m[i] / c1) / ((tr.v[i] / c2).sqrt() + cfg.adam_eps);
        }
        tr.q[3] = wrap_angle(tr.q[3] * self.scales[3]) / self.scales[3];
        for u in &mut tr.q[4..] {
            *u = u.clamp(-CODE_LIMIT, CODE_LIMIT);
        }
    }

    fn advance(&mut self, prior: &ShapePrior, cfg: &FitConfig) {
        if self.done {
            return;
        }
        let mut tracks = std::mem::take(&mut self.tracks);
        match self.chosen {
            None => {
                for tr in &mut tracks {
                    self.adam_step(prior, cfg, tr);
                }
            }
            Some(c) => self.adam_step(prior, cfg, &mut tracks[c]),
        }
        self.tracks = tracks;
        self.step += 1;
        if self.chosen.is_none() && self.step == cfg.seed_trial_iters {
            // lowest trial energy wins; ties go to the earlier (smaller) seed
            let mut best = 0;
            for (k, tr) in self.tracks.iter().enumerate() {
                if tr.best_e < self.tracks[best].best_e {
                    best = k;
                }
            }
            self.chosen = Some(best);
            self.trial = self.tracks.iter().map(|t| t.best_e).collect();
        }
        self.history.push(self.best_energy());
        if self.step >= cfg.iterations {
            self.finish(prior, cfg);
        } else if cfg.plateau_stop && self.history.len() > 10 {
            let h = &self.history;
            if h[h.len() - 11] - h[h.len() - 1] < 1e-6 && self.chosen.is_some() {
                self.finish(prior, cfg);
            }
        }
    }

    fn finish(&mut self, prior: &ShapePrior, cfg: &FitConfig) {
        let c = self.chosen.unwrap_or(0);
        let q = self.tracks[c].q.clone();
        if !self.tracks[c].failed {
            if let Some((terms, _)) = self.evaluate(prior, cfg, &q, false) {
                let tr = &mut self.tracks[c];
                if terms.total < tr.best_e {
                    tr.best_e = terms.total;
                    tr.best_q = q;
                    tr.best_terms = terms;
                }
            }
        }
        self.done = true;
    }

    fn best_energy(&self) -> f64 {
        match self.chosen {
            Some(c) => self.tracks[c].best_e,
            None => self.tracks.iter().map(|t| t.best_e).fold(f64::INFINITY, f64::min),
        }
    }

    fn best_q(&self) -> &[f64] {
        match self.chosen {
            Some(c) => &self.tracks[c].best_q,
            None => {
                let mut b = 0;
                for (k, t) in self.tracks.iter().enumerate() {
                    if t.best_e < self.tracks[b].best_e {
                        b = k;
                    }
                }
                &self.tracks[b].best_q
            }
        }
    }

    fn report(&self, hooks: &FitHooks<'_>) {
        if let Some(f) = hooks.on_step {
            let (pose, code) = decode_q(self.best_q(), &self.scales);
            f(&Progress {
                instance_id: self.id,
                iteration: self.step,
                energy: self.best_energy(),
                pose,
                code,
            });
        }
    }
}

/// Everything derived from the scene before optimization starts.
pub struct Prepared {
    pub ground: Option<GroundPlane>,
    pub frustums: Vec<FrustumCloud>,
    pub occlusion: Vec<OcclusionMap>,
    /// Instance indices that carry a mask.
    pub masked: Vec<usize>,
}

/// Ground plane, frustums, and occlusion maps for the masked instances.
pub fn prepare(scene: &Scene, cfg: &FitConfig) -> Prepared {
    let ground = fit_scene_ground(scene, &cfg.ransac).ok();
    let masked: Vec<usize> = (0..scene.instances.len()).filter(|&i| scene.instances[i].mask.is_some()).collect();
    let frustums: Vec<FrustumCloud> = masked
        .iter()
        .map(|&i| {
            let inst = &scene.instances[i];
            frustum_points(scene, inst.id, inst.mask.as_ref().expect("masked"), ground.as_ref())
        })
        .collect();
    let bins: Vec<Mask> = masked.iter().map(|&i| scene.instances[i].mask.as_ref().expect("masked").binarized()).collect();
    let pairs: Vec<(&Mask, &[f64])> = bins.iter().zip(&frustums).map(|(m, f)| (m, f.depths.as_slice())).collect();
    let occlusion = occlusion_maps(&pairs);
    Prepared {
        ground,
        frustums,
        occlusion,
        masked,
    }
}

/// Fits every instance of the scene. Results are ordered by instance id.
pub fn fit_scene(scene: &Scene, prior: &ShapePrior, cfg: &FitConfig, mode: FitMode, hooks: FitHooks<'_>) -> Result<Vec<FitResult>, FitError> {
    fit_instances(scene, prior, cfg, mode, hooks, None)
}

/// Like [`fit_scene`] but only the listed instances are optimized and
/// returned. Ground, frustums, and occlusion still come from the whole scene,
/// so each result equals the corresponding entry of a full-scene fit.
pub fn fit_instances(
    scene: &Scene,
    prior: &ShapePrior,
    cfg: &FitConfig,
    mode: FitMode,
    hooks: FitHooks<'_>,
    only: Option<&[u32]>,
) -> Result<Vec<FitResult>, FitError> {
    cfg.validate()?;
    let wanted = |id: u32| only.is_none_or(|ids| ids.contains(&id));
    let prep = prepare(scene, cfg);
    // without a ground estimate the ground term is dropped
    let flat = GroundPlane::flat(0.0);
    let mut run_cfg = *cfg;
    if prep.ground.is_none() {
        run_cfg.weights.w_ground = 0.0;
        if run_cfg.weights.validate().is_err() {
            run_cfg.weights.w_pc = 1.0;
        }
    }
    let ground = prep.ground.as_ref().unwrap_or(&flat);
    let mut results: Vec<Option<FitResult>> = vec![None; scene.instances.len()];
    let scales = coordinate_scales(prior, &run_cfg);
    let subsampled: Vec<(FrustumCloud, f64)> = prep.frustums.iter().map(|f| subsample(f, run_cfg.max_points)).collect();
    let mut runners: Vec<(usize, Runner<'_>)> = Vec::new();
    for (slot, &i) in prep.masked.iter().enumerate() {
        let inst = &scene.instances[i];
        if !wanted(inst.id) {
            continue;
        }
        let frustum = &prep.frustums[slot];
        let (sub, weight) = &subsampled[slot];
        let target = inst.mask.as_ref().expect("masked");
        match init_instance(frustum, prior, &run_cfg) {
            Ok(mut seeds) => {
                if run_cfg.recenter_init {
                    recenter(&mut seeds, prior, &scene.camera.center());
                }
                let mut obs = Observation::new(&scene.camera, target, &prep.occlusion[slot], sub, ground)?;
                obs.point_weight = *weight;
                runners.push((
                    i,
                    Runner {
                        id: inst.id,
                        scales: scales.clone(),
                        frustum_points: frustum.len(),
                        obs,
                        tracks: seeds.iter().map(|(p, c)| Track::new(p, c, &scales)).collect(),
                        chosen: None,
                        step: 0,
                        done: false,
                        history: Vec::new(),
                        trial: Vec::new(),
                    },
                ));
            }
            Err(_) => results[i] = Some(fallback(inst.id, frustum, prior)),
        }
    }
    match mode {
        FitMode::Batched => {
            for _ in 0..run_cfg.iterations {
                if hooks.cancelled() {
                    return Err(FitError::Cancelled);
                }
                runners.par_iter_mut().for_each(|(_, r)| {
                    if !r.done {
                        r.advance(prior, &run_cfg);
                        r.report(&hooks);
                    }
                });
            }
        }
        FitMode::Sequential => {
            for (_, r) in runners.iter_mut() {
                while !r.done {
                    if hooks.cancelled() {
                        return Err(FitError::Cancelled);
                    }
                    r.advance(prior, &run_cfg);
                    r.report(&hooks);
                }
            }
        }
    }
    for (i, r) in &runners {
        let target = scene.instances[*i].mask.as_ref().expect("masked");
        results[*i] = Some(finalize(r, prior, &run_cfg, target));
    }
    let mut out: Vec<FitResult> = results
        .into_iter()
        .enumerate()
        .filter(|(i, _)| wanted(scene.instances[*i].id))
        .map(|(i, r)| r.unwrap_or_else(|| unmasked(scene.instances[i].id, prior)))
        .collect();
    out.sort_by_key(|r| r.id);
    Ok(out)
}

/// Runs the seed trials and continued optimization for one observation
/// from the given starting points.
pub fn fit_observation(
    id: u32,
    obs: Observation<'_>,
    seeds: &[(Pose, ShapeCode)],
    prior: &ShapePrior,
    cfg: &FitConfig,
    target: &Mask,
    hooks: FitHooks<'_>,
) -> Result<FitResult, FitError> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(FitError::Config("at least one seed is required".into()));
    }
    let scales = coordinate_scales(prior, cfg);
    let mut r = Runner {
        id,
        scales: scales.clone(),
        frustum_points: obs.frustum.len(),
        obs,
        tracks: seeds.iter().map(|(p, c)| Track::new(p, c, &scales)).collect(),
        chosen: None,
        step: 0,
        done: false,
        history: Vec::new(),
        trial: Vec::new(),
    };
    while !r.done {
        if hooks.cancelled() {
            return Err(FitError::Cancelled);
        }
        r.advance(prior, cfg);
        r.report(&hooks);
    }
    Ok(finalize(&r, prior, cfg, target))
}

fn finalize(r: &Runner<'_>, prior: &ShapePrior, cfg: &FitConfig, target: &Mask) -> FitResult {
    let c = r.chosen.unwrap_or(0);
    let tr = &r.tracks[c];
    let (pose, code) = decode_q(&tr.best_q, &r.scales);
    let bbox = extract_box(prior, &code, &pose).ok();
    let status = if tr.best_e.is_finite() && bbox.is_some() { FitStatus::Ok } else { FitStatus::Degenerate };
    let confidence = if status == FitStatus::Ok {
        let e = total_energy(prior, &code, &pose, &r.obs, &cfg.weights, &cfg.render, false);
        e.map(|e| window_confidence(&r.obs, &e, target)).unwrap_or(0.0)
    } else {
        0.0
    };
    FitResult {
        id: r.id,
        status,
        pose,
        code,
        bbox,
        confidence,
        energy: tr.best_terms,
        iterations: r.step,
        frustum_points: r.frustum_points,
        seed: c,
        trial_energies: r.trial.clone(),
    }
}

/// Evenly spaced subsample of at most `max` points and the weight n/m that
/// keeps summed terms on the full-cloud scale.
pub fn subsample(f: &FrustumCloud, max: usize) -> (FrustumCloud, f64) {
    let n = f.len();
    if max == 0 || n <= max {
        return (f.clone(), 1.0);
    }
    let pick: Vec<usize> = (0..max).map(|i| i * n / max).collect();
    let sub = FrustumCloud {
        instance_id: f.instance_id,
        points: pick.iter().map(|&i| f.points[i]).collect(),
        depths: pick.iter().map(|&i| f.depths[i]).collect(),
        indices: pick.iter().map(|&i| f.indices[i]).collect(),
    };
    (sub, n as f64 / max as f64)
}

/// Mean shape at the median frustum point, confidence 0.
fn fallback(id: u32, frustum: &FrustumCloud, prior: &ShapePrior) -> FitResult {
    let Some(c) = median_point(&frustum.points) else { return unmasked(id, prior) };
    let pose = Pose::new(c.x, c.y, c.z, 0.0).expect("finite points");
    let code = ShapeCode::zeros(prior.dim());
    FitResult {
        id,
        status: FitStatus::LowPoints,
        bbox: extract_box(prior, &code, &pose).ok(),
        pose,
        code,
        confidence: 0.0,
        energy: EnergyTerms::default(),
        iterations: 0,
        frustum_points: frustum.len(),
        seed: 0,
        trial_energies: Vec::new(),
    }
}

/// Instances with no mask or no usable points at all.
fn unmasked(id: u32, prior: &ShapePrior) -> FitResult {
    FitResult {
        id,
        status: FitStatus::Degenerate,
        pose: Pose::identity(),
        code: ShapeCode::zeros(prior.dim()),
        bbox: None,
        confidence: 0.0,
        energy: EnergyTerms::default(),
        iterations: 0,
        frustum_points: 0,
        seed: 0,
        trial_energies: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub weights: EnergyWeights,
    pub lr: f64,
    pub iters: usize,
    pub zeta: f64,
}

impl ConfigEcho {
    pub fn from_config(cfg: &FitConfig) -> Self {
        Self {
            weights: cfg.weights,
            lr: cfg.learning_rate,
            iters: cfg.iterations,
            zeta: cfg.render.zeta,
        }
    }
}

/// One entry of a labels file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub id: u32,
    pub status: FitStatus,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub shape_code: Vec<f64>,
    pub confidence: f64,
    pub energy: EnergyTerms,
    pub config_echo: ConfigEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsFile {
    pub instances: Vec<Label>,
}

impl Label {
    pub fn from_result(r: &FitResult, cfg: &FitConfig) -> Self {
        let (center, dims) = match &r.bbox {
            Some(b) => (b.center, b.dims),
            None => ([r.pose.x, r.pose.y, r.pose.z], [0.0; 3]),
        };
        Self {
            id: r.id,
            status: r.status,
            center,
            dims,
            yaw: r.pose.theta,
            shape_code: r.code.0.clone(),
            confidence: r.confidence,
            energy: r.energy,
            config_echo: ConfigEcho::from_config(cfg),
        }
    }

    pub fn to_box(&self) -> Option<Box3d> {
        (self.dims.iter().all(|d| *d > 0.0)).then_some(Box3d {
            center: self.center,
            dims: self.dims,
            yaw: self.yaw,
        })
    }
}

impl LabelsFile {
    pub fn from_results(results: &[FitResult], cfg: &FitConfig) -> Self {
        Self {
            instances: results.iter().map(|r| Label::from_result(r, cfg)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("labels serialize");
        s.push('\n');
        s
    }
}

/// Seed yaw of index `k` of `n`, wrapped; exposed for tests and tools.
pub fn seed_angle(k: usize, n: usize) -> f64 {
    wrap_angle(k as f64 * 4.0 * FRAC_PI_2 / n as f64)
}
