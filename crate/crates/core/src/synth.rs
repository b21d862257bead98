//! Seeded synthetic scenes with ground-truth labels: shapes drawn from a
//! prior, placed on a ground plane, rendered to masks, and scanned by a
//! simulated spinning LiDAR.

use crate::fit::{extract_box, FitError};
use crate::geom::{Camera, Pose, Vec3};
use crate::metrics::{bev_intersection, Box3d};
use crate::prior::{ShapeCode, ShapePrior};
use crate::render::{first_hit, hit_depths, Field, Mask};
use crate::scene::{save_scene, GroundPlane, Instance, Prompt, Scene, SceneError};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const GT_FILE: &str = "gt.json";
pub const IMAGE_FILE: &str = "img.png";
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place instance {0} without overlap after {PLACEMENT_ATTEMPTS} attempts")]
    PlacementFailure(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarModel {
    /// Full ring count before downsampling.
    pub rings: usize,
    /// Rings kept: every `rings / beams`-th ring.
    pub beams: usize,
    pub azimuths: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub range_noise: f64,
    pub max_range: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            rings: 64,
            beams: 64,
            azimuths: 900,
            elevation_min_deg: -25.0,
            elevation_max_deg: 3.0,
            range_noise: 0.02,
            max_range: 120.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSpec {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Height of the camera above the ground under it.
    pub mount_height: f64,
    /// Downward tilt in degrees.
    pub pitch_deg: f64,
}

impl CameraSpec {
    /// Half the horizontal field of view, radians.
    pub fn half_fov(&self) -> f64 {
        (self.width as f64 / 2.0 / self.focal).atan()
    }
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            width: 960,
            height: 540,
            focal: 540.0,
            mount_height: 1.6,
            pitch_deg: 3.0,
        }
    }
}

/// A placement that bypasses sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedInstance {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub code: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Inclusive instance-count range.
    pub instances: (usize, usize),
    /// Forward distance of the instance from the camera, meters.
    pub distance: (f64, f64),
    /// Bearing from the optical axis, degrees.
    pub bearing_deg: (f64, f64),
    pub theta: (f64, f64),
    /// Codes are drawn from a normal truncated at this many sigmas.
    pub code_scale: f64,
    pub lidar: LidarModel,
    pub camera: CameraSpec,
    pub ground: GroundPlane,
    /// BEV clearance kept between instances, meters.
    pub clearance: f64,
    /// Number of prompt points sampled inside each GT mask.
    pub prompt_points: usize,
    pub fixed: Option<Vec<FixedInstance>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: (1, 5),
            distance: (6.0, 40.0),
            bearing_deg: (-30.0, 30.0),
            theta: (-std::f64::consts::PI, std::f64::consts::PI),
            code_scale: 2.0,
            lidar: LidarModel::default(),
            camera: CameraSpec::default(),
            ground: GroundPlane::flat(0.0),
            clearance: 0.3,
            prompt_points: 3,
            fixed: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        let range = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if self.instances.0 > self.instances.1 || !range(self.distance) || !range(self.bearing_deg) || !range(self.theta) {
            return bad("ranges must be non-empty");
        }
        if self.distance.0 <= 0.0 {
            return bad("distance must be positive");
        }
        if !(self.lidar.range_noise >= 0.0) {
            return bad("range noise must be non-negative");
        }
        if ![64, 32, 16, 8].contains(&self.lidar.beams) || self.lidar.rings % self.lidar.beams != 0 {
            return bad("beams must be one of 64, 32, 16, 8 and divide the ring count");
        }
        if self.lidar.azimuths == 0 || !(self.code_scale >= 0.0) {
            return bad("azimuths must be positive and code_scale non-negative");
        }
        if self.camera.width == 0 || self.camera.height == 0 || !(self.camera.focal > 0.0) {
            return bad("camera must have positive size and focal length");
        }
        Ok(())
    }

    pub fn camera(&self) -> Camera {
        let c = &self.camera;
        let pos = Vec3::new(0.0, 0.0, self.ground.height_at(0.0, 0.0) + c.mount_height);
        Camera::looking_forward(c.focal, c.focal, c.width, c.height, pos, 0.0, c.pitch_deg.to_radians())
            .expect("validated camera spec")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub id: u32,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub shape_code: Vec<f64>,
    /// Pose of the shape's object frame, `[x, y, z, theta]`.
    pub pose: [f64; 4],
    /// Some silhouette pixel is hidden by a nearer instance.
    pub occluded: bool,
    /// LiDAR returns that hit this instance.
    pub lidar_points: usize,
}

impl GtInstance {
    pub fn to_box(&self) -> Box3d {
        Box3d {
            center: self.center,
            dims: self.dims,
            yaw: self.yaw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtFile {
    pub instances: Vec<GtInstance>,
}

impl GtFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SceneError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("gt serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub scene: Scene,
    pub gt: GtFile,
    /// Instance id hit by each LiDAR return, `None` for ground.
    pub owners: Vec<Option<u32>>,
    /// Composited GT mask per instance, before any corruption.
    pub gt_masks: Vec<Mask>,
}

/// Draws a placed, shaped instance set, renders masks, and scans it.
pub fn gen_scene(cfg: &SynthConfig, prior: &ShapePrior) -> Result<SynthScene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let camera = cfg.camera();
    let placed = match &cfg.fixed {
        Some(list) => list
            .iter()
            .map(|f| {
                if f.code.len() != prior.dim() {
                    return Err(SynthError::Config(format!("fixed code has {} entries, prior has {}", f.code.len(), prior.dim())));
                }
                place(prior, &cfg.ground, f.x, f.y, f.theta, ShapeCode(f.code.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => sample_instances(cfg, prior, &mut rng)?,
    };

    // composited masks: each pixel goes to the nearest surface
    let n_pix = (camera.width * camera.height) as usize;
    let mut owner = vec![usize::MAX; n_pix];
    let mut depth = vec![f64::INFINITY; n_pix];
    let mut own_area = vec![0usize; placed.len()];
    for (k, (pose, code, _)) in placed.iter().enumerate() {
        let field = prior.field(code);
        for (i, d) in hit_depths(&field, pose, &camera).into_iter().enumerate() {
            if let Some(d) = d {
                own_area[k] += 1;
                if d < depth[i] {
                    depth[i] = d;
                    owner[i] = k;
                }
            }
        }
    }
    let gt_masks: Vec<Mask> = (0..placed.len())
        .map(|k| {
            let data = owner.iter().map(|&o| if o == k { 1.0 } else { 0.0 }).collect();
            Mask::from_values(camera.width, camera.height, data).expect("camera-sized")
        })
        .collect();

    let (points, owners) = simulate_lidar(&placed.iter().map(|(p, c, _)| (p, c)).collect::<Vec<_>>(), prior, &cfg.ground, &cfg.lidar, &camera.center(), cfg.camera.half_fov(), &mut rng);

    let mut instances = Vec::new();
    let mut gt = Vec::new();
    for (k, (pose, code, bbox)) in placed.iter().enumerate() {
        let id = k as u32;
        let prompt = sample_prompt(&gt_masks[k], cfg.prompt_points, &mut rng);
        instances.push(Instance {
            id,
            mask: Some(gt_masks[k].clone()),
            prompt,
        });
        gt.push(GtInstance {
            id,
            center: bbox.center,
            dims: bbox.dims,
            yaw: bbox.yaw,
            shape_code: code.0.clone(),
            pose: [pose.x, pose.y, pose.z, pose.theta],
            occluded: gt_masks[k].count_on() < own_area[k],
            lidar_points: owners.iter().filter(|o| **o == Some(k as u32)).count(),
        });
    }
    let scene = Scene {
        camera,
        image: Some(IMAGE_FILE.to_string()),
        points: points.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
        instances,
    };
    Ok(SynthScene {
        scene,
        gt: GtFile { instances: gt },
        owners,
        gt_masks,
    })
}

type Placed = (Pose, ShapeCode, Box3d);

/// Sets z so the box bottom rests on the ground under the box center.
fn place(prior: &ShapePrior, ground: &GroundPlane, x: f64, y: f64, theta: f64, code: ShapeCode) -> Result<Placed, SynthError> {
    let probe = Pose::new(x, y, 0.0, theta).map_err(|e| SynthError::Config(e.to_string()))?;
    let b = extract_box(prior, &code, &probe)?;
    let bottom = b.center[2] - b.dims[2] / 2.0;
    let z = ground.height_at(b.center[0], b.center[1]) - bottom;
    let pose = Pose { z, ..probe };
    let mut bbox = b;
    bbox.center[2] = ground.height_at(b.center[0], b.center[1]) + b.dims[2] / 2.0;
    Ok((pose, code, bbox))
}

fn sample_instances(cfg: &SynthConfig, prior: &ShapePrior, rng: &mut ChaCha8Rng) -> Result<Vec<Placed>, SynthError> {
    let n = rng.gen_range(cfg.instances.0..=cfg.instances.1);
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    for k in 0..n {
        let code = ShapeCode(prior.sigma().iter().map(|s| s * truncated_normal(rng, cfg.code_scale)).collect());
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let dist = uniform(rng, cfg.distance);
            let bearing = uniform(rng, cfg.bearing_deg).to_radians();
            let theta = uniform(rng, cfg.theta);
            let cand = place(prior, &cfg.ground, dist, dist * bearing.tan(), theta, code.clone())?;
            let grown = inflate(&cand.2, cfg.clearance);
            if placed.iter().all(|p| bev_intersection(&grown, &inflate(&p.2, cfg.clearance)) <= 0.0) {
                ok = Some(cand);
                break;
            }
        }
        placed.push(ok.ok_or(SynthError::PlacementFailure(k))?);
    }
    Ok(placed)
}

fn inflate(b: &Box3d, margin: f64) -> Box3d {
    Box3d {
        dims: [b.dims[0] + margin, b.dims[1] + margin, b.dims[2]],
        ..*b
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..r.1)
    }
}

/// Standard normal rejected outside `[-limit, limit]`.
fn truncated_normal(rng: &mut ChaCha8Rng, limit: f64) -> f64 {
    if limit == 0.0 {
        return 0.0;
    }
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= limit {
            return v;
        }
    }
}

/// Uniform foreground pixels as click prompts.
pub fn sample_prompt(mask: &Mask, count: usize, rng: &mut ChaCha8Rng) -> Option<Prompt> {
    let on: Vec<usize> = mask.values().iter().enumerate().filter(|(_, v)| **v >= 0.5).map(|(i, _)| i).collect();
    if on.is_empty() || count == 0 {
        return None;
    }
    let w = mask.width() as usize;
    let points = (0..count)
        .map(|_| {
            let i = on[rng.gen_range(0..on.len())];
            [(i % w) as f64, (i / w) as f64]
        })
        .collect();
    Some(Prompt::Points { points })
}

/// Ray directions of the scan pattern, ring-major.
pub fn lidar_directions(model: &LidarModel, hfov: f64) -> Vec<(usize, Vec3)> {
    let mut out = Vec::with_capacity(model.rings * model.azimuths);
    for r in 0..model.rings {
        let e = if model.rings == 1 {
            model.elevation_min_deg
        } else {
            model.elevation_min_deg + (model.elevation_max_deg - model.elevation_min_deg) * r as f64 / (model.rings - 1) as f64
        }
        .to_radians();
        for a in 0..model.azimuths {
            let az = -hfov + 2.0 * hfov * (a as f64 + 0.5) / model.azimuths as f64;
            out.push((r, Vec3::new(e.cos() * az.cos(), e.cos() * az.sin(), e.sin())));
        }
    }
    out
}

/// Scans instances and ground from `origin` over azimuths in `[-hfov, hfov]`. Noise is drawn for every ray of
/// the full pattern, so kept rings see identical returns at any beam count.
pub fn simulate_lidar(
    shapes: &[(&Pose, &ShapeCode)],
    prior: &ShapePrior,
    ground: &GroundPlane,
    model: &LidarModel,
    origin: &Vec3,
    hfov: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec3>, Vec<Option<u32>>) {
    let keep = model.rings / model.beams.max(1);
    let fields: Vec<_> = shapes.iter().map(|(_, c)| prior.field(c)).collect();
    let mut points = Vec::new();
    let mut owners = Vec::new();
    for (ring, dir) in lidar_directions(model, hfov) {
        let noise: f64 = StandardNormal.sample(rng);
        if ring % keep != 0 {
            continue;
        }
        let mut best: Option<(f64, Option<u32>)> = ground_hit(ground, origin, &dir).filter(|t| *t <= model.max_range).map(|t| (t, None));
        for (k, ((pose, _), field)) in shapes.iter().zip(&fields).enumerate() {
            let limit = best.map_or(model.max_range, |b| b.0);
            if let Some(t) = first_hit(field as &dyn Field, pose, origin, &dir, 0.0, limit) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, Some(k as u32)));
                }
            }
        }
        if let Some((t, who)) = best {
            points.push(origin + dir * (t + model.range_noise * noise));
            owners.push(who);
        }
    }
    (points, owners)
}

fn ground_hit(g: &GroundPlane, o: &Vec3, d: &Vec3) -> Option<f64> {
    // z - a x - b y - c = 0 along o + t d
    let denom = d.z - g.a * d.x - g.b * d.y;
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = -(o.z - g.a * o.x - g.b * o.y - g.c) / denom;
    (t > 0.0).then_some(t)
}

/// Square-kernel erosion or dilation of a binarized mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Morph {
    Erode,
    Dilate,
}

pub fn corrupt_mask(mask: &Mask, op: Morph, kernel: usize) -> Mask {
    let r = (kernel / 2) as i64;
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let on = |u: i64, v: i64| u >= 0 && v >= 0 && u < w && v < h && mask.is_on(u as u32, v as u32);
    // separable: rows then columns
    let pass = |src: &dyn Fn(i64, i64) -> bool, horizontal: bool| -> Vec<bool> {
        let mut out = vec![false; (w * h) as usize];
        for v in 0..h {
            for u in 0..w {
                let mut acc = op == Morph::Erode;
                for k in -r..=r {
                    let (uu, vv) = if horizontal { (u + k, v) } else { (u, v + k) };
                    let inside = uu >= 0 && vv >= 0 && uu < w && vv < h;
                    let val = inside && src(uu, vv);
                    match op {
                        // out-of-frame counts as background for both ops
                        Morph::Erode => acc &= val,
                        Morph::Dilate => acc |= val,
                    }
                }
                out[(v * w + u) as usize] = acc;
            }
        }
        out
    };
    let first = pass(&on, true);
    let second = pass(&|u, v| first[(v * w + u) as usize], false);
    Mask::from_fn(mask.width(), mask.height(), |u, v| second[(v as i64 * w + u as i64) as usize])
}

/// Flat silhouette render for display.
pub fn render_image(masks: &[Mask], width: u32, height: u32) -> RgbImage {
    const PALETTE: [[u8; 3]; 6] = [[230, 90, 70], [70, 150, 230], [90, 200, 110], [230, 190, 60], [170, 100, 220], [60, 200, 200]];
    let mut img = RgbImage::from_pixel(width, height, Rgb([96, 96, 96]));
    for v in 0..height {
        let sky = v < height / 2;
        for u in 0..width {
            if sky {
                img.put_pixel(u, v, Rgb([170, 190, 210]));
            }
            for (k, m) in masks.iter().enumerate() {
                if m.is_on(u, v) {
                    img.put_pixel(u, v, Rgb(PALETTE[k % PALETTE.len()]));
                }
            }
        }
    }
    img
}

/// Writes the scene directory, display image, and gt.json.
pub fn write_synth(s: &SynthScene, dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    save_scene(&s.scene, dir)?;
    render_image(&s.gt_masks, s.scene.camera.width, s.scene.camera.height).save(dir.join(IMAGE_FILE))?;
    std::fs::write(dir.join(GT_FILE), s.gt.to_json())?;
    Ok(())
}

/// Seed of scene `index` in a suite seeded with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}
