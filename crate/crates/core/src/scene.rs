//! Scene data model, on-disk format, frustum extraction, and ground fitting.

use crate::geom::{Camera, GeomError, Vec3};
use crate::render::{Mask, MaskError, Rle};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Matrix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCENE_FILE: &str = "scene.json";
pub const POINTS_FILE: &str = "points.f32le";
/// Minimum frustum points for an instance to be fitted.
pub const N_MIN: usize = 5;
/// Points this close to the ground plane are left out of frustums.
pub const GROUND_EPS: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("bad calibration: {0}")]
    BadCalibration(String),
    #[error("mask of instance {id} is {got_w}x{got_h}, camera is {want_w}x{want_h}")]
    MaskSizeMismatch {
        id: u32,
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("duplicate instance id {0}")]
    DuplicateId(u32),
    #[error("points file length {0} is not a multiple of 12 bytes")]
    BadPoints(u64),
    #[error("only {found} frustum points, need {needed}")]
    TooFewPoints { found: usize, needed: usize },
    #[error("no acceptable ground plane: {0}")]
    DegenerateGround(String),
    #[error("invalid scene.json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<GeomError> for SceneError {
    fn from(e: GeomError) -> Self {
        SceneError::BadCalibration(e.to_string())
    }
}

/// User prompt for the segmenter, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prompt {
    Points { points: Vec<[f64; 2]> },
    Box {
        #[serde(rename = "box")]
        bbox: [f64; 4],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u32,
    pub mask: Option<Mask>,
    pub prompt: Option<Prompt>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub camera: Camera,
    /// Image file name relative to the scene directory.
    pub image: Option<String>,
    /// World-frame LiDAR points, kept in f32 as stored on disk.
    pub points: Vec<[f32; 3]>,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    /// World-to-camera rigid transform, row-major.
    #[serde(rename = "T_wc")]
    pub t_wc: [f64; 16],
    pub width: u32,
    pub height: u32,
}

impl CameraJson {
    pub fn from_camera(cam: &Camera) -> Self {
        let mut k = [0.0; 9];
        let mut t = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                k[r * 3 + c] = cam.intrinsics()[(r, c)];
            }
        }
        for r in 0..4 {
            for c in 0..4 {
                t[r * 4 + c] = cam.world_to_camera()[(r, c)];
            }
        }
        Self {
            k,
            t_wc: t,
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn to_camera(&self) -> Result<Camera, GeomError> {
        Camera::new(
            Matrix3::from_row_slice(&self.k),
            Matrix4::from_row_slice(&self.t_wc),
            self.width,
            self.height,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskRef {
    File(String),
    Rle { rle: Rle },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceJson {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<Prompt>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneJson {
    pub camera: CameraJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub points: String,
    pub instances: Vec<InstanceJson>,
}

impl Scene {
    pub fn point(&self, i: usize) -> Vec3 {
        let p = self.points[i];
        Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn points_f64(&self) -> Vec<Vec3> {
        (0..self.points.len()).map(|i| self.point(i)).collect()
    }

    pub fn instance(&self, id: u32) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let mut seen = HashSet::new();
        for inst in &self.instances {
            if !seen.insert(inst.id) {
                return Err(SceneError::DuplicateId(inst.id));
            }
            if let Some(m) = &inst.mask {
                if m.width() != self.camera.width || m.height() != self.camera.height {
                    return Err(SceneError::MaskSizeMismatch {
                        id: inst.id,
                        want_w: self.camera.width,
                        want_h: self.camera.height,
                        got_w: m.width(),
                        got_h: m.height(),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn mask_file_name(id: u32) -> String {
    format!("m_{id}.png")
}

fn require(path: PathBuf) -> Result<PathBuf, SceneError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(SceneError::MissingFile(path))
    }
}

pub fn read_points(path: &Path) -> Result<Vec<[f32; 3]>, SceneError> {
    let path = require(path.to_path_buf())?;
    let len = std::fs::metadata(&path)?.len();
    if len % 12 != 0 {
        return Err(SceneError::BadPoints(len));
    }
    let mut r = BufReader::new(std::fs::File::open(&path)?);
    let mut pts = Vec::with_capacity((len / 12) as usize);
    for _ in 0..len / 12 {
        pts.push([
            r.read_f32::<LittleEndian>()?,
            r.read_f32::<LittleEndian>()?,
            r.read_f32::<LittleEndian>()?,
        ]);
    }
    Ok(pts)
}

pub fn write_points(path: &Path, points: &[[f32; 3]]) -> Result<(), SceneError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in points {
        for c in p {
            w.write_f32::<LittleEndian>(*c)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_scene(dir: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let dir = dir.as_ref();
    let json_path = require(dir.join(SCENE_FILE))?;
    let sj: SceneJson = serde_json::from_reader(BufReader::new(std::fs::File::open(json_path)?))?;
    let camera = sj.camera.to_camera()?;
    if let Some(img) = &sj.image {
        require(dir.join(img))?;
    }
    let points = read_points(&dir.join(&sj.points))?;
    let mut instances = Vec::with_capacity(sj.instances.len());
    for ij in sj.instances {
        let mask = match ij.mask {
            None => None,
            Some(MaskRef::File(name)) => Some(Mask::load_png(require(dir.join(name))?)?),
            Some(MaskRef::Rle { rle }) => Some(rle.decode()?),
        };
        instances.push(Instance {
            id: ij.id,
            mask,
            prompt: ij.prompt,
        });
    }
    let scene = Scene {
        camera,
        image: sj.image,
        points,
        instances,
    };
    scene.validate()?;
    Ok(scene)
}

/// Writes `scene.json`, the point file, and one PNG per instance mask. The
/// image file named by `scene.image` is not written here.
pub fn save_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<(), SceneError> {
    scene.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_points(&dir.join(POINTS_FILE), &scene.points)?;
    let mut instances = Vec::with_capacity(scene.instances.len());
    for inst in &scene.instances {
        let mask = match &inst.mask {
            Some(m) => {
                let name = mask_file_name(inst.id);
                m.save_png(dir.join(&name))?;
                Some(MaskRef::File(name))
            }
            None => None,
        };
        instances.push(InstanceJson {
            id: inst.id,
            mask,
            prompt: inst.prompt.clone(),
        });
    }
    let sj = SceneJson {
        camera: CameraJson::from_camera(&scene.camera),
        image: scene.image.clone(),
        points: POINTS_FILE.into(),
        instances,
    };
    let mut f = BufWriter::new(std::fs::File::create(dir.join(SCENE_FILE))?);
    serde_json::to_writer_pretty(&mut f, &sj)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Ground plane `z = a x + b y + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub inliers: usize,
    pub threshold: f64,
}

impl GroundPlane {
    pub fn flat(height: f64) -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            c: height,
            inliers: 0,
            threshold: 0.0,
        }
    }

    #[inline]
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        self.a * x + self.b * y + self.c
    }

    /// Signed vertical offset of a point above the plane.
    #[inline]
    pub fn residual(&self, p: &Vec3) -> f64 {
        p.z - self.height_at(p.x, p.y)
    }

    /// Upward unit normal.
    pub fn normal(&self) -> Vec3 {
        Vec3::new(-self.a, -self.b, 1.0).normalize()
    }

    pub fn slope(&self) -> f64 {
        self.a.hypot(self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 512,
            threshold: 0.05,
            seed: 7,
        }
    }
}

const MAX_SLOPE: f64 = 0.577_350_269_189_625_8; // tan 30°

fn plane_through(p: &Vec3, q: &Vec3, r: &Vec3) -> Option<(f64, f64, f64)> {
    let n = (q - p).cross(&(r - p));
    if n.z.abs() < 1e-9 * n.norm().max(1e-300) || n.norm() < 1e-12 {
        return None;
    }
    let (a, b) = (-n.x / n.z, -n.y / n.z);
    Some((a, b, p.z - a * p.x - b * p.y))
}

fn least_squares_plane(points: &[Vec3]) -> Option<(f64, f64, f64)> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vec3::zeros();
    for p in points {
        let row = Vec3::new(p.x, p.y, 1.0);
        ata += row * row.transpose();
        atb += row * p.z;
    }
    let sol = ata.lu().solve(&atb)?;
    sol.iter().all(|v| v.is_finite()).then_some((sol.x, sol.y, sol.z))
}

/// Robust plane fit over candidate points.
///
/// Candidates are sorted by coordinates first, so the result does not depend
/// on the input order.
pub fn fit_ground_ransac(points: &[Vec3], cfg: &RansacConfig) -> Result<GroundPlane, SceneError> {
    let mut cand: Vec<Vec3> = points.iter().filter(|p| p.iter().all(|v| v.is_finite())).copied().collect();
    if cand.len() < 3 {
        return Err(SceneError::DegenerateGround(format!("{} candidate points", cand.len())));
    }
    cand.sort_by(|p, q| p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)).then(p.z.total_cmp(&q.z)));
    let count = |a: f64, b: f64, c: f64| cand.iter().filter(|p| (p.z - a * p.x - b * p.y - c).abs() <= cfg.threshold).count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cand.len();
    let mut best: Option<((f64, f64, f64), usize)> = None;
    for _ in 0..cfg.iterations {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.gen_range(0..n - 2);
        for lo in [i.min(j), i.max(j)] {
            if k >= lo {
                k += 1;
            }
        }
        let Some((a, b, c)) = plane_through(&cand[i], &cand[j], &cand[k]) else { continue };
        if a.hypot(b) >= MAX_SLOPE {
            continue;
        }
        let inl = count(a, b, c);
        if best.is_none_or(|(_, m)| inl > m) {
            best = Some(((a, b, c), inl));
        }
    }
    let Some(((mut a, mut b, mut c), mut inl)) = best else {
        return Err(SceneError::DegenerateGround("no non-degenerate hypothesis".into()));
    };
    // two refinement passes on the current inlier set
    for _ in 0..2 {
        let inliers: Vec<Vec3> = cand
            .iter()
            .filter(|p| (p.z - a * p.x - b * p.y - c).abs() <= cfg.threshold)
            .copied()
            .collect();
        let Some((ra, rb, rc)) = least_squares_plane(&inliers) else { break };
        if ra.hypot(rb) >= MAX_SLOPE {
            break;
        }
        let ri = count(ra, rb, rc);
        if ri < inl {
            break;
        }
        (a, b, c, inl) = (ra, rb, rc, ri);
    }
    if inl < 3 || (inl as f64) < 0.1 * n as f64 {
        return Err(SceneError::DegenerateGround(format!("{inl} of {n} inliers")));
    }
    Ok(GroundPlane {
        a,
        b,
        c,
        inliers: inl,
        threshold: cfg.threshold,
    })
}

/// Points considered for the ground: those well below the camera.
pub fn ground_candidates(scene: &Scene) -> Vec<Vec3> {
    let limit = scene.camera.center().z - 0.5;
    scene.points_f64().into_iter().filter(|p| p.z < limit).collect()
}

pub fn fit_scene_ground(scene: &Scene, cfg: &RansacConfig) -> Result<GroundPlane, SceneError> {
    fit_ground_ransac(&ground_candidates(scene), cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrustumCloud {
    pub instance_id: u32,
    pub points: Vec<Vec3>,
    /// Camera-frame depth of each point.
    pub depths: Vec<f64>,
    /// Index of each point in the scene cloud.
    pub indices: Vec<usize>,
}

impl FrustumCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn require(&self, n_min: usize) -> Result<(), SceneError> {
        if self.len() < n_min {
            return Err(SceneError::TooFewPoints {
                found: self.len(),
                needed: n_min,
            });
        }
        Ok(())
    }
}

/// Scene points in front of the camera that land on a foreground pixel of
/// `mask`, minus those within [`GROUND_EPS`] of `ground`.
pub fn frustum_points(scene: &Scene, instance_id: u32, mask: &Mask, ground: Option<&GroundPlane>) -> FrustumCloud {
    let mut out = FrustumCloud {
        instance_id,
        points: Vec::new(),
        depths: Vec::new(),
        indices: Vec::new(),
    };
    for i in 0..scene.points.len() {
        let p = scene.point(i);
        if !p.iter().all(|v| v.is_finite()) {
            continue;
        }
        let Ok((u, v, depth)) = scene.camera.project_point(&p) else { continue };
        let Some((col, row)) = scene.camera.pixel_index(u, v) else { continue };
        if !mask.is_on(col as u32, row as u32) {
            continue;
        }
        if let Some(g) = ground {
            if g.residual(&p).abs() <= GROUND_EPS {
                continue;
            }
        }
        out.points.push(p);
        out.depths.push(depth);
        out.indices.push(i);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Uniform};

    fn camera() -> Camera {
        Camera::looking_forward(100.0, 100.0, 80, 60, Vec3::new(0.0, 0.0, 1.6), 0.0, 0.0).unwrap()
    }

    fn empty_scene() -> Scene {
        Scene {
            camera: camera(),
            image: None,
            points: vec![],
            instances: vec![],
        }
    }

    #[test]
    fn minimal_scene_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        save_scene(&empty_scene(), dir.path()).unwrap();
        let s = load_scene(dir.path()).unwrap();
        assert!(s.instances.is_empty());
        assert_eq!(s, empty_scene());
    }

    #[test]
    fn scene_round_trip_with_masks_and_prompts() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = empty_scene();
        s.points = vec![[1.5, -0.25, 0.1], [f32::MIN_POSITIVE, 3.0e7, -1.0e-7]];
        s.instances = vec![
            Instance {
                id: 3,
                mask: Some(Mask::from_fn(80, 60, |u, v| u > 10 && v < 20)),
                prompt: Some(Prompt::Points { points: vec![[12.0, 5.5]] }),
            },
            Instance {
                id: 9,
                mask: None,
                prompt: Some(Prompt::Box { bbox: [1.0, 2.0, 30.0, 40.0] }),
            },
        ];
        save_scene(&s, dir.path()).unwrap();
        assert_eq!(load_scene(dir.path()).unwrap(), s);
    }

    #[test]
    fn rle_masks_and_json_shape() {
        let dir = tempfile::tempdir().unwrap();
        write_points(&dir.path().join(POINTS_FILE), &[]).unwrap();
        let m = Mask::from_fn(80, 60, |u, _| u < 4);
        let json = serde_json::json!({
            "camera": CameraJson::from_camera(&camera()),
            "points": POINTS_FILE,
            "instances": [{"id": 0, "mask": {"rle": m.to_rle()}, "prompt": {"box": [0, 0, 3, 59]}}]
        });
        std::fs::write(dir.path().join(SCENE_FILE), json.to_string()).unwrap();
        let s = load_scene(dir.path()).unwrap();
        assert_eq!(s.instances[0].mask.as_ref().unwrap(), &m);
        assert_eq!(s.instances[0].prompt, Some(Prompt::Box { bbox: [0.0, 0.0, 3.0, 59.0] }));
    }

    #[test]
    fn wrong_mask_size_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = empty_scene();
        s.instances.push(Instance { id: 0, mask: None, prompt: None });
        save_scene(&s, dir.path()).unwrap();
        Mask::zeros(10, 10).save_png(dir.path().join("m_0.png")).unwrap();
        let text = std::fs::read_to_string(dir.path().join(SCENE_FILE)).unwrap();
        let text = text.replace("\"id\": 0", "\"id\": 0, \"mask\": \"m_0.png\"");
        std::fs::write(dir.path().join(SCENE_FILE), text).unwrap();
        assert!(matches!(load_scene(dir.path()), Err(SceneError::MaskSizeMismatch { .. })));
    }

    #[test]
    fn missing_points_file() {
        let dir = tempfile::tempdir().unwrap();
        save_scene(&empty_scene(), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(POINTS_FILE)).unwrap();
        assert!(matches!(load_scene(dir.path()), Err(SceneError::MissingFile(_))));
    }

    #[test]
    fn frustum_excludes_background_and_behind() {
        let mut s = empty_scene();
        // on the optical axis, off to the side, behind the camera
        s.points = vec![[10.0, 0.0, 1.6], [10.0, 3.0, 1.6], [-10.0, 0.0, 1.6]];
        let mask = Mask::from_fn(80, 60, |u, v| (35..45).contains(&u) && (25..35).contains(&v));
        let f = frustum_points(&s, 0, &mask, None);
        assert_eq!(f.indices, vec![0]);
        assert!((f.depths[0] - 10.0).abs() < 1e-6);
        let behind = Scene {
            points: vec![[-5.0, 0.0, 1.6]; 10],
            ..empty_scene()
        };
        let f = frustum_points(&behind, 0, &Mask::from_fn(80, 60, |_, _| true), None);
        assert!(matches!(f.require(N_MIN), Err(SceneError::TooFewPoints { found: 0, .. })));
    }

    #[test]
    fn frustum_drops_ground_points() {
        let mut s = empty_scene();
        s.points = vec![[10.0, 0.0, 0.02], [10.0, 0.0, 0.3]];
        let g = GroundPlane::flat(0.0);
        let all = Mask::from_fn(80, 60, |_, _| true);
        assert_eq!(frustum_points(&s, 0, &all, Some(&g)).indices, vec![1]);
        assert_eq!(frustum_points(&s, 0, &all, None).len(), 2);
    }

    fn noisy_plane(n: usize, outlier_frac: f64, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xy = Uniform::new(-20.0, 20.0);
        let z = Uniform::new(-3.0, 2.0);
        (0..n)
            .map(|i| {
                let (x, y) = (xy.sample(&mut rng), xy.sample(&mut rng));
                if (i as f64) < outlier_frac * n as f64 {
                    Vec3::new(x, y, z.sample(&mut rng))
                } else {
                    Vec3::new(x, y, 0.1 * x + 0.02 * y - 1.5)
                }
            })
            .collect()
    }

    #[test]
    fn ransac_recovers_known_plane() {
        let pts = noisy_plane(2000, 0.3, 11);
        let g = fit_ground_ransac(&pts, &RansacConfig::default()).unwrap();
        assert!((g.a - 0.1).abs() < 1e-3, "{g:?}");
        assert!((g.b - 0.02).abs() < 1e-3);
        assert!((g.c + 1.5).abs() < 0.02);
    }

    #[test]
    fn ransac_flat_plane_is_exact() {
        let pts: Vec<Vec3> = (0..200).map(|i| Vec3::new((i % 17) as f64, (i / 17) as f64 * 0.7, 0.0)).collect();
        let g = fit_ground_ransac(&pts, &RansacConfig::default()).unwrap();
        assert_eq!((g.a, g.b, g.c), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ransac_collinear_is_degenerate() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0), Vec3::new(2.0, 2.0, 0.0)];
        assert!(matches!(fit_ground_ransac(&pts, &RansacConfig::default()), Err(SceneError::DegenerateGround(_))));
    }

    #[test]
    fn ransac_ignores_point_order() {
        let mut pts = noisy_plane(500, 0.3, 5);
        let a = fit_ground_ransac(&pts, &RansacConfig::default()).unwrap();
        pts.reverse();
        pts.swap(3, 100);
        let b = fit_ground_ransac(&pts, &RansacConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn frustum_monotone_under_dilation(seed in any::<u64>(), grow in 1u32..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Uniform::new(-5.0f32, 5.0);
            let mut s = empty_scene();
            s.points = (0..300).map(|_| [u.sample(&mut rng) + 10.0, u.sample(&mut rng), u.sample(&mut rng) + 1.6]).collect();
            let small = Mask::from_fn(80, 60, |a, b| (30..45).contains(&a) && (20..32).contains(&b));
            let big = Mask::from_fn(80, 60, |a, b| (30 - grow..45 + grow).contains(&a) && (20 - grow..32 + grow).contains(&b));
            let fs = frustum_points(&s, 0, &small, None);
            let fb = frustum_points(&s, 0, &big, None);
            for i in fs.indices {
                prop_assert!(fb.indices.contains(&i));
            }
        }
    }
}
