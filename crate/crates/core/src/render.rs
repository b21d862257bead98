//! Silhouette rendering of posed shapes and occlusion maps.
//!
//! The soft renderer samples each camera ray uniformly inside the posed grid
//! hull and evaluates `1 - prod 1 / (exp(zeta * phi) + 1)` in log space. It
//! also produces exact derivatives of every pixel with respect to the pose
//! and shape code, in parameter order `(x, y, z, theta, s_0 .. s_{d-1})`.

use crate::geom::{Camera, Pose, Vec3};
use crate::prior::{ShapeCode, ShapeField, ShapePrior};
use crate::sdf::{GridMeta, SdfGrid};
use serde::{Deserialize, Serialize};

pub mod mask;

pub use mask::{Mask, MaskError, Rle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Hardness of the soft silhouette, 1/m.
    pub zeta: f64,
    pub samples_per_ray: usize,
    pub pixel_stride: usize,
    pub near: f64,
    pub far: f64,
    /// Upper bound on lattice rays per window; the stride grows to respect
    /// it. 0 disables the bound.
    pub max_rays: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            zeta: 40.0,
            samples_per_ray: 32,
            pixel_stride: 2,
            near: 0.1,
            far: 200.0,
            max_rays: 1024,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.zeta > 0.0) {
            return Err("zeta must be positive".into());
        }
        if self.samples_per_ray < 8 {
            return Err("samples_per_ray must be at least 8".into());
        }
        if self.pixel_stride == 0 {
            return Err("pixel_stride must be at least 1".into());
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err("need 0 <= near < far".into());
        }
        Ok(())
    }

    /// Lattice stride used for a window of `pixels` pixels.
    pub fn stride_for(&self, pixels: usize) -> usize {
        let s = self.pixel_stride.max(1);
        if self.max_rays == 0 || pixels <= self.max_rays * s * s {
            return s;
        }
        s.max((pixels as f64 / self.max_rays as f64).sqrt().ceil() as usize)
    }
}

/// Anything that can be sampled as a field on a grid lattice.
pub trait Field {
    fn meta(&self) -> &GridMeta;
    fn sample(&self, x: &Vec3) -> f64;
}

impl Field for SdfGrid {
    fn meta(&self) -> &GridMeta {
        SdfGrid::meta(self)
    }

    fn sample(&self, x: &Vec3) -> f64 {
        SdfGrid::sample(self, x)
    }
}

impl Field for ShapeField<'_> {
    fn meta(&self) -> &GridMeta {
        ShapeField::meta(self)
    }

    fn sample(&self, x: &Vec3) -> f64 {
        ShapeField::sample(self, x)
    }
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Ray/box slab intersection in the object frame.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Slab {
    pub t_enter: f64,
    pub t_exit: f64,
    /// axis and bound that produced each end; `None` when unbounded
    pub enter_plane: Option<(usize, f64)>,
    pub exit_plane: Option<(usize, f64)>,
}

pub(crate) fn slab_intersect(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<Slab> {
    let mut s = Slab {
        t_enter: f64::NEG_INFINITY,
        t_exit: f64::INFINITY,
        enter_plane: None,
        exit_plane: None,
    };
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (near_b, far_b) = if d[a] > 0.0 { (lo[a], hi[a]) } else { (hi[a], lo[a]) };
        let tn = (near_b - o[a]) / d[a];
        let tf = (far_b - o[a]) / d[a];
        if tn > s.t_enter {
            s.t_enter = tn;
            s.enter_plane = Some((a, near_b));
        }
        if tf < s.t_exit {
            s.t_exit = tf;
            s.exit_plane = Some((a, far_b));
        }
    }
    (s.t_exit > s.t_enter).then_some(s)
}

/// Camera ray expressed in the object frame, with pose derivatives.
pub(crate) struct ObjectRay {
    pub o: Vec3,
    pub d: Vec3,
    /// d o / d (x, y, z, theta)
    pub d_o: [Vec3; 4],
    /// d d / d theta (translation does not move the direction)
    pub d_d_theta: Vec3,
}

impl ObjectRay {
    pub fn new(pose: &Pose, origin: &Vec3, direction: &Vec3) -> Self {
        let o = pose.world_to_object(origin);
        let d = pose.direction_to_object(direction);
        Self {
            o,
            d,
            d_o: pose.world_to_object_jacobian(&o),
            d_d_theta: Vec3::new(d.y, -d.x, 0.0),
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.o + self.d * t
    }

    /// Derivative of the point at fixed `t` with respect to pose parameter `j`.
    #[inline]
    pub fn point_derivative(&self, j: usize, t: f64) -> Vec3 {
        if j == 3 {
            self.d_o[3] + self.d_d_theta * t
        } else {
            self.d_o[j]
        }
    }

    /// Derivative of the parameter at which the ray crosses plane `x_axis = bound`.
    fn plane_t_derivative(&self, plane: Option<(usize, f64)>, t: f64) -> [f64; 4] {
        let Some((a, _)) = plane else { return [0.0; 4] };
        let mut out = [0.0; 4];
        for (j, o) in out.iter_mut().enumerate() {
            let dd = if j == 3 { self.d_d_theta[a] } else { 0.0 };
            *o = -(self.d_o[j][a] + t * dd) / self.d[a];
        }
        out
    }
}

/// Value of one soft-silhouette ray plus its parameter gradient.
fn soft_ray(
    field: &ShapeField<'_>,
    ray: &ObjectRay,
    cfg: &RenderConfig,
    grad: Option<&mut [f64]>,
    scratch: &mut RayScratch,
) -> f64 {
    let (lo, hi) = field.meta().hull();
    let Some(slab) = slab_intersect(&ray.o, &ray.d, &lo, &hi) else {
        return 0.0;
    };
    let (t0, dt0) = if slab.t_enter >= cfg.near {
        (slab.t_enter, ray.plane_t_derivative(slab.enter_plane, slab.t_enter))
    } else {
        (cfg.near, [0.0; 4])
    };
    let (t1, dt1) = if slab.t_exit <= cfg.far {
        (slab.t_exit, ray.plane_t_derivative(slab.exit_plane, slab.t_exit))
    } else {
        (cfg.far, [0.0; 4])
    };
    if t1 <= t0 {
        return 0.0;
    }
    let n = cfg.samples_per_ray;
    let zeta = cfg.zeta;
    scratch.phi.clear();
    let mut log_keep = 0.0;
    for i in 0..n {
        let a = (i as f64 + 0.5) / n as f64;
        let phi = field.sample(&ray.at(t0 + a * (t1 - t0)));
        scratch.phi.push(phi);
        log_keep -= softplus(zeta * phi);
    }
    let keep = log_keep.exp();
    let value = -log_keep.exp_m1();
    let Some(grad) = grad else { return value };
    grad.iter_mut().for_each(|g| *g = 0.0);
    if keep * zeta < 1e-12 {
        return value;
    }
    let d = field.prior().dim();
    scratch.dcode.resize(d, 0.0);
    for i in 0..n {
        let w = keep * zeta * sigmoid(zeta * scratch.phi[i]);
        if w < 1e-13 {
            continue;
        }
        let a = (i as f64 + 0.5) / n as f64;
        let t = t0 + a * (t1 - t0);
        let x = ray.at(t);
        let Some((_, g)) = field.sample_with_grad(&x, &mut scratch.dcode) else {
            continue;
        };
        for j in 0..4 {
            let dt = (1.0 - a) * dt0[j] + a * dt1[j];
            let dx = ray.point_derivative(j, t) + ray.d * dt;
            grad[j] += w * g.dot(&dx);
        }
        for k in 0..d {
            grad[4 + k] += w * scratch.dcode[k];
        }
    }
    value
}

#[derive(Default)]
struct RayScratch {
    phi: Vec<f64>,
    dcode: Vec<f64>,
}

/// Rectangle of image pixels `[u0, u0 + width) x [v0, v0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelWindow {
    pub u0: u32,
    pub v0: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelWindow {
    pub fn full(cam: &Camera) -> Self {
        Self {
            u0: 0,
            v0: 0,
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Bounding box of the mask grown by a quarter of its size on every side.
    pub fn around_mask(mask: &Mask) -> Self {
        let Some((a, b, c, d)) = mask.bbox() else {
            return Self {
                u0: 0,
                v0: 0,
                width: 0,
                height: 0,
            };
        };
        let grow_u = ((c - a + 1) as f64 * 0.25).ceil() as i64 + 2;
        let grow_v = ((d - b + 1) as f64 * 0.25).ceil() as i64 + 2;
        Self::clamped(a as i64 - grow_u, b as i64 - grow_v, c as i64 + grow_u, d as i64 + grow_v, mask.width(), mask.height())
    }

    /// Inclusive bounds clamped to an image.
    pub fn clamped(u0: i64, v0: i64, u1: i64, v1: i64, width: u32, height: u32) -> Self {
        let u0c = u0.clamp(0, width as i64);
        let v0c = v0.clamp(0, height as i64);
        let u1c = (u1 + 1).clamp(0, width as i64);
        let v1c = (v1 + 1).clamp(0, height as i64);
        Self {
            u0: u0c as u32,
            v0: v0c as u32,
            width: (u1c - u0c).max(0) as u32,
            height: (v1c - v0c).max(0) as u32,
        }
    }

    /// Pixels covered by the projection of the posed grid hull.
    pub fn around_shape(meta: &GridMeta, pose: &Pose, cam: &Camera) -> Self {
        let (lo, hi) = meta.hull();
        Self::around_box(&lo, &hi, pose, cam)
    }

    /// Pixels covered by the projection of an object-frame box.
    pub fn around_box(lo: &Vec3, hi: &Vec3, pose: &Pose, cam: &Camera) -> Self {
        let mut bounds: Option<(f64, f64, f64, f64)> = None;
        let mut behind = 0;
        for c in 0..8 {
            let p = Vec3::new(
                if c & 1 == 1 { hi.x } else { lo.x },
                if c & 2 == 2 { hi.y } else { lo.y },
                if c & 4 == 4 { hi.z } else { lo.z },
            );
            match cam.project_point(&pose.object_to_world(&p)) {
                Ok((u, v, _)) => {
                    bounds = Some(match bounds {
                        None => (u, v, u, v),
                        Some((a, b, cc, d)) => (a.min(u), b.min(v), cc.max(u), d.max(v)),
                    })
                }
                Err(_) => behind += 1,
            }
        }
        if behind == 8 {
            return Self::clamped(0, 0, -1, -1, cam.width, cam.height);
        }
        if behind > 0 {
            return Self::full(cam);
        }
        let (a, b, c, d) = bounds.unwrap();
        let lim = 4.0 * (cam.width.max(cam.height) as f64);
        Self::clamped(
            a.max(-lim).floor() as i64 - 1,
            b.max(-lim).floor() as i64 - 1,
            c.min(lim).ceil() as i64 + 1,
            d.min(lim).ceil() as i64 + 1,
            cam.width,
            cam.height,
        )
    }

    /// Smallest window containing both; an empty operand is ignored.
    pub fn union(&self, other: &Self) -> Self {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        let u0 = self.u0.min(other.u0);
        let v0 = self.v0.min(other.v0);
        let u1 = (self.u0 + self.width).max(other.u0 + other.width);
        let v1 = (self.v0 + self.height).max(other.v0 + other.height);
        Self {
            u0,
            v0,
            width: u1 - u0,
            height: v1 - v0,
        }
    }
}

/// Soft values (and optional per-ray gradients) on the strided ray lattice
/// anchored at a window's top-left pixel.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub window: PixelWindow,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// `values.len() * params` derivatives, ray-major; empty without gradients
    pub grads: Vec<f64>,
    pub params: usize,
}

impl Lattice {
    /// Bilinear taps `(lattice index, weight)` of window pixel `(x, y)`.
    #[inline]
    pub fn taps(&self, x: usize, y: usize) -> [(usize, f64); 4] {
        let s = self.stride;
        let (b, a) = ((y / s).min(self.height - 1), (x / s).min(self.width - 1));
        let wy = y as f64 / s as f64 - b as f64;
        let wx = x as f64 / s as f64 - a as f64;
        let b1 = (b + 1).min(self.height - 1);
        let a1 = (a + 1).min(self.width - 1);
        let w = self.width;
        [
            (b * w + a, (1.0 - wx) * (1.0 - wy)),
            (b * w + a1, wx * (1.0 - wy)),
            (b1 * w + a, (1.0 - wx) * wy),
            (b1 * w + a1, wx * wy),
        ]
    }

    /// Values at every window pixel, row-major.
    pub fn upsample(&self) -> Vec<f64> {
        let (ww, wh) = (self.window.width as usize, self.window.height as usize);
        let mut out = Vec::with_capacity(ww * wh);
        for y in 0..wh {
            for x in 0..ww {
                out.push(self.taps(x, y).iter().map(|&(i, w)| w * self.values[i]).sum());
            }
        }
        out
    }

    /// Per-pixel gradients at every window pixel, pixel-major.
    pub fn upsample_grads(&self) -> Vec<f64> {
        let (ww, wh) = (self.window.width as usize, self.window.height as usize);
        let p = self.params;
        let mut out = vec![0.0; ww * wh * p];
        if self.grads.is_empty() {
            return out;
        }
        for y in 0..wh {
            for x in 0..ww {
                let dst = &mut out[(y * ww + x) * p..(y * ww + x + 1) * p];
                for (i, w) in self.taps(x, y) {
                    if w == 0.0 {
                        continue;
                    }
                    for (d, g) in dst.iter_mut().zip(&self.grads[i * p..(i + 1) * p]) {
                        *d += w * g;
                    }
                }
            }
        }
        out
    }

    /// Parameter gradient of `sum_pixels adjoint[pixel] * value[pixel]`.
    pub fn pull_back(&self, adjoint: &[f64]) -> Vec<f64> {
        let ww = self.window.width as usize;
        let mut lat_adj = vec![0.0; self.values.len()];
        for (pix, &a) in adjoint.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (i, w) in self.taps(pix % ww, pix / ww) {
                lat_adj[i] += w * a;
            }
        }
        let p = self.params;
        let mut g = vec![0.0; p];
        if self.grads.is_empty() {
            return g;
        }
        for (i, &a) in lat_adj.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (gk, v) in g.iter_mut().zip(&self.grads[i * p..(i + 1) * p]) {
                *gk += a * v;
            }
        }
        g
    }
}

pub fn render_lattice(
    field: &ShapeField<'_>,
    pose: &Pose,
    cam: &Camera,
    cfg: &RenderConfig,
    window: PixelWindow,
    with_grad: bool,
) -> Lattice {
    let params = 4 + field.prior().dim();
    let stride = cfg.stride_for(window.len());
    let (lat_w, lat_h) = if window.is_empty() {
        (0, 0)
    } else {
        (
            (window.width as usize - 1).div_ceil(stride) + 1,
            (window.height as usize - 1).div_ceil(stride) + 1,
        )
    };
    let mut values = vec![0.0; lat_w * lat_h];
    let mut grads = if with_grad { vec![0.0; lat_w * lat_h * params] } else { Vec::new() };
    let center = cam.center();
    let mut scratch = RayScratch::default();
    for b in 0..lat_h {
        for a in 0..lat_w {
            let u = (window.u0 as usize + a * stride) as f64;
            let v = (window.v0 as usize + b * stride) as f64;
            let ray = cam.ray_through_pixel(u, v);
            let oray = ObjectRay::new(pose, &center, &ray.direction);
            let idx = b * lat_w + a;
            let g = if with_grad { Some(&mut grads[idx * params..(idx + 1) * params]) } else { None };
            values[idx] = soft_ray(field, &oray, cfg, g, &mut scratch);
        }
    }
    Lattice {
        window,
        stride,
        width: lat_w,
        height: lat_h,
        values,
        grads,
        params,
    }
}

/// Full-resolution soft values (and optional gradients) over a window.
#[derive(Debug, Clone)]
pub struct WindowRender {
    pub window: PixelWindow,
    pub values: Vec<f64>,
    /// `values.len() * params` derivatives, pixel-major; empty without gradients
    pub grads: Vec<f64>,
    pub params: usize,
}

/// Renders the soft silhouette on the strided lattice covering `window`,
/// then bilinearly upsamples values and gradients to full resolution.
pub fn render_window(
    field: &ShapeField<'_>,
    pose: &Pose,
    cam: &Camera,
    cfg: &RenderConfig,
    window: PixelWindow,
    with_grad: bool,
) -> WindowRender {
    let lat = render_lattice(field, pose, cam, cfg, window, with_grad);
    if window.is_empty() {
        return WindowRender {
            window,
            values: Vec::new(),
            grads: Vec::new(),
            params: lat.params,
        };
    }
    WindowRender {
        window,
        values: lat.upsample(),
        grads: if with_grad { lat.upsample_grads() } else { Vec::new() },
        params: lat.params,
    }
}

/// Soft silhouette of a posed shape over the whole image.
///
/// Pixels whose rays miss the posed grid hull are 0; a shape entirely behind
/// the camera yields an all-zero mask.
pub fn soft_silhouette(prior: &ShapePrior, code: &ShapeCode, pose: &Pose, cam: &Camera, cfg: &RenderConfig) -> Mask {
    let field = prior.field(code);
    let window = PixelWindow::around_shape(prior.meta(), pose, cam);
    let r = render_window(&field, pose, cam, cfg, window, false);
    window_to_mask(&r, cam)
}

/// Pastes a window render into a full-size mask.
pub fn window_to_mask(r: &WindowRender, cam: &Camera) -> Mask {
    let mut m = Mask::zeros(cam.width, cam.height);
    let w = r.window;
    for y in 0..w.height {
        for x in 0..w.width {
            m.set(w.u0 + x, w.v0 + y, r.values[(y * w.width + x) as usize] as f32);
        }
    }
    m
}

/// Distance along a world ray to the first crossing into `phi >= 0`.
///
/// Marches with steps of at least a quarter voxel, larger where the field is
/// far from the surface, then bisects the bracketing interval.
pub fn first_hit<F: Field + ?Sized>(field: &F, pose: &Pose, origin: &Vec3, direction: &Vec3, t_min: f64, t_max: f64) -> Option<f64> {
    let o = pose.world_to_object(origin);
    let d = pose.direction_to_object(direction);
    let meta = field.meta();
    let (lo, hi) = meta.hull();
    let slab = slab_intersect(&o, &d, &lo, &hi)?;
    let start = slab.t_enter.max(t_min);
    let end = slab.t_exit.min(t_max);
    if end <= start {
        return None;
    }
    let min_step = meta.voxel_size / 4.0;
    let mut t_prev = start;
    if field.sample(&(o + d * start)) >= 0.0 {
        return Some(start);
    }
    let mut t = start;
    while t < end {
        t = (t + min_step).min(end);
        let phi = field.sample(&(o + d * t));
        if phi >= 0.0 {
            let (mut a, mut b) = (t_prev, t);
            for _ in 0..40 {
                let m = 0.5 * (a + b);
                if field.sample(&(o + d * m)) >= 0.0 {
                    b = m;
                } else {
                    a = m;
                }
            }
            return Some(b);
        }
        t_prev = t;
        if t >= end {
            break;
        }
    }
    None
}

/// Per-pixel depth (ray parameter) of the first surface hit, `None` for misses.
pub fn hit_depths<F: Field + ?Sized>(field: &F, pose: &Pose, cam: &Camera) -> Vec<Option<f64>> {
    let mut out = vec![None; cam.width as usize * cam.height as usize];
    let win = PixelWindow::around_shape(field.meta(), pose, cam);
    let c = cam.center();
    for v in win.v0..win.v0 + win.height {
        for u in win.u0..win.u0 + win.width {
            let ray = cam.ray_through_pixel(u as f64, v as f64);
            out[(v * cam.width + u) as usize] = first_hit(field, pose, &c, &ray.direction, 0.0, f64::INFINITY);
        }
    }
    out
}

/// Binary silhouette: 1 where the pixel ray crosses the zero level set.
pub fn hard_silhouette<F: Field + ?Sized>(field: &F, pose: &Pose, cam: &Camera) -> Mask {
    let depths = hit_depths(field, pose, cam);
    let data = depths.iter().map(|d| if d.is_some() { 1.0 } else { 0.0 }).collect();
    Mask::from_values(cam.width, cam.height, data).expect("size matches camera")
}

/// Binary visibility map of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap {
    pub width: u32,
    pub height: u32,
    /// 1 = visible to this instance, 0 = covered by a nearer instance
    pub data: Vec<u8>,
    /// Median depth of the associated points.
    pub depth: Option<f64>,
    /// Set when no depths were available; the instance was ordered last.
    pub empty_depths: bool,
}

impl OcclusionMap {
    pub fn all_visible(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![1; width as usize * height as usize],
            depth: None,
            empty_depths: false,
        }
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u8 {
        self.data[(v * self.width + u) as usize]
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Orders instances by median point depth (ties: lower index first, empty
/// depth lists last) and masks each one by the union of all nearer masks.
pub fn occlusion_maps(instances: &[(&Mask, &[f64])]) -> Vec<OcclusionMap> {
    if instances.is_empty() {
        return Vec::new();
    }
    let (w, h) = (instances[0].0.width(), instances[0].0.height());
    let depths: Vec<Option<f64>> = instances.iter().map(|(_, d)| median(d)).collect();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| {
        let da = depths[a].unwrap_or(f64::INFINITY);
        let db = depths[b].unwrap_or(f64::INFINITY);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut covered = vec![0u8; w as usize * h as usize];
    let mut out: Vec<Option<OcclusionMap>> = vec![None; instances.len()];
    for &i in &order {
        let mask = instances[i].0;
        out[i] = Some(OcclusionMap {
            width: w,
            height: h,
            data: covered.iter().map(|&c| 1 - c).collect(),
            depth: depths[i],
            empty_depths: depths[i].is_none(),
        });
        for (c, &v) in covered.iter_mut().zip(mask.values()) {
            if v >= 0.5 {
                *c = 1;
            }
        }
    }
    out.into_iter().map(|m| m.expect("every index visited")).collect()
}
