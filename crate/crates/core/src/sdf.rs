//! Discrete signed distance fields.
//!
//! Values are stored positive inside the object and negative outside. A grid
//! covers the axis-aligned hull of its voxel centers; queries outside that
//! hull return [`EXTERIOR`].

use crate::geom::Vec3;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

pub mod mesh;

pub use mesh::{mesh_to_sdf, Triangle};

/// Stand-in for negative infinity outside the grid.
pub const EXTERIOR: f64 = -1.0e6;

const GRID_MAGIC: &[u8; 4] = b"SLFG";
const GRID_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SdfError {
    #[error("parameter out of range: {0}")]
    ParamOutOfRange(String),
    #[error("mesh is not watertight ({ambiguous} of {total} voxels have inconsistent parity)")]
    NonWatertightMesh { ambiguous: usize, total: usize },
    #[error("point outside the differentiable support of the grid")]
    OutOfSupport,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    VersionMismatch(u16),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lattice geometry shared by a grid and by a shape prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// Object-frame coordinate of the center of voxel (0, 0, 0).
    pub origin: [f64; 3],
}

impl GridMeta {
    /// Grid centered on the object origin.
    pub fn centered(dims: [usize; 3], voxel_size: f64) -> Self {
        let origin = [0, 1, 2].map(|a| -((dims[a] - 1) as f64) * voxel_size / 2.0);
        Self {
            dims,
            voxel_size,
            origin,
        }
    }

    /// Default car grid: 64x32x32 voxels at 0.1 m.
    pub fn default_car() -> Self {
        Self::centered([64, 32, 32], 0.1)
    }

    pub fn validate(&self) -> Result<(), SdfError> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(SdfError::InvalidGrid("each dimension needs at least 2 voxels".into()));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(SdfError::InvalidGrid("voxel size must be positive".into()));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(SdfError::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn unflatten(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + i as f64 * self.voxel_size,
            self.origin[1] + j as f64 * self.voxel_size,
            self.origin[2] + k as f64 * self.voxel_size,
        )
    }

    /// Lower and upper corners of the voxel-center hull.
    pub fn hull(&self) -> (Vec3, Vec3) {
        let lo = Vec3::from(self.origin);
        let hi = self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (lo, hi)
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.hull();
        (hi - lo).norm() + self.voxel_size * 3f64.sqrt()
    }

    /// Trilinear stencil for `x`, or `None` outside the hull.
    ///
    /// On a cell boundary the lower-index cell is used.
    #[inline]
    pub fn stencil(&self, x: &Vec3) -> Option<Stencil> {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let g = (x[a] - self.origin[a]) / self.voxel_size;
            let top = (self.dims[a] - 1) as f64;
            if !(g >= 0.0 && g <= top) {
                return None;
            }
            let cell = (g.ceil() - 1.0).clamp(0.0, top - 1.0);
            base[a] = cell as usize;
            frac[a] = g - cell;
        }
        Some(Stencil { base, frac })
    }
}

/// The eight voxels surrounding a query point and their weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub base: [usize; 3],
    pub frac: [f64; 3],
}

impl Stencil {
    /// Flat indices, weights and weight gradients (per meter) of the 8 corners.
    #[inline]
    pub fn corners(&self, meta: &GridMeta) -> [(usize, f64, [f64; 3]); 8] {
        let inv = 1.0 / meta.voxel_size;
        let [fx, fy, fz] = self.frac;
        let mut out = [(0usize, 0f64, [0f64; 3]); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let (di, dj, dk) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let wx = if di == 1 { fx } else { 1.0 - fx };
            let wy = if dj == 1 { fy } else { 1.0 - fy };
            let wz = if dk == 1 { fz } else { 1.0 - fz };
            let sx = if di == 1 { inv } else { -inv };
            let sy = if dj == 1 { inv } else { -inv };
            let sz = if dk == 1 { inv } else { -inv };
            let idx = meta.index(self.base[0] + di, self.base[1] + dj, self.base[2] + dk);
            *slot = (idx, wx * wy * wz, [sx * wy * wz, wx * sy * wz, wx * wy * sz]);
        }
        out
    }

    #[inline]
    pub fn interpolate(&self, meta: &GridMeta, values: &[f64]) -> f64 {
        self.corners(meta).iter().map(|&(i, w, _)| w * values[i]).sum()
    }
}

/// Trilinear sample of a flat value array laid out on `meta`.
#[inline]
pub fn sample_values(meta: &GridMeta, values: &[f64], x: &Vec3) -> f64 {
    match meta.stencil(x) {
        Some(st) => st.interpolate(meta, values),
        None => EXTERIOR,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    meta: GridMeta,
    values: Vec<f64>,
}

impl SdfGrid {
    pub fn new(meta: GridMeta, values: Vec<f64>) -> Result<Self, SdfError> {
        meta.validate()?;
        if values.len() != meta.len() {
            return Err(SdfError::InvalidGrid(format!(
                "expected {} values, got {}",
                meta.len(),
                values.len()
            )));
        }
        let diag = meta.diagonal();
        if let Some(v) = values.iter().find(|v| !v.is_finite() || v.abs() > diag) {
            return Err(SdfError::InvalidGrid(format!("value {v} is not finite or exceeds the cube diagonal")));
        }
        Ok(Self { meta, values })
    }

    pub(crate) fn from_parts_unchecked(meta: GridMeta, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), meta.len());
        Self { meta, values }
    }

    /// Samples an analytic field at every voxel center.
    pub fn from_fn(meta: GridMeta, f: impl Fn(&Vec3) -> f64) -> Result<Self, SdfError> {
        meta.validate()?;
        let mut values = Vec::with_capacity(meta.len());
        for k in 0..meta.dims[2] {
            for j in 0..meta.dims[1] {
                for i in 0..meta.dims[0] {
                    values.push(f(&meta.voxel_center(i, j, k)));
                }
            }
        }
        Self::new(meta, values)
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.meta.index(i, j, k)]
    }

    pub fn sample(&self, x: &Vec3) -> f64 {
        sample_values(&self.meta, &self.values, x)
    }

    /// Exact gradient of the trilinear interpolant.
    pub fn spatial_gradient(&self, x: &Vec3) -> Result<Vec3, SdfError> {
        let st = self.meta.stencil(x).ok_or(SdfError::OutOfSupport)?;
        let mut g = Vec3::zeros();
        for (i, _, dw) in st.corners(&self.meta) {
            let v = self.values[i];
            g += Vec3::new(dw[0] * v, dw[1] * v, dw[2] * v);
        }
        Ok(g)
    }

    /// Whether any voxel is inside (`>= 0`) and any is outside.
    pub fn has_surface(&self) -> bool {
        self.values.iter().any(|&v| v >= 0.0) && self.values.iter().any(|&v| v < 0.0)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), SdfError> {
        w.write_all(GRID_MAGIC)?;
        w.write_u16::<LittleEndian>(GRID_VERSION)?;
        write_meta(&mut w, &self.meta)?;
        for &v in &self.values {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, SdfError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| SdfError::BadMagic)?;
        if &magic != GRID_MAGIC {
            return Err(SdfError::BadMagic);
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != GRID_VERSION {
            return Err(SdfError::VersionMismatch(version));
        }
        let meta = read_meta(&mut r)?;
        let mut values = vec![0f32; meta.len()];
        r.read_f32_into::<LittleEndian>(&mut values)?;
        Self::new(meta, values.into_iter().map(f64::from).collect())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), SdfError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, SdfError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f)
    }
}

pub(crate) fn write_meta(w: &mut impl Write, meta: &GridMeta) -> std::io::Result<()> {
    for d in meta.dims {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    w.write_f32::<LittleEndian>(meta.voxel_size as f32)?;
    for o in meta.origin {
        w.write_f32::<LittleEndian>(o as f32)?;
    }
    Ok(())
}

pub(crate) fn read_meta(r: &mut impl Read) -> Result<GridMeta, SdfError> {
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let voxel_size = r.read_f32::<LittleEndian>()? as f64;
    let mut origin = [0f64; 3];
    for o in origin.iter_mut() {
        *o = r.read_f32::<LittleEndian>()? as f64;
    }
    let meta = GridMeta {
        dims,
        voxel_size,
        origin,
    };
    meta.validate()?;
    Ok(meta)
}

/// Procedural car description: a rounded body box plus an optional cabin.
///
/// Canonical frame: centered at the origin, heading `+x`, `z` up. The shape
/// spans `[-length/2, length/2] x [-width/2, width/2] x [-h/2, h/2]` where
/// `h = body_height + cabin_height` (cabin height counts only when a cabin
/// exists).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarParams {
    /// meters, [3.5, 5.2]
    pub length: f64,
    /// meters, [1.6, 2.0]
    pub width: f64,
    /// meters, [0.4, 1.2]
    pub body_height: f64,
    /// fraction of the length covered by the cabin, [0, 0.7]
    pub cabin_fraction: f64,
    /// meters, [0, 0.8]
    pub cabin_height: f64,
    /// meters the hood sits below the body top, [0, 0.4]; at most half the body height
    pub hood_drop: f64,
    /// corner radius in meters, [0, 0.3]; at most half the body height
    pub rounding: f64,
}

const CABIN_WIDTH_RATIO: f64 = 0.85;
const CABIN_OVERLAP: f64 = 0.05;
const BLEND: f64 = 0.08;

impl CarParams {
    pub fn validate(&self) -> Result<(), SdfError> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(SdfError::ParamOutOfRange(format!("{name} = {v} not in [{lo}, {hi}]")))
            }
        };
        check("length", self.length, 3.5, 5.2)?;
        check("width", self.width, 1.6, 2.0)?;
        check("body_height", self.body_height, 0.4, 1.2)?;
        check("cabin_fraction", self.cabin_fraction, 0.0, 0.7)?;
        check("cabin_height", self.cabin_height, 0.0, 0.8)?;
        check("hood_drop", self.hood_drop, 0.0, 0.4f64.min(self.body_height / 2.0))?;
        check("rounding", self.rounding, 0.0, 0.3f64.min(self.body_height / 2.0))?;
        Ok(())
    }

    pub fn has_cabin(&self) -> bool {
        self.cabin_fraction > 0.0 && self.cabin_height > 0.0
    }

    pub fn total_height(&self) -> f64 {
        if self.has_cabin() {
            self.body_height + self.cabin_height
        } else {
            self.body_height
        }
    }

    /// Plausible passenger-car parameters.
    pub fn sample(rng: &mut impl rand::Rng) -> Self {
        let body_height = rng.gen_range(0.6..0.95);
        Self {
            length: rng.gen_range(3.6..5.1),
            width: rng.gen_range(1.62..1.98),
            body_height,
            cabin_fraction: rng.gen_range(0.35..0.65),
            cabin_height: rng.gen_range(0.35..0.65),
            hood_drop: rng.gen_range(0.0..0.2),
            rounding: rng.gen_range(0.05..0.2),
        }
    }

    /// Analytic field, positive inside.
    pub fn field(&self, p: &Vec3) -> f64 {
        let h = self.total_height();
        let bottom = -h / 2.0;
        let body_top = bottom + self.body_height;
        let r = self.rounding;
        let body = rounded_box(
            p,
            &Vec3::new(0.0, 0.0, bottom + self.body_height / 2.0),
            &Vec3::new(self.length / 2.0, self.width / 2.0, self.body_height / 2.0),
            r,
        );
        let (mut d, hood_start) = if self.has_cabin() {
            let cab_len = self.cabin_fraction * self.length;
            let cab_x = -0.1 * self.length;
            let cab_lo = body_top - CABIN_OVERLAP;
            let half = Vec3::new(cab_len / 2.0, CABIN_WIDTH_RATIO * self.width / 2.0, (h / 2.0 - cab_lo) / 2.0);
            let rc = r.min(half.x).min(half.y).min(half.z);
            let cabin = rounded_box(p, &Vec3::new(cab_x, 0.0, (cab_lo + h / 2.0) / 2.0), &half, rc);
            (smooth_min(body, cabin, BLEND), cab_x + cab_len / 2.0)
        } else {
            (body, 0.15 * self.length)
        };
        if self.hood_drop > 0.0 {
            let cut_lo = body_top - self.hood_drop;
            let far = 10.0;
            let cut = box_distance(
                p,
                &Vec3::new((hood_start + self.length / 2.0 + far) / 2.0, 0.0, cut_lo + far / 2.0),
                &Vec3::new((self.length / 2.0 + far - hood_start) / 2.0, far, far / 2.0),
            );
            d = d.max(-cut);
        }
        -d
    }
}

fn box_distance(p: &Vec3, center: &Vec3, half: &Vec3) -> f64 {
    let q = (p - center).abs() - half;
    let outside = q.map(|v| v.max(0.0)).norm();
    outside + q.x.max(q.y).max(q.z).min(0.0)
}

fn rounded_box(p: &Vec3, center: &Vec3, half: &Vec3, r: f64) -> f64 {
    box_distance(p, center, &half.map(|h| h - r)) - r
}

/// Polynomial smooth minimum; never exceeds `min(a, b)`.
fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    let h = (k - (a - b).abs()).max(0.0) / k;
    a.min(b) - h * h * k / 4.0
}

/// Voxelizes a procedural car on the given lattice.
pub fn make_car_sdf(params: &CarParams, meta: GridMeta) -> Result<SdfGrid, SdfError> {
    params.validate()?;
    meta.validate()?;
    let (lo, hi) = meta.hull();
    let margin = 2.0 * meta.voxel_size;
    let ext = Vec3::new(params.length / 2.0, params.width / 2.0, params.total_height() / 2.0);
    for a in 0..3 {
        if -ext[a] - margin < lo[a] || ext[a] + margin > hi[a] {
            return Err(SdfError::ParamOutOfRange(format!(
                "shape extent along axis {a} does not fit the grid with a 2-voxel margin"
            )));
        }
    }
    SdfGrid::from_fn(meta, |p| params.field(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere_grid(r: f64, n: usize) -> SdfGrid {
        let meta = GridMeta::centered([n, n, n], 2.6 * r / (n - 1) as f64);
        SdfGrid::from_fn(meta, |p| r - p.norm()).unwrap()
    }

    #[test]
    fn constant_field_samples_constant() {
        let meta = GridMeta::centered([4, 5, 6], 0.5);
        let g = SdfGrid::new(meta, vec![0.25; meta.len()]).unwrap();
        assert!((g.sample(&Vec3::new(0.1, -0.3, 0.7)) - 0.25).abs() < 1e-12);
        assert_eq!(g.spatial_gradient(&Vec3::new(0.1, 0.2, 0.3)).unwrap(), Vec3::zeros());
    }

    #[test]
    fn outside_hull_is_exterior() {
        let g = sphere_grid(1.0, 16);
        let (lo, hi) = g.meta().hull();
        let side = hi.x - lo.x;
        assert_eq!(g.sample(&Vec3::new(hi.x + side, 0.0, 0.0)), EXTERIOR);
        assert!(matches!(
            g.spatial_gradient(&Vec3::new(hi.x + 0.01, 0.0, 0.0)),
            Err(SdfError::OutOfSupport)
        ));
    }

    #[test]
    fn sphere_sampling_matches_analytic() {
        let r = 1.0;
        let g = sphere_grid(r, 64);
        let vs = g.meta().voxel_size;
        assert!((g.sample(&Vec3::zeros()) - r).abs() < vs);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let p = Vec3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2));
            let exact = r - p.norm();
            // trilinear error of a cone-like field is bounded by one voxel
            assert!((g.sample(&p) - exact).abs() < vs, "{p:?}");
        }
    }

    #[test]
    fn linear_field_gradient_is_exact() {
        let a = Vec3::new(0.3, -0.7, 0.2);
        let meta = GridMeta::centered([8, 9, 10], 0.2);
        let g = SdfGrid::from_fn(meta, |p| a.dot(p) + 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.7..0.7), rng.gen_range(-0.8..0.8));
            assert!((g.spatial_gradient(&p).unwrap() - a).norm() < 1e-12);
            assert!((g.sample(&p) - (a.dot(&p) + 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_gradient_matches_finite_differences() {
        let g = sphere_grid(1.0, 64);
        let p = Vec3::new(0.5013, 0.0071, -0.0033);
        let grad = g.spatial_gradient(&p).unwrap();
        let h = 1e-7;
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            let fd = (g.sample(&(p + e)) - g.sample(&(p - e))) / (2.0 * h);
            assert!((fd - grad[a]).abs() < 1e-6);
        }
        assert!((grad - Vec3::new(-1.0, 0.0, 0.0)).norm() < 0.05);
    }

    #[test]
    fn boundary_ties_use_lower_cell() {
        let meta = GridMeta::centered([4, 4, 4], 1.0);
        // field whose x-slope differs between cells
        let g = SdfGrid::from_fn(meta, |p| (p.x * p.x).min(4.0)).unwrap();
        let on_center = Vec3::new(0.5, 0.0, 0.0); // voxel center x index 2
        let st = meta.stencil(&on_center).unwrap();
        assert_eq!(st.base[0], 1);
        assert_eq!(st.frac[0], 1.0);
        let left = g.spatial_gradient(&Vec3::new(0.5 - 1e-9, 0.0, 0.0)).unwrap();
        let at = g.spatial_gradient(&on_center).unwrap();
        assert!((left.x - at.x).abs() < 1e-6);
    }

    #[test]
    fn flatten_order_round_trips() {
        let meta = GridMeta::centered([5, 3, 4], 0.1);
        for idx in 0..meta.len() {
            let [i, j, k] = meta.unflatten(idx);
            assert_eq!(meta.index(i, j, k), idx);
        }
        assert_eq!(meta.index(1, 2, 3), 1 + 5 * (2 + 3 * 3));
    }

    #[test]
    fn grid_blob_round_trip_is_bit_exact() {
        let g = sphere_grid(1.0, 12);
        let mut a = Vec::new();
        g.write_to(&mut a).unwrap();
        let back = SdfGrid::read_from(a.as_slice()).unwrap();
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a[..4], b"SLFG");
        assert!(matches!(SdfGrid::read_from(&b"XXXX"[..]), Err(SdfError::BadMagic)));
        assert!(SdfGrid::read_from(&a[..a.len() - 3]).is_err());
    }

    fn random_params(rng: &mut ChaCha8Rng) -> CarParams {
        CarParams::sample(rng)
    }

    #[test]
    fn degenerate_car_is_a_box() {
        let p = CarParams {
            length: 4.0,
            width: 1.8,
            body_height: 1.0,
            cabin_fraction: 0.0,
            cabin_height: 0.0,
            hood_drop: 0.0,
            rounding: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = make_car_sdf(&p, GridMeta::default_car()).unwrap();
        let vs = grid.meta().voxel_size;
        for _ in 0..10_000 {
            let x = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let inside = x.x.abs() < 2.0 && x.y.abs() < 0.9 && x.z.abs() < 0.5;
            let face_gap = (2.0 - x.x.abs()).abs().min((0.9 - x.y.abs()).abs()).min((0.5 - x.z.abs()).abs());
            if face_gap > 1e-9 {
                assert_eq!(p.field(&x) > 0.0, inside, "{x:?}");
            }
            if face_gap > vs {
                assert_eq!(grid.sample(&x) > 0.0, inside, "{x:?}");
            }
        }
    }

    fn z_extent(grid: &SdfGrid) -> f64 {
        let m = grid.meta();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for idx in 0..m.len() {
            if grid.values()[idx] >= 0.0 {
                let [i, j, k] = m.unflatten(idx);
                let z = m.voxel_center(i, j, k).z;
                lo = lo.min(z);
                hi = hi.max(z);
            }
        }
        hi - lo + m.voxel_size
    }

    #[test]
    fn car_heights_and_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = random_params(&mut rng);
            let g = make_car_sdf(&p, GridMeta::default_car()).unwrap();
            assert!(g.sample(&Vec3::zeros()) > 0.0);
            assert!((z_extent(&g) - p.total_height()).abs() <= g.meta().voxel_size + 1e-9);
        }
    }

    #[test]
    fn car_params_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_params(&mut rng);
        p.length = 6.0;
        assert!(matches!(make_car_sdf(&p, GridMeta::default_car()), Err(SdfError::ParamOutOfRange(_))));
        let mut p = random_params(&mut rng);
        p.width = 1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn car_fields_are_eikonal_near_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let p = random_params(&mut rng);
            let g = make_car_sdf(&p, GridMeta::default_car()).unwrap();
            let vs = g.meta().voxel_size;
            let (mut ok, mut total) = (0, 0);
            while total < 2000 {
                let x = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4));
                if g.sample(&x).abs() >= 2.0 * vs {
                    continue;
                }
                total += 1;
                let n = g.spatial_gradient(&x).unwrap().norm();
                if (0.5..=1.5).contains(&n) {
                    ok += 1;
                }
            }
            assert!(ok as f64 >= 0.95 * total as f64, "{ok}/{total}");
        }
    }

    #[test]
    fn sample_is_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = make_car_sdf(&random_params(&mut rng), GridMeta::default_car()).unwrap();
        let m = *g.meta();
        let mut lmax: f64 = 0.0;
        for k in 0..m.dims[2] {
            for j in 0..m.dims[1] {
                for i in 0..m.dims[0] - 1 {
                    lmax = lmax.max((g.get(i + 1, j, k) - g.get(i, j, k)).abs());
                }
            }
        }
        for k in 0..m.dims[2] {
            for j in 0..m.dims[1] - 1 {
                for i in 0..m.dims[0] {
                    lmax = lmax.max((g.get(i, j + 1, k) - g.get(i, j, k)).abs());
                }
            }
        }
        for k in 0..m.dims[2] - 1 {
            for j in 0..m.dims[1] {
                for i in 0..m.dims[0] {
                    lmax = lmax.max((g.get(i, j, k + 1) - g.get(i, j, k)).abs());
                }
            }
        }
        let lip = lmax / m.voxel_size * 3f64.sqrt();
        for _ in 0..2000 {
            let x = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 0.01;
            if m.stencil(&(x + d)).is_none() {
                continue;
            }
            assert!((g.sample(&(x + d)) - g.sample(&x)).abs() <= lip * d.norm() + 1e-12);
        }
    }
}
