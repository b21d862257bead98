//! PCA shape space over a bank of signed distance grids.
//!
//! A shape is `m = V s + mean` where `V` (n x d) has orthonormal columns. Codes
//! keep the singular-value scale of the bank; `sigma[k]` is the standard
//! deviation of the bank along component `k`.

use crate::geom::Vec3;
use crate::sdf::{self, CarParams, GridMeta, SdfError, SdfGrid};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const PRIOR_MAGIC: &[u8; 4] = b"SLFP";
const PRIOR_VERSION: u16 = 1;

/// Seed of the procedural car bank.
pub const BANK_SEED: u64 = 20240601;
/// Size of the default bank.
pub const BANK_SIZE: usize = 79;
pub const DEFAULT_DIM: usize = 5;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("need at least {needed} models, got {got}")]
    InsufficientModels { needed: usize, got: usize },
    #[error("grid metadata differs between bank models")]
    MetaMismatch,
    #[error("bank has too little variance for {0} components")]
    DegenerateBank(usize),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("basis is not orthonormal (max Gram deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    VersionMismatch(u16),
    #[error(transparent)]
    Grid(#[from] SdfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Latent shape coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeCode(pub Vec<f64>);

impl ShapeCode {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapePrior {
    meta: GridMeta,
    mean: Vec<f64>,
    /// column-major n x d
    basis: Vec<f64>,
    /// row-major copy of `basis` for per-voxel access
    rows: Vec<f64>,
    sigma: Vec<f64>,
    model_count: usize,
}

/// Seeded procedural car bank on `meta`.
pub fn procedural_bank(count: usize, meta: GridMeta) -> Result<Vec<SdfGrid>, SdfError> {
    let mut rng = ChaCha8Rng::seed_from_u64(BANK_SEED);
    (0..count)
        .map(|_| sdf::make_car_sdf(&CarParams::sample(&mut rng), meta))
        .collect()
}

pub fn build_prior(bank: &[SdfGrid], d: usize) -> Result<ShapePrior, PriorError> {
    if d == 0 || bank.len() < d + 1 {
        return Err(PriorError::InsufficientModels {
            needed: d.max(1) + 1,
            got: bank.len(),
        });
    }
    let meta = *bank[0].meta();
    if bank.iter().any(|g| *g.meta() != meta) {
        return Err(PriorError::MetaMismatch);
    }
    let n = meta.len();
    let count = bank.len();
    let mut mean = vec![0.0; n];
    for g in bank {
        for (m, v) in mean.iter_mut().zip(g.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);

    let mut data = DMatrix::<f64>::zeros(n, count);
    for (c, g) in bank.iter().enumerate() {
        for (r, (v, m)) in g.values().iter().zip(&mean).enumerate() {
            data[(r, c)] = v - m;
        }
    }
    let frob = data.norm();
    let (u, singular) = thin_svd(data);
    if singular[d - 1] <= 1e-10 * frob.max(1.0) {
        return Err(PriorError::DegenerateBank(d));
    }
    let mut basis = Vec::with_capacity(n * d);
    for k in 0..d {
        let mut col: Vec<f64> = u.column(k).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, *v) } else { best })
            .1;
        if pivot < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        basis.extend(col);
    }
    let sigma = singular[..d].iter().map(|s| s / ((count - 1) as f64).sqrt()).collect();
    Ok(ShapePrior::from_parts(meta, mean, basis, sigma, count))
}

/// Left singular vectors and singular values (descending) of a tall matrix.
fn thin_svd(data: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let cols = data.ncols();
    // Householder QR reduces the problem to the small triangular factor.
    let qr = data.qr();
    let q = qr.q();
    let r = qr.r();
    let svd = r.svd(true, false);
    let ur = svd.u.expect("left vectors requested");
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut ur_sorted = DMatrix::zeros(cols, cols);
    for (dst, &src) in order.iter().enumerate() {
        ur_sorted.set_column(dst, &ur.column(src));
    }
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    (q * ur_sorted, values)
}

impl ShapePrior {
    fn from_parts(meta: GridMeta, mean: Vec<f64>, basis: Vec<f64>, sigma: Vec<f64>, model_count: usize) -> Self {
        let n = mean.len();
        let d = sigma.len();
        let mut rows = vec![0.0; n * d];
        for k in 0..d {
            for i in 0..n {
                rows[i * d + k] = basis[k * n + i];
            }
        }
        Self {
            meta,
            mean,
            basis,
            rows,
            sigma,
            model_count,
        }
    }

    /// Default prior: PCA over the seeded procedural bank.
    pub fn procedural(count: usize, d: usize, meta: GridMeta) -> Result<Self, PriorError> {
        build_prior(&procedural_bank(count, meta)?, d)
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn model_count(&self) -> usize {
        self.model_count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Column `k` of the basis.
    pub fn component(&self, k: usize) -> &[f64] {
        let n = self.len();
        &self.basis[k * n..(k + 1) * n]
    }

    /// Basis row for voxel `i` (one coefficient per component).
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.rows[i * d..(i + 1) * d]
    }

    pub fn encode(&self, m: &[f64]) -> Result<ShapeCode, PriorError> {
        if m.len() != self.len() {
            return Err(PriorError::LengthMismatch {
                expected: self.len(),
                got: m.len(),
            });
        }
        Ok(ShapeCode(
            (0..self.dim())
                .map(|k| {
                    self.component(k)
                        .iter()
                        .zip(m.iter().zip(&self.mean))
                        .map(|(v, (x, mu))| v * (x - mu))
                        .sum()
                })
                .collect(),
        ))
    }

    pub fn decode_values(&self, s: &ShapeCode) -> Vec<f64> {
        assert_eq!(s.dim(), self.dim(), "shape code dimension");
        let d = self.dim();
        self.mean
            .iter()
            .zip(self.rows.chunks_exact(d))
            .map(|(mu, row)| mu + row.iter().zip(&s.0).map(|(v, c)| v * c).sum::<f64>())
            .collect()
    }

    pub fn decode(&self, s: &ShapeCode) -> SdfGrid {
        SdfGrid::from_parts_unchecked(self.meta, self.decode_values(s))
    }

    /// Decoded field ready for repeated sampling.
    pub fn field(&self, s: &ShapeCode) -> ShapeField<'_> {
        ShapeField {
            prior: self,
            values: self.decode_values(s),
        }
    }

    /// Largest deviation of `V^T V` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for a in 0..d {
            for b in a..d {
                let dot: f64 = self.component(a).iter().zip(self.component(b)).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// Copy whose stored values are rounded to `f32`, as a saved file holds.
    pub fn quantized(&self) -> Self {
        let q = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        let mut meta = self.meta;
        meta.voxel_size = meta.voxel_size as f32 as f64;
        meta.origin = meta.origin.map(|o| o as f32 as f64);
        Self::from_parts(meta, q(&self.mean), q(&self.basis), q(&self.sigma), self.model_count)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), PriorError> {
        w.write_all(PRIOR_MAGIC)?;
        w.write_u16::<LittleEndian>(PRIOR_VERSION)?;
        w.write_u16::<LittleEndian>(self.dim() as u16)?;
        w.write_u16::<LittleEndian>(self.model_count as u16)?;
        sdf::write_meta(&mut w, &self.meta)?;
        for v in self.mean.iter().chain(&self.basis).chain(&self.sigma) {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, PriorError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| PriorError::BadMagic)?;
        if &magic != PRIOR_MAGIC {
            return Err(PriorError::BadMagic);
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != PRIOR_VERSION {
            return Err(PriorError::VersionMismatch(version));
        }
        let d = r.read_u16::<LittleEndian>()? as usize;
        let model_count = r.read_u16::<LittleEndian>()? as usize;
        let meta = sdf::read_meta(&mut r)?;
        let n = meta.len();
        let mut read = |len: usize| -> Result<Vec<f64>, PriorError> {
            let mut buf = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut buf)?;
            Ok(buf.into_iter().map(f64::from).collect())
        };
        let mean = read(n)?;
        let basis = read(n * d)?;
        let sigma = read(d)?;
        let prior = Self::from_parts(meta, mean, basis, sigma, model_count);
        let err = prior.orthonormality_error();
        if err > 1e-6 {
            return Err(PriorError::NotOrthonormal(err));
        }
        Ok(prior)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PriorError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PriorError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// A decoded shape with derivative access to its code.
#[derive(Debug, Clone)]
pub struct ShapeField<'a> {
    prior: &'a ShapePrior,
    values: Vec<f64>,
}

impl<'a> ShapeField<'a> {
    pub fn prior(&self) -> &'a ShapePrior {
        self.prior
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn meta(&self) -> &GridMeta {
        &self.prior.meta
    }

    /// Object-frame box around the voxels with non-negative value, padded by
    /// half a voxel. `None` for an empty shape.
    pub fn occupied_bounds(&self) -> Option<(Vec3, Vec3)> {
        let meta = &self.prior.meta;
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for (idx, &v) in self.values.iter().enumerate() {
            if v >= 0.0 {
                let [i, j, k] = meta.unflatten(idx);
                let c = meta.voxel_center(i, j, k);
                lo = lo.inf(&c);
                hi = hi.sup(&c);
            }
        }
        if lo.x > hi.x {
            return None;
        }
        let pad = Vec3::repeat(meta.voxel_size / 2.0);
        Some((lo - pad, hi + pad))
    }

    #[inline]
    pub fn sample(&self, x: &Vec3) -> f64 {
        sdf::sample_values(&self.prior.meta, &self.values, x)
    }

    /// Value, spatial gradient, and code gradient (written into `dcode`).
    ///
    /// Returns `None` outside the grid hull, leaving `dcode` untouched.
    #[inline]
    pub fn sample_with_grad(&self, x: &Vec3, dcode: &mut [f64]) -> Option<(f64, Vec3)> {
        let meta = &self.prior.meta;
        let st = meta.stencil(x)?;
        let mut phi = 0.0;
        let mut g = Vec3::zeros();
        dcode.iter_mut().for_each(|v| *v = 0.0);
        for (i, w, dw) in st.corners(meta) {
            let v = self.values[i];
            phi += w * v;
            g.x += dw[0] * v;
            g.y += dw[1] * v;
            g.z += dw[2] * v;
            for (dc, b) in dcode.iter_mut().zip(self.prior.row(i)) {
                *dc += w * b;
            }
        }
        Some((phi, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_meta() -> GridMeta {
        GridMeta::centered([8, 6, 5], 0.2)
    }

    fn grid(values: Vec<f64>) -> SdfGrid {
        SdfGrid::new(small_meta(), values).unwrap()
    }

    #[test]
    fn identical_bank_is_degenerate() {
        let n = small_meta().len();
        let g = grid((0..n).map(|i| (i as f64 * 0.01).sin()).collect());
        let bank = vec![g.clone(), g.clone(), g.clone()];
        assert!(matches!(build_prior(&bank, 1), Err(PriorError::DegenerateBank(1))));
        assert!(matches!(build_prior(&bank, 3), Err(PriorError::InsufficientModels { .. })));
    }

    #[test]
    fn symmetric_pair_spans_axis() {
        let n = small_meta().len();
        let base: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos() * 0.5).collect();
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[7] += 0.3;
        minus[7] -= 0.3;
        let prior = build_prior(&[grid(plus), grid(minus)], 1).unwrap();
        let c = prior.component(0);
        assert!((c[7] - 1.0).abs() < 1e-12);
        assert!(prior.mean().iter().zip(&base).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn meta_mismatch_rejected() {
        let a = SdfGrid::new(small_meta(), vec![0.1; small_meta().len()]).unwrap();
        let other = GridMeta::centered([8, 6, 5], 0.25);
        let b = SdfGrid::new(other, vec![0.1; other.len()]).unwrap();
        assert!(matches!(build_prior(&[a.clone(), b, a], 1), Err(PriorError::MetaMismatch)));
    }

    fn random_prior() -> ShapePrior {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = small_meta().len();
        let bank: Vec<SdfGrid> = (0..9).map(|_| grid((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        build_prior(&bank, 4).unwrap()
    }

    #[test]
    fn encode_decode_identities() {
        let prior = random_prior();
        assert!(prior.orthonormality_error() < 1e-10);
        let zero = prior.encode(prior.mean()).unwrap();
        assert!(zero.0.iter().all(|v| v.abs() < 1e-12));
        let c = ShapeCode(vec![0.5, -1.25, 2.0, 0.1]);
        let back = prior.encode(&prior.decode_values(&c)).unwrap();
        assert!(back.0.iter().zip(&c.0).all(|(a, b)| (a - b).abs() < 1e-10));
        assert_eq!(prior.decode(&ShapeCode::zeros(4)).values(), prior.mean());
        assert!(matches!(prior.encode(&[0.0; 3]), Err(PriorError::LengthMismatch { .. })));
    }

    #[test]
    fn decode_is_affine() {
        let prior = random_prior();
        let s1 = ShapeCode(vec![1.0, 0.0, -2.0, 0.3]);
        let s2 = ShapeCode(vec![-0.5, 0.7, 0.2, 0.0]);
        let a = 0.3;
        let mix = ShapeCode(s1.0.iter().zip(&s2.0).map(|(x, y)| a * x + (1.0 - a) * y).collect());
        let lhs = prior.decode_values(&mix);
        let (d1, d2) = (prior.decode_values(&s1), prior.decode_values(&s2));
        for i in 0..lhs.len() {
            assert!((lhs[i] - (a * d1[i] + (1.0 - a) * d2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_idempotent_and_variance_ordered() {
        let prior = random_prior();
        let n = prior.len();
        let m: Vec<f64> = (0..n).map(|i| (i as f64 * 0.13).sin()).collect();
        let once = prior.decode_values(&prior.encode(&m).unwrap());
        let twice = prior.decode_values(&prior.encode(&once).unwrap());
        assert!(once.iter().zip(&twice).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(prior.sigma().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn code_gradient_matches_decode() {
        let prior = random_prior();
        let s = ShapeCode(vec![0.2, -0.1, 0.4, 0.05]);
        let field = prior.field(&s);
        let x = Vec3::new(0.13, -0.21, 0.07);
        let mut dcode = vec![0.0; 4];
        let (phi, _) = field.sample_with_grad(&x, &mut dcode).unwrap();
        assert!((phi - field.sample(&x)).abs() < 1e-12);
        for k in 0..4 {
            let mut sp = s.clone();
            sp.0[k] += 1e-6;
            let fd = (prior.field(&sp).sample(&x) - phi) / 1e-6;
            assert!((fd - dcode[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let prior = random_prior();
        let mut a = Vec::new();
        prior.write_to(&mut a).unwrap();
        let loaded = ShapePrior::read_from(a.as_slice()).unwrap();
        assert!(loaded.orthonormality_error() < 1e-6);
        let mut b = Vec::new();
        loaded.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(loaded, prior.quantized());
        assert!(matches!(ShapePrior::read_from(&a[..2]), Err(PriorError::BadMagic)));
        assert!(ShapePrior::read_from(&a[..a.len() - 10]).is_err());
        let mut wrong = a.clone();
        wrong[4] = 9;
        assert!(matches!(ShapePrior::read_from(wrong.as_slice()), Err(PriorError::VersionMismatch(9))));
    }

    #[test]
    fn reconstruction_error_non_increasing_in_dim() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = small_meta().len();
        let bank: Vec<SdfGrid> = (0..10).map(|_| grid((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let mut last = f64::INFINITY;
        for d in 1..=9 {
            let prior = build_prior(&bank, d).unwrap();
            let total: f64 = bank
                .iter()
                .map(|g| {
                    let r = prior.decode_values(&prior.encode(g.values()).unwrap());
                    r.iter().zip(g.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum();
            assert!(total <= last + 1e-9);
            last = total;
        }
    }
}
