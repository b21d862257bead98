//! Voxelization of closed triangle meshes into signed distance grids.

use super::{GridMeta, SdfError, SdfGrid};
use crate::geom::Vec3;
use std::path::Path;

pub type Triangle = [Vec3; 3];

// Three generic directions; parity along each must agree for a closed mesh.
const PARITY_DIRS: [[f64; 3]; 3] = [
    [0.577_215_66, 0.302_585_09, 0.758_405_44],
    [-0.318_309_88, 0.847_213_60, 0.425_779_27],
    [0.141_421_36, -0.659_665_33, -0.737_955_51],
];

/// Maximum fraction of voxels allowed to have disagreeing parity.
const AMBIGUITY_LIMIT: f64 = 1e-3;

/// Signed distance (positive inside) of a closed mesh at every voxel center.
pub fn mesh_to_sdf(mesh: &[Triangle], meta: GridMeta) -> Result<SdfGrid, SdfError> {
    meta.validate()?;
    if mesh.is_empty() {
        return Err(SdfError::NonWatertightMesh {
            ambiguous: meta.len(),
            total: meta.len(),
        });
    }
    let dirs = PARITY_DIRS.map(|d| Vec3::from(d).normalize());
    let mut values = Vec::with_capacity(meta.len());
    let mut ambiguous = 0usize;
    for k in 0..meta.dims[2] {
        for j in 0..meta.dims[1] {
            for i in 0..meta.dims[0] {
                let p = meta.voxel_center(i, j, k);
                let dist = mesh
                    .iter()
                    .map(|t| (closest_point_on_triangle(&p, t) - p).norm_squared())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt();
                let votes = dirs
                    .iter()
                    .filter(|d| mesh.iter().filter(|t| ray_hits_triangle(&p, d, t)).count() % 2 == 1)
                    .count();
                if votes != 0 && votes != 3 {
                    ambiguous += 1;
                }
                values.push(if votes >= 2 { dist } else { -dist });
            }
        }
    }
    if ambiguous as f64 > AMBIGUITY_LIMIT * meta.len() as f64 {
        return Err(SdfError::NonWatertightMesh {
            ambiguous,
            total: meta.len(),
        });
    }
    SdfGrid::new(meta, values)
}

/// Moller-Trumbore test for a ray starting at `o` (t > 0 only).
fn ray_hits_triangle(o: &Vec3, d: &Vec3, t: &Triangle) -> bool {
    let e1 = t[1] - t[0];
    let e2 = t[2] - t[0];
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return false;
    }
    let inv = 1.0 / det;
    let s = o - t[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    e2.dot(&q) * inv > 0.0
}

/// Closest point on a triangle (Ericson, Real-Time Collision Detection 5.1.5).
fn closest_point_on_triangle(p: &Vec3, t: &Triangle) -> Vec3 {
    let (a, b, c) = (t[0], t[1], t[2]);
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Subdivided icosahedron projected onto a sphere.
pub fn icosphere(radius: f64, subdivisions: u32) -> Vec<Triangle> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let v: Vec<Vec3> = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3::from(*p).normalize())
    .collect();
    let faces = [
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let mut tris: Vec<Triangle> = faces.iter().map(|f| [v[f[0]], v[f[1]], v[f[2]]]).collect();
    for _ in 0..subdivisions {
        tris = tris
            .iter()
            .flat_map(|[a, b, c]| {
                let ab = ((a + b) / 2.0).normalize();
                let bc = ((b + c) / 2.0).normalize();
                let ca = ((c + a) / 2.0).normalize();
                [[*a, ab, ca], [*b, bc, ab], [*c, ca, bc], [ab, bc, ca]]
            })
            .collect();
    }
    tris.iter().map(|t| t.map(|p| p * radius)).collect()
}

/// Closed axis-aligned box centered at the origin.
pub fn box_mesh(half: Vec3) -> Vec<Triangle> {
    let c = |x: f64, y: f64, z: f64| Vec3::new(x * half.x, y * half.y, z * half.z);
    let quads = [
        [c(-1., -1., -1.), c(-1., 1., -1.), c(1., 1., -1.), c(1., -1., -1.)],
        [c(-1., -1., 1.), c(1., -1., 1.), c(1., 1., 1.), c(-1., 1., 1.)],
        [c(-1., -1., -1.), c(1., -1., -1.), c(1., -1., 1.), c(-1., -1., 1.)],
        [c(-1., 1., -1.), c(-1., 1., 1.), c(1., 1., 1.), c(1., 1., -1.)],
        [c(-1., -1., -1.), c(-1., -1., 1.), c(-1., 1., 1.), c(-1., 1., -1.)],
        [c(1., -1., -1.), c(1., 1., -1.), c(1., 1., 1.), c(1., -1., 1.)],
    ];
    quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect()
}

/// Reads `v` and `f` records of a Wavefront OBJ file; polygons are fanned.
pub fn load_obj(path: impl AsRef<Path>) -> Result<Vec<Triangle>, SdfError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize| SdfError::InvalidGrid(format!("malformed OBJ record on line {line}"));
    let mut verts = Vec::new();
    let mut tris = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.take(3).map(|s| s.parse().map_err(|_| bad(n + 1))).collect::<Result<_, _>>()?;
                if c.len() != 3 {
                    return Err(bad(n + 1));
                }
                verts.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|s| {
                        let head = s.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| bad(n + 1))?;
                        let resolved = if i < 0 { verts.len() as i64 + i } else { i - 1 };
                        usize::try_from(resolved).ok().filter(|&r| r < verts.len()).ok_or(bad(n + 1))
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(bad(n + 1));
                }
                for w in 1..idx.len() - 1 {
                    tris.push([verts[idx[0]], verts[idx[w]], verts[idx[w + 1]]]);
                }
            }
            _ => {}
        }
    }
    Ok(tris)
}
