//! Density grids and isosurface extraction.

mod tables;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Eager;
use crate::error::{usage, validation, Error, Result};
use crate::field::{encode_batch, field_forward, FieldArch, FieldParams};
use crate::geometry::{cross3, norm3, sub3, SyntheticScene, Vec3};

use tables::TRIANGLE_TABLE;

/// Default iso level: the density of a field whose density head outputs zero.
pub const DEFAULT_ISO: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|i| !(self.min[i] < self.max[i]) || !self.min[i].is_finite() || !self.max[i].is_finite()) {
            return Err(validation("bounding box needs min < max on every axis"));
        }
        Ok(())
    }
}

/// Scalar density at the lattice points of a box, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub bbox: Aabb,
    pub res: [usize; 3],
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(bbox: Aabb, res: [usize; 3], values: Vec<f64>) -> Result<Self> {
        bbox.validate()?;
        check_res(res)?;
        if values.len() != res[0] * res[1] * res[2] {
            return Err(validation("grid value count does not match its resolution"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(validation("grid values must be finite and nonnegative"));
        }
        Ok(Self { bbox, res, values })
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.res[0] * (j + self.res[1] * k)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        lattice_point(&self.bbox, self.res, [i, j, k])
    }

    /// Largest lattice spacing.
    pub fn spacing(&self) -> f64 {
        (0..3)
            .map(|a| (self.bbox.max[a] - self.bbox.min[a]) / (self.res[a] - 1) as f64)
            .fold(0.0, f64::max)
    }
}

fn check_res(res: [usize; 3]) -> Result<()> {
    if res.iter().any(|&r| r < 2) {
        return Err(validation("grid resolution must be at least 2 per axis"));
    }
    Ok(())
}

fn lattice_point(bbox: &Aabb, res: [usize; 3], ijk: [usize; 3]) -> Vec3 {
    let mut p = [0.0; 3];
    for a in 0..3 {
        let t = ijk[a] as f64 / (res[a] - 1) as f64;
        p[a] = bbox.min[a] + t * (bbox.max[a] - bbox.min[a]);
    }
    p
}

fn lattice(bbox: &Aabb, res: [usize; 3]) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(res[0] * res[1] * res[2]);
    for k in 0..res[2] {
        for j in 0..res[1] {
            for i in 0..res[0] {
                pts.push(lattice_point(bbox, res, [i, j, k]));
            }
        }
    }
    pts
}

const BAKE_CHUNK: usize = 8192;

/// Field density at every lattice point.
pub fn bake_density_grid(params: &FieldParams, arch: &FieldArch, bbox: Aabb, res: [usize; 3]) -> Result<DensityGrid> {
    bbox.validate()?;
    check_res(res)?;
    params.validate(arch)?;
    let pts = lattice(&bbox, res);
    let mut values = Vec::with_capacity(pts.len());
    for chunk in pts.chunks(BAKE_CHUNK) {
        let pos = encode_batch(chunk, arch.pe_levels_pos);
        // density does not depend on the view direction
        let dirs = vec![[0.0, 0.0, 1.0]; chunk.len()];
        let dir = encode_batch(&dirs, arch.pe_levels_dir);
        let (sigma, _) = field_forward(&Eager, &params.tensors, arch, &pos, &dir);
        values.extend_from_slice(sigma.data());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("field density is not finite on the grid".into()));
    }
    DensityGrid::new(bbox, res, values)
}

/// Closed-form scene density at every lattice point.
pub fn bake_scene_grid(scene: &SyntheticScene, bbox: Aabb, res: [usize; 3]) -> Result<DensityGrid> {
    bbox.validate()?;
    check_res(res)?;
    let values = lattice(&bbox, res).into_iter().map(|p| scene.density(p)).collect();
    DensityGrid::new(bbox, res, values)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

/// Cube corners as lattice offsets.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Cube edges as corner pairs.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Triangulates the surface `σ = iso`, with `σ > iso` treated as inside and
/// triangles wound counter-clockwise seen from outside.
///
/// Vertices are shared between neighbouring cells, keyed by the lattice
/// edge they lie on.
pub fn marching_cubes(grid: &DensityGrid, iso: f64) -> Result<TriangleMesh> {
    if !iso.is_finite() {
        return Err(usage("iso level must be finite"));
    }
    let [nx, ny, nz] = grid.res;
    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corner = |c: usize| {
                    let o = CORNERS[c];
                    [i + o[0], j + o[1], k + o[2]]
                };
                let mut case = 0usize;
                let mut vals = [0.0; 8];
                for c in 0..8 {
                    let [a, b, d] = corner(c);
                    vals[c] = grid.value(a, b, d);
                    if vals[c] < iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLE_TABLE[case];
                let mut ids = [usize::MAX; 12];
                for t in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut tri = [0usize; 3];
                    for (slot, &e) in tri.iter_mut().zip(t) {
                        let e = e as usize;
                        if ids[e] == usize::MAX {
                            let [c0, c1] = EDGES[e];
                            let (p0, p1) = (corner(c0), corner(c1));
                            let (g0, g1) = (grid.index(p0[0], p0[1], p0[2]), grid.index(p1[0], p1[1], p1[2]));
                            let key = (g0.min(g1), g0.max(g1));
                            ids[e] = *edge_vertex.entry(key).or_insert_with(|| {
                                let (v0, v1) = (vals[c0], vals[c1]);
                                let s = (iso - v0) / (v1 - v0);
                                let (x0, x1) = (grid.point(p0[0], p0[1], p0[2]), grid.point(p1[0], p1[1], p1[2]));
                                mesh.vertices.push([
                                    x0[0] + s * (x1[0] - x0[0]),
                                    x0[1] + s * (x1[1] - x0[1]),
                                    x0[2] + s * (x1[2] - x0[2]),
                                ]);
                                mesh.vertices.len() - 1
                            });
                        }
                        *slot = ids[e];
                    }
                    if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                        mesh.triangles.push(tri);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

impl TriangleMesh {
    /// `V − E + F` with edges counted once however many faces share them.
    pub fn euler_characteristic(&self) -> i64 {
        let edges = self.edge_counts().len() as i64;
        self.vertices.len() as i64 - edges + self.triangles.len() as i64
    }

    fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// Enclosed volume; positive for outward-facing triangles.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let (a, b, c) = (self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]);
                let n = cross3(b, c);
                (a[0] * n[0] + a[1] * n[1] + a[2] * n[2]) / 6.0
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.triangles {
            if t.iter().any(|&i| i >= self.vertices.len()) {
                return Err(validation("triangle index out of range"));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(validation("degenerate triangle"));
            }
        }
        Ok(())
    }
}

/// Mean distance from each vertex of `a` to the nearest vertex of `b`,
/// averaged with the reverse direction.
pub fn mean_vertex_displacement(a: &TriangleMesh, b: &TriangleMesh) -> Option<f64> {
    if a.vertices.is_empty() || b.vertices.is_empty() {
        return None;
    }
    let one_way = |from: &[Vec3], to: &[Vec3]| {
        from.iter()
            .map(|p| to.iter().map(|q| norm3(sub3(*p, *q))).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Some(0.5 * (one_way(&a.vertices, &b.vertices) + one_way(&b.vertices, &a.vertices)))
}

/// Wavefront OBJ text with `v` and 1-based `f` records.
pub fn to_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        // `{}` prints the shortest string that reads back to the same f64
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn export_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    mesh.validate()?;
    std::fs::write(path, to_obj(mesh))?;
    Ok(())
}

/// Reads the `v` and `f` records of an OBJ file; other records are skipped.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    let bad = |n: usize| Error::DatasetFormat(format!("malformed OBJ record on line {}", n + 1));
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>().map_err(|_| bad(n)))
                    .collect::<Result<_>>()?;
                if xyz.len() != 3 {
                    return Err(bad(n));
                }
                mesh.vertices.push([xyz[0], xyz[1], xyz[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|s| {
                        let first = s.split('/').next().unwrap_or("");
                        match first.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(bad(n)),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(bad(n));
                }
                mesh.triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    mesh.validate()
        .map_err(|e| Error::DatasetFormat(e.to_string()))?;
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    parse_obj(&std::fs::read_to_string(path)?)
}
