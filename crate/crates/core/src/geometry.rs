//! Triangle meshes, midpoint subdivision with its prolongation map, face
//! frames and the umbrella Laplacian.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, Vector3};

use crate::diff::dual::face_frame_kernel;
use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Faces smaller than this (m²) have no usable frame.
pub const MIN_FACE_AREA: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    /// Counter-clockwise vertex triples.
    pub faces: Vec<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    IndexOutOfRange { face: usize, index: usize },
    DegenerateFace { face: usize },
    NonManifoldEdge { edge: (usize, usize), faces: Vec<usize> },
    InconsistentWinding { edge: (usize, usize), faces: Vec<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IndexOutOfRange { face, index } => {
                write!(f, "face {face} references missing vertex {index}")
            }
            Violation::DegenerateFace { face } => write!(f, "degenerate face {face}"),
            Violation::NonManifoldEdge { edge, faces } => {
                write!(f, "non-manifold edge ({}, {}) shared by faces {faces:?}", edge.0, edge.1)
            }
            Violation::InconsistentWinding { edge, faces } => write!(
                f,
                "inconsistent winding on edge ({}, {}) between faces {faces:?}",
                edge.0, edge.1
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks index range, degenerate faces, edge manifoldness and consistent
/// winding (each directed edge used at most once).
pub fn validate_mesh(mesh: &TriMesh) -> ValidationReport {
    let mut violations = Vec::new();
    let n = mesh.vertices.len();
    let mut usable = Vec::with_capacity(mesh.faces.len());
    for (fi, f) in mesh.faces.iter().enumerate() {
        let mut ok = true;
        for &i in f {
            if i >= n {
                violations.push(Violation::IndexOutOfRange { face: fi, index: i });
                ok = false;
            }
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            violations.push(Violation::DegenerateFace { face: fi });
            ok = false;
        }
        if ok {
            usable.push(fi);
        }
    }

    // undirected edge -> faces using it, with the direction each face uses
    let mut edges: BTreeMap<(usize, usize), Vec<(usize, bool)>> = BTreeMap::new();
    for &fi in &usable {
        let f = mesh.faces[fi];
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            edges
                .entry((a.min(b), a.max(b)))
                .or_default()
                .push((fi, a < b));
        }
    }
    for (edge, uses) in edges {
        let faces: Vec<usize> = uses.iter().map(|u| u.0).collect();
        if uses.len() > 2 {
            violations.push(Violation::NonManifoldEdge { edge, faces });
        } else if uses.len() == 2 && uses[0].1 == uses[1].1 {
            violations.push(Violation::InconsistentWinding { edge, faces });
        }
    }
    ValidationReport { violations }
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        TriMesh { vertices, faces }
    }

    pub fn validate(&self) -> Result<()> {
        let report = validate_mesh(self);
        if report.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidMesh(report))
        }
    }

    /// Sorted undirected edges `(min, max)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| (0..3).map(move |k| (f[k].min(f[(k + 1) % 3]), f[k].max(f[(k + 1) % 3]))))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges().len() as i64 + self.faces.len() as i64
    }

    /// Sorted 1-ring neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for (a, b) in self.edges() {
            nb[a].push(b);
            nb[b].push(a);
        }
        for l in nb.iter_mut() {
            l.sort_unstable();
        }
        nb
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face];
        triangle_area(&self.vertices[a], &self.vertices[b], &self.vertices[c])
    }
}

pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Sparse linear map from low-resolution to high-resolution vertices. Row
/// `i` holds the `(low index, weight)` pairs of high vertex `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prolongation {
    pub cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl Prolongation {
    pub fn identity(n: usize) -> Self {
        Prolongation {
            cols: n,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// `self ∘ inner`: maps the columns of `inner` through both levels.
    pub fn compose(&self, inner: &Prolongation) -> Result<Prolongation> {
        Error::check_len("prolongation composition", inner.rows.len(), self.cols)?;
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for &(mid, w) in row {
                    for &(low, w2) in &inner.rows[mid] {
                        *acc.entry(low).or_insert(0.0) += w * w2;
                    }
                }
                acc.into_iter().collect()
            })
            .collect();
        Ok(Prolongation {
            cols: inner.cols,
            rows,
        })
    }

    /// Applies the map to row vectors of `width` values each.
    pub fn apply_rows(&self, low: &[f64], width: usize) -> Result<Vec<f64>> {
        Error::check_len("prolongation input", self.cols * width, low.len())?;
        let mut out = vec![0.0; self.rows.len() * width];
        for (row, dst) in self.rows.iter().zip(out.chunks_exact_mut(width)) {
            for &(j, w) in row {
                for (d, s) in dst.iter_mut().zip(&low[j * width..(j + 1) * width]) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }

    /// Transpose of [`Prolongation::apply_rows`].
    pub fn apply_rows_transpose(&self, high: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols * width];
        for (row, src) in self.rows.iter().zip(high.chunks_exact(width)) {
            for &(j, w) in row {
                for (d, s) in out[j * width..(j + 1) * width].iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

pub fn prolong(p: &Prolongation, low_positions: &[Vec3]) -> Result<Vec<Vec3>> {
    Error::check_len("low-resolution positions", p.cols, low_positions.len())?;
    Ok(p
        .rows
        .iter()
        .map(|row| row.iter().fold(Vec3::zeros(), |acc, &(j, w)| acc + low_positions[j] * w))
        .collect())
}

/// Splits every face 4-to-1 at its edge midpoints. New vertices are appended
/// in sorted undirected-edge order.
pub fn subdivide_midpoint(mesh: &TriMesh) -> Result<(TriMesh, Prolongation)> {
    mesh.validate()?;
    let n = mesh.vertices.len();
    let edges = mesh.edges();
    let edge_index: BTreeMap<(usize, usize), usize> =
        edges.iter().enumerate().map(|(i, &e)| (e, n + i)).collect();

    let mut vertices = mesh.vertices.clone();
    let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 1.0)]).collect();
    for &(a, b) in &edges {
        vertices.push((mesh.vertices[a] + mesh.vertices[b]) * 0.5);
        rows.push(vec![(a, 0.5), (b, 0.5)]);
    }

    let mid = |a: usize, b: usize| edge_index[&(a.min(b), a.max(b))];
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for &[a, b, c] in &mesh.faces {
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        faces.push([a, ab, ca]);
        faces.push([ab, b, bc]);
        faces.push([ca, bc, c]);
        faces.push([ab, bc, ca]);
    }
    Ok((TriMesh { vertices, faces }, Prolongation { cols: n, rows }))
}

/// `levels` rounds of midpoint subdivision with the composed prolongation.
pub fn subdivide_levels(mesh: &TriMesh, levels: usize) -> Result<(TriMesh, Prolongation)> {
    mesh.validate()?;
    let mut current = mesh.clone();
    let mut p = Prolongation::identity(mesh.vertices.len());
    for _ in 0..levels {
        let (next, step) = subdivide_midpoint(&current)?;
        p = step.compose(&p)?;
        current = next;
    }
    // positions come from the composed operator so high = P * low holds exactly
    current.vertices = prolong(&p, &mesh.vertices)?;
    Ok((current, p))
}

/// Local-to-world map of a face: columns are the edge direction, the
/// in-plane perpendicular and the normal, each of length `sqrt(2 * area)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalFrame(pub Matrix3<f64>);

impl LocalFrame {
    pub fn sigma(&self) -> f64 {
        self.0.column(0).norm()
    }
}

pub fn face_frame(v1: &Vec3, v2: &Vec3, v3: &Vec3) -> Result<LocalFrame> {
    face_frame_indexed(v1, v2, v3, 0)
}

pub(crate) fn face_frame_indexed(v1: &Vec3, v2: &Vec3, v3: &Vec3, face: usize) -> Result<LocalFrame> {
    if !(triangle_area(v1, v2, v3) > MIN_FACE_AREA) {
        return Err(Error::DegenerateFace { face });
    }
    let a = face_frame_kernel(&[v1.x, v1.y, v1.z, v2.x, v2.y, v2.z, v3.x, v3.y, v3.z]);
    Ok(LocalFrame(Matrix3::from_row_slice(&a)))
}

/// Umbrella vectors: mean of the 1-ring minus the vertex itself.
pub fn laplacian_vectors(mesh: &TriMesh, positions: &[Vec3]) -> Result<Vec<Vec3>> {
    Error::check_len("laplacian positions", mesh.vertices.len(), positions.len())?;
    Ok(mesh
        .neighbors()
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            if nb.is_empty() {
                Vec3::zeros()
            } else {
                nb.iter().fold(Vec3::zeros(), |acc, &j| acc + positions[j]) / nb.len() as f64 - positions[i]
            }
        })
        .collect())
}

/// Closed test shapes.
pub mod shapes {
    use super::{TriMesh, Vec3};

    pub fn tetrahedron() -> TriMesh {
        let s = 1.0 / 2f64.sqrt();
        TriMesh::new(
            vec![
                Vec3::new(1.0, 0.0, -s),
                Vec3::new(-1.0, 0.0, -s),
                Vec3::new(0.0, 1.0, s),
                Vec3::new(0.0, -1.0, s),
            ],
            vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
        )
    }

    pub fn octahedron() -> TriMesh {
        TriMesh::new(
            vec![
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(-1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, -1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
                Vec3::new(0.0, 0.0, -1.0),
            ],
            vec![
                [0, 2, 4],
                [2, 1, 4],
                [1, 3, 4],
                [3, 0, 4],
                [2, 0, 5],
                [1, 2, 5],
                [3, 1, 5],
                [0, 3, 5],
            ],
        )
    }

    pub fn icosahedron() -> TriMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let vertices = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let faces = vec![
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
        TriMesh::new(vertices, faces)
    }

    /// Closed box of `2 * half` extents, two triangles per side.
    pub fn cube(half: f64) -> TriMesh {
        let mut vertices = Vec::new();
        for i in 0..8 {
            vertices.push(Vec3::new(
                if i & 1 == 0 { -half } else { half },
                if i & 2 == 0 { -half } else { half },
                if i & 4 == 0 { -half } else { half },
            ));
        }
        let faces = vec![
            [0, 2, 1],
            [1, 2, 3],
            [4, 5, 6],
            [5, 7, 6],
            [0, 1, 4],
            [1, 5, 4],
            [2, 6, 3],
            [3, 6, 7],
            [0, 4, 2],
            [2, 4, 6],
            [1, 3, 5],
            [3, 7, 5],
        ];
        TriMesh::new(vertices, faces)
    }

    /// Closed UV-sphere-like tube around the z axis: `around` segments,
    /// `rings` interior rings and two pole vertices.
    pub fn capsule(radius: f64, length: f64, around: usize, rings: usize) -> TriMesh {
        assert!(around >= 3 && rings >= 1);
        let mut vertices = vec![Vec3::new(0.0, 0.0, -radius)];
        for r in 0..rings {
            let z = if rings == 1 {
                length * 0.5
            } else {
                length * r as f64 / (rings - 1) as f64
            };
            for a in 0..around {
                let phi = 2.0 * std::f64::consts::PI * a as f64 / around as f64;
                vertices.push(Vec3::new(radius * phi.cos(), radius * phi.sin(), z));
            }
        }
        vertices.push(Vec3::new(0.0, 0.0, length + radius));
        let top = vertices.len() - 1;
        let ring = |r: usize, a: usize| 1 + r * around + a % around;
        let mut faces = Vec::new();
        for a in 0..around {
            faces.push([0, ring(0, a + 1), ring(0, a)]);
        }
        for r in 0..rings - 1 {
            for a in 0..around {
                faces.push([ring(r, a), ring(r, a + 1), ring(r + 1, a + 1)]);
                faces.push([ring(r, a), ring(r + 1, a + 1), ring(r + 1, a)]);
            }
        }
        for a in 0..around {
            faces.push([top, ring(rings - 1, a), ring(rings - 1, a + 1)]);
        }
        TriMesh::new(vertices, faces)
    }
}
