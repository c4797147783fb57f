//! Coupled multi-resolution Gaussians-on-Mesh.
//!
//! The low-resolution mesh is skinned; the high-resolution mesh is its
//! `k`-fold midpoint subdivision and is only ever obtained through the
//! prolongation map. Each high-resolution face carries one Gaussian whose
//! offset, rotation and scale live in the face's local frame.

use std::rc::Rc;

use nalgebra::{Matrix3, Vector3};

use crate::diff::dual::{axis_angle_matrix, face_frame_kernel, vjp, Dual};
use crate::diff::tape::{sigmoid, Tape, Var};
use crate::geometry::{prolong, subdivide_levels, triangle_area, Prolongation, TriMesh, Vec3, MIN_FACE_AREA};
use crate::rig::{blend_transform, skin_vertices, Pose, Rig, VertexWeights};
use crate::{Error, Result};

/// Stored encoding width: rotation 3, log-scale 3, color logit 3, offset 3,
/// opacity logit 1.
pub const RAW_WIDTH: usize = 13;
/// World Gaussian row: mean 3, covariance 6 (xx xy xz yy yz zz), color 3,
/// opacity 1.
pub const WORLD_WIDTH: usize = 13;
pub const MAX_LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianDefaults {
    /// Initial scale in local units.
    pub scale: f64,
    pub opacity: f64,
    pub offset_bound: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for GaussianDefaults {
    fn default() -> Self {
        GaussianDefaults { scale: 0.5, opacity: 0.95, offset_bound: 2.0, scale_min: 1e-4, scale_max: 10.0 }
    }
}

impl GaussianDefaults {
    /// Encoding that decodes to the defaults; a zero-initialized predictor
    /// adds its output to this.
    pub fn base_encoding(&self) -> [f64; RAW_WIDTH] {
        let mut raw = [0.0; RAW_WIDTH];
        raw[3..6].fill(self.scale.ln());
        raw[12] = (self.opacity / (1.0 - self.opacity)).ln();
        raw
    }
}

/// Per-face Gaussian in stored (unconstrained) encoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceGaussian {
    /// Axis-angle rotation in the face frame.
    pub r: [f64; 3],
    /// Log-scale.
    pub s: [f64; 3],
    /// Color logits.
    pub c: [f64; 3],
    /// Offset before the tanh bound.
    pub o: [f64; 3],
    /// Opacity logit.
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedGaussian {
    pub rotation: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub color: Vector3<f64>,
    pub offset: Vector3<f64>,
    pub opacity: f64,
}

impl FaceGaussian {
    pub fn from_raw(raw: &[f64]) -> Self {
        FaceGaussian {
            r: [raw[0], raw[1], raw[2]],
            s: [raw[3], raw[4], raw[5]],
            c: [raw[6], raw[7], raw[8]],
            o: [raw[9], raw[10], raw[11]],
            alpha: raw[12],
        }
    }

    pub fn to_raw(&self) -> [f64; RAW_WIDTH] {
        let mut raw = [0.0; RAW_WIDTH];
        raw[0..3].copy_from_slice(&self.r);
        raw[3..6].copy_from_slice(&self.s);
        raw[6..9].copy_from_slice(&self.c);
        raw[9..12].copy_from_slice(&self.o);
        raw[12] = self.alpha;
        raw
    }

    pub fn defaults(d: &GaussianDefaults) -> Self {
        Self::from_raw(&d.base_encoding())
    }

    pub fn decode(&self, d: &GaussianDefaults) -> DecodedGaussian {
        let r = axis_angle_matrix(self.r);
        DecodedGaussian {
            rotation: Matrix3::from_row_slice(&r),
            scale: Vector3::from_iterator(self.s.iter().map(|&s| s.exp().clamp(d.scale_min, d.scale_max))),
            color: Vector3::from_iterator(self.c.iter().map(|&c| sigmoid(c))),
            offset: Vector3::from_iterator(self.o.iter().map(|&o| d.offset_bound * (o / d.offset_bound).tanh())),
            opacity: sigmoid(self.alpha),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalGoM {
    pub low_mesh: TriMesh,
    pub weights: Vec<VertexWeights>,
    pub high_mesh: TriMesh,
    pub prolongation: Prolongation,
    pub face_gaussians: Vec<FaceGaussian>,
    pub subdivision_levels: usize,
    pub defaults: GaussianDefaults,
}

pub fn init_canonical(rig: &Rig, k: usize, defaults: &GaussianDefaults) -> Result<CanonicalGoM> {
    if k > MAX_LEVELS {
        return Err(Error::arg("subdivision levels", format!("{k} not in 0..={MAX_LEVELS}")));
    }
    rig.validate()?;
    let (high_mesh, prolongation) = subdivide_levels(&rig.template, k)?;
    let face_gaussians = vec![FaceGaussian::defaults(defaults); high_mesh.faces.len()];
    Ok(CanonicalGoM {
        low_mesh: rig.template.clone(),
        weights: rig.weights.clone(),
        high_mesh,
        prolongation,
        face_gaussians,
        subdivision_levels: k,
        defaults: *defaults,
    })
}

impl CanonicalGoM {
    pub fn low_count(&self) -> usize {
        self.low_mesh.vertices.len()
    }

    pub fn high_face_count(&self) -> usize {
        self.high_mesh.faces.len()
    }

    /// Replaces the low-resolution canonical vertices and re-prolongs.
    pub fn with_low_vertices(&self, low: Vec<Vec3>) -> Result<CanonicalGoM> {
        let high = prolong(&self.prolongation, &low)?;
        let mut out = self.clone();
        out.low_mesh.vertices = low;
        out.high_mesh.vertices = high;
        Ok(out)
    }

    pub fn raw_gaussians(&self) -> Vec<f64> {
        self.face_gaussians.iter().flat_map(|g| g.to_raw()).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let (expected, p) = subdivide_levels(&self.low_mesh, self.subdivision_levels)?;
        if expected.faces != self.high_mesh.faces || p != self.prolongation {
            return Err(Error::arg("high mesh", "not the midpoint subdivision of the low mesh"));
        }
        check_coupling(&self.prolongation, &self.low_mesh.vertices, &self.high_mesh.vertices)?;
        Error::check_len("face gaussians", self.high_mesh.faces.len(), self.face_gaussians.len())?;
        Error::check_len("skinning weights", self.low_mesh.vertices.len(), self.weights.len())?;
        if self.face_gaussians.iter().any(|g| g.to_raw().iter().any(|v| !v.is_finite())) {
            return Err(Error::arg("face gaussians", "non-finite value"));
        }
        Ok(())
    }

    pub fn articulate(&self, pose: &Pose) -> Result<PosedGoM<'_>> {
        articulate(self, pose)
    }
}

/// High vertices must equal the prolonged low vertices to 1e-12.
pub fn check_coupling(p: &Prolongation, low: &[Vec3], high: &[Vec3]) -> Result<()> {
    let expected = prolong(p, low)?;
    Error::check_len("high vertices", expected.len(), high.len())?;
    for (i, (a, b)) in expected.iter().zip(high).enumerate() {
        if (a - b).norm() > 1e-12 {
            return Err(Error::arg("coupling", format!("high vertex {i} is off its prolongation by {}", (a - b).norm())));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PosedGoM<'a> {
    pub gom: &'a CanonicalGoM,
    pub low_vertices: Vec<Vec3>,
    pub high_vertices: Vec<Vec3>,
}

/// Skins the low-resolution mesh and prolongs; high vertices are never
/// skinned directly.
pub fn articulate<'a>(gom: &'a CanonicalGoM, pose: &Pose) -> Result<PosedGoM<'a>> {
    let needed = gom.weights.iter().flat_map(|w| w.iter().map(|x| x.0 + 1)).max().unwrap_or(0);
    if pose.joint_count() < needed {
        return Err(Error::LengthMismatch { what: "pose joints", expected: needed, got: pose.joint_count() });
    }
    let low = skin_vertices(&gom.weights, &gom.low_mesh.vertices, pose)?;
    let high = prolong(&gom.prolongation, &low)?;
    Ok(PosedGoM { gom, low_vertices: low, high_vertices: high })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldGaussian {
    pub mu: Vec3,
    pub sigma: Matrix3<f64>,
    pub color: Vec3,
    pub opacity: f64,
}

impl WorldGaussian {
    pub fn to_row(&self) -> [f64; WORLD_WIDTH] {
        let s = &self.sigma;
        [
            self.mu.x, self.mu.y, self.mu.z, s[(0, 0)], s[(0, 1)], s[(0, 2)], s[(1, 1)], s[(1, 2)], s[(2, 2)],
            self.color.x, self.color.y, self.color.z, self.opacity,
        ]
    }

    pub fn from_row(r: &[f64]) -> Self {
        WorldGaussian {
            mu: Vec3::new(r[0], r[1], r[2]),
            sigma: Matrix3::new(r[3], r[4], r[5], r[4], r[6], r[7], r[5], r[7], r[8]),
            color: Vec3::new(r[9], r[10], r[11]),
            opacity: r[12],
        }
    }
}

pub fn gaussians_to_rows(g: &[WorldGaussian]) -> Vec<f64> {
    g.iter().flat_map(|g| g.to_row()).collect()
}

pub fn rows_to_gaussians(rows: &[f64]) -> Vec<WorldGaussian> {
    rows.chunks_exact(WORLD_WIDTH).map(WorldGaussian::from_row).collect()
}

pub fn gaussians_world(posed: &PosedGoM<'_>) -> Result<Vec<WorldGaussian>> {
    let raw = posed.gom.raw_gaussians();
    let rows = world_rows(&posed.gom.high_mesh.faces, &posed.high_vertices, &raw, &posed.gom.defaults)?;
    Ok(rows_to_gaussians(&rows))
}

struct FaceEval {
    corners: [f64; 9],
    frame: [f64; 9],
    rot: [f64; 9],
    scale: [f64; 3],
    scale_live: [bool; 3],
    offset: [f64; 3],
    offset_tanh: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

fn eval_face(
    face: usize,
    idx: &[usize; 3],
    verts: &[f64],
    raw: &[f64],
    d: &GaussianDefaults,
) -> Result<FaceEval> {
    let mut corners = [0.0; 9];
    for k in 0..3 {
        corners[3 * k..3 * k + 3].copy_from_slice(&verts[3 * idx[k]..3 * idx[k] + 3]);
    }
    let v = |k: usize| Vec3::new(corners[3 * k], corners[3 * k + 1], corners[3 * k + 2]);
    if !(triangle_area(&v(0), &v(1), &v(2)) > MIN_FACE_AREA) {
        return Err(Error::DegenerateFace { face });
    }
    let frame = face_frame_kernel(&corners);
    let rot = axis_angle_matrix([raw[0], raw[1], raw[2]]);
    let mut scale = [0.0; 3];
    let mut scale_live = [true; 3];
    for k in 0..3 {
        let e = raw[3 + k].exp();
        scale[k] = e.clamp(d.scale_min, d.scale_max);
        scale_live[k] = e > d.scale_min && e < d.scale_max;
    }
    let mut offset = [0.0; 3];
    let mut offset_tanh = [0.0; 3];
    for k in 0..3 {
        let t = (raw[9 + k] / d.offset_bound).tanh();
        offset_tanh[k] = t;
        offset[k] = d.offset_bound * t;
    }
    Ok(FaceEval {
        corners,
        frame,
        rot,
        scale,
        scale_live,
        offset,
        offset_tanh,
        color: [sigmoid(raw[6]), sigmoid(raw[7]), sigmoid(raw[8])],
        opacity: sigmoid(raw[12]),
    })
}

impl FaceEval {
    /// `L = R diag(scale)`, `B = A L`.
    fn factors(&self) -> ([f64; 9], [f64; 9]) {
        let mut l = [0.0; 9];
        for r in 0..3 {
            for k in 0..3 {
                l[r * 3 + k] = self.rot[r * 3 + k] * self.scale[k];
            }
        }
        let a = &self.frame;
        let mut b = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                b[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * l[k * 3 + c]).sum();
            }
        }
        (l, b)
    }

    fn row(&self) -> [f64; WORLD_WIDTH] {
        let a = &self.frame;
        let (_, b) = self.factors();
        let c = &self.corners;
        let mut out = [0.0; WORLD_WIDTH];
        for r in 0..3 {
            out[r] = (c[r] + c[3 + r] + c[6 + r]) / 3.0 + (0..3).map(|k| a[r * 3 + k] * self.offset[k]).sum::<f64>();
        }
        let sig = |i: usize, j: usize| (0..3).map(|k| b[i * 3 + k] * b[j * 3 + k]).sum::<f64>();
        out[3] = sig(0, 0);
        out[4] = sig(0, 1);
        out[5] = sig(0, 2);
        out[6] = sig(1, 1);
        out[7] = sig(1, 2);
        out[8] = sig(2, 2);
        out[9..12].copy_from_slice(&self.color);
        out[12] = self.opacity;
        out
    }

    /// Gradients for the three corners (9) and the raw encoding (13) given
    /// the gradient of one world row.
    fn backward(&self, raw: &[f64], g: &[f64]) -> ([f64; 9], [f64; RAW_WIDTH]) {
        let a = &self.frame;
        let (l, b) = self.factors();
        let gmu = [g[0], g[1], g[2]];
        // symmetric full-matrix gradient from the six stored components
        let gs = [
            [g[3], 0.5 * g[4], 0.5 * g[5]],
            [0.5 * g[4], g[6], 0.5 * g[7]],
            [0.5 * g[5], 0.5 * g[7], g[8]],
        ];
        // Sigma = B B^T  =>  dB = 2 G B
        let mut gb = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                gb[r * 3 + c] = 2.0 * (0..3).map(|k| gs[r][k] * b[k * 3 + c]).sum::<f64>();
            }
        }
        let mut ga = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                ga[r * 3 + c] = gmu[r] * self.offset[c] + (0..3).map(|k| gb[r * 3 + k] * l[c * 3 + k]).sum::<f64>();
            }
        }
        let mut goff = [0.0; 3];
        let mut gl = [0.0; 9];
        for c in 0..3 {
            goff[c] = (0..3).map(|r| a[r * 3 + c] * gmu[r]).sum();
            for k in 0..3 {
                gl[c * 3 + k] = (0..3).map(|r| a[r * 3 + c] * gb[r * 3 + k]).sum();
            }
        }
        let mut graw = [0.0; RAW_WIDTH];
        let mut grot = [0.0; 9];
        for r in 0..3 {
            for k in 0..3 {
                grot[r * 3 + k] = gl[r * 3 + k] * self.scale[k];
            }
        }
        for k in 0..3 {
            let gscale: f64 = (0..3).map(|r| gl[r * 3 + k] * self.rot[r * 3 + k]).sum();
            graw[3 + k] = if self.scale_live[k] { gscale * self.scale[k] } else { 0.0 };
            graw[9 + k] = goff[k] * (1.0 - self.offset_tanh[k] * self.offset_tanh[k]);
            graw[6 + k] = g[9 + k] * self.color[k] * (1.0 - self.color[k]);
        }
        graw[12] = g[12] * self.opacity * (1.0 - self.opacity);
        let rd = axis_angle_matrix(Dual::<3>::vars([raw[0], raw[1], raw[2]]));
        graw[0..3].copy_from_slice(&vjp(&rd, &grot));

        let fd = face_frame_kernel(&Dual::<9>::vars(self.corners));
        let mut gc = vjp(&fd, &ga);
        for k in 0..3 {
            for r in 0..3 {
                gc[3 * k + r] += gmu[r] / 3.0;
            }
        }
        (gc, graw)
    }
}

/// World-space rows for every face. `verts` is `V x 3`, `raw` is
/// `F x RAW_WIDTH`.
pub fn world_rows(faces: &[[usize; 3]], verts: &[Vec3], raw: &[f64], d: &GaussianDefaults) -> Result<Vec<f64>> {
    let flat: Vec<f64> = verts.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    world_rows_flat(faces, &flat, raw, d)
}

fn world_rows_flat(faces: &[[usize; 3]], verts: &[f64], raw: &[f64], d: &GaussianDefaults) -> Result<Vec<f64>> {
    Error::check_len("raw gaussians", faces.len() * RAW_WIDTH, raw.len())?;
    let mut out = Vec::with_capacity(faces.len() * WORLD_WIDTH);
    for (fi, f) in faces.iter().enumerate() {
        let e = eval_face(fi, f, verts, &raw[fi * RAW_WIDTH..(fi + 1) * RAW_WIDTH], d)?;
        out.extend_from_slice(&e.row());
    }
    Ok(out)
}

/// Tape version of [`gaussians_world`]: `verts` is the posed high-resolution
/// vertex var (`V x 3`), `raw` the stored encodings (`F x 13`). Output is
/// `F x 13` world rows.
pub fn world_gaussians_tape(
    tape: &mut Tape,
    verts: Var,
    raw: Var,
    faces: Rc<Vec<[usize; 3]>>,
    d: GaussianDefaults,
) -> Result<Var> {
    Error::check_len("vertex width", 3, tape.cols(verts))?;
    Error::check_len("raw gaussian width", RAW_WIDTH, tape.cols(raw))?;
    Error::check_len("raw gaussian rows", faces.len(), tape.rows(raw))?;
    let vv = tape.value_rc(verts);
    let rv = tape.value_rc(raw);
    let out = world_rows_flat(&faces, &vv, &rv, &d)?;
    let mut live = Vec::with_capacity(faces.len() * 3);
    for fi in 0..faces.len() {
        for k in 0..3 {
            let e = rv[fi * RAW_WIDTH + 3 + k].exp();
            live.push(e > d.scale_min && e < d.scale_max);
        }
    }
    tape.note_bools(live);
    let nv = vv.len();
    let n = faces.len();
    Ok(tape.custom(&[verts, raw], out, n, WORLD_WIDTH, move |g, _| {
        let mut gv = vec![0.0; nv];
        let mut gr = vec![0.0; n * RAW_WIDTH];
        for (fi, f) in faces.iter().enumerate() {
            let r = &rv[fi * RAW_WIDTH..(fi + 1) * RAW_WIDTH];
            let e = eval_face(fi, f, &vv, r, &d).expect("checked in forward");
            let (gc, graw) = e.backward(r, &g[fi * WORLD_WIDTH..(fi + 1) * WORLD_WIDTH]);
            for k in 0..3 {
                for c in 0..3 {
                    gv[3 * f[k] + c] += gc[3 * k + c];
                }
            }
            gr[fi * RAW_WIDTH..(fi + 1) * RAW_WIDTH].copy_from_slice(&graw);
        }
        vec![Some(gv), Some(gr)]
    }))
}

/// Skins a `V x 3` var with per-vertex blended transforms of a fixed pose.
pub fn skin_tape(tape: &mut Tape, canonical: Var, weights: &[VertexWeights], pose: &Pose) -> Result<Var> {
    let n = tape.rows(canonical);
    Error::check_len("skinning weights", n, weights.len())?;
    let blends: Vec<(Matrix3<f64>, Vec3)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            blend_transform(w, pose).map_err(|e| match e {
                Error::ZeroWeightSum { .. } => Error::ZeroWeightSum { vertex: Some(i) },
                e => e,
            })
        })
        .collect::<Result<_>>()?;
    let x = tape.value(canonical);
    let mut y = Vec::with_capacity(3 * n);
    for (i, (m, b)) in blends.iter().enumerate() {
        let v = m * Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]) + b;
        y.extend_from_slice(&[v.x, v.y, v.z]);
    }
    Ok(tape.custom(&[canonical], y, n, 3, move |g, _| {
        let mut gx = Vec::with_capacity(3 * n);
        for (i, (m, _)) in blends.iter().enumerate() {
            let v = m.transpose() * Vec3::new(g[3 * i], g[3 * i + 1], g[3 * i + 2]);
            gx.extend_from_slice(&[v.x, v.y, v.z]);
        }
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::{gradcheck_fn, projection_weights, DEFAULT_STEP};
    use crate::geometry::shapes;
    use crate::rig::Joint;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_joint_rig() -> Rig {
        let template = shapes::icosahedron();
        let weights = template
            .vertices
            .iter()
            .map(|v| {
                let a = 0.5 + 0.4 * v.x;
                [(0, a), (1, 1.0 - a)].into_iter().collect()
            })
            .collect();
        Rig {
            joints: vec![
                Joint { parent: None, rest_rotation: UnitQuaternion::identity(), rest_translation: Vec3::zeros() },
                Joint { parent: Some(0), rest_rotation: UnitQuaternion::identity(), rest_translation: Vec3::x() },
            ],
            template,
            weights,
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng, j: usize) -> Pose {
        Pose {
            rotations: (0..j)
                .map(|_| {
                    UnitQuaternion::from_scaled_axis(Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ))
                })
                .collect(),
            translations: (0..j)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        }
    }

    #[test]
    fn init_levels() {
        let rig = two_joint_rig();
        let g0 = init_canonical(&rig, 0, &GaussianDefaults::default()).unwrap();
        assert_eq!(g0.high_face_count(), 20);
        assert_eq!(g0.prolongation, Prolongation::identity(12));
        let g2 = init_canonical(&rig, 2, &GaussianDefaults::default()).unwrap();
        assert_eq!(g2.face_gaussians.len(), 320);
        for k in 0..=3 {
            init_canonical(&rig, k, &GaussianDefaults::default()).unwrap().check_invariants().unwrap();
        }
        assert!(init_canonical(&rig, 4, &GaussianDefaults::default()).is_err());
    }

    #[test]
    fn defaults_decode() {
        let d = GaussianDefaults::default();
        let g = FaceGaussian::defaults(&d).decode(&d);
        assert_eq!(g.rotation, Matrix3::identity());
        assert!((g.scale - Vector3::repeat(0.5)).norm() < 1e-15);
        assert_eq!(g.color, Vector3::repeat(0.5));
        assert_eq!(g.offset, Vector3::zeros());
        assert!((g.opacity - 0.95).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn decoded_values_stay_in_range(raw in proptest::collection::vec(-1e3f64..1e3, RAW_WIDTH)) {
            let d = GaussianDefaults::default();
            let g = FaceGaussian::from_raw(&raw).decode(&d);
            prop_assert!(g.scale.iter().all(|&s| (1e-4..=10.0).contains(&s)));
            prop_assert!(g.offset.iter().all(|&o| o.abs() <= 2.0));
            prop_assert!(g.color.iter().all(|&c| (0.0..=1.0).contains(&c)));
            prop_assert!((0.0..=1.0).contains(&g.opacity));
            prop_assert!((g.rotation.transpose() * g.rotation - Matrix3::identity()).norm() < 1e-9);
        }
    }

    #[test]
    fn articulate_identity_and_rigid() {
        let rig = two_joint_rig();
        let gom = init_canonical(&rig, 2, &GaussianDefaults::default()).unwrap();
        let posed = articulate(&gom, &Pose::identity(2)).unwrap();
        assert_eq!(posed.low_vertices, gom.low_mesh.vertices);
        for (a, b) in posed.high_vertices.iter().zip(&gom.high_mesh.vertices) {
            assert!((a - b).norm() < 1e-15);
        }
        let q = UnitQuaternion::from_euler_angles(0.4, 0.1, -0.8);
        let t = Vec3::new(0.3, -1.0, 2.0);
        let posed = articulate(&gom, &Pose::rigid(2, q, t)).unwrap();
        for (a, b) in posed.high_vertices.iter().zip(&gom.high_mesh.vertices) {
            assert!((a - (q * b + t)).norm() < 1e-12);
        }
    }

    #[test]
    fn articulate_keeps_coupling() {
        let rig = two_joint_rig();
        let gom = init_canonical(&rig, 3, &GaussianDefaults::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let posed = articulate(&gom, &random_pose(&mut rng, 2)).unwrap();
            check_coupling(&gom.prolongation, &posed.low_vertices, &posed.high_vertices).unwrap();
        }
        assert!(articulate(&gom, &Pose::identity(1)).is_err());
    }

    #[test]
    fn zero_offset_mean_is_centroid_and_isotropic_cov() {
        let rig = Rig::rigid(TriMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
        ));
        let d = GaussianDefaults { scale: 1.0, ..Default::default() };
        let gom = init_canonical(&rig, 0, &d).unwrap();
        let g = gaussians_world(&articulate(&gom, &Pose::identity(1)).unwrap()).unwrap();
        assert!((g[0].mu - Vec3::new(1.0 / 3.0, 1.0 / 3.0, 0.0)).norm() < 1e-15);
        // unit-sigma frame of the right triangle: Sigma = I
        assert!((g[0].sigma - Matrix3::identity()).norm() < 1e-12);
        assert!((g[0].opacity - 0.95).abs() < 1e-12);
    }

    fn random_gom(seed: u64) -> CanonicalGoM {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gom = init_canonical(&two_joint_rig(), 1, &GaussianDefaults::default()).unwrap();
        for g in gom.face_gaussians.iter_mut() {
            let raw: Vec<f64> = (0..RAW_WIDTH).map(|_| rng.random_range(-1.5..1.5)).collect();
            *g = FaceGaussian::from_raw(&raw);
        }
        gom
    }

    #[test]
    fn world_gaussians_psd_and_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..3 {
            let gom = random_gom(seed);
            let pose = random_pose(&mut rng, 2);
            let q = UnitQuaternion::from_scaled_axis(Vec3::new(0.3, -1.2, 0.5));
            let t = Vec3::new(1.0, 2.0, -3.0);
            let a = gaussians_world(&articulate(&gom, &pose).unwrap()).unwrap();
            let b = gaussians_world(&articulate(&gom, &pose.then_rigid(&q, &t)).unwrap()).unwrap();
            let r = q.to_rotation_matrix().into_inner();
            for (x, y) in a.iter().zip(&b) {
                assert!((x.sigma - x.sigma.transpose()).norm() < 1e-9);
                assert!(x.sigma.symmetric_eigenvalues().min() > -1e-10);
                assert!((r * x.mu + t - y.mu).norm() < 1e-9);
                assert!((r * x.sigma * r.transpose() - y.sigma).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_high_face_is_named() {
        let gom = init_canonical(&two_joint_rig(), 0, &GaussianDefaults::default()).unwrap();
        let mut posed = articulate(&gom, &Pose::identity(2)).unwrap();
        let [a, b, _] = gom.high_mesh.faces[5];
        posed.high_vertices[b] = posed.high_vertices[a];
        let err = gaussians_world(&posed).unwrap_err();
        assert!(matches!(err, Error::DegenerateFace { face } if gom.high_mesh.faces[face].contains(&b)));
    }

    #[test]
    fn world_tape_gradients() {
        let gom = random_gom(9);
        let faces = Rc::new(gom.high_mesh.faces.clone());
        let verts: Vec<f64> = gom.high_mesh.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let raw = gom.raw_gaussians();
        let d = gom.defaults;
        let nv = verts.len();
        let x: Vec<f64> = verts.iter().chain(&raw).copied().collect();
        let w = projection_weights(faces.len() * WORLD_WIDTH, 3);
        let f = |x: &[f64]| -> f64 {
            let rows = world_rows_flat(&faces, &x[..nv], &x[nv..], &d).unwrap();
            rows.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let v = tape.leaf(verts.clone(), nv / 3, 3);
        let r = tape.leaf(raw.clone(), faces.len(), RAW_WIDTH);
        let out = world_gaussians_tape(&mut tape, v, r, faces.clone(), d).unwrap();
        let wv = tape.constant(w.clone(), faces.len(), WORLD_WIDTH);
        let p = tape.mul(out, wv);
        let s = tape.sum(p);
        let g = tape.backward(s);
        let grad: Vec<f64> = g.dense(v).into_iter().chain(g.dense(r)).collect();
        let coords: Vec<usize> = (0..x.len()).collect();
        let rep = gradcheck_fn(f, &grad, &x, DEFAULT_STEP, &coords, |_, _| true);
        assert!(rep.passes(1e-3), "{rep:?}");
    }

    #[test]
    fn skin_tape_matches_pose_mesh() {
        let rig = two_joint_rig();
        let pose = random_pose(&mut ChaCha8Rng::seed_from_u64(4), 2);
        let flat: Vec<f64> = rig.template.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let mut tape = Tape::new();
        let v = tape.leaf(flat.clone(), 12, 3);
        let out = skin_tape(&mut tape, v, &rig.weights, &pose).unwrap();
        let expected = crate::rig::pose_mesh(&rig, &rig.template.vertices, &pose).unwrap();
        for (i, e) in expected.iter().enumerate() {
            for c in 0..3 {
                assert!((tape.value(out)[3 * i + c] - e[c]).abs() < 1e-12);
            }
        }
        let rep = crate::diff::gradcheck(
            |t, x| skin_tape(t, x, &rig.weights, &pose).unwrap(),
            &flat,
            12,
            3,
            DEFAULT_STEP,
            None,
        );
        assert!(rep.passes(1e-6), "{rep:?}");
    }
}
