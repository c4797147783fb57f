//! Skeleton, poses and linear blend skinning of the low-resolution mesh.

use arrayvec::ArrayVec;
use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{TriMesh, Vec3};
use crate::{Error, Result};

pub const MAX_INFLUENCES: usize = 4;

/// Up to four `(joint, weight)` influences of one vertex.
pub type VertexWeights = ArrayVec<(usize, f64), MAX_INFLUENCES>;

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub parent: Option<usize>,
    /// Rest transform relative to the parent joint.
    pub rest_rotation: UnitQuaternion<f64>,
    pub rest_translation: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub joints: Vec<Joint>,
    pub template: TriMesh,
    pub weights: Vec<VertexWeights>,
}

/// Per-joint skinning transforms `(R_j, t_j)` applied to canonical vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub rotations: Vec<UnitQuaternion<f64>>,
    pub translations: Vec<Vec3>,
}

impl Pose {
    pub fn identity(joints: usize) -> Self {
        Pose {
            rotations: vec![UnitQuaternion::identity(); joints],
            translations: vec![Vec3::zeros(); joints],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.len()
    }

    /// The same rigid motion for every joint.
    pub fn rigid(joints: usize, rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Pose {
            rotations: vec![rotation; joints],
            translations: vec![translation; joints],
        }
    }

    /// Pre-composes a global rigid motion: `(R R_j, R t_j + t)`.
    pub fn then_rigid(&self, rotation: &UnitQuaternion<f64>, translation: &Vec3) -> Pose {
        Pose {
            rotations: self.rotations.iter().map(|q| rotation * q).collect(),
            translations: self
                .translations
                .iter()
                .map(|t| rotation * t + translation)
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_len("pose translations", self.rotations.len(), self.translations.len())?;
        for (j, q) in self.rotations.iter().enumerate() {
            if (q.as_ref().norm() - 1.0).abs() > 1e-9 {
                return Err(Error::arg("pose", format!("rotation {j} is not unit length")));
            }
        }
        Ok(())
    }
}

/// Normalized blend of the influencing joint transforms as an affine map
/// `v -> m v + b`.
pub fn blend_transform(weights: &[(usize, f64)], pose: &Pose) -> Result<(Matrix3<f64>, Vec3)> {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeightSum { vertex: None });
    }
    let mut m = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for &(j, w) in weights {
        let (rot, t) = pose
            .rotations
            .get(j)
            .zip(pose.translations.get(j))
            .ok_or_else(|| Error::arg("pose", format!("missing joint {j}")))?;
        m += rot.to_rotation_matrix().matrix() * w;
        b += t * w;
    }
    Ok((m / total, b / total))
}

pub fn lbs_point(v: &Vec3, weights: &[(usize, f64)], pose: &Pose) -> Result<Vec3> {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeightSum { vertex: None });
    }
    let mut acc = Vec3::zeros();
    for &(j, w) in weights {
        if j >= pose.joint_count() {
            return Err(Error::arg("pose", format!("missing joint {j}")));
        }
        acc += (pose.rotations[j] * v + pose.translations[j]) * w;
    }
    Ok(acc / total)
}

fn is_identity(pose: &Pose) -> bool {
    pose.rotations.iter().all(|q| *q == UnitQuaternion::identity())
        && pose.translations.iter().all(|t| *t == Vec3::zeros())
}

pub fn pose_mesh(rig: &Rig, canonical: &[Vec3], pose: &Pose) -> Result<Vec<Vec3>> {
    Error::check_len("canonical positions", rig.template.vertices.len(), canonical.len())?;
    Error::check_len("pose joints", rig.joints.len(), pose.joint_count())?;
    skin_vertices(&rig.weights, canonical, pose)
}

/// [`lbs_point`] over every vertex; the identity pose returns the input
/// unchanged.
pub fn skin_vertices(weights: &[VertexWeights], canonical: &[Vec3], pose: &Pose) -> Result<Vec<Vec3>> {
    Error::check_len("skinning weights", canonical.len(), weights.len())?;
    if is_identity(pose) {
        // sum(w v)/sum(w) is not bitwise v in floating point
        for (i, w) in weights.iter().enumerate() {
            if !(w.iter().map(|x| x.1).sum::<f64>() > 0.0) {
                return Err(Error::ZeroWeightSum { vertex: Some(i) });
            }
        }
        return Ok(canonical.to_vec());
    }
    canonical
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (v, w))| {
            lbs_point(v, w, pose).map_err(|e| match e {
                Error::ZeroWeightSum { .. } => Error::ZeroWeightSum { vertex: Some(i) },
                e => e,
            })
        })
        .collect()
}

/// Adds i.i.d. normal noise to every translation component and, in the
/// axis-angle tangent space, to every rotation.
pub fn perturb_pose(pose: &Pose, sigma: f64, seed: u64) -> Pose {
    if sigma <= 0.0 {
        return pose.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut out = pose.clone();
    for (q, t) in out.rotations.iter_mut().zip(out.translations.iter_mut()) {
        let w = Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        *q = UnitQuaternion::new_normalize(*(UnitQuaternion::from_scaled_axis(w) * *q).quaternion());
        *t += Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
    }
    out
}

impl Rig {
    /// A single root joint that owns every vertex.
    pub fn rigid(template: TriMesh) -> Self {
        let weights = template.vertices.iter().map(|_| [(0, 1.0)].into_iter().collect()).collect();
        Rig {
            joints: vec![Joint {
                parent: None,
                rest_rotation: UnitQuaternion::identity(),
                rest_translation: Vec3::zeros(),
            }],
            template,
            weights,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints.len();
        if j == 0 {
            return Err(Error::InvalidRig("no joints".into()));
        }
        for (i, joint) in self.joints.iter().enumerate() {
            if let Some(p) = joint.parent {
                if p >= j {
                    return Err(Error::InvalidRig(format!("joint {i} has missing parent {p}")));
                }
            }
            // walk to the root; more than j hops means a cycle
            let mut cur = joint.parent;
            let mut hops = 0;
            while let Some(p) = cur {
                hops += 1;
                if hops > j {
                    return Err(Error::InvalidRig(format!("joint {i} is on a parent cycle")));
                }
                cur = self.joints[p].parent;
            }
        }
        self.template.validate()?;
        Error::check_len("skinning weights", self.template.vertices.len(), self.weights.len())?;
        for (v, w) in self.weights.iter().enumerate() {
            let mut total = 0.0;
            for &(joint, weight) in w {
                if joint >= j {
                    return Err(Error::InvalidRig(format!("vertex {v} weights missing joint {joint}")));
                }
                if !(weight >= 0.0) || !weight.is_finite() {
                    return Err(Error::InvalidRig(format!("vertex {v} has negative weight")));
                }
                total += weight;
            }
            if !(total > 0.0 && total <= 1.0 + 1e-9) {
                return Err(Error::InvalidRig(format!("vertex {v} weight sum {total} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// World rest transforms of every joint (parents precede children or not,
    /// resolved recursively).
    pub fn rest_world(&self) -> Vec<Isometry3<f64>> {
        self.world_transforms(&vec![UnitQuaternion::identity(); self.joints.len()], &Isometry3::identity())
    }

    fn world_transforms(&self, local: &[UnitQuaternion<f64>], root: &Isometry3<f64>) -> Vec<Isometry3<f64>> {
        fn resolve(
            rig: &Rig,
            j: usize,
            local: &[UnitQuaternion<f64>],
            root: &Isometry3<f64>,
            out: &mut Vec<Option<Isometry3<f64>>>,
        ) -> Isometry3<f64> {
            if let Some(t) = out[j] {
                return t;
            }
            let joint = &rig.joints[j];
            let rest = Isometry3::from_parts(Translation3::from(joint.rest_translation), joint.rest_rotation);
            let here = rest * Isometry3::from_parts(Translation3::identity(), local[j]);
            let world = match joint.parent {
                Some(p) => resolve(rig, p, local, root, out) * here,
                None => root * here,
            };
            out[j] = Some(world);
            world
        }
        let mut out = vec![None; self.joints.len()];
        (0..self.joints.len())
            .map(|j| resolve(self, j, local, root, &mut out))
            .collect()
    }

    /// Forward kinematics helper: local joint rotations plus a root motion
    /// become skinning transforms `G_j * G_rest_j^-1`.
    pub fn pose_from_local(&self, local: &[UnitQuaternion<f64>], root: &Isometry3<f64>) -> Result<Pose> {
        Error::check_len("local rotations", self.joints.len(), local.len())?;
        let rest = self.rest_world();
        let posed = self.world_transforms(local, root);
        let mut pose = Pose::identity(self.joints.len());
        for j in 0..self.joints.len() {
            let m = posed[j] * rest[j].inverse();
            pose.rotations[j] = m.rotation;
            pose.translations[j] = m.translation.vector;
        }
        Ok(pose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;
    use rand::Rng;

    fn rand_quat(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
        UnitQuaternion::from_scaled_axis(Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ))
    }

    fn rand_vec(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    fn weights(pairs: &[(usize, f64)]) -> VertexWeights {
        pairs.iter().copied().collect()
    }

    fn random_rig(rng: &mut ChaCha8Rng, joints: usize) -> Rig {
        let template = shapes::icosahedron();
        let w = template
            .vertices
            .iter()
            .map(|_| {
                let raw: Vec<f64> = (0..joints).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().enumerate().map(|(j, x)| (j, x / s)).collect()
            })
            .collect();
        Rig {
            joints: (0..joints)
                .map(|j| Joint {
                    parent: if j == 0 { None } else { Some(j - 1) },
                    rest_rotation: UnitQuaternion::identity(),
                    rest_translation: rand_vec(rng),
                })
                .collect(),
            template,
            weights: w,
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng, joints: usize) -> Pose {
        Pose {
            rotations: (0..joints).map(|_| rand_quat(rng)).collect(),
            translations: (0..joints).map(|_| rand_vec(rng)).collect(),
        }
    }

    #[test]
    fn single_joint_translation() {
        let mut pose = Pose::identity(1);
        pose.translations[0] = Vec3::x();
        let out = lbs_point(&Vec3::zeros(), &weights(&[(0, 1.0)]), &pose).unwrap();
        assert_eq!(out, Vec3::x());
        // weight magnitude is normalized away
        let out = lbs_point(&Vec3::zeros(), &weights(&[(0, 0.2)]), &pose).unwrap();
        assert!((out - Vec3::x()).norm() < 1e-15);
    }

    #[test]
    fn two_joint_blend() {
        let mut pose = Pose::identity(2);
        pose.translations[0] = Vec3::x();
        pose.translations[1] = Vec3::y();
        let out = lbs_point(&Vec3::zeros(), &weights(&[(0, 0.5), (1, 0.5)]), &pose).unwrap();
        assert_eq!(out, Vec3::new(0.5, 0.5, 0.0));
    }

    #[test]
    fn zero_weights_rejected() {
        let pose = Pose::identity(1);
        assert!(matches!(
            lbs_point(&Vec3::zeros(), &weights(&[(0, 0.0)]), &pose),
            Err(Error::ZeroWeightSum { .. })
        ));
        let mut rig = random_rig(&mut ChaCha8Rng::seed_from_u64(0), 1);
        rig.weights[3] = weights(&[(0, 0.0)]);
        let mut p = Pose::identity(1);
        p.translations[0] = Vec3::x();
        assert!(matches!(
            pose_mesh(&rig, &rig.template.vertices, &p),
            Err(Error::ZeroWeightSum { vertex: Some(3) })
        ));
    }

    #[test]
    fn identity_pose_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rig = random_rig(&mut rng, 4);
        let pos: Vec<Vec3> = rig.template.vertices.iter().map(|v| v * 1.37 + rand_vec(&mut rng)).collect();
        assert_eq!(pose_mesh(&rig, &pos, &Pose::identity(4)).unwrap(), pos);
    }

    #[test]
    fn global_rotation_is_rigid() {
        let rig = random_rig(&mut ChaCha8Rng::seed_from_u64(2), 1);
        let q = UnitQuaternion::from_euler_angles(0.3, -0.4, 1.1);
        let out = pose_mesh(&rig, &rig.template.vertices, &Pose::rigid(1, q, Vec3::zeros())).unwrap();
        for (o, v) in out.iter().zip(&rig.template.vertices) {
            assert!((o - q * v).norm() < 1e-12);
        }
    }

    #[test]
    fn random_pose_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rig = random_rig(&mut rng, 4);
        let pose = random_pose(&mut rng, 4);
        let out = pose_mesh(&rig, &rig.template.vertices, &pose).unwrap();
        for (i, v) in rig.template.vertices.iter().enumerate() {
            // scalar loop with explicit quaternion -> matrix
            let mut acc = [0.0f64; 3];
            let mut total = 0.0;
            for &(j, w) in &rig.weights[i] {
                let q = pose.rotations[j].quaternion();
                let (qw, qx, qy, qz) = (q.w, q.i, q.j, q.k);
                let m = [
                    [1.0 - 2.0 * (qy * qy + qz * qz), 2.0 * (qx * qy - qw * qz), 2.0 * (qx * qz + qw * qy)],
                    [2.0 * (qx * qy + qw * qz), 1.0 - 2.0 * (qx * qx + qz * qz), 2.0 * (qy * qz - qw * qx)],
                    [2.0 * (qx * qz - qw * qy), 2.0 * (qy * qz + qw * qx), 1.0 - 2.0 * (qx * qx + qy * qy)],
                ];
                for r in 0..3 {
                    acc[r] += w * (m[r][0] * v.x + m[r][1] * v.y + m[r][2] * v.z + pose.translations[j][r]);
                }
                total += w;
            }
            for r in 0..3 {
                assert!((out[i][r] - acc[r] / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lbs_commutes_with_global_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rig = random_rig(&mut rng, 3);
        let pose = random_pose(&mut rng, 3);
        let q = rand_quat(&mut rng);
        let t = rand_vec(&mut rng);
        let moved = pose.then_rigid(&q, &t);
        let a = pose_mesh(&rig, &rig.template.vertices, &pose).unwrap();
        let b = pose_mesh(&rig, &rig.template.vertices, &moved).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((q * x + t - y).norm() < 1e-9);
        }
    }

    #[test]
    fn weight_scaling_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = random_pose(&mut rng, 3);
        let w = weights(&[(0, 0.2), (1, 0.3), (2, 0.1)]);
        let w2: VertexWeights = w.iter().map(|&(j, x)| (j, x * 7.5)).collect();
        let v = rand_vec(&mut rng);
        let a = lbs_point(&v, &w, &pose).unwrap();
        let b = lbs_point(&v, &w2, &pose).unwrap();
        assert!((a - b).norm() < 1e-12);
        let (m, off) = blend_transform(&w, &pose).unwrap();
        assert!((m * v + off - a).norm() < 1e-12);
    }

    #[test]
    fn perturbation_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pose = random_pose(&mut rng, 9);
        assert_eq!(perturb_pose(&pose, 0.0, 42), pose);
        let a = perturb_pose(&pose, 0.3, 42);
        assert_eq!(a, perturb_pose(&pose, 0.3, 42));
        assert_ne!(a, perturb_pose(&pose, 0.3, 43));
        a.validate().unwrap();
    }

    #[test]
    fn perturbation_translation_std() {
        let pose = Pose::identity(1);
        let samples: Vec<f64> = (0..1000)
            .map(|s| perturb_pose(&pose, 0.3, s).translations[0].x)
            .collect();
        let mean = samples.iter().sum::<f64>() / 1000.0;
        let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        assert!((std - 0.3).abs() < 0.03, "std {std}");
    }

    #[test]
    fn rig_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rig = random_rig(&mut rng, 3);
        rig.validate().unwrap();
        let mut cyc = rig.clone();
        cyc.joints[0].parent = Some(2);
        assert!(cyc.validate().is_err());
        let mut neg = rig.clone();
        neg.weights[0] = weights(&[(0, -0.5), (1, 1.0)]);
        assert!(neg.validate().is_err());
    }

    #[test]
    fn forward_kinematics_rest_is_identity() {
        let rig = random_rig(&mut ChaCha8Rng::seed_from_u64(9), 4);
        let pose = rig
            .pose_from_local(&vec![UnitQuaternion::identity(); 4], &Isometry3::identity())
            .unwrap();
        for (q, t) in pose.rotations.iter().zip(&pose.translations) {
            assert!(q.angle() < 1e-12);
            assert!(t.norm() < 1e-12);
        }
    }

    #[test]
    fn forward_kinematics_rotates_children_about_joint() {
        // chain root at origin, child at +x; bend root by 90 degrees about z
        let rig = Rig {
            joints: vec![
                Joint { parent: None, rest_rotation: UnitQuaternion::identity(), rest_translation: Vec3::zeros() },
                Joint { parent: Some(0), rest_rotation: UnitQuaternion::identity(), rest_translation: Vec3::x() },
            ],
            template: shapes::tetrahedron(),
            weights: vec![weights(&[(1, 1.0)]); 4],
        };
        let bend = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let pose = rig
            .pose_from_local(&[bend, UnitQuaternion::identity()], &Isometry3::identity())
            .unwrap();
        // a point at the child joint position moves to +y
        let p = lbs_point(&Vec3::x(), &weights(&[(1, 1.0)]), &pose).unwrap();
        assert!((p - Vec3::y()).norm() < 1e-12);
    }
}
