//! JSON schemas for cameras, poses, rigs, scene manifests and configs, plus
//! PNG and OBJ.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::{Matrix4, Quaternion, UnitQuaternion};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::geometry::{TriMesh, Vec3};
use crate::reconstruct::SourceView;
use crate::rig::{Joint, Pose, Rig};
use crate::splat::Camera;
use crate::{Error, Result};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, "json", e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera transform.
    pub world_to_camera: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl From<&Camera> for CameraFile {
    fn from(c: &Camera) -> Self {
        let m = c.world_to_camera();
        CameraFile {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_to_camera: std::array::from_fn(|r| std::array::from_fn(|k| m[(r, k)])),
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraFile {
    pub fn to_camera(&self) -> Camera {
        let m = Matrix4::from_fn(|r, k| self.world_to_camera[r][k]);
        Camera::new(self.fx, self.fy, self.cx, self.cy, m, self.width, self.height)
    }
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let cam = read_json::<CameraFile>(path)?.to_camera();
    cam.validate().map_err(|e| Error::format(path, "camera", e.to_string()))?;
    Ok(cam)
}

pub fn write_camera(path: &Path, cam: &Camera) -> Result<()> {
    write_json(path, &CameraFile::from(cam))
}

/// Per-joint skinning transforms; quaternions are `[w, x, y, z]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub rotations: Vec<[f64; 4]>,
    pub translations: Vec<[f64; 3]>,
}

fn quat(q: &[f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(Quaternion::new(q[0], q[1], q[2], q[3]))
}

fn quat_array(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

impl From<&Pose> for PoseFile {
    fn from(p: &Pose) -> Self {
        PoseFile {
            rotations: p.rotations.iter().map(quat_array).collect(),
            translations: p.translations.iter().map(|t| [t.x, t.y, t.z]).collect(),
        }
    }
}

impl PoseFile {
    pub fn to_pose(&self) -> Pose {
        Pose {
            rotations: self.rotations.iter().map(quat).collect(),
            translations: self.translations.iter().map(|t| Vec3::new(t[0], t[1], t[2])).collect(),
        }
    }
}

pub fn read_pose(path: &Path) -> Result<Pose> {
    let pose = read_json::<PoseFile>(path)?.to_pose();
    pose.validate().map_err(|e| Error::format(path, "pose", e.to_string()))?;
    Ok(pose)
}

pub fn write_pose(path: &Path, pose: &Pose) -> Result<()> {
    write_json(path, &PoseFile::from(pose))
}

pub fn read_pose_sequence(path: &Path) -> Result<Vec<Pose>> {
    let files: Vec<PoseFile> = read_json(path)?;
    files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = f.to_pose();
            p.validate().map_err(|e| Error::format(path, format!("poses[{i}]"), e.to_string()))?;
            Ok(p)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointFile {
    pub parent: Option<usize>,
    pub rest_rotation: [f64; 4],
    pub rest_translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub joints: Vec<JointFile>,
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// Per-vertex `(joint, weight)` lists.
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl From<&Rig> for RigFile {
    fn from(r: &Rig) -> Self {
        RigFile {
            joints: r
                .joints
                .iter()
                .map(|j| JointFile {
                    parent: j.parent,
                    rest_rotation: quat_array(&j.rest_rotation),
                    rest_translation: [j.rest_translation.x, j.rest_translation.y, j.rest_translation.z],
                })
                .collect(),
            vertices: r.template.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces: r.template.faces.clone(),
            weights: r.weights.iter().map(|w| w.to_vec()).collect(),
        }
    }
}

impl RigFile {
    pub fn to_rig(&self) -> Result<Rig> {
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let mut out = crate::rig::VertexWeights::new();
                for &p in w {
                    out.try_push(p).map_err(|_| Error::arg(format!("weights[{i}]"), "more than four influences"))?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let rig = Rig {
            joints: self
                .joints
                .iter()
                .map(|j| Joint {
                    parent: j.parent,
                    rest_rotation: quat(&j.rest_rotation),
                    rest_translation: Vec3::new(j.rest_translation[0], j.rest_translation[1], j.rest_translation[2]),
                })
                .collect(),
            template: TriMesh::new(self.vertices.iter().map(|v| Vec3::new(v[0], v[1], v[2])).collect(), self.faces.clone()),
            weights,
        };
        rig.validate()?;
        rig.template.validate()?;
        Ok(rig)
    }
}

pub fn read_rig(path: &Path) -> Result<Rig> {
    read_json::<RigFile>(path)?.to_rig().map_err(|e| Error::format(path, "rig", e.to_string()))
}

pub fn write_rig(path: &Path, rig: &Rig) -> Result<()> {
    write_json(path, &RigFile::from(rig))
}

/// One view on disk. Paths are relative to the manifest. `exact` names an
/// optional container with `image` and `mask` in full precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub image: String,
    pub mask: String,
    pub camera: String,
    pub pose: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub subject: String,
    pub rig: String,
    pub entries: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<ViewEntry>,
}

/// A manifest with every path resolved and checked.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub manifest: SceneManifest,
    pub dir: PathBuf,
}

impl Scene {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: SceneManifest = read_json(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let scene = Scene { manifest, dir };
        let m = &scene.manifest;
        let mut files = vec![m.rig.clone()];
        for e in m.entries.iter().chain(&m.targets) {
            files.extend([e.image.clone(), e.mask.clone(), e.camera.clone(), e.pose.clone()]);
            files.extend(e.exact.clone());
        }
        for f in files {
            let p = scene.dir.join(&f);
            if !p.is_file() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest")));
            }
        }
        if m.entries.is_empty() {
            return Err(Error::format(path, "entries", "no source views"));
        }
        Ok(scene)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn rig(&self) -> Result<Rig> {
        read_rig(&self.path(&self.manifest.rig))
    }

    pub fn view(&self, e: &ViewEntry) -> Result<SourceView> {
        let camera = read_camera(&self.path(&e.camera))?;
        let pose = read_pose(&self.path(&e.pose))?;
        let (image, mask) = match &e.exact {
            Some(x) => read_exact_view(&self.path(x), camera.width, camera.height)?,
            None => {
                let (w, h, image) = read_png_rgb(&self.path(&e.image))?;
                let (mw, mh, mask) = read_png_gray(&self.path(&e.mask))?;
                if (w, h) != (camera.width, camera.height) || (mw, mh) != (w, h) {
                    return Err(Error::format(self.path(&e.image), "size", format!("{w}x{h} does not match the camera")));
                }
                (image, mask)
            }
        };
        Ok(SourceView { image, mask, pose, camera })
    }

    pub fn sources(&self) -> Result<Vec<SourceView>> {
        self.manifest.entries.iter().map(|e| self.view(e)).collect()
    }

    pub fn targets(&self) -> Result<Vec<SourceView>> {
        self.manifest.targets.iter().map(|e| self.view(e)).collect()
    }
}

pub fn write_exact_view(path: &Path, image: &[f64], mask: &[f64], width: usize, height: usize) -> Result<()> {
    let mut c = super::Container::new();
    c.push_f32("image", vec![height, width, 3], image.iter().map(|&v| v as f32).collect())?;
    c.push_f32("mask", vec![height, width], mask.iter().map(|&v| v as f32).collect())?;
    c.write(path)
}

pub fn read_exact_view(path: &Path, width: usize, height: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = super::Container::read(path)?;
    let (s, image) = c.f32("image", path)?;
    if s != [height, width, 3] {
        return Err(Error::format(path, "image", format!("shape {s:?}, expected [{height}, {width}, 3]")));
    }
    let (s, mask) = c.f32("mask", path)?;
    if s != [height, width] {
        return Err(Error::format(path, "mask", format!("shape {s:?}, expected [{height}, {width}]")));
    }
    Ok((image.iter().map(|&v| v as f64).collect(), mask.iter().map(|&v| v as f64).collect()))
}

pub fn linear_to_srgb(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if x <= 0.003_130_8 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(x: f64) -> f64 {
    if x <= 0.040_45 {
        x / 12.92
    } else {
        ((x + 0.055) / 1.055).powf(2.4)
    }
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes linear RGB (`h*w*3`) as 8-bit sRGB.
pub fn write_png_rgb(path: &Path, image: &[f64], width: usize, height: usize) -> Result<()> {
    Error::check_len("png image", 3 * width * height, image.len())?;
    let buf: Vec<u8> = image.iter().map(|&v| quantize(linear_to_srgb(v))).collect();
    let img: RgbImage = ImageBuffer::from_raw(width as u32, height as u32, buf).expect("sized buffer");
    img.save(path).map_err(|e| Error::format(path, "png", e.to_string()))
}

/// Writes a mask (`h*w`, values in `[0, 1]`) as 8-bit gray without a
/// transfer curve.
pub fn write_png_gray(path: &Path, mask: &[f64], width: usize, height: usize) -> Result<()> {
    Error::check_len("png mask", width * height, mask.len())?;
    let img: GrayImage = ImageBuffer::from_raw(width as u32, height as u32, mask.iter().map(|&v| quantize(v)).collect()).expect("sized buffer");
    img.save(path).map_err(|e| Error::format(path, "png", e.to_string()))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    image::open(path).map_err(|e| Error::format(path, "png", e.to_string()))
}

/// Reads an sRGB PNG as linear RGB. Returns `(width, height, pixels)`.
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open_png(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let px = img.pixels().flat_map(|Rgb(p)| p.map(|c| srgb_to_linear(c as f64 / 255.0))).collect();
    Ok((w as usize, h as usize, px))
}

pub fn read_png_gray(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open_png(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.pixels().map(|Luma([c])| *c as f64 / 255.0).collect()))
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z).map_err(io)?;
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainkit::synthetic::{make_synthetic_subject, orbit_camera};

    #[test]
    fn camera_golden_projection() {
        // identity extrinsics: a point on the optical axis lands on the
        // principal point, one unit right at depth 2 moves fx / 2 pixels
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cam.json");
        std::fs::write(
            &p,
            r#"{"fx": 100.0, "fy": 80.0, "cx": 31.5, "cy": 15.5,
                "world_to_camera": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]],
                "width": 64, "height": 32}"#,
        )
        .unwrap();
        let cam = read_camera(&p).unwrap();
        let (uv, z) = cam.project_point(&Vec3::new(0.0, 0.0, 2.0), 0.01).unwrap();
        assert_eq!((uv, z), ([31.5, 15.5], 2.0));
        let (uv, _) = cam.project_point(&Vec3::new(1.0, -0.5, 2.0), 0.01).unwrap();
        assert_eq!(uv, [81.5, -4.5]);
    }

    #[test]
    fn json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_synthetic_subject(0);
        let cam = orbit_camera(&s, 0.3, 0.1, 32, 24);
        write_camera(&dir.path().join("c.json"), &cam).unwrap();
        let back = read_camera(&dir.path().join("c.json")).unwrap();
        assert!((back.rotation - cam.rotation).amax() < 1e-15);
        assert!((back.translation - cam.translation).amax() < 1e-15);
        write_rig(&dir.path().join("r.json"), &s.rig).unwrap();
        let rig = read_rig(&dir.path().join("r.json")).unwrap();
        assert_eq!(rig.template, s.rig.template);
        assert_eq!(rig.weights, s.rig.weights);
        let pose = crate::trainkit::BodyPose::rest().skinning(&s.rig).unwrap();
        write_pose(&dir.path().join("p.json"), &pose).unwrap();
        assert_eq!(read_pose(&dir.path().join("p.json")).unwrap().translations, pose.translations);
    }

    #[test]
    fn schema_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(&p, r#"{"rotations": [[1,0,0,0]], "translations": [[0,0,0]], "extra": 1}"#).unwrap();
        let e = read_pose(&p).unwrap_err().to_string();
        assert!(e.contains("bad.json") && e.contains("extra"), "{e}");
        let e = read_camera(&dir.path().join("missing.json")).unwrap_err().to_string();
        assert!(e.contains("missing.json"));
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img: Vec<f64> = (0..4 * 3 * 3).map(|i| i as f64 / 36.0).collect();
        write_png_rgb(&p, &img, 4, 3).unwrap();
        let (w, h, back) = read_png_rgb(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in img.iter().zip(&back) {
            assert!((linear_to_srgb(*a) - linear_to_srgb(*b)).abs() <= 0.5 / 255.0 + 1e-12);
        }
        for x in [0.0, 0.002, 0.2, 0.7, 1.0] {
            assert!((srgb_to_linear(linear_to_srgb(x)) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn manifest_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = SceneManifest {
            subject: "s".into(),
            rig: "rig.json".into(),
            entries: vec![ViewEntry { image: "a.png".into(), mask: "a_mask.png".into(), camera: "c.json".into(), pose: "p.json".into(), exact: None }],
            targets: vec![],
        };
        let path = dir.path().join("scene.json");
        write_json(&path, &m).unwrap();
        let e = Scene::load(&path).unwrap_err().to_string();
        assert!(e.contains("rig.json"), "{e}");
    }
}
