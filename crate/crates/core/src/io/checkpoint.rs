//! Canonical GoMs and trained parameters in the tensor container.

use std::path::Path;

use super::Container;
use crate::diff::{ParamEntry, ParamStore};
use crate::geometry::{subdivide_levels, TriMesh, Vec3};
use crate::gom::{CanonicalGoM, FaceGaussian, GaussianDefaults, RAW_WIDTH};
use crate::reconstruct::ReconConfig;
use crate::rig::{VertexWeights, MAX_INFLUENCES};
use crate::{Error, Result};

fn to_i32(path: &Path, field: &str, v: usize) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::format(path, field, format!("{v} does not fit in i32")))
}

fn to_index(path: &Path, field: &str, v: i32, bound: usize) -> Result<usize> {
    usize::try_from(v)
        .ok()
        .filter(|&u| u < bound)
        .ok_or_else(|| Error::format(path, field, format!("index {v} out of range 0..{bound}")))
}

fn faces_i32(path: &Path, field: &str, faces: &[[usize; 3]]) -> Result<Vec<i32>> {
    faces.iter().flatten().map(|&i| to_i32(path, field, i)).collect()
}

fn expect_shape(path: &Path, field: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::format(path, field, format!("shape {got:?}, expected {want:?}")))
    }
}

fn defaults_f32(d: &GaussianDefaults) -> [f32; 5] {
    [d.scale, d.opacity, d.offset_bound, d.scale_min, d.scale_max].map(|v| v as f32)
}

/// Serializes a canonical GoM. Values are stored as `f32`.
pub fn gom_container(gom: &CanonicalGoM, path: &Path) -> Result<Container> {
    let v = gom.low_count();
    let mut c = Container::new();
    c.push_f32("low.vertices", vec![v, 3], gom.low_mesh.vertices.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect())?;
    c.push_i32("low.faces", vec![gom.low_mesh.faces.len(), 3], faces_i32(path, "low.faces", &gom.low_mesh.faces)?)?;
    let mut joints = Vec::with_capacity(v * MAX_INFLUENCES);
    let mut values = Vec::with_capacity(v * MAX_INFLUENCES);
    for w in &gom.weights {
        for k in 0..MAX_INFLUENCES {
            match w.get(k) {
                Some(&(j, x)) => {
                    joints.push(to_i32(path, "weights.joints", j)?);
                    values.push(x as f32);
                }
                None => {
                    joints.push(-1);
                    values.push(0.0);
                }
            }
        }
    }
    c.push_i32("weights.joints", vec![v, MAX_INFLUENCES], joints)?;
    c.push_f32("weights.values", vec![v, MAX_INFLUENCES], values)?;
    c.push_i32("high.faces", vec![gom.high_face_count(), 3], faces_i32(path, "high.faces", &gom.high_mesh.faces)?)?;
    c.push_f32("gaussians", vec![gom.high_face_count(), RAW_WIDTH], gom.raw_gaussians().iter().map(|&x| x as f32).collect())?;
    c.push_i32("subdivision", vec![1], vec![to_i32(path, "subdivision", gom.subdivision_levels)?])?;
    c.push_f32("defaults", vec![5], defaults_f32(&gom.defaults).to_vec())?;
    Ok(c)
}

/// Rebuilds a GoM. The high mesh is re-derived from the low mesh so the
/// coupling holds exactly, and must match the stored faces.
pub fn gom_from_container(c: &Container, path: &Path) -> Result<CanonicalGoM> {
    let (s, low) = c.f32("low.vertices", path)?;
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::format(path, "low.vertices", format!("shape {s:?}, expected [V, 3]")));
    }
    let v = s[0];
    let vertices: Vec<Vec3> = low.chunks(3).map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect();
    let read_faces = |name: &str, bound: usize| -> Result<Vec<[usize; 3]>> {
        let (s, f) = c.i32(name, path)?;
        if s.len() != 2 || s[1] != 3 {
            return Err(Error::format(path, name, format!("shape {s:?}, expected [F, 3]")));
        }
        f.chunks(3)
            .map(|t| Ok([to_index(path, name, t[0], bound)?, to_index(path, name, t[1], bound)?, to_index(path, name, t[2], bound)?]))
            .collect()
    };
    let low_mesh = TriMesh::new(vertices, read_faces("low.faces", v)?);
    let (s, joints) = c.i32("weights.joints", path)?;
    expect_shape(path, "weights.joints", s, &[v, MAX_INFLUENCES])?;
    let (s, values) = c.f32("weights.values", path)?;
    expect_shape(path, "weights.values", s, &[v, MAX_INFLUENCES])?;
    let mut weights = Vec::with_capacity(v);
    for (js, ws) in joints.chunks(MAX_INFLUENCES).zip(values.chunks(MAX_INFLUENCES)) {
        let mut w = VertexWeights::new();
        for (&j, &x) in js.iter().zip(ws) {
            if j >= 0 {
                w.push((j as usize, x as f64));
            }
        }
        weights.push(w);
    }
    let (s, k) = c.i32("subdivision", path)?;
    expect_shape(path, "subdivision", s, &[1])?;
    let k = usize::try_from(k[0]).map_err(|_| Error::format(path, "subdivision", "negative"))?;
    let (high_mesh, prolongation) = subdivide_levels(&low_mesh, k).map_err(|e| Error::format(path, "low mesh", e.to_string()))?;
    let stored_high = read_faces("high.faces", high_mesh.vertices.len())?;
    if stored_high != high_mesh.faces {
        return Err(Error::format(path, "high.faces", "not the subdivision of low.faces"));
    }
    let (s, g) = c.f32("gaussians", path)?;
    expect_shape(path, "gaussians", s, &[high_mesh.faces.len(), RAW_WIDTH])?;
    let face_gaussians = g.chunks(RAW_WIDTH).map(|r| FaceGaussian::from_raw(&r.iter().map(|&x| x as f64).collect::<Vec<_>>())).collect();
    let (s, d) = c.f32("defaults", path)?;
    expect_shape(path, "defaults", s, &[5])?;
    // the stock defaults survive the f32 round trip exactly
    let defaults = if d == defaults_f32(&GaussianDefaults::default()) {
        GaussianDefaults::default()
    } else {
        GaussianDefaults { scale: d[0] as f64, opacity: d[1] as f64, offset_bound: d[2] as f64, scale_min: d[3] as f64, scale_max: d[4] as f64 }
    };
    let gom = CanonicalGoM { low_mesh, weights, high_mesh, prolongation, face_gaussians, subdivision_levels: k, defaults };
    gom.check_invariants().map_err(|e| Error::format(path, "gom", e.to_string()))?;
    Ok(gom)
}

pub fn save_gom(path: &Path, gom: &CanonicalGoM) -> Result<()> {
    gom_container(gom, path)?.write(path)
}

pub fn load_gom(path: &Path) -> Result<CanonicalGoM> {
    gom_from_container(&Container::read(path)?, path)
}

/// Trained parameters with optimizer state and the network configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: ReconConfig,
}

const PARAM: &str = "param/";

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut c = Container::new();
    let json = serde_json::to_string(&ck.config).expect("serializable");
    c.push_i32("config", vec![json.len()], json.bytes().map(i32::from).collect())?;
    for (name, e) in ck.params.iter() {
        c.push_f32(&format!("{PARAM}{name}"), e.shape.clone(), e.data.clone())?;
        c.push_f32(&format!("adam.m/{name}"), e.shape.clone(), e.m.clone())?;
        c.push_f32(&format!("adam.v/{name}"), e.shape.clone(), e.v.clone())?;
        c.push_i32(&format!("adam.step/{name}"), vec![1], vec![e.step as i32])?;
    }
    c.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::read(path)?;
    let (_, bytes) = c.i32("config", path)?;
    let bytes: Vec<u8> = bytes.iter().map(|&b| u8::try_from(b).map_err(|_| Error::format(path, "config", "not UTF-8 bytes"))).collect::<Result<_>>()?;
    let config: ReconConfig = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, "config", e.to_string()))?;
    config.validate().map_err(|e| Error::format(path, "config", e.to_string()))?;
    let mut params = ParamStore::new();
    for t in c.tensors() {
        let Some(name) = t.name.strip_prefix(PARAM) else { continue };
        let (shape, data) = c.f32(&t.name, path)?;
        let (_, m) = c.f32(&format!("adam.m/{name}"), path)?;
        let (_, v) = c.f32(&format!("adam.v/{name}"), path)?;
        let (_, step) = c.i32(&format!("adam.step/{name}"), path)?;
        let mut e = ParamEntry::new(shape.to_vec(), data.to_vec())?;
        Error::check_len("adam.m", data.len(), m.len())?;
        Error::check_len("adam.v", data.len(), v.len())?;
        e.m = m.to_vec();
        e.v = v.to_vec();
        e.step = step.first().copied().and_then(|s| u32::try_from(s).ok()).ok_or_else(|| Error::format(path, "adam.step", "invalid"))?;
        params.insert_entry(name, e)?;
    }
    Ok(Checkpoint { params, config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gom::init_canonical;
    use crate::reconstruct::init_params;
    use crate::trainkit::make_synthetic_subject;

    #[test]
    fn gom_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_synthetic_subject(3);
        let mut gom = init_canonical(&s.rig, 1, &GaussianDefaults::default()).unwrap();
        for (i, g) in gom.face_gaussians.iter_mut().enumerate() {
            g.c[0] = i as f64 * 0.01;
        }
        let p = dir.path().join("a.lgom");
        save_gom(&p, &gom).unwrap();
        let back = load_gom(&p).unwrap();
        assert_eq!(back.defaults, gom.defaults);
        assert_eq!(back.high_mesh.faces, gom.high_mesh.faces);
        assert_eq!(back.weights.len(), gom.weights.len());
        for (a, b) in back.raw_gaussians().iter().zip(gom.raw_gaussians()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        // a second trip is lossless
        let q = dir.path().join("b.lgom");
        save_gom(&q, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        assert_eq!(load_gom(&q).unwrap(), back);
    }

    #[test]
    fn gom_rejects_tampered_faces() {
        let dir = tempfile::tempdir().unwrap();
        let gom = init_canonical(&make_synthetic_subject(0).rig, 1, &GaussianDefaults::default()).unwrap();
        let p = dir.path().join("a.lgom");
        let mut c = gom_container(&gom, &p).unwrap();
        let mut faces = c.i32("high.faces", &p).unwrap().1.to_vec();
        faces.swap(0, 1);
        let mut d = Container::new();
        for t in c.tensors() {
            if t.name == "high.faces" {
                d.push_i32("high.faces", t.shape.clone(), faces.clone()).unwrap();
            } else {
                d.push(&t.name, t.shape.clone(), t.data.clone()).unwrap();
            }
        }
        c = d;
        let e = gom_from_container(&c, &p).unwrap_err().to_string();
        assert!(e.contains("high.faces"), "{e}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = ReconConfig { feature_width: 4, hidden: 4, pyramid_levels: 2, ..ReconConfig::default() };
        let mut params = init_params(&config, 88, 5).unwrap();
        let name = params.names().next().unwrap().to_string();
        let e = params.get_mut(&name).unwrap();
        e.m[0] = 0.25;
        e.step = 7;
        let ck = Checkpoint { params, config };
        let p = dir.path().join("c.lgom");
        save_checkpoint(&p, &ck).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
    }
}
