//! The feedback reconstructor. Starting from the rig template, each step
//! renders the source views from the current estimate, compares them with
//! the real sources through image features sampled at the projected
//! vertices, fuses the evidence across views and over the mesh, then moves
//! the low-resolution vertices and predicts every high-resolution Gaussian
//! afresh.

pub mod encoder;
pub mod fusion;

use std::collections::BTreeMap;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use encoder::{project_points_tape, sample_pixel_aligned, sample_tape, Pyramid};
pub use fusion::{fuse_multi_source, mesh_aggregate, FusionParams, MeshRoundParams, Neighborhoods};

use crate::diff::mlp::{mlp_tape, stream_seed, MlpSpec};
use crate::diff::gradcheck::{record_arrays, NamedArrays};
use crate::diff::{ParamStore, Tape, Var};
use crate::geometry::Vec3;
use crate::gom::{init_canonical, skin_tape, world_gaussians_tape, CanonicalGoM, FaceGaussian, GaussianDefaults, RAW_WIDTH};
use crate::rig::{Pose, Rig};
use crate::splat::{rasterize_tape, Camera, RasterConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub feature_width: usize,
    pub pyramid_levels: usize,
    pub hidden: usize,
    /// Number of source views the Gaussian head is built for.
    pub sources: usize,
    /// Bound on the per-step vertex residual (meters).
    pub vertex_step: f64,
    pub mesh_rounds: usize,
    pub subdivision: usize,
    /// Standard deviation of the initial vertex embeddings.
    pub embedding_std: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            feature_width: 32,
            pyramid_levels: 4,
            hidden: 64,
            sources: 3,
            vertex_step: 0.05,
            mesh_rounds: 2,
            subdivision: 2,
            embedding_std: 0.1,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_width", self.feature_width),
            ("pyramid_levels", self.pyramid_levels),
            ("hidden", self.hidden),
            ("sources", self.sources),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::arg(name, "must be positive"));
            }
        }
        if !(self.vertex_step > 0.0 && self.vertex_step.is_finite()) {
            return Err(Error::arg("vertex_step", "must be positive"));
        }
        if self.subdivision > crate::gom::MAX_LEVELS {
            return Err(Error::arg("subdivision", format!("at most {}", crate::gom::MAX_LEVELS)));
        }
        Ok(())
    }

    pub fn vertex_head(&self) -> MlpSpec {
        MlpSpec::head(self.feature_width, self.hidden, 3)
    }

    /// Three corner features plus one sampled feature per source.
    pub fn gaussian_head(&self) -> MlpSpec {
        MlpSpec::head((3 + self.sources) * self.feature_width, self.hidden, RAW_WIDTH)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Kaiming,
    Zero,
    Normal(f64),
}

/// Every non-MLP parameter array: name, shape, initialization.
fn layout(cfg: &ReconConfig, vertices: usize) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.feature_width;
    let k = 3 * cfg.pyramid_levels;
    let mut out = vec![
        ("encoder.lift.w".to_string(), vec![k, c], Init::Kaiming),
        ("encoder.lift.b".to_string(), vec![c], Init::Zero),
        ("vertex.lift.w".to_string(), vec![2 * c, c], Init::Kaiming),
        ("vertex.lift.b".to_string(), vec![c], Init::Zero),
        ("fusion.wk".to_string(), vec![c, c], Init::Kaiming),
        ("fusion.wv".to_string(), vec![c, c], Init::Kaiming),
        ("fusion.wo".to_string(), vec![c, c], Init::Kaiming),
        ("fusion.bo".to_string(), vec![c], Init::Zero),
        ("embedding.init".to_string(), vec![vertices, c], Init::Normal(cfg.embedding_std)),
        ("embedding.update".to_string(), vec![c, c], Init::Zero),
    ];
    for r in 0..cfg.mesh_rounds {
        for m in ["wq", "wk", "wv", "wo"] {
            out.push((format!("mesh.r{r}.{m}"), vec![c, c], Init::Kaiming));
        }
        out.push((format!("mesh.r{r}.wp"), vec![3, c], Init::Kaiming));
    }
    out
}

/// Fresh parameters for a template with `vertices` low-resolution vertices.
pub fn init_params(cfg: &ReconConfig, vertices: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg, vertices) {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &name));
        let data: Vec<f32> = match init {
            Init::Zero => vec![0.0; n],
            Init::Kaiming => {
                let bound = (6.0 / shape[0] as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::arg("embedding_std", e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng) as f32).collect()
            }
        };
        store.insert(&name, shape, data)?;
    }
    cfg.vertex_head().init(&mut store, "vertex_head", seed)?;
    cfg.gaussian_head().init(&mut store, "gaussian_head", seed)?;
    Ok(store)
}

/// Parameter arrays recorded on a tape.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub by_name: BTreeMap<String, Var>,
    pub fusion: FusionParams,
    pub mesh: Vec<MeshRoundParams>,
    pub vertex_head: Vec<Var>,
    pub gaussian_head: Vec<Var>,
}

impl NetVars {
    /// Records every array of `store`; `trainable` makes them leaves.
    pub fn bind(tape: &mut Tape, store: &ParamStore, cfg: &ReconConfig, trainable: bool) -> Result<Self> {
        let vars = record_arrays(tape, &store_arrays(store), trainable);
        Self::from_vars(tape, vars, cfg)
    }

    pub fn from_vars(tape: &Tape, by_name: BTreeMap<String, Var>, cfg: &ReconConfig) -> Result<Self> {
        let get = |n: &str| by_name.get(n).copied().ok_or_else(|| Error::MissingParam(n.to_string()));
        for (name, shape, _) in layout(cfg, 0) {
            if name != "embedding.init" {
                let (r, c) = tape.shape(get(&name)?);
                Error::check_len("parameter size", shape.iter().product(), r * c)?;
            }
        }
        Error::check_len("embedding width", cfg.feature_width, tape.cols(get("embedding.init")?))?;
        let fusion = FusionParams { wk: get("fusion.wk")?, wv: get("fusion.wv")?, wo: get("fusion.wo")?, bo: get("fusion.bo")? };
        let mesh = (0..cfg.mesh_rounds)
            .map(|r| {
                Ok(MeshRoundParams {
                    wq: get(&format!("mesh.r{r}.wq"))?,
                    wk: get(&format!("mesh.r{r}.wk"))?,
                    wv: get(&format!("mesh.r{r}.wv"))?,
                    wp: get(&format!("mesh.r{r}.wp"))?,
                    wo: get(&format!("mesh.r{r}.wo"))?,
                })
            })
            .collect::<Result<_>>()?;
        let vertex_head = cfg.vertex_head().param_names("vertex_head").iter().map(|n| get(n)).collect::<Result<_>>()?;
        let gaussian_head: Vec<Var> = cfg.gaussian_head().param_names("gaussian_head").iter().map(|n| get(n)).collect::<Result<_>>()?;
        Error::check_len("gaussian head input", cfg.gaussian_head().input(), tape.rows(gaussian_head[0]))?;
        Ok(NetVars { by_name, fusion, mesh, vertex_head, gaussian_head })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.by_name.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }
}

/// Parameters widened to `f64`.
pub fn store_arrays(store: &ParamStore) -> NamedArrays {
    store.iter().map(|(n, e)| (n.to_string(), (e.shape.clone(), e.data.iter().map(|&x| x as f64).collect()))).collect()
}

/// One observed view: linear RGB image (`H*W*3`), soft mask (`H*W`), the
/// body pose and the camera it was taken with.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceView {
    pub image: Vec<f64>,
    pub mask: Vec<f64>,
    pub pose: Pose,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSet {
    pub views: Vec<SourceView>,
}

impl SourceSet {
    /// Checks the set and returns the shared `(height, width)`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let first = self.views.first().ok_or_else(|| Error::arg("sources", "need at least one view"))?;
        let (h, w) = (first.camera.height, first.camera.width);
        for v in &self.views {
            v.camera.validate()?;
            v.pose.validate()?;
            if (v.camera.height, v.camera.width) != (h, w) {
                return Err(Error::arg("sources", "views differ in resolution"));
            }
            Error::check_len("source image", 3 * h * w, v.image.len())?;
            Error::check_len("source mask", h * w, v.mask.len())?;
        }
        Ok((h, w))
    }
}

/// Fixed structures shared by every step of one reconstruction.
#[derive(Clone, Debug)]
pub struct Setup {
    pub template: CanonicalGoM,
    pub height: usize,
    pub width: usize,
    pub raster: RasterConfig,
    pub vertex_step: f64,
    faces: Rc<Vec<[usize; 3]>>,
    prolong: Rc<Vec<Vec<(usize, f64)>>>,
    corners: [Rc<Vec<usize>>; 3],
    hoods: Neighborhoods,
    pyramid: Rc<Pyramid>,
}

impl Setup {
    pub fn new(rig: &Rig, cfg: &ReconConfig, height: usize, width: usize) -> Result<Self> {
        cfg.validate()?;
        if height == 0 || width == 0 {
            return Err(Error::arg("resolution", "must be positive"));
        }
        let template = init_canonical(rig, cfg.subdivision, &GaussianDefaults::default())?;
        let faces = Rc::new(template.high_mesh.faces.clone());
        let corners = [0, 1, 2].map(|c| Rc::new(faces.iter().map(|f| f[c]).collect::<Vec<_>>()));
        Ok(Setup {
            height,
            width,
            raster: RasterConfig::default(),
            vertex_step: cfg.vertex_step,
            prolong: Rc::new(template.prolongation.rows.clone()),
            hoods: Neighborhoods::new(&template.low_mesh),
            pyramid: Rc::new(Pyramid::new(height, width, cfg.pyramid_levels)),
            faces,
            corners,
            template,
        })
    }

    pub fn pyramid(&self) -> &Rc<Pyramid> {
        &self.pyramid
    }
}

/// Per-step vars of the canonical estimate.
#[derive(Clone, Debug)]
pub struct StepVars {
    /// Low-resolution canonical vertices, `V x 3`.
    pub low: Var,
    /// Stored Gaussian encodings, `F x 13`.
    pub raw: Var,
    pub embedding: Var,
    /// Renders of this estimate at each source view, `H*W x 4` (RGB, alpha).
    pub renders: Vec<Var>,
}

/// Skins, prolongs and renders an estimate. Output is `H*W x 4`.
pub fn render_state(tape: &mut Tape, setup: &Setup, low: Var, raw: Var, pose: &Pose, camera: &Camera) -> Result<Var> {
    let world = posed_world(tape, setup, low, raw, pose)?;
    rasterize_tape(tape, world, camera, &setup.raster)
}

/// World Gaussian rows of an estimate under `pose`. Skinning happens on the
/// low-resolution mesh; the high-resolution vertices are only ever prolonged.
fn posed_world(tape: &mut Tape, setup: &Setup, low: Var, raw: Var, pose: &Pose) -> Result<Var> {
    let posed_low = skin_tape(tape, low, &setup.template.weights, pose)?;
    let posed_high = tape.sparse_rows(posed_low, setup.prolong.clone());
    world_gaussians_tape(tape, posed_high, raw, setup.faces.clone(), setup.template.defaults)
}

/// Full-resolution lifted feature maps (`H*W x C`) for each image var.
/// The pipeline itself samples the pyramid first and lifts afterwards,
/// which gives the same values because bilinear weights sum to one.
pub fn encode_images(tape: &mut Tape, setup: &Setup, net: &NetVars, images: &[Var]) -> Result<Vec<Var>> {
    let (w, b) = (net.get("encoder.lift.w")?, net.get("encoder.lift.b")?);
    images
        .iter()
        .map(|&im| {
            let p = setup.pyramid.tape(tape, im)?;
            let f = tape.matmul(p, w);
            Ok(tape.add_row(f, b))
        })
        .collect()
}

fn lift(tape: &mut Tape, net: &NetVars, pyramid_samples: Var) -> Result<Var> {
    let f = tape.matmul(pyramid_samples, net.get("encoder.lift.w")?);
    Ok(tape.add_row(f, net.get("encoder.lift.b")?))
}

/// Pyramids of the source images, recorded as constants.
pub fn source_pyramids(tape: &mut Tape, setup: &Setup, sources: &SourceSet) -> Vec<Var> {
    let n = setup.height * setup.width;
    sources
        .views
        .iter()
        .map(|v| tape.constant(setup.pyramid.apply(&v.image), n, setup.pyramid.channels()))
        .collect()
}

/// Per-vertex feedback features `V x C` for the estimate `state`, whose
/// `renders` must hold its renders at the source views.
pub fn compute_feedback_features(
    tape: &mut Tape,
    setup: &Setup,
    net: &NetVars,
    state: &StepVars,
    sources: &SourceSet,
    source_pyr: &[Var],
) -> Result<Var> {
    Error::check_len("source renders", sources.views.len(), state.renders.len())?;
    let (h, w) = (setup.height, setup.width);
    let mut per_source = Vec::with_capacity(sources.views.len());
    for (n, view) in sources.views.iter().enumerate() {
        let pred = tape.select_cols(state.renders[n], 0, 3);
        let pred_pyr = setup.pyramid.tape(tape, pred)?;
        let posed = skin_tape(tape, state.low, &setup.template.weights, &view.pose)?;
        let uv = project_points_tape(tape, posed, &view.camera, setup.raster.near)?;
        let s_src = sample_tape(tape, source_pyr[n], uv, h, w)?;
        let s_pred = sample_tape(tape, pred_pyr, uv, h, w)?;
        let f_src = lift(tape, net, s_src)?;
        let f_pred = lift(tape, net, s_pred)?;
        let both = tape.concat_cols(&[f_src, f_pred]);
        let x = tape.matmul(both, net.get("vertex.lift.w")?);
        per_source.push(tape.add_row(x, net.get("vertex.lift.b")?));
    }
    let fused = fuse_multi_source(tape, &per_source, state.embedding, &net.fusion)?;
    mesh_aggregate(tape, fused, state.low, &setup.hoods, &net.mesh)
}

/// Residual vertex move, bounded per coordinate by `step * tanh(. / step)`.
pub fn update_vertices(tape: &mut Tape, setup: &Setup, net: &NetVars, low: Var, feedback: Var) -> Result<Var> {
    let spec = MlpSpec::head(tape.cols(feedback), tape.cols(net.vertex_head[0]), 3);
    let d = mlp_tape(tape, &spec, &net.vertex_head, feedback)?;
    let b = setup.vertex_step;
    let d = tape.scale(d, 1.0 / b);
    let d = tape.tanh(d);
    let d = tape.scale(d, b);
    Error::check_len("vertex count", tape.rows(low), tape.rows(d))?;
    Ok(tape.add(low, d))
}

/// Absolute prediction of every high-resolution face Gaussian from the
/// prolonged feedback features at its corners and the source images
/// sampled where its current mean projects. `low` are the vertices after
/// this step's update, `raw_prev` the previous Gaussians.
#[allow(clippy::too_many_arguments)]
pub fn update_gaussians(
    tape: &mut Tape,
    setup: &Setup,
    net: &NetVars,
    low: Var,
    raw_prev: Var,
    feedback: Var,
    sources: &SourceSet,
    source_pyr: &[Var],
) -> Result<Var> {
    let high_features = tape.sparse_rows(feedback, setup.prolong.clone());
    let mut parts: Vec<Var> = setup.corners.iter().map(|c| tape.gather_rows(high_features, c.clone())).collect();
    for (n, view) in sources.views.iter().enumerate() {
        let world = posed_world(tape, setup, low, raw_prev, &view.pose)?;
        let mu = tape.select_cols(world, 0, 3);
        let uv = project_points_tape(tape, mu, &view.camera, setup.raster.near)?;
        let s = sample_tape(tape, source_pyr[n], uv, setup.height, setup.width)?;
        parts.push(lift(tape, net, s)?);
    }
    let x = tape.concat_cols(&parts);
    let spec = MlpSpec::head(tape.cols(x), tape.cols(net.gaussian_head[0]), RAW_WIDTH);
    let out = mlp_tape(tape, &spec, &net.gaussian_head, x)?;
    let base = tape.constant(setup.template.defaults.base_encoding().to_vec(), 1, RAW_WIDTH);
    Ok(tape.add_row(out, base))
}

/// One feedback step on the tape. `state.renders` must be filled; the
/// returned state has none.
pub fn feedback_step_tape(
    tape: &mut Tape,
    setup: &Setup,
    net: &NetVars,
    state: &StepVars,
    sources: &SourceSet,
    source_pyr: &[Var],
) -> Result<StepVars> {
    let feedback = compute_feedback_features(tape, setup, net, state, sources, source_pyr)?;
    let low = update_vertices(tape, setup, net, state.low, feedback)?;
    let raw = update_gaussians(tape, setup, net, low, state.raw, feedback, sources, source_pyr)?;
    let de = tape.matmul(feedback, net.get("embedding.update")?);
    let embedding = tape.add(state.embedding, de);
    Ok(StepVars { low, raw, embedding, renders: Vec::new() })
}

/// The template estimate with the learned initial embeddings.
pub fn initial_state(tape: &mut Tape, setup: &Setup, net: &NetVars) -> Result<StepVars> {
    let t = &setup.template;
    let low = tape.constant(flatten(&t.low_mesh.vertices), t.low_count(), 3);
    let raw = tape.constant(t.raw_gaussians(), t.high_face_count(), RAW_WIDTH);
    let embedding = net.get("embedding.init")?;
    Error::check_len("embedding rows", t.low_count(), tape.rows(embedding))?;
    Ok(StepVars { low, raw, embedding, renders: Vec::new() })
}

pub fn render_sources(tape: &mut Tape, setup: &Setup, state: &mut StepVars, sources: &SourceSet) -> Result<()> {
    state.renders = sources
        .views
        .iter()
        .map(|v| render_state(tape, setup, state.low, state.raw, &v.pose, &v.camera))
        .collect::<Result<_>>()?;
    Ok(())
}

/// Recorded feedback run: `states[0]` is the template, `states[t]` the
/// estimate after step `t`.
#[derive(Clone, Debug)]
pub struct TapeRun {
    pub states: Vec<StepVars>,
    pub step_ms: Vec<f64>,
}

/// Runs `steps` feedback steps on the tape. With `render_last` the final
/// estimate is also rendered at the sources.
pub fn run_feedback(
    tape: &mut Tape,
    setup: &Setup,
    net: &NetVars,
    sources: &SourceSet,
    steps: usize,
    render_last: bool,
) -> Result<TapeRun> {
    let (h, w) = sources.validate()?;
    if (h, w) != (setup.height, setup.width) {
        return Err(Error::arg("sources", format!("resolution {w}x{h} does not match the setup")));
    }
    if steps == 0 {
        return Err(Error::arg("T", "need at least one feedback step"));
    }
    let pyr = source_pyramids(tape, setup, sources);
    let mut states = vec![initial_state(tape, setup, net)?];
    let mut step_ms = Vec::with_capacity(steps);
    for t in 0..steps {
        let clock = Instant::now();
        render_sources(tape, setup, &mut states[t], sources)?;
        let next = feedback_step_tape(tape, setup, net, &states[t], sources, &pyr)?;
        states.push(next);
        step_ms.push(clock.elapsed().as_secs_f64() * 1e3);
    }
    if render_last {
        render_sources(tape, setup, &mut states[steps], sources)?;
    }
    Ok(TapeRun { states, step_ms })
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten(x: &[f64]) -> Vec<Vec3> {
    x.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Canonical GoM holding the values of a recorded estimate.
pub fn state_gom(tape: &Tape, setup: &Setup, state: &StepVars) -> Result<CanonicalGoM> {
    let mut gom = setup.template.with_low_vertices(unflatten(tape.value(state.low)))?;
    gom.face_gaussians = tape.value(state.raw).chunks_exact(RAW_WIDTH).map(FaceGaussian::from_raw).collect();
    Ok(gom)
}

/// Value-level feedback state.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackState {
    pub gom: CanonicalGoM,
    /// `V x C` row-major.
    pub embeddings: Vec<f64>,
    pub t: usize,
}

/// Template state with the learned initial embeddings.
pub fn initial_feedback_state(setup: &Setup, params: &ParamStore) -> Result<FeedbackState> {
    Ok(FeedbackState { gom: setup.template.clone(), embeddings: params.f64_array("embedding.init")?, t: 0 })
}

/// Advances a value-level state by one step.
pub fn feedback_step(
    state: &FeedbackState,
    setup: &Setup,
    sources: &SourceSet,
    params: &ParamStore,
    cfg: &ReconConfig,
) -> Result<FeedbackState> {
    sources.validate()?;
    let mut tape = Tape::new();
    let net = NetVars::bind(&mut tape, params, cfg, false)?;
    let c = cfg.feature_width;
    Error::check_len("embeddings", state.gom.low_count() * c, state.embeddings.len())?;
    let mut s = StepVars {
        low: tape.constant(flatten(&state.gom.low_mesh.vertices), state.gom.low_count(), 3),
        raw: tape.constant(state.gom.raw_gaussians(), state.gom.high_face_count(), RAW_WIDTH),
        embedding: tape.constant(state.embeddings.clone(), state.gom.low_count(), c),
        renders: Vec::new(),
    };
    let pyr = source_pyramids(&mut tape, setup, sources);
    render_sources(&mut tape, setup, &mut s, sources)?;
    let next = feedback_step_tape(&mut tape, setup, &net, &s, sources, &pyr)?;
    Ok(FeedbackState { gom: state_gom(&tape, setup, &next)?, embeddings: tape.value(next.embedding).to_vec(), t: state.t + 1 })
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub gom: CanonicalGoM,
    /// Estimates after each step, `steps[0]` being step 1.
    pub steps: Vec<CanonicalGoM>,
    pub step_ms: Vec<f64>,
}

/// Reconstructs the canonical avatar from `sources` with `steps` feedback
/// steps.
pub fn reconstruct(sources: &SourceSet, rig: &Rig, steps: usize, params: &ParamStore, cfg: &ReconConfig) -> Result<Reconstruction> {
    let (h, w) = sources.validate()?;
    let setup = Setup::new(rig, cfg, h, w)?;
    reconstruct_with(&setup, sources, steps, params, cfg)
}

pub fn reconstruct_with(
    setup: &Setup,
    sources: &SourceSet,
    steps: usize,
    params: &ParamStore,
    cfg: &ReconConfig,
) -> Result<Reconstruction> {
    let mut tape = Tape::new();
    let net = NetVars::bind(&mut tape, params, cfg, false)?;
    let run = run_feedback(&mut tape, setup, &net, sources, steps, false)?;
    let steps: Vec<CanonicalGoM> = run.states[1..].iter().map(|s| state_gom(&tape, setup, s)).collect::<Result<_>>()?;
    Ok(Reconstruction { gom: steps.last().expect("at least one step").clone(), steps, step_ms: run.step_ms })
}
