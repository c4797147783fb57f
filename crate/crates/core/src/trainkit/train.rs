//! Training loop over synthetic subjects.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_tape, LossTerms, LossWeights, Umbrella};
use super::synthetic::{make_synthetic_subject, orbit_camera, render_reference, BodyPose, SyntheticSubject};
use crate::diff::{adam_step, AdamConfig, ParamStore, Tape, Var};
use crate::io::Checkpoint;
use crate::reconstruct::{init_params, render_state, run_feedback, NetVars, ReconConfig, Setup, SourceSet, SourceView};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Training subjects are seeds `0..subjects`.
    pub subjects: u64,
    pub iterations: usize,
    /// Square render size.
    pub resolution: usize,
    /// Feedback steps T.
    pub steps: usize,
    pub recon: ReconConfig,
    /// Per-axis bound of sampled limb rotations (radians).
    pub pose_amplitude: f64,
    /// Camera elevation bound (radians).
    pub elevation: f64,
    pub loss: LossWeights,
    /// Learning rate of the image encoder.
    pub lr_encoder: f64,
    /// Learning rate of everything else.
    pub lr_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write a sample grid every this many iterations; 0 disables.
    pub sample_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            subjects: 32,
            iterations: 2000,
            resolution: 64,
            steps: 3,
            recon: ReconConfig::default(),
            pose_amplitude: 0.35,
            elevation: 0.2,
            loss: LossWeights::default(),
            lr_encoder: 1e-3,
            lr_rest: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            sample_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.recon.validate()?;
        self.loss.validate()?;
        for (name, v) in [("subjects", self.subjects as usize), ("resolution", self.resolution), ("steps", self.steps)] {
            if v == 0 {
                return Err(Error::arg(name, "must be positive"));
            }
        }
        for (name, v) in [("lr_encoder", self.lr_encoder), ("lr_rest", self.lr_rest), ("pose_amplitude", self.pose_amplitude), ("elevation", self.elevation), ("eps", self.eps)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::arg(name, format!("{v} must be finite and nonnegative")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::arg(name, format!("{v} not in [0, 1)")));
            }
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// A sampled camera and body pose.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSpec {
    pub pose: BodyPose,
    pub azimuth: f64,
    pub elevation: f64,
}

/// `sources` views spread around the subject at a random phase, each in
/// its own pose, plus one target at a random azimuth in a novel pose.
pub fn sample_views(rng: &mut ChaCha8Rng, sources: usize, amplitude: f64, elevation: f64) -> (Vec<ViewSpec>, ViewSpec) {
    let phase = rng.random_range(0.0..TAU);
    let view = |azimuth: f64, rng: &mut ChaCha8Rng| ViewSpec {
        pose: BodyPose::sample(rng, amplitude),
        azimuth,
        elevation: if elevation > 0.0 { rng.random_range(-elevation..=elevation) } else { 0.0 },
    };
    let src = (0..sources).map(|n| view(phase + TAU * n as f64 / sources as f64, rng)).collect();
    let az = rng.random_range(0.0..TAU);
    let target = view(az, rng);
    (src, target)
}

/// Renders a view of a subject. `pose_noise` perturbs the pose handed to
/// the reconstructor, not the one used for the image.
pub fn reference_view(subject: &SyntheticSubject, spec: &ViewSpec, resolution: usize, pose_noise: f64, noise_seed: u64) -> Result<SourceView> {
    let camera = orbit_camera(subject, spec.azimuth, spec.elevation, resolution, resolution);
    let truth = spec.pose.skinning(&subject.rig)?;
    let r = render_reference(subject, &truth, &camera)?;
    let pose = if pose_noise > 0.0 { spec.pose.perturbed(pose_noise, noise_seed).skinning(&subject.rig)? } else { truth };
    Ok(SourceView { image: r.image, mask: r.mask, pose, camera })
}

/// Independent stream per `(seed, key)`.
pub fn stream(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// One row of the loss curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub subject: u64,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub mask: f64,
    pub lap: f64,
    pub ms: f64,
}

/// Target ground truth next to the target renders after each step,
/// `height x (steps + 1) * width` linear RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub iteration: usize,
    pub width: usize,
    pub height: usize,
    pub image: Vec<f64>,
}

struct Subject {
    data: SyntheticSubject,
    setup: Setup,
    umbrella: Umbrella,
}

fn load_subject(id: u64, cfg: &TrainConfig) -> Result<Subject> {
    let data = make_synthetic_subject(id);
    let setup = Setup::new(&data.rig, &cfg.recon, cfg.resolution, cfg.resolution)?;
    let umbrella = Umbrella::new(&data.rig.template);
    Ok(Subject { data, setup, umbrella })
}

fn is_encoder(name: &str) -> bool {
    name.starts_with("encoder.")
}

struct Step {
    row: IterationRow,
    grads: BTreeMap<String, Vec<f64>>,
    sample: Option<SampleGrid>,
}

fn split_render(tape: &mut Tape, render: Var) -> (Var, Var) {
    let image = tape.select_cols(render, 0, 3);
    let mask = tape.select_cols(render, 3, 1);
    (image, mask)
}

fn training_step(cfg: &TrainConfig, params: &ParamStore, subject: &Subject, id: u64, iteration: usize, keep_sample: bool) -> Result<Step> {
    let clock = Instant::now();
    let mut rng = stream(cfg.seed, 1 + iteration as u64);
    let n = cfg.recon.sources;
    let (src, target) = sample_views(&mut rng, n, cfg.pose_amplitude, cfg.elevation);
    let views = src.iter().map(|s| reference_view(&subject.data, s, cfg.resolution, 0.0, 0)).collect::<Result<Vec<_>>>()?;
    let target = reference_view(&subject.data, &target, cfg.resolution, 0.0, 0)?;
    let sources = SourceSet { views };

    let (h, w) = (cfg.resolution, cfg.resolution);
    let mut tape = Tape::new();
    let net = NetVars::bind(&mut tape, params, &cfg.recon, true)?;
    let run = run_feedback(&mut tape, &subject.setup, &net, &sources, cfg.steps, true)?;

    let mut gt = Vec::with_capacity(n + 1);
    for v in sources.views.iter().chain([&target]) {
        let image = tape.constant(v.image.clone(), h * w, 3);
        let mask = tape.constant(v.mask.clone(), h * w, 1);
        gt.push((image, mask));
    }
    // fixed order: steps outer, sources then target inner
    let mut losses = Vec::with_capacity((n + 1) * cfg.steps);
    let mut sum = LossTerms::default();
    let mut target_renders = Vec::new();
    for state in &run.states[1..] {
        let mut renders = state.renders.clone();
        let t = render_state(&mut tape, &subject.setup, state.low, state.raw, &target.pose, &target.camera)?;
        target_renders.push(t);
        renders.push(t);
        for (render, &(gi, gm)) in renders.into_iter().zip(&gt) {
            let (pi, pm) = split_render(&mut tape, render);
            let (l, terms) = loss_tape(&mut tape, pi, pm, gi, gm, state.low, &subject.umbrella, h, w, &cfg.loss)?;
            losses.push(l);
            sum = sum.add(&terms);
        }
    }
    let count = (n + 1) * cfg.steps;
    assert_eq!(losses.len(), count, "loss terms per sample");
    let total = tape.add_all(&losses);
    let total = tape.scale(total, 1.0 / count as f64);
    let loss = tape.scalar(total);
    if !loss.is_finite() {
        return Err(Error::arg("loss", format!("non-finite at iteration {iteration}")));
    }
    let g = tape.backward(total);
    let grads = net.by_name.iter().map(|(name, &v)| (name.clone(), g.dense(v))).collect();

    let sample = keep_sample.then(|| {
        let mut panels = vec![target.image.clone()];
        panels.extend(target_renders.iter().map(|&r| tape.value(r).chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()));
        SampleGrid { iteration, width: w * panels.len(), height: h, image: hstack(&panels, w, h) }
    });
    let mean = sum.scale(1.0 / count as f64);
    let row = IterationRow {
        iteration,
        subject: id,
        loss,
        l1: mean.l1,
        ssim: mean.ssim,
        mask: mean.mask,
        lap: mean.lap,
        ms: clock.elapsed().as_secs_f64() * 1e3,
    };
    Ok(Step { row, grads, sample })
}

/// Places `w x h` RGB panels side by side.
pub fn hstack(panels: &[Vec<f64>], w: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(panels.len() * w * h * 3);
    for y in 0..h {
        for p in panels {
            out.extend_from_slice(&p[y * w * 3..(y + 1) * w * 3]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub rows: Vec<IterationRow>,
}

/// Trains from fresh parameters.
pub fn train(cfg: &TrainConfig) -> Result<TrainResult> {
    train_with(cfg, |_, _| Ok(()))
}

/// Trains and hands each loss row and sample grid to `observe` as it is
/// produced.
pub fn train_with(cfg: &TrainConfig, mut observe: impl FnMut(&IterationRow, Option<&SampleGrid>) -> Result<()>) -> Result<TrainResult> {
    cfg.validate()?;
    let first = load_subject(0, cfg)?;
    let mut params = init_params(&cfg.recon, first.data.rig.template.vertices.len(), cfg.seed)?;
    let mut cache: BTreeMap<u64, Subject> = BTreeMap::from([(0, first)]);
    let mut rows = Vec::with_capacity(cfg.iterations);
    let enc = cfg.adam(cfg.lr_encoder);
    let rest = cfg.adam(cfg.lr_rest);
    for it in 0..cfg.iterations {
        // subject choice has its own stream so view sampling is independent of it
        let id = stream(cfg.seed ^ 0x5eed, it as u64).random_range(0..cfg.subjects);
        if !cache.contains_key(&id) {
            cache.insert(id, load_subject(id, cfg)?);
        }
        let keep = cfg.sample_every > 0 && (it % cfg.sample_every == 0 || it + 1 == cfg.iterations);
        let step = training_step(cfg, &params, &cache[&id], id, it, keep)?;
        let (ge, gr): (BTreeMap<_, _>, BTreeMap<_, _>) = step.grads.into_iter().partition(|(k, _)| is_encoder(k));
        adam_step(&mut params, &ge, &enc)?;
        adam_step(&mut params, &gr, &rest)?;
        observe(&step.row, step.sample.as_ref())?;
        rows.push(step.row);
    }
    Ok(TrainResult { checkpoint: Checkpoint { params, config: cfg.recon.clone() }, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> TrainConfig {
        TrainConfig {
            subjects: 2,
            iterations: 2,
            resolution: 16,
            steps: 2,
            recon: ReconConfig { feature_width: 4, pyramid_levels: 2, hidden: 4, sources: 2, mesh_rounds: 1, subdivision: 0, ..ReconConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_iteration_is_finite() {
        let cfg = TrainConfig { iterations: 1, ..tiny() };
        let subject = load_subject(0, &cfg).unwrap();
        let params = init_params(&cfg.recon, subject.data.rig.template.vertices.len(), 0).unwrap();
        let step = training_step(&cfg, &params, &subject, 0, 0, true).unwrap();
        assert!(step.row.loss.is_finite() && step.row.loss > 0.0);
        assert!(step.grads.values().flatten().all(|g| g.is_finite()));
        assert!(step.grads.values().flatten().any(|&g| g != 0.0));
        let grid = step.sample.unwrap();
        assert_eq!(grid.image.len(), grid.width * grid.height * 3);
        assert_eq!(grid.width, 16 * 3);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig { lr_encoder: 0.0, lr_rest: 0.0, ..tiny() };
        let out = train(&cfg).unwrap();
        let fresh = init_params(&cfg.recon, 88, cfg.seed).unwrap();
        for (name, e) in out.checkpoint.params.iter() {
            assert_eq!(e.data, fresh.get(name).unwrap().data, "{name}");
        }
    }

    #[test]
    fn training_is_reproducible_and_moves() {
        let cfg = tiny();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        let loss = |r: &[IterationRow]| r.iter().map(|x| x.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(loss(&a.rows), loss(&b.rows));
        let fresh = init_params(&cfg.recon, 88, cfg.seed).unwrap();
        assert_ne!(a.checkpoint.params, fresh);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { resolution: 0, ..tiny() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..tiny() }.validate().is_err());
        assert!(TrainConfig { lr_rest: -1.0, ..tiny() }.validate().is_err());
        let e = serde_json::from_str::<TrainConfig>(r#"{"iterations": 3, "bogus": 1}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let c: TrainConfig = serde_json::from_str(r#"{"iterations": 3}"#).unwrap();
        assert_eq!(c.subjects, 32);
    }

    #[test]
    fn views_are_spread_and_seeded() {
        let (a, t) = sample_views(&mut stream(4, 1), 3, 0.3, 0.2);
        let (b, _) = sample_views(&mut stream(4, 1), 3, 0.3, 0.2);
        assert_eq!(a, b);
        assert!(((a[1].azimuth - a[0].azimuth) - TAU / 3.0).abs() < 1e-12);
        assert!(t.elevation.abs() <= 0.2);
    }
}
