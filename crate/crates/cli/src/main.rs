//! `lgom` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use lgom::gom::{init_canonical, GaussianDefaults, WorldGaussian};
use lgom::io::{self, SceneManifest, ViewEntry};
use lgom::reconstruct::{reconstruct, SourceSet};
use lgom::rig::Pose;
use lgom::splat::{rasterize, Camera, RasterConfig};
use lgom::trainkit::{
    evaluate, evaluate_reference, orbit_camera, psnr, render_gom, stream, summarize, train_with, write_csv, BodyPose, EvalConfig, TrainConfig,
};
use lgom::{Error, Result};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lgom", version, about = "Gaussians-on-Mesh avatar reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic subjects to a dataset with one manifest per subject.
    GenData {
        #[arg(long, default_value_t = 0)]
        first: u64,
        #[arg(long, default_value_t = 2)]
        subjects: u64,
        #[arg(long, default_value_t = 4)]
        views: usize,
        /// Distinct body poses shared round-robin by the views.
        #[arg(long, default_value_t = 4)]
        poses: usize,
        /// Extra target views in novel poses.
        #[arg(long, default_value_t = 0)]
        targets: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Subdivision levels of the written template GoM.
        #[arg(long, default_value_t = 2)]
        subdivision: usize,
        #[arg(long, default_value_t = 0.35)]
        amplitude: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON config; writes checkpoint, loss curve and samples.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a canonical GoM from a scene manifest.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV report: per-step time and source-view PSNR.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build the template GoM of a rig.
    Template {
        #[arg(long)]
        rig: PathBuf,
        #[arg(long, default_value_t = 2)]
        subdivision: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a GoM in a pose.
    Render {
        #[arg(long)]
        gom: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the soft mask.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Render a GoM over a pose sequence.
    Animate {
        #[arg(long)]
        gom: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out synthetic subjects.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-cell means.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Score the references against themselves instead.
        #[arg(long)]
        reference: bool,
    },
    /// Time the rasterizer on random scenes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "10000,50000,100000")]
        counts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "256,512")]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::arg(name, "must be positive"))
    } else {
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_view(dir: &Path, stem: &str, subject: &lgom::trainkit::SyntheticSubject, pose: &BodyPose, camera: &Camera) -> Result<ViewEntry> {
    let skin = pose.skinning(&subject.rig)?;
    let r = lgom::trainkit::render_reference(subject, &skin, camera)?;
    let (w, h) = (camera.width, camera.height);
    let entry = ViewEntry {
        image: format!("{stem}.png"),
        mask: format!("{stem}_mask.png"),
        camera: format!("{stem}_camera.json"),
        pose: format!("{stem}_pose.json"),
        exact: Some(format!("{stem}.exact.lgom")),
    };
    io::write_png_rgb(&dir.join(&entry.image), &r.image, w, h)?;
    io::write_png_gray(&dir.join(&entry.mask), &r.mask, w, h)?;
    io::write_camera(&dir.join(&entry.camera), camera)?;
    io::write_pose(&dir.join(&entry.pose), &skin)?;
    io::write_exact_view(&dir.join(entry.exact.as_ref().expect("set above")), &r.image, &r.mask, w, h)?;
    Ok(entry)
}

#[allow(clippy::too_many_arguments)]
fn gen_data(first: u64, subjects: u64, views: usize, poses: usize, targets: usize, resolution: usize, subdivision: usize, amplitude: f64, seed: u64, out: &Path) -> Result<()> {
    positive("resolution", resolution)?;
    positive("views", views)?;
    positive("poses", poses)?;
    if !amplitude.is_finite() || amplitude < 0.0 {
        return Err(Error::arg("amplitude", "must be finite and nonnegative"));
    }
    if subdivision > lgom::gom::MAX_LEVELS {
        return Err(Error::arg("subdivision", format!("{subdivision} exceeds {}", lgom::gom::MAX_LEVELS)));
    }
    for id in first..first + subjects {
        let subject = lgom::trainkit::make_synthetic_subject(id);
        let dir = out.join(format!("subject_{id:04}"));
        create_dir(&dir)?;
        let mut rng = stream(seed, id);
        let body: Vec<BodyPose> = (0..poses).map(|_| BodyPose::sample(&mut rng, amplitude)).collect();
        let mut entries = Vec::with_capacity(views);
        for v in 0..views {
            let az = std::f64::consts::TAU * v as f64 / views as f64;
            let cam = orbit_camera(&subject, az, 0.1, resolution, resolution);
            entries.push(write_view(&dir, &format!("view_{v:02}"), &subject, &body[v % poses], &cam)?);
        }
        let mut target_entries = Vec::with_capacity(targets);
        for t in 0..targets {
            let pose = BodyPose::sample(&mut rng, amplitude);
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let cam = orbit_camera(&subject, az, 0.1, resolution, resolution);
            target_entries.push(write_view(&dir, &format!("target_{t:02}"), &subject, &pose, &cam)?);
        }
        io::write_rig(&dir.join("rig.json"), &subject.rig)?;
        io::save_gom(&dir.join("template.lgom"), &init_canonical(&subject.rig, subdivision, &GaussianDefaults::default())?)?;
        let manifest = SceneManifest { subject: format!("subject_{id:04}"), rig: "rig.json".into(), entries, targets: target_entries };
        io::write_json(&dir.join("manifest.json"), &manifest)?;
    }
    Ok(())
}

fn train(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    create_dir(out)?;
    io::write_json(&out.join("config.json"), &cfg)?;
    let samples = out.join("samples");
    if cfg.sample_every > 0 {
        create_dir(&samples)?;
    }
    let loss_path = out.join("loss.csv");
    let mut curve = csv::Writer::from_path(&loss_path).map_err(|e| Error::format(&loss_path, "csv", e.to_string()))?;
    let result = train_with(&cfg, |row, sample| {
        curve.serialize(row).map_err(|e| Error::format(&loss_path, "csv", e.to_string()))?;
        curve.flush().map_err(|e| Error::io(&loss_path, e))?;
        if let Some(g) = sample {
            io::write_png_rgb(&samples.join(format!("iter_{:06}.png", g.iteration)), &g.image, g.width, g.height)?;
        }
        Ok(())
    })?;
    io::save_checkpoint(&out.join("checkpoint.lgom"), &result.checkpoint)
}

#[derive(Serialize)]
struct StepRow {
    step: usize,
    ms: f64,
    /// Mean PSNR of the step's estimate re-rendered at the sources.
    source_psnr: f64,
}

fn reconstruct_cmd(checkpoint: &Path, manifest: &Path, steps: usize, out: &Path, report: Option<&Path>) -> Result<()> {
    positive("steps", steps)?;
    let ck = io::load_checkpoint(checkpoint)?;
    let scene = io::Scene::load(manifest)?;
    let rig = scene.rig()?;
    let sources = SourceSet { views: scene.sources()? };
    let r = reconstruct(&sources, &rig, steps, &ck.params, &ck.config)?;
    io::save_gom(out, &r.gom)?;
    if let Some(p) = report {
        let mut rows = Vec::with_capacity(steps);
        for (t, (g, ms)) in r.steps.iter().zip(&r.step_ms).enumerate() {
            let mut total = 0.0;
            for v in &sources.views {
                total += psnr(&render_gom(g, &v.pose, &v.camera, &RasterConfig::default())?.image, &v.image)?;
            }
            rows.push(StepRow { step: t + 1, ms: *ms, source_psnr: total / sources.views.len() as f64 });
        }
        write_csv(p, &rows)?;
    }
    Ok(())
}

fn render_cmd(gom: &Path, pose: &Path, camera: &Path, out: &Path, mask: Option<&Path>) -> Result<()> {
    let g = io::load_gom(gom)?;
    let pose = io::read_pose(pose)?;
    let cam = io::read_camera(camera)?;
    let r = render_gom(&g, &pose, &cam, &RasterConfig::default())?;
    io::write_png_rgb(out, &r.image, cam.width, cam.height)?;
    if let Some(m) = mask {
        io::write_png_gray(m, &r.alpha, cam.width, cam.height)?;
    }
    Ok(())
}

fn animate(gom: &Path, poses: &Path, camera: &Path, out: &Path) -> Result<()> {
    let g = io::load_gom(gom)?;
    let seq: Vec<Pose> = io::read_pose_sequence(poses)?;
    let cam = io::read_camera(camera)?;
    create_dir(out)?;
    for (i, p) in seq.iter().enumerate() {
        let r = render_gom(&g, p, &cam, &RasterConfig::default())?;
        io::write_png_rgb(&out.join(format!("frame_{i:04}.png")), &r.image, cam.width, cam.height)?;
    }
    Ok(())
}

fn eval(checkpoint: Option<&Path>, config: Option<&Path>, out: &Path, summary: Option<&Path>, reference: bool) -> Result<()> {
    let cfg: EvalConfig = match config {
        Some(p) => io::read_json(p)?,
        None => EvalConfig::default(),
    };
    let rows = if reference {
        evaluate_reference(&cfg)?
    } else {
        let p = checkpoint.ok_or_else(|| Error::arg("checkpoint", "required unless --reference is given"))?;
        evaluate(&io::load_checkpoint(p)?, &cfg)?
    };
    write_csv(out, &rows)?;
    if let Some(s) = summary {
        write_csv(s, &summarize(&rows))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    gaussians: usize,
    resolution: usize,
    threads: usize,
    ms_mean: f64,
    ms_min: f64,
    /// FNV-1a over the image bits; equal across worker counts.
    checksum: String,
}

/// Random Gaussians in a slab in front of a camera at the origin.
fn bench_scene(seed: u64, count: usize) -> Vec<WorldGaussian> {
    let mut rng = stream(seed, count as u64);
    (0..count)
        .map(|_| {
            let mu = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.5..4.0));
            let r = Rotation3::new(Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)));
            let s = Vector3::from_fn(|_, _| rng.random_range(0.004..0.02f64).powi(2));
            let sigma = r.matrix() * Matrix3::from_diagonal(&s) * r.matrix().transpose();
            let color = Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            WorldGaussian { mu, sigma, color, opacity: rng.random_range(0.2..0.9) }
        })
        .collect()
}

fn checksum(v: &[f64]) -> String {
    let h = v.iter().flat_map(|x| x.to_bits().to_le_bytes()).fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    format!("{h:016x}")
}

fn bench(counts: &[usize], resolutions: &[usize], repeats: usize, seed: u64, out: &Path) -> Result<()> {
    positive("repeats", repeats)?;
    for &r in resolutions {
        positive("resolution", r)?;
    }
    let mut rows = Vec::new();
    for &res in resolutions {
        let cam = Camera::look_at(Vector3::zeros(), Vector3::z(), -Vector3::y(), 1.2 * res as f64, res, res);
        for &n in counts {
            let scene = bench_scene(seed, n);
            let cfg = RasterConfig::default();
            let mut times = Vec::with_capacity(repeats);
            let mut sum = String::new();
            for _ in 0..repeats {
                let clock = Instant::now();
                let img = rasterize(&scene, &cam, &cfg)?;
                times.push(clock.elapsed().as_secs_f64() * 1e3);
                sum = checksum(&img.image);
            }
            rows.push(BenchRow {
                gaussians: n,
                resolution: res,
                threads: lgom::worker_count(),
                ms_mean: times.iter().sum::<f64>() / repeats as f64,
                ms_min: times.iter().copied().fold(f64::INFINITY, f64::min),
                checksum: sum,
            });
        }
    }
    write_csv(out, &rows)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { first, subjects, views, poses, targets, resolution, subdivision, amplitude, seed, out } => {
            gen_data(first, subjects, views, poses, targets, resolution, subdivision, amplitude, seed, &out)
        }
        Command::Train { config, seed, out } => train(config.as_deref(), seed, &out),
        Command::Reconstruct { checkpoint, manifest, steps, out, report } => reconstruct_cmd(&checkpoint, &manifest, steps, &out, report.as_deref()),
        Command::Template { rig, subdivision, out } => {
            let rig = io::read_rig(&rig)?;
            io::save_gom(&out, &init_canonical(&rig, subdivision, &GaussianDefaults::default())?)
        }
        Command::Render { gom, pose, camera, out, mask } => render_cmd(&gom, &pose, &camera, &out, mask.as_deref()),
        Command::Animate { gom, poses, camera, out } => animate(&gom, &poses, &camera, &out),
        Command::Eval { checkpoint, config, out, summary, reference } => eval(checkpoint.as_deref(), config.as_deref(), &out, summary.as_deref(), reference),
        Command::Bench { counts, resolutions, repeats, seed, out } => bench(&counts, &resolutions, repeats, seed, &out),
    }
}

/// `kind` names the error class; the message stays on one line.
fn report(kind: &str, message: &str) {
    let flat: Vec<&str> = message.split_whitespace().collect();
    eprintln!("error: {kind}: {}", flat.join(" "));
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
        Error::InvalidArgument { .. } => "argument",
        Error::LengthMismatch { .. } => "shape",
        Error::MissingParam(_) => "checkpoint",
        Error::InvalidMesh(_) | Error::DegenerateFace { .. } => "mesh",
        Error::ZeroWeightSum { .. } | Error::InvalidRig(_) => "rig",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            report("usage", first);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(kind(&e), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
