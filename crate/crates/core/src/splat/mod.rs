//! Gaussian splatting: EWA projection, tile-binned front-to-back
//! compositing, a brute-force per-pixel oracle and the exact backward pass.

mod backward;
mod camera;
mod raster;

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::{Arc, Mutex, OnceLock};

pub use backward::{rasterize_backward, GaussianGrads};
pub use camera::Camera;
pub use raster::{rasterize, rasterize_oracle, Diagnostics, RenderOutput};

use crate::diff::dual::Real;
use crate::diff::tape::{Tape, Var};
use crate::gom::{rows_to_gaussians, WorldGaussian, WORLD_WIDTH};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    pub near: f64,
    /// Added to the diagonal of every screen covariance (px²).
    pub lowpass: f64,
    pub alpha_cap: f64,
    pub alpha_floor: f64,
    pub min_transmittance: f64,
    /// Screen-space half extent in standard deviations; widened per splat
    /// to the radius where its peak falls below the alpha floor.
    pub sigma_extent: f64,
    /// Tile workers; 0 picks `worker_count()`.
    pub threads: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            near: 0.01,
            lowpass: 0.3,
            alpha_cap: 0.999,
            alpha_floor: 1.0 / 255.0,
            min_transmittance: 1e-4,
            sigma_extent: 3.0,
            threads: 0,
        }
    }
}

/// Projected Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    /// Index into the input list.
    pub index: usize,
    pub mean: [f64; 2],
    /// Screen covariance `(xx, xy, yy)` including the low-pass.
    pub cov: [f64; 3],
    /// Inverse of `cov`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Half extent of the screen bounding square in pixels.
    pub radius: f64,
}

/// Camera constants used by the projection kernel.
#[derive(Clone, Copy)]
pub(crate) struct CamConsts {
    w: [f64; 9],
    t: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    lowpass: f64,
}

impl CamConsts {
    pub(crate) fn new(cam: &Camera, cfg: &RasterConfig) -> Self {
        let mut w = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                w[r * 3 + c] = cam.rotation[(r, c)];
            }
        }
        CamConsts {
            w,
            t: [cam.translation.x, cam.translation.y, cam.translation.z],
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            lowpass: cfg.lowpass,
        }
    }

    pub(crate) fn depth(&self, mu: &[f64]) -> f64 {
        self.w[6] * mu[0] + self.w[7] * mu[1] + self.w[8] * mu[2] + self.t[2]
    }
}

/// Mean, screen covariance (with low-pass) of a Gaussian given as
/// `[mu (3), sigma xx xy xz yy yz zz]`.
pub(crate) fn project_kernel<T: Real>(k: &CamConsts, x: &[T; 9]) -> ([T; 2], [T; 3]) {
    let w = |i: usize| T::cst(k.w[i]);
    let m: [T; 3] = std::array::from_fn(|r| {
        w(r * 3) * x[0] + w(r * 3 + 1) * x[1] + w(r * 3 + 2) * x[2] + T::cst(k.t[r])
    });
    let iz = T::cst(1.0) / m[2];
    let u = m[0] * iz * T::cst(k.fx) + T::cst(k.cx);
    let v = m[1] * iz * T::cst(k.fy) + T::cst(k.cy);
    let j00 = iz.scale(k.fx);
    let j02 = -(m[0] * iz * iz).scale(k.fx);
    let j11 = iz.scale(k.fy);
    let j12 = -(m[1] * iz * iz).scale(k.fy);
    // rows of J W
    let t0: [T; 3] = std::array::from_fn(|c| j00 * w(c) + j02 * w(6 + c));
    let t1: [T; 3] = std::array::from_fn(|c| j11 * w(3 + c) + j12 * w(6 + c));
    let s = [[x[3], x[4], x[5]], [x[4], x[6], x[7]], [x[5], x[7], x[8]]];
    let quad = |a: &[T; 3], b: &[T; 3]| {
        let mut acc = T::cst(0.0);
        for i in 0..3 {
            for j in 0..3 {
                acc = acc + a[i] * s[i][j] * b[j];
            }
        }
        acc
    };
    let lp = T::cst(k.lowpass);
    ([u, v], [quad(&t0, &t0) + lp, quad(&t0, &t1), quad(&t1, &t1) + lp])
}

/// `[u, v, conic xx, xy, yy]` as one map for the backward pass.
pub(crate) fn project_conic_kernel<T: Real>(k: &CamConsts, x: &[T; 9]) -> [T; 5] {
    let (mean, cov) = project_kernel(k, x);
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    [mean[0], mean[1], cov[2] / det, -cov[1] / det, cov[0] / det]
}

pub(crate) fn gaussian_input(g: &WorldGaussian) -> [f64; 9] {
    let s = &g.sigma;
    [g.mu.x, g.mu.y, g.mu.z, s[(0, 0)], s[(0, 1)], s[(0, 2)], s[(1, 1)], s[(1, 2)], s[(2, 2)]]
}

pub enum Projection {
    Visible(Splat2D),
    Culled,
    Singular,
}

/// Projects one Gaussian; culled at or behind the near plane, singular when
/// the screen covariance is not positive definite.
pub fn project_gaussian(index: usize, g: &WorldGaussian, cam: &Camera, cfg: &RasterConfig) -> Projection {
    project_with(index, g, &CamConsts::new(cam, cfg), cfg)
}

pub(crate) fn project_with(index: usize, g: &WorldGaussian, k: &CamConsts, cfg: &RasterConfig) -> Projection {
    let x = gaussian_input(g);
    let depth = k.depth(&x);
    if !(depth > cfg.near) {
        return Projection::Culled;
    }
    let (mean, cov) = project_kernel(k, &x);
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) || !(cov[0] > 0.0) || !det.is_finite() {
        return Projection::Singular;
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let mid = 0.5 * (cov[0] + cov[2]);
    let lambda_max = mid + (0.25 * (cov[0] - cov[2]).powi(2) + cov[1] * cov[1]).sqrt();
    let floor_ratio = g.opacity.min(cfg.alpha_cap) / cfg.alpha_floor;
    let floor_extent = if floor_ratio > 1.0 { (2.0 * floor_ratio.ln()).sqrt() } else { 0.0 };
    Projection::Visible(Splat2D {
        index,
        mean,
        cov,
        conic,
        depth,
        color: [g.color.x, g.color.y, g.color.z],
        opacity: g.opacity,
        radius: lambda_max.sqrt() * cfg.sigma_extent.max(floor_extent),
    })
}

impl RasterConfig {
    pub(crate) fn workers(&self) -> usize {
        if self.threads == 0 {
            crate::worker_count()
        } else {
            self.threads
        }
    }
}

fn pools() -> &'static Mutex<HashMap<usize, Arc<rayon::ThreadPool>>> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    POOLS.get_or_init(Default::default)
}

/// `f(0..n)` in order, spread over `threads` workers.
pub(crate) fn map_indexed<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    use rayon::prelude::*;
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = {
        let mut map = pools().lock().expect("pool map");
        map.entry(threads)
            .or_insert_with(|| {
                Arc::new(rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool"))
            })
            .clone()
    };
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Records a render on the tape. `world` holds `F x 13` world rows; the
/// output is `(H * W) x 4` with RGB then accumulated alpha per pixel.
pub fn rasterize_tape(tape: &mut Tape, world: Var, cam: &Camera, cfg: &RasterConfig) -> Result<Var> {
    Error::check_len("world gaussian width", WORLD_WIDTH, tape.cols(world))?;
    let gaussians = Rc::new(rows_to_gaussians(tape.value(world)));
    let out = rasterize(&gaussians, cam, cfg)?;
    tape.note(out.diagnostics.signature);
    let n = cam.width * cam.height;
    let mut y = Vec::with_capacity(n * 4);
    for p in 0..n {
        y.extend_from_slice(&out.image[3 * p..3 * p + 3]);
        y.push(out.alpha[p]);
    }
    let cam = cam.clone();
    let cfg = *cfg;
    Ok(tape.custom(&[world], y, n, 4, move |g, _| {
        let mut gi = Vec::with_capacity(3 * n);
        let mut ga = Vec::with_capacity(n);
        for p in 0..n {
            gi.extend_from_slice(&g[4 * p..4 * p + 3]);
            ga.push(g[4 * p + 3]);
        }
        let grads = rasterize_backward(&gaussians, &cam, &cfg, &gi, &ga).expect("shapes fixed in forward");
        vec![Some(grads.to_rows())]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::{gradcheck_fn, projection_weights};
    use crate::geometry::Vec3;
    use nalgebra::{Matrix3, Matrix4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(w: usize, h: usize) -> Camera {
        Camera::new(100.0, 100.0, 64.0, 64.0, Matrix4::identity(), w, h)
    }

    fn gaussian(mu: [f64; 3], eps: f64, color: [f64; 3], opacity: f64) -> WorldGaussian {
        WorldGaussian {
            mu: Vec3::from(mu),
            sigma: Matrix3::identity() * eps * eps,
            color: Vec3::from(color),
            opacity,
        }
    }

    fn visible(p: Projection) -> Splat2D {
        match p {
            Projection::Visible(s) => s,
            _ => panic!("expected a visible splat"),
        }
    }

    #[test]
    fn on_axis_projection() {
        let cfg = RasterConfig::default();
        let s = visible(project_gaussian(0, &gaussian([0.0, 0.0, 2.0], 0.01, [1.0; 3], 1.0), &axis_camera(128, 128), &cfg));
        assert!((s.mean[0] - 64.0).abs() < 1e-12 && (s.mean[1] - 64.0).abs() < 1e-12);
        assert!((s.cov[0] - 0.55).abs() < 1e-12 && (s.cov[2] - 0.55).abs() < 1e-12);
        assert!(s.cov[1].abs() < 1e-15);
        assert_eq!(s.depth, 2.0);
    }

    #[test]
    fn behind_and_near_plane_culled() {
        let cfg = RasterConfig::default();
        let cam = axis_camera(128, 128);
        assert!(matches!(project_gaussian(0, &gaussian([0.0, 0.0, -1.0], 0.1, [1.0; 3], 1.0), &cam, &cfg), Projection::Culled));
        assert!(matches!(project_gaussian(0, &gaussian([0.0, 0.0, 0.01], 0.1, [1.0; 3], 1.0), &cam, &cfg), Projection::Culled));
    }

    #[test]
    fn singular_counted() {
        let mut g = gaussian([0.0, 0.0, 2.0], 0.1, [1.0; 3], 1.0);
        g.sigma = Matrix3::identity() * -10.0;
        let out = rasterize(&[g], &axis_camera(32, 32), &RasterConfig::default()).unwrap();
        assert_eq!(out.diagnostics.singular, 1);
        assert!(out.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn empty_scene() {
        let cam = axis_camera(40, 30);
        let cfg = RasterConfig::default();
        let a = rasterize(&[], &cam, &cfg).unwrap();
        let b = rasterize_oracle(&[], &cam, &cfg).unwrap();
        assert!(a.image.iter().chain(&a.alpha).all(|&v| v == 0.0));
        assert_eq!(a.image, b.image);
        assert_eq!(a.alpha, b.alpha);
    }

    #[test]
    fn single_gaussian_center() {
        let out = rasterize(&[gaussian([0.0, 0.0, 2.0], 0.02, [1.0, 0.0, 0.0], 0.8)], &axis_camera(128, 128), &RasterConfig::default())
            .unwrap();
        assert!((out.alpha_at(64, 64) - 0.8).abs() < 1e-15);
        assert_eq!(out.pixel(64, 64), [0.8, 0.0, 0.0]);
    }

    #[test]
    fn two_coincident_gaussians() {
        let front = gaussian([0.0, 0.0, 2.0], 0.02, [1.0, 0.0, 0.0], 0.5);
        let back = gaussian([0.0, 0.0, 2.0], 0.02, [0.0, 0.0, 1.0], 1.0);
        let out = rasterize(&[front, back], &axis_camera(128, 128), &RasterConfig::default()).unwrap();
        let c = out.pixel(64, 64);
        assert!((c[0] - 0.5).abs() < 1e-15 && c[1] == 0.0 && (c[2] - 0.5 * 0.999).abs() < 1e-15);
        assert!((out.alpha_at(64, 64) - (1.0 - 0.5 * 0.001)).abs() < 1e-15);
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<WorldGaussian> {
        (0..n)
            .map(|_| {
                let a = Matrix3::from_fn(|_, _| rng.random_range(-0.15..0.15));
                WorldGaussian {
                    mu: Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(1.5..3.5)),
                    sigma: a * a.transpose() + Matrix3::identity() * 1e-4,
                    color: Vec3::new(rng.random(), rng.random(), rng.random()),
                    opacity: rng.random_range(0.05..1.0),
                }
            })
            .collect()
    }

    fn scene_camera(w: usize, h: usize) -> Camera {
        Camera::look_at(Vec3::zeros(), Vec3::z(), -Vec3::y(), w as f64 * 0.9, w, h)
    }

    fn max_diff(a: &RenderOutput, b: &RenderOutput) -> f64 {
        a.image.iter().zip(&b.image).chain(a.alpha.iter().zip(&b.alpha)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn matches_oracle_without_early_exit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = RasterConfig { min_transmittance: 0.0, ..Default::default() };
        for _ in 0..4 {
            let scene = random_scene(&mut rng, 200);
            let cam = scene_camera(72, 56);
            let d = max_diff(&rasterize(&scene, &cam, &cfg).unwrap(), &rasterize_oracle(&scene, &cam, &cfg).unwrap());
            assert!(d <= 1e-12, "max diff {d}");
        }
    }

    #[test]
    fn early_exit_error_is_bounded_by_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = RasterConfig::default();
        for _ in 0..4 {
            let scene = random_scene(&mut rng, 200);
            let cam = scene_camera(72, 56);
            let d = max_diff(&rasterize(&scene, &cam, &cfg).unwrap(), &rasterize_oracle(&scene, &cam, &cfg).unwrap());
            assert!(d < cfg.min_transmittance, "max diff {d}");
        }
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let scene = random_scene(&mut ChaCha8Rng::seed_from_u64(3), 150);
        let cam = scene_camera(64, 64);
        let one = RasterConfig { threads: 1, ..Default::default() };
        let four = RasterConfig { threads: 4, ..Default::default() };
        assert_eq!(rasterize(&scene, &cam, &one).unwrap(), rasterize(&scene, &cam, &four).unwrap());
        let gi: Vec<f64> = (0..3 * 64 * 64).map(|i| (i as f64 * 0.37).sin()).collect();
        let ga: Vec<f64> = (0..64 * 64).map(|i| (i as f64 * 0.11).cos()).collect();
        assert_eq!(
            rasterize_backward(&scene, &cam, &one, &gi, &ga).unwrap(),
            rasterize_backward(&scene, &cam, &four, &gi, &ga).unwrap()
        );
    }

    #[test]
    fn input_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = random_scene(&mut rng, 60);
        let mut shuffled = scene.clone();
        shuffled.reverse();
        shuffled.swap(3, 40);
        let cam = scene_camera(48, 48);
        let cfg = RasterConfig::default();
        let a = rasterize(&scene, &cam, &cfg).unwrap();
        let b = rasterize(&shuffled, &cam, &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.alpha, b.alpha);
    }

    #[test]
    fn energy_bound() {
        let scene = random_scene(&mut ChaCha8Rng::seed_from_u64(8), 120);
        let out = rasterize(&scene, &scene_camera(48, 48), &RasterConfig::default()).unwrap();
        for p in 0..48 * 48 {
            let a = out.alpha[p];
            assert!((0.0..=1.0).contains(&a));
            for k in 0..3 {
                assert!(out.image[3 * p + k] >= 0.0 && out.image[3 * p + k] <= a + 1e-12);
            }
        }
    }

    #[test]
    fn occluded_opacity_has_almost_no_gradient() {
        // wide enough that the front alpha is capped over the whole back footprint
        let front = gaussian([0.0, 0.0, 2.0], 5.0, [1.0, 0.0, 0.0], 1.0);
        let back = gaussian([0.0, 0.0, 3.0], 0.02, [0.0, 0.0, 1.0], 0.6);
        let cam = axis_camera(128, 128);
        let cfg = RasterConfig::default();
        let gi = vec![1.0; 3 * 128 * 128];
        let ga = vec![1.0; 128 * 128];
        let open = rasterize_backward(std::slice::from_ref(&back), &cam, &cfg, &gi, &ga).unwrap();
        let hidden = rasterize_backward(&[front, back], &cam, &cfg, &gi, &ga).unwrap();
        assert!(open.opacity[0].abs() > 1.0);
        assert!(hidden.opacity[1].abs() <= 1.001e-3 * open.opacity[0].abs(), "{} vs {}", hidden.opacity[1], open.opacity[0]);
    }

    #[test]
    fn single_color_gradient_is_coverage() {
        let g = gaussian([0.05, -0.02, 2.0], 0.03, [0.3, 0.6, 0.9], 0.7);
        let cam = axis_camera(128, 128);
        let cfg = RasterConfig::default();
        let out = rasterize(&[g.clone()], &cam, &cfg).unwrap();
        let gi = vec![1.0; 3 * 128 * 128];
        let grads = rasterize_backward(&[g], &cam, &cfg, &gi, &vec![0.0; 128 * 128]).unwrap();
        let coverage: f64 = out.alpha.iter().sum();
        for k in 0..3 {
            assert!((grads.color[0][k] - coverage).abs() < 1e-9 * coverage);
        }
        assert!(rasterize_backward(&[], &cam, &cfg, &gi[1..], &vec![0.0; 128 * 128]).is_err());
    }

    /// Weighted render loss and its analytic gradient for FD comparison.
    fn scene_fd(scene: &[WorldGaussian], cam: &Camera, seed: u64) {
        let cfg = RasterConfig::default();
        let n = cam.width * cam.height;
        let wi = projection_weights(3 * n, seed);
        let wa = projection_weights(n, seed + 1);
        let loss = |x: &[f64]| {
            let out = rasterize(&crate::gom::rows_to_gaussians(x), cam, &cfg).unwrap();
            let a: f64 = out.image.iter().zip(&wi).map(|(p, q)| p * q).sum();
            a + out.alpha.iter().zip(&wa).map(|(p, q)| p * q).sum::<f64>()
        };
        let sig = |x: &[f64]| rasterize(&crate::gom::rows_to_gaussians(x), cam, &cfg).unwrap().diagnostics.signature;
        let x = crate::gom::gaussians_to_rows(scene);
        let grad = rasterize_backward(scene, cam, &cfg, &wi, &wa).unwrap().to_rows();
        let coords: Vec<usize> = (0..x.len()).collect();
        let rep = gradcheck_fn(loss, &grad, &x, 1e-6, &coords, |a, b| sig(a) == sig(b));
        assert!(rep.passes(1e-3), "{rep:?}");
        assert!(rep.checked > x.len() / 2, "{rep:?}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut scene = random_scene(&mut rng, 20);
        for g in scene.iter_mut() {
            g.opacity = g.opacity.min(0.9);
        }
        scene_fd(&scene, &scene_camera(32, 32), 4);
    }
}
