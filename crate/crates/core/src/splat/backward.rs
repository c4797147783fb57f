use crate::diff::dual::{vjp, Dual};
use crate::gom::{WorldGaussian, WORLD_WIDTH};
use crate::{Error, Result};

use super::raster::{composite, project_all, Contribution, TileGrid};
use super::{gaussian_input, map_indexed, project_conic_kernel, CamConsts, Camera, RasterConfig};

/// Per-Gaussian gradients. `sigma` follows the world row layout
/// `xx xy xz yy yz zz`, each entry standing for both symmetric slots.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub mu: Vec<[f64; 3]>,
    pub sigma: Vec<[f64; 6]>,
    pub color: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
}

impl GaussianGrads {
    fn zeros(n: usize) -> Self {
        GaussianGrads { mu: vec![[0.0; 3]; n], sigma: vec![[0.0; 6]; n], color: vec![[0.0; 3]; n], opacity: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    /// Gradients laid out like `gaussians_to_rows`.
    pub fn to_rows(&self) -> Vec<f64> {
        let mut rows = Vec::with_capacity(self.len() * WORLD_WIDTH);
        for i in 0..self.len() {
            rows.extend_from_slice(&self.mu[i]);
            rows.extend_from_slice(&self.sigma[i]);
            rows.extend_from_slice(&self.color[i]);
            rows.push(self.opacity[i]);
        }
        rows
    }
}

// screen-space gradient per splat: u, v, conic (3), color (3), opacity
const SCREEN: usize = 9;

/// Vector-Jacobian product of `rasterize` for upstream gradients on the
/// image (`H x W x 3`) and alpha (`H x W`). Depth order is held fixed and
/// clamped alphas pass no gradient to position, shape or opacity.
pub fn rasterize_backward(
    gaussians: &[WorldGaussian],
    cam: &Camera,
    cfg: &RasterConfig,
    grad_image: &[f64],
    grad_alpha: &[f64],
) -> Result<GaussianGrads> {
    let (w, h) = (cam.width, cam.height);
    Error::check_len("image gradient", 3 * w * h, grad_image.len())?;
    Error::check_len("alpha gradient", w * h, grad_alpha.len())?;
    let projected = project_all(gaussians, cam, cfg)?;
    let splats = &projected.splats;
    let grid = TileGrid::bin(splats, w, h, cfg.tile_size.max(1));

    let per_tile = map_indexed(grid.len(), cfg.workers(), |i| {
        let (xs, ys) = grid.bounds(i, w, h);
        let list = &grid.lists[i];
        let mut acc = vec![0.0; list.len() * SCREEN];
        let mut contribs: Vec<Contribution> = Vec::new();
        for y in ys {
            for x in xs.clone() {
                contribs.clear();
                let (_, t_final, _) = composite(
                    splats,
                    list.iter().copied(),
                    x as f64,
                    y as f64,
                    cfg,
                    true,
                    |c| contribs.push(c),
                );
                if contribs.is_empty() {
                    continue;
                }
                let p = y * w + x;
                let gc = &grad_image[3 * p..3 * p + 3];
                let ga = grad_alpha[p];
                let mut suffix = [0.0; 3];
                for c in contribs.iter().rev() {
                    let s = &splats[c.slot];
                    // tile lists are ascending in slot
                    let local = list.partition_point(|&q| q < c.slot);
                    let g = &mut acc[local * SCREEN..(local + 1) * SCREEN];
                    let one_minus = 1.0 - c.alpha;
                    let mut g_alpha = ga * t_final / one_minus;
                    for k in 0..3 {
                        g_alpha += gc[k] * (c.t * s.color[k] - suffix[k] / one_minus);
                        g[5 + k] += gc[k] * c.t * c.alpha;
                        suffix[k] += s.color[k] * c.alpha * c.t;
                    }
                    if c.capped {
                        continue;
                    }
                    g[8] += g_alpha * c.falloff;
                    let g_power = g_alpha * c.alpha;
                    let dx = x as f64 - s.mean[0];
                    let dy = y as f64 - s.mean[1];
                    g[0] += g_power * (s.conic[0] * dx + s.conic[1] * dy);
                    g[1] += g_power * (s.conic[1] * dx + s.conic[2] * dy);
                    g[2] += -0.5 * g_power * dx * dx;
                    g[3] += -g_power * dx * dy;
                    g[4] += -0.5 * g_power * dy * dy;
                }
            }
        }
        acc
    });

    // reduce in tile order so the sum does not depend on the worker count
    let mut screen = vec![[0.0; SCREEN]; splats.len()];
    for (i, acc) in per_tile.iter().enumerate() {
        for (local, &slot) in grid.lists[i].iter().enumerate() {
            for k in 0..SCREEN {
                screen[slot][k] += acc[local * SCREEN + k];
            }
        }
    }

    let consts = CamConsts::new(cam, cfg);
    let mut out = GaussianGrads::zeros(gaussians.len());
    for (slot, s) in splats.iter().enumerate() {
        let g = &screen[slot];
        let i = s.index;
        out.color[i] = [g[5], g[6], g[7]];
        out.opacity[i] = g[8];
        if g[..5].iter().all(|&v| v == 0.0) {
            continue;
        }
        let x = Dual::<9>::vars(gaussian_input(&gaussians[i]));
        let y = project_conic_kernel(&consts, &x);
        let d = vjp(&y, &[g[0], g[1], g[2], g[3], g[4]]);
        out.mu[i] = [d[0], d[1], d[2]];
        out.sigma[i] = [d[3], d[4], d[5], d[6], d[7], d[8]];
    }
    Ok(out)
}
