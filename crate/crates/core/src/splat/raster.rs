use crate::diff::tape::mix;
use crate::gom::WorldGaussian;
use crate::Result;

use super::{map_indexed, project_with, CamConsts, Camera, Projection, RasterConfig, Splat2D};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub visible: usize,
    pub culled: usize,
    pub singular: usize,
    /// Hash of every discrete decision the forward pass made (visibility,
    /// order, cap and floor hits, early exits).
    pub signature: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `H x W x 3` linear RGB.
    pub image: Vec<f64>,
    /// Row-major `H x W` accumulated opacity.
    pub alpha: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl RenderOutput {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let p = 3 * (y * self.width + x);
        [self.image[p], self.image[p + 1], self.image[p + 2]]
    }

    pub fn alpha_at(&self, x: usize, y: usize) -> f64 {
        self.alpha[y * self.width + x]
    }
}

/// Visible splats sorted front to back, ties broken by input index.
pub(crate) struct Projected {
    pub splats: Vec<Splat2D>,
    pub culled: usize,
    pub singular: usize,
}

pub(crate) fn project_all(gaussians: &[WorldGaussian], cam: &Camera, cfg: &RasterConfig) -> Result<Projected> {
    cam.validate()?;
    let k = CamConsts::new(cam, cfg);
    let mut out = Projected { splats: Vec::with_capacity(gaussians.len()), culled: 0, singular: 0 };
    for (i, g) in gaussians.iter().enumerate() {
        match project_with(i, g, &k, cfg) {
            Projection::Visible(s) => out.splats.push(s),
            Projection::Culled => out.culled += 1,
            Projection::Singular => out.singular += 1,
        }
    }
    out.splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(out)
}

/// One blended primitive at one pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    /// Position in the sorted splat list.
    pub slot: usize,
    pub alpha: f64,
    /// Transmittance before this primitive.
    pub t: f64,
    /// `exp` of the Gaussian exponent.
    pub falloff: f64,
    pub capped: bool,
}

/// Front-to-back compositing of `order` at pixel center `(x, y)`. Returns
/// color, final transmittance and a hash of the decisions taken.
pub(crate) fn composite(
    splats: &[Splat2D],
    order: impl Iterator<Item = usize>,
    x: f64,
    y: f64,
    cfg: &RasterConfig,
    early_exit: bool,
    mut record: impl FnMut(Contribution),
) -> ([f64; 3], f64, u64) {
    let mut c = [0.0; 3];
    let mut t = 1.0;
    let mut h = 0u64;
    for slot in order {
        let s = &splats[slot];
        let dx = x - s.mean[0];
        let dy = y - s.mean[1];
        let power = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
        let falloff = power.exp();
        let raw = s.opacity * falloff;
        let capped = raw > cfg.alpha_cap;
        let alpha = if capped { cfg.alpha_cap } else { raw };
        if alpha < cfg.alpha_floor {
            continue;
        }
        h = mix(h, (slot as u64) << 1 | capped as u64);
        record(Contribution { slot, alpha, t, falloff, capped });
        for k in 0..3 {
            c[k] += t * alpha * s.color[k];
        }
        t *= 1.0 - alpha;
        if early_exit && t < cfg.min_transmittance {
            break;
        }
    }
    (c, t, h)
}

pub(crate) struct TileGrid {
    pub size: usize,
    pub cols: usize,
    /// Sorted splat slots overlapping each tile, front to back.
    pub lists: Vec<Vec<usize>>,
}

impl TileGrid {
    pub fn bin(splats: &[Splat2D], width: usize, height: usize, size: usize) -> Self {
        let cols = width.div_ceil(size);
        let rows = height.div_ceil(size);
        let mut lists = vec![Vec::new(); cols * rows];
        for (slot, s) in splats.iter().enumerate() {
            let Some((x0, x1)) = pixel_span(s.mean[0], s.radius, width) else { continue };
            let Some((y0, y1)) = pixel_span(s.mean[1], s.radius, height) else { continue };
            for ty in y0 / size..=y1 / size {
                for tx in x0 / size..=x1 / size {
                    lists[ty * cols + tx].push(slot);
                }
            }
        }
        TileGrid { size, cols, lists }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    /// Pixel ranges `(x0..x1, y0..y1)` of tile `i`.
    pub fn bounds(&self, i: usize, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let tx = i % self.cols;
        let ty = i / self.cols;
        let x0 = tx * self.size;
        let y0 = ty * self.size;
        (x0..(x0 + self.size).min(width), y0..(y0 + self.size).min(height))
    }
}

fn pixel_span(center: f64, radius: f64, n: usize) -> Option<(usize, usize)> {
    if !(radius.is_finite() && center.is_finite()) {
        return if radius.is_nan() || center.is_nan() { None } else { Some((0, n - 1)) };
    }
    let lo = (center - radius).ceil().max(0.0);
    let hi = (center + radius).floor().min(n as f64 - 1.0);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

struct TileResult {
    color: Vec<f64>,
    t: Vec<f64>,
    hash: u64,
}

/// Tile-binned renderer.
pub fn rasterize(gaussians: &[WorldGaussian], cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput> {
    let projected = project_all(gaussians, cam, cfg)?;
    let (w, h) = (cam.width, cam.height);
    let grid = TileGrid::bin(&projected.splats, w, h, cfg.tile_size.max(1));
    let splats = &projected.splats;
    let tiles = map_indexed(grid.len(), cfg.workers(), |i| {
        let (xs, ys) = grid.bounds(i, w, h);
        let list = &grid.lists[i];
        let n = xs.len() * ys.len();
        let mut res = TileResult { color: Vec::with_capacity(3 * n), t: Vec::with_capacity(n), hash: 0 };
        for y in ys {
            for x in xs.clone() {
                let (c, t, ph) = composite(splats, list.iter().copied(), x as f64, y as f64, cfg, true, |_| {});
                res.color.extend_from_slice(&c);
                res.t.push(t);
                res.hash = mix(res.hash, ph);
            }
        }
        res
    });
    let mut out = blank(w, h, &projected);
    for (i, tile) in tiles.iter().enumerate() {
        let (xs, ys) = grid.bounds(i, w, h);
        let mut k = 0;
        for y in ys {
            for x in xs.clone() {
                let p = y * w + x;
                out.image[3 * p..3 * p + 3].copy_from_slice(&tile.color[3 * k..3 * k + 3]);
                out.alpha[p] = 1.0 - tile.t[k];
                k += 1;
            }
        }
        out.diagnostics.signature = mix(out.diagnostics.signature, tile.hash);
    }
    Ok(out)
}

/// Reference renderer: every pixel visits every visible splat in depth
/// order, without tiles, bounding boxes or early exit.
pub fn rasterize_oracle(gaussians: &[WorldGaussian], cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput> {
    let projected = project_all(gaussians, cam, cfg)?;
    let (w, h) = (cam.width, cam.height);
    let mut out = blank(w, h, &projected);
    for y in 0..h {
        for x in 0..w {
            let (c, t, ph) = composite(&projected.splats, 0..projected.splats.len(), x as f64, y as f64, cfg, false, |_| {});
            let p = y * w + x;
            out.image[3 * p..3 * p + 3].copy_from_slice(&c);
            out.alpha[p] = 1.0 - t;
            out.diagnostics.signature = mix(out.diagnostics.signature, ph);
        }
    }
    Ok(out)
}

fn blank(w: usize, h: usize, projected: &Projected) -> RenderOutput {
    RenderOutput {
        width: w,
        height: h,
        image: vec![0.0; 3 * w * h],
        alpha: vec![0.0; w * h],
        diagnostics: Diagnostics {
            visible: projected.splats.len(),
            culled: projected.culled,
            singular: projected.singular,
            signature: projected.splats.iter().fold(0, |h, s| mix(h, s.index as u64)),
        },
    }
}
