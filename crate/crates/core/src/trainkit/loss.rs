//! Image losses, the mesh smoothness term and the quality metrics.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::geometry::TriMesh;
use crate::gom::CanonicalGoM;
use crate::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_SENTINEL: f64 = 99.99;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_per: f64,
    pub lambda_mask: f64,
    pub lambda_lap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_per: 1.0, lambda_mask: 5.0, lambda_lap: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_per", self.lambda_per), ("lambda_mask", self.lambda_mask), ("lambda_lap", self.lambda_lap)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::arg(name, "must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    Error::check_len("psnr input", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::arg("psnr", "empty images"));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { PSNR_SENTINEL } else { (10.0 * (1.0 / mse).log10()).min(PSNR_SENTINEL) })
}

/// Intersection over union of two masks thresholded at 0.5. Two empty masks
/// agree perfectly.
pub fn mask_iou(a: &[f64], b: &[f64]) -> Result<f64> {
    Error::check_len("mask", a.len(), b.len())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Separable Gaussian window, truncated at the image border and renormalized
/// over the pixels that remain.
#[derive(Clone, Debug)]
struct Window {
    taps: Vec<f64>,
}

impl Window {
    fn new() -> Self {
        let r = (SSIM_WINDOW / 2) as i64;
        Window { taps: (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect() }
    }

    fn radius(&self) -> i64 {
        (self.taps.len() / 2) as i64
    }

    /// Normalized weights of positions `lo..=hi` around `i` along an axis
    /// of length `n`.
    fn row(&self, i: usize, n: usize) -> (usize, Vec<f64>) {
        let r = self.radius();
        let lo = (i as i64 - r).max(0) as usize;
        let hi = ((i as i64 + r) as usize).min(n - 1);
        let w: Vec<f64> = (lo..=hi).map(|j| self.taps[(j as i64 - i as i64 + r) as usize]).collect();
        let s: f64 = w.iter().sum();
        (lo, w.into_iter().map(|v| v / s).collect())
    }

    /// Filters an interleaved `h x w x c` image.
    fn apply(&self, x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
        let mut tmp = vec![0.0; x.len()];
        for col in 0..w {
            let (lo, wt) = self.row(col, w);
            for y in 0..h {
                for (k, &t) in wt.iter().enumerate() {
                    let src = (y * w + lo + k) * c;
                    let dst = (y * w + col) * c;
                    for ch in 0..c {
                        tmp[dst + ch] += t * x[src + ch];
                    }
                }
            }
        }
        let mut out = vec![0.0; x.len()];
        for row in 0..h {
            let (lo, wt) = self.row(row, h);
            for xcol in 0..w {
                for (k, &t) in wt.iter().enumerate() {
                    let src = ((lo + k) * w + xcol) * c;
                    let dst = (row * w + xcol) * c;
                    for ch in 0..c {
                        out[dst + ch] += t * tmp[src + ch];
                    }
                }
            }
        }
        out
    }

    fn transpose(&self, g: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
        let mut tmp = vec![0.0; g.len()];
        for row in 0..h {
            let (lo, wt) = self.row(row, h);
            for xcol in 0..w {
                for (k, &t) in wt.iter().enumerate() {
                    let dst = ((lo + k) * w + xcol) * c;
                    let src = (row * w + xcol) * c;
                    for ch in 0..c {
                        tmp[dst + ch] += t * g[src + ch];
                    }
                }
            }
        }
        let mut out = vec![0.0; g.len()];
        for col in 0..w {
            let (lo, wt) = self.row(col, w);
            for y in 0..h {
                for (k, &t) in wt.iter().enumerate() {
                    let dst = (y * w + lo + k) * c;
                    let src = (y * w + col) * c;
                    for ch in 0..c {
                        out[dst + ch] += t * tmp[src + ch];
                    }
                }
            }
        }
        out
    }
}

struct SsimStats {
    map: Vec<f64>,
    mx: Vec<f64>,
    my: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn ssim_stats(win: &Window, x: &[f64], y: &[f64], h: usize, w: usize, c: usize) -> SsimStats {
    let mx = win.apply(x, h, w, c);
    let my = win.apply(y, h, w, c);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let exx = win.apply(&sq(x, x), h, w, c);
    let eyy = win.apply(&sq(y, y), h, w, c);
    let exy = win.apply(&sq(x, y), h, w, c);
    let n = x.len();
    let mut s = SsimStats {
        map: Vec::with_capacity(n),
        a1: Vec::with_capacity(n),
        a2: Vec::with_capacity(n),
        b1: Vec::with_capacity(n),
        b2: Vec::with_capacity(n),
        mx,
        my,
    };
    for i in 0..n {
        let (mx, my) = (s.mx[i], s.my[i]);
        let a1 = 2.0 * mx * my + C1;
        let a2 = 2.0 * (exy[i] - mx * my) + C2;
        let b1 = mx * mx + my * my + C1;
        let b2 = (exx[i] - mx * mx) + (eyy[i] - my * my) + C2;
        s.map.push(a1 * a2 / (b1 * b2));
        s.a1.push(a1);
        s.a2.push(a2);
        s.b1.push(b1);
        s.b2.push(b2);
    }
    s
}

/// Mean structural similarity of two interleaved `h x w x c` images, per
/// channel and then averaged.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, channels: usize) -> Result<f64> {
    check_image("ssim input", a, height, width, channels)?;
    Error::check_len("ssim input", a.len(), b.len())?;
    let s = ssim_stats(&Window::new(), a, b, height, width, channels);
    Ok(s.map.iter().sum::<f64>() / s.map.len() as f64)
}

fn check_image(what: &'static str, x: &[f64], h: usize, w: usize, c: usize) -> Result<()> {
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::arg(what, "empty image"));
    }
    Error::check_len(what, h * w * c, x.len())
}

/// Gradient of mean SSIM with respect to `x`, given upstream `g`.
fn ssim_grad(win: &Window, s: &SsimStats, x: &[f64], y: &[f64], h: usize, w: usize, c: usize, g: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mut g_mx = Vec::with_capacity(x.len());
    let mut g_exy = Vec::with_capacity(x.len());
    let mut g_exx = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = s.map[i] * g / n;
        let (mx, my) = (s.mx[i], s.my[i]);
        g_mx.push(v * (2.0 * my / s.a1[i] - 2.0 * mx / s.b1[i] - 2.0 * my / s.a2[i] + 2.0 * mx / s.b2[i]));
        g_exy.push(v * 2.0 / s.a2[i]);
        g_exx.push(-v / s.b2[i]);
    }
    let t_mx = win.transpose(&g_mx, h, w, c);
    let t_exy = win.transpose(&g_exy, h, w, c);
    let t_exx = win.transpose(&g_exx, h, w, c);
    (0..x.len()).map(|i| t_mx[i] + y[i] * t_exy[i] + 2.0 * x[i] * t_exx[i]).collect()
}

/// Mean SSIM between two `(h*w) x c` vars.
pub fn ssim_tape(tape: &mut Tape, a: Var, b: Var, height: usize, width: usize) -> Result<Var> {
    let c = tape.cols(a);
    let x = tape.value_rc(a);
    let y = tape.value_rc(b);
    check_image("ssim input", &x, height, width, c)?;
    Error::check_len("ssim input", x.len(), y.len())?;
    let win = Window::new();
    let s = ssim_stats(&win, &x, &y, height, width, c);
    let value = s.map.iter().sum::<f64>() / s.map.len() as f64;
    Ok(tape.custom(&[a, b], vec![value], 1, 1, move |g, need| {
        vec![
            need[0].then(|| ssim_grad(&win, &s, &x, &y, height, width, c, g[0])),
            // the map is symmetric in its two arguments
            need[1].then(|| {
                let t = ssim_stats(&win, &y, &x, height, width, c);
                ssim_grad(&win, &t, &y, &x, height, width, c, g[0])
            }),
        ]
    }))
}

/// Umbrella operator of a mesh as sparse rows: mean of the 1-ring minus the
/// vertex.
#[derive(Clone, Debug)]
pub struct Umbrella {
    rows: Rc<Vec<Vec<(usize, f64)>>>,
}

impl Umbrella {
    pub fn new(mesh: &TriMesh) -> Self {
        let rows = mesh
            .neighbors()
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                if nb.is_empty() {
                    return Vec::new();
                }
                let k = 1.0 / nb.len() as f64;
                let mut r: Vec<(usize, f64)> = nb.iter().map(|&j| (j, k)).collect();
                r.push((i, -1.0));
                r
            })
            .collect();
        Umbrella { rows: Rc::new(rows) }
    }

    /// Mean squared umbrella-vector norm of `positions` (`V x 3`).
    pub fn tape(&self, tape: &mut Tape, positions: Var) -> Result<Var> {
        Error::check_len("laplacian positions", self.rows.len(), tape.rows(positions))?;
        let u = tape.sparse_rows(positions, self.rows.clone());
        let sq = tape.square(u);
        let s = tape.sum(sq);
        Ok(tape.scale(s, 1.0 / self.rows.len().max(1) as f64))
    }
}

/// The four loss terms before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub ssim: f64,
    pub mask: f64,
    pub lap: f64,
}

impl LossTerms {
    pub fn add(&self, o: &LossTerms) -> LossTerms {
        LossTerms { l1: self.l1 + o.l1, ssim: self.ssim + o.ssim, mask: self.mask + o.mask, lap: self.lap + o.lap }
    }

    pub fn scale(&self, k: f64) -> LossTerms {
        LossTerms { l1: k * self.l1, ssim: k * self.ssim, mask: k * self.mask, lap: k * self.lap }
    }
}

/// One weighted loss on the tape. Images are `(h*w) x 3`, masks `(h*w) x 1`,
/// `low` the canonical low-resolution vertices.
#[allow(clippy::too_many_arguments)]
pub fn loss_tape(
    tape: &mut Tape,
    pred_image: Var,
    pred_mask: Var,
    gt_image: Var,
    gt_mask: Var,
    low: Var,
    umbrella: &Umbrella,
    height: usize,
    width: usize,
    w: &LossWeights,
) -> Result<(Var, LossTerms)> {
    let n = height * width;
    for (what, v, c) in [("predicted image", pred_image, 3), ("target image", gt_image, 3), ("predicted mask", pred_mask, 1), ("target mask", gt_mask, 1)] {
        if tape.shape(v) != (n, c) {
            return Err(Error::LengthMismatch { what, expected: n * c, got: tape.value(v).len() });
        }
    }
    let d = tape.sub(pred_image, gt_image);
    let d = tape.abs(d);
    let l1 = tape.mean(d);
    let s = ssim_tape(tape, pred_image, gt_image, height, width)?;
    let per = tape.scale(s, -1.0);
    let per = tape.add_scalar(per, 1.0);
    let dm = tape.sub(pred_mask, gt_mask);
    let dm = tape.abs(dm);
    let mask = tape.mean(dm);
    let lap = umbrella.tape(tape, low)?;
    let terms = LossTerms { l1: tape.scalar(l1), ssim: tape.scalar(per), mask: tape.scalar(mask), lap: tape.scalar(lap) };
    let a = tape.scale(per, w.lambda_per);
    let b = tape.scale(mask, w.lambda_mask);
    let c = tape.scale(lap, w.lambda_lap);
    Ok((tape.add_all(&[l1, a, b, c]), terms))
}

/// Loss value and gradients for plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub total: f64,
    pub terms: LossTerms,
    pub grad_image: Vec<f64>,
    pub grad_mask: Vec<f64>,
    /// Gradient on the low-resolution canonical vertices, `V x 3`.
    pub grad_vertices: Vec<f64>,
}

/// Loss of a predicted image and mask against the targets, with the
/// smoothness term on the canonical low-resolution mesh of `gom`.
pub fn loss_total(
    pred_image: &[f64],
    pred_mask: &[f64],
    gt_image: &[f64],
    gt_mask: &[f64],
    height: usize,
    width: usize,
    gom: &CanonicalGoM,
    w: &LossWeights,
) -> Result<LossEval> {
    w.validate()?;
    let n = height * width;
    Error::check_len("predicted image", 3 * n, pred_image.len())?;
    Error::check_len("target image", 3 * n, gt_image.len())?;
    Error::check_len("predicted mask", n, pred_mask.len())?;
    Error::check_len("target mask", n, gt_mask.len())?;
    let mut tape = Tape::new();
    let pi = tape.leaf(pred_image.to_vec(), n, 3);
    let pm = tape.leaf(pred_mask.to_vec(), n, 1);
    let gi = tape.constant(gt_image.to_vec(), n, 3);
    let gm = tape.constant(gt_mask.to_vec(), n, 1);
    let verts: Vec<f64> = gom.low_mesh.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    let low = tape.leaf(verts, gom.low_count(), 3);
    let (total, terms) = loss_tape(&mut tape, pi, pm, gi, gm, low, &Umbrella::new(&gom.low_mesh), height, width, w)?;
    let grads = tape.backward(total);
    Ok(LossEval {
        total: tape.scalar(total),
        terms,
        grad_image: grads.dense(pi),
        grad_mask: grads.dense(pm),
        grad_vertices: grads.dense(low),
    })
}
