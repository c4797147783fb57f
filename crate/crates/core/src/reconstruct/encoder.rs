//! Image features: a fixed blur pyramid resampled to full resolution, and
//! differentiable bilinear lookups into it.

use std::rc::Rc;

use crate::diff::tape::{Tape, Var};
use crate::splat::Camera;
use crate::{Error, Result};

pub const BLUR_SIGMA: f64 = 1.0;
const BLUR_RADIUS: isize = 3;

/// Dense `rows x cols` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
struct Mat {
    rows: usize,
    cols: usize,
    a: Vec<f64>,
}

impl Mat {
    fn identity(n: usize) -> Self {
        let mut a = vec![0.0; n * n];
        (0..n).for_each(|i| a[i * n + i] = 1.0);
        Mat { rows: n, cols: n, a }
    }

    fn mul(&self, o: &Mat) -> Mat {
        assert_eq!(self.cols, o.rows);
        let mut a = vec![0.0; self.rows * o.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let v = self.a[i * self.cols + k];
                if v != 0.0 {
                    for j in 0..o.cols {
                        a[i * o.cols + j] += v * o.a[k * o.cols + j];
                    }
                }
            }
        }
        Mat { rows: self.rows, cols: o.cols, a }
    }
}

/// Gaussian blur along one axis with edge replication.
fn blur_1d(n: usize) -> Mat {
    let taps: Vec<f64> = (-BLUR_RADIUS..=BLUR_RADIUS).map(|k| (-0.5 * (k * k) as f64 / (BLUR_SIGMA * BLUR_SIGMA)).exp()).collect();
    let total: f64 = taps.iter().sum();
    let mut m = Mat { rows: n, cols: n, a: vec![0.0; n * n] };
    for i in 0..n {
        for (t, k) in (-BLUR_RADIUS..=BLUR_RADIUS).enumerate() {
            let j = (i as isize + k).clamp(0, n as isize - 1) as usize;
            m.a[i * n + j] += taps[t] / total;
        }
    }
    m
}

/// Keeps every other sample.
fn decimate_1d(n: usize) -> Mat {
    let out = n.div_ceil(2);
    let mut m = Mat { rows: out, cols: n, a: vec![0.0; out * n] };
    (0..out).for_each(|i| m.a[i * n + 2 * i] = 1.0);
    m
}

/// Linear interpolation from `m` coarse samples spaced `factor` apart back
/// to `n` pixel centers, clamped at the ends.
fn upsample_1d(n: usize, m: usize, factor: f64) -> Mat {
    let mut out = Mat { rows: n, cols: m, a: vec![0.0; n * m] };
    for i in 0..n {
        let x = (i as f64 / factor).clamp(0.0, (m - 1) as f64);
        let x0 = (x.floor() as usize).min(m.saturating_sub(2));
        let f = x - x0 as f64;
        out.a[i * m + x0] += 1.0 - f;
        if m > 1 {
            out.a[i * m + x0 + 1] += f;
        }
    }
    out
}

/// Per-axis operator of one pyramid level: blur and decimate `level` times,
/// then interpolate back to full resolution.
fn level_1d(n: usize, level: usize) -> Mat {
    let mut m = Mat::identity(n);
    let mut size = n;
    for _ in 0..level {
        m = decimate_1d(size).mul(&blur_1d(size)).mul(&m);
        size = size.div_ceil(2);
    }
    upsample_1d(n, size, (1usize << level) as f64).mul(&m)
}

/// The fixed multi-scale encoder: level `l` is the image blurred and
/// halved `l` times then brought back to full size. Channels are stored
/// level-major: `[level 0 rgb, level 1 rgb, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    ys: Vec<Mat>,
    xs: Vec<Mat>,
}

impl Pyramid {
    pub fn new(height: usize, width: usize, levels: usize) -> Self {
        Pyramid {
            height,
            width,
            levels,
            ys: (0..levels).map(|l| level_1d(height, l)).collect(),
            xs: (0..levels).map(|l| level_1d(width, l)).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        3 * self.levels
    }

    /// `H*W x 3` image to `H*W x 3L` features.
    pub fn apply(&self, image: &[f64]) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels());
        let mut out = vec![0.0; h * w * c];
        let mut tmp = vec![0.0; h * w * 3];
        for l in 0..self.levels {
            let (my, mx) = (&self.ys[l], &self.xs[l]);
            // rows first: tmp[y, x', ch] = sum_x mx[x', x] img[y, x, ch]
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for y in 0..h {
                for xo in 0..w {
                    for x in 0..w {
                        let k = mx.a[xo * w + x];
                        if k != 0.0 {
                            for ch in 0..3 {
                                tmp[(y * w + xo) * 3 + ch] += k * image[(y * w + x) * 3 + ch];
                            }
                        }
                    }
                }
            }
            for yo in 0..h {
                for y in 0..h {
                    let k = my.a[yo * h + y];
                    if k != 0.0 {
                        for x in 0..w {
                            for ch in 0..3 {
                                out[(yo * w + x) * c + 3 * l + ch] += k * tmp[(y * w + x) * 3 + ch];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Transpose of [`Pyramid::apply`].
    pub fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels());
        let mut out = vec![0.0; h * w * 3];
        let mut tmp = vec![0.0; h * w * 3];
        for l in 0..self.levels {
            let (my, mx) = (&self.ys[l], &self.xs[l]);
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for yo in 0..h {
                for y in 0..h {
                    let k = my.a[yo * h + y];
                    if k != 0.0 {
                        for x in 0..w {
                            for ch in 0..3 {
                                tmp[(y * w + x) * 3 + ch] += k * g[(yo * w + x) * c + 3 * l + ch];
                            }
                        }
                    }
                }
            }
            for y in 0..h {
                for xo in 0..w {
                    for x in 0..w {
                        let k = mx.a[xo * w + x];
                        if k != 0.0 {
                            for ch in 0..3 {
                                out[(y * w + x) * 3 + ch] += k * tmp[(y * w + xo) * 3 + ch];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Records the pyramid of an `H*W x 3` image var.
    pub fn tape(self: &Rc<Self>, tape: &mut Tape, image: Var) -> Result<Var> {
        Error::check_len("image pixels", self.height * self.width, tape.rows(image))?;
        Error::check_len("image channels", 3, tape.cols(image))?;
        let y = self.apply(tape.value(image));
        let me = self.clone();
        Ok(tape.custom(&[image], y, self.height * self.width, self.channels(), move |g, _| {
            vec![Some(me.adjoint(g))]
        }))
    }
}

/// Bilinear taps at pixel coordinates `(u, v)`; pixel centers sit on
/// integers and coordinates clamp to the border. Returns the four
/// `(index, weight)` taps, the derivative of each weight with respect to
/// `u` and `v`, and the cell (for branch tracking).
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub du: [f64; 4],
    pub dv: [f64; 4],
    pub cell: (usize, usize, bool, bool),
}

pub(crate) fn bilinear_taps(u: f64, v: f64, height: usize, width: usize) -> Taps {
    let axis = |p: f64, n: usize| {
        let clamped = p.clamp(0.0, (n - 1) as f64);
        let inside = p == clamped;
        let p0 = (clamped.floor() as usize).min(n.saturating_sub(2));
        let p1 = (p0 + 1).min(n - 1);
        (p0, p1, clamped - p0 as f64, inside)
    };
    let (x0, x1, fx, in_x) = axis(u, width);
    let (y0, y1, fy, in_y) = axis(v, height);
    let dfx = if in_x { 1.0 } else { 0.0 };
    let dfy = if in_y { 1.0 } else { 0.0 };
    Taps {
        idx: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        du: [-dfx * (1.0 - fy), dfx * (1.0 - fy), -dfx * fy, dfx * fy],
        dv: [-(1.0 - fx) * dfy, -fx * dfy, (1.0 - fx) * dfy, fx * dfy],
        cell: (x0, y0, in_x, in_y),
    }
}

/// Bilinear lookup of one feature vector.
pub fn sample_pixel_aligned(features: &[f64], channels: usize, height: usize, width: usize, uv: [f64; 2]) -> Vec<f64> {
    let t = bilinear_taps(uv[0], uv[1], height, width);
    let mut out = vec![0.0; channels];
    for k in 0..4 {
        for c in 0..channels {
            out[c] += t.w[k] * features[t.idx[k] * channels + c];
        }
    }
    out
}

/// Samples an `H*W x C` map at `P x 2` pixel coordinates, giving `P x C`.
/// Differentiable in both the map and the coordinates.
pub fn sample_tape(tape: &mut Tape, map: Var, uv: Var, height: usize, width: usize) -> Result<Var> {
    Error::check_len("feature map pixels", height * width, tape.rows(map))?;
    Error::check_len("sample coordinate width", 2, tape.cols(uv))?;
    let c = tape.cols(map);
    let p = tape.rows(uv);
    let fm = tape.value_rc(map);
    let uvv = tape.value_rc(uv);
    let taps: Vec<Taps> = (0..p).map(|i| bilinear_taps(uvv[2 * i], uvv[2 * i + 1], height, width)).collect();
    let mut y = vec![0.0; p * c];
    let mut sig = Vec::with_capacity(p);
    for (i, t) in taps.iter().enumerate() {
        for k in 0..4 {
            for ch in 0..c {
                y[i * c + ch] += t.w[k] * fm[t.idx[k] * c + ch];
            }
        }
        sig.push(t.cell);
    }
    for (x0, y0, ix, iy) in sig {
        tape.note(((x0 as u64) << 34) ^ ((y0 as u64) << 4) ^ ((ix as u64) << 1) ^ iy as u64);
    }
    let n_map = height * width * c;
    Ok(tape.custom(&[map, uv], y, p, c, move |g, m| {
        let gm = m[0].then(|| {
            let mut out = vec![0.0; n_map];
            for (i, t) in taps.iter().enumerate() {
                for k in 0..4 {
                    for ch in 0..c {
                        out[t.idx[k] * c + ch] += t.w[k] * g[i * c + ch];
                    }
                }
            }
            out
        });
        let guv = m[1].then(|| {
            let mut out = vec![0.0; 2 * p];
            for (i, t) in taps.iter().enumerate() {
                for k in 0..4 {
                    let dot: f64 = (0..c).map(|ch| g[i * c + ch] * fm[t.idx[k] * c + ch]).sum();
                    out[2 * i] += t.du[k] * dot;
                    out[2 * i + 1] += t.dv[k] * dot;
                }
            }
            out
        });
        vec![gm, guv]
    }))
}

/// Pixel coordinates of `P x 3` world points. Depth is floored at `near`
/// so points behind the camera still land somewhere finite.
pub fn project_points_tape(tape: &mut Tape, points: Var, cam: &Camera, near: f64) -> Result<Var> {
    Error::check_len("point width", 3, tape.cols(points))?;
    let n = tape.rows(points);
    let x = tape.value_rc(points);
    let r = cam.rotation;
    let t = cam.translation;
    let mut y = Vec::with_capacity(2 * n);
    // per point: camera coords and whether the depth floor is active
    let mut cams = Vec::with_capacity(n);
    for i in 0..n {
        let m = r * crate::geometry::Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]) + t;
        let floored = m.z < near;
        let z = if floored { near } else { m.z };
        y.push(cam.fx * m.x / z + cam.cx);
        y.push(cam.fy * m.y / z + cam.cy);
        cams.push((m, z, floored));
    }
    tape.note_bools(cams.iter().map(|c| c.2));
    let (fx, fy) = (cam.fx, cam.fy);
    Ok(tape.custom(&[points], y, n, 2, move |g, _| {
        let mut out = Vec::with_capacity(3 * n);
        for (i, (m, z, floored)) in cams.iter().enumerate() {
            let (gu, gv) = (g[2 * i], g[2 * i + 1]);
            let gz = if *floored { 0.0 } else { -(gu * fx * m.x + gv * fy * m.y) / (z * z) };
            let gm = crate::geometry::Vec3::new(gu * fx / z, gv * fy / z, gz);
            let gp = r.transpose() * gm;
            out.extend_from_slice(&[gp.x, gp.y, gp.z]);
        }
        vec![Some(out)]
    }))
}
