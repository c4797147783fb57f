//! Forward-mode dual numbers for small per-primitive Jacobians.
//!
//! Kernels that run once per face or per Gaussian are written generically
//! over [`Real`]; the forward pass instantiates them with `f64` and the
//! backward pass with [`Dual`] to get the local Jacobian in one sweep.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    fn val(&self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;

    fn scale(self, k: f64) -> Self {
        self * Self::cst(k)
    }
}

impl Real for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn val(&self) -> f64 {
        *self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn scale(self, k: f64) -> Self {
        self * k
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Dual { v, d }
    }

    /// Seeds `vals[i]` with tangent `i`.
    pub fn vars(vals: [f64; N]) -> [Self; N] {
        let mut out = [Self::cst(0.0); N];
        for i in 0..N {
            out[i] = Self::var(vals[i], i);
        }
        out
    }

    #[inline]
    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= dv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] += o.d[i];
        }
        Dual { v: self.v + o.v, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] -= o.d[i];
        }
        Dual { v: self.v - o.v, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * o.d[i]) * inv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = -*x;
        }
        Dual { v: -self.v, d }
    }
}

impl<const N: usize> Real for Dual<N> {
    fn cst(x: f64) -> Self {
        Dual { v: x, d: [0.0; N] }
    }
    fn val(&self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        self.chain(t, 1.0 - t * t)
    }
    fn scale(self, k: f64) -> Self {
        self.chain(self.v * k, k)
    }
}

/// Transposed-Jacobian product: `sum_k grad_out[k] * d out[k] / d in`.
pub fn vjp<const N: usize>(outputs: &[Dual<N>], grad_out: &[f64]) -> [f64; N] {
    let mut g = [0.0; N];
    for (o, &w) in outputs.iter().zip(grad_out) {
        if w != 0.0 {
            for i in 0..N {
                g[i] += w * o.d[i];
            }
        }
    }
    g
}

// Small vector helpers over `Real`, row-major 3x3 matrices as [T; 9].

#[inline]
pub fn sub3<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn cross3<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn dot3<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn scale3<T: Real>(a: [T; 3], k: T) -> [T; 3] {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn matmul3<T: Real>(a: &[T; 9], b: &[T; 9]) -> [T; 9] {
    let mut out = [T::cst(0.0); 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c];
        }
    }
    out
}

/// Rodrigues rotation matrix of an axis-angle vector, smooth through zero.
pub fn axis_angle_matrix<T: Real>(r: [T; 3]) -> [T; 9] {
    let th2 = dot3(r, r);
    let (a, b) = if th2.val() < 1e-8 {
        // sin(t)/t and (1-cos(t))/t^2 as series in t^2
        (
            T::cst(1.0) - th2.scale(1.0 / 6.0) + th2 * th2.scale(1.0 / 120.0),
            T::cst(0.5) - th2.scale(1.0 / 24.0) + th2 * th2.scale(1.0 / 720.0),
        )
    } else {
        let th = th2.sqrt();
        (th.sin() / th, (T::cst(1.0) - th.cos()) / th2)
    };
    let [x, y, z] = r;
    let one = T::cst(1.0);
    [
        one - b * (y * y + z * z),
        b * x * y - a * z,
        b * x * z + a * y,
        b * x * y + a * z,
        one - b * (x * x + z * z),
        b * y * z - a * x,
        b * x * z - a * y,
        b * y * z + a * x,
        one - b * (x * x + y * y),
    ]
}

/// Edge-aligned face frame scaled by `sqrt(2 * area)`, row-major with the
/// three basis vectors as columns. Inputs are the three corners, flattened.
pub fn face_frame_kernel<T: Real>(v: &[T; 9]) -> [T; 9] {
    let p1 = [v[0], v[1], v[2]];
    let e1 = sub3([v[3], v[4], v[5]], p1);
    let e2 = sub3([v[6], v[7], v[8]], p1);
    let n = cross3(e1, e2);
    let n_len = dot3(n, n).sqrt();
    // |n| = 2 * area, so sigma = sqrt(|n|)
    let sigma = n_len.sqrt();
    let e1_len = dot3(e1, e1).sqrt();
    let a1 = scale3(e1, sigma / e1_len);
    let a3 = scale3(n, sigma / n_len);
    let nh = scale3(n, T::cst(1.0) / n_len);
    let eh = scale3(e1, T::cst(1.0) / e1_len);
    let a2 = scale3(cross3(nh, eh), sigma);
    [
        a1[0], a2[0], a3[0], //
        a1[1], a2[1], a3[1], //
        a1[2], a2[2], a3[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    #[test]
    fn dual_matches_finite_differences_on_rodrigues() {
        let r = [0.3, -0.7, 0.2];
        let d = axis_angle_matrix(Dual::<3>::vars(r));
        for k in 0..9 {
            for i in 0..3 {
                let num = fd(|x| axis_angle_matrix([x[0], x[1], x[2]])[k], &r, i);
                assert!((num - d[k].d[i]).abs() < 1e-7, "k={k} i={i}");
            }
        }
    }

    #[test]
    fn rodrigues_near_zero_is_smooth() {
        let d = axis_angle_matrix(Dual::<3>::vars([0.0; 3]));
        // dR/dr_z at zero is the generator of rotations about z
        assert!((d[1].d[2] + 1.0).abs() < 1e-12);
        assert!((d[3].d[2] - 1.0).abs() < 1e-12);
        assert_eq!(d[0].v, 1.0);
    }

    #[test]
    fn frame_kernel_derivatives() {
        let v = [0.1, 0.2, -0.3, 1.1, 0.4, 0.0, 0.2, 0.9, 0.5];
        let d = face_frame_kernel(&Dual::<9>::vars(v));
        for k in 0..9 {
            for i in 0..9 {
                let num = fd(
                    |x| face_frame_kernel(&<[f64; 9]>::try_from(x).unwrap())[k],
                    &v,
                    i,
                );
                assert!((num - d[k].d[i]).abs() < 1e-6);
            }
        }
    }
}
