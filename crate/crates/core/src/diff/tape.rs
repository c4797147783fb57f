//! A minimal reverse-mode tape over row-major `f64` matrices.
//!
//! Every node stores its value and a closure producing the gradients of its
//! parents from the gradient of its output. Nodes are appended in
//! evaluation order, so the reverse sweep is a single backwards pass.
//! Accumulation order is fixed, which makes gradients bitwise reproducible.

use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Maps the output gradient to one optional gradient per parent. The mask
/// says which parents need one.
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Vec<f64>>,
    rows: usize,
    cols: usize,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    signature: u64,
}

/// Gradients from one reverse sweep, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// The gradient, or zeros when nothing reached `v`.
    pub fn dense(&self, v: Var) -> Vec<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

pub(crate) fn mix(h: u64, x: u64) -> u64 {
    let mut z = h ^ x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 27)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every discrete branch taken while recording (clamps, kinks,
    /// sort orders, cell indices). Finite differences are only meaningful
    /// between evaluations with equal signatures.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn note(&mut self, x: u64) {
        self.signature = mix(self.signature, x);
    }

    pub fn note_bools(&mut self, bits: impl IntoIterator<Item = bool>) {
        let mut h = 0u64;
        for (i, b) in bits.into_iter().enumerate() {
            if b {
                h = mix(h, i as u64);
            }
        }
        self.note(h);
    }

    fn push(&mut self, node: Node) -> Var {
        debug_assert_eq!(node.value.len(), node.rows * node.cols);
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf shape");
        self.push(Node {
            value: Rc::new(value),
            rows,
            cols,
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        })
    }

    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape");
        self.push(Node {
            value: Rc::new(value),
            rows,
            cols,
            parents: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<Vec<f64>> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.nodes[v.0].value.len(), 1, "not a scalar");
        self.nodes[v.0].value[0]
    }

    /// Records an operation with a hand-written backward.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Vec<f64>,
        rows: usize,
        cols: usize,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Var {
        assert_eq!(value.len(), rows * cols, "custom op shape");
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            value: Rc::new(value),
            rows,
            cols,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        })
    }

    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.nodes[output.0].value.len(), 1, "backward needs a scalar output");
        self.backward_with(output, vec![1.0])
    }

    pub fn backward_with(&self, output: Var, seed: Vec<f64>) -> Grads {
        assert_eq!(seed.len(), self.nodes[output.0].value.len());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        let mut kept: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let mask: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
                let pg = bw(&g, &mask);
                debug_assert_eq!(pg.len(), node.parents.len());
                for ((&p, gp), &need) in node.parents.iter().zip(pg).zip(&mask) {
                    let Some(gp) = gp else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(gp.len(), self.nodes[p].value.len());
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&gp).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(gp),
                    }
                }
            }
            if node.parents.is_empty() {
                kept[i] = Some(g);
            }
        }
        Grads {
            grads: kept,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        }
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value_rc(a);
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let yr = Rc::new(y.clone());
        self.custom(&[a], y, r, c, move |g, _| {
            vec![Some(g.iter().zip(x.iter()).zip(yr.iter()).map(|((g, &x), &y)| g * df(x, y)).collect())]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (r, c) = self.shape(a);
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.custom(&[a, b], y, r, c, |g, _| vec![Some(g.to_vec()), Some(g.to_vec())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let (r, c) = self.shape(a);
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.custom(&[a, b], y, r, c, |g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let (r, c) = self.shape(a);
        let (xa, xb) = (self.value_rc(a), self.value_rc(b));
        let y = xa.iter().zip(xb.iter()).map(|(x, y)| x * y).collect();
        self.custom(&[a, b], y, r, c, move |g, m| {
            vec![
                m[0].then(|| g.iter().zip(xb.iter()).map(|(g, y)| g * y).collect()),
                m[1].then(|| g.iter().zip(xa.iter()).map(|(g, x)| g * x).collect()),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let y = self.value(a).iter().map(|x| x * k).collect();
        self.custom(&[a], y, r, c, move |g, _| vec![Some(g.iter().map(|v| v * k).collect())])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let y = self.value(a).iter().map(|x| x + k).collect();
        self.custom(&[a], y, r, c, |g, _| vec![Some(g.to_vec())])
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "bias shape");
        let b = self.value_rc(bias);
        let mut y = self.value(a).to_vec();
        for row in y.chunks_exact_mut(c) {
            row.iter_mut().zip(b.iter()).for_each(|(v, b)| *v += b);
        }
        self.custom(&[a, bias], y, r, c, move |g, m| {
            let gb = m[1].then(|| {
                let mut acc = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![Some(g.to_vec()), gb]
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let (xa, xb) = (self.value_rc(a), self.value_rc(b));
        let y = matmul_raw(&xa, &xb, m, k, n);
        self.custom(&[a, b], y, m, n, move |g, mask| {
            // dA = G B^T, dB = A^T G
            let ga = mask[0].then(|| matmul_bt(g, &xb, m, n, k));
            let gb = mask[1].then(|| matmul_at(&xa, g, m, k, n));
            vec![ga, gb]
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let bits: Vec<bool> = self.value(a).iter().map(|&x| x > 0.0).collect();
        self.note_bools(bits);
        self.unary(a, move |x| if x > 0.0 { x } else { slope * x }, move |x, _| if x > 0.0 { 1.0 } else { slope })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let bits: Vec<bool> = self.value(a).iter().map(|&x| x >= 0.0).collect();
        self.note_bools(bits);
        self.unary(a, f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.value(a).iter().sum();
        self.custom(&[a], vec![s], 1, 1, move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of a list of equally shaped vars, accumulated left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let (r, c) = self.shape(vars[0]);
        let mut y = vec![0.0; r * c];
        for &v in vars {
            assert_eq!(self.shape(v), (r, c), "add_all shapes");
            y.iter_mut().zip(self.value(v)).for_each(|(a, b)| *a += b);
        }
        let n = vars.len();
        self.custom(vars, y, r, c, move |g, _| (0..n).map(|_| Some(g.to_vec())).collect())
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.value(a).len(), rows * cols, "reshape size");
        let y = self.value(a).to_vec();
        self.custom(&[a], y, rows, cols, |g, _| vec![Some(g.to_vec())])
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Var {
        let rows = self.rows(vars[0]);
        let widths: Vec<usize> = vars.iter().map(|&v| self.cols(v)).collect();
        for &v in vars {
            assert_eq!(self.rows(v), rows, "concat rows");
        }
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in vars.iter().zip(&widths) {
                y.extend_from_slice(&self.value(v)[r * w..(r + 1) * w]);
            }
        }
        self.custom(vars, y, rows, total, move |g, mask| {
            let mut off = 0;
            widths
                .iter()
                .zip(mask)
                .map(|(&w, &need)| {
                    let out = need.then(|| {
                        let mut gv = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gv.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        gv
                    });
                    off += w;
                    out
                })
                .collect()
        })
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Var {
        let cols = self.cols(vars[0]);
        let lens: Vec<usize> = vars.iter().map(|&v| self.value(v).len()).collect();
        let mut y = Vec::new();
        for &v in vars {
            assert_eq!(self.cols(v), cols, "concat_rows cols");
            y.extend_from_slice(self.value(v));
        }
        let rows = y.len() / cols.max(1);
        self.custom(vars, y, rows, cols, move |g, _| {
            let mut off = 0;
            lens.iter()
                .map(|&l| {
                    let s = Some(g[off..off + l].to_vec());
                    off += l;
                    s
                })
                .collect()
        })
    }

    pub fn select_cols(&mut self, a: Var, start: usize, count: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start + count <= cols, "select_cols range");
        let x = self.value(a);
        let mut y = Vec::with_capacity(rows * count);
        for r in 0..rows {
            y.extend_from_slice(&x[r * cols + start..r * cols + start + count]);
        }
        self.custom(&[a], y, rows, count, move |g, _| {
            let mut ga = vec![0.0; rows * cols];
            for r in 0..rows {
                ga[r * cols + start..r * cols + start + count].copy_from_slice(&g[r * count..(r + 1) * count]);
            }
            vec![Some(ga)]
        })
    }

    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let (rows, cols) = self.shape(a);
        let x = self.value(a);
        let mut y = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            y.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let n = index.len();
        self.custom(&[a], y, n, cols, move |g, _| {
            let mut ga = vec![0.0; rows * cols];
            for (k, &i) in index.iter().enumerate() {
                ga[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .zip(&g[k * cols..(k + 1) * cols])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(ga)]
        })
    }

    /// Output row `i` is `sum_j w_ij a_j` over the sparse entries of row `i`.
    pub fn sparse_rows(&mut self, a: Var, weights: Rc<Vec<Vec<(usize, f64)>>>) -> Var {
        let (rows, cols) = self.shape(a);
        let x = self.value(a);
        let mut y = vec![0.0; weights.len() * cols];
        for (row, dst) in weights.iter().zip(y.chunks_exact_mut(cols.max(1))) {
            for &(j, w) in row {
                dst.iter_mut().zip(&x[j * cols..(j + 1) * cols]).for_each(|(d, s)| *d += w * s);
            }
        }
        let n = weights.len();
        self.custom(&[a], y, n, cols, move |g, _| {
            let mut ga = vec![0.0; rows * cols];
            for (row, src) in weights.iter().zip(g.chunks_exact(cols.max(1))) {
                for &(j, w) in row {
                    ga[j * cols..(j + 1) * cols].iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
                }
            }
            vec![Some(ga)]
        })
    }

    /// Per-row dot product, `r x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "row_dot shapes");
        let (rows, cols) = self.shape(a);
        let (xa, xb) = (self.value_rc(a), self.value_rc(b));
        let y = (0..rows)
            .map(|r| (0..cols).map(|c| xa[r * cols + c] * xb[r * cols + c]).sum())
            .collect();
        self.custom(&[a, b], y, rows, 1, move |g, m| {
            let mk = |other: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        out[r * cols + c] = g[r] * other[r * cols + c];
                    }
                }
                out
            };
            vec![m[0].then(|| mk(&xb)), m[1].then(|| mk(&xa))]
        })
    }

    /// Scales row `r` of `a` by `s[r]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(s), (rows, 1), "mul_rows scale shape");
        let (xa, xs) = (self.value_rc(a), self.value_rc(s));
        let mut y = xa.to_vec();
        for r in 0..rows {
            y[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= xs[r]);
        }
        self.custom(&[a, s], y, rows, cols, move |g, m| {
            let ga = m[0].then(|| {
                let mut out = g.to_vec();
                for r in 0..rows {
                    out[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= xs[r]);
                }
                out
            });
            let gs = m[1].then(|| {
                (0..rows)
                    .map(|r| (0..cols).map(|c| g[r * cols + c] * xa[r * cols + c]).sum())
                    .collect()
            });
            vec![ga, gs]
        })
    }

    /// Softmax of an `n x 1` column within each segment
    /// `offsets[s]..offsets[s + 1]`.
    pub fn segment_softmax(&mut self, a: Var, offsets: Rc<Vec<usize>>) -> Var {
        let n = self.value(a).len();
        assert_eq!(*offsets.last().unwrap_or(&0), n, "segment offsets");
        let x = self.value(a);
        let mut y = vec![0.0; n];
        for w in offsets.windows(2) {
            let seg = &x[w[0]..w[1]];
            let mx = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (k, &v) in seg.iter().enumerate() {
                let e = (v - mx).exp();
                y[w[0] + k] = e;
                total += e;
            }
            y[w[0]..w[1]].iter_mut().for_each(|v| *v /= total);
        }
        let yr = Rc::new(y.clone());
        self.custom(&[a], y, n, 1, move |g, _| {
            let mut ga = vec![0.0; n];
            for w in offsets.windows(2) {
                let dot: f64 = (w[0]..w[1]).map(|i| g[i] * yr[i]).sum();
                for i in w[0]..w[1] {
                    ga[i] = yr[i] * (g[i] - dot);
                }
            }
            vec![Some(ga)]
        })
    }

    /// Sums the rows of each segment into one output row.
    pub fn segment_sum(&mut self, a: Var, offsets: Rc<Vec<usize>>) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(*offsets.last().unwrap_or(&0), rows, "segment offsets");
        let x = self.value(a);
        let segs = offsets.len() - 1;
        let mut y = vec![0.0; segs * cols];
        for (s, w) in offsets.windows(2).enumerate() {
            for r in w[0]..w[1] {
                y[s * cols..(s + 1) * cols]
                    .iter_mut()
                    .zip(&x[r * cols..(r + 1) * cols])
                    .for_each(|(d, v)| *d += v);
            }
        }
        self.custom(&[a], y, segs, cols, move |g, _| {
            let mut ga = vec![0.0; rows * cols];
            for (s, w) in offsets.windows(2).enumerate() {
                for r in w[0]..w[1] {
                    ga[r * cols..(r + 1) * cols].copy_from_slice(&g[s * cols..(s + 1) * cols]);
                }
            }
            vec![Some(ga)]
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a (m x k) * b (k x n)`.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), &mut y);
    y
}

/// `g (m x n) * b^T` where `b` is `k x n`.
pub fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    gemm(m, n, k, g, (n, 1), b, (1, n), &mut out);
    out
}

/// `a^T (k x m) * g (m x n)` where `a` is `m x k`.
pub fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    gemm(k, m, n, a, (1, k), g, (n, 1), &mut out);
    out
}

/// `c = a * b` for an `m x k` by `k x n` product with explicit
/// (row, column) strides; `c` is row-major.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
