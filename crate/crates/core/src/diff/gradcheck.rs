//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::collections::BTreeMap;

use super::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates whose perturbation changed a discrete branch.
    pub skipped: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `grad` with central differences of a plain function. `same_branch`
/// receives `x + h e_i`, `x - h e_i` and may veto a coordinate.
pub fn gradcheck_fn(
    f: impl Fn(&[f64]) -> f64,
    grad: &[f64],
    x: &[f64],
    h: f64,
    coords: &[usize],
    same_branch: impl Fn(&[f64], &[f64]) -> bool,
) -> GradcheckReport {
    let mut report = GradcheckReport { max_rel_err: 0.0, worst: None, checked: 0, skipped: 0 };
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    for &i in coords {
        xp[i] = x[i] + h;
        xm[i] = x[i] - h;
        if same_branch(&xp, &xm) {
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let e = rel_err(grad[i], num);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(i);
            }
        } else {
            report.skipped += 1;
        }
        xp[i] = x[i];
        xm[i] = x[i];
    }
    report
}

/// Fixed projection weights that turn a vector output into a scalar.
pub fn projection_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9c4e);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn project(tape: &mut Tape, y: Var, w: &[f64]) -> Var {
    let (r, c) = tape.shape(y);
    let wv = tape.constant(w.to_vec(), r, c);
    let p = tape.mul(y, wv);
    tape.sum(p)
}

/// Checks the tape gradient of `build` at `x` (shape `rows x cols`). Vector
/// outputs are reduced with fixed random weights. Coordinates where the
/// perturbed evaluation records a different branch signature are skipped.
pub fn gradcheck(
    build: impl Fn(&mut Tape, Var) -> Var,
    x: &[f64],
    rows: usize,
    cols: usize,
    h: f64,
    coords: Option<&[usize]>,
) -> GradcheckReport {
    let eval = |x: &[f64], w: Option<&[f64]>| -> (f64, u64, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let input = tape.leaf(x.to_vec(), rows, cols);
        let y = build(&mut tape, input);
        let n = tape.value(y).len();
        let weights = w.map(|w| w.to_vec()).unwrap_or_else(|| projection_weights(n, 0));
        let sig = tape.signature();
        let s = project(&mut tape, y, &weights);
        (tape.scalar(s), sig, weights, if w.is_none() { tape.backward(s).dense(input) } else { Vec::new() })
    };
    let (_, base_sig, weights, grad) = eval(x, None);
    let all: Vec<usize> = (0..x.len()).collect();
    let coords = coords.unwrap_or(&all);
    gradcheck_fn(
        |p| eval(p, Some(&weights)).0,
        &grad,
        x,
        h,
        coords,
        |xp, xm| eval(xp, Some(&weights)).1 == base_sig && eval(xm, Some(&weights)).1 == base_sig,
    )
}

/// Named arrays in `f64` with their shapes, for checks that perturb
/// parameters directly.
pub type NamedArrays = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

/// `(rows, cols)` a shape is recorded with: vectors become one row, higher
/// ranks keep the leading dimension.
pub fn record_shape(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
        [] => (1, 1),
    }
}

pub fn record_arrays(tape: &mut Tape, arrays: &NamedArrays, trainable: bool) -> BTreeMap<String, Var> {
    arrays
        .iter()
        .map(|(name, (shape, data))| {
            let (r, c) = record_shape(shape);
            let v = if trainable { tape.leaf(data.clone(), r, c) } else { tape.constant(data.clone(), r, c) };
            (name.clone(), v)
        })
        .collect()
}

/// Differences smaller than this many ulps of the evaluated values are
/// rounding noise, not signal.
pub const ROUNDOFF_ULPS: f64 = 64.0;

/// Whether a central difference resolves anything above rounding noise.
pub fn resolvable(fp: f64, fm: f64) -> bool {
    (fp - fm).abs() > ROUNDOFF_ULPS * f64::EPSILON * (fp.abs() + fm.abs())
}

/// Checks the gradient of a scalar `build` with respect to the listed
/// `(array, index)` coordinates, skipping those whose perturbation changes
/// the recorded branch signature or moves the output by less than rounding
/// noise.
pub fn gradcheck_named(
    arrays: &NamedArrays,
    build: impl Fn(&mut Tape, &BTreeMap<String, Var>) -> Var,
    coords: &[(String, usize)],
    h: f64,
) -> GradcheckReport {
    let eval = |a: &NamedArrays| -> (f64, u64) {
        let mut tape = Tape::new();
        let vars = record_arrays(&mut tape, a, false);
        let y = build(&mut tape, &vars);
        (tape.scalar(y), tape.signature())
    };
    let mut tape = Tape::new();
    let vars = record_arrays(&mut tape, arrays, true);
    let y = build(&mut tape, &vars);
    let base_sig = tape.signature();
    let grads = tape.backward(y);
    let mut report = GradcheckReport { max_rel_err: 0.0, worst: None, checked: 0, skipped: 0 };
    let mut work = arrays.clone();
    for (k, (name, i)) in coords.iter().enumerate() {
        let x0 = arrays[name].1[*i];
        work.get_mut(name).unwrap().1[*i] = x0 + h;
        let (fp, sp) = eval(&work);
        work.get_mut(name).unwrap().1[*i] = x0 - h;
        let (fm, sm) = eval(&work);
        work.get_mut(name).unwrap().1[*i] = x0;
        if sp != base_sig || sm != base_sig || !resolvable(fp, fm) {
            report.skipped += 1;
            continue;
        }
        let analytic = grads.get(vars[name]).map_or(0.0, |g| g[*i]);
        let e = rel_err(analytic, (fp - fm) / (2.0 * h));
        report.checked += 1;
        if report.worst.is_none() || e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some(k);
        }
    }
    report
}

/// Up to `per_array` random coordinates of every array.
pub fn sample_coords(arrays: &NamedArrays, per_array: usize, seed: u64) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, (_, data)) in arrays {
        if data.len() <= per_array {
            out.extend((0..data.len()).map(|i| (name.clone(), i)));
        } else {
            out.extend((0..per_array).map(|_| (name.clone(), rng.random_range(0..data.len()))));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let r = gradcheck(
            |t, x| {
                let a = t.constant(vec![1.0, -2.0, 0.5, 3.0, 0.25, -1.0], 3, 2);
                t.matmul(x, a)
            },
            &[0.3, -0.2, 1.5],
            1,
            3,
            DEFAULT_STEP,
            None,
        );
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn sum_of_squares() {
        let x: Vec<f64> = projection_weights(10, 4);
        let r = gradcheck(
            |t, x| {
                let s = t.square(x);
                t.sum(s)
            },
            &x,
            10,
            1,
            DEFAULT_STEP,
            None,
        );
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn tape_primitives() {
        let x = projection_weights(12, 9);
        let r = gradcheck(
            |t, x| {
                let a = t.tanh(x);
                let b = t.sigmoid(x);
                let c = t.mul(a, b);
                let d = t.exp(c);
                let e = t.leaky_relu(d, 0.01);
                let e = t.reshape(e, 4, 3);
                let w = t.constant(projection_weights(12, 2), 4, 3);
                let g = t.add(e, w);
                let bias = t.constant(vec![0.1, 0.2, 0.3], 1, 3);
                let h = t.add_row(g, bias);
                let sel = t.select_cols(h, 1, 2);
                let cat = t.concat_cols(&[sel, g]);
                let idx = std::rc::Rc::new(vec![3, 0, 0, 2]);
                let gat = t.gather_rows(cat, idx);
                let dots = t.row_dot(gat, gat);
                let off = std::rc::Rc::new(vec![0, 1, 4]);
                let sm = t.segment_softmax(dots, off.clone());
                let scaled = t.mul_rows(gat, sm);
                let seg = t.segment_sum(scaled, off);
                let sp = t.sparse_rows(seg, std::rc::Rc::new(vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 2.0)]]));
                t.square(sp)
            },
            &x,
            12,
            1,
            DEFAULT_STEP,
            None,
        );
        assert!(r.passes(1e-6), "{r:?}");
    }
}
