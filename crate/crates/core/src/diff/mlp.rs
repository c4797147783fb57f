//! Small fully connected networks: affine layers with a leaky rectifier
//! between them and a plain affine output layer.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{matmul_at, matmul_bt, matmul_raw, Tape, Var};
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    /// Input width followed by each layer's output width.
    pub widths: Vec<usize>,
    pub slope: f64,
    pub zero_final: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, zero_final: bool) -> Self {
        MlpSpec { widths, slope: LEAKY_SLOPE, zero_final }
    }

    /// Three layers with the given hidden width.
    pub fn head(input: usize, hidden: usize, output: usize) -> Self {
        Self::new(vec![input, hidden, hidden, output], true)
    }

    pub fn layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers() < 1 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::arg("mlp widths", format!("{:?}", self.widths)));
        }
        Ok(())
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers())
            .flat_map(|l| [format!("{prefix}.l{l}.w"), format!("{prefix}.l{l}.b")])
            .collect()
    }

    /// Kaiming-uniform weights, zero biases; each array draws from its own
    /// stream keyed by name.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, seed: u64) -> Result<()> {
        self.validate()?;
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let wname = format!("{prefix}.l{l}.w");
            let w: Vec<f32> = if self.zero_final && l + 1 == self.layers() {
                vec![0.0; fan_in * fan_out]
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &wname));
                (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound) as f32)
                    .collect()
            };
            store.insert(&wname, vec![fan_in, fan_out], w)?;
            store.insert(&format!("{prefix}.l{l}.b"), vec![fan_out], vec![0.0; fan_out])?;
        }
        Ok(())
    }
}

/// FNV-1a of the name mixed with the run seed.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Pre-activation values of every layer plus the input, for the backward.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub batch: usize,
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
}

fn check_params(spec: &MlpSpec, params: &[&[f64]]) -> Result<()> {
    Error::check_len("mlp parameter arrays", 2 * spec.layers(), params.len())?;
    for l in 0..spec.layers() {
        Error::check_len("mlp weight", spec.widths[l] * spec.widths[l + 1], params[2 * l].len())?;
        Error::check_len("mlp bias", spec.widths[l + 1], params[2 * l + 1].len())?;
    }
    Ok(())
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Forward pass over `x` holding `batch` rows of `spec.input()` values.
/// `params` alternates weight (`in x out`, row-major) and bias arrays.
pub fn mlp_forward(spec: &MlpSpec, params: &[&[f64]], x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
    spec.validate()?;
    check_params(spec, params)?;
    if x.len() % spec.input() != 0 {
        return Err(Error::LengthMismatch { what: "mlp input", expected: spec.input(), got: x.len() });
    }
    let batch = x.len() / spec.input();
    let mut pre = Vec::with_capacity(spec.layers());
    let mut h = x.to_vec();
    for l in 0..spec.layers() {
        let (i, o) = (spec.widths[l], spec.widths[l + 1]);
        let mut z = matmul_raw(&h, params[2 * l], batch, i, o);
        for row in z.chunks_exact_mut(o) {
            row.iter_mut().zip(params[2 * l + 1]).for_each(|(v, b)| *v += b);
        }
        h = if l + 1 < spec.layers() {
            z.iter().map(|&v| leaky(v, spec.slope)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
    }
    Ok((h, MlpCache { batch, input: x.to_vec(), pre }))
}

/// Exact vector-Jacobian product of [`mlp_forward`]. Returns the parameter
/// gradients in the same order as `params`, then the input gradient.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &[&[f64]],
    cache: &MlpCache,
    grad_y: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    check_params(spec, params)?;
    Error::check_len("mlp output gradient", cache.batch * spec.output(), grad_y.len())?;
    let batch = cache.batch;
    let mut grads = vec![Vec::new(); 2 * spec.layers()];
    let mut g = grad_y.to_vec();
    for l in (0..spec.layers()).rev() {
        let (i, o) = (spec.widths[l], spec.widths[l + 1]);
        if l + 1 < spec.layers() {
            for (gv, &z) in g.iter_mut().zip(&cache.pre[l]) {
                if z <= 0.0 {
                    *gv *= spec.slope;
                }
            }
        }
        let input: Vec<f64> = if l == 0 {
            cache.input.clone()
        } else {
            cache.pre[l - 1].iter().map(|&v| leaky(v, spec.slope)).collect()
        };
        grads[2 * l] = matmul_at(&input, &g, batch, i, o);
        let mut gb = vec![0.0; o];
        for row in g.chunks_exact(o) {
            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        grads[2 * l + 1] = gb;
        g = matmul_bt(&g, params[2 * l], batch, o, i);
    }
    Ok((grads, g))
}

/// Records an MLP application on the tape. `params` are the weight and bias
/// vars in [`MlpSpec::param_names`] order.
pub fn mlp_tape(tape: &mut Tape, spec: &MlpSpec, params: &[Var], x: Var) -> Result<Var> {
    Error::check_len("mlp input width", spec.input(), tape.cols(x))?;
    let values: Vec<Rc<Vec<f64>>> = params.iter().map(|&p| tape.value_rc(p)).collect();
    let refs: Vec<&[f64]> = values.iter().map(|v| v.as_slice()).collect();
    let (y, cache) = mlp_forward(spec, &refs, tape.value(x))?;
    for z in &cache.pre[..cache.pre.len() - 1] {
        tape.note_bools(z.iter().map(|&v| v > 0.0));
    }
    let mut parents = params.to_vec();
    parents.push(x);
    let spec = spec.clone();
    let rows = cache.batch;
    let out = spec.output();
    Ok(tape.custom(&parents, y, rows, out, move |g, _| {
        let refs: Vec<&[f64]> = values.iter().map(|v| v.as_slice()).collect();
        let (gp, gx) = mlp_backward(&spec, &refs, &cache, g).expect("shapes checked in forward");
        gp.into_iter().map(Some).chain(std::iter::once(Some(gx))).collect()
    }))
}
