//! Attention blocks: fusion across source views and aggregation over the
//! 1-ring of the low-resolution mesh.

use std::rc::Rc;

use crate::diff::tape::{Tape, Var};
use crate::geometry::TriMesh;
use crate::{Error, Result};

/// Weights of the two-round fusion block.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Softmax across the columns of a `rows x n` var.
fn row_softmax(tape: &mut Tape, logits: Var) -> Var {
    let (rows, n) = tape.shape(logits);
    let flat = tape.reshape(logits, rows * n, 1);
    let offsets = Rc::new((0..=rows).map(|r| r * n).collect());
    let a = tape.segment_softmax(flat, offsets);
    tape.reshape(a, rows, n)
}

/// Attention-weighted sum of `values[m]` with weights in column `m` of `a`.
fn weighted_sum(tape: &mut Tape, a: Var, values: &[Var]) -> Var {
    let terms: Vec<Var> = values
        .iter()
        .enumerate()
        .map(|(m, &v)| {
            let w = tape.select_cols(a, m, 1);
            tape.mul_rows(v, w)
        })
        .collect();
    tape.add_all(&terms)
}

/// Fuses per-source features (`N` vars of `V x C`) into one `V x C` var.
/// Round one is parameter-free self-attention across sources; round two
/// attends from the vertex embedding (`V x C`) over the round-one outputs.
pub fn fuse_multi_source(tape: &mut Tape, sources: &[Var], embedding: Var, p: &FusionParams) -> Result<Var> {
    if sources.is_empty() {
        return Err(Error::arg("sources", "need at least one source"));
    }
    let shape = tape.shape(sources[0]);
    for &s in sources {
        Error::check_len("source feature width", shape.1, tape.cols(s))?;
        Error::check_len("source feature rows", shape.0, tape.rows(s))?;
    }
    Error::check_len("embedding width", shape.1, tape.cols(embedding))?;
    Error::check_len("embedding rows", shape.0, tape.rows(embedding))?;
    let inv = 1.0 / (shape.1 as f64).sqrt();

    let mut mixed = Vec::with_capacity(sources.len());
    for &q in sources {
        let cols: Vec<Var> = sources.iter().map(|&k| tape.row_dot(q, k)).collect();
        let logits = tape.concat_cols(&cols);
        let logits = tape.scale(logits, inv);
        let a = row_softmax(tape, logits);
        mixed.push(weighted_sum(tape, a, sources));
    }

    let keys: Vec<Var> = mixed.iter().map(|&y| tape.matmul(y, p.wk)).collect();
    let values: Vec<Var> = mixed.iter().map(|&y| tape.matmul(y, p.wv)).collect();
    let cols: Vec<Var> = keys.iter().map(|&k| tape.row_dot(embedding, k)).collect();
    let logits = tape.concat_cols(&cols);
    let logits = tape.scale(logits, inv);
    let a = row_softmax(tape, logits);
    let pooled = weighted_sum(tape, a, &values);
    let out = tape.matmul(pooled, p.wo);
    Ok(tape.add_row(out, p.bo))
}

/// One round of mesh attention.
#[derive(Clone, Copy, Debug)]
pub struct MeshRoundParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    /// Relative position encoding, `3 x C`.
    pub wp: Var,
    pub wo: Var,
}

/// Each vertex followed by its sorted 1-ring, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhoods {
    pub center: Rc<Vec<usize>>,
    pub other: Rc<Vec<usize>>,
    pub offsets: Rc<Vec<usize>>,
}

impl Neighborhoods {
    pub fn new(mesh: &TriMesh) -> Self {
        let mut center = Vec::new();
        let mut other = Vec::new();
        let mut offsets = vec![0];
        for (i, ring) in mesh.neighbors().into_iter().enumerate() {
            center.push(i);
            other.push(i);
            for j in ring {
                center.push(i);
                other.push(j);
            }
            offsets.push(other.len());
        }
        Neighborhoods { center: Rc::new(center), other: Rc::new(other), offsets: Rc::new(offsets) }
    }

    pub fn vertex_count(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Residual 1-ring attention over the low-resolution mesh. `positions` are
/// the canonical vertices (`V x 3`) used for the relative encoding.
pub fn mesh_aggregate(
    tape: &mut Tape,
    features: Var,
    positions: Var,
    hoods: &Neighborhoods,
    rounds: &[MeshRoundParams],
) -> Result<Var> {
    let (v, c) = tape.shape(features);
    Error::check_len("vertex features", hoods.vertex_count(), v)?;
    Error::check_len("vertex positions", v, tape.rows(positions))?;
    let inv = 1.0 / (c as f64).sqrt();
    let pc = tape.gather_rows(positions, hoods.center.clone());
    let po = tape.gather_rows(positions, hoods.other.clone());
    let rel = tape.sub(po, pc);
    let mut x = features;
    for p in rounds {
        let q = tape.matmul(x, p.wq);
        let k = tape.matmul(x, p.wk);
        let val = tape.matmul(x, p.wv);
        let enc = tape.matmul(rel, p.wp);
        let qe = tape.gather_rows(q, hoods.center.clone());
        let ke = tape.gather_rows(k, hoods.other.clone());
        let ke = tape.add(ke, enc);
        let logits = tape.row_dot(qe, ke);
        let logits = tape.scale(logits, inv);
        let a = tape.segment_softmax(logits, hoods.offsets.clone());
        let ve = tape.gather_rows(val, hoods.other.clone());
        let ve = tape.add(ve, enc);
        let msgs = tape.mul_rows(ve, a);
        let agg = tape.segment_sum(msgs, hoods.offsets.clone());
        let upd = tape.matmul(agg, p.wo);
        x = tape.add(x, upd);
    }
    Ok(x)
}
