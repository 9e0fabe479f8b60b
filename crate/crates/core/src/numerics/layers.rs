//! Differentiable building blocks recorded on a [`Tape`].
//!
//! Vectors are rows: a learned map `W` of shape `d_in x d_out` acts as
//! `x W`.

use rand::Rng;

use super::params::ParamSet;
use super::tape::{Bindings, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `x W (+ b)` for `x: n x d_in`, `W: d_in x d_out`, `b: d_out`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row_bias(y, b),
        None => Ok(y),
    }
}

/// Glorot-uniform initialised `d_in x d_out` matrix.
pub fn glorot(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
    Tensor::uniform(&[d_in, d_out], bound, rng)
}

/// Tape handles for one GRU cell.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

pub const GRU_PARAM_NAMES: [&str; 9] = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"];

impl GruVars {
    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        let g = |n: &str| b.get(&format!("{prefix}.{n}"));
        Ok(GruVars {
            w_z: g("w_z")?,
            u_z: g("u_z")?,
            b_z: g("b_z")?,
            w_r: g("w_r")?,
            u_r: g("u_r")?,
            b_r: g("b_r")?,
            w_h: g("w_h")?,
            u_h: g("u_h")?,
            b_h: g("b_h")?,
        })
    }
}

/// Randomly initialised GRU weights under `prefix`: input maps `d_in x d`,
/// recurrent maps `d x d`, zero biases.
pub fn gru_init(prefix: &str, d_in: usize, d: usize, rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    for gate in ["z", "r", "h"] {
        p.insert(format!("{prefix}.w_{gate}"), glorot(d_in, d, rng));
        p.insert(format!("{prefix}.u_{gate}"), glorot(d, d, rng));
        p.insert(format!("{prefix}.b_{gate}"), Tensor::zeros(&[d]));
    }
    p
}

/// All-zero GRU weights under `prefix`.
pub fn gru_zeros(prefix: &str, d_in: usize, d: usize) -> ParamSet {
    let mut p = ParamSet::new();
    for gate in ["z", "r", "h"] {
        p.insert(format!("{prefix}.w_{gate}"), Tensor::zeros(&[d_in, d]));
        p.insert(format!("{prefix}.u_{gate}"), Tensor::zeros(&[d, d]));
        p.insert(format!("{prefix}.b_{gate}"), Tensor::zeros(&[d]));
    }
    p
}

/// One GRU step applied row-wise to `h: n x d`, `x: n x d_in`:
///
/// ```text
/// z  = sigmoid(x W_z + h U_z + b_z)
/// r  = sigmoid(x W_r + h U_r + b_r)
/// h~ = tanh(x W_h + (r * h) U_h + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
pub fn gru_cell(tape: &mut Tape, h: Var, x: Var, p: &GruVars) -> Result<Var> {
    let (n, d) = tape.value(h).dims2();
    if tape.value(x).rows() != n {
        return Err(Error::dim("gru_cell", tape.shape(h), tape.shape(x)));
    }
    if tape.value(p.u_z).dims2() != (d, d) {
        return Err(Error::dim("gru_cell", tape.shape(h), tape.shape(p.u_z)));
    }
    let pre_z = gate_preact(tape, x, h, p.w_z, p.u_z, p.b_z)?;
    let z = tape.sigmoid(pre_z);
    let pre_r = gate_preact(tape, x, h, p.w_r, p.u_r, p.b_r)?;
    let r = tape.sigmoid(pre_r);
    let rh = tape.mul(r, h)?;
    let pre_c = gate_preact(tape, x, rh, p.w_h, p.u_h, p.b_h)?;
    let cand = tape.tanh(pre_c);
    // h + z * (h~ - h)
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

fn gate_preact(tape: &mut Tape, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    tape.add_row_bias(s, b)
}

/// Tape handles for multi-head attention: per-head query/key/value
/// projections packed column-wise into `d x d` matrices, and an output
/// projection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl AttentionVars {
    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        let g = |n: &str| b.get(&format!("{prefix}.{n}"));
        Ok(AttentionVars {
            w_q: g("w_q")?,
            w_k: g("w_k")?,
            w_v: g("w_v")?,
            w_o: g("w_o")?,
        })
    }
}

pub fn attention_init(prefix: &str, d: usize, rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    for name in ["w_q", "w_k", "w_v", "w_o"] {
        p.insert(format!("{prefix}.{name}"), glorot(d, d, rng));
    }
    p
}

pub fn attention_identity(prefix: &str, d: usize) -> ParamSet {
    let mut p = ParamSet::new();
    for name in ["w_q", "w_k", "w_v", "w_o"] {
        p.insert(format!("{prefix}.{name}"), Tensor::identity(d));
    }
    p
}

/// Scaled dot-product attention with `heads` heads of width `d / heads`,
/// concatenated and passed through the output projection. No residual.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(q).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    if tape.value(k).cols() != d || tape.value(v).cols() != d {
        return Err(Error::dim("multi_head_attention", tape.shape(q), tape.shape(k)));
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::dim("multi_head_attention", tape.shape(k), tape.shape(v)));
    }
    let width = d / heads;
    let scale = 1.0 / (width as f64).sqrt();
    let qp = tape.matmul(q, p.w_q)?;
    let kp = tape.matmul(k, p.w_k)?;
    let vp = tape.matmul(v, p.w_v)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(qp, h * width, width)?;
        let kh = tape.slice_cols(kp, h * width, width)?;
        let vh = tape.slice_cols(vp, h * width, width)?;
        let kt = tape.transpose(kh);
        let raw = tape.matmul(qh, kt)?;
        let scores = tape.scale(raw, scale);
        let weights = tape.softmax_rows(scores)?;
        // Sorted reduction over keys keeps the output exactly
        // equivariant under a reordering of the key/value rows.
        outs.push(tape.matmul_sorted(weights, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(cat, p.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_gru(h: &[f64], x: &[f64], params: &ParamSet) -> Tensor {
        let mut tape = Tape::new();
        let b = tape.bind(params).unwrap();
        let g = GruVars::bind(&b, "gru").unwrap();
        let h = tape.constant(Tensor::vector(h.to_vec()).as_row());
        let x = tape.constant(Tensor::vector(x.to_vec()).as_row());
        let out = gru_cell(&mut tape, h, x, &g).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn zero_gru_halves_the_state() {
        let p = gru_zeros("gru", 2, 2);
        let out = eval_gru(&[1.0, 1.0], &[0.3, -0.7], &p);
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn saturated_update_gate_takes_the_candidate() {
        let mut p = gru_zeros("gru", 2, 2);
        p.insert("gru.b_z", Tensor::vector(vec![100.0, 100.0]));
        let out = eval_gru(&[1.0, -2.0], &[0.3, -0.7], &p);
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gru_rejects_mismatched_rows() {
        let p = gru_zeros("gru", 2, 2);
        let mut tape = Tape::new();
        let b = tape.bind(&p).unwrap();
        let g = GruVars::bind(&b, "gru").unwrap();
        let h = tape.constant(Tensor::zeros(&[2, 2]));
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(gru_cell(&mut tape, h, x, &g), Err(Error::Dimension { .. })));
    }

    #[test]
    fn indivisible_heads_are_a_configuration_error() {
        let p = attention_identity("att", 3);
        let mut tape = Tape::new();
        let b = tape.bind(&p).unwrap();
        let a = AttentionVars::bind(&b, "att").unwrap();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            multi_head_attention(&mut tape, x, x, x, &a, 2),
            Err(Error::Config(_))
        ));
    }
}
