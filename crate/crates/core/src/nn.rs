//! Building blocks shared by the two encoders.

use fnftg_tensor::{ParamId, ParamStore, Result, Tape, Tensor, Var};
use rand::Rng;

/// Uniform `±sqrt(6 / (fan_in + fan_out))` initialisation of a `rows × cols` matrix.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

pub(crate) fn add_matrix<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: String,
    rows: usize,
    cols: usize,
) -> Result<ParamId> {
    store.insert(name, xavier(rng, rows, cols))
}

/// Gain initialised to one and bias to zero.
pub(crate) fn add_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<(ParamId, ParamId)> {
    let g = store.insert(format!("{prefix}.gain"), Tensor::full(vec![d], 1.0))?;
    let b = store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![d]))?;
    Ok((g, b))
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| fnftg_tensor::TensorError::shape("parameters", format!("missing parameter `{name}`")))
}

pub const LN_EPS: f64 = 1e-5;

/// `(silu(a) ⊙ b) · W_out` where `[a | b] = x · W_in` and `W_in` is `d × 2f`.
pub fn swiglu_ffn(tape: &mut Tape, x: Var, w_in: Var, w_out: Var) -> Result<Var> {
    let f = tape.shape(w_out)[0];
    if tape.shape(w_in).last() != Some(&(2 * f)) {
        return Err(fnftg_tensor::TensorError::shape(
            "swiglu_ffn",
            format!("W_in {:?} is not d × 2·{f}", tape.shape(w_in)),
        ));
    }
    let u = tape.matmul(x, w_in)?;
    let a = tape.slice_cols(u, 0, f)?;
    let b = tape.slice_cols(u, f, f)?;
    let a = tape.silu(a)?;
    let gated = tape.mul(a, b)?;
    tape.matmul(gated, w_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_w_in_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.1, -0.7]).unwrap());
        let w_in = tape.constant(Tensor::zeros(vec![3, 8]));
        let w_out = tape.constant(Tensor::full(vec![4, 3], 0.3));
        let y = swiglu_ffn(&mut tape, x, w_in, w_out).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_half_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap());
        // a-half nonzero, b-half zero
        let w_in = tape.constant(Tensor::matrix(2, 4, vec![1.0, 2.0, 0.0, 0.0, -1.0, 0.5, 0.0, 0.0]).unwrap());
        let w_out = tape.constant(Tensor::full(vec![2, 2], 1.0));
        let y = swiglu_ffn(&mut tape, x, w_in, w_out).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inconsistent_width_is_a_shape_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2]));
        let w_in = tape.constant(Tensor::zeros(vec![2, 6]));
        let w_out = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(swiglu_ffn(&mut tape, x, w_in, w_out).is_err());
    }
}
