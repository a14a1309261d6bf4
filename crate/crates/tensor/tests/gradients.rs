//! Analytic gradients of every differentiable primitive against central
//! finite differences (h = 1e-5).

use std::sync::Arc;

use fnftg_tensor::fd::compare_gradients;
use fnftg_tensor::{AttentionGroup, AttentionLayout, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let cmp = compare_gradients(inputs, H, f).unwrap();
    let err = cmp.max_relative_error();
    assert!(err < TOL, "{name}: relative error {err:e}");
    err
}

#[test]
fn matmul_gradient_of_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 3]);
    let b = random(&mut rng, &[3, 3]);
    let cmp = compare_gradients(&[a, b], H, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        t.sum(c)
    })
    .unwrap();
    let err = fnftg_tensor::fd::relative_error(&cmp.analytic[0], &cmp.numeric[0]);
    assert!(err < 1e-6, "dA relative error {err:e}");
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[2, 5]);
    let b = random(&mut rng, &[2, 5]);
    let row = random(&mut rng, &[5]);
    check("add", &[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 9)
    });
    check("sub", &[a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y, 9)
    });
    check("mul", &[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, 9)
    });
    check("add_row", &[a.clone(), row], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        weighted_sum(t, y, 9)
    });
    check("scale+add_scalar", &[a.clone()], |t, v| {
        let y = t.scale(v[0], -1.7)?;
        let y = t.add_scalar(y, 0.3)?;
        weighted_sum(t, y, 9)
    });
    check("silu", &[a.clone()], |t, v| {
        let y = t.silu(v[0])?;
        weighted_sum(t, y, 9)
    });
    // Inputs kept away from the kinks of relu and abs.
    let off_kink = Tensor::new(vec![6], vec![0.3, -0.4, 0.9, -1.2, 0.05, -0.07]).unwrap();
    check("relu", &[off_kink.clone()], |t, v| {
        let y = t.relu(v[0])?;
        weighted_sum(t, y, 9)
    });
    check("abs", &[off_kink], |t, v| {
        let y = t.abs(v[0])?;
        weighted_sum(t, y, 9)
    });
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 6]);
    let g = random(&mut rng, &[6]);
    let b = random(&mut rng, &[6]);
    check("layer_norm", &[x, g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 4)
    });
}

#[test]
fn softmax_gradient_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 4]);
    let mask = vec![true, true, false, true, true, false, false, true, true, true, true, true];
    check("softmax", &[x], |t, v| {
        let y = t.softmax(v[0], Some(&mask))?;
        weighted_sum(t, y, 5)
    });
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[4, 3]);
    let b = random(&mut rng, &[2, 3]);
    check("gather_rows", &[a.clone()], |t, v| {
        let y = t.gather_rows(v[0], &[3, 0, 3, 1])?;
        weighted_sum(t, y, 6)
    });
    check("concat_rows", &[a.clone(), b], |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        weighted_sum(t, y, 6)
    });
    check("slice_cols", &[a.clone()], |t, v| {
        let y = t.slice_cols(v[0], 1, 2)?;
        weighted_sum(t, y, 6)
    });
    check("sum_rows", &[a.clone()], |t, v| {
        let y = t.sum_rows(v[0])?;
        weighted_sum(t, y, 6)
    });
    check("reshape", &[a], |t, v| {
        let y = t.reshape(v[0], vec![2, 6])?;
        let z = t.silu(y)?;
        weighted_sum(t, z, 6)
    });
}

#[test]
fn swiglu_feed_forward_gradient() {
    // d = 4, f = 8
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[4]);
    let w_in = random(&mut rng, &[4, 16]);
    let w_out = random(&mut rng, &[8, 4]);
    let cmp = compare_gradients(&[x, w_in, w_out], H, |t, v| {
        let u = t.matmul(v[0], v[1])?;
        let a = t.slice_cols(u, 0, 8)?;
        let b = t.slice_cols(u, 8, 8)?;
        let a = t.silu(a)?;
        let gated = t.mul(a, b)?;
        let y = t.matmul(gated, v[2])?;
        weighted_sum(t, y, 7)
    })
    .unwrap();
    assert!(cmp.max_relative_error() < 1e-5, "{:e}", cmp.max_relative_error());
}

#[test]
fn modulated_attention_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows = 5;
    let d = 4;
    let q = random(&mut rng, &[rows, d]);
    let k = random(&mut rng, &[rows, d]);
    let v = random(&mut rng, &[rows, d]);
    let m = random(&mut rng, &[3, d]);
    let mut modulation = vec![None; 9];
    modulation[1] = Some(0);
    modulation[3] = Some(1);
    modulation[2] = Some(2);
    let layout = Arc::new(AttentionLayout {
        heads: 2,
        groups: vec![
            AttentionGroup { start: 0, len: 3, key_mask: None, modulation: Some(modulation) },
            AttentionGroup { start: 3, len: 2, key_mask: Some(vec![true, false]), modulation: None },
        ],
    });
    check("attention", &[q, k, v, m], |t, vars| {
        let y = t.attention(vars[0], vars[1], vars[2], Some(vars[3]), layout.clone())?;
        weighted_sum(t, y, 8)
    });
}
