use fnftg_tensor::{Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_sums_to_one_over_unmasked(
        logits in prop::collection::vec(-50.0f64..50.0, 1..16),
        mask_bits in prop::collection::vec(any::<bool>(), 16),
    ) {
        let n = logits.len();
        let mut mask: Vec<bool> = mask_bits[..n].to_vec();
        mask[0] = true;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(logits).unwrap());
        let y = tape.softmax(x, Some(&mask)).unwrap();
        let out = tape.data(y);
        let total: f64 = out.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for (v, keep) in out.iter().zip(&mask) {
            if *keep { prop_assert!(*v > 0.0 || *v == 0.0) } else { prop_assert_eq!(*v, 0.0) }
        }
    }

    #[test]
    fn layer_norm_standardises(values in prop::collection::vec(-100.0f64..100.0, 2..24)) {
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let n = values.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(values).unwrap());
        let g = tape.constant(Tensor::full(vec![n], 1.0));
        let b = tape.constant(Tensor::zeros(vec![n]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.data(y);
        let mean = out.iter().sum::<f64>() / n as f64;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() <= 1e-10);
        prop_assert!((var - 1.0).abs() <= 1e-6);
    }
}
