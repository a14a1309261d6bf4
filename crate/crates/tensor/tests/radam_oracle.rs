//! RAdam against a straight-line scalar transcription of the published update.

use fnftg_tensor::{radam_step, OptimizerState, ParamStore, RAdamConfig, Tensor};

fn oracle(mut theta: f64, lr: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut trace = Vec::new();
    for t in 1..=steps {
        let t = t as f64;
        let g = grad(theta);
        v = b2 * v + (1.0 - b2) * g * g;
        m = b1 * m + (1.0 - b1) * g;
        let m_hat = m / (1.0 - b1.powf(t));
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / (1.0 - b2.powf(t));
        if rho_t > 4.0 {
            let l = (1.0 - b2.powf(t)).sqrt() / (v.sqrt() + eps);
            let r_num = (rho_t - 4.0) * (rho_t - 2.0) * rho_inf;
            let r_den = (rho_inf - 4.0) * (rho_inf - 2.0) * rho_t;
            let r = (r_num / r_den).sqrt();
            theta -= lr * m_hat * r * l;
        } else {
            theta -= lr * m_hat;
        }
        trace.push(theta);
    }
    trace
}

#[test]
fn matches_scalar_transcription_over_ten_steps() {
    let grad = |x: f64| 2.0 * (x - 3.0) + 0.5 * x.sin();
    let lr = 0.05;
    let expected = oracle(0.4, lr, 10, grad);

    let mut ps = ParamStore::new();
    let id = ps.insert("theta", Tensor::vector(vec![0.4]).unwrap()).unwrap();
    let mut st = OptimizerState::new(&ps, RAdamConfig::default(), lr, 10);
    for want in expected {
        let x = ps.get(id).data()[0];
        radam_step(&mut st, &mut ps, &[vec![grad(x)]], lr).unwrap();
        let got = ps.get(id).data()[0];
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
    assert_eq!(st.step, 10);
}
