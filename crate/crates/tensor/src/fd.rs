//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientComparison {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradientComparison {
    /// Largest per-input relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| relative_error(a, n))
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h`, for every element of every input.
pub fn compare_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradientComparison>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap_or(&[]).to_vec()).collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.data(loss)[0])
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        numeric.push(g);
    }
    Ok(GradientComparison { analytic, numeric })
}
