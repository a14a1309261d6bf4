use crate::error::{Result, TensorError};

/// Dense row-major tensor of 64-bit floats with an optional gradient slot.
///
/// Shapes of rank 0 are scalars. Rank-1 tensors act as a single row wherever
/// an operation needs a matrix view, and tensors of rank > 2 are viewed as
/// `[product(leading dims), last dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the buffer and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor".into() });
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Callers are responsible for keeping them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        if self.data.len() == 1 {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// `(rows, cols)` under the matrix view described on the type.
    pub fn dims2(&self) -> (usize, usize) {
        matrix_dims(&self.shape)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    pub(crate) fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let err = Tensor::vector(vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matrix_view() {
        assert_eq!(matrix_dims(&[]), (1, 1));
        assert_eq!(matrix_dims(&[4]), (1, 4));
        assert_eq!(matrix_dims(&[2, 3, 4]), (6, 4));
    }
}
