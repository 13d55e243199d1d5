use crate::{Error, Result};

/// Dense n-dimensional array of f64 in row-major order.
///
/// Invariant: `shape.iter().product() == data.len()`, enforced by every
/// constructor. `requires_grad` marks tensors bound as trainable leaves on a
/// tape; it is metadata and does not affect value semantics or equality.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n.max(0)], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![value; n], requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty() || self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!("item() on shape {:?}", self.shape)))
        }
    }

    /// Interprets the tensor as NCHW, the layout of all image data here.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {context}")))
        }
    }
}
