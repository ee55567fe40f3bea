use crate::error::{mismatch, Result};
use crate::scalar::Scalar;

/// A dense row-major array with an optional gradient buffer.
///
/// `shape` may be empty for a scalar; every extent is positive and the product
/// of the extents equals `data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(mismatch(op, format!("zero extent in {shape:?}")));
    }
    if numel(shape) != len {
        return Err(mismatch(
            op,
            format!("shape {shape:?} needs {} elements, got {len}", numel(shape)),
        ));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        check_shape("tensor", &shape, data.len())?;
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::new(shape, vec![S::zero(); n]).expect("zeros shape")
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = numel(&shape);
        Self::new(shape, vec![value; n]).expect("full shape")
    }

    pub fn scalar(value: S) -> Self {
        Self::new(vec![], vec![value]).expect("scalar shape")
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::lit(x)).collect())
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(mismatch(
                "accumulate_grad",
                format!("gradient of length {} for shape {:?}", g.len(), self.shape),
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Converts element type, dropping any gradient.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::lit(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape("reshape", &shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }
}
