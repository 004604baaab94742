use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Scalar type the numeric core is generic over.
pub trait Scalar:
    Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + Default + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Parameters carry a gradient buffer of the same
/// shape; plain values do not.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn param(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(vec![F::zero(); t.data.len()]);
        Ok(t)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn param_has_grad_buffer() {
        let t = Tensor::<f64>::param(vec![2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(t.grad.as_ref().unwrap().len(), 4);
    }
}
