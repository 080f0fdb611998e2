//! Dense row-major tensors and the structured errors of the math stack.

use std::error::Error;
use std::fmt;

use crate::elem::Elem;

/// Errors raised by tensor construction, graph operations, and backward.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Payload length does not match the product of the extents.
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    /// An operation received extents it cannot combine. `shapes` lists the
    /// offending operand extents in argument order.
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },
    /// An operation received a value outside its domain (e.g. a negative
    /// input to `x·ln x`, a zero-sum row to normalize).
    Domain { op: &'static str, detail: String },
    /// `backward` was asked to differentiate a non-scalar value.
    NonScalarLoss { shape: Vec<usize> },
    /// A value that must stay finite became NaN or infinite.
    NonFinite { op: &'static str },
    /// A zero-norm centroid cannot be direction-normalized.
    DegenerateCentroid { row: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength {
                shape,
                expected,
                got,
            } => write!(
                f,
                "data length {got} does not match shape {shape:?} (expected {expected})"
            ),
            TensorError::Shape { op, shapes, detail } => {
                write!(f, "{op}: incompatible shapes {shapes:?}: {detail}")
            }
            TensorError::Domain { op, detail } => write!(f, "{op}: {detail}"),
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value"),
            TensorError::DegenerateCentroid { row } => {
                write!(f, "centroid row {row} has zero norm and cannot be normalized")
            }
        }
    }
}

impl Error for TensorError {}

/// Builds a [`TensorError::Shape`] with the offending extents attached.
pub(crate) fn shape_error(
    op: &'static str,
    shapes: &[&[usize]],
    detail: impl Into<String>,
) -> TensorError {
    TensorError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        detail: detail.into(),
    }
}

/// A dense row-major tensor. A scalar is the rank-0 tensor (empty shape,
/// one element).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Elem> {
    shape: Vec<usize>,
    data: Vec<E>,
    pub requires_grad: bool,
    /// Populated for parameter leaves by a backward pass; same length as `data`.
    pub grad: Option<Vec<E>>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self, TensorError> {
        let shape = shape.to_vec();
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product::<usize>();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product::<usize>();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n = shape.iter().product::<usize>();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The scalar value of a one-element tensor.
    pub fn item(&self) -> E {
        debug_assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Reinterprets the payload under a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Errors if any element is NaN or infinite; `op` names the producer.
    pub fn ensure_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Converts the payload elementwise; shape and flags carry over.
    pub fn cast<T: Elem>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::lit(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_length() {
        let err = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::DataLength {
                shape: vec![2, 3],
                expected: 6,
                got: 5
            }
        );
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(4.0f64);
        assert!(s.shape().is_empty());
        assert_eq!(s.numel(), 1);
        assert!(s.is_scalar());
        assert_eq!(s.item(), 4.0);
    }

    #[test]
    fn reshape_preserves_data_and_checks_count() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let r = t.clone().reshaped(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn ensure_finite_flags_nan() {
        let mut t = Tensor::<f32>::zeros(&[2]);
        assert!(t.ensure_finite("test").is_ok());
        t.data_mut()[1] = f32::NAN;
        assert_eq!(
            t.ensure_finite("test").unwrap_err(),
            TensorError::NonFinite { op: "test" }
        );
    }

    #[test]
    fn cast_round_trips_between_precisions() {
        let t = Tensor::<f32>::from_fn(&[3], |i| 0.5 * i as f32);
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(back.data(), t.data());
    }
}
