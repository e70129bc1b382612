//! Dense row-major tensors of real or complex doubles.

use num_complex::Complex64;

use crate::error::{AutodiffError, Result};

/// Backing storage. Complex values are `Complex64`, which is laid out as
/// interleaved `(re, im)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn real(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(AutodiffError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} does not hold {} values", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            storage: Storage::Real(data),
        })
    }

    pub fn complex(shape: &[usize], data: Vec<Complex64>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(AutodiffError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} does not hold {} values", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            storage: Storage::Complex(data),
        })
    }

    /// 1-D real tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            storage: Storage::Real(data),
        }
    }

    /// 1-D complex tensor.
    pub fn cvector(data: Vec<Complex64>) -> Self {
        Self {
            shape: vec![data.len()],
            storage: Storage::Complex(data),
        }
    }

    /// Rank-0 real tensor.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            storage: Storage::Real(vec![value]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            storage: Storage::Real(vec![0.0; numel_of(shape)]),
        }
    }

    pub fn czeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            storage: Storage::Complex(vec![Complex64::new(0.0, 0.0); numel_of(shape)]),
        }
    }

    /// Zeros with the same shape and dtype as `self`.
    pub fn zeros_like(&self) -> Self {
        if self.is_complex() {
            Self::czeros(&self.shape)
        } else {
            Self::zeros(&self.shape)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.shape)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_complex(&self) -> bool {
        matches!(self.storage, Storage::Complex(_))
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match &self.storage {
            Storage::Real(v) => Some(v),
            Storage::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&[Complex64]> {
        match &self.storage {
            Storage::Complex(v) => Some(v),
            Storage::Real(_) => None,
        }
    }

    pub(crate) fn real_mut(&mut self) -> Option<&mut Vec<f64>> {
        match &mut self.storage {
            Storage::Real(v) => Some(v),
            Storage::Complex(_) => None,
        }
    }

    pub(crate) fn complex_mut(&mut self) -> Option<&mut Vec<Complex64>> {
        match &mut self.storage {
            Storage::Complex(v) => Some(v),
            Storage::Real(_) => None,
        }
    }

    /// Real data, panicking on complex tensors. Convenience for callers that
    /// already know the dtype.
    pub fn data(&self) -> &[f64] {
        self.as_real().expect("tensor is complex")
    }

    pub fn cdata(&self) -> &[Complex64] {
        self.as_complex().expect("tensor is real")
    }

    pub fn into_real(self) -> Option<Vec<f64>> {
        match self.storage {
            Storage::Real(v) => Some(v),
            Storage::Complex(_) => None,
        }
    }

    pub fn into_complex(self) -> Option<Vec<Complex64>> {
        match self.storage {
            Storage::Complex(v) => Some(v),
            Storage::Real(_) => None,
        }
    }

    /// Value of a single-element real tensor.
    pub fn item(&self) -> Option<f64> {
        match &self.storage {
            Storage::Real(v) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.storage {
            Storage::Real(v) => v.iter().all(|x| x.is_finite()),
            Storage::Complex(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }

    pub(crate) fn with_shape(mut self, shape: &[usize]) -> Self {
        debug_assert_eq!(numel_of(shape), self.numel());
        self.shape = shape.to_vec();
        self
    }

    /// Squared Euclidean norm (sum of |z|^2 for complex data).
    pub fn norm_sqr(&self) -> f64 {
        match &self.storage {
            Storage::Real(v) => v.iter().map(|x| x * x).sum(),
            Storage::Complex(v) => v.iter().map(|z| z.norm_sqr()).sum(),
        }
    }

    /// In-place `self += other`, dtypes and shapes must agree.
    pub(crate) fn accumulate(&mut self, other: &Tensor) {
        match (&mut self.storage, &other.storage) {
            (Storage::Real(a), Storage::Real(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            (Storage::Complex(a), Storage::Complex(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            (Storage::Complex(a), Storage::Real(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    x.re += y;
                }
            }
            (Storage::Real(a), Storage::Complex(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y.re;
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)` extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
