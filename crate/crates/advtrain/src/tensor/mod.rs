//! Dense tensors and reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major dense tensors, a handful of
//! neural-network primitives (`conv2d`, `maxpool2`, `dense`, `relu`,
//! softmax cross-entropy), and a single-writer [`Tape`] that records a
//! forward pass and replays it backwards to produce gradients for both
//! parameters and inputs. Input gradients are what make gradient-based
//! attacks possible.
//!
//! Everything is generic over the element type: `f32` for training speed,
//! `f64` where finite-difference gradient checks need the extra precision.

mod gemm;
mod tape;

pub use gemm::{gemm, transpose};
pub use tape::{Gradients, NodeId, Tape};

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scalar element type the engine can compute with.
pub trait Element:
    Copy
    + Default
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Size in bytes when serialized (4 for f32, 8 for f64).
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn sample_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $w:expr) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const BYTE_WIDTH: usize = $w;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline(always)]
            fn mul_add(self, a: Self, b: Self) -> Self {
                <$t>::mul_add(self, a, b)
            }
            #[inline(always)]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline(always)]
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            #[inline(always)]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline(always)]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes[..$w].try_into().unwrap())
            }
            fn sample_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Self {
                rng.gen_range(lo as $t..hi as $t)
            }
        }
    };
}

impl_element!(f32, 4);
impl_element!(f64, 8);

/// Padding mode for 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size equals input size (zero padding).
    Same,
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
}

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ZERO; numel],
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform random tensor in `[lo, hi)`, deterministic in the rng state.
    pub fn random_uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| E::sample_uniform(rng, lo, hi))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> E {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Reinterprets the flat data under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts elementwise into another precision.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn linf_distance(&self, other: &Tensor<E>) -> E {
        assert_eq!(self.shape, other.shape, "linf_distance shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(E::ZERO, E::max)
    }

    /// Euclidean distance between equally-shaped tensors.
    pub fn l2_distance(&self, other: &Tensor<E>) -> E {
        assert_eq!(self.shape, other.shape, "l2_distance shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a - b;
                d * d
            })
            .fold(E::ZERO, |acc, v| acc + v)
            .sqrt()
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, padding: Padding) -> Result<usize> {
    match padding {
        Padding::Same => Ok(input),
        Padding::Valid => {
            if input < kernel {
                Err(Error::Shape(format!(
                    "valid convolution needs input >= kernel, got {input} < {kernel}"
                )))
            } else {
                Ok(input - kernel + 1)
            }
        }
    }
}

/// Output spatial extent of a 2x2 max-pool with the given stride.
pub fn pool_out_dim(input: usize, stride: usize) -> Result<usize> {
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidInput(format!(
            "maxpool2 stride must be 1 or 2, got {stride}"
        )));
    }
    if input < 2 {
        return Err(Error::Shape(format!(
            "maxpool2 needs spatial dims >= 2, got {input}"
        )));
    }
    Ok((input - 2) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn shape_arithmetic() {
        assert_eq!(conv_out_dim(28, 5, Padding::Same).unwrap(), 28);
        assert_eq!(conv_out_dim(28, 5, Padding::Valid).unwrap(), 24);
        assert!(conv_out_dim(3, 5, Padding::Valid).is_err());
        assert_eq!(pool_out_dim(28, 2).unwrap(), 14);
        assert_eq!(pool_out_dim(28, 1).unwrap(), 27);
        assert!(pool_out_dim(28, 3).is_err());
        assert!(pool_out_dim(1, 2).is_err());
    }

    #[test]
    fn distances() {
        let a = Tensor::from_vec(vec![3], vec![0.0f32, 1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![3], vec![0.5f32, 1.0, 4.0]).unwrap();
        assert_eq!(a.linf_distance(&b), 2.0);
        let d = a.l2_distance(&b);
        assert!((d - (0.25f32 + 4.0).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn random_uniform_is_deterministic() {
        use rand::SeedableRng;
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::random_uniform(&[4, 4], &mut r1, -1.0, 1.0);
        let b = Tensor::<f32>::random_uniform(&[4, 4], &mut r2, -1.0, 1.0);
        assert_eq!(a.data(), b.data());
    }
}
