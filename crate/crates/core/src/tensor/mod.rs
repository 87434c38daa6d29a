//! Dense tensor storage and a minimal reverse-mode differentiation tape.
//!
//! Tensors are flat row-major arrays of a floating element type. Training
//! runs in `f32`; the same code instantiates with `f64` for the
//! finite-difference verification mode used by [`gradcheck`].

pub mod checkpoint;
pub mod gradcheck;
pub mod tape;

use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use tape::{Tape, ValueId};

/// Floating element type of tensors: `f32` for training, `f64` for the
/// double-precision verification mode.
pub trait Element: Float + Debug + Display + Default + Send + Sync + 'static {}

impl Element for f32 {}
impl Element for f64 {}

/// Converts an `f64` literal into the active element type.
#[inline]
pub(crate) fn elem<T: Element>(x: f64) -> T {
    T::from(x).expect("literal representable in element type")
}

/// How to populate a freshly allocated tensor.
#[derive(Clone, Copy, Debug)]
pub enum Fill {
    /// Every element set to the given value.
    Const(f64),
    /// Deterministic uniform draws in `[lo, hi)` from a stream seeded by
    /// `seed`; the same `(seed, shape)` always yields the same values.
    Uniform { seed: u64, lo: f64, hi: f64 },
}

/// Dense N-dimensional array with row-major layout. Feature maps use the
/// axis order `[H, W, S, C]` with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    /// Allocates a tensor of the given shape. Every extent must be >= 1.
    pub fn new(shape: &[usize], fill: Fill) -> Result<Self> {
        let len = checked_len(shape)?;
        let data = match fill {
            Fill::Const(v) => vec![elem(v); len],
            Fill::Uniform { seed, lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::InvalidArg(format!(
                        "uniform fill needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| elem(rng.random_range(lo..hi))).collect()
            }
        };
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Fill::Const(0.0))
    }

    /// Wraps an existing flat buffer; its length must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = checked_len(shape)?;
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, buffer holds {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Gradient populated by [`Tape::backward`], if any.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, g: Vec<T>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    /// The sole element of a shape-`[1]` tensor.
    pub fn scalar_value(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same data under a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }
}

impl Tensor<f64> {
    /// Lossy narrowing used when persisting double-precision values.
    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
            grad: None,
        }
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f64).collect(),
            grad: None,
        }
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("empty shape".into()));
    }
    let mut len = 1usize;
    for &d in shape {
        if d == 0 {
            return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
        }
        len = len.checked_mul(d).ok_or_else(|| {
            Error::InvalidShape(format!("shape {shape:?} overflows element count"))
        })?;
    }
    Ok(len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fill() {
        let t = Tensor::<f32>::new(&[2, 3], Fill::Const(0.0)).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_fill() {
        let t = Tensor::<f32>::new(&[1], Fill::Const(7.5)).unwrap();
        assert_eq!(t.data(), &[7.5]);
    }

    #[test]
    fn seeded_fill_is_deterministic_bitwise() {
        let a = Tensor::<f32>::new(&[4], Fill::Uniform { seed: 42, lo: -1.0, hi: 1.0 }).unwrap();
        let b = Tensor::<f32>::new(&[4], Fill::Uniform { seed: 42, lo: -1.0, hi: 1.0 }).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = Tensor::<f32>::new(&[4], Fill::Uniform { seed: 43, lo: -1.0, hi: 1.0 }).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            Tensor::<f32>::zeros(&[2, 0, 3]),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(Tensor::<f32>::zeros(&[]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn from_vec_length_checked() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
    }
}
