//! Dense row-major arrays, the differentiation tape and neural primitives.

mod conv;
mod gemm;
mod gradcheck;
mod norm;
mod ops;
mod tape;

pub use conv::{conv3d, conv_output_dims, conv_transpose3d, ConvGeometry};
pub use gemm::gemm;
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use norm::instance_norm;
pub use ops::*;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Crate-wide real type. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// N-dimensional real array with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: Real) -> Self {
        Tensor::new(&[1], vec![value]).unwrap()
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Real) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect()).expect("valid shape")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the stored gradient. Untracked tensors ignore the call.
    pub fn accumulate_grad(&mut self, g: &[Real]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient length {} for shape {:?}", g.len(), self.shape),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::new(shape, self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    /// Detached copy (no gradient tracking, no stored gradient).
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn get(&self, index: &[usize]) -> Real {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: Real) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &s)| {
                assert!(i < s, "index {i} out of bounds for extent {s}");
                acc * s + i
            })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    pub fn mean(&self) -> Real {
        self.data.iter().sum::<Real>() / self.data.len() as Real
    }

    /// Population variance over all elements.
    pub fn variance(&self) -> Real {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<Real>() / self.data.len() as Real
    }

    /// Reverses the given axis.
    pub fn flip(&self, axis: usize) -> Tensor {
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..n {
                let src = (o * n + i) * inner;
                let dst = (o * n + (n - 1 - i)) * inner;
                out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Tensor::new(&self.shape, out).unwrap()
    }

    /// Copies a `[.., D, H, W]` sub-box starting at `origin` with extents `size`.
    pub fn crop3d(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Tensor> {
        let r = self.shape.len();
        if r < 3 {
            return Err(Error::shape("crop3d", "rank < 3"));
        }
        let dims = [self.shape[r - 3], self.shape[r - 2], self.shape[r - 1]];
        for a in 0..3 {
            if origin[a] + size[a] > dims[a] {
                return Err(Error::shape(
                    "crop3d",
                    format!("box {origin:?}+{size:?} exceeds {dims:?}"),
                ));
            }
        }
        let lead: usize = self.shape[..r - 3].iter().product();
        let vol = dims[0] * dims[1] * dims[2];
        let mut out = Vec::with_capacity(lead * size[0] * size[1] * size[2]);
        for l in 0..lead {
            for d in 0..size[0] {
                for h in 0..size[1] {
                    let start = l * vol + ((origin[0] + d) * dims[1] + origin[1] + h) * dims[2] + origin[2];
                    out.extend_from_slice(&self.data[start..start + size[2]]);
                }
            }
        }
        let mut shape = self.shape[..r - 3].to_vec();
        shape.extend_from_slice(&size);
        Tensor::new(&shape, out)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }
}
