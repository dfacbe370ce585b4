//! A small operator vocabulary shared by the eager kernels and the autodiff
//! graph. Attention and model code is written once against [`Ops`] and runs
//! either directly on tensors ([`Eager`]) or recorded on a tape
//! ([`crate::autodiff::Graph`]).

use crate::error::Result;
use crate::tensor::{self, Exec, Tensor};

pub trait Ops {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    /// A value that never receives gradients.
    fn constant(&mut self, t: Tensor) -> Self::Value;

    /// A trainable value.
    fn param(&mut self, t: &Tensor) -> Self::Value;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    /// Swaps the last two axes.
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value>;

    fn reshape(&mut self, a: Self::Value, shape: &[usize]) -> Result<Self::Value>;

    fn gather_rows(&mut self, a: &Self::Value, indices: &[isize], pad: f64) -> Result<Self::Value>;

    fn concat_rows(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;

    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;

    fn add(&mut self, a: Self::Value, b: &Self::Value) -> Result<Self::Value>;

    /// Adds a same-shaped constant (masks, positional encodings).
    fn add_const(&mut self, a: Self::Value, c: &Tensor) -> Result<Self::Value>;

    /// Adds a bias vector to every row.
    fn add_bias(&mut self, a: Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn scale(&mut self, a: Self::Value, c: f64) -> Self::Value;

    fn softmax(&mut self, a: Self::Value) -> Result<Self::Value>;

    fn leaky_relu(&mut self, a: Self::Value, alpha: f64) -> Self::Value;
}

/// Direct evaluation on tensors. Consumes its inputs where it can so the
/// large score matrices are transformed in place.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager {
    pub exec: Exec,
}

impl Eager {
    pub fn new(exec: Exec) -> Self {
        Self { exec }
    }
}

impl Ops for Eager {
    type Value = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::matmul_batched_with(a, b, self.exec)
    }

    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        a.transpose_last2()
    }

    fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        a.reshape(shape)
    }

    fn gather_rows(&mut self, a: &Tensor, indices: &[isize], pad: f64) -> Result<Tensor> {
        tensor::gather_rows_padded(a, indices, pad)
    }

    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        tensor::concat_axis0(parts)
    }

    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        tensor::concat_cols(parts)
    }

    fn add(&mut self, mut a: Tensor, b: &Tensor) -> Result<Tensor> {
        a.add_inplace(b)?;
        Ok(a)
    }

    fn add_const(&mut self, a: Tensor, c: &Tensor) -> Result<Tensor> {
        self.add(a, c)
    }

    fn add_bias(&mut self, mut a: Tensor, b: &Tensor) -> Result<Tensor> {
        let (_, q) = a.dims2("add_bias")?;
        if b.numel() != q {
            return Err(crate::Error::Shape {
                op: "add_bias",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        for row in a.data_mut().chunks_mut(q) {
            row.iter_mut().zip(b.data()).for_each(|(x, bv)| *x += bv);
        }
        Ok(a)
    }

    fn scale(&mut self, mut a: Tensor, c: f64) -> Tensor {
        a.map_inplace(|x| x * c);
        a
    }

    fn softmax(&mut self, a: Tensor) -> Result<Tensor> {
        tensor::softmax_lastdim_with(a, self.exec)
    }

    fn leaky_relu(&mut self, mut a: Tensor, alpha: f64) -> Tensor {
        a.map_inplace(|x| tensor::leaky_relu(x, alpha));
        a
    }
}

/// `act(x·w + b)` expressed in [`Ops`].
pub fn affine<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    w: &O::Value,
    b: &O::Value,
    activation: tensor::Activation,
) -> Result<O::Value> {
    let y = ops.matmul(x, w)?;
    let y = ops.add_bias(y, b)?;
    Ok(match activation {
        tensor::Activation::None => y,
        tensor::Activation::LeakyRelu(alpha) => ops.leaky_relu(y, alpha),
    })
}
