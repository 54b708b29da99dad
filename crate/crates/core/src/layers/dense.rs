//! Fully connected layer: `y = act(x W + b)`.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor, UnaryFn};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenseActivation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::shape_mismatch("dense weight", "[in,out]", weight.shape()));
        }
        if bias.rank() != 1 || bias.dims()[0] != weight.dims()[1] {
            return Err(Error::shape_mismatch(
                "dense bias",
                format!("[{}]", weight.dims()[1]),
                bias.shape(),
            ));
        }
        if !weight.all_finite() || !bias.all_finite() {
            return Err(Error::InvalidParameter {
                name: "dense params",
                reason: "non-finite value".into(),
            });
        }
        Ok(DenseParams { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[1]
    }
}

#[derive(Clone, Debug)]
pub struct DenseCache {
    input: Tensor,
    weight: Tensor,
    preact: Tensor,
    activation: DenseActivation,
}

impl DenseCache {
    /// Pre-activation values; the model's kink-margin diagnostic reads these.
    pub(crate) fn preact(&self) -> &Tensor {
        &self.preact
    }
}

/// `[N,in] -> [N,out]`.
pub fn dense_forward(
    x: &Tensor,
    p: &DenseParams,
    activation: DenseActivation,
) -> Result<(Tensor, DenseCache)> {
    if x.rank() != 2 || x.dims()[1] != p.in_features() {
        return Err(Error::shape_mismatch(
            "dense input",
            format!("[N,{}]", p.in_features()),
            x.shape(),
        ));
    }
    let mut preact = x.matmul(&p.weight)?;
    let out = p.out_features();
    for row in preact.data_mut().chunks_exact_mut(out) {
        for (v, &b) in row.iter_mut().zip(p.bias.data()) {
            *v += b;
        }
    }
    let y = match activation {
        DenseActivation::Relu => preact.map_unary(UnaryFn::Relu),
        DenseActivation::None => preact.clone(),
    };
    let cache = DenseCache {
        input: x.clone(),
        weight: p.weight.clone(),
        preact,
        activation,
    };
    Ok((y, cache))
}

/// Exact gradients of [`dense_forward`]: returns `(dx, dweight, dbias)`.
pub fn dense_backward(dy: &Tensor, cache: &DenseCache) -> Result<(Tensor, Tensor, Tensor)> {
    if dy.shape() != cache.preact.shape() {
        return Err(Error::shape_mismatch(
            "dense_backward dy",
            cache.preact.shape(),
            dy.shape(),
        ));
    }
    // chain through the activation first
    let dz = match cache.activation {
        DenseActivation::Relu => dy.mul(&cache.preact.map_unary(UnaryFn::ReluPrime))?,
        DenseActivation::None => dy.clone(),
    };
    let dx = dz.matmul(&cache.weight.transpose2()?)?;
    let dw = cache.input.transpose2()?.matmul(&dz)?;
    let out = cache.weight.dims()[1];
    let mut db = vec![0.0; out];
    for row in dz.data().chunks_exact(out) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((dx, dw, Tensor::from_values(Shape::new([out])?, db)?))
}
