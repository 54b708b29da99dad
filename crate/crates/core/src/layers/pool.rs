//! 2x2 stride-2 max pooling.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Argmax positions recorded by the forward pass: one flat input index per
/// output element.
#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    input_dims: [usize; 4],
    argmax: Vec<usize>,
}

/// `[N,H,W,C] -> [N,H/2,W/2,C]` over non-overlapping 2x2 windows; an odd
/// trailing row/column is dropped. Ties resolve to the first occurrence in
/// row-major window order, which keeps gradients deterministic.
pub fn maxpool_forward(x: &Tensor) -> Result<(Tensor, MaxPoolCache)> {
    if x.rank() != 4 {
        return Err(Error::shape_mismatch(
            "maxpool input",
            "[N,H,W,C]",
            x.shape(),
        ));
    }
    let (n, h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    if h < 2 || w < 2 {
        return Err(Error::shape_mismatch(
            "maxpool spatial extent",
            "H >= 2 and W >= 2",
            format!("H={h}, W={w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; n * oh * ow * c];
    let mut argmax = vec![0usize; out.len()];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let off = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            // strict > keeps the first occurrence on ties
                            if xd[off] > best {
                                best = xd[off];
                                best_at = off;
                            }
                        }
                    }
                    let o = ((b * oh + i) * ow + j) * c + ch;
                    out[o] = best;
                    argmax[o] = best_at;
                }
            }
        }
    }
    let y = Tensor::from_values(Shape::new([n, oh, ow, c])?, out)?;
    Ok((
        y,
        MaxPoolCache {
            input_dims: [n, h, w, c],
            argmax,
        },
    ))
}

/// Routes each `dy` element to its recorded argmax position; all other input
/// positions receive zero.
pub fn maxpool_backward(dy: &Tensor, cache: &MaxPoolCache) -> Result<Tensor> {
    let [n, h, w, c] = cache.input_dims;
    let expected = [n, h / 2, w / 2, c];
    if dy.dims() != expected {
        return Err(Error::shape_mismatch(
            "maxpool_backward dy",
            Shape::new(expected.to_vec())?,
            dy.shape(),
        ));
    }
    let mut dx = vec![0.0; n * h * w * c];
    for (grad, &src) in dy.data().iter().zip(cache.argmax.iter()) {
        dx[src] += grad;
    }
    Tensor::from_values(Shape::new([n, h, w, c])?, dx)
}
