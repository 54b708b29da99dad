//! 2D convolution (cross-correlation) with same padding and stride 1.
//!
//! The sliding-window product is implemented as cross-correlation, the
//! universal CNN convention; it differs from the textbook convolution only by
//! a kernel flip, which is unobservable for learned kernels.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Fixed square kernel extent.
pub const CONV_KERNEL: usize = 3;

/// Learned kernels `[3,3,in_channels,out_channels]` plus a per-output-channel
/// bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(kernels: Tensor, bias: Tensor) -> Result<Self> {
        let kd = kernels.dims();
        if kernels.rank() != 4 || kd[0] != CONV_KERNEL || kd[1] != CONV_KERNEL {
            return Err(Error::shape_mismatch(
                "conv kernels",
                format!("[{CONV_KERNEL},{CONV_KERNEL},in,out]"),
                kernels.shape(),
            ));
        }
        if bias.rank() != 1 || bias.dims()[0] != kd[3] {
            return Err(Error::shape_mismatch(
                "conv bias",
                format!("[{}]", kd[3]),
                bias.shape(),
            ));
        }
        if !kernels.all_finite() || !bias.all_finite() {
            return Err(Error::InvalidParameter {
                name: "conv params",
                reason: "non-finite value".into(),
            });
        }
        Ok(ConvParams { kernels, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.dims()[3]
    }
}

/// Forward values needed by [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct Conv2dCache {
    input: Tensor,
    kernels: Tensor,
}

/// `[N,H,W,Cin] -> [N,H,W,Cout]`: zero-padded cross-correlation plus bias.
///
/// Per output element the reduction runs in a fixed (ki, kj, ci) order, so
/// results are bit-reproducible.
pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<(Tensor, Conv2dCache)> {
    if x.rank() != 4 {
        return Err(Error::shape_mismatch(
            "conv2d input",
            "[N,H,W,C]",
            x.shape(),
        ));
    }
    let (n, h, w, cin) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    if cin != p.in_channels() {
        return Err(Error::shape_mismatch(
            "conv2d input channels",
            p.in_channels(),
            cin,
        ));
    }
    let cout = p.out_channels();
    let pad = CONV_KERNEL / 2;
    let xd = x.data();
    let kd = p.kernels.data();
    let bd = p.bias.data();

    let mut out = vec![0.0; n * h * w * cout];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let out_base = ((b * h + i) * w + j) * cout;
                out[out_base..out_base + cout].copy_from_slice(bd);
                for ki in 0..CONV_KERNEL {
                    let ii = i + ki;
                    if ii < pad || ii - pad >= h {
                        continue;
                    }
                    let ii = ii - pad;
                    for kj in 0..CONV_KERNEL {
                        let jj = j + kj;
                        if jj < pad || jj - pad >= w {
                            continue;
                        }
                        let jj = jj - pad;
                        let x_base = ((b * h + ii) * w + jj) * cin;
                        let k_base = (ki * CONV_KERNEL + kj) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[x_base + ci];
                            let krow = k_base + ci * cout;
                            for co in 0..cout {
                                out[out_base + co] += xv * kd[krow + co];
                            }
                        }
                    }
                }
            }
        }
    }
    let y = Tensor::from_values(Shape::new([n, h, w, cout])?, out)?;
    let cache = Conv2dCache {
        input: x.clone(),
        kernels: p.kernels.clone(),
    };
    Ok((y, cache))
}

/// Exact gradients of [`conv2d_forward`]: returns `(dx, dkernels, dbias)`.
/// `dbias` is the per-output-channel sum of `dy`.
pub fn conv2d_backward(dy: &Tensor, cache: &Conv2dCache) -> Result<(Tensor, Tensor, Tensor)> {
    let x = &cache.input;
    let (n, h, w, cin) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let cout = cache.kernels.dims()[3];
    let expected = [n, h, w, cout];
    if dy.dims() != expected {
        return Err(Error::shape_mismatch(
            "conv2d_backward dy",
            Shape::new(expected.to_vec())?,
            dy.shape(),
        ));
    }
    let pad = CONV_KERNEL / 2;
    let xd = x.data();
    let kd = cache.kernels.data();
    let dyd = dy.data();

    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; cout];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let dy_base = ((b * h + i) * w + j) * cout;
                for co in 0..cout {
                    db[co] += dyd[dy_base + co];
                }
                for ki in 0..CONV_KERNEL {
                    let ii = i + ki;
                    if ii < pad || ii - pad >= h {
                        continue;
                    }
                    let ii = ii - pad;
                    for kj in 0..CONV_KERNEL {
                        let jj = j + kj;
                        if jj < pad || jj - pad >= w {
                            continue;
                        }
                        let jj = jj - pad;
                        let x_base = ((b * h + ii) * w + jj) * cin;
                        let k_base = (ki * CONV_KERNEL + kj) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[x_base + ci];
                            let krow = k_base + ci * cout;
                            let mut acc = 0.0;
                            for co in 0..cout {
                                let g = dyd[dy_base + co];
                                dk[krow + co] += xv * g;
                                acc += kd[krow + co] * g;
                            }
                            dx[x_base + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_values(x.shape().clone(), dx)?,
        Tensor::from_values(cache.kernels.shape().clone(), dk)?,
        Tensor::from_values(Shape::new([cout])?, db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use crate::rng::stream;

    fn delta_kernel(cin: usize) -> ConvParams {
        // center tap 1 on the matching channel, everything else 0
        let mut k = Tensor::zeros(Shape::new([3, 3, cin, cin]).unwrap());
        for c in 0..cin {
            let off = k.offset(&[1, 1, c, c]);
            k.data_mut()[off] = 1.0;
        }
        ConvParams::new(k, Tensor::zeros(Shape::new([cin]).unwrap())).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = stream(3, "conv.identity");
        let x = oracles::random_tensor(&mut rng, &[2, 4, 5, 2], 1.0);
        let p = delta_kernel(2);
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_center_sums_input() {
        let x = Tensor::from_values(
            Shape::new([1, 3, 3, 1]).unwrap(),
            (1..=9).map(f64::from).collect(),
        )
        .unwrap();
        let p = ConvParams::new(
            Tensor::filled(Shape::new([3, 3, 1, 1]).unwrap(), 1.0),
            Tensor::zeros(Shape::new([1]).unwrap()),
        )
        .unwrap();
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.at(&[0, 1, 1, 0]), 45.0);
    }

    #[test]
    fn forward_matches_nested_loop_oracle() {
        let mut rng = stream(17, "conv.oracle");
        let x = oracles::random_tensor(&mut rng, &[1, 5, 5, 2], 1.0);
        let k = oracles::random_tensor(&mut rng, &[3, 3, 2, 4], 1.0);
        let bias = oracles::random_tensor(&mut rng, &[4], 1.0);
        let p = ConvParams::new(k.clone(), bias.clone()).unwrap();
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        let want = oracles::conv2d_naive(&x, &k, &bias);
        for (g, w) in y.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_matches_oracle_over_shape_grid() {
        let mut rng = stream(23, "conv.grid");
        for n in 1..=3 {
            for h in [3, 5, 7] {
                for w in [3, 4, 6] {
                    for cin in 1..=3 {
                        for cout in 1..=2 {
                            let x = oracles::random_tensor(&mut rng, &[n, h, w, cin], 1.0);
                            let k = oracles::random_tensor(&mut rng, &[3, 3, cin, cout], 1.0);
                            let b = oracles::random_tensor(&mut rng, &[cout], 1.0);
                            let p = ConvParams::new(k.clone(), b.clone()).unwrap();
                            let (y, _) = conv2d_forward(&x, &p).unwrap();
                            let want = oracles::conv2d_naive(&x, &k, &b);
                            for (g, ww) in y.data().iter().zip(want.data()) {
                                assert!((g - ww).abs() <= 1e-12);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::zeros(Shape::new([1, 4, 4, 3]).unwrap());
        let p = delta_kernel(2);
        assert!(conv2d_forward(&x, &p).is_err());
    }

    #[test]
    fn backward_zero_dy_gives_zero_gradients() {
        let mut rng = stream(5, "conv.zero");
        let x = oracles::random_tensor(&mut rng, &[1, 4, 4, 2], 1.0);
        let p = ConvParams::new(
            oracles::random_tensor(&mut rng, &[3, 3, 2, 3], 1.0),
            oracles::random_tensor(&mut rng, &[3], 1.0),
        )
        .unwrap();
        let (y, cache) = conv2d_forward(&x, &p).unwrap();
        let dy = Tensor::zeros(y.shape().clone());
        let (dx, dk, db) = conv2d_backward(&dy, &cache).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dk.data().iter().all(|&v| v == 0.0));
        assert!(db.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_case_product_rule() {
        // 1x1 spatial, 1 channel: only the center tap touches the input.
        let x = Tensor::from_values(Shape::new([1, 1, 1, 1]).unwrap(), vec![3.0]).unwrap();
        let mut k = Tensor::zeros(Shape::new([3, 3, 1, 1]).unwrap());
        let off = k.offset(&[1, 1, 0, 0]);
        k.data_mut()[off] = 2.0;
        let p = ConvParams::new(k, Tensor::zeros(Shape::new([1]).unwrap())).unwrap();
        let (_, cache) = conv2d_forward(&x, &p).unwrap();
        let dy = Tensor::from_values(Shape::new([1, 1, 1, 1]).unwrap(), vec![5.0]).unwrap();
        let (dx, dk, db) = conv2d_backward(&dy, &cache).unwrap();
        assert_eq!(dx.data()[0], 2.0 * 5.0);
        assert_eq!(dk.at(&[1, 1, 0, 0]), 3.0 * 5.0);
        assert_eq!(db.data()[0], 5.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let report = crate::gradcheck::check_conv2d(91).unwrap();
        assert!(
            report.max_rel_err <= 1e-6,
            "conv gradcheck error {}",
            report.max_rel_err
        );
    }
}
