//! Inverted dropout.
//!
//! Train mode zeroes each element independently with probability `rate` and
//! scales survivors by `1/(1-rate)`, so inference is the identity. Randomness
//! comes from an explicit caller-provided stream; there is no hidden state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DropoutCache {
    pub(crate) mask: Vec<bool>,
    rate: f64,
    mode: Mode,
}

pub fn dropout_forward(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Tensor, DropoutCache)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter {
            name: "dropout rate",
            reason: format!("must be in [0,1), got {rate}"),
        });
    }
    match mode {
        Mode::Infer => {
            let cache = DropoutCache {
                mask: Vec::new(),
                rate,
                mode,
            };
            Ok((x.clone(), cache))
        }
        Mode::Train => {
            let keep_scale = 1.0 / (1.0 - rate);
            let mut mask = vec![false; x.len()];
            let mut out = vec![0.0; x.len()];
            for (i, &v) in x.data().iter().enumerate() {
                let keep = rng.gen::<f64>() >= rate;
                mask[i] = keep;
                if keep {
                    out[i] = v * keep_scale;
                }
            }
            let y = Tensor::from_values(x.shape().clone(), out)?;
            Ok((y, DropoutCache { mask, rate, mode }))
        }
    }
}

pub fn dropout_backward(dy: &Tensor, cache: &DropoutCache) -> Result<Tensor> {
    match cache.mode {
        Mode::Infer => Ok(dy.clone()),
        Mode::Train => {
            if dy.len() != cache.mask.len() {
                return Err(Error::shape_mismatch(
                    "dropout_backward dy",
                    format!("{} elements", cache.mask.len()),
                    format!("{} elements", dy.len()),
                ));
            }
            let keep_scale = 1.0 / (1.0 - cache.rate);
            let data = dy
                .data()
                .iter()
                .zip(cache.mask.iter())
                .map(|(&g, &keep)| if keep { g * keep_scale } else { 0.0 })
                .collect();
            Tensor::from_values(dy.shape().clone(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::Shape;

    #[test]
    fn rate_zero_is_identity_in_both_modes() {
        let mut rng = stream(1, "dropout.zero");
        let x = Tensor::from_values(Shape::new([4]).unwrap(), vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        let (y, _) = dropout_forward(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        let (y, _) = dropout_forward(&x, 0.0, Mode::Infer, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn infer_mode_is_identity() {
        let mut rng = stream(2, "dropout.infer");
        let x = Tensor::filled(Shape::new([100]).unwrap(), 2.5);
        let (y, cache) = dropout_forward(&x, 0.2, Mode::Infer, &mut rng).unwrap();
        assert_eq!(y, x);
        let dy = Tensor::filled(Shape::new([100]).unwrap(), 1.0);
        assert_eq!(dropout_backward(&dy, &cache).unwrap(), dy);
    }

    #[test]
    fn invalid_rate_is_rejected() {
        let mut rng = stream(3, "dropout.bad");
        let x = Tensor::zeros(Shape::new([2]).unwrap());
        assert!(dropout_forward(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout_forward(&x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn empirical_drop_fraction_close_to_rate() {
        let mut rng = stream(4, "dropout.lln");
        let x = Tensor::filled(Shape::new([1_000_000]).unwrap(), 1.0);
        let (y, _) = dropout_forward(&x, 0.2, Mode::Train, &mut rng).unwrap();
        let dropped = y.data().iter().filter(|&&v| v == 0.0).count();
        let fraction = dropped as f64 / 1e6;
        assert!(
            (fraction - 0.2).abs() <= 0.002,
            "drop fraction {fraction}"
        );
    }

    #[test]
    fn inverted_scaling_preserves_expectation() {
        let mut rng = stream(5, "dropout.expectation");
        let x = Tensor::filled(Shape::new([1_000_000]).unwrap(), 3.0);
        let (y, _) = dropout_forward(&x, 0.2, Mode::Train, &mut rng).unwrap();
        let mean_x: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
        let mean_y: f64 = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!(
            (mean_y - mean_x).abs() <= 0.01 * mean_x.abs(),
            "mean {mean_y} vs {mean_x}"
        );
    }

    #[test]
    fn backward_applies_the_same_mask() {
        let mut rng = stream(6, "dropout.mask");
        let x = Tensor::filled(Shape::new([64]).unwrap(), 1.0);
        let (y, cache) = dropout_forward(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let dy = Tensor::filled(Shape::new([64]).unwrap(), 1.0);
        let dx = dropout_backward(&dy, &cache).unwrap();
        for (o, g) in y.data().iter().zip(dx.data()) {
            assert_eq!(o == &0.0, g == &0.0);
        }
    }

    #[test]
    fn same_stream_reproduces_the_mask() {
        let x = Tensor::filled(Shape::new([256]).unwrap(), 1.0);
        let mut a = stream(7, "dropout.repro");
        let mut b = stream(7, "dropout.repro");
        let (ya, _) = dropout_forward(&x, 0.2, Mode::Train, &mut a).unwrap();
        let (yb, _) = dropout_forward(&x, 0.2, Mode::Train, &mut b).unwrap();
        assert_eq!(ya, yb);
    }
}
