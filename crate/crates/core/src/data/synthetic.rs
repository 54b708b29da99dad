//! Synthetic separable fixtures for capacity checks.
//!
//! A trivially learnable two-class set: bright discs on a dark background
//! (the positive class) versus low-level noise (the negative class). The
//! overfit check in the verification suite trains the tiny model to 100%
//! accuracy on these.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Label;
use crate::rng::stream;
use crate::tensor::{Shape, Tensor};

/// Dark background with a bright centered disc, `[h,w,1]`.
pub fn bright_disc(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = dark_noise(h, w, rng);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = h.min(w) as f64 / 4.0;
    let data = t.data_mut();
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if d2 <= radius * radius {
                data[y * w + x] = rng.gen_range(0.85..1.0);
            }
        }
    }
    t
}

/// Uniform low-level noise, `[h,w,1]`.
pub fn dark_noise(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..h * w).map(|_| rng.gen_range(0.0..0.15)).collect();
    Tensor::from_values(Shape::new([h, w, 1]).expect("valid"), data).expect("length matches")
}

/// `n_per_class` discs (cataract) and dark images (normal), interleaved.
pub fn separable_set(n_per_class: usize, h: usize, w: usize, seed: u64) -> Vec<(Tensor, Label)> {
    let mut rng = stream(seed, "synthetic.separable");
    let mut out = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        out.push((bright_disc(h, w, &mut rng), Label::Cataract));
        out.push((dark_noise(h, w, &mut rng), Label::Normal));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_visibly_separable_by_mean_intensity() {
        let set = separable_set(8, 16, 16, 3);
        assert_eq!(set.len(), 16);
        for (img, label) in &set {
            let mean: f64 = img.data().iter().sum::<f64>() / img.len() as f64;
            match label {
                Label::Cataract => assert!(mean > 0.2, "disc mean {mean}"),
                Label::Normal => assert!(mean < 0.15, "noise mean {mean}"),
            }
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = separable_set(4, 16, 16, 9);
        let b = separable_set(4, 16, 16, 9);
        for ((ta, la), (tb, lb)) in a.iter().zip(&b) {
            assert_eq!(ta, tb);
            assert_eq!(la, lb);
        }
    }
}
