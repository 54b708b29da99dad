//! Image decode, resize, rotation, and sample materialization.
//!
//! All geometry uses inverse mapping with bilinear interpolation in the
//! half-pixel-center convention. Rotation reads out-of-frame pixels as black;
//! resize clamps to the border.

use std::path::Path;

use crate::data::{AugTag, LabeledSample, SampleRef};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Decode a PNG/JPEG into an `[H,W,3]` tensor scaled to [0,1].
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::from_values(Shape::new([h as usize, w as usize, 3])?, data)
}

/// Bilinear resize of an `[H,W,C]` tensor.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(Error::shape_mismatch("resize input", "[H,W,C]", img.shape()));
    }
    let (h, w, c) = (img.dims()[0], img.dims()[1], img.dims()[2]);
    let data = img.data();
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;

    let mut out = vec![0.0; out_h * out_w * c];
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let tl = data[(y0 * w + x0) * c + ch];
                let tr = data[(y0 * w + x1) * c + ch];
                let bl = data[(y1 * w + x0) * c + ch];
                let br = data[(y1 * w + x1) * c + ch];
                let top = tl + (tr - tl) * fx;
                let bot = bl + (br - bl) * fx;
                out[(y * out_w + x) * c + ch] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::from_values(Shape::new([out_h, out_w, c])?, out)
}

/// Rotate an `[H,W,C]` tensor by `degrees` about the image center, filling
/// pixels whose pre-image falls outside the frame with black.
pub fn rotate_bilinear(img: &Tensor, degrees: f64) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(Error::shape_mismatch("rotate input", "[H,W,C]", img.shape()));
    }
    let (h, w, c) = (img.dims()[0], img.dims()[1], img.dims()[2]);
    let data = img.data();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;

    let sample = |yi: isize, xi: isize, ch: usize| -> f64 {
        if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
            0.0
        } else {
            data[(yi as usize * w + xi as usize) * c + ch]
        }
    };

    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            let sy = cy + sin * dx + cos * dy;
            let sx = cx + cos * dx - sin * dy;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let tl = sample(y0, x0, ch);
                let tr = sample(y0, x0 + 1, ch);
                let bl = sample(y0 + 1, x0, ch);
                let br = sample(y0 + 1, x0 + 1, ch);
                let top = tl + (tr - tl) * fx;
                let bot = bl + (br - bl) * fx;
                out[(y * w + x) * c + ch] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::from_values(Shape::new([h, w, c])?, out)
}

/// Adapt channel count: 3-channel to 1 via Rec.601 luma, 1 to 3 by
/// replication.
pub fn conform_channels(img: &Tensor, channels: usize) -> Result<Tensor> {
    let (h, w, c) = (img.dims()[0], img.dims()[1], img.dims()[2]);
    if c == channels {
        return Ok(img.clone());
    }
    match (c, channels) {
        (3, 1) => {
            let data = img
                .data()
                .chunks_exact(3)
                .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
                .collect();
            Tensor::from_values(Shape::new([h, w, 1])?, data)
        }
        (1, 3) => {
            let mut data = Vec::with_capacity(h * w * 3);
            for &v in img.data() {
                data.extend_from_slice(&[v, v, v]);
            }
            Tensor::from_values(Shape::new([h, w, 3])?, data)
        }
        _ => Err(Error::shape_mismatch(
            "conform_channels",
            format!("1 or 3 -> {channels}"),
            format!("{c} channels"),
        )),
    }
}

/// Materialize one sample: decode, resize to `(h, w)`, adapt to `channels`,
/// apply the tag's rotation, and clip to [0,1] (bilinear arithmetic can
/// overshoot the range by a few ulps).
pub fn load_sample(
    image_dir: &Path,
    r: &SampleRef,
    h: usize,
    w: usize,
    channels: usize,
) -> Result<LabeledSample> {
    let decoded = decode_image(&image_dir.join(&r.file))?;
    let resized = resize_bilinear(&decoded, h, w)?;
    let conformed = conform_channels(&resized, channels)?;
    let mut image = match r.aug {
        AugTag::Orig => conformed,
        tag => rotate_bilinear(&conformed, tag.degrees())?,
    };
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(LabeledSample {
        image,
        label: r.label,
        source: r.file.clone(),
        aug: r.aug,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use crate::rng::stream;

    fn bright_center(h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros(Shape::new([h, w, 1]).unwrap());
        let off = t.offset(&[h / 2, w / 2, 0]);
        t.data_mut()[off] = 1.0;
        t
    }

    #[test]
    fn zero_degree_rotation_is_identity() {
        let mut rng = stream(1, "imageops.rot0");
        let img = oracles::random_uniform_tensor(&mut rng, &[9, 7, 3], 0.0, 1.0);
        let rotated = rotate_bilinear(&img, 0.0).unwrap();
        for (a, b) in rotated.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_matches_reference_oracle() {
        let mut rng = stream(2, "imageops.oracle");
        let img = oracles::random_uniform_tensor(&mut rng, &[15, 15, 2], 0.0, 1.0);
        for degrees in [30.0, -30.0, 12.5] {
            let got = rotate_bilinear(&img, degrees).unwrap();
            let want = oracles::rotate_naive(&img, degrees);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn bright_center_pixel_survives_rotation_roundtrip() {
        let img = bright_center(15, 15);
        let there = oracles::rotate_naive(&img, 30.0);
        let back = oracles::rotate_naive(&there, -30.0);
        let center = back.at(&[7, 7, 0]);
        assert!(
            (center - 1.0).abs() <= 0.02,
            "center intensity after +/-30 roundtrip: {center}"
        );
        let got = rotate_bilinear(&rotate_bilinear(&img, 30.0).unwrap(), -30.0).unwrap();
        assert!((got.at(&[7, 7, 0]) - 1.0).abs() <= 0.02);
    }

    #[test]
    fn rotation_fills_out_of_frame_with_black() {
        let img = Tensor::filled(Shape::new([11, 11, 1]).unwrap(), 1.0);
        let rotated = rotate_bilinear(&img, 30.0).unwrap();
        // corners rotate out of frame
        assert!(rotated.at(&[0, 0, 0]) < 0.5);
        assert!(rotated.at(&[10, 10, 0]) < 0.5);
        // center is untouched
        assert!((rotated.at(&[5, 5, 0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = Tensor::filled(Shape::new([10, 14, 3]).unwrap(), 0.6);
        let resized = resize_bilinear(&img, 224, 224).unwrap();
        assert_eq!(resized.dims(), &[224, 224, 3]);
        assert!(resized.data().iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn resize_identity_when_size_matches() {
        let mut rng = stream(3, "imageops.resize");
        let img = oracles::random_uniform_tensor(&mut rng, &[8, 8, 1], 0.0, 1.0);
        let same = resize_bilinear(&img, 8, 8).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn luma_conversion_weights() {
        let mut img = Tensor::zeros(Shape::new([1, 1, 3]).unwrap());
        img.data_mut().copy_from_slice(&[1.0, 0.5, 0.25]);
        let gray = conform_channels(&img, 1).unwrap();
        let want = 0.299 + 0.587 * 0.5 + 0.114 * 0.25;
        assert!((gray.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn load_sample_materializes_every_tag_from_a_real_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::GrayImage::from_fn(40, 32, |x, y| {
            image::Luma([((x + y) % 256) as u8])
        });
        img.save(dir.path().join("eye.png")).unwrap();

        for tag in AugTag::ALL {
            let r = SampleRef {
                file: "eye.png".into(),
                aug: tag,
                label: crate::data::Label::Cataract,
            };
            let sample = load_sample(dir.path(), &r, 24, 24, 1).unwrap();
            assert_eq!(sample.image.dims(), &[24, 24, 1]);
            assert!(sample.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(sample.aug, tag);
            assert_eq!(sample.source, "eye.png");
        }
        let missing = SampleRef {
            file: "absent.png".into(),
            aug: AugTag::Orig,
            label: crate::data::Label::Normal,
        };
        assert!(load_sample(dir.path(), &missing, 24, 24, 1).is_err());
    }
}
