//! Independent reference implementations used by the verification suite.
//!
//! Everything here is written as plainly as possible — scalar loops over
//! multi-indices, no shared helpers with the production code paths — so that
//! agreement between a layer and its oracle is meaningful. Nothing in this
//! module is called from the forward/backward implementations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Shape, Tensor};

/// Tensor with i.i.d. N(0, scale^2) entries, drawn in row-major order.
pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let shape = Shape::new(dims.to_vec()).expect("oracle shapes are valid");
    let n = shape.element_count();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::from_values(shape, data).expect("length matches by construction")
}

/// Tensor with i.i.d. U(lo, hi) entries.
pub fn random_uniform_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let shape = Shape::new(dims.to_vec()).expect("oracle shapes are valid");
    let n = shape.element_count();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_values(shape, data).expect("length matches by construction")
}

/// Triple-loop matrix product.
pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let n = b.dims()[1];
    assert_eq!(k, b.dims()[0]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a.at(&[i, kk]) * b.at(&[kk, j]);
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

/// Six-deep nested-loop cross-correlation with same padding, stride 1, and a
/// per-output-channel bias. `x` is `[N,H,W,Cin]`, `kernels` is
/// `[kh,kw,Cin,Cout]` with odd kh = kw.
pub fn conv2d_naive(x: &Tensor, kernels: &Tensor, bias: &Tensor) -> Tensor {
    let (n, h, w, cin) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (kh, kw, kcin, cout) = (
        kernels.dims()[0],
        kernels.dims()[1],
        kernels.dims()[2],
        kernels.dims()[3],
    );
    assert_eq!(cin, kcin);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut out = Tensor::zeros(Shape::new([n, h, w, cout]).unwrap());
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for co in 0..cout {
                    let mut acc = bias.data()[co];
                    for di in 0..kh {
                        for dj in 0..kw {
                            let ii = i as isize + di as isize - ph;
                            let jj = j as isize + dj as isize - pw;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at(&[b, ii as usize, jj as usize, ci])
                                    * kernels.at(&[di, dj, ci, co]);
                            }
                        }
                    }
                    let off = out.offset(&[b, i, j, co]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

/// Naive non-overlapping 2x2 window max, odd trailing row/column dropped.
pub fn maxpool_naive(x: &Tensor) -> Tensor {
    let (n, h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(Shape::new([n, oh, ow, c]).unwrap());
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let v = x.at(&[b, 2 * i + di, 2 * j + dj, ch]);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    let off = out.offset(&[b, i, j, ch]);
                    out.data_mut()[off] = best;
                }
            }
        }
    }
    out
}

/// One LSTM cell step evaluated scalar by scalar, directly from the gate
/// recurrences: forget and input gates, candidate state, cell update, output
/// gate, and hidden output. Weight layout matches the layer module:
/// `w_*` is `[hidden+input, hidden]` applied to the concatenation
/// `[h_prev, x_t]`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_step_scalar(
    x_t: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    w_f: &Tensor,
    w_i: &Tensor,
    w_c: &Tensor,
    w_o: &Tensor,
    b_f: &Tensor,
    b_i: &Tensor,
    b_c: &Tensor,
    b_o: &Tensor,
) -> (Tensor, Tensor) {
    let (n, input) = (x_t.dims()[0], x_t.dims()[1]);
    let hidden = h_prev.dims()[1];
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());

    let gate = |w: &Tensor, b: &Tensor, row: usize, unit: usize| -> f64 {
        // pre-activation = sum over the concatenated [h_prev, x_t] features
        let mut acc = b.data()[unit];
        for k in 0..hidden {
            acc += h_prev.at(&[row, k]) * w.at(&[k, unit]);
        }
        for k in 0..input {
            acc += x_t.at(&[row, k]) * w.at(&[hidden + k, unit]);
        }
        acc
    };

    let mut h_next = Tensor::zeros(Shape::new([n, hidden]).unwrap());
    let mut c_next = Tensor::zeros(Shape::new([n, hidden]).unwrap());
    for row in 0..n {
        for unit in 0..hidden {
            let f = sigmoid(gate(w_f, b_f, row, unit));
            let i = sigmoid(gate(w_i, b_i, row, unit));
            let c_tilde = gate(w_c, b_c, row, unit).tanh();
            let o = sigmoid(gate(w_o, b_o, row, unit));
            let c = f * c_prev.at(&[row, unit]) + i * c_tilde;
            let h = o * c.tanh();
            let off = c_next.offset(&[row, unit]);
            c_next.data_mut()[off] = c;
            let off = h_next.offset(&[row, unit]);
            h_next.data_mut()[off] = h;
        }
    }
    (h_next, c_next)
}

/// AUC as the fraction of (positive, negative) score pairs ordered correctly,
/// ties counted one half.
pub fn auc_pairwise(labels: &[u8], scores: &[f64]) -> f64 {
    let mut correct = 0.0;
    let mut total = 0.0;
    for (i, (&li, &si)) in labels.iter().zip(scores).enumerate() {
        if li != 1 {
            continue;
        }
        for (j, (&lj, &sj)) in labels.iter().zip(scores).enumerate() {
            if i == j || lj != 0 {
                continue;
            }
            total += 1.0;
            if si > sj {
                correct += 1.0;
            } else if si == sj {
                correct += 0.5;
            }
        }
    }
    assert!(total > 0.0, "pairwise auc needs both classes");
    correct / total
}

/// Reference image rotation by `degrees` about the image center:
/// inverse-mapped bilinear sampling with out-of-frame pixels read as black.
/// `img` is `[H,W,C]`.
pub fn rotate_naive(img: &Tensor, degrees: f64) -> Tensor {
    let (h, w, c) = (img.dims()[0], img.dims()[1], img.dims()[2]);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let read = |y: isize, x: isize, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img.at(&[y as usize, x as usize, ch])
        }
    };
    let mut out = Tensor::zeros(Shape::new([h, w, c]).unwrap());
    for y in 0..h {
        for x in 0..w {
            // rotate the output coordinate back into the source frame
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + (sin * dx + cos * dy);
            let sx = cx + (cos * dx - sin * dy);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            for ch in 0..c {
                let tl = read(y0 as isize, x0 as isize, ch);
                let tr = read(y0 as isize, x0 as isize + 1, ch);
                let bl = read(y0 as isize + 1, x0 as isize, ch);
                let br = read(y0 as isize + 1, x0 as isize + 1, ch);
                let top = tl + (tr - tl) * fx;
                let bot = bl + (br - bl) * fx;
                let off = out.offset(&[y, x, ch]);
                out.data_mut()[off] = top + (bot - top) * fy;
            }
        }
    }
    out
}
