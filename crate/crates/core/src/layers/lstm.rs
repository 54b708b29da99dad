//! LSTM cell and sequence processing.
//!
//! One step computes, per batch row, with `z = [h_prev, x_t]` (concatenation
//! along the feature axis) and one `[hidden+input, hidden]` matrix per gate:
//!
//! ```text
//! f = sigmoid(z W_f + b_f)        forget gate
//! i = sigmoid(z W_i + b_i)        input gate
//! c~ = tanh(z W_c + b_c)          candidate state
//! c = f . c_prev + i . c~         cell update
//! o = sigmoid(z W_o + b_o)        output gate
//! h = o . tanh(c)                 hidden output
//! ```
//!
//! `lstm_forward` iterates the step over the time axis;
//! `lstm_backward` propagates through time, summing parameter gradients
//! across steps. Gate values for every timestep are cached by the forward
//! pass.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor, UnaryFn};

/// One weight matrix and bias per gate. All four matrices share the shape
/// `[hidden+input, hidden]` and act on the concatenation `[h_prev, x_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_f: Tensor,
    pub w_i: Tensor,
    pub w_c: Tensor,
    pub w_o: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
}

impl LstmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w_f: Tensor,
        w_i: Tensor,
        w_c: Tensor,
        w_o: Tensor,
        b_f: Tensor,
        b_i: Tensor,
        b_c: Tensor,
        b_o: Tensor,
    ) -> Result<Self> {
        let p = LstmParams {
            w_f,
            w_i,
            w_c,
            w_o,
            b_f,
            b_i,
            b_c,
            b_o,
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero-valued parameter record for `hidden` units over `input` features,
    /// also used as the accumulator shape for BPTT gradients.
    pub fn zeros(input: usize, hidden: usize) -> Result<Self> {
        let w = Shape::new([hidden + input, hidden])?;
        let b = Shape::new([hidden])?;
        Ok(LstmParams {
            w_f: Tensor::zeros(w.clone()),
            w_i: Tensor::zeros(w.clone()),
            w_c: Tensor::zeros(w.clone()),
            w_o: Tensor::zeros(w),
            b_f: Tensor::zeros(b.clone()),
            b_i: Tensor::zeros(b.clone()),
            b_c: Tensor::zeros(b.clone()),
            b_o: Tensor::zeros(b),
        })
    }

    fn validate(&self) -> Result<()> {
        let shape = self.w_f.shape();
        if self.w_f.rank() != 2 {
            return Err(Error::shape_mismatch(
                "lstm weights",
                "[hidden+input, hidden]",
                shape,
            ));
        }
        for (name, w) in [("w_i", &self.w_i), ("w_c", &self.w_c), ("w_o", &self.w_o)] {
            if w.shape() != shape {
                return Err(Error::shape_mismatch(
                    "lstm weights",
                    format!("{name} of shape {shape}"),
                    w.shape(),
                ));
            }
        }
        let hidden = self.hidden();
        for (name, b) in [
            ("b_f", &self.b_f),
            ("b_i", &self.b_i),
            ("b_c", &self.b_c),
            ("b_o", &self.b_o),
        ] {
            if b.rank() != 1 || b.dims()[0] != hidden {
                return Err(Error::shape_mismatch(
                    "lstm biases",
                    format!("{name} of shape [{hidden}]"),
                    b.shape(),
                ));
            }
        }
        let finite = [
            &self.w_f, &self.w_i, &self.w_c, &self.w_o, &self.b_f, &self.b_i, &self.b_c,
            &self.b_o,
        ]
        .iter()
        .all(|t| t.all_finite());
        if !finite {
            return Err(Error::InvalidParameter {
                name: "lstm params",
                reason: "non-finite value".into(),
            });
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.w_f.dims()[1]
    }

    pub fn input_features(&self) -> usize {
        self.w_f.dims()[0] - self.hidden()
    }
}

/// Hidden and cell state, both `[N, hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Result<Self> {
        let shape = Shape::new([batch, hidden])?;
        Ok(LstmState {
            h: Tensor::zeros(shape.clone()),
            c: Tensor::zeros(shape),
        })
    }
}

/// Per-timestep values cached for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmStepCache {
    concat: Tensor,
    f: Tensor,
    i: Tensor,
    c_tilde: Tensor,
    o: Tensor,
    c_prev: Tensor,
    tanh_c: Tensor,
}

/// One cell step: `[N,input]` plus the previous state to the next state.
pub fn lstm_step(
    x_t: &Tensor,
    prev: &LstmState,
    p: &LstmParams,
) -> Result<(LstmState, LstmStepCache)> {
    let hidden = p.hidden();
    let input = p.input_features();
    if x_t.rank() != 2 || x_t.dims()[1] != input {
        return Err(Error::shape_mismatch(
            "lstm_step input",
            format!("[N,{input}]"),
            x_t.shape(),
        ));
    }
    let n = x_t.dims()[0];
    if prev.h.dims() != [n, hidden] || prev.c.dims() != [n, hidden] {
        return Err(Error::shape_mismatch(
            "lstm_step state",
            format!("[{n},{hidden}]"),
            format!("h {}, c {}", prev.h.shape(), prev.c.shape()),
        ));
    }

    let concat = concat_features(&prev.h, x_t)?;
    let f = gate(&concat, &p.w_f, &p.b_f, UnaryFn::Sigmoid)?;
    let i = gate(&concat, &p.w_i, &p.b_i, UnaryFn::Sigmoid)?;
    let c_tilde = gate(&concat, &p.w_c, &p.b_c, UnaryFn::Tanh)?;
    let o = gate(&concat, &p.w_o, &p.b_o, UnaryFn::Sigmoid)?;
    let c = f.mul(&prev.c)?.add(&i.mul(&c_tilde)?)?;
    let tanh_c = c.map_unary(UnaryFn::Tanh);
    let h = o.mul(&tanh_c)?;

    let cache = LstmStepCache {
        concat,
        f,
        i,
        c_tilde,
        o,
        c_prev: prev.c.clone(),
        tanh_c,
    };
    Ok((LstmState { h, c }, cache))
}

fn concat_features(h: &Tensor, x: &Tensor) -> Result<Tensor> {
    let n = h.dims()[0];
    let (hw, xw) = (h.dims()[1], x.dims()[1]);
    let mut out = vec![0.0; n * (hw + xw)];
    for row in 0..n {
        let base = row * (hw + xw);
        out[base..base + hw].copy_from_slice(&h.data()[row * hw..(row + 1) * hw]);
        out[base + hw..base + hw + xw].copy_from_slice(&x.data()[row * xw..(row + 1) * xw]);
    }
    Tensor::from_values(Shape::new([n, hw + xw])?, out)
}

fn gate(concat: &Tensor, w: &Tensor, b: &Tensor, act: UnaryFn) -> Result<Tensor> {
    let mut pre = concat.matmul(w)?;
    let hidden = b.dims()[0];
    for row in pre.data_mut().chunks_exact_mut(hidden) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(pre.map_unary(act))
}

/// Everything `lstm_backward` needs: the per-step caches, the parameters the
/// forward ran with, and how the output was shaped.
#[derive(Clone, Debug)]
pub struct LstmCache {
    steps: Vec<LstmStepCache>,
    params: LstmParams,
    return_sequence: bool,
    batch: usize,
    input: usize,
}

/// Iterate the cell over `xs: [N,T,input]`.
///
/// Returns all hidden states `[N,T,hidden]` when `return_sequence` is set,
/// otherwise only the final hidden state `[N,hidden]`.
pub fn lstm_forward(
    xs: &Tensor,
    p: &LstmParams,
    init: &LstmState,
    return_sequence: bool,
) -> Result<(Tensor, LstmCache)> {
    if xs.rank() != 3 || xs.dims()[2] != p.input_features() {
        return Err(Error::shape_mismatch(
            "lstm_forward input",
            format!("[N,T,{}]", p.input_features()),
            xs.shape(),
        ));
    }
    let (n, t_len, input) = (xs.dims()[0], xs.dims()[1], xs.dims()[2]);
    let hidden = p.hidden();
    if init.h.dims() != [n, hidden] {
        return Err(Error::shape_mismatch(
            "lstm_forward init state",
            format!("[{n},{hidden}]"),
            init.h.shape(),
        ));
    }

    let mut state = init.clone();
    let mut steps = Vec::with_capacity(t_len);
    let mut sequence = vec![0.0; n * t_len * hidden];
    for t in 0..t_len {
        let x_t = time_slice(xs, t)?;
        let (next, cache) = lstm_step(&x_t, &state, p)?;
        for row in 0..n {
            let dst = (row * t_len + t) * hidden;
            sequence[dst..dst + hidden]
                .copy_from_slice(&next.h.data()[row * hidden..(row + 1) * hidden]);
        }
        steps.push(cache);
        state = next;
    }

    let ys = if return_sequence {
        Tensor::from_values(Shape::new([n, t_len, hidden])?, sequence)?
    } else {
        state.h.clone()
    };
    let cache = LstmCache {
        steps,
        params: p.clone(),
        return_sequence,
        batch: n,
        input,
    };
    Ok((ys, cache))
}

fn time_slice(xs: &Tensor, t: usize) -> Result<Tensor> {
    let (n, t_len, input) = (xs.dims()[0], xs.dims()[1], xs.dims()[2]);
    let mut out = vec![0.0; n * input];
    for row in 0..n {
        let src = (row * t_len + t) * input;
        out[row * input..(row + 1) * input].copy_from_slice(&xs.data()[src..src + input]);
    }
    Tensor::from_values(Shape::new([n, input])?, out)
}

/// Backpropagation through time.
///
/// `dys` must match the forward output shape (`[N,T,hidden]` for a sequence
/// forward, `[N,hidden]` otherwise). Returns the input gradients
/// `[N,T,input]`, the parameter gradients summed over timesteps, and the
/// gradient with respect to the initial state.
pub fn lstm_backward(dys: &Tensor, cache: &LstmCache) -> Result<(Tensor, LstmParams, LstmState)> {
    let p = &cache.params;
    let (n, hidden, input) = (cache.batch, p.hidden(), cache.input);
    let t_len = cache.steps.len();

    if cache.return_sequence {
        if dys.dims() != [n, t_len, hidden] {
            return Err(Error::shape_mismatch(
                "lstm_backward dys",
                format!("[{n},{t_len},{hidden}]"),
                dys.shape(),
            ));
        }
    } else if dys.dims() != [n, hidden] {
        return Err(Error::shape_mismatch(
            "lstm_backward dys",
            format!("[{n},{hidden}]"),
            dys.shape(),
        ));
    }

    let mut grads = LstmParams::zeros(input, hidden)?;
    let mut dxs = vec![0.0; n * t_len * input];
    let state_shape = Shape::new([n, hidden])?;
    let mut dh = Tensor::zeros(state_shape.clone());
    let mut dc = Tensor::zeros(state_shape);

    for t in (0..t_len).rev() {
        // inject this step's share of the output gradient
        if cache.return_sequence {
            let mut slice = vec![0.0; n * hidden];
            for row in 0..n {
                let src = (row * t_len + t) * hidden;
                slice[row * hidden..(row + 1) * hidden]
                    .copy_from_slice(&dys.data()[src..src + hidden]);
            }
            let slice = Tensor::from_values(Shape::new([n, hidden])?, slice)?;
            dh = dh.add(&slice)?;
        } else if t == t_len - 1 {
            dh = dh.add(dys)?;
        }

        let step = &cache.steps[t];
        let (dh_prev, dc_prev, dx_t) = step_backward(&dh, &dc, step, p, &mut grads)?;
        for row in 0..n {
            let dst = (row * t_len + t) * input;
            dxs[dst..dst + input].copy_from_slice(&dx_t.data()[row * input..(row + 1) * input]);
        }
        dh = dh_prev;
        dc = dc_prev;
    }

    let dxs = Tensor::from_values(Shape::new([n, t_len, input])?, dxs)?;
    Ok((dxs, grads, LstmState { h: dh, c: dc }))
}

/// Gradients of one cell step given `dh` and the carried `dc`; accumulates
/// parameter gradients into `grads` and returns `(dh_prev, dc_prev, dx_t)`.
fn step_backward(
    dh: &Tensor,
    dc_carried: &Tensor,
    step: &LstmStepCache,
    p: &LstmParams,
    grads: &mut LstmParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let hidden = p.hidden();
    let n = dh.dims()[0];

    let d_out = dh.mul(&step.tanh_c)?;
    // dc = carried + dh . o . (1 - tanh(c)^2)
    let one_minus_t2 = {
        let data = step.tanh_c.data().iter().map(|&t| 1.0 - t * t).collect();
        Tensor::from_values(step.tanh_c.shape().clone(), data)?
    };
    let dc = dc_carried.add(&dh.mul(&step.o)?.mul(&one_minus_t2)?)?;

    let df = dc.mul(&step.c_prev)?;
    let di = dc.mul(&step.c_tilde)?;
    let dc_tilde = dc.mul(&step.i)?;
    let dc_prev = dc.mul(&step.f)?;

    // pre-activation gradients through the gate nonlinearities
    let da_f = sigmoid_back(&df, &step.f)?;
    let da_i = sigmoid_back(&di, &step.i)?;
    let da_c = tanh_back(&dc_tilde, &step.c_tilde)?;
    let da_o = sigmoid_back(&d_out, &step.o)?;

    let concat_t = step.concat.transpose2()?;
    accumulate(&mut grads.w_f, &concat_t.matmul(&da_f)?)?;
    accumulate(&mut grads.w_i, &concat_t.matmul(&da_i)?)?;
    accumulate(&mut grads.w_c, &concat_t.matmul(&da_c)?)?;
    accumulate(&mut grads.w_o, &concat_t.matmul(&da_o)?)?;
    accumulate_colsum(&mut grads.b_f, &da_f);
    accumulate_colsum(&mut grads.b_i, &da_i);
    accumulate_colsum(&mut grads.b_c, &da_c);
    accumulate_colsum(&mut grads.b_o, &da_o);

    let mut dz = da_f.matmul(&p.w_f.transpose2()?)?;
    dz = dz.add(&da_i.matmul(&p.w_i.transpose2()?)?)?;
    dz = dz.add(&da_c.matmul(&p.w_c.transpose2()?)?)?;
    dz = dz.add(&da_o.matmul(&p.w_o.transpose2()?)?)?;

    // split the concat gradient back into state and input parts
    let total = dz.dims()[1];
    let input = total - hidden;
    let mut dh_prev = vec![0.0; n * hidden];
    let mut dx_t = vec![0.0; n * input];
    for row in 0..n {
        let base = row * total;
        dh_prev[row * hidden..(row + 1) * hidden]
            .copy_from_slice(&dz.data()[base..base + hidden]);
        dx_t[row * input..(row + 1) * input]
            .copy_from_slice(&dz.data()[base + hidden..base + total]);
    }
    Ok((
        Tensor::from_values(Shape::new([n, hidden])?, dh_prev)?,
        dc_prev,
        Tensor::from_values(Shape::new([n, input])?, dx_t)?,
    ))
}

fn sigmoid_back(upstream: &Tensor, activated: &Tensor) -> Result<Tensor> {
    let data = upstream
        .data()
        .iter()
        .zip(activated.data())
        .map(|(&g, &s)| g * s * (1.0 - s))
        .collect();
    Tensor::from_values(upstream.shape().clone(), data)
}

fn tanh_back(upstream: &Tensor, activated: &Tensor) -> Result<Tensor> {
    let data = upstream
        .data()
        .iter()
        .zip(activated.data())
        .map(|(&g, &t)| g * (1.0 - t * t))
        .collect();
    Tensor::from_values(upstream.shape().clone(), data)
}

fn accumulate(acc: &mut Tensor, delta: &Tensor) -> Result<()> {
    *acc = acc.add(delta)?;
    Ok(())
}

fn accumulate_colsum(acc: &mut Tensor, rows: &Tensor) {
    let width = acc.dims()[0];
    let acc = acc.data_mut();
    for row in rows.data().chunks_exact(width) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}
