//! Finite-difference verification of every backward pass.
//!
//! Each check builds a small random instance, computes analytic gradients via
//! the layer's backward, and compares them against central differences of a
//! scalar projection loss `L = sum(y . R)` for a fixed random `R`. The error
//! metric is per element:
//!
//! ```text
//! err = |analytic - numeric| / max(|analytic| + |numeric|, 1e-3)
//! ```
//!
//! The 1e-3 floor turns the bound into an absolute tolerance of `tol * 1e-3`
//! for near-zero gradients, which sits well above the ~1e-10 noise floor of
//! central differences at `h = 1e-5` while still flagging scale errors.
//!
//! Checks over piecewise-linear layers (ReLU, max pooling) reject instances
//! whose kink margin is below the step size: differentiating across a kink
//! invalidates the finite-difference quotient regardless of gradient
//! correctness.

use crate::data::Label;
use crate::error::Result;
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, dropout_backward, dropout_forward, lstm_backward, lstm_forward,
    BatchNormParams, ConvParams, DenseActivation, DenseParams, LstmParams, LstmState, Mode,
};
use crate::model::{ArchitectureDescriptor, Model};
use crate::oracles::{random_tensor, random_uniform_tensor};
use crate::rng::{stream, sub_seed};
use crate::tensor::{Shape, Tensor};
use crate::train::bce_loss;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Per-layer pass bound.
pub const LAYER_TOLERANCE: f64 = 1e-5;
/// End-to-end pass bound.
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Suite parameters. `sabotage` scales one family's analytic gradients by
/// 1.001 before comparison; it exists so tests can verify the harness rejects
/// wrong gradients.
#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    pub seeds_per_layer: usize,
    pub sabotage: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            seeds_per_layer: 5,
            sabotage: None,
        }
    }
}

/// Names accepted by `SuiteConfig::sabotage`, in suite order.
pub const CHECK_NAMES: &[&str] = &[
    "conv2d",
    "maxpool",
    "batchnorm",
    "dropout",
    "dense",
    "lstm_step",
    "lstm_bptt",
    "model_end_to_end",
];

/// Run every check across `seeds_per_layer` derived seeds and report the
/// worst error per family.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckReport>> {
    let scale_for = |name: &str| -> f64 {
        match &cfg.sabotage {
            Some(s) if s == name => 1.001,
            _ => 1.0,
        }
    };
    let mut reports = Vec::new();
    for &name in CHECK_NAMES {
        // the end-to-end check is heavier; two seeds keep the suite quick
        let rounds = if name == "model_end_to_end" {
            2
        } else {
            cfg.seeds_per_layer
        };
        let mut worst: Option<CheckReport> = None;
        for k in 0..rounds {
            let seed = sub_seed(cfg.seed, &format!("suite.{name}.{k}"));
            let report = run_named(name, seed, scale_for(name))?;
            worst = Some(match worst {
                Some(w) if w.max_rel_err >= report.max_rel_err => w,
                _ => report,
            });
        }
        reports.push(worst.expect("at least one round ran"));
    }
    Ok(reports)
}

fn run_named(name: &str, seed: u64, analytic_scale: f64) -> Result<CheckReport> {
    match name {
        "conv2d" => check_conv2d_scaled(seed, analytic_scale),
        "maxpool" => check_maxpool_scaled(seed, analytic_scale),
        "batchnorm" => check_batchnorm_scaled(seed, analytic_scale),
        "dropout" => check_dropout_scaled(seed, analytic_scale),
        "dense" => check_dense_scaled(seed, analytic_scale),
        "lstm_step" => check_lstm_single_step_scaled(seed, analytic_scale),
        "lstm_bptt" => check_lstm_bptt_scaled(seed, analytic_scale),
        "model_end_to_end" => check_model_end_to_end_scaled(seed, analytic_scale),
        other => unreachable!("unknown check {other}"),
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-3)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        acc += x * y;
    }
    acc
}

/// Worst per-element error over every tensor in `tensors`, where
/// `analytic[i]` holds the backward's gradient for `tensors[i]` and `loss`
/// recomputes the projection loss from the (possibly perturbed) tensors.
fn fd_max_err(
    tensors: &mut [Tensor],
    analytic: &[Tensor],
    loss: &mut dyn FnMut(&[Tensor]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for ti in 0..tensors.len() {
        for ei in 0..tensors[ti].len() {
            let saved = tensors[ti].data()[ei];
            tensors[ti].data_mut()[ei] = saved + FD_STEP;
            let up = loss(tensors);
            tensors[ti].data_mut()[ei] = saved - FD_STEP;
            let down = loss(tensors);
            tensors[ti].data_mut()[ei] = saved;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[ti].data()[ei], numeric));
        }
    }
    worst
}

pub fn check_conv2d(seed: u64) -> Result<CheckReport> {
    check_conv2d_scaled(seed, 1.0)
}

fn check_conv2d_scaled(seed: u64, analytic_scale: f64) -> Result<CheckReport> {
    let mut rng = stream(seed, "gradcheck.conv2d");
    let x = random_tensor(&mut rng, &[2, 5, 5, 2], 0.1);
    let kernels = random_tensor(&mut rng, &[3, 3, 2, 3], 0.3);
    let bias = random_tensor(&mut rng, &[3], 0.3);
    let projection = random_tensor(&mut rng, &[2, 5, 5, 3], 1.0);

    let params = ConvParams::new(kernels.clone(), bias.clone())?;
    let (_, cache) = conv2d_forward(&x, &params)?;
    let (dx, dk, db) = conv2d_backward(&projection, &cache)?;
    let analytic = [
        dx.scale(analytic_scale),
        dk.scale(analytic_scale),
        db.scale(analytic_scale),
    ];

    let mut tensors = [x, kernels, bias];
    let err = fd_max_err(&mut tensors, &analytic, &mut |ts| {
        let p = ConvParams::new(ts[1].clone(), ts[2].clone()).expect("valid by construction");
        let (y, _) = conv2d_forward(&ts[0], &p).expect("valid by construction");
        dot(&y, &projection)
    });
    Ok(CheckReport {
        name: "conv2d".into(),
        max_rel_err: err,
        tolerance: LAYER_TOLERANCE,
    })
}

pub fn check_maxpool(seed: u64) -> Result<CheckReport> {
    check_maxpool_scaled(seed, 1.0)
}

fn check_maxpool_scaled(seed: u64, analytic_scale: f64) -> Result<CheckReport> {
    let mut rng = stream(seed, "gradcheck.maxpool");
    // redraw until every pooling window has a clear argmax; differentiating
    // across an argmax switch is not a gradient bug
    let x = loop {
        let candidate = random_tensor(&mut rng, &[2, 6, 6, 2], 0.1);
        if maxpool_margin(&candidate) > 20.0 * FD_STEP {
            break candidate;
        }
    };
    let projection = random_tensor(&mut rng, &[2, 3, 3, 2], 1.0);

    let (_, cache) = crate::layers::maxpool_forward(&x)?;
    let dx = crate::layers::maxpool_backward(&projection, &cache)?;
    let analytic = [dx.scale(analytic_scale)];

    let mut tensors = [x];
    let err = fd_max_err(&mut tensors, &analytic, &mut |ts| {
        let (y, _) = crate::layers::maxpool_forward(&ts[0]).expect("valid by construction");
        dot(&y, &projection)
    });
    Ok(CheckReport {
        name: "maxpool".into(),
        max_rel_err: err,
        tolerance: LAYER_TOLERANCE,
    })
}

/// Smallest gap between the best and second-best value over all 2x2 windows.
fn maxpool_margin(x: &Tensor) -> f64 {
    let (n, h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let mut margin = f64::INFINITY;
    for b in 0..n {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for ch in 0..c {
                    let mut vals = [0.0; 4];
                    for (k, val) in vals.iter_mut().enumerate() {
                        *val = x.at(&[b, 2 * i + k / 2, 2 * j + k % 2, ch]);
                    }
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    margin = margin.min(vals[0] - vals[1]);
                }
            }
        }
    }
    margin
}

pub fn check_batchnorm(seed: u64) -> Result<CheckReport> {
    check_batchnorm_scaled(seed, 1.0)
}

fn check_batchnorm_scaled(seed: u64, analytic_scale: f64) -> Result<CheckReport> {
    let mut rng = stream(seed, "gradcheck.batchnorm");
    let x = random_tensor(&mut rng, &[2, 4, 4, 3], 1.0);
    let mut gamma = random_tensor(&mut rng, &[3], 0.3);
    for v in gamma.data_mut() {
        *v += 1.0;
    }
    let beta = random_tensor(&mut rng, &[3], 0.3);
    let projection = random_tensor(&mut rng, &[2, 4, 4, 3], 1.0);

    let build = |gamma: &Tensor, beta: &Tensor| BatchNormParams {
        gamma: gamma.clone(),
        beta: beta.clone(),
        running_mean: Tensor::zeros(Shape::new([3]).unwrap()),
        running_var: Tensor::filled(Shape::new([3]).unwrap(), 1.0),
        epsilon: 1e-5,
        momentum: 0.9,
    };

    let (_, cache, _) = batchnorm_forward(&x, &build(&gamma, &beta), Mode::Train)?;
    let (dx, dgamma, dbeta) = batchnorm_backward(&projection, &cache)?;
    let analytic = [
        dx.scale(analytic_scale),
        dgamma.scale(analytic_scale),
        dbeta.scale(analytic_scale),
    ];

    let mut tensors = [x, gamma, beta];
    let err = fd_max_err(&mut tensors, &analytic, &mut |ts| {
        let (y, _, _) = batchnorm_forward(&ts[0], &build(&ts[1], &ts[2]), Mode::Train)
            .expect("valid by construction");
        dot(&y, &projection)
    });
    Ok(CheckReport {
        name: "batchnorm".into(),
        max_rel_err: err,
        tolerance: LAYER_TOLERANCE,
    })
}

pub fn check_dropout(seed: u64) -> Result<CheckReport> {
    check_dropout_scaled(seed, 1.0)
}

fn check_dropout_scaled(seed: u64, analytic_scale: f64) -> Result<CheckReport> {
    let mut rng = stream(seed, "gradcheck.dropout");
    let x = random_tensor(&mut rng, &[2, 5, 5, 3], 0.1);
    let projection = random_tensor(&mut rng, &[2, 5, 5, 3], 1.0);
    let mask_seed = sub_seed(seed, "gradcheck.dropout.mask");

    let mut mask_rng = stream(mask_seed, "mask");
    let (_, cache) = dropout_forward(&x, 0.2, Mode::Train, &mut mask_rng)?;
    let dx = dropout_backward(&projection, &cache)?;
    let analytic = [dx.scale(analytic_scale)];

    let mut tensors = [x];
    let err = fd_max_err(&mut tensors, &analytic, &mut |ts| {
        // identical stream -> identical mask on every evaluation
        let mut mask_rng = stream(mask_seed, "mask");
        let (y, _) = dropout_forward(&ts[0], 0.2, Mode::Train, &mut mask_rng)
            .expect("valid by construction");
        dot(&y, &projection)
    });
    Ok(CheckReport {
        name: "dropout".into(),
        max_rel_err: err,
        tolerance: LAYER_TOLERANCE,
    })
}

pub fn check_dense(seed: u64) -> Result<CheckReport> {
    check_dense_scaled(seed, 1.0)
}

fn check_dense_scaled(seed: u64, analytic_scale: f64) -> Result<CheckReport> {
    let mut rng = stream(seed, "gradcheck.dense");
    // redraw until all ReLU pre-activations clear the kink by a wide margin
    let (x, weight, bias) = loop {
        let x = random_tensor(&mut rng, &[4, 6], 0.1);
        let weight = random_tensor(&mut rng, &[6, 3], 0.3);
        let bias = random_tensor(&mut rng, &[3], 0.3);
        let p = DenseParams::new(weight.clone(), bias.clone())?;
        let (_, _) = dense_forward(&x, &p, DenseActivation::None)?;
        let pre = x.matmul(&weight)?;
        let margin = pre
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v + bias.data()[i % 3]).abs())
            .fold(f64::INFINITY, f64::min);
        if margin > 20.0 * FD_STEP {
            break (x, weight, bias);
        }
    };
    let projection = random_tensor(&mut rng, &[4, 3], 1.0);

    let params = DenseParams::new(weight.clone(), bias.clone())?;
    let (_, cache) = dense_forward(&x, &params, DenseActivation::Relu)?;
    let (dx, dw, db) = dense_backward(&projection, &cache)?;
    let analytic = [
        dx.scale(analytic_scale),
        dw.scale(analytic_scale),
        db.scale(analytic_scale),
    ];

    let mut tensors = [x, weight, bias];
    let err = fd_max_err(&mut tensors, &analytic, &mut |ts| {
        let p = DenseParams::new(ts[1].clone(), ts[2].clone()).expect("valid by construction");
        let (y, _) = dense_forward(&ts[0], &p, DenseActivation::Relu).expect("valid");
        dot(&y, &projection)
    });
    Ok(CheckReport {
        name: "dense".into(),
        max_rel_err: err,
        tolerance: LAYER_TOLERANCE,
    })
}

pub fn check_lstm_single_step(seed: u64) -> Result<CheckReport> {
    check_lstm_single_step_scaled(seed, 1.0)
}

fn check_lstm_single_step_scaled(seed: u64, analytic_scale: f64) -> Result<CheckReport> {
    check_lstm(seed, analytic_scale, 1, 2, 3, 4, "lstm_step")
}

pub fn check_lstm_bptt(seed: u64) -> Result<CheckReport> {
    check_lstm_bptt_scaled(seed, 1.0)
}

fn check_lstm_bptt_scaled(seed: u64, analytic_scale: f64) -> Result<CheckReport> {
    check_lstm(seed, analytic_scale, 4, 2, 3, 5, "lstm_bptt")
}

fn check_lstm(
    seed: u64,
    analytic_scale: f64,
    t_len: usize,
    batch: usize,
    input: usize,
    hidden: usize,
    name: &str,
) -> Result<CheckReport> {
    let mut rng = stream(seed, "gradcheck.lstm");
    let xs = random_tensor(&mut rng, &[batch, t_len, input], 0.1);
    let h0 = random_tensor(&mut rng, &[batch, hidden], 0.1);
    let c0 = random_tensor(&mut rng, &[batch, hidden], 0.1);
    let mut weights = Vec::new();
    for _ in 0..4 {
        weights.push(random_tensor(&mut rng, &[hidden + input, hidden], 0.3));
    }
    let mut biases = Vec::new();
    for _ in 0..4 {
        biases.push(random_tensor(&mut rng, &[hidden], 0.3));
    }
    let return_sequence = t_len > 1;
    let projection = if return_sequence {
        random_tensor(&mut rng, &[batch, t_len, hidden], 1.0)
    } else {
        random_tensor(&mut rng, &[batch, hidden], 1.0)
    };

    let build = |ts: &[Tensor]| -> (Tensor, LstmState, LstmParams) {
        (
            ts[0].clone(),
            LstmState {
                h: ts[1].clone(),
                c: ts[2].clone(),
            },
            LstmParams::new(
                ts[3].clone(),
                ts[4].clone(),
                ts[5].clone(),
                ts[6].clone(),
                ts[7].clone(),
                ts[8].clone(),
                ts[9].clone(),
                ts[10].clone(),
            )
            .expect("valid by construction"),
        )
    };

    let mut tensors = vec![xs, h0, c0];
    tensors.extend(weights);
    tensors.extend(biases);

    let (xs0, init0, params0) = build(&tensors);
    let (_, cache) = lstm_forward(&xs0, &params0, &init0, return_sequence)?;
    let (dxs, grads, dinit) = lstm_backward(&projection, &cache)?;
    let analytic = [
        dxs, dinit.h, dinit.c, grads.w_f, grads.w_i, grads.w_c, grads.w_o, grads.b_f, grads.b_i,
        grads.b_c, grads.b_o,
    ]
    .map(|t| t.scale(analytic_scale));

    let err = fd_max_err(&mut tensors, &analytic, &mut |ts| {
        let (xs, init, params) = build(ts);
        let (ys, _) = lstm_forward(&xs, &params, &init, return_sequence).expect("valid");
        dot(&ys, &projection)
    });
    Ok(CheckReport {
        name: name.into(),
        max_rel_err: err,
        tolerance: LAYER_TOLERANCE,
    })
}

pub fn check_model_end_to_end(seed: u64) -> Result<CheckReport> {
    check_model_end_to_end_scaled(seed, 1.0)
}

fn check_model_end_to_end_scaled(seed: u64, analytic_scale: f64) -> Result<CheckReport> {
    let descriptor = ArchitectureDescriptor::tiny();
    let mut model = Model::build(&descriptor, sub_seed(seed, "gradcheck.model.init"))?;
    model.set_mode(Mode::Train);
    let labels = vec![Label::Cataract, Label::Normal];

    // Fix an (input, dropout mask) pair whose loss surface is smooth around
    // the operating point: every ReLU pre-activation and pooling argmax must
    // clear the finite-difference step. Differentiating across a kink says
    // nothing about gradient correctness, so such instances are rejected.
    let mut input_rng = stream(seed, "gradcheck.model.input");
    let mut chosen = None;
    for attempt in 0..64 {
        let x = random_uniform_tensor(&mut input_rng, &[2, 16, 16, 1], 0.0, 1.0);
        let candidate = sub_seed(seed, &format!("gradcheck.model.mask.{attempt}"));
        let mut drop_rng = stream(candidate, "dropout");
        let artifacts = model.forward_train(&x, &mut drop_rng)?;
        if artifacts.caches.kink_margin() > 20.0 * FD_STEP {
            chosen = Some((x, candidate));
            break;
        }
    }
    let (x, mask_seed) = chosen.expect("no smooth instance found in 64 attempts");

    let loss_at = |model: &Model| -> f64 {
        let mut drop_rng = stream(mask_seed, "dropout");
        let artifacts = model.forward_train(&x, &mut drop_rng).expect("valid");
        bce_loss(&artifacts.output, &labels).expect("valid").0
    };

    let mut drop_rng = stream(mask_seed, "dropout");
    let artifacts = model.forward_train(&x, &mut drop_rng)?;
    let (_, dloss) = bce_loss(&artifacts.output, &labels)?;
    let grads = model.backward(artifacts.caches, &dloss)?;

    let mut worst: f64 = 0.0;
    for name in crate::model::TRAINABLE_TENSORS {
        let analytic = grads
            .tensor(name)
            .expect("gradient exists for every trainable tensor")
            .scale(analytic_scale);
        let len = analytic.len();
        for ei in 0..len {
            let saved = {
                let t = model.params.tensor_mut(name).expect("trainable tensor");
                let v = t.data()[ei];
                t.data_mut()[ei] = v + FD_STEP;
                v
            };
            let up = loss_at(&model);
            model.params.tensor_mut(name).unwrap().data_mut()[ei] = saved - FD_STEP;
            let down = loss_at(&model);
            model.params.tensor_mut(name).unwrap().data_mut()[ei] = saved;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[ei], numeric));
        }
    }
    Ok(CheckReport {
        name: "model_end_to_end".into(),
        max_rel_err: worst,
        tolerance: MODEL_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_within_tolerances() {
        let reports = run_suite(&SuiteConfig {
            seed: 7,
            seeds_per_layer: 2,
            sabotage: None,
        })
        .unwrap();
        assert_eq!(reports.len(), CHECK_NAMES.len());
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: {} > {}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
    }

    #[test]
    fn sabotaged_gradients_are_caught() {
        let reports = run_suite(&SuiteConfig {
            seed: 7,
            seeds_per_layer: 1,
            sabotage: Some("dense".into()),
        })
        .unwrap();
        let dense = reports.iter().find(|r| r.name == "dense").unwrap();
        assert!(!dense.passed(), "sabotaged dense check must fail");
        for r in reports.iter().filter(|r| r.name != "dense") {
            assert!(r.passed(), "{} should still pass", r.name);
        }
    }

    #[test]
    fn suite_is_deterministic() {
        let cfg = SuiteConfig {
            seed: 3,
            seeds_per_layer: 1,
            sabotage: None,
        };
        let a = run_suite(&cfg).unwrap();
        let b = run_suite(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
        }
    }
}
