//! The assembled CNN-LSTM classifier.
//!
//! Sixteen layers by the conventional accounting: input, three
//! conv/pool/batchnorm sets (ReLU after each conv), dropout, flatten, a ReLU
//! dense layer, two LSTM layers (first returns its hidden sequence, second
//! its final state), and a one-unit sigmoid output head.
//!
//! Parameters are stored as f64 but always snapped to the nearest f32 value:
//! initialization, optimizer updates, and running-statistic commits all
//! quantize. Checkpoints encode f32, so save/load round-trips are
//! bit-identical without giving up f64 arithmetic inside the layers.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, dropout_backward, dropout_forward, flatten_backward, flatten_forward,
    lstm_backward, lstm_forward, maxpool_backward, maxpool_forward, BatchNormCache,
    BatchNormParams, Conv2dCache, ConvParams, DenseActivation, DenseCache, DenseParams,
    DropoutCache, LstmCache, LstmParams, LstmState, MaxPoolCache, Mode, RunningStatsUpdate,
    CONV_KERNEL,
};
use crate::rng::stream;
use crate::tensor::{Shape, Tensor, UnaryFn};

/// Everything needed to rebuild the network's layer stack.
///
/// The dense output is reshaped into a sequence of `seq_len` steps of
/// `dense_units / seq_len` features before entering the LSTMs; the default
/// `seq_len = 1` feeds the whole 256-vector as a single timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub conv_filters: [usize; 3],
    pub dense_units: usize,
    pub lstm_units: usize,
    pub seq_len: usize,
    pub dropout_rate: f64,
    pub output_units: usize,
}

impl Default for ArchitectureDescriptor {
    fn default() -> Self {
        ArchitectureDescriptor {
            input_height: 224,
            input_width: 224,
            input_channels: 3,
            conv_filters: [32, 64, 128],
            dense_units: 256,
            lstm_units: 256,
            seq_len: 1,
            dropout_rate: 0.2,
            output_units: 1,
        }
    }
}

impl ArchitectureDescriptor {
    /// Small variant used by the verification suite and fast tests.
    pub fn tiny() -> Self {
        ArchitectureDescriptor {
            input_height: 16,
            input_width: 16,
            input_channels: 1,
            conv_filters: [2, 2, 2],
            dense_units: 8,
            lstm_units: 4,
            seq_len: 1,
            dropout_rate: 0.2,
            output_units: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |pair: &str, reason: String| -> Error {
            Error::Construction {
                reason: format!("{pair}: {reason}"),
            }
        };
        if self.input_channels == 0 {
            return Err(fail("input -> conv1", "input channels must be >= 1".into()));
        }
        if self.input_height < 8 || self.input_width < 8 {
            return Err(fail(
                "pool3 -> flatten",
                format!(
                    "input {}x{} collapses below 1x1 after three 2x2 poolings; need at least 8x8",
                    self.input_height, self.input_width
                ),
            ));
        }
        if self.conv_filters.contains(&0) {
            return Err(fail("conv -> pool", "conv filter counts must be >= 1".into()));
        }
        if self.dense_units == 0 {
            return Err(fail("flatten -> dense", "dense units must be >= 1".into()));
        }
        if self.lstm_units == 0 {
            return Err(fail("dense -> lstm1", "lstm units must be >= 1".into()));
        }
        if self.seq_len == 0 || !self.dense_units.is_multiple_of(self.seq_len) {
            return Err(fail(
                "dense -> lstm1",
                format!(
                    "sequence length {} must divide the {} dense units",
                    self.seq_len, self.dense_units
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(fail(
                "batchnorm3 -> dropout",
                format!("dropout rate {} outside [0,1)", self.dropout_rate),
            ));
        }
        if self.output_units != 1 {
            return Err(fail(
                "lstm2 -> output",
                format!(
                    "binary sigmoid head needs exactly 1 output unit, got {}",
                    self.output_units
                ),
            ));
        }
        Ok(())
    }

    /// Spatial extent after the three 2x2 poolings.
    pub fn pooled_hw(&self) -> (usize, usize) {
        let pool3 = |mut v: usize| {
            for _ in 0..3 {
                v /= 2;
            }
            v
        };
        (pool3(self.input_height), pool3(self.input_width))
    }

    /// Flattened feature count entering the dense layer.
    pub fn flattened_size(&self) -> usize {
        let (h, w) = self.pooled_hw();
        h * w * self.conv_filters[2]
    }

    /// Features per LSTM timestep.
    pub fn seq_features(&self) -> usize {
        self.dense_units / self.seq_len
    }

    /// Layer accounting: input, 3 conv, 3 pool, 3 batchnorm, dropout,
    /// flatten, dense, 2 lstm, output.
    pub fn layer_count(&self) -> usize {
        1 + 3 + 3 + 3 + 1 + 1 + 1 + 2 + 1
    }

    /// Trainable parameter count (batchnorm running statistics are state,
    /// not parameters).
    pub fn parameter_count(&self) -> usize {
        let k = CONV_KERNEL * CONV_KERNEL;
        let conv = |cin: usize, cout: usize| k * cin * cout + cout;
        let lstm = |input: usize, hidden: usize| 4 * ((hidden + input) * hidden + hidden);
        let mut total = 0;
        total += conv(self.input_channels, self.conv_filters[0]);
        total += conv(self.conv_filters[0], self.conv_filters[1]);
        total += conv(self.conv_filters[1], self.conv_filters[2]);
        total += 2 * (self.conv_filters[0] + self.conv_filters[1] + self.conv_filters[2]);
        total += self.flattened_size() * self.dense_units + self.dense_units;
        total += lstm(self.seq_features(), self.lstm_units);
        total += lstm(self.lstm_units, self.lstm_units);
        total += self.lstm_units * self.output_units + self.output_units;
        total
    }
}

/// Names of all trainable tensors in canonical (checkpoint and optimizer)
/// order.
pub const TRAINABLE_TENSORS: &[&str] = &[
    "conv1.kernels",
    "conv1.bias",
    "bn1.gamma",
    "bn1.beta",
    "conv2.kernels",
    "conv2.bias",
    "bn2.gamma",
    "bn2.beta",
    "conv3.kernels",
    "conv3.bias",
    "bn3.gamma",
    "bn3.beta",
    "dense.weight",
    "dense.bias",
    "lstm1.w_f",
    "lstm1.w_i",
    "lstm1.w_c",
    "lstm1.w_o",
    "lstm1.b_f",
    "lstm1.b_i",
    "lstm1.b_c",
    "lstm1.b_o",
    "lstm2.w_f",
    "lstm2.w_i",
    "lstm2.w_c",
    "lstm2.w_o",
    "lstm2.b_f",
    "lstm2.b_i",
    "lstm2.b_c",
    "lstm2.b_o",
    "head.weight",
    "head.bias",
];

/// Non-trainable state persisted alongside the parameters.
pub const STATE_TENSORS: &[&str] = &[
    "bn1.running_mean",
    "bn1.running_var",
    "bn2.running_mean",
    "bn2.running_var",
    "bn3.running_mean",
    "bn3.running_var",
];

/// All layer parameter records.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub conv: [ConvParams; 3],
    pub bn: [BatchNormParams; 3],
    pub dense: DenseParams,
    pub lstm1: LstmParams,
    pub lstm2: LstmParams,
    pub head: DenseParams,
}

impl ModelParams {
    /// Zero-valued parameter record with the shapes the descriptor implies;
    /// the checkpoint loader fills it in.
    pub(crate) fn zeros_like(d: &ArchitectureDescriptor) -> Result<ModelParams> {
        let chans = [
            (d.input_channels, d.conv_filters[0]),
            (d.conv_filters[0], d.conv_filters[1]),
            (d.conv_filters[1], d.conv_filters[2]),
        ];
        let conv_layer = |i: usize| -> Result<ConvParams> {
            let (cin, cout) = chans[i];
            ConvParams::new(
                Tensor::zeros(Shape::new([CONV_KERNEL, CONV_KERNEL, cin, cout])?),
                Tensor::zeros(Shape::new([cout])?),
            )
        };
        Ok(ModelParams {
            conv: [conv_layer(0)?, conv_layer(1)?, conv_layer(2)?],
            bn: [
                BatchNormParams::identity(d.conv_filters[0], 1e-5, 0.9)?,
                BatchNormParams::identity(d.conv_filters[1], 1e-5, 0.9)?,
                BatchNormParams::identity(d.conv_filters[2], 1e-5, 0.9)?,
            ],
            dense: DenseParams::new(
                Tensor::zeros(Shape::new([d.flattened_size(), d.dense_units])?),
                Tensor::zeros(Shape::new([d.dense_units])?),
            )?,
            lstm1: LstmParams::zeros(d.seq_features(), d.lstm_units)?,
            lstm2: LstmParams::zeros(d.lstm_units, d.lstm_units)?,
            head: DenseParams::new(
                Tensor::zeros(Shape::new([d.lstm_units, d.output_units])?),
                Tensor::zeros(Shape::new([d.output_units])?),
            )?,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        let (layer, field) = name.split_once('.')?;
        match layer {
            "conv1" | "conv2" | "conv3" => {
                let i = layer.as_bytes()[4] as usize - b'1' as usize;
                match field {
                    "kernels" => Some(&self.conv[i].kernels),
                    "bias" => Some(&self.conv[i].bias),
                    _ => None,
                }
            }
            "bn1" | "bn2" | "bn3" => {
                let i = layer.as_bytes()[2] as usize - b'1' as usize;
                match field {
                    "gamma" => Some(&self.bn[i].gamma),
                    "beta" => Some(&self.bn[i].beta),
                    "running_mean" => Some(&self.bn[i].running_mean),
                    "running_var" => Some(&self.bn[i].running_var),
                    _ => None,
                }
            }
            "dense" => match field {
                "weight" => Some(&self.dense.weight),
                "bias" => Some(&self.dense.bias),
                _ => None,
            },
            "lstm1" | "lstm2" => {
                let p = if layer == "lstm1" { &self.lstm1 } else { &self.lstm2 };
                lstm_field(p, field)
            }
            "head" => match field {
                "weight" => Some(&self.head.weight),
                "bias" => Some(&self.head.bias),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (layer, field) = name.split_once('.')?;
        match layer {
            "conv1" | "conv2" | "conv3" => {
                let i = layer.as_bytes()[4] as usize - b'1' as usize;
                match field {
                    "kernels" => Some(&mut self.conv[i].kernels),
                    "bias" => Some(&mut self.conv[i].bias),
                    _ => None,
                }
            }
            "bn1" | "bn2" | "bn3" => {
                let i = layer.as_bytes()[2] as usize - b'1' as usize;
                match field {
                    "gamma" => Some(&mut self.bn[i].gamma),
                    "beta" => Some(&mut self.bn[i].beta),
                    "running_mean" => Some(&mut self.bn[i].running_mean),
                    "running_var" => Some(&mut self.bn[i].running_var),
                    _ => None,
                }
            }
            "dense" => match field {
                "weight" => Some(&mut self.dense.weight),
                "bias" => Some(&mut self.dense.bias),
                _ => None,
            },
            "lstm1" | "lstm2" => {
                let p = if layer == "lstm1" {
                    &mut self.lstm1
                } else {
                    &mut self.lstm2
                };
                lstm_field_mut(p, field)
            }
            "head" => match field {
                "weight" => Some(&mut self.head.weight),
                "bias" => Some(&mut self.head.bias),
                _ => None,
            },
            _ => None,
        }
    }
}

fn lstm_field<'a>(p: &'a LstmParams, field: &str) -> Option<&'a Tensor> {
    match field {
        "w_f" => Some(&p.w_f),
        "w_i" => Some(&p.w_i),
        "w_c" => Some(&p.w_c),
        "w_o" => Some(&p.w_o),
        "b_f" => Some(&p.b_f),
        "b_i" => Some(&p.b_i),
        "b_c" => Some(&p.b_c),
        "b_o" => Some(&p.b_o),
        _ => None,
    }
}

fn lstm_field_mut<'a>(p: &'a mut LstmParams, field: &str) -> Option<&'a mut Tensor> {
    match field {
        "w_f" => Some(&mut p.w_f),
        "w_i" => Some(&mut p.w_i),
        "w_c" => Some(&mut p.w_c),
        "w_o" => Some(&mut p.w_o),
        "b_f" => Some(&mut p.b_f),
        "b_i" => Some(&mut p.b_i),
        "b_c" => Some(&mut p.b_c),
        "b_o" => Some(&mut p.b_o),
        _ => None,
    }
}

/// Gradients for every trainable tensor, mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub conv: [ConvParams; 3],
    pub bn_gamma: [Tensor; 3],
    pub bn_beta: [Tensor; 3],
    pub dense: DenseParams,
    pub lstm1: LstmParams,
    pub lstm2: LstmParams,
    pub head: DenseParams,
}

impl ModelGrads {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        let (layer, field) = name.split_once('.')?;
        match layer {
            "conv1" | "conv2" | "conv3" => {
                let i = layer.as_bytes()[4] as usize - b'1' as usize;
                match field {
                    "kernels" => Some(&self.conv[i].kernels),
                    "bias" => Some(&self.conv[i].bias),
                    _ => None,
                }
            }
            "bn1" | "bn2" | "bn3" => {
                let i = layer.as_bytes()[2] as usize - b'1' as usize;
                match field {
                    "gamma" => Some(&self.bn_gamma[i]),
                    "beta" => Some(&self.bn_beta[i]),
                    _ => None,
                }
            }
            "dense" => match field {
                "weight" => Some(&self.dense.weight),
                "bias" => Some(&self.dense.bias),
                _ => None,
            },
            "lstm1" | "lstm2" => {
                let p = if layer == "lstm1" { &self.lstm1 } else { &self.lstm2 };
                lstm_field(p, field)
            }
            "head" => match field {
                "weight" => Some(&self.head.weight),
                "bias" => Some(&self.head.bias),
                _ => None,
            },
            _ => None,
        }
    }
}

/// Forward caches for one train-mode pass, consumed by [`Model::backward`].
#[derive(Debug)]
pub struct ModelCaches {
    conv_pre: [Tensor; 3],
    conv: [Conv2dCache; 3],
    pool: [MaxPoolCache; 3],
    bn: [BatchNormCache; 3],
    dropout: DropoutCache,
    dropout_dims: Vec<usize>,
    dense: DenseCache,
    lstm1: LstmCache,
    lstm2: LstmCache,
    head: DenseCache,
    p_hat: Tensor,
    mode: Mode,
}

impl ModelCaches {
    /// Distance to the nearest piecewise-linear kink exercised by this pass:
    /// the smallest |ReLU pre-activation| and the smallest margin between the
    /// top two values of any pooling window (windows whose max is already
    /// clipped to zero are flat and therefore safe). The gradient checker
    /// requires this to clear the finite-difference step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for pre in &self.conv_pre {
            for &v in pre.data() {
                margin = margin.min(v.abs());
            }
            margin = margin.min(positive_pool_margin(&pre.map_unary(UnaryFn::Relu)));
        }
        for &v in self.dense.preact().data() {
            margin = margin.min(v.abs());
        }
        margin
    }

    /// Keep-mask of the dropout stage (empty in infer mode).
    pub fn dropout_mask(&self) -> &[bool] {
        &self.dropout.mask
    }

    pub fn dropout_dims(&self) -> &[usize] {
        &self.dropout_dims
    }
}

/// Smallest top-two gap over 2x2 windows whose max is positive.
fn positive_pool_margin(x: &Tensor) -> f64 {
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
                    if vals[0] > 0.0 {
                        margin = margin.min(vals[0] - vals[1]);
                    }
                }
            }
        }
    }
    margin
}

/// Output of a train-mode forward pass. Running-statistic updates are
/// returned rather than applied so the pass itself stays pure; the training
/// loop commits them, the gradient checker discards them.
#[derive(Debug)]
pub struct ForwardArtifacts {
    pub output: Tensor,
    pub caches: ModelCaches,
    pub bn_updates: [RunningStatsUpdate; 3],
}

#[derive(Clone, Debug)]
pub struct Model {
    pub descriptor: ArchitectureDescriptor,
    pub params: ModelParams,
    pub mode: Mode,
}

impl Model {
    /// Initialize all parameters from `seed`.
    ///
    /// He-normal for the convolution kernels and the ReLU dense weight,
    /// Xavier-uniform for the LSTM matrices and the sigmoid head, forget-gate
    /// biases at 1, every other bias at 0. Each tensor draws from its own
    /// named stream, so the values do not depend on initialization order.
    pub fn build(descriptor: &ArchitectureDescriptor, seed: u64) -> Result<Model> {
        descriptor.validate()?;
        let d = descriptor;
        let chans = [
            (d.input_channels, d.conv_filters[0]),
            (d.conv_filters[0], d.conv_filters[1]),
            (d.conv_filters[1], d.conv_filters[2]),
        ];

        let conv_layer = |idx: usize| -> Result<ConvParams> {
            let (cin, cout) = chans[idx];
            let std = (2.0 / (CONV_KERNEL * CONV_KERNEL * cin) as f64).sqrt();
            let kernels = he_normal(
                seed,
                &format!("model.init.conv{}.kernels", idx + 1),
                &[CONV_KERNEL, CONV_KERNEL, cin, cout],
                std,
            )?;
            ConvParams::new(kernels, Tensor::zeros(Shape::new([cout])?))
        };
        let conv = [conv_layer(0)?, conv_layer(1)?, conv_layer(2)?];

        let bn = [
            BatchNormParams::identity(d.conv_filters[0], 1e-5, 0.9)?,
            BatchNormParams::identity(d.conv_filters[1], 1e-5, 0.9)?,
            BatchNormParams::identity(d.conv_filters[2], 1e-5, 0.9)?,
        ];

        let flat = d.flattened_size();
        let dense = DenseParams::new(
            he_normal(
                seed,
                "model.init.dense.weight",
                &[flat, d.dense_units],
                (2.0 / flat as f64).sqrt(),
            )?,
            Tensor::zeros(Shape::new([d.dense_units])?),
        )?;

        let lstm = |idx: usize, input: usize| -> Result<LstmParams> {
            let hidden = d.lstm_units;
            let limit = (6.0 / ((hidden + input) + hidden) as f64).sqrt();
            let w = |gate: &str| {
                xavier_uniform(
                    seed,
                    &format!("model.init.lstm{idx}.w_{gate}"),
                    &[hidden + input, hidden],
                    limit,
                )
            };
            LstmParams::new(
                w("f")?,
                w("i")?,
                w("c")?,
                w("o")?,
                // forget gate starts open
                Tensor::filled(Shape::new([hidden])?, 1.0),
                Tensor::zeros(Shape::new([hidden])?),
                Tensor::zeros(Shape::new([hidden])?),
                Tensor::zeros(Shape::new([hidden])?),
            )
        };
        let lstm1 = lstm(1, d.seq_features())?;
        let lstm2 = lstm(2, d.lstm_units)?;

        let head = DenseParams::new(
            xavier_uniform(
                seed,
                "model.init.head.weight",
                &[d.lstm_units, d.output_units],
                (6.0 / (d.lstm_units + d.output_units) as f64).sqrt(),
            )?,
            Tensor::zeros(Shape::new([d.output_units])?),
        )?;

        Ok(Model {
            descriptor: descriptor.clone(),
            params: ModelParams {
                conv,
                bn,
                dense,
                lstm1,
                lstm2,
                head,
            },
            mode: Mode::Infer,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Train-mode forward pass. The caller owns the dropout stream and is
    /// responsible for committing the returned batchnorm updates.
    pub fn forward_train(&self, x: &Tensor, dropout_rng: &mut ChaCha8Rng) -> Result<ForwardArtifacts> {
        if self.mode != Mode::Train {
            return Err(Error::State {
                reason: "forward_train called on a model in infer mode".into(),
            });
        }
        let (output, caches, updates) = self.run(x, Mode::Train, dropout_rng)?;
        Ok(ForwardArtifacts {
            output,
            caches,
            bn_updates: updates.expect("train mode produces updates"),
        })
    }

    /// Inference: running statistics, identity dropout, no caches retained.
    /// Pure, so a model may be shared read-only across threads.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut unused = stream(0, "model.infer.unused");
        let (output, _, _) = self.run(x, Mode::Infer, &mut unused)?;
        Ok(output)
    }

    /// Binary decision at `threshold`: cataract when `p >= threshold`.
    pub fn predict(&self, x: &Tensor, threshold: f64) -> Result<Vec<Label>> {
        let p = self.infer(x)?;
        Ok(p
            .data()
            .iter()
            .map(|&v| if v >= threshold { Label::Cataract } else { Label::Normal })
            .collect())
    }

    /// Commit running-statistic updates from a train-mode forward, snapping
    /// to the f32 grid like every other piece of persisted state.
    pub fn apply_bn_updates(&mut self, updates: [RunningStatsUpdate; 3]) {
        for (bn, update) in self.params.bn.iter_mut().zip(updates) {
            bn.running_mean = update.mean;
            bn.running_var = update.var;
            bn.running_mean.snap_to_f32();
            bn.running_var.snap_to_f32();
        }
    }

    fn run(
        &self,
        x: &Tensor,
        mode: Mode,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, ModelCaches, Option<[RunningStatsUpdate; 3]>)> {
        let d = &self.descriptor;
        let expected = [d.input_height, d.input_width, d.input_channels];
        if x.rank() != 4 || x.dims()[1..] != expected {
            return Err(Error::shape_mismatch(
                "model input",
                format!("[N,{},{},{}]", expected[0], expected[1], expected[2]),
                x.shape(),
            ));
        }
        if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidParameter {
                name: "model input",
                reason: "pixel values must lie in [0,1]".into(),
            });
        }

        let mut conv_pre: Vec<Tensor> = Vec::with_capacity(3);
        let mut conv_caches = Vec::with_capacity(3);
        let mut pool_caches = Vec::with_capacity(3);
        let mut bn_caches = Vec::with_capacity(3);
        let mut updates = Vec::with_capacity(3);

        let mut cursor = x.clone();
        for stage in 0..3 {
            let (pre, c_cache) = conv2d_forward(&cursor, &self.params.conv[stage])?;
            let activated = pre.map_unary(UnaryFn::Relu);
            conv_pre.push(pre);
            conv_caches.push(c_cache);
            let (pooled, p_cache) = maxpool_forward(&activated)?;
            pool_caches.push(p_cache);
            let (normed, b_cache, update) =
                batchnorm_forward(&pooled, &self.params.bn[stage], mode)?;
            bn_caches.push(b_cache);
            updates.push(update);
            cursor = normed;
        }

        let dropout_dims = cursor.dims().to_vec();
        let (dropped, dropout_cache) =
            dropout_forward(&cursor, d.dropout_rate, mode, dropout_rng)?;
        let flat = flatten_forward(&dropped)?;
        let (dense_out, dense_cache) =
            dense_forward(&flat, &self.params.dense, DenseActivation::Relu)?;

        let n = x.dims()[0];
        let seq = dense_out.reshape(Shape::new([n, d.seq_len, d.seq_features()])?)?;
        let zero1 = LstmState::zeros(n, d.lstm_units)?;
        let (seq_hidden, lstm1_cache) = lstm_forward(&seq, &self.params.lstm1, &zero1, true)?;
        let zero2 = LstmState::zeros(n, d.lstm_units)?;
        let (last_hidden, lstm2_cache) =
            lstm_forward(&seq_hidden, &self.params.lstm2, &zero2, false)?;

        let (logits, head_cache) =
            dense_forward(&last_hidden, &self.params.head, DenseActivation::None)?;
        let p_hat = logits.map_unary(UnaryFn::Sigmoid);

        let caches = ModelCaches {
            conv_pre: to_array3(conv_pre),
            conv: to_array3(conv_caches),
            pool: to_array3(pool_caches),
            bn: to_array3(bn_caches),
            dropout: dropout_cache,
            dropout_dims,
            dense: dense_cache,
            lstm1: lstm1_cache,
            lstm2: lstm2_cache,
            head: head_cache,
            p_hat: p_hat.clone(),
            mode,
        };
        let updates = match mode {
            Mode::Train => {
                let mut it = updates.into_iter();
                Some([
                    it.next().unwrap().unwrap(),
                    it.next().unwrap().unwrap(),
                    it.next().unwrap().unwrap(),
                ])
            }
            Mode::Infer => None,
        };
        Ok((p_hat, caches, updates))
    }

    /// End-to-end gradients by reverse composition of the layer backwards.
    /// `dloss_dp` is the loss gradient with respect to the sigmoid output.
    pub fn backward(&self, caches: ModelCaches, dloss_dp: &Tensor) -> Result<ModelGrads> {
        if self.mode != Mode::Train || caches.mode != Mode::Train {
            return Err(Error::State {
                reason: "backward requires caches from a train-mode forward on a train-mode model"
                    .into(),
            });
        }
        if dloss_dp.shape() != caches.p_hat.shape() {
            return Err(Error::shape_mismatch(
                "backward dloss",
                caches.p_hat.shape(),
                dloss_dp.shape(),
            ));
        }

        // sigmoid head: dL/dz = dL/dp . p(1-p)
        let sig_prime = {
            let data = caches
                .p_hat
                .data()
                .iter()
                .map(|&p| p * (1.0 - p))
                .collect();
            Tensor::from_values(caches.p_hat.shape().clone(), data)?
        };
        let dlogits = dloss_dp.mul(&sig_prime)?;

        let (dh2, dhead_w, dhead_b) = dense_backward(&dlogits, &caches.head)?;
        let (dseq_hidden, lstm2_grads, _) = lstm_backward(&dh2, &caches.lstm2)?;
        let (dseq, lstm1_grads, _) = lstm_backward(&dseq_hidden, &caches.lstm1)?;

        let n = dseq.dims()[0];
        let ddense_out = dseq.reshape(Shape::new([n, self.descriptor.dense_units])?)?;
        let (dflat, ddense_w, ddense_b) = dense_backward(&ddense_out, &caches.dense)?;
        let ddropped = flatten_backward(&dflat, &caches.dropout_dims)?;
        let mut cursor = dropout_backward(&ddropped, &caches.dropout)?;

        let mut conv_grads: Vec<ConvParams> = Vec::with_capacity(3);
        let mut bn_gamma: Vec<Tensor> = Vec::with_capacity(3);
        let mut bn_beta: Vec<Tensor> = Vec::with_capacity(3);
        for stage in (0..3).rev() {
            let (dpooled, dgamma, dbeta) = batchnorm_backward(&cursor, &caches.bn[stage])?;
            bn_gamma.push(dgamma);
            bn_beta.push(dbeta);
            let dactivated = maxpool_backward(&dpooled, &caches.pool[stage])?;
            let dpre = dactivated.mul(&caches.conv_pre[stage].map_unary(UnaryFn::ReluPrime))?;
            let (dx, dkernels, dbias) = conv2d_backward(&dpre, &caches.conv[stage])?;
            conv_grads.push(ConvParams {
                kernels: dkernels,
                bias: dbias,
            });
            cursor = dx;
        }
        conv_grads.reverse();
        bn_gamma.reverse();
        bn_beta.reverse();

        Ok(ModelGrads {
            conv: to_array3(conv_grads),
            bn_gamma: to_array3(bn_gamma),
            bn_beta: to_array3(bn_beta),
            dense: DenseParams {
                weight: ddense_w,
                bias: ddense_b,
            },
            lstm1: lstm1_grads,
            lstm2: lstm2_grads,
            head: DenseParams {
                weight: dhead_w,
                bias: dhead_b,
            },
        })
    }
}

fn to_array3<T: std::fmt::Debug>(v: Vec<T>) -> [T; 3] {
    v.try_into().expect("exactly three stages")
}

fn he_normal(seed: u64, label: &str, dims: &[usize], std: f64) -> Result<Tensor> {
    let mut rng = stream(seed, label);
    let shape = Shape::new(dims.to_vec())?;
    let n = shape.element_count();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    let mut t = Tensor::from_values(shape, data)?;
    t.snap_to_f32();
    Ok(t)
}

fn xavier_uniform(seed: u64, label: &str, dims: &[usize], limit: f64) -> Result<Tensor> {
    let mut rng = stream(seed, label);
    let shape = Shape::new(dims.to_vec())?;
    let n = shape.element_count();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    let mut t = Tensor::from_values(shape, data)?;
    t.snap_to_f32();
    Ok(t)
}
