//! Mini-batch training loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{entry_name, load_sample, ArchiveReader, Label, SampleRef};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, CheckpointMeta, Model};
use crate::rng::stream;
use crate::tensor::{Shape, Tensor};
use crate::train::{adam_step, bce_loss, AdamConfig, AdamState};

/// Where training samples come from. Implementations materialize one
/// `[H,W,C]` image per index; the loop stacks them into batches.
pub trait BatchSource {
    fn len(&self) -> usize;
    fn load(&self, idx: usize) -> Result<(Tensor, Label)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory samples, mainly for tests and synthetic experiments.
pub struct MemorySource(pub Vec<(Tensor, Label)>);

impl BatchSource for MemorySource {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn load(&self, idx: usize) -> Result<(Tensor, Label)> {
        let (t, l) = &self.0[idx];
        Ok((t.clone(), *l))
    }
}

/// Decodes, resizes, and rotates images from disk on every access.
pub struct ManifestSource {
    image_dir: PathBuf,
    refs: Vec<SampleRef>,
    height: usize,
    width: usize,
    channels: usize,
}

impl ManifestSource {
    pub fn new(
        image_dir: &Path,
        refs: Vec<SampleRef>,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Self {
        ManifestSource {
            image_dir: image_dir.to_path_buf(),
            refs,
            height,
            width,
            channels,
        }
    }
}

impl BatchSource for ManifestSource {
    fn len(&self) -> usize {
        self.refs.len()
    }

    fn load(&self, idx: usize) -> Result<(Tensor, Label)> {
        let r = &self.refs[idx];
        let sample = load_sample(&self.image_dir, r, self.height, self.width, self.channels)?;
        Ok((sample.image, r.label))
    }
}

/// Reads pre-materialized tensors from a cache archive.
pub struct ArchiveSource {
    reader: ArchiveReader,
    refs: Vec<SampleRef>,
}

impl ArchiveSource {
    /// Fails fast when the archive shape disagrees with the expected input
    /// shape or an entry is missing.
    pub fn new(
        reader: ArchiveReader,
        refs: Vec<SampleRef>,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        if reader.image_dims() != (height, width, channels) {
            let (h, w, c) = reader.image_dims();
            return Err(Error::shape_mismatch(
                "archive image shape",
                format!("[{height},{width},{channels}]"),
                format!("[{h},{w},{c}]"),
            ));
        }
        for r in &refs {
            let name = entry_name(r);
            if !reader.contains(&name) {
                return Err(Error::Corpus {
                    reason: format!("archive has no entry {name}"),
                });
            }
        }
        Ok(ArchiveSource { reader, refs })
    }
}

impl BatchSource for ArchiveSource {
    fn len(&self) -> usize {
        self.refs.len()
    }

    fn load(&self, idx: usize) -> Result<(Tensor, Label)> {
        let r = &self.refs[idx];
        Ok((self.reader.load(&entry_name(r))?, r.label))
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_cadence: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub loss_log_path: Option<PathBuf>,
    /// Epoch numbering starts after this offset when resuming.
    pub start_epoch: usize,
    /// Decision threshold used for the accuracy columns.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_cadence: 0,
            checkpoint_path: None,
            loss_log_path: None,
            start_epoch: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |name: &'static str, reason: String| Error::InvalidParameter { name, reason };
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(invalid(
                "learning_rate",
                format!("must be > 0, got {}", self.learning_rate),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// One row of the epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.wall_seconds
        )
    }
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,train_acc,test_acc,wall_seconds";

/// Train `model` on `train`, evaluating both partitions at every epoch end.
///
/// Per epoch: a seeded shuffle, mini-batches of `batch_size` (the trailing
/// partial batch is kept), train-mode forward, binary cross-entropy,
/// backward, one Adam step per batch. Dropout is live during the optimization
/// passes and off in the epoch-end evaluations, which run in infer mode. A
/// non-finite loss aborts without overwriting the last saved checkpoint.
pub fn fit(
    model: &mut Model,
    train: &dyn BatchSource,
    test: &dyn BatchSource,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidParameter {
            name: "train split",
            reason: "no training samples".into(),
        });
    }

    model.set_mode(crate::layers::Mode::Train);
    let mut adam_state = AdamState::for_model(model);
    let adam_cfg = cfg.adam();
    let mut shuffle_rng = stream(cfg.seed, "fit.shuffle");
    let mut dropout_rng = stream(cfg.seed, "fit.dropout");

    let mut log = match &cfg.loss_log_path {
        Some(path) => {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let needs_header = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
            let mut file = file;
            if needs_header {
                writeln!(file, "{EPOCH_LOG_HEADER}").map_err(|e| Error::io(path, e))?;
            }
            Some((file, path.clone()))
        }
        None => None,
    };

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..train.len()).collect();
    for epoch_offset in 0..cfg.epochs {
        let epoch = cfg.start_epoch + epoch_offset + 1;
        let started = Instant::now();
        indices.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_no, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = stack_batch(train, batch)?;
            let artifacts = model.forward_train(&x, &mut dropout_rng)?;
            model.apply_bn_updates(artifacts.bn_updates);
            let (loss, dloss) = bce_loss(&artifacts.output, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            let grads = model.backward(artifacts.caches, &dloss)?;
            adam_step(model, &grads, &mut adam_state, &adam_cfg)?;
            loss_sum += loss * batch.len() as f64;
        }

        let train_loss = loss_sum / train.len() as f64;
        let (train_truth, train_scores) = evaluate_source(model, train, cfg.batch_size)?;
        let train_acc = accuracy_at(&train_truth, &train_scores, cfg.threshold);
        let (test_truth, test_scores) = evaluate_source(model, test, cfg.batch_size)?;
        let test_acc = accuracy_at(&test_truth, &test_scores, cfg.threshold);

        let record = EpochRecord {
            epoch,
            train_loss,
            train_acc,
            test_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some((file, path)) = log.as_mut() {
            writeln!(file, "{}", record.csv_line()).map_err(|e| Error::io(&*path, e))?;
            file.flush().map_err(|e| Error::io(&*path, e))?;
        }
        records.push(record);

        if let Some(path) = &cfg.checkpoint_path {
            let due =
                cfg.checkpoint_cadence > 0 && epoch.is_multiple_of(cfg.checkpoint_cadence);
            if due || epoch_offset + 1 == cfg.epochs {
                let meta = CheckpointMeta {
                    epoch: epoch as u64,
                    seed: cfg.seed,
                };
                save_checkpoint(model, &meta, path)?;
            }
        }
    }
    Ok(records)
}

fn stack_batch(source: &dyn BatchSource, indices: &[usize]) -> Result<(Tensor, Vec<Label>)> {
    let mut labels = Vec::with_capacity(indices.len());
    let mut data = Vec::new();
    let mut dims: Option<Vec<usize>> = None;
    for &idx in indices {
        let (image, label) = source.load(idx)?;
        match &dims {
            None => dims = Some(image.dims().to_vec()),
            Some(d) if d.as_slice() == image.dims() => {}
            Some(d) => {
                return Err(Error::shape_mismatch(
                    "batch stacking",
                    format!("{d:?}"),
                    image.shape(),
                ))
            }
        }
        data.extend_from_slice(image.data());
        labels.push(label);
    }
    let d = dims.expect("at least one sample");
    let x = Tensor::from_values(Shape::new([indices.len(), d[0], d[1], d[2]])?, data)?;
    Ok((x, labels))
}

/// Infer-mode scores for every sample of a source, in index order.
pub fn evaluate_source(
    model: &Model,
    source: &dyn BatchSource,
    batch_size: usize,
) -> Result<(Vec<Label>, Vec<f64>)> {
    let indices: Vec<usize> = (0..source.len()).collect();
    let mut truth = Vec::with_capacity(indices.len());
    let mut scores = Vec::with_capacity(indices.len());
    for batch in indices.chunks(batch_size.max(1)) {
        let (x, labels) = stack_batch(source, batch)?;
        let p = model.infer(&x)?;
        truth.extend_from_slice(&labels);
        scores.extend_from_slice(p.data());
    }
    Ok((truth, scores))
}

/// Fraction of samples whose thresholded score matches the label.
pub fn accuracy_at(truth: &[Label], scores: &[f64], threshold: f64) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let correct = truth
        .iter()
        .zip(scores)
        .filter(|&(&label, &score)| {
            let predicted = if score >= threshold {
                Label::Cataract
            } else {
                Label::Normal
            };
            predicted == label
        })
        .count();
    correct as f64 / truth.len() as f64
}
