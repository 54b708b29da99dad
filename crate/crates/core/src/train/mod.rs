//! Loss, optimizer, and the training loop.

mod adam;
mod fit;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use fit::{
    accuracy_at, evaluate_source, fit, ArchiveSource, BatchSource, EpochRecord, ManifestSource,
    MemorySource, TrainConfig,
};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to this band before the logs so perfect
/// predictions cannot produce infinities.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy and its gradient with respect to the predicted
/// probabilities. The gradient is evaluated at the clamped probability.
pub fn bce_loss(p_hat: &Tensor, labels: &[Label]) -> Result<(f64, Tensor)> {
    let n = labels.len();
    if p_hat.rank() != 2 || p_hat.dims() != [n, 1] {
        return Err(Error::shape_mismatch(
            "bce_loss",
            format!("[{n},1] probabilities"),
            p_hat.shape(),
        ));
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for (i, (&p, &label)) in p_hat.data().iter().zip(labels).enumerate() {
        let y = label.as_f64();
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        loss -= scale * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        grad[i] = -scale * (y / pc - (1.0 - y) / (1.0 - pc));
    }
    Ok((loss, Tensor::from_values(p_hat.shape().clone(), grad)?))
}
